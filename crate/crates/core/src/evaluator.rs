//! Ranking evaluation: fused scores for every candidate entity, ranks under
//! the raw or filtered protocol, MRR/Hit@10 per direction, the easy/hard
//! memory split, score dumps and attention traces.

use std::io::{BufRead, Write};

use krlm_numerics::{ParamStore, Real, Scope, Tape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::LayerTrace;
use crate::dataset::{DirectedQuery, Split};
use crate::encoder::{rank_order, Memory};
use crate::error::{KrlmError, Result};
use crate::kg::GraphContext;
use crate::model::Model;
use crate::predictor::{fuse, logistic};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Raw,
    #[default]
    Filtered,
}

impl std::str::FromStr for Protocol {
    type Err = KrlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "filtered" => Ok(Self::Filtered),
            other => Err(KrlmError::Config(format!("unknown protocol `{other}` (raw|filtered)"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Filtered => "filtered",
        })
    }
}

/// Numeric precision of forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = KrlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            other => Err(KrlmError::Config(format!("unknown mode `{other}` (f64|f32)"))),
        }
    }
}

/// Per-entity scores of one directed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub head: usize,
    pub rel: usize,
    pub answer: usize,
    pub inverse: bool,
    pub index: usize,
    pub struct_scores: Vec<f64>,
    pub krlm_scores: Vec<f64>,
    pub fused: Vec<f64>,
    pub memory: Vec<usize>,
    #[serde(skip)]
    pub trace: Vec<LayerTrace>,
}

impl QueryScores {
    pub fn query(&self) -> DirectedQuery {
        DirectedQuery {
            index: self.index,
            inverse: self.inverse,
            head: self.head,
            rel: self.rel,
            answer: self.answer,
        }
    }

    /// Every entity, best first (ties by ascending id).
    pub fn prediction(&self) -> Vec<usize> {
        rank_order(&self.fused)
    }

    pub fn is_easy(&self) -> bool {
        self.memory.contains(&self.answer)
    }
}

fn score_with<T: Real>(model: &Model, store: &ParamStore, ctx: &GraphContext, q: DirectedQuery) -> Result<QueryScores> {
    let tape = Tape::<T>::new();
    let s = Scope::new(&tape, store);
    let out = model.forward(&s, ctx, q.query(), &ctx.entity_edges)?;
    let sig = |v: krlm_numerics::Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| logistic(x.f64())).collect() };
    let struct_scores = sig(out.struct_logits);
    let krlm_scores = sig(out.krlm_logits);
    let fused = fuse(&struct_scores, &krlm_scores);
    if fused.iter().any(|x| !x.is_finite()) {
        return Err(KrlmError::Invalid(format!("non-finite score for query {q:?}")));
    }
    let Memory { ids, .. } = out.memory;
    Ok(QueryScores {
        head: q.head,
        rel: q.rel,
        answer: q.answer,
        inverse: q.inverse,
        index: q.index,
        struct_scores,
        krlm_scores,
        fused,
        memory: ids,
        trace: out.trace,
    })
}

/// Scores one query over the full entity set of `ctx`.
pub fn score_query(
    model: &Model,
    store: &ParamStore,
    ctx: &GraphContext,
    q: DirectedQuery,
    precision: Precision,
) -> Result<QueryScores> {
    if q.answer >= ctx.kg.num_entities() || q.head >= ctx.kg.num_entities() {
        return Err(KrlmError::Invalid(format!("query {q:?} references an entity outside the graph")));
    }
    match precision {
        Precision::F64 => score_with::<f64>(model, store, ctx, q),
        Precision::F32 => score_with::<f32>(model, store, ctx, q),
    }
}

/// Scores many queries; result order matches `queries` whatever `jobs` is.
pub fn score_all(
    model: &Model,
    store: &ParamStore,
    ctx: &GraphContext,
    queries: &[DirectedQuery],
    precision: Precision,
    jobs: usize,
) -> Result<Vec<QueryScores>> {
    if jobs <= 1 {
        return queries.iter().map(|&q| score_query(model, store, ctx, q, precision)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| KrlmError::Config(e.to_string()))?;
    pool.install(|| {
        queries
            .par_iter()
            .map(|&q| score_query(model, store, ctx, q, precision))
            .collect()
    })
}

/// `1 + #{j ≠ a : f_j > f_a or (f_j = f_a and j < a)}`, skipping `excluded`
/// candidates (sorted) other than the answer itself.
pub fn rank_of(fused: &[f64], answer: usize, excluded: &[usize]) -> usize {
    let fa = fused[answer];
    let mut rank = 1;
    for (j, &f) in fused.iter().enumerate() {
        if j == answer || excluded.binary_search(&j).is_ok() {
            continue;
        }
        if f > fa || (f == fa && j < answer) {
            rank += 1;
        }
    }
    rank
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hit10: f64,
    pub count: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut rr, mut hit, mut n) = (0.0, 0usize, 0usize);
        for r in ranks {
            rr += 1.0 / r as f64;
            hit += usize::from(r <= 10);
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            mrr: rr / n as f64,
            hit10: hit as f64 / n as f64,
            count: n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    /// `(h, r, ?)` queries.
    pub tail: RankingMetrics,
    /// `(t, r⁻¹, ?)` queries.
    pub head: RankingMetrics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EasyHardReport {
    pub memory_k: usize,
    pub easy: RankingMetrics,
    pub hard: RankingMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub protocol: Protocol,
    pub mrr: f64,
    pub hit10: f64,
    pub queries: usize,
    pub per_direction: DirectionMetrics,
    pub easy_hard: EasyHardReport,
}

/// Rank of every scored query under `protocol`.
pub fn ranks(scores: &[QueryScores], split: &Split, protocol: Protocol) -> Vec<usize> {
    scores
        .iter()
        .map(|q| {
            let excluded = match protocol {
                Protocol::Raw => &[][..],
                Protocol::Filtered => split.filter.known(q.head, q.rel),
            };
            rank_of(&q.fused, q.answer, excluded)
        })
        .collect()
}

pub fn easy_hard_report(scores: &[QueryScores], ranks: &[usize], memory_k: usize) -> EasyHardReport {
    let pick = |easy: bool| {
        RankingMetrics::from_ranks(
            scores
                .iter()
                .zip(ranks)
                .filter(|(q, _)| q.is_easy() == easy)
                .map(|(_, &r)| r),
        )
    };
    EasyHardReport {
        memory_k,
        easy: pick(true),
        hard: pick(false),
    }
}

pub fn report(dataset: &str, scores: &[QueryScores], split: &Split, protocol: Protocol, memory_k: usize) -> EvalReport {
    let r = ranks(scores, split, protocol);
    let pooled = RankingMetrics::from_ranks(r.iter().copied());
    let dir = |inverse: bool| {
        RankingMetrics::from_ranks(
            scores
                .iter()
                .zip(&r)
                .filter(|(q, _)| q.inverse == inverse)
                .map(|(_, &x)| x),
        )
    };
    EvalReport {
        dataset: dataset.to_string(),
        protocol,
        mrr: pooled.mrr,
        hit10: pooled.hit10,
        queries: pooled.count,
        per_direction: DirectionMetrics {
            tail: dir(false),
            head: dir(true),
        },
        easy_hard: easy_hard_report(scores, &r, memory_k),
    }
}

/// Scores both directions of every held-out query of `split` and reports.
#[allow(clippy::too_many_arguments)]
pub fn rank_queries(
    model: &Model,
    store: &ParamStore,
    dataset: &str,
    split: &Split,
    protocol: Protocol,
    precision: Precision,
    jobs: usize,
) -> Result<(EvalReport, Vec<QueryScores>)> {
    let queries = split.directed_queries();
    let scores = score_all(model, store, &split.ctx, &queries, precision, jobs)?;
    let rep = report(dataset, &scores, split, protocol, model.config.memory_k);
    Ok((rep, scores))
}

/// One line per query: `{head, rel, answer, inverse, index, struct_scores,
/// krlm_scores, fused, memory}`.
pub fn write_score_dump(w: &mut impl Write, scores: &[QueryScores]) -> Result<()> {
    for q in scores {
        serde_json::to_writer(&mut *w, q)?;
        w.write_all(b"\n").map_err(|e| KrlmError::io("<score dump>", e))?;
    }
    Ok(())
}

pub fn read_score_dump(r: impl BufRead) -> Result<Vec<QueryScores>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| KrlmError::io("<score dump>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub entity: String,
    pub fused: f64,
    #[serde(rename = "struct")]
    pub struct_score: f64,
    pub krlm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub query: [String; 3],
    pub top10: Vec<PredictionEntry>,
}

pub fn prediction_line(ctx: &GraphContext, q: &QueryScores) -> PredictionLine {
    let kg = &ctx.kg;
    let name = |e: usize| kg.entities()[e].name.clone();
    PredictionLine {
        query: [name(q.head), kg.relations()[q.rel].name.clone(), "?".into()],
        top10: q
            .prediction()
            .into_iter()
            .take(10)
            .map(|e| PredictionEntry {
                entity: name(e),
                fused: q.fused[e],
                struct_score: q.struct_scores[e],
                krlm: q.krlm_scores[e],
            })
            .collect(),
    }
}

/// Attention trace record: one line per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub layer: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub memory_entity_ids: Vec<usize>,
    pub memory_struct_scores: Vec<f64>,
}

pub fn trace_lines(q: &QueryScores) -> Vec<TraceLine> {
    q.trace
        .iter()
        .map(|t| TraceLine {
            layer: t.layer,
            alpha: t.alpha.clone(),
            beta: t.beta.clone(),
            memory_entity_ids: q.memory.clone(),
            memory_struct_scores: q.memory.iter().map(|&e| q.struct_scores[e]).collect(),
        })
        .collect()
}
