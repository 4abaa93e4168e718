//! Training loop: per step, `b` directed training queries each run the full
//! model, score one positive against sampled negatives and backpropagate the
//! distillation loss; batch-mean gradients feed AdamW with accumulation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use krlm_numerics::{AdamW, AdamWConfig, OptimizerState, ParamId, ParamStore, Real, Scope, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DirectedQuery, Split};
use crate::error::{KrlmError, Result};
use crate::evaluator::{report, score_all, Precision, Protocol};
use crate::instruction::Template;
use crate::kg::KnowledgeGraph;
use crate::loss::{loss_on_tape, BceSign, LossBreakdown, LossVars};
use crate::model::{ForwardOutput, Model};
use crate::sampler::sample_negatives;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    #[default]
    E2e,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Defaults to one pass over the directed training queries.
    pub steps_per_epoch: Option<u64>,
    /// Hard cap on total steps, overriding `epochs`.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub negatives: usize,
    pub lambda: f64,
    pub bce_sign: BceSign,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub accumulation: usize,
    pub seed: u64,
    /// Validate every this many steps (0: only after the last step).
    pub valid_every: u64,
    /// Validation uses at most this many held-out triplets (0: all).
    pub valid_limit: usize,
    pub precision: Precision,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::E2e,
            epochs: 10,
            steps_per_epoch: None,
            max_steps: None,
            batch_size: 4,
            negatives: 256,
            lambda: 0.5,
            bce_sign: BceSign::Standard,
            lr: 5e-4,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
            accumulation: 4,
            seed: 0,
            valid_every: 0,
            valid_limit: 0,
            precision: Precision::F64,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 || self.accumulation == 0 || self.jobs == 0 {
            return Err(KrlmError::Config(
                "batch size, negatives, accumulation and jobs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(KrlmError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(KrlmError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_queries: usize) -> u64 {
        self.steps_per_epoch
            .unwrap_or_else(|| train_queries.div_ceil(self.batch_size) as u64)
    }

    pub fn total_steps(&self, train_queries: usize) -> u64 {
        self.max_steps
            .unwrap_or(self.epochs as u64 * self.steps_per_epoch(train_queries))
    }

    pub fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        let updates = total_steps.div_ceil(self.accumulation as u64);
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_updates: AdamWConfig::warmup_for(updates, self.warmup_fraction),
            accumulation: self.accumulation,
            ..AdamWConfig::default()
        }
    }
}

/// All name and description text of `kg`, plus the template literals.
pub fn tokenizer_corpus(kg: &KnowledgeGraph, template: &Template) -> Vec<String> {
    let mut out = vec![template.literal_text()];
    for e in kg.entities() {
        out.push(format!("{}: {}", e.name, e.description));
    }
    for r in kg.relations() {
        out.push(format!("{}: {}", r.name, r.description));
    }
    out
}

pub fn build_tokenizer(kg: &KnowledgeGraph, template: &Template, max_vocab: usize) -> Tokenizer {
    let corpus = tokenizer_corpus(kg, template);
    Tokenizer::train(corpus.iter().map(String::as_str), max_vocab)
}

/// 64-bit mix of a seed with stream coordinates (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the model on one training query with its own edge removed and builds
/// the loss over `[answer] ++ negatives`.
pub fn query_loss<T: Real>(
    model: &Model,
    s: &Scope<T>,
    split: &Split,
    q: DirectedQuery,
    negatives: &[usize],
    lambda: f64,
    sign: BceSign,
) -> Result<(LossVars, ForwardOutput)> {
    let t = s.tape();
    let edges = split.ctx.edges_without(&q.as_triplet());
    let out = model.forward(s, &split.ctx, q.query(), &edges)?;
    let mut cand = Vec::with_capacity(negatives.len() + 1);
    cand.push(q.answer);
    cand.extend_from_slice(negatives);
    let sc = t.gather_rows(out.struct_logits, cand.clone())?;
    let kc = t.gather_rows(out.krlm_logits, cand)?;
    Ok((loss_on_tape(t, sc, kc, lambda, sign)?, out))
}

type Grads = BTreeMap<ParamId, Tensor<f64>>;

fn query_step<T: Real>(
    model: &Model,
    store: &ParamStore,
    split: &Split,
    q: DirectedQuery,
    negatives: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Grads)> {
    let tape = Tape::<T>::new();
    let s = Scope::new(&tape, store);
    let (vars, _) = query_loss(model, &s, split, q, negatives, cfg.lambda, cfg.bce_sign)?;
    let loss = vars.breakdown(&tape, cfg.lambda);
    if !loss.is_finite() {
        return Ok((loss, Grads::new()));
    }
    s.bind_trainable();
    let grads = tape.backward(vars.total)?;
    Ok((
        loss,
        grads.into_params().into_iter().map(|(k, v)| (k, v.to_f64())).collect(),
    ))
}

/// Per-step loss line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub bce_struct: f64,
    pub bce_krlm: f64,
    pub kl_s2k: f64,
    pub kl_k2s: f64,
}

impl From<LossBreakdown> for StepLoss {
    fn from(b: LossBreakdown) -> Self {
        Self {
            total: b.total,
            bce_struct: b.bce_struct,
            bce_krlm: b.bce_krlm,
            kl_s2k: b.kl_struct_to_krlm,
            kl_k2s: b.kl_krlm_to_struct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: StepLoss,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    pub step: u64,
    pub mrr: f64,
    pub hit10: f64,
}

/// State written when a step produces a non-finite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanSnapshot {
    pub step: u64,
    pub queries: Vec<[usize; 3]>,
    pub losses: Vec<StepLoss>,
    pub parameter_checksum: String,
    pub optimizer_updates: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: ParamStore,
    /// Parameters at the best validation MRR (fused scores), if validated.
    pub best: Option<(ValidRecord, ParamStore)>,
    pub optimizer: OptimizerState,
    pub log: Vec<StepRecord>,
    pub validations: Vec<ValidRecord>,
    pub steps: u64,
}

/// Mean of the batch's loss breakdowns.
fn mean_loss(parts: &[LossBreakdown], lambda: f64) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        bce_krlm: avg(|b| b.bce_krlm),
        bce_struct: avg(|b| b.bce_struct),
        kl_struct_to_krlm: avg(|b| b.kl_struct_to_krlm),
        kl_krlm_to_struct: avg(|b| b.kl_krlm_to_struct),
        total: avg(|b| b.total),
        lambda,
    }
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub split: &'a Split,
    pub config: TrainConfig,
    /// Receives `metrics.jsonl` and any NaN snapshot.
    pub out_dir: Option<PathBuf>,
    /// Dataset name used in validation reports.
    pub dataset: String,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, split: &'a Split, config: TrainConfig) -> Self {
        Self {
            model,
            split,
            config,
            out_dir: None,
            dataset: "train".into(),
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    fn validate_model(&self, store: &ParamStore, step: u64, pool: Option<&rayon::ThreadPool>) -> Result<ValidRecord> {
        let cfg = &self.config;
        let mut queries = self.split.directed_queries();
        if cfg.valid_limit > 0 {
            queries.truncate(2 * cfg.valid_limit);
        }
        let run = || score_all(self.model, store, &self.split.ctx, &queries, cfg.precision, 1);
        let scores = match pool {
            Some(p) => p.install(|| {
                queries
                    .par_iter()
                    .map(|&q| crate::evaluator::score_query(self.model, store, &self.split.ctx, q, cfg.precision))
                    .collect::<Result<Vec<_>>>()
            })?,
            None => run()?,
        };
        let rep = report(&self.dataset, &scores, self.split, Protocol::Filtered, self.model.config.memory_k);
        Ok(ValidRecord {
            step,
            mrr: rep.mrr,
            hit10: rep.hit10,
        })
    }

    fn write_snapshot(&self, snap: &NanSnapshot) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("nan_snapshot.json");
            std::fs::write(&path, serde_json::to_vec_pretty(snap)?).map_err(|e| KrlmError::io(&path, e))?;
        }
        Ok(())
    }

    /// Trains `store` in place from `optimizer` state (fresh when `None`).
    pub fn run(&self, store: &mut ParamStore, optimizer: Option<OptimizerState>) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        let queries = self.split.graph_queries();
        if queries.is_empty() {
            return Err(KrlmError::Graph("training graph has no triplets".into()));
        }
        let total = cfg.total_steps(queries.len());
        let per_epoch = cfg.steps_per_epoch(queries.len()).max(1);
        let opt_cfg = cfg.optimizer(total);
        let mut opt = match optimizer {
            Some(state) => AdamW::with_state(opt_cfg.clone(), state),
            None => AdamW::new(opt_cfg.clone()),
        };
        let pool = if cfg.jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.jobs)
                    .build()
                    .map_err(|e| KrlmError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let mut metrics = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| KrlmError::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some(BufWriter::new(File::create(&path).map_err(|e| KrlmError::io(&path, e))?))
            }
            None => None,
        };
        let n_ent = self.split.ctx.kg.num_entities();

        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0usize;
        let mut epoch = u64::MAX;
        let mut log = Vec::with_capacity(total as usize);
        let mut validations = Vec::new();
        let mut best: Option<(ValidRecord, ParamStore)> = None;

        for step in 0..total {
            let e = step / per_epoch;
            if e != epoch || cursor + cfg.batch_size > order.len() {
                epoch = e;
                order = (0..queries.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, e)));
                cursor = 0;
            }
            let batch: Vec<(DirectedQuery, Vec<usize>)> = (0..cfg.batch_size)
                .map(|i| {
                    let q = queries[order[(cursor + i) % order.len()]];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2 + step, i as u64));
                    sample_negatives(n_ent, q.answer, cfg.negatives, &mut rng).map(|neg| (q, neg.ids))
                })
                .collect::<Result<_>>()?;
            cursor += cfg.batch_size;

            let work = |(q, neg): &(DirectedQuery, Vec<usize>)| match cfg.precision {
                Precision::F64 => query_step::<f64>(self.model, store, self.split, *q, neg, cfg),
                Precision::F32 => query_step::<f32>(self.model, store, self.split, *q, neg, cfg),
            };
            let results: Vec<(LossBreakdown, Grads)> = match &pool {
                Some(p) => p.install(|| batch.par_iter().map(work).collect::<Result<_>>())?,
                None => batch.iter().map(work).collect::<Result<_>>()?,
            };

            let losses: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
            if losses.iter().any(|l| !l.is_finite()) {
                let snap = NanSnapshot {
                    step,
                    queries: batch.iter().map(|(q, _)| [q.head, q.rel, q.answer]).collect(),
                    losses: losses.iter().map(|&l| l.into()).collect(),
                    parameter_checksum: store.checksum(),
                    optimizer_updates: opt.updates(),
                };
                self.write_snapshot(&snap)?;
                return Err(KrlmError::NonFiniteLoss { step });
            }

            let mut sum: Grads = BTreeMap::new();
            for (_, g) in results {
                for (id, t) in g {
                    match sum.get_mut(&id) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            sum.insert(id, t);
                        }
                    }
                }
            }
            let inv = 1.0 / cfg.batch_size as f64;
            for g in sum.values_mut() {
                g.scale_assign(inv);
            }
            let lr = opt_cfg.lr_at(opt.updates());
            opt.step(store, &sum)?;

            let rec = StepRecord {
                step,
                loss: mean_loss(&losses, cfg.lambda).into(),
                lr,
            };
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| KrlmError::io("metrics.jsonl", e))?;
            }
            log::debug!("step {step} loss {:.5} lr {lr:.2e}", rec.loss.total);
            log.push(rec);

            let last = step + 1 == total;
            if (cfg.valid_every > 0 && (step + 1) % cfg.valid_every == 0) || last {
                if last {
                    opt.flush(store);
                }
                if !self.split.queries.is_empty() {
                    let v = self.validate_model(store, step + 1, pool.as_ref())?;
                    log::info!("step {} valid mrr {:.4} hit@10 {:.4}", v.step, v.mrr, v.hit10);
                    validations.push(v);
                    if best.as_ref().is_none_or(|(b, _)| v.mrr > b.mrr) {
                        best = Some((v, store.clone()));
                    }
                }
            }
        }
        if let Some(mut w) = metrics {
            w.flush().map_err(|e| KrlmError::io("metrics.jsonl", e))?;
        }
        Ok(TrainOutcome {
            last: store.clone(),
            best,
            optimizer: opt.state().clone(),
            log,
            validations,
            steps: total,
        })
    }
}

/// Mean loss over consecutive windows of `width` steps.
pub fn windowed_means(log: &[StepRecord], width: usize) -> Vec<f64> {
    log.chunks(width)
        .filter(|c| c.len() == width)
        .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / width as f64)
        .collect()
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| KrlmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(KrlmError::from))
        .collect()
}
