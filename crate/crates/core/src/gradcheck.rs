//! Finite-difference gradient checks on three seeded random instances: the two
//! structural encoders, one memory-augmented attention layer, and the full
//! training objective on a five-entity graph.

use std::fmt;
use std::str::FromStr;

use krlm_numerics::{check_params, GradCheckOptions, GradCheckReport, ParamStore, Scope, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_layer, MemoryWeights};
use crate::backbone::{Backbone, BackboneConfig};
use crate::dataset::{DirectedQuery, Split};
use crate::encoder::{encode_entities, EncoderConfig, EntityGnn, RelationGnn};
use crate::error::{KrlmError, Result};
use crate::instruction::Template;
use crate::kg::{EntityRecord, GraphContext, KnowledgeGraph, RelationRecord, Triplet};
use crate::loss::BceSign;
use crate::model::{Model, ModelConfig};
use crate::trainer::{build_tokenizer, query_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instance {
    Encoders,
    Attention,
    FullLoss,
}

impl Instance {
    pub const ALL: [Instance; 3] = [Instance::Encoders, Instance::Attention, Instance::FullLoss];
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instance::Encoders => "encoders",
            Instance::Attention => "attention",
            Instance::FullLoss => "full-loss",
        })
    }
}

impl FromStr for Instance {
    type Err = KrlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoders" => Ok(Self::Encoders),
            "attention" => Ok(Self::Attention),
            "full-loss" => Ok(Self::FullLoss),
            other => Err(KrlmError::Config(format!(
                "unknown gradcheck instance `{other}` (encoders|attention|full-loss)"
            ))),
        }
    }
}

/// Central differences at ε = 1e-5 in 64-bit mode.
pub fn default_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        floor: 1e-6,
        max_coords: 24,
    }
}

fn toy_graph(n_ent: usize, n_rel: usize, triplets: &[(usize, usize, usize)]) -> Result<KnowledgeGraph> {
    let ents = (0..n_ent)
        .map(|id| EntityRecord {
            id,
            name: format!("node {id}"),
            description: format!("toy node {id}"),
        })
        .collect();
    let rels = (0..n_rel)
        .map(|id| RelationRecord {
            id,
            name: format!("link {id}"),
            description: format!("toy link {id}"),
            is_inverse: false,
            base_id: id,
        })
        .collect();
    let ts = triplets.iter().map(|&(h, r, t)| Triplet::new(h, r, t)).collect();
    KnowledgeGraph::new(ents, rels, ts)?.0.augment_inverses()
}

/// Fixed random weights `C` so that `Σ C ⊙ X` reaches every entry of `X`.
fn weighted_sum(tape: &Tape<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let [r, c] = tape.shape(x);
    let w = tape.constant(Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)));
    Ok(tape.sum_all(tape.mul(x, w)?))
}

/// `count` random triplets over `n_ent` entities and `n_rel` relations,
/// after a fixed `(0, 0, 1)` so the graph is never empty.
fn random_triplets(rng: &mut ChaCha8Rng, n_ent: usize, n_rel: usize, count: usize) -> Vec<(usize, usize, usize)> {
    let mut ts = vec![(0, 0, 1)];
    ts.extend((1..count).map(|_| {
        (
            rng.random_range(0..n_ent),
            rng.random_range(0..n_rel),
            rng.random_range(0..n_ent),
        )
    }));
    ts
}

fn encoders(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kg = toy_graph(6, 2, &random_triplets(&mut rng, 6, 2, 8))?;
    let ctx = GraphContext::new(kg)?;
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { layers: 2, dim: 5 };
    let gr = RelationGnn::new(&mut store, "gnn_r", cfg, &mut rng)?;
    let ge = EntityGnn::new(&mut store, "gnn_e", cfg, &mut rng)?;
    let n_rel = ctx.kg.num_relations();
    let n_ent = ctx.kg.num_entities();
    check_params(
        &store,
        |tape: &Tape<f64>, store: &ParamStore| -> Result<Var> {
            let s = Scope::new(tape, store);
            let r = gr.forward(&s, n_rel, &ctx.relation_edges, 1)?;
            let e = encode_entities(&s, &ge, n_ent, &ctx.entity_edges, r, 0, 1)?;
            let mut w = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
            let a = weighted_sum(tape, r, &mut w)?;
            let b = weighted_sum(tape, e, &mut w)?;
            Ok(tape.add(a, b)?)
        },
        opts,
    )
}

fn attention(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (f, d, m, k) = (8, 4, 5, 3);
    let mut store = ParamStore::new();
    let mut cfg = BackboneConfig::new(1, f, 64, seed);
    cfg.ffn = 2 * f;
    let backbone = Backbone::init(&cfg, &mut store)?;
    // the check covers the frozen backbone weights as well
    store.set_trainable_prefix("backbone.layer", true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let memory = MemoryWeights::new(&mut store, "memory", 1, f, d, &mut rng)?;
    let h = store.add("h", Tensor::from_fn(m, f, |_, _| rng.random_range(-1.0..1.0)), true)?;
    let mem = store.add("mem", Tensor::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0)), true)?;
    check_params(
        &store,
        |tape: &Tape<f64>, store: &ParamStore| -> Result<Var> {
            let s = Scope::new(tape, store);
            let (out, _) = attention_layer(&s, &backbone, &memory, 0, s.var(h), Some(s.var(mem)))?;
            let mut w = ChaCha8Rng::seed_from_u64(seed ^ 0x5A);
            weighted_sum(tape, out, &mut w)
        },
        opts,
    )
}

fn full_loss(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kg = toy_graph(5, 2, &random_triplets(&mut rng, 5, 2, 7))?;
    let split = Split::new(kg.strip_inverses()?, Vec::new(), Default::default())?;
    let template = Template::default_template();
    let tok = build_tokenizer(&split.ctx.kg, &template, 300);
    let mut bb = BackboneConfig::new(1, 8, tok.vocab_size(), seed);
    bb.ffn = 16;
    let config = ModelConfig {
        backbone: bb,
        encoder: EncoderConfig { layers: 2, dim: 4 },
        // memory covers every entity, so a perturbation can reorder it but
        // never change its contents
        memory_k: 5,
        vocab_items: 3,
        desc_tokens: 3,
        seed,
    };
    let (model, store) = Model::new(config, tok, template)?;
    let q = DirectedQuery::both(0, Triplet::new(0, 0, 1), split.num_base_relations())[0];
    let negatives = [0, 2, 3, 4];
    check_params(
        &store,
        |tape: &Tape<f64>, store: &ParamStore| -> Result<Var> {
            let s = Scope::new(tape, store);
            let (vars, _) = query_loss(&model, &s, &split, q, &negatives, 0.5, BceSign::Standard)?;
            Ok(vars.total)
        },
        opts,
    )
}

pub fn run(instance: Instance, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    match instance {
        Instance::Encoders => encoders(seed, opts),
        Instance::Attention => attention(seed, opts),
        Instance::FullLoss => full_loss(seed, opts),
    }
}
