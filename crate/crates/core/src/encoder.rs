//! Query-conditioned structural encoders.
//!
//! The relation GNN runs over the relational graph starting from an all-ones
//! indicator at the query relation. The entity GNN runs over the knowledge
//! graph starting from the query relation's embedding at the head entity.
//! Both use DistMult messages with sum aggregation over in-edges and a
//! `ReLU(Linear([h ‖ agg]))` update.

use std::sync::Arc;

use krlm_numerics::{EdgeIndex, ParamId, ParamStore, Real, Scope, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrlmError, Result};
use crate::nn::{indicator_rows, uniform_init, Linear, Mlp};
use crate::relgraph::Pattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(KrlmError::Config(format!("encoder dim {} is below 4", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGnn {
    /// One `d`-vector per relative pattern.
    pub patterns: ParamId,
    pub updates: Vec<Linear>,
    pub dim: usize,
}

impl RelationGnn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let patterns = store.add(
            format!("{name}.patterns"),
            uniform_init(rng, Pattern::ALL.len(), d, d),
            true,
        )?;
        let updates = (0..cfg.layers)
            .map(|s| Linear::new(store, &format!("{name}.layer{s}.update"), 2 * d, d, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { patterns, updates, dim: d })
    }

    /// `2J × d` relation embeddings for a query on relation `query_rel`.
    pub fn forward<T: Real>(
        &self,
        s: &Scope<T>,
        num_relations: usize,
        edges: &Arc<EdgeIndex>,
        query_rel: usize,
    ) -> Result<Var> {
        if query_rel >= num_relations {
            return Err(KrlmError::Invalid(format!(
                "query relation {query_rel} outside {num_relations} relations"
            )));
        }
        let t = s.tape();
        let mut init = Tensor::zeros(num_relations, self.dim);
        init.row_mut(query_rel).fill(T::one());
        let mut h = t.constant(init);
        let patterns = s.var(self.patterns);
        for update in &self.updates {
            let agg = t.message_pass(h, patterns, Arc::clone(edges), num_relations)?;
            let cat = t.concat_cols(&[h, agg])?;
            let z = update.forward(s, cat)?;
            h = t.relu(z);
        }
        Ok(h)
    }
}

/// Factor applied to the initial output layer of every edge-feature MLP.
pub const EDGE_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EntityGnn {
    /// Per-layer map from relation embeddings to edge features.
    pub edge_mlps: Vec<Mlp>,
    pub updates: Vec<Linear>,
    pub dim: usize,
}

impl EntityGnn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let mut edge_mlps = Vec::with_capacity(cfg.layers);
        let mut updates = Vec::with_capacity(cfg.layers);
        for s in 0..cfg.layers {
            let mlp = Mlp::new(store, &format!("{name}.layer{s}.edge"), [d, d, d], rng)?;
            // Messages are products with these features and sums over all
            // in-neighbours; at full scale six layers on hub entities push
            // states into the thousands before training starts.
            store.get_mut(mlp.out.w).tensor.scale_assign(EDGE_INIT_SCALE);
            if let Some(b) = mlp.out.b {
                store.get_mut(b).tensor.scale_assign(EDGE_INIT_SCALE);
            }
            edge_mlps.push(mlp);
            updates.push(Linear::new(store, &format!("{name}.layer{s}.update"), 2 * d, d, true, rng)?);
        }
        Ok(Self {
            edge_mlps,
            updates,
            dim: d,
        })
    }

    /// `I × d` states after propagating `boundary` (`1 × d`) from `head`
    /// along `edges`, whose kinds index rows of `relations`.
    pub fn forward<T: Real>(
        &self,
        s: &Scope<T>,
        num_entities: usize,
        edges: &Arc<EdgeIndex>,
        relations: Var,
        head: usize,
        boundary: Var,
    ) -> Result<Var> {
        if head >= num_entities {
            return Err(KrlmError::Invalid(format!("head {head} outside {num_entities} entities")));
        }
        let t = s.tape();
        let mut h = indicator_rows(s, num_entities, head, boundary)?;
        for (mlp, update) in self.edge_mlps.iter().zip(&self.updates) {
            let feats = mlp.forward(s, relations)?;
            let agg = t.message_pass(h, feats, Arc::clone(edges), num_entities)?;
            let cat = t.concat_cols(&[h, agg])?;
            let z = update.forward(s, cat)?;
            h = t.relu(z);
        }
        Ok(h)
    }
}

/// Entity embeddings for a query: `I_{i=h}·r_q` propagated by `gnn`.
pub fn encode_entities<T: Real>(
    s: &Scope<T>,
    gnn: &EntityGnn,
    num_entities: usize,
    edges: &Arc<EdgeIndex>,
    relations: Var,
    head: usize,
    query_rel: usize,
) -> Result<Var> {
    let r_q = s.tape().gather_rows(relations, vec![query_rel])?;
    gnn.forward(s, num_entities, edges, relations, head, r_q)
}

/// `MLP([e_i ‖ r_q])` logits, `Linear(2d→d) → ReLU → Linear(d→1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructScorer {
    pub mlp: Mlp,
    pub dim: usize,
}

impl StructScorer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, [2 * dim, dim, 1], rng)?,
            dim,
        })
    }

    /// `I × 1` raw logits; scores are their logistic.
    pub fn logits<T: Real>(&self, s: &Scope<T>, entities: Var, r_q: Var) -> Result<Var> {
        let t = s.tape();
        let d = self.dim;
        let w_e = self.mlp.hidden.weight_block(s, 0, d)?;
        let w_r = self.mlp.hidden.weight_block(s, d, d)?;
        let per_entity = t.matmul(entities, w_e)?;
        let mut shared = t.matmul(r_q, w_r)?;
        if let Some(b) = self.mlp.hidden.b {
            shared = t.add(shared, s.var(b))?;
        }
        let h = t.add_row(per_entity, shared)?;
        let h = t.relu(h);
        self.mlp.out.forward(s, h)
    }
}

/// Memory of the `k` highest-scoring entities.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    /// Descending score, ties by ascending id.
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, entity: usize) -> bool {
        self.ids.contains(&entity)
    }
}

/// Entity ids ordered by descending score, ties by ascending id.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn select_memory(scores: &[f64], k: usize) -> Memory {
    let k = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    order.truncate(k);
    order.sort_by(cmp);
    Memory {
        scores: order.iter().map(|&i| scores[i]).collect(),
        ids: order,
    }
}
