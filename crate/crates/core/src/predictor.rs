//! Graph-constrained next-entity prediction: the projection-head PAA, the
//! knowledge decoder and the KRLM scorer, plus score fusion.

use krlm_numerics::{ParamStore, Real, Scope, Var};
use rand_chacha::ChaCha8Rng;

use crate::encoder::rank_order;
use crate::error::Result;
use crate::nn::{Linear, Mlp};

/// `MLP([p̃_i ‖ r_q ‖ g(h_last)])` with `g: F → d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KrlmScorer {
    pub g: Linear,
    pub mlp: Mlp,
    pub dim: usize,
}

impl KrlmScorer {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            g: Linear::new(store, &format!("{name}.g"), hidden, dim, true, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), [3 * dim, dim, 1], rng)?,
            dim,
        })
    }

    /// `I × 1` raw logits.
    pub fn logits<T: Real>(&self, s: &Scope<T>, decoded: Var, r_q: Var, h_last: Var) -> Result<Var> {
        let t = s.tape();
        let d = self.dim;
        let gh = self.g.forward(s, h_last)?;
        let per_entity = t.matmul(decoded, self.mlp.hidden.weight_block(s, 0, d)?)?;
        let from_rel = t.matmul(r_q, self.mlp.hidden.weight_block(s, d, d)?)?;
        let from_h = t.matmul(gh, self.mlp.hidden.weight_block(s, 2 * d, d)?)?;
        let mut shared = t.add(from_rel, from_h)?;
        if let Some(b) = self.mlp.hidden.b {
            shared = t.add(shared, s.var(b))?;
        }
        let h = t.add_row(per_entity, shared)?;
        let h = t.relu(h);
        self.mlp.out.forward(s, h)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(sc_struct + sc_krlm) / 2` per entity.
pub fn fuse(sc_struct: &[f64], sc_krlm: &[f64]) -> Vec<f64> {
    sc_struct.iter().zip(sc_krlm).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Every entity ordered by fused score, descending, ties by ascending id.
pub fn fuse_and_rank(sc_struct: &[f64], sc_krlm: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let fused = fuse(sc_struct, sc_krlm);
    let order = rank_order(&fused);
    (fused, order)
}
