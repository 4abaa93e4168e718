//! KRL attention: frozen causal self-attention whose key/value set is
//! extended by a knowledge memory of entity embeddings.
//!
//! For normalized input `X` (`m × F`) and memory `E_mem` (`K × d`) a layer
//! computes
//!
//! ```text
//! A = softmax([X·M_Q·E_memᵀ ‖ X·W_Q·(X·W_K)ᵀ + mask] / √F)
//! out = A · [E_mem·M_V ; X·W_V]
//! ```
//!
//! where the causal mask covers only the token block. The layer wraps this
//! in the backbone's pre-norm residual structure:
//! `H' = H + out(norm(H))`, then `H'' = FFN block(H')`.
//!
//! Cost per layer is `O(m·(m+K)·F)` for the attention products plus
//! `O(m·F·F_ffn)` for the feed-forward block.

use krlm_numerics::{Mask, ParamId, ParamStore, Real, Scope, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{positional_encoding, Backbone};
use crate::error::{KrlmError, Result};
use crate::nn::uniform_init;

/// Trainable `M_Q` (`F × d`) and `M_V` (`d × F`) for every backbone layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryWeights {
    pub mq: Vec<ParamId>,
    pub mv: Vec<ParamId>,
}

impl MemoryWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        hidden: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut mq = Vec::with_capacity(layers);
        let mut mv = Vec::with_capacity(layers);
        for n in 0..layers {
            mq.push(store.add(format!("{name}.layer{n}.mq"), uniform_init(rng, hidden, dim, hidden), true)?);
            mv.push(store.add(format!("{name}.layer{n}.mv"), uniform_init(rng, dim, hidden, dim), true)?);
        }
        Ok(Self { mq, mv })
    }
}

/// Last-row attention coefficients of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    /// Over the `m` token positions.
    pub alpha: Vec<f64>,
    /// Over the `K` memory entries.
    pub beta: Vec<f64>,
}

fn scale<T: Real>(f: usize) -> T {
    T::of(1.0 / (f as f64).sqrt())
}

/// Attention output (before residual) of the memory-augmented layer, and
/// the `m × (K+m)` coefficient matrix.
pub fn krl_attention_core<T: Real>(
    s: &Scope<T>,
    backbone: &Backbone,
    memory: &MemoryWeights,
    layer: usize,
    x: Var,
    mem: Var,
) -> Result<(Var, Var)> {
    let t = s.tape();
    let l = &backbone.layers[layer];
    let [k, _] = t.shape(mem);
    let q_mem = t.matmul(x, s.var(memory.mq[layer]))?;
    let mem_logits = t.matmul_nt(q_mem, mem)?;
    let q = t.matmul(x, s.var(l.wq))?;
    let key = t.matmul(x, s.var(l.wk))?;
    let tok_logits = t.matmul_nt(q, key)?;
    let logits = t.concat_cols(&[mem_logits, tok_logits])?;
    let logits = t.scale(logits, scale(backbone.hidden()));
    let probs = t.softmax_rows(logits, Some(Mask::Causal { prefix: k }));
    let v_mem = t.matmul(mem, s.var(memory.mv[layer]))?;
    let v_tok = t.matmul(x, s.var(l.wv))?;
    let values = t.concat_rows(&[v_mem, v_tok])?;
    Ok((t.matmul(probs, values)?, probs))
}

/// Plain causal attention of the frozen backbone (no memory).
pub fn plain_attention_core<T: Real>(s: &Scope<T>, backbone: &Backbone, layer: usize, x: Var) -> Result<(Var, Var)> {
    let t = s.tape();
    let l = &backbone.layers[layer];
    let q = t.matmul(x, s.var(l.wq))?;
    let key = t.matmul(x, s.var(l.wk))?;
    let logits = t.matmul_nt(q, key)?;
    let logits = t.scale(logits, scale(backbone.hidden()));
    let probs = t.softmax_rows(logits, Some(Mask::Causal { prefix: 0 }));
    let v = t.matmul(x, s.var(l.wv))?;
    Ok((t.matmul(probs, v)?, probs))
}

/// One full layer: `H + core(norm(H))` followed by the FFN block.
/// `mem = None` runs the plain backbone layer.
pub fn attention_layer<T: Real>(
    s: &Scope<T>,
    backbone: &Backbone,
    memory: &MemoryWeights,
    layer: usize,
    h: Var,
    mem: Option<Var>,
) -> Result<(Var, Var)> {
    let t = s.tape();
    let x = backbone.norm(s, h, backbone.layers[layer].norm_attn)?;
    let (out, probs) = match mem {
        Some(mem) => krl_attention_core(s, backbone, memory, layer, x, mem)?,
        None => plain_attention_core(s, backbone, layer, x)?,
    };
    let h = t.add(h, out)?;
    Ok((backbone.ffn_block(s, h, layer)?, probs))
}

/// Adds positions to `embeddings` and runs all layers. Returns the final
/// hidden states and the last-row trace of every layer.
pub fn run_stack<T: Real>(
    s: &Scope<T>,
    backbone: &Backbone,
    memory: &MemoryWeights,
    embeddings: Var,
    mem: Var,
) -> Result<(Var, Vec<LayerTrace>)> {
    let t = s.tape();
    let [m, f] = t.shape(embeddings);
    if m == 0 {
        return Err(KrlmError::Invalid("empty instruction".into()));
    }
    let [k, _] = t.shape(mem);
    let pe = t.constant(positional_encoding::<T>(m, f));
    let mut h = t.add(embeddings, pe)?;
    let mut trace = Vec::with_capacity(backbone.layers.len());
    for n in 0..backbone.layers.len() {
        let (next, probs) = attention_layer(s, backbone, memory, n, h, Some(mem))?;
        let p = t.value(probs);
        let last = p.row(m - 1);
        trace.push(LayerTrace {
            layer: n,
            beta: last[..k].iter().map(|x| x.f64()).collect(),
            alpha: last[k..].iter().map(|x| x.f64()).collect(),
        });
        h = next;
    }
    Ok((h, trace))
}

/// Last-row attention output written as explicit coefficients:
///
/// ```text
/// α_i = exp(x_m·W_Q·(x_i·W_K)ᵀ/√F) / Z      i ≤ m
/// β_k = exp(x_m·M_Q·e_kᵀ/√F) / Z
/// h_m = Σ α_i·x_i·W_V + Σ β_k·e_k·M_V
/// ```
///
/// Straight loops over plain slices, independent of the tape. Returns
/// `(h_m, α, β)`.
#[allow(clippy::too_many_arguments)]
pub fn last_token_closed_form(
    x: &Tensor<f64>,
    mem: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    mq: &Tensor<f64>,
    mv: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = x.rows();
    let f = x.cols();
    let xm = x.row(m - 1);
    let vec_mat = |v: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        (0..w.cols())
            .map(|j| v.iter().enumerate().map(|(i, &a)| a * w.get(i, j)).sum())
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sf = (f as f64).sqrt();

    let q = vec_mat(xm, wq);
    let qm = vec_mat(xm, mq);
    let s: Vec<f64> = (0..m).map(|i| dot(&q, &vec_mat(x.row(i), wk)) / sf).collect();
    let u: Vec<f64> = (0..mem.rows()).map(|k| dot(&qm, mem.row(k)) / sf).collect();
    let top = s.iter().chain(&u).copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().chain(&u).map(|v| (v - top).exp()).sum();
    let alpha: Vec<f64> = s.iter().map(|v| (v - top).exp() / z).collect();
    let beta: Vec<f64> = u.iter().map(|v| (v - top).exp() / z).collect();

    let mut h = vec![0.0; wv.cols()];
    for (i, a) in alpha.iter().enumerate() {
        for (hj, vj) in h.iter_mut().zip(vec_mat(x.row(i), wv)) {
            *hj += a * vj;
        }
    }
    for (k, b) in beta.iter().enumerate() {
        for (hj, vj) in h.iter_mut().zip(vec_mat(mem.row(k), mv)) {
            *hj += b * vj;
        }
    }
    (h, alpha, beta)
}
