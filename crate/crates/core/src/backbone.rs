//! Miniature frozen decoder: token embeddings, per-layer attention and FFN
//! weights, RMS-norm scales and the output projection head.

use krlm_numerics::{ParamId, ParamStore, Real, Scope, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrlmError, Result};
use crate::nn::gaussian_init;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub ffn: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn new(layers: usize, hidden: usize, vocab: usize, seed: u64) -> Self {
        Self {
            layers,
            hidden,
            vocab,
            ffn: 4 * hidden,
            seed,
            max_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(KrlmError::Config("backbone needs at least one layer".into()));
        }
        if self.hidden < 8 || self.hidden % 2 != 0 {
            return Err(KrlmError::Config(format!(
                "backbone hidden dim must be even and at least 8, got {}",
                self.hidden
            )));
        }
        if self.vocab < 64 {
            return Err(KrlmError::Config(format!("vocabulary of {} is below 64", self.vocab)));
        }
        if self.ffn == 0 || self.max_len == 0 {
            return Err(KrlmError::Config("ffn dim and max length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn_in: ParamId,
    pub ffn_out: ParamId,
    pub norm_attn: ParamId,
    pub norm_ffn: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub emb: ParamId,
    pub proj: ParamId,
    pub layers: Vec<BackboneLayer>,
}

impl Backbone {
    /// Adds frozen weights under `backbone.*`. Entries are Gaussian with
    /// standard deviation `1/√F`; the projection head starts as a copy of the
    /// embedding table and norm scales start at one.
    pub fn init(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.hidden;
        let std = 1.0 / (f as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let emb_t = gaussian_init(&mut rng, cfg.vocab, f, std);
        let emb = store.add("backbone.emb", emb_t.clone(), false)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for n in 0..cfg.layers {
            let mut add = |name: &str, t: Tensor<f64>| store.add(format!("backbone.layer{n}.{name}"), t, false);
            layers.push(BackboneLayer {
                wq: add("wq", gaussian_init(&mut rng, f, f, std))?,
                wk: add("wk", gaussian_init(&mut rng, f, f, std))?,
                wv: add("wv", gaussian_init(&mut rng, f, f, std))?,
                ffn_in: add("ffn_in", gaussian_init(&mut rng, f, cfg.ffn, std))?,
                ffn_out: add("ffn_out", gaussian_init(&mut rng, cfg.ffn, f, std))?,
                norm_attn: add("norm_attn", Tensor::filled(1, f, 1.0))?,
                norm_ffn: add("norm_ffn", Tensor::filled(1, f, 1.0))?,
            });
        }
        let proj = store.add("backbone.proj", emb_t, false)?;
        Ok(Self {
            config: cfg.clone(),
            emb,
            proj,
            layers,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Checksum of every `backbone.*` tensor.
    pub fn checksum(store: &ParamStore) -> String {
        store.checksum_where(|p| p.name.starts_with("backbone."))
    }

    /// `RMSNorm(x) ⊙ scale`.
    pub fn norm<T: Real>(&self, s: &Scope<T>, x: Var, scale: ParamId) -> Result<Var> {
        let t = s.tape();
        let n = t.rms_norm(x, NORM_EPS);
        Ok(t.mul_row(n, s.var(scale))?)
    }

    /// `x + SiLU(RMSNorm(x)·W_in)·W_out`.
    pub fn ffn_block<T: Real>(&self, s: &Scope<T>, x: Var, layer: usize) -> Result<Var> {
        let l = &self.layers[layer];
        let t = s.tape();
        let n = self.norm(s, x, l.norm_ffn)?;
        let h = t.matmul(n, s.var(l.ffn_in))?;
        let h = t.silu(h);
        let h = t.matmul(h, s.var(l.ffn_out))?;
        Ok(t.add(x, h)?)
    }
}

/// Sinusoidal positions scaled by `1/√F`, the same scale as the embedding
/// table entries.
pub fn positional_encoding<T: Real>(m: usize, f: usize) -> Tensor<T> {
    let scale = 1.0 / (f as f64).sqrt();
    Tensor::from_fn(m, f, |p, j| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / f as f64);
        T::of(scale * if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
