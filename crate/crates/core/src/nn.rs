//! Parameterized building blocks shared by the encoders, the instruction
//! builder and the predictor.

use krlm_numerics::{ParamId, ParamStore, Real, Scope, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Uniform in `±1/√fan_in`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

pub fn gaussian_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, fan_in), true)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), uniform_init(rng, 1, fan_out, fan_in), true)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, s: &Scope<T>, x: Var) -> Result<Var> {
        let t = s.tape();
        let y = t.matmul(x, s.var(self.w))?;
        Ok(match self.b {
            Some(b) => t.add_row(y, s.var(b))?,
            None => y,
        })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.w).rows()
    }

    /// Rows `[start, start+len)` of the weight, i.e. the block acting on a
    /// slice of a concatenated input.
    pub fn weight_block<T: Real>(&self, s: &Scope<T>, start: usize, len: usize) -> Result<Var> {
        Ok(s.tape().slice_rows(s.var(self.w), start, len)?)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], true, rng)?,
            out: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &Scope<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        let h = s.tape().relu(h);
        self.out.forward(s, h)
    }
}

/// Constant `len(rows) × cols` gathered straight from a stored (frozen)
/// table, without recording the whole table on the tape.
pub fn table_rows<T: Real>(s: &Scope<T>, table: ParamId, rows: &[usize]) -> Result<Var> {
    let t = s.store().tensor(table);
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        if r >= t.rows() {
            return Err(crate::error::KrlmError::Invalid(format!(
                "row {r} outside table of {} rows",
                t.rows()
            )));
        }
        data.extend(t.row(r).iter().map(|&x| T::of(x)));
    }
    Ok(s.tape().constant(Tensor::from_vec(rows.len(), t.cols(), data)?))
}

/// `n × d` matrix that is zero except row `at`, which equals `row` (`1 × d`).
pub fn indicator_rows<T: Real>(s: &Scope<T>, n: usize, at: usize, row: Var) -> Result<Var> {
    let t = s.tape();
    let mut onehot = Tensor::zeros(n, 1);
    onehot.set(at, 0, T::one());
    let onehot = t.constant(onehot);
    Ok(t.matmul(onehot, row)?)
}
