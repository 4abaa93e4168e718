//! Central finite-difference checks of tape gradients.

use crate::error::NumericsError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation size for `(f(x+ε) − f(x−ε)) / 2ε`.
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients which are zero up to rounding do not blow the ratio up.
    pub floor: f64,
    /// Coordinates probed per parameter tensor; evenly spread when the
    /// tensor is larger.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_coords: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Indices probed for a tensor with `len` entries.
pub fn probe_indices(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let stride = len as f64 / max_coords as f64;
    (0..max_coords)
        .map(|k| ((k as f64 + 0.5) * stride) as usize)
        .collect()
}

/// Compares the tape gradient of `loss_fn` against central differences for
/// every trainable parameter of `store`. `loss_fn` must record the
/// parameters it reads through [`Tape::param`] (for example via
/// [`crate::Scope`]); trainable parameters it never records are reported
/// with a zero analytic gradient.
pub fn check_params<F, E>(store: &ParamStore, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape<f64>, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let tape = Tape::new();
        let loss = loss_fn(&tape, s)?;
        Ok(tape.scalar(loss))
    };

    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let zeros;
        let analytic = match grads.params().get(&id) {
            Some(g) => g,
            None => {
                zeros = crate::Tensor::zeros(p.tensor.rows(), p.tensor.cols());
                &zeros
            }
        };
        for idx in probe_indices(p.tensor.len(), opts.max_coords) {
            let orig = p.tensor.data()[idx];
            work.get_mut(id).tensor.data_mut()[idx] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Probe {
                    param: p.name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
