//! Mutual-distillation objective over a candidate list (one positive first,
//! then negatives):
//!
//! ```text
//! total = (1−λ)(BCE_krlm + BCE_struct) + λ(KL(P_struct‖P_krlm) + KL(P_krlm‖P_struct))
//! ```
//!
//! BCE is `−log σ(l⁺) − mean log(1−σ(l⁻))` on raw logits `l`; the
//! distributions `P` are softmaxes of the raw candidate logits.

use krlm_numerics::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{KrlmError, Result};

/// Sign of the negative-sample term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BceSign {
    /// Standard binary cross-entropy: subtract `mean log(1−σ(l⁻))`.
    #[default]
    Standard,
    /// Add the negative term instead. Rewards high negative scores; kept
    /// only for comparison.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_krlm: f64,
    pub bce_struct: f64,
    pub kl_struct_to_krlm: f64,
    pub kl_krlm_to_struct: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.bce_krlm, self.bce_struct, self.kl_struct_to_krlm, self.kl_krlm_to_struct, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub bce_krlm: Var,
    pub bce_struct: Var,
    pub kl_struct_to_krlm: Var,
    pub kl_krlm_to_struct: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, lambda: f64) -> LossBreakdown {
        let v = |x: Var| tape.scalar(x).f64();
        LossBreakdown {
            bce_krlm: v(self.bce_krlm),
            bce_struct: v(self.bce_struct),
            kl_struct_to_krlm: v(self.kl_struct_to_krlm),
            kl_krlm_to_struct: v(self.kl_krlm_to_struct),
            total: v(self.total),
            lambda,
        }
    }
}

fn bce<T: Real>(tape: &Tape<T>, col: Var, sign: BceSign) -> Result<Var> {
    let [n, _] = tape.shape(col);
    let pos = tape.slice_rows(col, 0, 1)?;
    let neg = tape.slice_rows(col, 1, n - 1)?;
    let lp = tape.log_sigmoid(pos);
    let pos_term = tape.scale(lp, T::of(-1.0));
    let flipped = tape.scale(neg, T::of(-1.0));
    let ln = tape.log_sigmoid(flipped);
    let neg_mean = tape.mean_all(ln)?;
    Ok(match sign {
        BceSign::Standard => tape.sub(pos_term, neg_mean)?,
        BceSign::AsPrinted => tape.add(pos_term, neg_mean)?,
    })
}

/// `KL(P‖Q)` from row log-probabilities.
fn kl<T: Real>(tape: &Tape<T>, log_p: Var, log_q: Var) -> Result<Var> {
    let p = tape.exp(log_p);
    let diff = tape.sub(log_p, log_q)?;
    let prod = tape.mul(p, diff)?;
    Ok(tape.sum_all(prod))
}

/// Builds the objective from `(n+1) × 1` candidate logit columns of the two
/// scorers, positive first.
pub fn loss_on_tape<T: Real>(
    tape: &Tape<T>,
    struct_logits: Var,
    krlm_logits: Var,
    lambda: f64,
    sign: BceSign,
) -> Result<LossVars> {
    let (ss, sk) = (tape.shape(struct_logits), tape.shape(krlm_logits));
    if ss != sk || ss[1] != 1 || ss[0] < 2 {
        return Err(KrlmError::Invalid(format!(
            "candidate logits must be matching (n+1)x1 columns with n >= 1, got {ss:?} and {sk:?}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(KrlmError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let n = ss[0];
    let bce_struct = bce(tape, struct_logits, sign)?;
    let bce_krlm = bce(tape, krlm_logits, sign)?;
    let ls = tape.log_softmax_rows(tape.reshape(struct_logits, 1, n)?);
    let lk = tape.log_softmax_rows(tape.reshape(krlm_logits, 1, n)?);
    let kl_s2k = kl(tape, ls, lk)?;
    let kl_k2s = kl(tape, lk, ls)?;
    let bce_sum = tape.add(bce_krlm, bce_struct)?;
    let kl_sum = tape.add(kl_s2k, kl_k2s)?;
    let a = tape.scale(bce_sum, T::of(1.0 - lambda));
    let b = tape.scale(kl_sum, T::of(lambda));
    Ok(LossVars {
        total: tape.add(a, b)?,
        bce_krlm,
        bce_struct,
        kl_struct_to_krlm: kl_s2k,
        kl_krlm_to_struct: kl_k2s,
    })
}

/// Loss terms for plain logit vectors (positive first).
pub fn compute_loss(struct_logits: &[f64], krlm_logits: &[f64], lambda: f64, sign: BceSign) -> Result<LossBreakdown> {
    if struct_logits.len() != krlm_logits.len() {
        return Err(KrlmError::Invalid(format!(
            "candidate lists differ in length: {} vs {}",
            struct_logits.len(),
            krlm_logits.len()
        )));
    }
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::column_vector(struct_logits.to_vec()));
    let k = tape.constant(Tensor::column_vector(krlm_logits.to_vec()));
    let vars = loss_on_tape(&tape, s, k, lambda, sign)?;
    Ok(vars.breakdown(&tape, lambda))
}
