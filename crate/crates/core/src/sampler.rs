//! Uniform negative sampling.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KrlmError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub ids: Vec<usize>,
    /// Set when fewer than `n` distinct candidates existed.
    pub with_replacement: bool,
}

/// `n` entities drawn uniformly from `0..num_entities` minus `exclude`,
/// without replacement when possible.
pub fn sample_negatives(num_entities: usize, exclude: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<NegativeSample> {
    if num_entities < 2 {
        return Err(KrlmError::Invalid(format!(
            "negative sampling needs at least 2 entities, graph has {num_entities}"
        )));
    }
    if n == 0 {
        return Err(KrlmError::Config("number of negatives must be at least 1".into()));
    }
    let pool = num_entities - 1;
    let skip = |j: usize| if j >= exclude { j + 1 } else { j };
    if n <= pool {
        Ok(NegativeSample {
            ids: index::sample(rng, pool, n).into_iter().map(skip).collect(),
            with_replacement: false,
        })
    } else {
        Ok(NegativeSample {
            ids: (0..n).map(|_| skip(rng.random_range(0..pool))).collect(),
            with_replacement: true,
        })
    }
}
