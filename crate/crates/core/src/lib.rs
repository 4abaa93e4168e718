//! KRLM: a knowledge-graph reasoning model that couples structural graph
//! encoders with a frozen language-model backbone through a knowledge memory
//! in the attention layers.

pub mod attention;
pub mod backbone;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod instruction;
pub mod kg;
pub mod loss;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod relgraph;
pub mod sampler;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{KrlmError, Result};
