//! State space memory integration for a toy vision-language model.
//!
//! A frozen backbone (token embeddings, causal multi-head attention,
//! feed-forward blocks, a linear decoder and a stub vision encoder) receives
//! one trainable linear state space module per layer, inserted between
//! attention and feed-forward. Only the state space modules are trained:
//! first on a reconstruction objective, then on the task objective mixed
//! with reconstruction.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
