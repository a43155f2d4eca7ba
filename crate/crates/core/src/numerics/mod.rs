//! Dense f64 tensors, tape-based reverse-mode differentiation and Adam.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, global_grad_norm, Adam, AdamConfig};
pub use tape::{gelu, softmax, BinaryKind, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{matmul_raw, matvec_raw, matvec_t_raw};

#[cfg(test)]
mod tests;
