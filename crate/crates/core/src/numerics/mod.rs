//! Dense f64 tensors, a reverse-mode tape, and the optimizer machinery.

pub(crate) mod kernels;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, lr_at, Adamax, AdamaxSlot};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dropout, dropout_mask, Tensor};
