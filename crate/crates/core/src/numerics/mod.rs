//! Dense f64 arithmetic with reverse-mode gradients — just enough for the
//! toy decoder and the rate predictor. Tensors are immutable once produced
//! by an op; −∞ is the masking sentinel and is only ever applied to logits.

mod gradcheck;
pub(crate) mod linalg;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use rng::SplitMix64;
pub use tape::{GradTape, VarId};
pub use tensor::{softmax, Tensor};
