//! Dense tensors, reverse-mode gradients, gradient checking, and the
//! AdamW / warmup-cosine optimisation pieces.

mod adamw;
mod gradcheck;
pub mod io;
mod schedule;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use schedule::LrSchedule;
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Tape, Var};
pub use tensor::Tensor;
