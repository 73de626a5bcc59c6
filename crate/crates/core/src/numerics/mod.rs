//! Deterministic `f64` tensor engine with reverse-mode differentiation.

pub mod gradcheck;
mod mlp;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
pub use mlp::Mlp2;
pub use ops::{concat_channels, conv2d, global_avg_pool, matmul, mse, softmax, split_channels};
pub use rng::{child_seed, splitmix64, Rng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
