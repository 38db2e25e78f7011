//! Dense tensors with tape-based reverse-mode differentiation, AdamW, and
//! flat gradient vectors.

mod checkpoint;
mod dense;
mod fd;
mod optim;
mod params;
mod real;
mod tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, MAGIC, VERSION,
};
pub use dense::Tensor;
pub use fd::{finite_diff_coords, finite_diff_grad};
pub use optim::{adamw_step, scheduled_lr, AdamState, AdamWConfig};
pub use params::{flat_dot, GradAccumulator, GradVector, ParamMask, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::{log_sigmoid, log_sum_exp};
