//! Small dense linear algebra, a tape for reverse-mode gradients, MLPs and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod mat;
pub mod mlp;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use mat::Mat;
pub use mlp::{AdamConfig, Bound, Init, Layer, Mlp, ParamId, ParamStore};
pub use tape::{Activation, Grads, Tape, Var};
