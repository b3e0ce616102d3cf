//! Numerical substrate: dense tensors, a reverse-mode tape, MLPs, Adam, and
//! the checkpoint container.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{meta_path, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{Reader, Writer};
pub use gradcheck::{central_differences, finite_diff_check, finite_diff_rel_error};
pub use mlp::{Activation, Dense, Mlp, MlpGrads, MlpVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
