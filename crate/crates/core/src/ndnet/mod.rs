//! Small N-D tensor library with reverse-mode differentiation, a 3-D U-Net
//! built from it, checkpoints, and finite-difference gradient checks.

mod checkpoint;
mod conv;
pub mod gradcheck;
mod tape;
mod tensor;
mod unet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointHeader, OutputMode, ParamInfo, CHECKPOINT_MAGIC,
};
pub(crate) use tape::softmax_channels;
pub use tape::{Grads, PrimitiveKind, Tape, Var};
pub use tensor::{Element, Tensor};
pub use unet::{build_unet, NetConfig, Network, Normalization, ParamRole, Parameter, INSTANCE_NORM_EPS};
