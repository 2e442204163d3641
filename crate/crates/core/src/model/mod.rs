//! The convolutional classifier, its heads, composite-loss training and checkpoints.

mod checkpoint;
mod cnn;
mod head;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_VERSION};
pub use cnn::{Architecture, Param, ParamVars, SmallCnn, Trace};
pub use head::{Classifier, Head, HeadMode, PrototypeSet, ScoredTrace};
pub use train::{composite_loss, compute_prototypes, train, CamGradient, LossBreakdown, TrainConfig, TrainReport};
