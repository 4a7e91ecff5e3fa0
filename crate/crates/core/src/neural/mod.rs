//! Promptable 2D segmentation network: frozen image encoder, atlas label
//! encoder, channel-attention dense-prompt encoder and mask decoder.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, load_weights_into, save_checkpoint, CheckpointManifest};
pub use loss::{compute_loss, loss_and_grad, soft_dice, LossValue};
pub use model::{ImageEmbeddings, Network, NetworkConfig, SampleInput};
pub use tensor::Tensor;
pub use train::{read_training_log, write_training_log, LogRow, TrainConfig, TrainSample, Trainer};
