//! ImportanceNet: RepVGG convolution stacks, loss, optimizer, training and
//! model files.

mod adam;
mod conv;
mod format;
mod loss;
mod model;
mod repvgg;
mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv2d, conv2d_backward, conv2d_backward_opt, ConvGrads, ConvParams};
pub use format::{decode_model, encode_model, load_model, save_model, sidecar_path, FORMAT_VERSION, MAGIC};
pub use loss::{smape, smape_loss, SMAPE_EPS};
pub use model::{
    importance_net_forward, Architecture, LossSpace, Model, ModelConfig, NetworkParams, TrainPatch,
    DEFAULT_HEAD_KSIZE, DEFAULT_WIDTH,
};
pub use repvgg::{reparameterize, repvgg_forward, RepVggBlockParams, FUSED_KSIZE};
pub use train::{
    evaluate_loss, extract_patches, sample_dataset, train, write_loss_curve, EpochRecord, TrainConfig,
    TrainReport,
};
