//! The change classifier: parameters, forward/backward passes, losses,
//! training and checkpoints.

mod checkpoint;
mod loss;
mod network;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    FORMAT_VERSION,
};
pub use loss::{ce_loss, combined_loss, mae_loss, LossValue, LossWeights, PROB_FLOOR};
pub use network::{
    backward, batch_loss, forward, head_forward, layer_attention_backward, layer_attention_forward,
    sample_loss, sample_loss_and_grad, stem_forward, AttentionGrads, AttentionOutput, Forward,
};
pub use params::{
    ConvLayer, DenseLayer, ModelParams, CLASSES, FEATURE_CHANNELS, LAYERS, SHALLOW_CHANNELS,
};
pub use train::{predict_map, train, TrainConfig, TrainOutcome, DEFAULT_EPOCHS};
