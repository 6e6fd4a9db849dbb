//! Encrypted inference for a small convolutional network:
//! convolution, square-ish polynomial activation, two fully connected
//! layers with a second activation in between.

mod batch;
mod mnist;
mod pipeline;
pub mod store;
mod weights;

pub use batch::{pack_batch, BatchPlan};
pub use mnist::{load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use pipeline::{
    argmax_decide, conv_layer, decode_scores, encode_model, fc_layer, flatten_maps, forward, poly_activation,
    read_predictions, write_predictions, EncryptedModel, FcLayer, ForwardOutput, Prediction, PIPELINE_DEPTH,
};
pub use weights::{load_weights_csv, save_weights_csv, ModelWeights, Poly, ACT1, ACT2};
