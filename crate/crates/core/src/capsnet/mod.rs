//! Capsule layer, routing-by-agreement, margin loss and the reconstruction
//! decoder.

pub mod decoder;
pub mod loss;
pub mod routing;

pub use decoder::{mean_absolute_error, Decoder, Reconstruction, DECODER_HIDDEN};
pub use loss::{predict, LabelMode, MarginLoss};
pub use routing::{length_layer, route, route_predictions, squash_vec, CapsLayer, Routed};
