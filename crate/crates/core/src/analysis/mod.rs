//! Capsule-output analysis: augmentation, PCA scatter tables and transfer
//! features.

pub mod augment;
pub mod pca;
pub mod scatter;
pub mod transfer;

pub use augment::{augment, AugmentKind, AugmentSpec};
pub use pca::{fit_pca, PcaModel};
pub use scatter::{capsule_scatter, class_activity_vectors, sha256_hex, ScatterRow, ScatterTable};
pub use transfer::{capsule_summaries, export_transfer_features, export_transfer_files};
