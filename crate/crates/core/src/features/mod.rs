//! Audio input and MFCC feature pipeline.

pub mod cache;
pub mod manifest;
pub mod mfcc;
pub mod scaler;
pub mod synth;
pub mod wav;

pub use cache::{decode_features, encode_features, read_features, write_features};
pub use manifest::{synth_multilabel, DatasetManifest, ManifestEntry, Split};
pub use mfcc::{deltas, hz_to_mel, mel_to_hz, mfcc, FeatureConfig, FeatureMatrix, MfccExtractor};
pub use scaler::{apply_scaler, fit_scaler, ScalerParams};
pub use synth::{fsdd_manifest, synth_digit, write_digit_corpus, DigitCorpusConfig, Speaker};
pub use wav::{load_wav, parse_wav, write_wav, AudioClip};
