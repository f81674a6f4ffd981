//! Amplitude (DC offset) and speed augmentation of clips.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::wav::{stretch_linear, AudioClip};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    /// Constant offset added to every sample, then clipped to `[-1, 1]`.
    Amplitude,
    /// Playback-rate factor; duration scales by `1 / factor`.
    Speed,
}

impl AugmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Amplitude => "amplitude",
            AugmentKind::Speed => "speed",
        }
    }

    /// Level that leaves a clip unchanged.
    pub fn identity(self) -> f64 {
        match self {
            AugmentKind::Amplitude => 0.0,
            AugmentKind::Speed => 1.0,
        }
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            AugmentKind::Amplitude => vec![-0.1, -0.05, 0.05, 0.1],
            AugmentKind::Speed => vec![0.8, 0.9, 1.1, 1.25],
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(AugmentKind::Amplitude),
            "speed" => Ok(AugmentKind::Speed),
            _ => Err(Error::Config(format!("unknown augmentation `{s}` (amplitude, speed)"))),
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub levels: Vec<f64>,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("augmentation needs at least one level".into()));
        }
        for (i, a) in levels.iter().enumerate() {
            check_level(kind, *a)?;
            if levels[..i].contains(a) {
                return Err(Error::Config(format!("duplicate augmentation level {a}")));
            }
        }
        Ok(Self { kind, levels })
    }
}

fn check_level(kind: AugmentKind, level: f64) -> Result<()> {
    if !level.is_finite() || (kind == AugmentKind::Speed && level <= 0.0) {
        return Err(Error::Config(format!("invalid {kind} level {level}")));
    }
    Ok(())
}

pub fn augment<T: Scalar>(clip: &AudioClip<T>, kind: AugmentKind, level: f64) -> Result<AudioClip<T>> {
    check_level(kind, level)?;
    let samples = match kind {
        AugmentKind::Amplitude => {
            let (offset, one) = (T::lit(level), T::one());
            clip.samples.iter().map(|&s| (s + offset).max(-one).min(one)).collect()
        }
        AugmentKind::Speed if level == 1.0 => clip.samples.clone(),
        AugmentKind::Speed => stretch_linear(&clip.samples, level),
    };
    AudioClip::new(samples, clip.sample_rate)
}
