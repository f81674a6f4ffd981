//! MFCC feature extraction: pre-emphasis, Hamming window, FFT magnitude,
//! triangular mel filterbank, log, DCT-II, log energy, and regression deltas.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Error, Result};
use crate::features::wav::AudioClip;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Cepstral coefficients kept per frame (c1..=c_n).
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    /// Half-width of the delta regression window, in frames.
    pub delta_window: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_ms: 40.0,
            hop_ms: 10.0,
            n_mfcc: 19,
            n_mels: 26,
            pre_emphasis: 0.97,
            delta_window: 2,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.frame_len().next_power_of_two()
    }

    /// Static coefficients plus log energy.
    pub fn n_static(&self) -> usize {
        self.n_mfcc + 1
    }

    /// Statics with their deltas and delta-deltas.
    pub fn n_dims(&self) -> usize {
        3 * self.n_static()
    }

    /// `1 + floor((n − frame) / hop)`, or `None` when shorter than a frame.
    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        let frame = self.frame_len();
        (n_samples >= frame).then(|| 1 + (n_samples - frame) / self.hop_len())
    }
}

/// Row-major `[n_frames × n_dims]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub data: Vec<T>,
    pub n_frames: usize,
    pub n_dims: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(data: Vec<T>, n_frames: usize, n_dims: usize) -> Result<Self> {
        if data.len() != n_frames * n_dims {
            return Err(shape_err(format!("{} values for {n_frames}×{n_dims} features", data.len())));
        }
        Ok(Self { data, n_frames, n_dims, frame_ms: 40.0, hop_ms: 10.0 })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n_dims..(i + 1) * self.n_dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.n_dims)
    }

    pub fn value(&self, frame: usize, dim: usize) -> T {
        self.data[frame * self.n_dims + dim]
    }

    /// Zero-pads or truncates to exactly `frames` rows.
    pub fn fit_frames(&self, frames: usize) -> Self {
        let mut data = self.data[..self.n_frames.min(frames) * self.n_dims].to_vec();
        data.resize(frames * self.n_dims, T::zero());
        Self { data, n_frames: frames, ..self.clone() }
    }

    /// Appends the same `extra` values to every frame.
    pub fn with_constant_dims(&self, extra: &[T]) -> Self {
        let n_dims = self.n_dims + extra.len();
        let mut data = Vec::with_capacity(self.n_frames * n_dims);
        for row in self.rows() {
            data.extend_from_slice(row);
            data.extend_from_slice(extra);
        }
        Self { data, n_dims, ..self.clone() }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMatrix<U> {
        FeatureMatrix {
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            n_frames: self.n_frames,
            n_dims: self.n_dims,
            frame_ms: self.frame_ms,
            hop_ms: self.hop_ms,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT basis and FFT plan.
pub struct MfccExtractor<T: Scalar> {
    cfg: FeatureConfig,
    window: Vec<T>,
    /// Per mel filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<T>)>,
    /// `[n_mfcc × n_mels]`, rows for c1..=c_n.
    dct: Vec<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> MfccExtractor<T> {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        let frame = cfg.frame_len();
        if frame < 2 || cfg.hop_len() == 0 || cfg.n_mels == 0 || cfg.n_mfcc >= cfg.n_mels {
            return Err(Error::Config(format!("invalid feature configuration {cfg:?}")));
        }
        let n_fft = cfg.n_fft();
        let window = (0..frame)
            .map(|n| T::lit(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame - 1) as f64).cos()))
            .collect();

        let nyquist = cfg.sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> =
            (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let first = (left / bin_hz).ceil() as usize;
                let last = ((right / bin_hz).floor() as usize).min(n_fft / 2);
                let weights = (first..=last)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f <= center { (f - left) / (center - left) } else { (right - f) / (right - center) };
                        T::lit(w.max(0.0))
                    })
                    .collect();
                (first, weights)
            })
            .collect();

        let m = cfg.n_mels as f64;
        let scale = (2.0 / m).sqrt();
        let dct = (1..=cfg.n_mfcc)
            .flat_map(|i| {
                (0..cfg.n_mels)
                    .map(move |j| T::lit(scale * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / m).cos()))
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { cfg: cfg.clone(), window, filters, dct, fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Magnitude spectrum (bins `0..=n_fft/2`) of a windowed, zero-padded frame.
    pub fn magnitude_spectrum(&self, frame: &[T]) -> Vec<T> {
        let n_fft = self.cfg.n_fft();
        let mut buf: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..=n_fft / 2].iter().map(|c| c.norm()).collect()
    }

    /// Log mel energies of a pre-emphasized frame.
    pub fn log_mel(&self, frame: &[T]) -> Vec<T> {
        let spec = self.magnitude_spectrum(frame);
        let floor = T::lit(self.cfg.log_floor);
        self.filters
            .iter()
            .map(|(first, w)| {
                let e: T = w.iter().zip(&spec[*first..]).map(|(&a, &b)| a * b).sum();
                e.max(floor).ln()
            })
            .collect()
    }

    /// Cepstral coefficients c1..=c_n of one pre-emphasized frame.
    pub fn cepstrum(&self, frame: &[T]) -> Vec<T> {
        let logmel = self.log_mel(frame);
        self.dct.chunks(self.cfg.n_mels).map(|row| row.iter().zip(&logmel).map(|(&a, &b)| a * b).sum()).collect()
    }

    /// Full feature matrix for `clip`, resampled to the configured rate first.
    pub fn extract(&self, clip: &AudioClip<T>) -> Result<FeatureMatrix<T>> {
        let clip = clip.resampled(self.cfg.sample_rate);
        let x = &clip.samples;
        let (frame, hop) = (self.cfg.frame_len(), self.cfg.hop_len());
        let n_frames = self
            .cfg
            .n_frames(x.len())
            .ok_or_else(|| Error::InputTooShort(format!("{} samples, one frame needs {frame}", x.len())))?;
        let k = T::lit(self.cfg.pre_emphasis);
        let emph: Vec<T> = (0..x.len()).map(|i| if i == 0 { x[0] } else { x[i] - k * x[i - 1] }).collect();
        let floor = T::lit(self.cfg.log_floor);
        let ns = self.cfg.n_static();
        let mut statics = Vec::with_capacity(n_frames * ns);
        for t in 0..n_frames {
            let start = t * hop;
            statics.extend(self.cepstrum(&emph[start..start + frame]));
            let energy: T = x[start..start + frame].iter().map(|&v| v * v).sum();
            statics.push(energy.max(floor).ln());
        }
        let d1 = deltas(&statics, n_frames, ns, self.cfg.delta_window);
        let d2 = deltas(&d1, n_frames, ns, self.cfg.delta_window);
        let mut data = Vec::with_capacity(n_frames * 3 * ns);
        for t in 0..n_frames {
            let r = t * ns..(t + 1) * ns;
            data.extend_from_slice(&statics[r.clone()]);
            data.extend_from_slice(&d1[r.clone()]);
            data.extend_from_slice(&d2[r]);
        }
        let mut m = FeatureMatrix::new(data, n_frames, 3 * ns)?;
        m.frame_ms = self.cfg.frame_ms;
        m.hop_ms = self.cfg.hop_ms;
        Ok(m)
    }
}

/// Regression deltas `Σ n (c[t+n] − c[t−n]) / (2 Σ n²)` with edge frames
/// repeated.
pub fn deltas<T: Scalar>(x: &[T], n_frames: usize, dims: usize, window: usize) -> Vec<T> {
    let denom = T::lit(2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>());
    let mut out = vec![T::zero(); x.len()];
    for t in 0..n_frames {
        for d in 0..dims {
            let mut acc = T::zero();
            for n in 1..=window {
                let ahead = (t + n).min(n_frames - 1);
                let behind = t.saturating_sub(n);
                acc = acc + T::lit(n as f64) * (x[ahead * dims + d] - x[behind * dims + d]);
            }
            out[t * dims + d] = acc / denom;
        }
    }
    out
}

/// One-shot extraction with a fresh [`MfccExtractor`].
pub fn mfcc<T: Scalar>(clip: &AudioClip<T>, cfg: &FeatureConfig) -> Result<FeatureMatrix<T>> {
    MfccExtractor::new(cfg)?.extract(clip)
}
