//! Deterministic formant-synthesized spoken digits in the layout of the Free
//! Spoken Digit Dataset (`{digit}_{speaker}_{index}.wav`, 8 kHz mono).
//!
//! Each digit is a phoneme sequence. Speakers differ in vocal-tract length
//! (formant scale), pitch and speaking rate; every utterance adds jitter on
//! formants, durations, pitch, level and background noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::features::wav::{write_wav, AudioClip};

/// Articulatory target held for `dur_ms`.
#[derive(Debug, Clone, Copy)]
struct Seg {
    formants: [f64; 3],
    voice: f64,
    noise: f64,
    noise_hz: f64,
    noise_bw: f64,
    dur_ms: f64,
}

const fn vowel(f1: f64, f2: f64, f3: f64, dur_ms: f64) -> Seg {
    Seg { formants: [f1, f2, f3], voice: 1.0, noise: 0.0, noise_hz: 3000.0, noise_bw: 800.0, dur_ms }
}

const fn sonorant(f1: f64, f2: f64, f3: f64, voice: f64, dur_ms: f64) -> Seg {
    Seg { formants: [f1, f2, f3], voice, noise: 0.0, noise_hz: 3000.0, noise_bw: 800.0, dur_ms }
}

const fn fricative(voice: f64, noise: f64, noise_hz: f64, noise_bw: f64, dur_ms: f64) -> Seg {
    Seg { formants: [300.0, 1700.0, 2600.0], voice, noise, noise_hz, noise_bw, dur_ms }
}

const CLOSURE: Seg = fricative(0.0, 0.0, 3000.0, 800.0, 45.0);
const IH: Seg = vowel(400.0, 1900.0, 2550.0, 90.0);
const OW: Seg = vowel(500.0, 900.0, 2400.0, 180.0);
const AH: Seg = vowel(640.0, 1190.0, 2390.0, 110.0);
const UW: Seg = vowel(300.0, 870.0, 2240.0, 180.0);
const IY: Seg = vowel(270.0, 2290.0, 3010.0, 160.0);
const AO: Seg = vowel(570.0, 840.0, 2410.0, 160.0);
const AA: Seg = vowel(730.0, 1090.0, 2440.0, 120.0);
const EH: Seg = vowel(530.0, 1840.0, 2480.0, 110.0);
const R: Seg = sonorant(450.0, 1200.0, 1650.0, 0.8, 80.0);
const W: Seg = sonorant(300.0, 650.0, 2200.0, 0.7, 70.0);
const N: Seg = sonorant(250.0, 1500.0, 2500.0, 0.35, 80.0);
const Z: Seg = fricative(0.3, 0.5, 3500.0, 700.0, 100.0);
const S: Seg = fricative(0.0, 0.8, 3600.0, 600.0, 120.0);
const F: Seg = fricative(0.0, 0.25, 2000.0, 2500.0, 100.0);
const TH: Seg = fricative(0.0, 0.15, 2600.0, 2500.0, 90.0);
const V: Seg = fricative(0.35, 0.25, 2000.0, 2500.0, 70.0);
const T_BURST: Seg = fricative(0.0, 0.6, 3200.0, 1000.0, 30.0);
const K_BURST: Seg = fricative(0.0, 0.6, 1800.0, 700.0, 35.0);

fn digit_segments(digit: usize) -> Vec<Seg> {
    match digit {
        0 => vec![Z, IH, R, OW],
        1 => vec![W, AH, N],
        2 => vec![CLOSURE, T_BURST, UW],
        3 => vec![TH, R, IY],
        4 => vec![F, AO, R],
        5 => vec![F, AA, IY, V],
        6 => vec![S, IH, CLOSURE, K_BURST, S],
        7 => vec![S, EH, V, AH, N],
        8 => vec![EH, IY, CLOSURE, T_BURST],
        9 => vec![N, AA, IY, N],
        _ => unreachable!("digit out of range"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub name: String,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    pub f0: f64,
    /// Multiplies segment durations.
    pub tempo: f64,
}

impl Speaker {
    pub fn new(name: &str, formant_scale: f64, f0: f64, tempo: f64) -> Self {
        Self { name: name.into(), formant_scale, f0, tempo }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitCorpusConfig {
    pub speakers: Vec<Speaker>,
    /// Speakers whose clips form the test split.
    pub test_speakers: Vec<String>,
    pub reps: usize,
    pub sample_rate: u32,
    /// Relative standard deviation of per-utterance formant jitter.
    pub formant_jitter: f64,
    /// Background noise level relative to the peak.
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for DigitCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: vec![
                Speaker::new("ash", 0.92, 105.0, 1.05),
                Speaker::new("bea", 1.14, 205.0, 0.95),
                Speaker::new("cal", 1.0, 130.0, 0.9),
                Speaker::new("dee", 1.32, 250.0, 1.25),
            ],
            test_speakers: vec!["dee".into()],
            reps: 20,
            sample_rate: 8000,
            formant_jitter: 0.1,
            noise_floor: 0.03,
            seed: 0,
        }
    }
}

/// Two-pole resonator with unity gain at DC.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a2 = -r * r;
        let y = (1.0 - a1 - a2) * x + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes one utterance of `digit` by `speaker`.
pub fn synth_digit(digit: usize, speaker: &Speaker, cfg: &DigitCorpusConfig, rng: &mut impl Rng) -> AudioClip<f64> {
    let fs = cfg.sample_rate as f64;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let jitter = |rng: &mut dyn rand::RngCore, sd: f64| 1.0 + sd * unit.sample(rng);

    let formant_warp = [(); 3].map(|_| jitter(rng, cfg.formant_jitter));
    let tempo = speaker.tempo * jitter(rng, 0.08);
    let f0_base = speaker.f0 * jitter(rng, 0.05);

    // Piecewise-constant targets per sample, smoothed below for coarticulation.
    let mut targets: Vec<Seg> = Vec::new();
    for seg in digit_segments(digit) {
        let mut s = seg;
        for (k, f) in s.formants.iter_mut().enumerate() {
            *f *= speaker.formant_scale * formant_warp[k] * jitter(rng, 0.02);
        }
        s.noise_hz = (s.noise_hz * speaker.formant_scale.sqrt()).min(0.45 * fs);
        let n = (s.dur_ms * tempo * jitter(rng, 0.1) * fs / 1000.0).round().max(1.0) as usize;
        targets.extend(std::iter::repeat_n(s, n));
    }

    let pad = |rng: &mut dyn rand::RngCore| (rng.gen_range(0.05..0.15) * fs) as usize;
    let (lead, tail) = (pad(rng), pad(rng));
    let n = targets.len();
    let slow = 1.0 - (-1.0 / (0.02 * fs)).exp();
    let fast = 1.0 - (-1.0 / (0.006 * fs)).exp();
    let mut state = targets[0];
    state.voice = 0.0;
    state.noise = 0.0;
    let mut res = [Resonator::default(), Resonator::default(), Resonator::default()];
    let mut fric = Resonator::default();
    let mut phase = 0.0;
    let mut speech = Vec::with_capacity(n);
    let bandwidths = [70.0, 100.0, 160.0];
    for (t, target) in targets.iter().enumerate() {
        for k in 0..3 {
            state.formants[k] += slow * (target.formants[k] - state.formants[k]);
        }
        state.voice += fast * (target.voice - state.voice);
        state.noise += fast * (target.noise - state.noise);
        state.noise_hz += fast * (target.noise_hz - state.noise_hz);
        state.noise_bw += fast * (target.noise_bw - state.noise_bw);

        // Falling pitch contour with a small vibrato.
        let progress = t as f64 / n as f64;
        let f0 = f0_base * (1.1 - 0.25 * progress) * (1.0 + 0.01 * (2.0 * PI * 5.0 * t as f64 / fs).sin());
        phase = (phase + f0 / fs).fract();
        let harmonics = (0.45 * fs / f0) as usize;
        let glottal: f64 = (1..=harmonics).map(|h| (2.0 * PI * h as f64 * phase).sin() / h as f64).sum();

        let mut voiced = glottal * state.voice;
        for k in 0..3 {
            voiced = res[k].step(voiced, state.formants[k].min(0.45 * fs), bandwidths[k], fs);
        }
        let white: f64 = unit.sample(rng);
        let hiss = fric.step(white, state.noise_hz, state.noise_bw, fs) * state.noise;
        speech.push(voiced + 3.0 * hiss);
    }

    let peak = speech.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let level = 0.5 * jitter(rng, 0.15).clamp(0.5, 1.5);
    let mut samples = Vec::with_capacity(lead + n + tail);
    samples.extend(std::iter::repeat_n(0.0, lead));
    samples.extend(speech.iter().map(|v| v / peak * level));
    samples.extend(std::iter::repeat_n(0.0, tail));
    for s in &mut samples {
        *s = (*s + cfg.noise_floor * level * unit.sample(rng)).clamp(-1.0, 1.0);
    }
    AudioClip::new(samples, cfg.sample_rate).expect("synthesized clip is valid")
}

/// Writes the full corpus under `out_dir/recordings` plus `out_dir/manifest.csv`.
pub fn write_digit_corpus(cfg: &DigitCorpusConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if cfg.speakers.is_empty() || cfg.reps == 0 {
        return Err(Error::Config("digit corpus needs speakers and repetitions".into()));
    }
    let out_dir = out_dir.as_ref();
    let rec = out_dir.join("recordings");
    std::fs::create_dir_all(&rec)?;
    let mut entries = Vec::new();
    for (si, speaker) in cfg.speakers.iter().enumerate() {
        let split = if cfg.test_speakers.contains(&speaker.name) { Split::Test } else { Split::Train };
        for digit in 0..10 {
            for rep in 0..cfg.reps {
                let stream = ((si * 10 + digit) * cfg.reps + rep) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                let clip = synth_digit(digit, speaker, cfg, &mut rng);
                let name = format!("{digit}_{}_{rep}.wav", speaker.name);
                write_wav(rec.join(&name), &clip)?;
                entries.push(ManifestEntry {
                    path: Path::new("recordings").join(name),
                    labels: [digit.to_string()].into(),
                    split: Some(split),
                });
            }
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Manifest over an FSDD-style `recordings/` directory; clips of
/// `test_speaker` go to the test split. `max_per_digit` caps the number of
/// repetitions taken per digit and speaker.
pub fn fsdd_manifest(
    dir: impl AsRef<Path>,
    test_speaker: &str,
    max_per_digit: Option<usize>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let rec = dir.join("recordings");
    let listing = std::fs::read_dir(&rec).map_err(|_| Error::MissingFile(rec.clone()))?;
    let mut entries = Vec::new();
    let mut names: Vec<String> = listing
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    for name in names {
        let stem = name.trim_end_matches(".wav");
        let parts: Vec<&str> = stem.split('_').collect();
        let [digit, speaker, idx] = parts[..] else { continue };
        let Ok(idx) = idx.parse::<usize>() else { continue };
        if max_per_digit.is_some_and(|m| idx >= m) {
            continue;
        }
        let split = if speaker == test_speaker { Split::Test } else { Split::Train };
        entries.push(ManifestEntry {
            path: Path::new("recordings").join(&name),
            labels: [digit.to_string()].into(),
            split: Some(split),
        });
    }
    DatasetManifest::new(dir, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let cfg = DigitCorpusConfig::default();
        for digit in 0..10 {
            let a = synth_digit(digit, &cfg.speakers[0], &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            let b = synth_digit(digit, &cfg.speakers[0], &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(a, b);
            assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
            let secs = a.duration_secs();
            assert!((0.2..1.5).contains(&secs), "digit {digit}: {secs}s");
        }
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DigitCorpusConfig { reps: 1, ..Default::default() };
        let m = write_digit_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 40);
        assert_eq!(m.class_names.len(), 10);
        assert_eq!(m.subset(Split::Test).unwrap().entries.len(), 10);
        let again = fsdd_manifest(dir.path(), "dee", None).unwrap();
        assert_eq!(again.entries.len(), 40);
        assert_eq!(again.subset(Split::Test).unwrap().entries.len(), 10);
    }
}
