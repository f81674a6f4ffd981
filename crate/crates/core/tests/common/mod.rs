//! Reference implementations shared by integration tests and the acceptance
//! suite. Nothing here calls into the production feature or routing code.

#![allow(dead_code)]

use std::f64::consts::PI;

pub const FRAME: usize = 640;
pub const HOP: usize = 160;
pub const NFFT: usize = 1024;
pub const RATE: f64 = 16_000.0;
pub const MELS: usize = 26;
pub const CEPS: usize = 19;

/// `|X_k|` for `k = 0..=n/2` of `x` zero-padded to `n`, by direct summation.
pub fn naive_dft_magnitude(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let angle = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += v * angle.cos();
                im += v * angle.sin();
            }
            re.hypot(im)
        })
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos()).collect()
}

fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangle weights `[MELS][NFFT/2 + 1]` over 0 Hz .. Nyquist.
pub fn mel_weights() -> Vec<Vec<f64>> {
    let top = mel(RATE / 2.0);
    let edge: Vec<f64> = (0..MELS + 2).map(|i| inv_mel(top * i as f64 / (MELS + 1) as f64)).collect();
    (1..=MELS)
        .map(|m| {
            (0..=NFFT / 2)
                .map(|k| {
                    let f = k as f64 * RATE / NFFT as f64;
                    let rise = (f - edge[m - 1]) / (edge[m] - edge[m - 1]);
                    let fall = (edge[m + 1] - f) / (edge[m + 1] - edge[m]);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// c1..c19 of one pre-emphasized frame.
pub fn reference_cepstrum(frame: &[f64], weights: &[Vec<f64>]) -> Vec<f64> {
    let win = hamming(frame.len());
    let windowed: Vec<f64> = frame.iter().zip(&win).map(|(a, b)| a * b).collect();
    let spec = naive_dft_magnitude(&windowed, NFFT);
    let logmel: Vec<f64> =
        weights.iter().map(|w| w.iter().zip(&spec).map(|(a, b)| a * b).sum::<f64>().max(1e-10).ln()).collect();
    (1..=CEPS)
        .map(|i| {
            let s: f64 = logmel
                .iter()
                .enumerate()
                .map(|(j, &v)| v * (PI * i as f64 * (2 * j + 1) as f64 / (2 * MELS) as f64).cos())
                .sum();
            s * (2.0 / MELS as f64).sqrt()
        })
        .collect()
}

/// Full 60-dim features of a 16 kHz signal, row-major.
pub fn reference_features(x: &[f64]) -> Vec<Vec<f64>> {
    let weights = mel_weights();
    let mut emph = x.to_vec();
    for i in (1..x.len()).rev() {
        emph[i] = x[i] - 0.97 * x[i - 1];
    }
    let frames = 1 + (x.len() - FRAME) / HOP;
    let statics: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let s = t * HOP;
            let mut row = reference_cepstrum(&emph[s..s + FRAME], &weights);
            let e: f64 = x[s..s + FRAME].iter().map(|v| v * v).sum();
            row.push(e.max(1e-10).ln());
            row
        })
        .collect();
    let delta = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let last = rows.len() as isize - 1;
        let at = |t: isize| &rows[t.clamp(0, last) as usize];
        (0..rows.len() as isize)
            .map(|t| {
                (0..rows[0].len())
                    .map(|d| (1..=2).map(|n| n as f64 * (at(t + n)[d] - at(t - n)[d])).sum::<f64>() / 10.0)
                    .collect()
            })
            .collect()
    };
    let d1 = delta(&statics);
    let d2 = delta(&d1);
    (0..frames).map(|t| [statics[t].clone(), d1[t].clone(), d2[t].clone()].concat()).collect()
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Squash, written out per component.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|v| v * k).collect()
}

/// Hand-unrolled routing over predictions `uhat[i][j]`; returns the final
/// outputs and the couplings used at each iteration.
pub fn reference_routing(uhat: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (ni, nj) = (uhat.len(), uhat[0].len());
    let dim = uhat[0][0].len();
    let mut b = vec![vec![0.0; nj]; ni];
    let mut couplings = Vec::new();
    let mut v = vec![vec![0.0; dim]; nj];
    for it in 0..iters {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..nj {
            let s: Vec<f64> = (0..dim).map(|d| (0..ni).map(|i| c[i][j] * uhat[i][j][d]).sum()).collect();
            v[j] = squash(&s);
        }
        couplings.push(c);
        if it + 1 < iters {
            for i in 0..ni {
                for j in 0..nj {
                    b[i][j] += (0..dim).map(|d| uhat[i][j][d] * v[j][d]).sum::<f64>();
                }
            }
        }
    }
    (v, couplings)
}

/// Two primary capsules, two classes, 2-D predictions: both primaries agree
/// on class 0 and point in opposite directions for class 1.
pub const AGREEMENT_UHAT: [[[f64; 2]; 2]; 2] = [[[1.0, 0.5], [0.8, -0.6]], [[0.9, 0.6], [-0.7, 0.7]]];

pub fn agreement_uhat() -> Vec<Vec<Vec<f64>>> {
    AGREEMENT_UHAT.iter().map(|i| i.iter().map(|j| j.to_vec()).collect()).collect()
}
