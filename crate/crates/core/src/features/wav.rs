//! RIFF/WAVE reading and 16-bit PCM writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InputTooShort("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Parse("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling to `rate`.
    pub fn resampled(&self, rate: u32) -> Self {
        if rate == self.sample_rate {
            return self.clone();
        }
        let factor = self.sample_rate as f64 / rate as f64;
        Self { samples: stretch_linear(&self.samples, factor), sample_rate: rate }
    }
}

/// Reads samples at positions `k · step`, interpolating linearly. A `step`
/// above one shortens the signal.
pub fn stretch_linear<T: Scalar>(samples: &[T], step: f64) -> Vec<T> {
    let n = samples.len();
    if n < 2 {
        return samples.to_vec();
    }
    let out_len = ((n - 1) as f64 / step).floor() as usize + 1;
    (0..out_len)
        .map(|k| {
            let pos = k as f64 * step;
            let i = (pos.floor() as usize).min(n - 1);
            let frac = T::lit(pos - i as f64);
            if i + 1 < n {
                samples[i] + (samples[i + 1] - samples[i]) * frac
            } else {
                samples[i]
            }
        })
        .collect()
}

const PCM: u16 = 1;
const IEEE_FLOAT: u16 = 3;
const EXTENSIBLE: u16 = 0xFFFE;

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Decodes an in-memory WAV file, averaging channels to mono.
pub fn parse_wav<T: Scalar>(bytes: &[u8]) -> Result<AudioClip<T>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Parse("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Parse(format!(
                "chunk `{}` claims {size} bytes, only {} remain",
                String::from_utf8_lossy(id),
                bytes.len() - body
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse("fmt chunk too short".into()));
                }
                let mut format = le_u16(bytes, body);
                let channels = le_u16(bytes, body + 2);
                let rate = le_u32(bytes, body + 4);
                let bits = le_u16(bytes, body + 14);
                if format == EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::Parse("extensible fmt chunk too short".into()));
                    }
                    format = le_u16(bytes, body + 24);
                }
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::Parse("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Parse("no data chunk".into()))?;
    if channels == 0 {
        return Err(Error::Parse("zero channels".into()));
    }
    let decode: fn(&[u8]) -> f64 = match (format, bits) {
        (PCM, 8) => |b| (b[0] as f64 - 128.0) / 128.0,
        (PCM, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
        (PCM, 24) => |b| (i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8) as f64 / 8_388_608.0,
        (PCM, 32) => |b| i32::from_le_bytes(b.try_into().unwrap()) as f64 / 2_147_483_648.0,
        (IEEE_FLOAT, 32) => |b| f32::from_le_bytes(b.try_into().unwrap()) as f64,
        (IEEE_FLOAT, 64) => |b| f64::from_le_bytes(b.try_into().unwrap()),
        (PCM | IEEE_FLOAT, b) => return Err(Error::UnsupportedFormat(format!("{b}-bit samples"))),
        (f, _) => return Err(Error::UnsupportedFormat(format!("codec tag {f:#06x}"))),
    };
    let width = bits as usize / 8;
    let frame = width * channels as usize;
    if data.len() < frame {
        return Err(Error::Parse("data chunk holds no complete frame".into()));
    }
    let inv = 1.0 / channels as f64;
    let samples =
        data.chunks_exact(frame).map(|f| T::lit(f.chunks_exact(width).map(decode).sum::<f64>() * inv)).collect();
    AudioClip::new(samples, rate)
}

pub fn load_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<AudioClip<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_wav(&bytes)
}

/// Encodes mono 16-bit PCM, clipping to [-1, 1].
pub fn encode_wav_pcm16<T: Scalar>(clip: &AudioClip<T>) -> Vec<u8> {
    let n = clip.samples.len();
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + 2 * n as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(2 * n as u32).to_le_bytes());
    for &s in &clip.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, clip: &AudioClip<T>) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(clip))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav(format: u16, channels: u16, bits: u16, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&(8000 * (bits as u32 / 8) * channels as u32).to_le_bytes());
        b.extend_from_slice(&((bits / 8) * channels).to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn pcm16_mono_normalized() {
        let payload: Vec<u8> = [0i16, 16384, -16384].iter().flat_map(|v| v.to_le_bytes()).collect();
        let clip: AudioClip<f64> = parse_wav(&wav(1, 1, 16, &payload)).unwrap();
        assert_eq!(clip.samples, vec![0.0, 0.5, -0.5]);
        assert_eq!(clip.sample_rate, 8000);
    }

    #[test]
    fn stereo_float_is_averaged() {
        let payload: Vec<u8> = [1.0f32, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let clip: AudioClip<f64> = parse_wav(&wav(3, 2, 32, &payload)).unwrap();
        assert_eq!(clip.samples, vec![0.5]);
    }

    #[test]
    fn eight_and_twenty_four_bit() {
        let clip: AudioClip<f64> = parse_wav(&wav(1, 1, 8, &[128, 192, 0])).unwrap();
        assert_eq!(clip.samples, vec![0.0, 0.5, -1.0]);
        let clip: AudioClip<f64> = parse_wav(&wav(1, 1, 24, &[0x00, 0x00, 0x40, 0x00, 0x00, 0xC0])).unwrap();
        assert_eq!(clip.samples, vec![0.5, -0.5]);
    }

    #[test]
    fn truncated_chunk_is_parse_error() {
        let payload: Vec<u8> = [0i16, 1, 2, 3].iter().flat_map(|v| v.to_le_bytes()).collect();
        let b = wav(1, 1, 16, &payload);
        assert!(matches!(parse_wav::<f64>(&b[..b.len() - 3]), Err(Error::Parse(_))));
        assert!(matches!(parse_wav::<f64>(&b[..20]), Err(Error::Parse(_))));
    }

    #[test]
    fn compressed_codec_unsupported() {
        assert!(matches!(parse_wav::<f64>(&wav(7, 1, 8, &[1, 2])), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn pcm16_round_trip() {
        let clip = AudioClip::new(vec![0.0f64, 0.25, -0.75, 1.0], 16000).unwrap();
        let back: AudioClip<f64> = parse_wav(&encode_wav_pcm16(&clip)).unwrap();
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }

    #[test]
    fn resample_doubles_length() {
        let clip = AudioClip::new(vec![0.0f64, 1.0, 0.0], 8000).unwrap();
        let up = clip.resampled(16000);
        assert_eq!(up.samples, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
    }
}
