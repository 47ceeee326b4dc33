//! Waveform representation, 16-bit PCM WAV I/O, and distortion metrics.
//!
//! Everything downstream (transforms, attacks, the harness) works in terms of
//! [`Waveform`]: mono samples in `[-1, 1]` at a fixed rate. The canonical rate
//! is 16 kHz; operations that combine two waveforms reject mismatched rates
//! instead of resampling, since silent resampling would corrupt perturbation
//! budgets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical sample rate used by the models and the harness.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Scale between float samples and the int16 grid. Read/write and the
/// quantization transform all use this factor so that grid values round-trip
/// exactly.
pub const PCM_SCALE: f64 = 32_768.0;

/// Mono audio at a fixed sample rate. Samples are nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Param("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Shape("waveform must contain at least one sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Clamp every sample into `[-1, 1]`.
    pub fn clip_samples(&mut self) {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
    }

    /// Quantize to the int16 grid and back, as if stored to disk and reloaded.
    /// Per-sample change is at most `1/32768`.
    pub fn pcm16_round_trip(&self) -> Waveform {
        let samples = self
            .samples
            .iter()
            .map(|&s| f64::from(quantize_i16(s)) / PCM_SCALE)
            .collect();
        Waveform { samples, sample_rate: self.sample_rate }
    }

    fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "waveform lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::Shape(format!(
                "sample rates differ: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        Ok(())
    }
}

/// Round a float sample to the nearest representable int16, clamping at the
/// rails. Ties round away from zero.
pub fn quantize_i16(sample: f64) -> i16 {
    let scaled = (sample.clamp(-1.0, 1.0) * PCM_SCALE).round();
    scaled.clamp(-32_768.0, 32_767.0) as i16
}

/// SNR and norm summary of a perturbation `deg - ref`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionReport {
    /// `10*log10(P_ref / P_delta)`; `f64::INFINITY` when the perturbation is
    /// identically zero.
    pub snr_db: f64,
    pub l2: f64,
    pub linf: f64,
}

impl DistortionReport {
    pub fn between(reference: &Waveform, degraded: &Waveform) -> Result<Self> {
        Ok(Self {
            snr_db: snr_db(reference, degraded)?,
            l2: lp_distance(reference, degraded, Norm::L2)?,
            linf: lp_distance(reference, degraded, Norm::LInf)?,
        })
    }
}

/// Which norm `lp_distance` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    LInf,
}

fn mean_power(samples: &[f64]) -> f64 {
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Signal-to-noise ratio in dB between a reference and a degraded copy.
/// Power is mean-of-squares so the value is length-invariant. Returns
/// `f64::INFINITY` when the two waveforms are identical.
pub fn snr_db(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    reference.check_compatible(degraded)?;
    let p_ref = mean_power(&reference.samples);
    let p_delta = reference
        .samples
        .iter()
        .zip(&degraded.samples)
        .map(|(r, d)| (d - r) * (d - r))
        .sum::<f64>()
        / reference.len() as f64;
    if p_delta == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p_ref / p_delta).log10())
}

/// L2 or L-infinity distance between equal-length waveforms.
pub fn lp_distance(a: &Waveform, b: &Waveform, norm: Norm) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "waveform lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let it = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs());
    Ok(match norm {
        Norm::L2 => it.map(|d| d * d).sum::<f64>().sqrt(),
        Norm::LInf => it.fold(0.0, f64::max),
    })
}

const RIFF: &[u8; 4] = b"RIFF";
const WAVE: &[u8; 4] = b"WAVE";
const FMT: &[u8; 4] = b"fmt ";
const DATA: &[u8; 4] = b"data";

/// Read a mono 16-bit PCM WAV file. Samples are the stored int16 values
/// divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

/// Parse WAV bytes already in memory. Shared by `read_wav` and the tests.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(Error::Format("file too short for a RIFF header".into()));
    }
    if &bytes[0..4] != RIFF {
        return Err(Error::Format("missing RIFF magic".into()));
    }
    if &bytes[8..12] != WAVE {
        return Err(Error::Format("missing WAVE form type".into()));
    }

    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len());
        let body_end = match body_end {
            Some(e) => e,
            None => return Err(Error::Format(format!("chunk {:?} overruns file", id))),
        };
        let body = &bytes[body_start..body_end];
        if &id == FMT {
            if body.len() < 16 {
                return Err(Error::Format("fmt chunk truncated".into()));
            }
            let audio_format = u16::from_le_bytes([body[0], body[1]]);
            if audio_format != 1 {
                return Err(Error::Format(format!(
                    "audio_format must be 1 (PCM), got {audio_format}"
                )));
            }
            let channels = u16::from_le_bytes([body[2], body[3]]);
            if channels != 1 {
                return Err(Error::Format(format!("num_channels must be 1, got {channels}")));
            }
            let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
            let bits = u16::from_le_bytes([body[14], body[15]]);
            if bits != 16 {
                return Err(Error::Format(format!("bits_per_sample must be 16, got {bits}")));
            }
            sample_rate = Some(rate);
        } else if &id == DATA {
            data = Some(body);
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let sample_rate = sample_rate.ok_or_else(|| Error::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;
    if data.is_empty() {
        return Err(Error::Format("empty data chunk".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("data chunk length is odd".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / PCM_SCALE)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Encode a waveform as mono 16-bit PCM WAV bytes.
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    for (i, s) in w.samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Param(format!("non-finite sample at index {i}")));
        }
    }
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(RIFF);
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(WAVE);
    out.extend_from_slice(FMT);
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(DATA);
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &w.samples {
        out.extend_from_slice(&quantize_i16(*s).to_le_bytes());
    }
    Ok(out)
}

/// Write a waveform to disk as mono 16-bit PCM WAV. Samples are clipped to
/// `[-1, 1]` and rounded to the int16 grid.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_wav(w)?;
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(samples: &[f64]) -> Waveform {
        Waveform::new(samples.to_vec(), CANONICAL_SAMPLE_RATE).unwrap()
    }

    fn wav_bytes_from_i16(vals: &[i16], rate: u32) -> Vec<u8> {
        let w = Waveform {
            samples: vals.iter().map(|&v| f64::from(v) / PCM_SCALE).collect(),
            sample_rate: rate,
        };
        encode_wav(&w).unwrap()
    }

    #[test]
    fn read_scales_int16_by_32768() {
        let bytes = wav_bytes_from_i16(&[0, 16384, -32768], 16_000);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate, 16_000);
    }

    #[test]
    fn write_read_round_trip_is_byte_identical() {
        let vals: Vec<i16> = vec![0, 1, -1, 12345, -12345, 32767, -32768, 700];
        let bytes = wav_bytes_from_i16(&vals, 16_000);
        let w = parse_wav(&bytes).unwrap();
        let rewritten = encode_wav(&w).unwrap();
        assert_eq!(bytes, rewritten);
    }

    #[test]
    fn rejects_non_16_bit() {
        // Hand-build an 8-bit fmt chunk.
        let mut bytes = wav_bytes_from_i16(&[0, 0], 16_000);
        bytes[34] = 8; // bits_per_sample
        let err = parse_wav(&bytes).unwrap_err();
        assert!(err.to_string().contains("bits_per_sample"), "{err}");
    }

    #[test]
    fn rejects_multichannel_and_non_pcm() {
        let mut stereo = wav_bytes_from_i16(&[0, 0], 16_000);
        stereo[22] = 2;
        assert!(parse_wav(&stereo).unwrap_err().to_string().contains("num_channels"));

        let mut float = wav_bytes_from_i16(&[0, 0], 16_000);
        float[20] = 3;
        assert!(parse_wav(&float).unwrap_err().to_string().contains("audio_format"));
    }

    #[test]
    fn write_clips_and_rounds() {
        assert_eq!(quantize_i16(1.5), 32767);
        assert_eq!(quantize_i16(-1.5), -32768);
        assert_eq!(quantize_i16(0.5), 16384);
        assert_eq!(quantize_i16(0.0), 0);
    }

    #[test]
    fn round_trip_error_within_one_step() {
        // Including the historical worst case for mismatched scale conventions.
        let mut samples = vec![1.0, -1.0, 0.999_984_74, 0.3, -0.77];
        let mut x = -1.0;
        while x <= 1.0 {
            samples.push(x);
            x += 0.000_137;
        }
        let w = wf(&samples);
        let rt = w.pcm16_round_trip();
        for (a, b) in w.samples.iter().zip(&rt.samples) {
            assert!((a - b).abs() <= 1.0 / PCM_SCALE + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn snr_examples() {
        // P_ref = 1, P_delta = 0.01 -> 20 dB.
        let reference = wf(&[1.0, 1.0, 1.0, 1.0]);
        let degraded = wf(&[1.1, 0.9, 1.1, 0.9]);
        let snr = snr_db(&reference, &degraded).unwrap();
        assert!((snr - 20.0).abs() < 1e-9, "snr = {snr}");

        assert_eq!(snr_db(&reference, &reference).unwrap(), f64::INFINITY);
    }

    #[test]
    fn snr_rejects_length_mismatch() {
        let a = wf(&[0.0, 0.0]);
        let b = wf(&[0.0]);
        assert!(matches!(snr_db(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn lp_distance_examples() {
        let a = wf(&[0.0, 0.0]);
        let b = wf(&[0.003, -0.004]);
        assert!((lp_distance(&a, &b, Norm::LInf).unwrap() - 0.004).abs() < 1e-12);
        assert!((lp_distance(&a, &b, Norm::L2).unwrap() - 0.005).abs() < 1e-12);
        assert_eq!(lp_distance(&a, &a, Norm::L2).unwrap(), 0.0);
        assert_eq!(lp_distance(&a, &a, Norm::LInf).unwrap(), 0.0);
    }

    #[test]
    fn snr_scaling_law() {
        // Scaling the perturbation by s>1 lowers SNR by exactly 20*log10(s).
        let reference = wf(&[0.4, -0.2, 0.1, 0.6, -0.5]);
        let delta = [0.01, -0.02, 0.015, 0.005, -0.01];
        for s in [2.0, 3.5, 10.0] {
            let d1: Vec<f64> =
                reference.samples.iter().zip(&delta).map(|(r, d)| r + d).collect();
            let d2: Vec<f64> =
                reference.samples.iter().zip(&delta).map(|(r, d)| r + s * d).collect();
            let snr1 = snr_db(&reference, &wf(&d1)).unwrap();
            let snr2 = snr_db(&reference, &wf(&d2)).unwrap();
            assert!((snr2 - (snr1 - 20.0 * s.log10())).abs() < 1e-9);
        }
    }
}
