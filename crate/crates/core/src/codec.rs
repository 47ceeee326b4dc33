//! Speech-compression transformations.
//!
//! The built-in codec is a deterministic frame-based subband coder: per
//! non-overlapping frame it takes a DFT, groups the magnitude spectrum into
//! bands, quantizes each band's magnitudes with a per-band bit allocation,
//! and resynthesizes with the original phases. CBR spreads a fixed bit
//! budget evenly over bands; VBR follows the signal, spending bits where the
//! band log-energy is, so spectrally peaked content survives better at the
//! same mean rate. Real codecs plug in through [`external_codec_roundtrip`].

use std::process::Command;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};

pub const DEFAULT_FRAME_LEN: usize = 512;
pub const DEFAULT_NUM_BANDS: usize = 16;
/// Per-band cap; at this depth quantization error is inaudible in the toy
/// codec's terms.
pub const MAX_BITS_PER_BAND: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecMode {
    /// Fixed bits per frame.
    Cbr { bitrate_bits_per_frame: u32 },
    /// Bit budget follows band log-energy; `quality` in (0, 1] scales it.
    Vbr { quality: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub frame_len: usize,
    pub num_bands: usize,
}

impl CodecConfig {
    pub fn cbr(bitrate_bits_per_frame: u32, frame_len: usize, num_bands: usize) -> Result<Self> {
        let cfg = Self {
            mode: CodecMode::Cbr { bitrate_bits_per_frame },
            frame_len,
            num_bands,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vbr(quality: f64, frame_len: usize, num_bands: usize) -> Result<Self> {
        let cfg = Self { mode: CodecMode::Vbr { quality }, frame_len, num_bands };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame_len.is_power_of_two() || self.frame_len < 4 {
            return Err(Error::Param(format!(
                "codec frame_len must be a power of two >= 4, got {}",
                self.frame_len
            )));
        }
        if self.num_bands == 0 || (self.frame_len / 2) % self.num_bands != 0 {
            return Err(Error::Param(format!(
                "num_bands ({}) must divide frame_len/2 ({})",
                self.num_bands,
                self.frame_len / 2
            )));
        }
        match self.mode {
            CodecMode::Cbr { bitrate_bits_per_frame } => {
                if bitrate_bits_per_frame == 0 {
                    return Err(Error::Param("cbr bitrate must be positive".into()));
                }
            }
            CodecMode::Vbr { quality } => {
                if !(quality > 0.0 && quality <= 1.0) {
                    return Err(Error::Param(format!(
                        "vbr quality must be in (0,1], got {quality}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Highest total any frame can be allocated.
    pub fn max_budget(&self) -> u32 {
        self.num_bands as u32 * MAX_BITS_PER_BAND
    }
}

fn band_energies(spectrum: &[Complex<f64>], num_bands: usize, band_width: usize) -> Vec<f64> {
    (0..num_bands)
        .map(|b| {
            spectrum[b * band_width..(b + 1) * band_width]
                .iter()
                .map(|c| c.norm_sqr())
                .sum()
        })
        .collect()
}

/// CBR schedule: even split, remainder to the lowest bands, at least 1 bit
/// each, capped per band.
fn cbr_allocation(bitrate: u32, num_bands: usize) -> Vec<u32> {
    let base = bitrate / num_bands as u32;
    let extra = (bitrate % num_bands as u32) as usize;
    (0..num_bands)
        .map(|b| {
            let bits = base + u32::from(b < extra);
            bits.clamp(1, MAX_BITS_PER_BAND)
        })
        .collect()
}

fn log_weight(energy: f64) -> f64 {
    (1.0 + energy / 1e-9).ln()
}

/// Round-trip through the toy codec. Output has the input's length and rate;
/// deterministic.
pub fn toy_codec_roundtrip(w: &Waveform, cfg: &CodecConfig) -> Result<Waveform> {
    cfg.validate()?;
    let frame_len = cfg.frame_len;
    let half = frame_len / 2;
    let band_width = half / cfg.num_bands;
    let n_frames = w.len().div_ceil(frame_len);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(frame_len);
    let ifft = planner.plan_fft_inverse(frame_len);

    // Analysis pass: spectra and band energies for every frame.
    let mut spectra: Vec<Vec<Complex<f64>>> = Vec::with_capacity(n_frames);
    let mut energies: Vec<Vec<f64>> = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * frame_len;
        let mut buf: Vec<Complex<f64>> = (0..frame_len)
            .map(|i| Complex::new(w.samples.get(start + i).copied().unwrap_or(0.0), 0.0))
            .collect();
        fft.process(&mut buf);
        energies.push(band_energies(&buf, cfg.num_bands, band_width));
        spectra.push(buf);
    }

    // Bit allocation per frame.
    let allocations: Vec<Vec<u32>> = match cfg.mode {
        CodecMode::Cbr { bitrate_bits_per_frame } => {
            let alloc = cbr_allocation(bitrate_bits_per_frame, cfg.num_bands);
            vec![alloc; n_frames]
        }
        CodecMode::Vbr { quality } => {
            let frame_weights: Vec<f64> = energies
                .iter()
                .map(|e| e.iter().map(|&x| log_weight(x)).sum::<f64>())
                .collect();
            let w_max = frame_weights.iter().cloned().fold(0.0, f64::max);
            energies
                .iter()
                .zip(&frame_weights)
                .map(|(bands, &w_f)| {
                    if w_max <= 0.0 || w_f <= 0.0 {
                        return vec![1; cfg.num_bands];
                    }
                    let total = quality * f64::from(cfg.max_budget()) * (w_f / w_max);
                    bands
                        .iter()
                        .map(|&e| {
                            let share = total * log_weight(e) / w_f;
                            (share.round() as i64).clamp(1, i64::from(MAX_BITS_PER_BAND)) as u32
                        })
                        .collect()
                })
                .collect()
        }
    };

    // Quantize magnitudes band by band, keep phases, resynthesize.
    let mut out = vec![0.0; w.len()];
    for (f, spectrum) in spectra.iter().enumerate() {
        let mut coded = spectrum.clone();
        for (b, &bits) in allocations[f].iter().enumerate() {
            let range = b * band_width..(b + 1) * band_width;
            let band_max = spectrum[range.clone()]
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            if band_max == 0.0 {
                continue;
            }
            let levels = f64::from((1u32 << bits) - 1);
            let step = band_max / levels;
            for k in range {
                let mag = spectrum[k].norm();
                let qmag = (mag / step).round() * step;
                coded[k] = if mag == 0.0 {
                    Complex::new(0.0, 0.0)
                } else {
                    spectrum[k] * (qmag / mag)
                };
            }
        }
        // Mirror the coded half-spectrum so the inverse transform is real.
        for k in 1..half {
            coded[frame_len - k] = coded[k].conj();
        }
        ifft.process(&mut coded);
        let start = f * frame_len;
        for i in 0..frame_len {
            if start + i < out.len() {
                out[start + i] = coded[i].re / frame_len as f64;
            }
        }
    }
    Ok(Waveform { samples: out, sample_rate: w.sample_rate })
}

/// Mean bits per frame the codec would actually spend on `w`. Used to match
/// CBR and VBR operating points in comparisons.
pub fn mean_bits_per_frame(w: &Waveform, cfg: &CodecConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.mode {
        CodecMode::Cbr { bitrate_bits_per_frame } => {
            Ok(cbr_allocation(bitrate_bits_per_frame, cfg.num_bands)
                .iter()
                .sum::<u32>() as f64)
        }
        CodecMode::Vbr { quality } => {
            let frame_len = cfg.frame_len;
            let half = frame_len / 2;
            let band_width = half / cfg.num_bands;
            let n_frames = w.len().div_ceil(frame_len);
            let mut planner = FftPlanner::<f64>::new();
            let fft = planner.plan_fft_forward(frame_len);
            let mut energies = Vec::with_capacity(n_frames);
            for f in 0..n_frames {
                let start = f * frame_len;
                let mut buf: Vec<Complex<f64>> = (0..frame_len)
                    .map(|i| Complex::new(w.samples.get(start + i).copied().unwrap_or(0.0), 0.0))
                    .collect();
                fft.process(&mut buf);
                energies.push(band_energies(&buf, cfg.num_bands, band_width));
            }
            let frame_weights: Vec<f64> = energies
                .iter()
                .map(|e| e.iter().map(|&x| log_weight(x)).sum::<f64>())
                .collect();
            let w_max = frame_weights.iter().cloned().fold(0.0, f64::max);
            let mut total = 0u64;
            for (bands, &w_f) in energies.iter().zip(&frame_weights) {
                if w_max <= 0.0 || w_f <= 0.0 {
                    total += cfg.num_bands as u64;
                    continue;
                }
                let budget = quality * f64::from(cfg.max_budget()) * (w_f / w_max);
                for &e in bands {
                    let share = budget * log_weight(e) / w_f;
                    total += (share.round() as i64).clamp(1, i64::from(MAX_BITS_PER_BAND)) as u64;
                }
            }
            Ok(total as f64 / n_frames as f64)
        }
    }
}

/// Round-trip a waveform through an external codec process. The template
/// must contain `{in}` and `{out}` placeholders; it runs under `sh -c`.
/// The output is padded or truncated to the input length.
pub fn external_codec_roundtrip(w: &Waveform, command_template: &str) -> Result<Waveform> {
    if !command_template.contains("{in}") || !command_template.contains("{out}") {
        return Err(Error::Param(
            "command template must contain {in} and {out} placeholders".into(),
        ));
    }
    let dir = tempfile::tempdir()?;
    let in_path = dir.path().join("in.wav");
    let out_path = dir.path().join("out.wav");
    write_wav(w, &in_path)?;

    let cmd = command_template
        .replace("{in}", &in_path.to_string_lossy())
        .replace("{out}", &out_path.to_string_lossy());
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::Adapter(format!("failed to launch `{cmd}`: {e}")))?;
    if !status.status.success() {
        return Err(Error::Adapter(format!(
            "codec command failed with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr).trim()
        )));
    }
    if !out_path.exists() {
        return Err(Error::Adapter(format!("codec command produced no output file: `{cmd}`")));
    }
    let decoded = read_wav(&out_path)?;
    if decoded.sample_rate != w.sample_rate {
        return Err(Error::Adapter(format!(
            "codec changed sample rate: {} -> {}",
            w.sample_rate, decoded.sample_rate
        )));
    }
    let mut samples = decoded.samples;
    samples.resize(w.len(), 0.0);
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{snr_db, CANONICAL_SAMPLE_RATE};

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        let fs = f64::from(CANONICAL_SAMPLE_RATE);
        Waveform::new(
            (0..len)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
                .collect(),
            CANONICAL_SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn vbr_quality_one_tone_reconstruction() {
        let w = tone(440.0, 8192, 0.5);
        let cfg = CodecConfig::vbr(1.0, DEFAULT_FRAME_LEN, DEFAULT_NUM_BANDS).unwrap();
        let rt = toy_codec_roundtrip(&w, &cfg).unwrap();
        let snr = snr_db(&w, &rt).unwrap();
        assert!(snr >= 30.0, "snr {snr} dB");
    }

    #[test]
    fn cbr_fine_quantization_limit() {
        let w = tone(440.0, 4096, 0.5);
        // 14 bits for each of the 16 bands.
        let cfg = CodecConfig::cbr(14 * 16, DEFAULT_FRAME_LEN, DEFAULT_NUM_BANDS).unwrap();
        let rt = toy_codec_roundtrip(&w, &cfg).unwrap();
        for (a, b) in w.samples.iter().zip(&rt.samples) {
            assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn roundtrip_is_deterministic_and_length_preserving() {
        let w = tone(700.0, 5000, 0.4); // not a multiple of frame_len
        let cfg = CodecConfig::cbr(64, DEFAULT_FRAME_LEN, DEFAULT_NUM_BANDS).unwrap();
        let a = toy_codec_roundtrip(&w, &cfg).unwrap();
        let b = toy_codec_roundtrip(&w, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), w.len());
    }

    #[test]
    fn fidelity_monotone_in_rate() {
        let w = tone(523.0, 8192, 0.5);
        let mut last = f64::NEG_INFINITY;
        for bits in [32, 64, 96, 128, 192, 256] {
            let cfg = CodecConfig::cbr(bits, DEFAULT_FRAME_LEN, DEFAULT_NUM_BANDS).unwrap();
            let snr = snr_db(&w, &toy_codec_roundtrip(&w, &cfg).unwrap()).unwrap();
            assert!(snr >= last, "snr {snr} after {last} at {bits} bits");
            last = snr;
        }
        let mut last = f64::NEG_INFINITY;
        for q in [0.25, 0.5, 0.75, 1.0] {
            let cfg = CodecConfig::vbr(q, DEFAULT_FRAME_LEN, DEFAULT_NUM_BANDS).unwrap();
            let snr = snr_db(&w, &toy_codec_roundtrip(&w, &cfg).unwrap()).unwrap();
            assert!(snr >= last, "snr {snr} after {last} at quality {q}");
            last = snr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::cbr(64, 500, 16).is_err()); // not a power of two
        assert!(CodecConfig::cbr(64, 512, 15).is_err()); // does not divide 256
        assert!(CodecConfig::vbr(0.0, 512, 16).is_err());
        assert!(CodecConfig::vbr(1.5, 512, 16).is_err());
    }

    #[test]
    fn external_codec_copy_identity() {
        let w = tone(300.0, 2048, 0.4).pcm16_round_trip();
        let rt = external_codec_roundtrip(&w, "cp {in} {out}").unwrap();
        assert_eq!(rt.samples, w.samples);
    }

    #[test]
    fn external_codec_missing_executable() {
        let w = tone(300.0, 512, 0.4);
        let err = external_codec_roundtrip(&w, "definitely-not-a-real-codec {in} {out}");
        assert!(matches!(err, Err(Error::Adapter(_))));
    }
}
