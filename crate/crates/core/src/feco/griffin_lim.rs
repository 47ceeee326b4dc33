//! Griffin-Lim reconstruction of a waveform from log-mel features.
//!
//! The log-mel matrix is mapped back to a linear power spectrogram with a
//! clipped pseudo-inverse of the mel filterbank, then phases are recovered
//! by alternating projections: impose the target magnitudes, resynthesize
//! with a least-squares inverse STFT, and re-measure phases. Reconstruction
//! is lossy on purpose; the attack that uses it trades fidelity for a real
//! waveform.

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::dsp::FeatureStage;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMatrix};
use crate::rng::rng_from_seed;

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

struct Stft {
    cfg: FeatureConfig,
    window: Vec<f64>,
    n_frames: usize,
    out_len: usize,
}

impl Stft {
    fn new(cfg: FeatureConfig, n_frames: usize) -> Self {
        let out_len = (n_frames - 1) * cfg.hop_len + cfg.frame_len;
        Self { cfg, window: hamming(cfg.frame_len), n_frames, out_len }
    }

    fn n_bins(&self) -> usize {
        self.cfg.fft_size / 2 + 1
    }

    /// Half-spectrum STFT of `x` (windowed, zero-padded frames).
    fn forward(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(self.cfg.fft_size);
        let n_bins = self.n_bins();
        let mut out = vec![Complex::new(0.0, 0.0); self.n_frames * n_bins];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for f in 0..self.n_frames {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            let start = f * self.cfg.hop_len;
            for t in 0..self.cfg.frame_len {
                buf[t].re = x[start + t] * self.window[t];
            }
            fft.process(&mut buf);
            out[f * n_bins..(f + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
        }
        out
    }

    /// Least-squares inverse: windowed overlap-add normalized by the summed
    /// squared window.
    fn inverse(&self, spec: &[Complex<f64>]) -> Vec<f64> {
        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(self.cfg.fft_size);
        let n_bins = self.n_bins();
        let mut acc = vec![0.0; self.out_len];
        let mut weight = vec![0.0; self.out_len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for f in 0..self.n_frames {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            buf[..n_bins].copy_from_slice(&spec[f * n_bins..(f + 1) * n_bins]);
            for k in 1..self.cfg.fft_size / 2 {
                buf[self.cfg.fft_size - k] = buf[k].conj();
            }
            ifft.process(&mut buf);
            let start = f * self.cfg.hop_len;
            for t in 0..self.cfg.frame_len {
                let sample = buf[t].re / self.cfg.fft_size as f64;
                acc[start + t] += sample * self.window[t];
                weight[start + t] += self.window[t] * self.window[t];
            }
        }
        for (a, w) in acc.iter_mut().zip(&weight) {
            if *w > 1e-12 {
                *a /= w;
            }
        }
        acc
    }
}

/// `|| |STFT(x)| - target || / ||target||` over all bins.
fn spectral_residual(spec: &[Complex<f64>], target_mag: &[f64]) -> f64 {
    let num: f64 = spec
        .iter()
        .zip(target_mag)
        .map(|(s, &m)| {
            let d = s.norm() - m;
            d * d
        })
        .sum();
    let den: f64 = target_mag.iter().map(|m| m * m).sum();
    (num / den.max(1e-300)).sqrt()
}

/// Reconstruct a waveform whose log-mel features approximate `m`. Returns
/// the waveform and the spectral-convergence residual after each iteration.
pub fn griffin_lim_with_trace(
    m: &FeatureMatrix,
    iterations: usize,
    seed: u64,
    cfg: &FeatureConfig,
) -> Result<(Waveform, Vec<f64>)> {
    if m.stage != FeatureStage::Original {
        return Err(Error::Contract(format!(
            "griffin-lim needs original-stage log-mel features, got {:?}",
            m.stage
        )));
    }
    if m.cols != cfg.num_mels {
        return Err(Error::Shape(format!(
            "feature dim {} does not match num_mels {}",
            m.cols, cfg.num_mels
        )));
    }
    let n_bins = cfg.fft_size / 2 + 1;

    // Clipped pseudo-inverse of the mel filterbank: B x M.
    let mel = crate::features::mel_filterbank_matrix(
        cfg.num_mels,
        cfg.fft_size,
        crate::audio::CANONICAL_SAMPLE_RATE,
    );
    let mel_m = DMatrix::from_row_slice(cfg.num_mels, n_bins, &mel);
    let gram = &mel_m * mel_m.transpose();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Contract("mel filterbank gram matrix is singular".into()))?;
    let pinv = mel_m.transpose() * gram_inv; // B x M

    // Target magnitudes per frame.
    let mut target_mag = vec![0.0; m.rows * n_bins];
    for f in 0..m.rows {
        let s = DMatrix::from_row_slice(cfg.num_mels, 1, m.row(f)).map(|v: f64| v.exp());
        let p = &pinv * s;
        for k in 0..n_bins {
            target_mag[f * n_bins + k] = p[(k, 0)].max(0.0).sqrt();
        }
    }

    let stft = Stft::new(*cfg, m.rows);

    // Random phase initialization.
    let mut rng = rng_from_seed(seed);
    let mut spec: Vec<Complex<f64>> = target_mag
        .iter()
        .map(|&mag| {
            let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            Complex::from_polar(mag, phase)
        })
        .collect();

    let mut trace = Vec::with_capacity(iterations);
    let mut z = stft.inverse(&spec);
    for _ in 0..iterations {
        let measured = stft.forward(&z);
        trace.push(spectral_residual(&measured, &target_mag));
        for (s, (&mag, meas)) in spec.iter_mut().zip(target_mag.iter().zip(&measured)) {
            let norm = meas.norm();
            *s = if norm > 1e-300 {
                meas * (mag / norm)
            } else {
                Complex::new(mag, 0.0)
            };
        }
        z = stft.inverse(&spec);
    }

    // The analysis front end pre-emphasizes frames, so the phase recovery
    // ran in the pre-emphasized domain; integrate back out.
    let mut x = vec![0.0; z.len()];
    let a = cfg.preemphasis;
    for t in 0..z.len() {
        x[t] = z[t] + if t > 0 { a * x[t - 1] } else { 0.0 };
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    for v in &mut x {
        *v -= mean;
    }

    Ok((
        Waveform { samples: x, sample_rate: m.sample_rate },
        trace,
    ))
}

/// Griffin-Lim reconstruction with the default iteration budget semantics.
pub fn griffin_lim_reconstruct(
    m: &FeatureMatrix,
    iterations: usize,
    seed: u64,
    cfg: &FeatureConfig,
) -> Result<Waveform> {
    griffin_lim_with_trace(m, iterations, seed, cfg).map(|(w, _)| w)
}
