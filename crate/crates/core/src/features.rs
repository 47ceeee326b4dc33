//! Acoustic feature extraction, differentiable end to end.
//!
//! The pipeline follows the usual speech front end: framing with
//! pre-emphasis and a Hamming window, power spectrum, mel filterbank, log.
//! On top of the original log-mel features it can stack time-derivative
//! (delta) features, per-utterance cepstral mean/variance normalization,
//! and an energy-based voice activity gate ("final" features). Every stage
//! except the VAD mask participates in reverse-mode gradients, which is what
//! lets white-box attacks push gradients from the classifier all the way
//! back to waveform samples.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::dsp::FeatureStage;
use crate::error::{Error, Result};
use crate::grad::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub num_mels: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    /// Frames below `mean - vad_offset * std` of log-energy are dropped at
    /// the Final stage.
    pub vad_offset: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop_len: 160,
            fft_size: 512,
            num_mels: 32,
            preemphasis: 0.97,
            log_floor: 1e-10,
            vad_offset: 0.5,
        }
    }
}

impl FeatureConfig {
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if self.frame_len < self.hop_len || self.hop_len == 0 {
            return Err(Error::Param("need frame_len >= hop_len >= 1".into()));
        }
        if len < self.frame_len {
            return Err(Error::Shape(format!(
                "waveform of {len} samples is shorter than one frame ({})",
                self.frame_len
            )));
        }
        Ok(1 + (len - self.frame_len) / self.hop_len)
    }

    fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// N x d feature matrix in row-major order plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub stage: FeatureStage,
    pub frame_len: usize,
    pub hop_len: usize,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Triangular mel filterbank, `num_mels x (fft_size/2 + 1)`, filters peaked
/// at 1 and centered on equally spaced mel points between 0 Hz and Nyquist.
pub fn mel_filterbank_matrix(num_mels: usize, fft_size: usize, sample_rate: u32) -> Vec<f64> {
    assert!(num_mels >= 2, "need at least two mel bands");
    let n_bins = fft_size / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_points: Vec<f64> = (0..num_mels + 2)
        .map(|i| hz_to_mel(nyquist) * i as f64 / (num_mels + 1) as f64)
        .collect();
    let hz_points: Vec<f64> = mel_points.iter().map(|&m| mel_to_hz(m)).collect();
    let bin_hz = f64::from(sample_rate) / fft_size as f64;

    let mut mat = vec![0.0; num_mels * n_bins];
    for m in 0..num_mels {
        let (lo, center, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f >= lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            mat[m * n_bins + k] = w.max(0.0);
        }
    }
    mat
}

/// Pre-emphasize a frame in place: `y[t] = x[t] - a*x[t-1]`, first sample
/// unchanged.
fn preemphasize(frame: &mut [f64], a: f64) {
    for t in (1..frame.len()).rev() {
        frame[t] -= a * frame[t - 1];
    }
}

/// Slice a waveform into pre-emphasized frames, before windowing. The
/// public `frame_signal` windows them as well.
pub(crate) fn frame_preemph(w: &Waveform, cfg: &FeatureConfig) -> Result<(Vec<f64>, usize)> {
    let n = cfg.n_frames(w.len())?;
    let mut frames = vec![0.0; n * cfg.frame_len];
    for f in 0..n {
        let start = f * cfg.hop_len;
        let dst = &mut frames[f * cfg.frame_len..(f + 1) * cfg.frame_len];
        dst.copy_from_slice(&w.samples[start..start + cfg.frame_len]);
        preemphasize(dst, cfg.preemphasis);
    }
    Ok((frames, n))
}

/// Frame, pre-emphasize, and Hamming-window a waveform. Returns the frames
/// as an `N x frame_len` row-major buffer.
pub fn frame_signal(w: &Waveform, cfg: &FeatureConfig) -> Result<(Vec<f64>, usize)> {
    let (mut frames, n) = frame_preemph(w, cfg)?;
    let window = hamming(cfg.frame_len);
    for f in 0..n {
        for (t, win) in window.iter().enumerate() {
            frames[f * cfg.frame_len + t] *= win;
        }
    }
    Ok((frames, n))
}

/// Power spectrum of already-windowed frames: zero-pad to `fft_size`, DFT,
/// squared magnitudes of bins `0..=fft_size/2`.
pub fn power_spectrum(frames: &[f64], n_frames: usize, cfg: &FeatureConfig) -> Vec<f64> {
    let frame_len = frames.len() / n_frames.max(1);
    let n_bins = cfg.n_bins();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut out = vec![0.0; n_frames * n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for f in 0..n_frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for t in 0..frame_len {
            buf[t].re = frames[f * frame_len + t];
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[f * n_bins + k] = buf[k].norm_sqr();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Graph ops
// ---------------------------------------------------------------------------

/// Framing + pre-emphasis + window as a single linear graph op.
pub fn frame_op(g: &Graph, x: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    let [len] = x.shape() else {
        return Err(Error::Shape(format!("frame_op expects a vector, got {:?}", x.shape())));
    };
    let len = *len;
    let w = Waveform { samples: x.value(), sample_rate: crate::audio::CANONICAL_SAMPLE_RATE };
    let (frames, n) = frame_signal(&w, cfg)?;
    let cfg = *cfg;
    let window = hamming(cfg.frame_len);
    let _ = g;
    Ok(x.unary_op(vec![n, cfg.frame_len], frames, move |grad| {
        let mut gx = vec![0.0; len];
        let a = cfg.preemphasis;
        for f in 0..n {
            let start = f * cfg.hop_len;
            let gr = &grad[f * cfg.frame_len..(f + 1) * cfg.frame_len];
            // Adjoint of windowing then per-frame pre-emphasis.
            for t in 0..cfg.frame_len {
                let gw = gr[t] * window[t];
                gx[start + t] += gw;
                if t > 0 {
                    gx[start + t - 1] -= a * gw;
                }
            }
        }
        gx
    }))
}

/// FFT-backed power spectrum op. Forward and backward are exact
/// realizations of the underlying DFT linear map: the backward pass applies
/// the analytic adjoint `2 Re(F^T (g .* conj(X)))` with one FFT per frame.
pub fn power_spectrum_op(x: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    let &[n, frame_len] = x.shape() else {
        return Err(Error::Shape(format!(
            "power_spectrum expects [N, frame_len], got {:?}",
            x.shape()
        )));
    };
    if frame_len > cfg.fft_size {
        return Err(Error::Shape(format!(
            "frame_len {frame_len} exceeds fft_size {}",
            cfg.fft_size
        )));
    }
    let fft_size = cfg.fft_size;
    let n_bins = cfg.n_bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = vec![0.0; n * n_bins];
    let mut spectra: Vec<Complex<f64>> = Vec::with_capacity(n * n_bins);
    x.with_value(|frames| {
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        for f in 0..n {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for t in 0..frame_len {
                buf[t].re = frames[f * frame_len + t];
            }
            fft.process(&mut buf);
            for k in 0..n_bins {
                out[f * n_bins + k] = buf[k].norm_sqr();
                spectra.push(buf[k]);
            }
        }
    });

    Ok(x.unary_op(vec![n, n_bins], out, move |grad| {
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(fft_size);
        let mut gx = vec![0.0; n * frame_len];
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        for f in 0..n {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            for k in 0..n_bins {
                let gk = grad[f * n_bins + k];
                if gk != 0.0 {
                    buf[k] = spectra[f * n_bins + k].conj() * gk;
                }
            }
            fft.process(&mut buf);
            for t in 0..frame_len {
                gx[f * frame_len + t] = 2.0 * buf[t].re;
            }
        }
        gx
    }))
}

/// Power spectrum built from explicit DFT matrices via generic ops. The
/// fast op above must match this path to high precision; tests assert it.
pub fn power_spectrum_explicit(g: &Graph, x: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    let &[_, frame_len] = x.shape() else {
        return Err(Error::Shape("expected [N, frame_len]".into()));
    };
    let n_bins = cfg.n_bins();
    let mut re = vec![0.0; frame_len * n_bins];
    let mut im = vec![0.0; frame_len * n_bins];
    for t in 0..frame_len {
        for k in 0..n_bins {
            let phase = -2.0 * std::f64::consts::PI * (t * k) as f64 / cfg.fft_size as f64;
            re[t * n_bins + k] = phase.cos();
            im[t * n_bins + k] = phase.sin();
        }
    }
    let re = g.constant(re, &[frame_len, n_bins]);
    let im = g.constant(im, &[frame_len, n_bins]);
    let xr = x.matmul(&re)?.square()?;
    let xi = x.matmul(&im)?.square()?;
    xr.add(&xi)
}

/// Regression-window delta matrix (window 2, edge replicated): a constant
/// `N x N` linear operator over the time axis.
fn delta_matrix(n: usize) -> Vec<f64> {
    let denom = 2.0 * (1.0 + 4.0);
    let mut a = vec![0.0; n * n];
    let clamp = |t: isize| t.clamp(0, n as isize - 1) as usize;
    for t in 0..n as isize {
        for w in 1..=2isize {
            let coeff = w as f64 / denom;
            a[t as usize * n + clamp(t + w)] += coeff;
            a[t as usize * n + clamp(t - w)] -= coeff;
        }
    }
    a
}

/// Per-column standardization across rows built from generic ops.
fn cmvn_on_graph(g: &Graph, x: &Tensor) -> Result<Tensor> {
    let &[n, d] = x.shape() else {
        return Err(Error::Shape("cmvn expects a matrix".into()));
    };
    let ones_row = g.constant(vec![1.0 / n as f64; n], &[1, n]);
    let ones_col = g.constant(vec![1.0; n], &[n, 1]);
    let mu = ones_row.matmul(x)?; // [1, d]
    let mu_full = ones_col.matmul(&mu)?; // [N, d]
    let centered = x.sub(&mu_full)?;
    let var = ones_row.matmul(&centered.square()?)?; // [1, d]
    let inv_std = var.add_scalar(1e-12)?.powf_const(-0.5)?;
    let inv_full = ones_col.matmul(&inv_std)?;
    let _ = d;
    centered.mul(&inv_full)
}

/// Log-energy per frame of the windowed frames (forward values only); used
/// by the VAD gate, whose mask is held constant in the backward pass.
fn frame_log_energy(frames: &Tensor, log_floor: f64) -> Vec<f64> {
    let &[n, frame_len] = frames.shape() else { unreachable!() };
    frames.with_value(|v| {
        (0..n)
            .map(|f| {
                let e: f64 = v[f * frame_len..(f + 1) * frame_len].iter().map(|x| x * x).sum();
                (e + log_floor).ln()
            })
            .collect()
    })
}

/// Indices of frames kept by the energy VAD. At least one frame survives.
pub(crate) fn vad_keep_indices(log_energy: &[f64], offset: f64) -> Vec<usize> {
    let n = log_energy.len();
    let mean = log_energy.iter().sum::<f64>() / n as f64;
    let var = log_energy.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
    let threshold = mean - offset * var.sqrt();
    let keep: Vec<usize> =
        (0..n).filter(|&i| log_energy[i] >= threshold).collect();
    if keep.is_empty() {
        // Cannot happen (max >= mean >= threshold), but stay safe.
        let best = (0..n)
            .max_by(|&a, &b| log_energy[a].partial_cmp(&log_energy[b]).unwrap())
            .unwrap();
        return vec![best];
    }
    keep
}

/// Build the feature pipeline on a graph up to `stage`. Returns the stage
/// tensor of shape `[N, d]`.
pub fn features_on_graph(
    g: &Graph,
    x: &Tensor,
    cfg: &FeatureConfig,
    stage: FeatureStage,
) -> Result<Tensor> {
    let frames = frame_op(g, x, cfg)?;
    let power = power_spectrum_op(&frames, cfg)?;
    let mel = g.constant(
        transpose_matrix(
            &mel_filterbank_matrix(cfg.num_mels, cfg.fft_size, crate::audio::CANONICAL_SAMPLE_RATE),
            cfg.num_mels,
            cfg.n_bins(),
        ),
        &[cfg.n_bins(), cfg.num_mels],
    );
    let original = power.matmul(&mel)?.add_scalar(cfg.log_floor)?.ln()?;
    if stage == FeatureStage::Original {
        return Ok(original);
    }

    let n = original.shape()[0];
    let a = g.constant(delta_matrix(n), &[n, n]);
    let d1 = a.matmul(&original)?;
    let d2 = a.matmul(&d1)?;
    let delta = Tensor::concat_cols(&[&original, &d1, &d2])?;
    if stage == FeatureStage::Delta {
        return Ok(delta);
    }

    let cmvn = cmvn_on_graph(g, &delta)?;
    if stage == FeatureStage::Cmvn {
        return Ok(cmvn);
    }

    let keep = vad_keep_indices(&frame_log_energy(&frames, cfg.log_floor), cfg.vad_offset);
    cmvn.gather_rows(&keep)
}

pub(crate) fn transpose_matrix(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}

/// Extract features without tracking gradients.
pub fn extract_features(w: &Waveform, stage: FeatureStage, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let g = Graph::new();
    let x = g.constant(w.samples.clone(), &[w.len()]);
    let t = features_on_graph(&g, &x, cfg, stage)?;
    let shape = t.shape().to_vec();
    Ok(FeatureMatrix {
        data: t.value(),
        rows: shape[0],
        cols: shape[1],
        stage,
        frame_len: cfg.frame_len,
        hop_len: cfg.hop_len,
        sample_rate: w.sample_rate,
    })
}

/// Orthonormal DCT-II matrix, `num_ceps x d`.
fn dct_matrix(num_ceps: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; num_ceps * d];
    for k in 0..num_ceps {
        let scale = if k == 0 { (1.0 / d as f64).sqrt() } else { (2.0 / d as f64).sqrt() };
        for n in 0..d {
            m[k * d + n] =
                scale * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / d as f64).cos();
        }
    }
    m
}

/// MFCCs: DCT-II of the log-mel rows, keeping the first `num_ceps`
/// coefficients.
pub fn mfcc(w: &Waveform, num_ceps: usize, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    if num_ceps > cfg.num_mels {
        return Err(Error::Param(format!(
            "num_ceps {num_ceps} exceeds num_mels {}",
            cfg.num_mels
        )));
    }
    let logmel = extract_features(w, FeatureStage::Original, cfg)?;
    let dct = dct_matrix(num_ceps, cfg.num_mels);
    let mut data = vec![0.0; logmel.rows * num_ceps];
    for i in 0..logmel.rows {
        let row = logmel.row(i);
        for k in 0..num_ceps {
            data[i * num_ceps + k] = dct[k * cfg.num_mels..(k + 1) * cfg.num_mels]
                .iter()
                .zip(row)
                .map(|(c, v)| c * v)
                .sum();
        }
    }
    Ok(FeatureMatrix {
        data,
        rows: logmel.rows,
        cols: num_ceps,
        stage: FeatureStage::Original,
        frame_len: cfg.frame_len,
        hop_len: cfg.hop_len,
        sample_rate: w.sample_rate,
    })
}
