//! Waveform-level input transformations.
//!
//! Time domain: quantization (QT), audio turbulence (AT), average smoothing
//! (AS), median smoothing (MS). Frequency domain: down-up resampling (DS),
//! FIR low-pass (LPF), FIR band-pass (BPF). Each returns a waveform of the
//! same length and rate as its input. AS, MS, DS, LPF, and BPF use
//! edge-replicate padding, which keeps them linear in the input and exact on
//! constant signals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{quantize_i16, Waveform, PCM_SCALE};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Quantize each sample on the int16 grid to the nearest multiple of `q`.
/// Ties round away from zero. `q = 1` is the identity for grid-valued input.
pub fn quantize(w: &Waveform, q: u32) -> Result<Waveform> {
    if q == 0 {
        return Err(Error::Param("quantization factor q must be >= 1".into()));
    }
    let q = f64::from(q);
    let samples = w
        .samples
        .iter()
        .map(|&s| {
            let s16 = f64::from(quantize_i16(s));
            let quantized = (s16 / q).round() * q;
            quantized.clamp(-32_768.0, 32_767.0) / PCM_SCALE
        })
        .collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Add white Gaussian noise at the given SNR (dB) relative to the input's
/// mean power. Deterministic given the seed.
pub fn add_turbulence(w: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::Param("turbulence snr must be finite".into()));
    }
    let p_in = w.samples.iter().map(|s| s * s).sum::<f64>() / w.len() as f64;
    let p_noise = p_in / 10f64.powf(snr_db / 10.0);
    let sigma = p_noise.sqrt();
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let samples = w
        .samples
        .iter()
        .map(|&s| s + sigma * normal.sample(&mut rng))
        .collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Param(format!("kernel size must be odd and >= 1, got {k}")));
    }
    Ok(())
}

/// Index into `x` with edge replication.
#[inline]
fn edge(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    x[i.clamp(0, n - 1) as usize]
}

/// Replace each sample with the mean of its k-wide neighborhood.
pub fn avg_smooth(w: &Waveform, k: usize) -> Result<Waveform> {
    check_kernel_size(k)?;
    let half = (k / 2) as isize;
    let samples = (0..w.len() as isize)
        .map(|i| {
            let mut acc = 0.0;
            for d in -half..=half {
                acc += edge(&w.samples, i + d);
            }
            acc / k as f64
        })
        .collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Median of a window; on even-length slices (never produced here) the lower
/// middle is taken. Returns the index within `window` of the chosen element,
/// preferring the earliest occurrence for ties.
pub(crate) fn median_index(window: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..window.len()).collect();
    order.sort_by(|&a, &b| {
        window[a].partial_cmp(&window[b]).unwrap().then(a.cmp(&b))
    });
    order[window.len() / 2]
}

/// Replace each sample with the median of its k-wide neighborhood.
pub fn median_smooth(w: &Waveform, k: usize) -> Result<Waveform> {
    Ok(Waveform {
        samples: median_smooth_with_choices(&w.samples, k)?.0,
        sample_rate: w.sample_rate,
    })
}

/// Median smoothing that also reports, per output index, which input index
/// supplied the median. The gradient engine routes the subgradient there.
pub(crate) fn median_smooth_with_choices(x: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    check_kernel_size(k)?;
    let half = (k / 2) as isize;
    let n = x.len() as isize;
    let mut out = Vec::with_capacity(x.len());
    let mut picks = Vec::with_capacity(x.len());
    let mut window = vec![0.0; k];
    for i in 0..n {
        for (j, d) in (-half..=half).enumerate() {
            window[j] = edge(x, i + d);
        }
        let m = median_index(&window);
        out.push(window[m]);
        // Map window offset back to a (clamped) input index.
        let src = (i + m as isize - half).clamp(0, n - 1) as usize;
        picks.push(src);
    }
    Ok((out, picks))
}

/// Linear-phase low-pass kernel: windowed sinc with a Hamming window,
/// normalized to unit DC gain. `cutoff_hz` is the -6 dB point.
pub fn lowpass_kernel(cutoff_hz: f64, transition_hz: f64, sample_rate: u32) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let mut taps = (3.3 * fs / transition_hz).ceil() as usize;
    if taps % 2 == 0 {
        taps += 1;
    }
    let taps = taps.max(3);
    let fc = cutoff_hz / fs; // cycles per sample
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
            };
            let hamming = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

/// Convolve with a symmetric odd-length kernel, edge-replicate padding,
/// output aligned with the input (zero phase).
pub(crate) fn convolve_same_replicate(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, &k)| k * edge(x, i + j as isize - half))
                .sum()
        })
        .collect()
}

/// Windowed-sinc FIR low-pass with cutoff midway between the passband and
/// stopband edges. Length-preserving and zero-phase.
pub fn fir_lowpass(w: &Waveform, f_pass: f64, f_stop: f64) -> Result<Waveform> {
    let nyquist = f64::from(w.sample_rate) / 2.0;
    if !(0.0 < f_pass && f_pass < f_stop && f_stop < nyquist) {
        return Err(Error::Param(format!(
            "low-pass band edges must satisfy 0 < f_p < f_s < {nyquist}, got f_p={f_pass}, f_s={f_stop}"
        )));
    }
    let kernel = lowpass_kernel((f_pass + f_stop) / 2.0, f_stop - f_pass, w.sample_rate);
    Ok(Waveform {
        samples: convolve_same_replicate(&w.samples, &kernel),
        sample_rate: w.sample_rate,
    })
}

/// Band-pass FIR built as the difference of two low-pass kernels with
/// cutoffs at the band-edge midpoints.
pub fn fir_bandpass(
    w: &Waveform,
    f_pass_low: f64,
    f_pass_high: f64,
    f_stop_low: f64,
    f_stop_high: f64,
) -> Result<Waveform> {
    let nyquist = f64::from(w.sample_rate) / 2.0;
    if !(0.0 < f_stop_low
        && f_stop_low < f_pass_low
        && f_pass_low < f_pass_high
        && f_pass_high < f_stop_high
        && f_stop_high < nyquist)
    {
        return Err(Error::Param(format!(
            "band-pass edges must satisfy 0 < f_sl < f_pl < f_pu < f_su < {nyquist}"
        )));
    }
    Ok(Waveform {
        samples: bandpass_kernel_apply(
            &w.samples,
            f_pass_low,
            f_pass_high,
            f_stop_low,
            f_stop_high,
            w.sample_rate,
        ),
        sample_rate: w.sample_rate,
    })
}

pub(crate) fn bandpass_kernel(
    f_pass_low: f64,
    f_pass_high: f64,
    f_stop_low: f64,
    f_stop_high: f64,
    sample_rate: u32,
) -> Vec<f64> {
    // Tap count from the narrower transition band; both kernels share it so
    // they can be subtracted tap-for-tap.
    let transition = (f_pass_low - f_stop_low).min(f_stop_high - f_pass_high);
    let low_cut = (f_stop_low + f_pass_low) / 2.0;
    let high_cut = (f_pass_high + f_stop_high) / 2.0;
    let hi = lowpass_kernel(high_cut, transition, sample_rate);
    let lo = lowpass_kernel_with_taps(low_cut, hi.len(), sample_rate);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

fn bandpass_kernel_apply(
    x: &[f64],
    f_pass_low: f64,
    f_pass_high: f64,
    f_stop_low: f64,
    f_stop_high: f64,
    sample_rate: u32,
) -> Vec<f64> {
    let kernel = bandpass_kernel(f_pass_low, f_pass_high, f_stop_low, f_stop_high, sample_rate);
    convolve_same_replicate(x, &kernel)
}

fn lowpass_kernel_with_taps(cutoff_hz: f64, taps: usize, sample_rate: u32) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let fc = cutoff_hz / fs;
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
            };
            let hamming = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

/// Linear interpolation of `x` sampled at `len_out` positions spanning the
/// full extent of `x` (endpoints aligned).
pub(crate) fn linear_resample(x: &[f64], len_out: usize) -> Vec<f64> {
    if x.len() == 1 {
        return vec![x[0]; len_out];
    }
    if len_out == 1 {
        return vec![x[0]];
    }
    let scale = (x.len() - 1) as f64 / (len_out - 1) as f64;
    (0..len_out)
        .map(|i| {
            let t = i as f64 * scale;
            let lo = t.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let frac = t - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

/// Down-sample to rate `tau * fs` (after an anti-alias low-pass at
/// `tau * Nyquist`) and linearly interpolate back to the original rate and
/// length.
pub fn down_up_sample(w: &Waveform, tau: f64) -> Result<Waveform> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Param(format!("downsampling ratio must be in (0,1), got {tau}")));
    }
    let nyquist = f64::from(w.sample_rate) / 2.0;
    let cutoff = tau * nyquist;
    let kernel = lowpass_kernel(cutoff, 0.2 * cutoff, w.sample_rate);
    let filtered = convolve_same_replicate(&w.samples, &kernel);
    let down_len = ((w.len() as f64 * tau).round() as usize).max(2).min(w.len());
    let down = linear_resample(&filtered, down_len);
    let up = linear_resample(&down, w.len());
    Ok(Waveform { samples: up, sample_rate: w.sample_rate })
}

/// Where in the pipeline a FeCo defense compresses features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    Original,
    Delta,
    Cmvn,
    Final,
}

/// Clustering method used by feature compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Warped,
}

/// A named transformation plus its tunable parameters. Defaults follow the
/// tuned values the defenses ship with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// QT: amplitude quantization on the int16 grid.
    Quantize { q: u32 },
    /// AT: additive white Gaussian noise at a target SNR.
    Turbulence { snr_db: f64 },
    /// AS: sliding-window mean.
    AvgSmooth { k: usize },
    /// MS: sliding-window median.
    MedianSmooth { k: usize },
    /// DS: down-sample then signal recovery.
    DownUpSample { tau: f64 },
    /// LPF: windowed-sinc low-pass.
    LowPass { f_pass: f64, f_stop: f64 },
    /// BPF: windowed-sinc band-pass.
    BandPass { f_pass_low: f64, f_pass_high: f64, f_stop_low: f64, f_stop_high: f64 },
    /// Toy subband codec, constant bit rate.
    CodecCbr {
        bitrate_bits_per_frame: u32,
        #[serde(default = "default_frame_len")]
        frame_len: usize,
        #[serde(default = "default_num_bands")]
        num_bands: usize,
    },
    /// Toy subband codec, variable bit rate.
    CodecVbr {
        quality: f64,
        #[serde(default = "default_frame_len")]
        frame_len: usize,
        #[serde(default = "default_num_bands")]
        num_bands: usize,
    },
    /// External codec invoked as a subprocess; `{in}`/`{out}` placeholders.
    CodecExternal { command_template: String },
    /// FeCo: cluster feature frames and keep the cluster means.
    FeCo { cl_r: f64, cl_m: ClusterMethod, stage: FeatureStage },
}

fn default_frame_len() -> usize {
    crate::codec::DEFAULT_FRAME_LEN
}

fn default_num_bands() -> usize {
    crate::codec::DEFAULT_NUM_BANDS
}

impl Transform {
    /// Tuned default for each transformation kind.
    pub fn default_of_kind(name: &str) -> Option<Transform> {
        Some(match name {
            "qt" => Transform::Quantize { q: 512 },
            "at" => Transform::Turbulence { snr_db: 16.0 },
            "as" => Transform::AvgSmooth { k: 17 },
            "ms" => Transform::MedianSmooth { k: 7 },
            "ds" => Transform::DownUpSample { tau: 0.45 },
            "lpf" => Transform::LowPass { f_pass: 4000.0, f_stop: 4500.0 },
            "bpf" => Transform::BandPass {
                f_pass_low: 300.0,
                f_pass_high: 4000.0,
                f_stop_low: 150.0,
                f_stop_high: 6000.0,
            },
            "cbr" => Transform::CodecCbr {
                bitrate_bits_per_frame: 96,
                frame_len: default_frame_len(),
                num_bands: default_num_bands(),
            },
            "vbr" => Transform::CodecVbr {
                quality: 0.4,
                frame_len: default_frame_len(),
                num_bands: default_num_bands(),
            },
            "feco-o-k" => Transform::FeCo {
                cl_r: 0.2,
                cl_m: ClusterMethod::Kmeans,
                stage: FeatureStage::Original,
            },
            "feco-o-wk" => Transform::FeCo {
                cl_r: 0.35,
                cl_m: ClusterMethod::Warped,
                stage: FeatureStage::Original,
            },
            "feco-d-k" => Transform::FeCo {
                cl_r: 0.1,
                cl_m: ClusterMethod::Kmeans,
                stage: FeatureStage::Delta,
            },
            "feco-c-k" => Transform::FeCo {
                cl_r: 0.1,
                cl_m: ClusterMethod::Kmeans,
                stage: FeatureStage::Cmvn,
            },
            "feco-f-k" => Transform::FeCo {
                cl_r: 0.1,
                cl_m: ClusterMethod::Kmeans,
                stage: FeatureStage::Final,
            },
            _ => return None,
        })
    }

    /// Can gradients be back-propagated through this transformation?
    pub fn differentiable(&self) -> bool {
        match self {
            Transform::Quantize { .. }
            | Transform::CodecCbr { .. }
            | Transform::CodecVbr { .. }
            | Transform::CodecExternal { .. } => false,
            Transform::Turbulence { .. }
            | Transform::AvgSmooth { .. }
            | Transform::MedianSmooth { .. }
            | Transform::DownUpSample { .. }
            | Transform::LowPass { .. }
            | Transform::BandPass { .. }
            | Transform::FeCo { .. } => true,
        }
    }

    /// Does the output depend on a random draw?
    pub fn randomized(&self) -> bool {
        matches!(self, Transform::Turbulence { .. } | Transform::FeCo { .. })
    }

    /// Does this transform operate on waveforms (as opposed to feature
    /// matrices)?
    pub fn is_waveform_level(&self) -> bool {
        !matches!(self, Transform::FeCo { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Transform::Quantize { q } => {
                if *q == 0 {
                    return Err(Error::Param("qt: q must be >= 1".into()));
                }
            }
            Transform::Turbulence { snr_db } => {
                if !snr_db.is_finite() {
                    return Err(Error::Param("at: snr must be finite".into()));
                }
            }
            Transform::AvgSmooth { k } | Transform::MedianSmooth { k } => {
                check_kernel_size(*k)?;
            }
            Transform::DownUpSample { tau } => {
                if !(0.0 < *tau && *tau < 1.0) {
                    return Err(Error::Param("ds: tau must be in (0,1)".into()));
                }
            }
            Transform::LowPass { f_pass, f_stop } => {
                if !(0.0 < *f_pass && f_pass < f_stop) {
                    return Err(Error::Param("lpf: need 0 < f_pass < f_stop".into()));
                }
            }
            Transform::BandPass { f_pass_low, f_pass_high, f_stop_low, f_stop_high } => {
                if !(0.0 < *f_stop_low
                    && f_stop_low < f_pass_low
                    && f_pass_low < f_pass_high
                    && f_pass_high < f_stop_high)
                {
                    return Err(Error::Param(
                        "bpf: need 0 < f_stop_low < f_pass_low < f_pass_high < f_stop_high".into(),
                    ));
                }
            }
            Transform::CodecCbr { bitrate_bits_per_frame, frame_len, num_bands } => {
                crate::codec::CodecConfig::cbr(*bitrate_bits_per_frame, *frame_len, *num_bands)?;
            }
            Transform::CodecVbr { quality, frame_len, num_bands } => {
                crate::codec::CodecConfig::vbr(*quality, *frame_len, *num_bands)?;
            }
            Transform::CodecExternal { command_template } => {
                if !command_template.contains("{in}") || !command_template.contains("{out}") {
                    return Err(Error::Param(
                        "external codec template needs {in} and {out} placeholders".into(),
                    ));
                }
            }
            Transform::FeCo { cl_r, .. } => {
                if !(0.0 < *cl_r && *cl_r < 1.0) {
                    return Err(Error::Param("feco: cl_r must be in (0,1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Apply a waveform-level transformation. FeCo is feature-level and is
    /// rejected here; the defended-model plumbing applies it inside the
    /// feature pipeline.
    pub fn apply_waveform(&self, w: &Waveform, seed: u64) -> Result<Waveform> {
        self.validate()?;
        match self {
            Transform::Quantize { q } => quantize(w, *q),
            Transform::Turbulence { snr_db } => add_turbulence(w, *snr_db, seed),
            Transform::AvgSmooth { k } => avg_smooth(w, *k),
            Transform::MedianSmooth { k } => median_smooth(w, *k),
            Transform::DownUpSample { tau } => down_up_sample(w, *tau),
            Transform::LowPass { f_pass, f_stop } => fir_lowpass(w, *f_pass, *f_stop),
            Transform::BandPass { f_pass_low, f_pass_high, f_stop_low, f_stop_high } => {
                fir_bandpass(w, *f_pass_low, *f_pass_high, *f_stop_low, *f_stop_high)
            }
            Transform::CodecCbr { bitrate_bits_per_frame, frame_len, num_bands } => {
                let cfg =
                    crate::codec::CodecConfig::cbr(*bitrate_bits_per_frame, *frame_len, *num_bands)?;
                crate::codec::toy_codec_roundtrip(w, &cfg)
            }
            Transform::CodecVbr { quality, frame_len, num_bands } => {
                let cfg = crate::codec::CodecConfig::vbr(*quality, *frame_len, *num_bands)?;
                crate::codec::toy_codec_roundtrip(w, &cfg)
            }
            Transform::CodecExternal { command_template } => {
                crate::codec::external_codec_roundtrip(w, command_template)
            }
            Transform::FeCo { .. } => Err(Error::Contract(
                "feco operates on feature matrices, not waveforms".into(),
            )),
        }
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        match self {
            Transform::Quantize { q } => format!("QT(q={q})"),
            Transform::Turbulence { snr_db } => format!("AT(snr={snr_db})"),
            Transform::AvgSmooth { k } => format!("AS(k={k})"),
            Transform::MedianSmooth { k } => format!("MS(k={k})"),
            Transform::DownUpSample { tau } => format!("DS(tau={tau})"),
            Transform::LowPass { f_stop, .. } => format!("LPF(f_s={f_stop})"),
            Transform::BandPass { .. } => "BPF".into(),
            Transform::CodecCbr { bitrate_bits_per_frame, .. } => {
                format!("CBR(b={bitrate_bits_per_frame})")
            }
            Transform::CodecVbr { quality, .. } => format!("VBR(q={quality})"),
            Transform::CodecExternal { .. } => "ExtCodec".into(),
            Transform::FeCo { cl_r, cl_m, stage } => {
                let m = match cl_m {
                    ClusterMethod::Kmeans => "k",
                    ClusterMethod::Warped => "wk",
                };
                let s = match stage {
                    FeatureStage::Original => "o",
                    FeatureStage::Delta => "d",
                    FeatureStage::Cmvn => "c",
                    FeatureStage::Final => "f",
                };
                format!("FeCo-{s}({m},cl_r={cl_r})")
            }
        }
    }
}

/// Sample a uniform perturbation in `[-eps, eps]^n`.
pub fn uniform_ball_noise(n: usize, eps: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(-eps..=eps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn wf(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, CANONICAL_SAMPLE_RATE).unwrap()
    }

    fn tone(freq: f64, len: usize, amp: f64) -> Waveform {
        let fs = f64::from(CANONICAL_SAMPLE_RATE);
        wf((0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect())
    }

    /// Power of `w` at a single frequency via correlation with a complex
    /// exponential. Exact for integer numbers of cycles.
    fn tone_power(w: &Waveform, freq: f64) -> f64 {
        let fs = f64::from(w.sample_rate);
        let n = w.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &s) in w.samples.iter().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * freq * i as f64 / fs;
            re += s * phase.cos();
            im += s * phase.sin();
        }
        2.0 * (re * re + im * im) / (n * n)
    }

    #[test]
    fn quantize_int16_domain() {
        let w = wf(vec![700.0 / PCM_SCALE, -100.0 / PCM_SCALE]);
        let q = quantize(&w, 512).unwrap();
        assert_eq!(q.samples[0], 512.0 / PCM_SCALE);
        assert_eq!(q.samples[1], 0.0);
    }

    #[test]
    fn quantize_q1_is_identity_on_grid() {
        let w = wf(vec![0.0, 1.0 / PCM_SCALE, -32768.0 / PCM_SCALE, 32767.0 / PCM_SCALE, 0.25]);
        let q = quantize(&w, 1).unwrap();
        assert_eq!(q.samples, w.samples);
    }

    #[test]
    fn quantize_is_idempotent() {
        let w = tone(440.0, 1000, 0.7);
        for q in [64, 512, 1024] {
            let once = quantize(&w, q).unwrap();
            let twice = quantize(&once, q).unwrap();
            assert_eq!(once.samples, twice.samples);
        }
    }

    #[test]
    fn turbulence_matches_requested_snr() {
        let w = tone(300.0, 16_000, 0.5);
        let noisy = add_turbulence(&w, 16.0, 7).unwrap();
        let measured = crate::audio::snr_db(&w, &noisy).unwrap();
        assert!((measured - 16.0).abs() <= 1.0, "measured snr {measured}");
    }

    #[test]
    fn turbulence_vanishes_at_high_snr() {
        let w = tone(300.0, 2000, 0.5);
        let noisy = add_turbulence(&w, 200.0, 3).unwrap();
        for (a, b) in w.samples.iter().zip(&noisy.samples) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn turbulence_seed_contract() {
        let w = tone(250.0, 500, 0.4);
        let a = add_turbulence(&w, 16.0, 1).unwrap();
        let b = add_turbulence(&w, 16.0, 1).unwrap();
        let c = add_turbulence(&w, 16.0, 2).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn avg_smooth_hand_example() {
        let w = wf(vec![0.0, 3.0, 0.0]);
        let s = avg_smooth(&w, 3).unwrap();
        assert_eq!(s.samples, vec![1.0, 1.0, 1.0]);
        // k = 1 is the identity.
        let id = avg_smooth(&w, 1).unwrap();
        assert_eq!(id.samples, w.samples);
        assert!(avg_smooth(&w, 4).is_err());
    }

    #[test]
    fn median_smooth_hand_example() {
        let w = wf(vec![1.0, 5.0, 2.0, 8.0, 3.0]);
        let s = median_smooth(&w, 3).unwrap();
        assert_eq!(s.samples, vec![1.0, 2.0, 5.0, 3.0, 3.0]);
        let id = median_smooth(&w, 1).unwrap();
        assert_eq!(id.samples, w.samples);
        assert!(median_smooth(&w, 2).is_err());
    }

    #[test]
    fn median_smooth_idempotent_on_constant_segments() {
        let w = wf(vec![2.0; 64]);
        let once = median_smooth(&w, 7).unwrap();
        let twice = median_smooth(&once, 7).unwrap();
        assert_eq!(once.samples, w.samples);
        assert_eq!(twice.samples, once.samples);
    }

    #[test]
    fn down_up_passes_dc() {
        let w = wf(vec![0.25; 2000]);
        let out = down_up_sample(&w, 0.45).unwrap();
        assert_eq!(out.len(), w.len());
        for &s in &out.samples[50..1950] {
            assert!((s - 0.25).abs() < 1e-9, "{s}");
        }
        for &s in &out.samples {
            assert!((s - 0.25).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn down_up_attenuates_above_new_nyquist() {
        let w = tone(7000.0, 16_000, 0.5);
        let out = down_up_sample(&w, 0.45).unwrap();
        let p_in = tone_power(&w, 7000.0);
        let p_out = tone_power(&out, 7000.0);
        let drop_db = 10.0 * (p_in / p_out.max(1e-300)).log10();
        assert!(drop_db >= 20.0, "attenuation {drop_db} dB");
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let pass = tone(1000.0, 16_000, 0.5);
        let stop = tone(6000.0, 16_000, 0.5);
        let fp = fir_lowpass(&pass, 4000.0, 4500.0).unwrap();
        let fs = fir_lowpass(&stop, 4000.0, 4500.0).unwrap();
        let pass_db = 10.0 * (tone_power(&pass, 1000.0) / tone_power(&fp, 1000.0)).log10();
        let stop_db = 10.0 * (tone_power(&stop, 6000.0) / tone_power(&fs, 6000.0).max(1e-300)).log10();
        assert!(pass_db.abs() <= 1.0, "passband ripple {pass_db} dB");
        assert!(stop_db >= 30.0, "stopband attenuation {stop_db} dB");
        assert_eq!(fp.len(), pass.len());
    }

    #[test]
    fn lowpass_rejects_bad_band() {
        let w = tone(1000.0, 256, 0.5);
        assert!(fir_lowpass(&w, 4500.0, 4000.0).is_err());
    }

    #[test]
    fn bandpass_default_band() {
        let pass = tone(1000.0, 16_000, 0.5);
        let low = tone(60.0, 16_000, 0.5);
        let bp = |w: &Waveform| fir_bandpass(w, 300.0, 4000.0, 150.0, 6000.0).unwrap();
        let pass_db = 10.0 * (tone_power(&pass, 1000.0) / tone_power(&bp(&pass), 1000.0)).log10();
        let low_db =
            10.0 * (tone_power(&low, 60.0) / tone_power(&bp(&low), 60.0).max(1e-300)).log10();
        assert!(pass_db.abs() <= 1.0, "passband ripple {pass_db} dB");
        assert!(low_db >= 20.0, "low stopband attenuation {low_db} dB");
    }

    #[test]
    fn linear_transforms_are_linear() {
        let mut rng = rng_from_seed(11);
        let n = 600;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();

        let ops: Vec<Box<dyn Fn(&Waveform) -> Waveform>> = vec![
            Box::new(|w| avg_smooth(w, 9).unwrap()),
            Box::new(|w| down_up_sample(w, 0.45).unwrap()),
            Box::new(|w| fir_lowpass(w, 4000.0, 4500.0).unwrap()),
            Box::new(|w| fir_bandpass(w, 300.0, 4000.0, 150.0, 6000.0).unwrap()),
        ];
        for op in &ops {
            let tx = op(&wf(x.clone()));
            let ty = op(&wf(y.clone()));
            let tc = op(&wf(combo.clone()));
            for i in 0..n {
                let expect = a * tx.samples[i] + b * ty.samples[i];
                assert!((tc.samples[i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flags_match_transform_table() {
        let cases = [
            ("qt", false, false),
            ("at", true, true),
            ("as", true, false),
            ("ms", true, false),
            ("ds", true, false),
            ("lpf", true, false),
            ("bpf", true, false),
            ("cbr", false, false),
            ("vbr", false, false),
            ("feco-o-k", true, true),
        ];
        for (name, diff, rand) in cases {
            let t = Transform::default_of_kind(name).unwrap();
            assert_eq!(t.differentiable(), diff, "{name} differentiable");
            assert_eq!(t.randomized(), rand, "{name} randomized");
        }
    }

    #[test]
    fn transform_spec_round_trips_through_toml() {
        let t = Transform::default_of_kind("feco-o-k").unwrap();
        let s = toml::to_string(&t).unwrap();
        let back: Transform = toml::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn outputs_keep_length_and_rate() {
        let w = tone(500.0, 3000, 0.3);
        for name in ["qt", "at", "as", "ms", "ds", "lpf", "bpf", "cbr", "vbr"] {
            let t = Transform::default_of_kind(name).unwrap();
            let out = t.apply_waveform(&w, 5).unwrap();
            assert_eq!(out.len(), w.len(), "{name}");
            assert_eq!(out.sample_rate, w.sample_rate, "{name}");
        }
    }
}
