//! The speaker classifier: a small 1-D CNN over 32-dim log-mel features,
//! with standard and adversarial (PGD inner loop) training, plus
//! enrollment/cosine scoring for closed-set identification.
//!
//! One forward builder serves every consumer: training binds the parameters
//! as differentiable leaves, attacks bind the waveform instead, and a
//! deployed transformation slots in as an extra layer (waveform-level before
//! framing, feature compression after the log-mel stage).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dsp::{ClusterMethod, FeatureStage, Transform};
use crate::error::{Error, Result};
use crate::features::{features_on_graph, FeatureConfig};
use crate::grad::checkpoint::NamedTensors;
use crate::grad::{Graph, Tensor};
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

const CONV1_OUT: usize = 48;
const CONV2_OUT: usize = 64;
const KERNEL: usize = 5;
const POOL: usize = 2;
pub const EMBEDDING_DIM: usize = 64;

/// Minimum number of feature frames the conv/pool stack needs.
pub const MIN_FRAMES: usize = 14;

#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub n_speakers: usize,
    pub feat_cfg: FeatureConfig,
    pub params: NamedTensors,
}

fn he_init(rng: &mut impl rand::Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("he std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl SpeakerModel {
    pub fn new(n_speakers: usize, seed: u64) -> Result<Self> {
        if n_speakers < 2 {
            return Err(Error::Param("need at least 2 speakers".into()));
        }
        let feat_cfg = FeatureConfig::default();
        let d = feat_cfg.num_mels;
        let mut rng = rng_from_seed(seed);
        let mut params = NamedTensors::default();
        params.push(
            "conv1_w",
            vec![CONV1_OUT, d, KERNEL],
            he_init(&mut rng, d * KERNEL, CONV1_OUT * d * KERNEL),
        );
        params.push("conv1_b", vec![CONV1_OUT], vec![0.0; CONV1_OUT]);
        params.push(
            "conv2_w",
            vec![CONV2_OUT, CONV1_OUT, KERNEL],
            he_init(&mut rng, CONV1_OUT * KERNEL, CONV2_OUT * CONV1_OUT * KERNEL),
        );
        params.push("conv2_b", vec![CONV2_OUT], vec![0.0; CONV2_OUT]);
        params.push(
            "fc1_w",
            vec![EMBEDDING_DIM, CONV2_OUT],
            he_init(&mut rng, CONV2_OUT, EMBEDDING_DIM * CONV2_OUT),
        );
        params.push("fc1_b", vec![EMBEDDING_DIM], vec![0.0; EMBEDDING_DIM]);
        params.push(
            "fc2_w",
            vec![n_speakers, EMBEDDING_DIM],
            he_init(&mut rng, EMBEDDING_DIM, n_speakers * EMBEDDING_DIM),
        );
        params.push("fc2_b", vec![n_speakers], vec![0.0; n_speakers]);
        Ok(Self { n_speakers, feat_cfg, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let params = NamedTensors::load(path)?;
        let fc2 = params
            .get("fc2_w")
            .ok_or_else(|| Error::Format("checkpoint missing fc2_w".into()))?;
        let n_speakers = fc2.shape[0];
        for name in ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_b"] {
            if params.get(name).is_none() {
                return Err(Error::Format(format!("checkpoint missing {name}")));
            }
        }
        Ok(Self { n_speakers, feat_cfg: FeatureConfig::default(), params })
    }

    /// Bind the parameters onto a graph as constants (inference and
    /// attack paths).
    pub(crate) fn bind_constants(&self, g: &Graph) -> Vec<Tensor> {
        self.bind(g, false)
    }

    fn bind(&self, g: &Graph, trainable: bool) -> Vec<Tensor> {
        self.params
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    g.leaf(e.data.clone(), &e.shape)
                } else {
                    g.constant(e.data.clone(), &e.shape)
                }
            })
            .collect()
    }

    /// Network body from a `[N, d]` feature tensor to logits (and the
    /// embedding). `bound` is the output of [`Self::bind`].
    fn head_from_features(&self, feats: &Tensor, bound: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let n_frames = feats.shape()[0];
        if n_frames < MIN_FRAMES {
            return Err(Error::Shape(format!(
                "need at least {MIN_FRAMES} feature frames, got {n_frames}"
            )));
        }
        let x = feats.transpose()?; // [d, N]
        let h = x
            .conv1d(&bound[0], &bound[1], 1, 0)?
            .relu()?
            .max_pool1d(POOL)?
            .conv1d(&bound[2], &bound[3], 1, 0)?
            .relu()?
            .mean_axis1()?; // [CONV2_OUT]
        let embedding = bound[4].matmul(&h)?.add(&bound[5])?; // [EMBEDDING_DIM]
        let logits = bound[6].matmul(&embedding.relu()?)?.add(&bound[7])?;
        Ok((logits, embedding))
    }

    /// Full forward from a waveform tensor already on the graph. A FeCo
    /// defense, when present, compresses the feature matrix at its stage
    /// inside the pipeline (only the original stage feeds this classifier).
    pub fn logits_graph(
        &self,
        g: &Graph,
        x: &Tensor,
        feco: Option<&FecoLayer>,
        seed: u64,
        bound: &[Tensor],
    ) -> Result<Tensor> {
        let feats = self.features_with_feco(g, x, feco, seed)?;
        self.head_from_features(&feats, bound).map(|(logits, _)| logits)
    }

    fn features_with_feco(
        &self,
        g: &Graph,
        x: &Tensor,
        feco: Option<&FecoLayer>,
        seed: u64,
    ) -> Result<Tensor> {
        let feats = features_on_graph(g, x, &self.feat_cfg, FeatureStage::Original)?;
        match feco {
            None => Ok(feats),
            Some(layer) => {
                if layer.stage != FeatureStage::Original {
                    return Err(Error::Config(format!(
                        "this classifier consumes original-stage features; FeCo at {:?} cannot be deployed on it",
                        layer.stage
                    )));
                }
                crate::feco::feco_op(
                    &feats,
                    layer.cl_r,
                    layer.cl_m,
                    seed,
                    (self.feat_cfg.frame_len, self.feat_cfg.hop_len, crate::audio::CANONICAL_SAMPLE_RATE),
                )
            }
        }
    }

    /// Logits straight from a feature matrix (the Replicate-F entry point:
    /// no waveform exists). A FeCo defense still compresses the matrix
    /// before the network sees it.
    pub fn logits_from_features(
        &self,
        feats: &crate::features::FeatureMatrix,
        feco: Option<&FecoLayer>,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if feats.cols != self.feat_cfg.num_mels {
            return Err(Error::Shape(format!(
                "feature dim {} does not match model input {}",
                feats.cols, self.feat_cfg.num_mels
            )));
        }
        let g = Graph::new();
        let ft = g.constant(feats.data.clone(), &[feats.rows, feats.cols]);
        let ft = match feco {
            None => ft,
            Some(layer) => crate::feco::feco_op(
                &ft,
                layer.cl_r,
                layer.cl_m,
                seed,
                (self.feat_cfg.frame_len, self.feat_cfg.hop_len, crate::audio::CANONICAL_SAMPLE_RATE),
            )?,
        };
        let bound = self.bind(&g, false);
        self.head_from_features(&ft, &bound).map(|(l, _)| l.value())
    }

    /// Logits for a waveform under an optional deployed transformation.
    pub fn forward_logits(
        &self,
        w: &Waveform,
        transform: Option<&Transform>,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant(w.samples.clone(), &[w.len()]);
        let bound = self.bind(&g, false);
        let (x, feco) = lower_waveform_transforms(&g, &x, transform.into_iter(), seed)?;
        let logits = self.logits_graph(&g, &x, feco.as_ref(), derive_seed(seed, FECO_STREAM), &bound)?;
        Ok(logits.value())
    }

    /// Embedding-layer output for enrollment and cosine scoring.
    pub fn embedding(
        &self,
        w: &Waveform,
        transform: Option<&Transform>,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant(w.samples.clone(), &[w.len()]);
        let bound = self.bind(&g, false);
        let (x, feco) = lower_waveform_transforms(&g, &x, transform.into_iter(), seed)?;
        let feats = self.features_with_feco(&g, &x, feco.as_ref(), derive_seed(seed, FECO_STREAM))?;
        let (_, embedding) = self.head_from_features(&feats, &bound)?;
        Ok(embedding.value())
    }

    /// Classify by argmax logit (closed-set identification without
    /// enrollment).
    pub fn classify(&self, w: &Waveform, transform: Option<&Transform>, seed: u64) -> Result<usize> {
        let logits = self.forward_logits(w, transform, seed)?;
        Ok(argmax(&logits))
    }
}

/// Feature-compression layer parameters deployed inside the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FecoLayer {
    pub cl_r: f64,
    pub cl_m: ClusterMethod,
    pub stage: FeatureStage,
}

impl FecoLayer {
    pub fn from_transform(t: &Transform) -> Option<Self> {
        match t {
            Transform::FeCo { cl_r, cl_m, stage } => {
                Some(Self { cl_r: *cl_r, cl_m: *cl_m, stage: *stage })
            }
            _ => None,
        }
    }
}

pub(crate) const FECO_STREAM: u64 = 0x7fec0;

/// Lower a sequence of waveform-level transforms onto the graph, splitting
/// off a FeCo layer (applied later, inside the feature pipeline). Transform
/// `i` draws randomness from `derive_seed(seed, i)`.
pub fn lower_waveform_transforms<'a>(
    g: &Graph,
    x: &Tensor,
    chain: impl Iterator<Item = &'a Transform>,
    seed: u64,
) -> Result<(Tensor, Option<FecoLayer>)> {
    let mut cur = x.clone();
    let mut feco = None;
    for (i, t) in chain.enumerate() {
        if let Some(layer) = FecoLayer::from_transform(t) {
            if feco.is_some() {
                return Err(Error::Config("at most one FeCo layer per chain".into()));
            }
            feco = Some(layer);
            continue;
        }
        cur = transform_on_graph(g, &cur, t, derive_seed(seed, i as u64))?;
    }
    Ok((cur, feco))
}

/// Record one waveform transform on the graph. Differentiable transforms
/// lower to exact ops (linear maps, median-select, identity-plus-noise);
/// non-differentiable ones become BPDA nodes: exact forward, identity
/// Jacobian backward.
pub fn transform_on_graph(g: &Graph, x: &Tensor, t: &Transform, seed: u64) -> Result<Tensor> {
    t.validate()?;
    let [n] = x.shape() else {
        return Err(Error::Shape(format!("expected waveform vector, got {:?}", x.shape())));
    };
    let n = *n;
    let wave = || Waveform {
        samples: x.value(),
        sample_rate: crate::audio::CANONICAL_SAMPLE_RATE,
    };
    match t {
        Transform::AvgSmooth { k } => {
            let kernel = vec![1.0 / *k as f64; *k];
            conv_same_replicate_op(x, kernel)
        }
        Transform::MedianSmooth { k } => x.median_smooth1d(*k),
        Transform::Turbulence { .. } => {
            // Identity-plus-noise: forward matches the plain transform
            // bit for bit, gradient passes through the identity branch.
            let noisy = t.apply_waveform(&wave(), seed)?;
            let delta: Vec<f64> =
                noisy.samples.iter().zip(x.value()).map(|(a, b)| a - b).collect();
            let noise = g.constant(delta, &[n]);
            x.add(&noise)
        }
        Transform::LowPass { f_pass, f_stop } => {
            let kernel = crate::dsp::lowpass_kernel(
                (f_pass + f_stop) / 2.0,
                f_stop - f_pass,
                crate::audio::CANONICAL_SAMPLE_RATE,
            );
            conv_same_replicate_op(x, kernel)
        }
        Transform::BandPass { f_pass_low, f_pass_high, f_stop_low, f_stop_high } => {
            let kernel = crate::dsp::bandpass_kernel(
                *f_pass_low,
                *f_pass_high,
                *f_stop_low,
                *f_stop_high,
                crate::audio::CANONICAL_SAMPLE_RATE,
            );
            conv_same_replicate_op(x, kernel)
        }
        Transform::DownUpSample { tau } => {
            let nyquist = f64::from(crate::audio::CANONICAL_SAMPLE_RATE) / 2.0;
            let cutoff = tau * nyquist;
            let kernel = crate::dsp::lowpass_kernel(
                cutoff,
                0.2 * cutoff,
                crate::audio::CANONICAL_SAMPLE_RATE,
            );
            let filtered = conv_same_replicate_op(x, kernel)?;
            let down_len = ((n as f64 * tau).round() as usize).max(2).min(n);
            let down = linear_resample_op(&filtered, down_len)?;
            linear_resample_op(&down, n)
        }
        Transform::Quantize { .. }
        | Transform::CodecCbr { .. }
        | Transform::CodecVbr { .. }
        | Transform::CodecExternal { .. } => {
            let out = t.apply_waveform(&wave(), seed)?;
            Ok(g.custom_unary(x, vec![n], out.samples, |grad| grad.to_vec()))
        }
        Transform::FeCo { .. } => Err(Error::Contract(
            "FeCo lowers inside the feature pipeline, not on waveforms".into(),
        )),
    }
}

/// Symmetric-kernel convolution with edge-replicate padding as a graph op.
fn conv_same_replicate_op(x: &Tensor, kernel: Vec<f64>) -> Result<Tensor> {
    let [n] = x.shape() else {
        return Err(Error::Shape("expected vector".into()));
    };
    let n = *n;
    let out = x.with_value(|v| crate::dsp::convolve_same_replicate(v, &kernel));
    let half = (kernel.len() / 2) as isize;
    Ok(x.unary_op(vec![n], out, move |g| {
        let mut gx = vec![0.0; n];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (j, &kv) in kernel.iter().enumerate() {
                let src = (i as isize + j as isize - half).clamp(0, n as isize - 1) as usize;
                gx[src] += kv * gi;
            }
        }
        gx
    }))
}

/// Endpoint-aligned linear resampling as a graph op.
fn linear_resample_op(x: &Tensor, len_out: usize) -> Result<Tensor> {
    let [n] = x.shape() else {
        return Err(Error::Shape("expected vector".into()));
    };
    let n = *n;
    let out = x.with_value(|v| crate::dsp::linear_resample(v, len_out));
    Ok(x.unary_op(vec![len_out], out, move |g| {
        let mut gx = vec![0.0; n];
        if n == 1 {
            gx[0] = g.iter().sum();
            return gx;
        }
        if len_out == 1 {
            gx[0] = g[0];
            return gx;
        }
        let scale = (n - 1) as f64 / (len_out - 1) as f64;
        for (i, &gi) in g.iter().enumerate() {
            let t = i as f64 * scale;
            let lo = t.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = t - lo as f64;
            gx[lo] += (1.0 - frac) * gi;
            gx[hi] += frac * gi;
        }
        gx
    }))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Untargeted margin: `logits[label] - max_{j != label} logits[j]`;
/// non-positive iff misclassified or tied.
pub fn margin_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() || logits.len() < 2 {
        return Err(Error::Contract(format!(
            "label {label} invalid for {} classes",
            logits.len()
        )));
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(_, v)| *v)
        .unwrap();
    Ok(logits[label] - best_other)
}

/// Which loss a gradient or query consumer wants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Margin,
}

pub fn loss_tensor(logits: &Tensor, label: usize, kind: LossKind) -> Result<Tensor> {
    match kind {
        LossKind::CrossEntropy => logits.softmax_cross_entropy(label),
        LossKind::Margin => logits.margin_loss(label),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Deployed transformation trained as a network layer.
    #[serde(default)]
    pub transform: Option<Transform>,
    /// When set, every batch example is replaced by its PGD adversarial
    /// counterpart before the parameter step.
    #[serde(default)]
    pub adversarial: Option<AdvTrainConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub steps: usize,
    pub epsilon: f64,
    /// Defaults to `epsilon / 5` when zero.
    #[serde(default)]
    pub alpha: f64,
    /// EOT draws for randomized transform layers.
    #[serde(default = "default_eot_r")]
    pub eot_r: usize,
}

fn default_eot_r() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 50,
            learning_rate: 1e-3,
            seed: 0,
            transform: None,
            adversarial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub per_epoch_accuracy: Vec<f64>,
    pub final_mean_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn flatten_params(p: &NamedTensors) -> Vec<f64> {
    p.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
}

fn unflatten_params(p: &mut NamedTensors, flat: &[f64]) {
    let mut off = 0;
    for e in &mut p.entries {
        let n = e.data.len();
        e.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Loss and parameter gradient for one example. `x_samples` is the
/// (possibly adversarial) waveform; features are recomputed inside so the
/// transform layer sees the current draw.
fn example_param_grad(
    model: &SpeakerModel,
    x_samples: &[f64],
    label: usize,
    transform: Option<&Transform>,
    seed: u64,
) -> Result<(f64, Vec<f64>, bool)> {
    let g = Graph::new();
    let x = g.constant(x_samples.to_vec(), &[x_samples.len()]);
    let bound = model.bind(&g, true);
    let (x, feco) = lower_waveform_transforms(&g, &x, transform.into_iter(), seed)?;
    let logits = model.logits_graph(&g, &x, feco.as_ref(), derive_seed(seed, FECO_STREAM), &bound)?;
    let correct = argmax(&logits.value()) == label;
    let loss = logits.softmax_cross_entropy(label)?;
    g.backward(&loss)?;
    let mut grad = Vec::new();
    for b in &bound {
        grad.extend(b.grad().expect("parameter gradient"));
    }
    Ok((loss.item(), grad, correct))
}

/// Loss and waveform gradient under the current parameters, EOT-averaged
/// over `eot_r` draws when the transform layer is randomized.
fn example_input_grad(
    model: &SpeakerModel,
    x_samples: &[f64],
    label: usize,
    transform: Option<&Transform>,
    eot_r: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let draws = if transform.is_some_and(|t| t.randomized()) { eot_r.max(1) } else { 1 };
    let mut loss_acc = 0.0;
    let mut grad_acc = vec![0.0; x_samples.len()];
    for r in 0..draws {
        let g = Graph::new();
        let x = g.leaf(x_samples.to_vec(), &[x_samples.len()]);
        let bound = model.bind(&g, false);
        let draw_seed = derive_seed(seed, r as u64);
        let (xt, feco) = lower_waveform_transforms(&g, &x, transform.into_iter(), draw_seed)?;
        let logits =
            model.logits_graph(&g, &xt, feco.as_ref(), derive_seed(draw_seed, FECO_STREAM), &bound)?;
        let loss = logits.softmax_cross_entropy(label)?;
        g.backward(&loss)?;
        loss_acc += loss.item();
        for (a, b) in grad_acc.iter_mut().zip(x.grad().expect("input gradient")) {
            *a += b;
        }
    }
    let inv = 1.0 / draws as f64;
    loss_acc *= inv;
    for v in &mut grad_acc {
        *v *= inv;
    }
    Ok((loss_acc, grad_acc))
}

/// PGD inner maximizer for adversarial training: seeded uniform start in
/// the epsilon ball, signed ascent steps, projection after every step.
fn pgd_inner(
    model: &SpeakerModel,
    clean: &[f64],
    label: usize,
    transform: Option<&Transform>,
    adv: &AdvTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let eps = adv.epsilon;
    let alpha = if adv.alpha > 0.0 { adv.alpha } else { eps / 5.0 };
    let start = crate::dsp::uniform_ball_noise(clean.len(), eps, seed);
    let mut x: Vec<f64> = clean
        .iter()
        .zip(&start)
        .map(|(c, n)| (c + n).clamp(-1.0, 1.0))
        .collect();
    for step in 0..adv.steps {
        let (_, grad) = example_input_grad(
            model,
            &x,
            label,
            transform,
            adv.eot_r,
            derive_seed(seed, 1 + step as u64),
        )?;
        for i in 0..x.len() {
            let moved = x[i] + alpha * grad[i].signum();
            x[i] = moved.clamp(clean[i] - eps, clean[i] + eps).clamp(-1.0, 1.0);
        }
    }
    Ok(x)
}

/// Standard or adversarial training, depending on `cfg.adversarial`.
/// Deterministic given the seed: shuffling, PGD starts, and transform draws
/// all derive from it, and batch gradients reduce in example order.
pub fn train(
    model: &mut SpeakerModel,
    data: &[(Waveform, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    for (_, label) in data {
        if *label >= model.n_speakers {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} speakers",
                model.n_speakers
            )));
        }
    }
    if let Some(t) = &cfg.transform {
        t.validate()?;
    }

    let mut flat = flatten_params(&model.params);
    let mut adam = Adam::new(flat.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { per_epoch_accuracy: Vec::new(), final_mean_loss: 0.0 };

    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x5bf + epoch as u64));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut loss_sum = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            unflatten_params(&mut model.params, &flat);
            let snapshot: &SpeakerModel = model;
            let results: Vec<Result<(f64, Vec<f64>, bool)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (w, label) = &data[idx];
                    let ex_seed = derive_seed(
                        cfg.seed,
                        ((epoch as u64) << 32) ^ ((batch_idx as u64) << 16) ^ idx as u64,
                    );
                    let x = match &cfg.adversarial {
                        None => w.samples.clone(),
                        Some(adv) => pgd_inner(
                            snapshot,
                            &w.samples,
                            *label,
                            cfg.transform.as_ref(),
                            adv,
                            derive_seed(ex_seed, 0xadf),
                        )?,
                    };
                    example_param_grad(snapshot, &x, *label, cfg.transform.as_ref(), ex_seed)
                })
                .collect();

            let mut grad_sum = vec![0.0; flat.len()];
            let mut n = 0usize;
            for r in results {
                let (loss, grad, ok) = r?;
                loss_sum += loss;
                correct += usize::from(ok);
                for (a, b) in grad_sum.iter_mut().zip(&grad) {
                    *a += b;
                }
                n += 1;
            }
            let inv = 1.0 / n as f64;
            for v in &mut grad_sum {
                *v *= inv;
            }
            if cfg.learning_rate > 0.0 {
                adam.step(&mut flat, &grad_sum);
            }
        }
        report.per_epoch_accuracy.push(correct as f64 / data.len() as f64);
        report.final_mean_loss = loss_sum / data.len() as f64;
    }
    unflatten_params(&mut model.params, &flat);
    Ok(report)
}

/// Adversarial training; `cfg.adversarial` must be set.
pub fn adv_train(
    model: &mut SpeakerModel,
    data: &[(Waveform, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.adversarial.is_none() {
        return Err(Error::Contract("adv_train requires cfg.adversarial".into()));
    }
    train(model, data, cfg)
}

/// Per-speaker mean embeddings from enrollment voices.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub embeddings: Vec<Vec<f64>>,
}

pub fn enroll(model: &SpeakerModel, voices_per_speaker: &[Vec<Waveform>]) -> Result<Enrollment> {
    if voices_per_speaker.iter().any(|v| v.is_empty()) {
        return Err(Error::Param("every enrolled speaker needs at least one voice".into()));
    }
    let embeddings = voices_per_speaker
        .iter()
        .map(|voices| {
            let mut acc = vec![0.0; EMBEDDING_DIM];
            for w in voices {
                let e = model.embedding(w, None, 0)?;
                for (a, b) in acc.iter_mut().zip(&e) {
                    *a += b;
                }
            }
            for v in &mut acc {
                *v /= voices.len() as f64;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Enrollment { embeddings })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Scoring("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Enrollment-based classification: argmax cosine similarity between the
/// test embedding and each enrollment embedding.
pub fn csi_classify(
    model: &SpeakerModel,
    enrollment: &Enrollment,
    w: &Waveform,
    transform: Option<&Transform>,
    seed: u64,
) -> Result<usize> {
    let e = model.embedding(w, transform, seed)?;
    let scores = enrollment
        .embeddings
        .iter()
        .map(|c| cosine_similarity(&e, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&scores))
}

/// Cosine scores against every enrolled speaker (the score surface
/// black-box attacks see in the enrollment task).
pub fn csi_scores(
    model: &SpeakerModel,
    enrollment: &Enrollment,
    w: &Waveform,
    transform: Option<&Transform>,
    seed: u64,
) -> Result<Vec<f64>> {
    let e = model.embedding(w, transform, seed)?;
    enrollment
        .embeddings
        .iter()
        .map(|c| cosine_similarity(&e, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;
    use std::sync::OnceLock;

    /// Two trivially separable synthetic "speakers": different fundamental
    /// frequencies with mild per-voice variation.
    fn tiny_dataset(per_speaker: usize, seed: u64) -> Vec<(Waveform, usize)> {
        use rand::Rng;
        let fs = f64::from(CANONICAL_SAMPLE_RATE);
        let mut rng = rng_from_seed(seed);
        let mut data = Vec::new();
        for label in 0..2usize {
            let f0 = if label == 0 { 130.0 } else { 225.0 };
            for _ in 0..per_speaker {
                let jitter: f64 = rng.random_range(0.97..1.03);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let noise_amp = 0.01;
                let samples: Vec<f64> = (0..4000)
                    .map(|t| {
                        let time = t as f64 / fs;
                        let mut v = 0.0;
                        for (h, a) in [(1.0, 0.5), (2.0, 0.25), (3.0, 0.12)] {
                            v += a * (std::f64::consts::TAU * f0 * jitter * h * time + phase).sin();
                        }
                        0.5 * v + noise_amp * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                data.push((Waveform::new(samples, CANONICAL_SAMPLE_RATE).unwrap(), label));
            }
        }
        data
    }

    fn trained_tiny() -> &'static (SpeakerModel, Vec<(Waveform, usize)>) {
        static MODEL: OnceLock<(SpeakerModel, Vec<(Waveform, usize)>)> = OnceLock::new();
        MODEL.get_or_init(|| {
            let data = tiny_dataset(20, 11);
            let mut model = SpeakerModel::new(2, 3).unwrap();
            let cfg = TrainConfig { epochs: 30, batch_size: 8, ..Default::default() };
            let report = train(&mut model, &data, &cfg).unwrap();
            let last = *report.per_epoch_accuracy.last().unwrap();
            assert!(last >= 0.95, "train accuracy {last}");
            (model, data)
        })
    }

    #[test]
    fn logits_shape_and_softmax_normalization() {
        let (model, data) = trained_tiny();
        let logits = model.forward_logits(&data[0].0, None, 0).unwrap();
        assert_eq!(logits.len(), 2);
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_training_reaches_high_accuracy() {
        let (model, data) = trained_tiny();
        let correct = data
            .iter()
            .filter(|(w, y)| model.classify(w, None, 0).unwrap() == *y)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
    }

    #[test]
    fn qt_identity_factor_keeps_logits() {
        let (model, data) = trained_tiny();
        let grid = data[0].0.pcm16_round_trip();
        let plain = model.forward_logits(&grid, None, 0).unwrap();
        let qt = model
            .forward_logits(&grid, Some(&Transform::Quantize { q: 1 }), 0)
            .unwrap();
        assert_eq!(plain, qt);
    }

    #[test]
    fn randomized_transform_seed_contract() {
        let (model, data) = trained_tiny();
        let t = Transform::Turbulence { snr_db: 10.0 };
        let a = model.forward_logits(&data[0].0, Some(&t), 1).unwrap();
        let b = model.forward_logits(&data[0].0, Some(&t), 1).unwrap();
        let c = model.forward_logits(&data[0].0, Some(&t), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((cross_entropy_loss(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(margin_loss(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(margin_loss(&[10.0, 0.0], 0).unwrap(), 10.0);
        assert_eq!(margin_loss(&[0.0, 10.0], 0).unwrap(), -10.0);
        assert!(cross_entropy_loss(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_dataset(4, 5);
        let mut model = SpeakerModel::new(2, 7).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.0, batch_size: 4, ..Default::default() };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = tiny_dataset(6, 9);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let mut m1 = SpeakerModel::new(2, 1).unwrap();
        train(&mut m1, &data, &cfg).unwrap();
        let mut m2 = SpeakerModel::new(2, 1).unwrap();
        train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn adv_train_degenerates_to_standard_at_tiny_epsilon() {
        let data = tiny_dataset(6, 13);
        let cfg_std = TrainConfig { epochs: 3, batch_size: 4, seed: 2, ..Default::default() };
        let mut std_model = SpeakerModel::new(2, 4).unwrap();
        let std_report = train(&mut std_model, &data, &cfg_std).unwrap();

        let cfg_adv = TrainConfig {
            adversarial: Some(AdvTrainConfig {
                steps: 3,
                epsilon: 1e-9,
                alpha: 0.0,
                eot_r: 1,
            }),
            ..cfg_std
        };
        let mut adv_model = SpeakerModel::new(2, 4).unwrap();
        let adv_report = adv_train(&mut adv_model, &data, &cfg_adv).unwrap();
        let rel = (std_report.final_mean_loss - adv_report.final_mean_loss).abs()
            / std_report.final_mean_loss.max(1e-12);
        assert!(rel <= 0.01, "relative loss gap {rel}");
    }

    #[test]
    fn adv_train_requires_config() {
        let data = tiny_dataset(2, 1);
        let mut model = SpeakerModel::new(2, 1).unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(adv_train(&mut model, &data, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let (model, data) = trained_tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = SpeakerModel::load(&path).unwrap();
        assert_eq!(loaded.n_speakers, 2);
        let a = model.forward_logits(&data[0].0, None, 0).unwrap();
        let b = loaded.forward_logits(&data[0].0, None, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enrollment_and_cosine_scoring() {
        let (model, data) = trained_tiny();
        let speaker0: Vec<Waveform> =
            data.iter().filter(|(_, y)| *y == 0).take(3).map(|(w, _)| w.clone()).collect();
        let speaker1: Vec<Waveform> =
            data.iter().filter(|(_, y)| *y == 1).take(3).map(|(w, _)| w.clone()).collect();
        let enr = enroll(model, &[speaker0.clone(), speaker1]).unwrap();

        // A voice identical to an enrollment voice classifies as its owner.
        assert_eq!(csi_classify(model, &enr, &speaker0[0], None, 0).unwrap(), 0);

        // Single enrolled speaker: always that speaker.
        let single = Enrollment { embeddings: vec![enr.embeddings[0].clone()] };
        assert_eq!(csi_classify(model, &single, &data[25].0, None, 0).unwrap(), 0);

        // Cosine is scale invariant, so scaling embeddings keeps the argmax.
        let e = model.embedding(&speaker0[0], None, 0).unwrap();
        let scaled: Vec<f64> = e.iter().map(|v| 3.5 * v).collect();
        assert!((cosine_similarity(&e, &scaled).unwrap() - 1.0).abs() < 1e-9);
        assert!(cosine_similarity(&e, &vec![0.0; e.len()]).is_err());
    }

    #[test]
    fn end_to_end_gradient_check() {
        // A fresh model: at a converged optimum the loss gradient sits at
        // the finite-difference noise floor and the comparison is vacuous.
        let model = SpeakerModel::new(2, 3).unwrap();
        let data = tiny_dataset(1, 11);
        let w = &data[0].0;
        let short = Waveform::new(w.samples[..2640].to_vec(), w.sample_rate).unwrap();
        let err = crate::grad::grad_check(
            |g, x| {
                let bound = model.bind(g, false);
                let logits = model.logits_graph(g, x, None, 0, &bound)?;
                logits.softmax_cross_entropy(0)
            },
            &short.samples,
            &[short.len()],
            1e-4,
            20,
            5,
        )
        .unwrap();
        assert!(err <= 1e-3, "relative error {err}");
    }

    #[test]
    fn transform_layer_gradients_match_finite_differences() {
        // Differentiable waveform transforms, checked through the lowering.
        let mut rng = rng_from_seed(3);
        use rand::Rng;
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-0.5..0.5)).collect();
        let cases: Vec<Transform> = vec![
            Transform::AvgSmooth { k: 5 },
            Transform::LowPass { f_pass: 4000.0, f_stop: 4500.0 },
            Transform::DownUpSample { tau: 0.45 },
        ];
        for t in cases {
            let err = crate::grad::grad_check(
                |g, xt| {
                    let out = transform_on_graph(g, xt, &t, 1)?;
                    let proj: Vec<f64> = (0..out.numel())
                        .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
                        .collect();
                    let shape = out.shape().to_vec();
                    let p = g.constant(proj, &shape);
                    out.mul(&p)?.sum()
                },
                &x,
                &[200],
                1e-5,
                16,
                9,
            )
            .unwrap();
            assert!(err <= 1e-4, "{t:?}: relative error {err}");
        }
    }

    #[test]
    fn bpda_forward_is_bit_exact() {
        let mut rng = rng_from_seed(7);
        use rand::Rng;
        let samples: Vec<f64> = (0..1024).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = Waveform::new(samples.clone(), CANONICAL_SAMPLE_RATE).unwrap();
        for t in [
            Transform::Quantize { q: 512 },
            Transform::CodecCbr {
                bitrate_bits_per_frame: 64,
                frame_len: 512,
                num_bands: 16,
            },
        ] {
            let g = Graph::new();
            let x = g.leaf(samples.clone(), &[samples.len()]);
            let lowered = transform_on_graph(&g, &x, &t, 0).unwrap();
            let direct = t.apply_waveform(&w, 0).unwrap();
            assert_eq!(lowered.value(), direct.samples, "{t:?}");

            // Identity Jacobian: upstream gradient passes through unchanged.
            let loss = lowered.sum().unwrap();
            g.backward(&loss).unwrap();
            assert!(x.grad().unwrap().iter().all(|&v| v == 1.0));
        }
    }
}
