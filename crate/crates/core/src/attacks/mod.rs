//! Adversarial attacks against the speaker classifier.
//!
//! White-box attacks (FGSM, PGD, CW-infinity, CW-L2) consume a
//! [`WhiteBoxModel`]: loss values plus input gradients. Black-box attacks
//! get strictly less: NES and PSO see scores through a counted
//! [`ScoreQuery`], the SSA attack sees only decisions through a
//! [`DecisionQuery`]. Every attack stores its result back on the 16-bit PCM
//! grid before judging success, which is what makes tiny perturbations
//! survive being written to disk.

mod nes;
mod pso;
mod ssa;

pub use nes::{nes_attack, nes_gradient_estimate};
pub use pso::{pso_attack, pso_minimize, PsoParams};
pub use ssa::{ssa_attack, ssa_reconstruct, SsaParams};

use serde::{Deserialize, Serialize};

use crate::audio::{DistortionReport, Waveform};
use crate::error::{Error, Result};
use crate::model::LossKind;
use crate::rng::derive_seed;

/// Gradient-level access to a (possibly transform-defended) model.
pub trait WhiteBoxModel: Sync {
    fn n_classes(&self) -> usize;
    fn sample_rate(&self) -> u32;
    /// Scores for success checks; `seed` feeds randomized defense layers.
    fn logits(&self, x: &[f64], seed: u64) -> Result<Vec<f64>>;
    /// Loss and its gradient with respect to the input samples.
    fn loss_grad(&self, x: &[f64], label: usize, kind: LossKind, seed: u64)
        -> Result<(f64, Vec<f64>)>;
}

/// Score-only oracle with query accounting.
pub struct ScoreQuery<'a> {
    f: Box<dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a>,
    count: u64,
}

impl<'a> ScoreQuery<'a> {
    pub fn new(f: impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a) -> Self {
        Self { f: Box::new(f), count: 0 }
    }

    pub fn scores(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.count += 1;
        (self.f)(x)
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Decision-only oracle with query accounting.
pub struct DecisionQuery<'a> {
    f: Box<dyn FnMut(&[f64]) -> Result<usize> + 'a>,
    count: u64,
}

impl<'a> DecisionQuery<'a> {
    pub fn new(f: impl FnMut(&[f64]) -> Result<usize> + 'a) -> Self {
        Self { f: Box::new(f), count: 0 }
    }

    pub fn decide(&mut self, x: &[f64]) -> Result<usize> {
        self.count += 1;
        (self.f)(x)
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Attack selection plus tuned parameters, as configured in the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    Fgsm {
        epsilon: f64,
    },
    Pgd {
        epsilon: f64,
        #[serde(default)]
        alpha: f64,
        steps: usize,
    },
    CwInf {
        epsilon: f64,
        #[serde(default)]
        alpha: f64,
        steps: usize,
        #[serde(default)]
        kappa: f64,
    },
    CwL2 {
        #[serde(default)]
        kappa: f64,
        #[serde(default = "default_c_init")]
        c_init: f64,
        #[serde(default = "default_bsearch")]
        binary_search_steps: usize,
        max_iters: usize,
    },
    Nes {
        epsilon: f64,
        #[serde(default)]
        alpha: f64,
        steps: usize,
        #[serde(default = "default_nes_m")]
        m: usize,
        #[serde(default = "default_nes_sigma")]
        sigma: f64,
        #[serde(default = "default_nes_kappa")]
        kappa: f64,
    },
    Pso {
        epsilon: f64,
        #[serde(default = "default_pso_epochs")]
        epoch_max: usize,
        #[serde(default = "default_pso_iters")]
        iter_max: usize,
        #[serde(default = "default_pso_particles")]
        n_particles: usize,
        #[serde(default)]
        kappa: f64,
    },
    Ssa {
        #[serde(default = "default_ssa_factor")]
        max_factor: f64,
        #[serde(default = "default_ssa_iters")]
        max_iters: usize,
        #[serde(default = "default_ssa_window")]
        window: usize,
    },
}

fn default_c_init() -> f64 {
    0.001
}
fn default_bsearch() -> usize {
    9
}
fn default_nes_m() -> usize {
    50
}
fn default_nes_sigma() -> f64 {
    1e-3
}
fn default_nes_kappa() -> f64 {
    0.5
}
fn default_pso_epochs() -> usize {
    300
}
fn default_pso_iters() -> usize {
    30
}
fn default_pso_particles() -> usize {
    25
}
fn default_ssa_factor() -> f64 {
    100.0
}
fn default_ssa_iters() -> usize {
    30
}
fn default_ssa_window() -> usize {
    64
}

impl AttackConfig {
    pub fn label(&self) -> String {
        match self {
            AttackConfig::Fgsm { .. } => "FGSM".into(),
            AttackConfig::Pgd { steps, .. } => format!("PGD-{steps}"),
            AttackConfig::CwInf { steps, .. } => format!("CWinf-{steps}"),
            AttackConfig::CwL2 { kappa, .. } => format!("CW2-{kappa}"),
            AttackConfig::Nes { .. } => "NES".into(),
            AttackConfig::Pso { .. } => "PSO".into(),
            AttackConfig::Ssa { .. } => "SSA".into(),
        }
    }

    /// The L-infinity budget, when this attack has one.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            AttackConfig::Fgsm { epsilon }
            | AttackConfig::Pgd { epsilon, .. }
            | AttackConfig::CwInf { epsilon, .. }
            | AttackConfig::Nes { epsilon, .. }
            | AttackConfig::Pso { epsilon, .. } => Some(*epsilon),
            AttackConfig::CwL2 { .. } | AttackConfig::Ssa { .. } => None,
        }
    }

    /// Does this attack need gradients (as opposed to queries)?
    pub fn is_white_box(&self) -> bool {
        matches!(
            self,
            AttackConfig::Fgsm { .. }
                | AttackConfig::Pgd { .. }
                | AttackConfig::CwInf { .. }
                | AttackConfig::CwL2 { .. }
        )
    }
}

/// Outcome of one attack run. The adversarial waveform has already been
/// stored to the int16 grid and reloaded; `success` reflects that version.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Waveform,
    pub success: bool,
    pub distortion: DistortionReport,
    /// Model evaluations spent by the optimizer.
    pub queries: u64,
    pub final_loss_ce: f64,
    pub final_loss_margin: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `x` into the epsilon ball around `origin` intersected with
/// `[-1, 1]`.
fn project_ball(x: &mut [f64], origin: &[f64], eps: f64) {
    for (xi, oi) in x.iter_mut().zip(origin) {
        *xi = xi.clamp(oi - eps, oi + eps).clamp(-1.0, 1.0);
    }
}

/// PCM round-trip, final evaluation, and bookkeeping shared by the
/// score-based attacks.
pub(crate) fn conclude(
    original: &Waveform,
    adv_samples: Vec<f64>,
    label: usize,
    queries: u64,
    evaluate: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<AttackResult> {
    let mut adv = Waveform { samples: adv_samples, sample_rate: original.sample_rate };
    adv.clip_samples();
    let adv = adv.pcm16_round_trip();
    let logits = evaluate(&adv.samples)?;
    let success = crate::model::argmax(&logits) != label;
    Ok(AttackResult {
        distortion: DistortionReport::between(original, &adv)?,
        adversarial: adv,
        success,
        queries,
        final_loss_ce: crate::model::cross_entropy_loss(&logits, label)?,
        final_loss_margin: crate::model::margin_loss(&logits, label)?,
    })
}

/// One-step gradient-sign ascent on the cross-entropy loss.
pub fn fgsm(model: &dyn WhiteBoxModel, x: &Waveform, label: usize, epsilon: f64) -> Result<AttackResult> {
    if epsilon <= 0.0 {
        return Err(Error::Param("fgsm epsilon must be positive".into()));
    }
    let (_, grad) = model.loss_grad(&x.samples, label, LossKind::CrossEntropy, 0)?;
    let adv: Vec<f64> = x
        .samples
        .iter()
        .zip(&grad)
        .map(|(xi, gi)| (xi + epsilon * sign(*gi)).clamp(-1.0, 1.0))
        .collect();
    conclude(x, adv, label, 1, |samples| model.logits(samples, 1))
}

/// Iterated FGSM with random start, projected to the epsilon ball after
/// every step.
pub fn pgd(
    model: &dyn WhiteBoxModel,
    x: &Waveform,
    label: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<AttackResult> {
    let alpha = if alpha > 0.0 { alpha } else { epsilon / 5.0 };
    if alpha > epsilon {
        return Err(Error::Param(format!("alpha {alpha} exceeds epsilon {epsilon}")));
    }
    let noise = crate::dsp::uniform_ball_noise(x.len(), epsilon, derive_seed(seed, 0));
    let mut cur: Vec<f64> = x.samples.iter().zip(&noise).map(|(a, b)| a + b).collect();
    project_ball(&mut cur, &x.samples, epsilon);
    let mut queries = 0;
    for step in 0..steps {
        let (_, grad) =
            model.loss_grad(&cur, label, LossKind::CrossEntropy, derive_seed(seed, 1 + step as u64))?;
        queries += 1;
        for (ci, gi) in cur.iter_mut().zip(&grad) {
            *ci += alpha * sign(*gi);
        }
        project_ball(&mut cur, &x.samples, epsilon);
    }
    conclude(x, cur, label, queries, |samples| model.logits(samples, derive_seed(seed, 1 << 40)))
}

/// CW loss under the PGD optimizer: descend `max(margin, -kappa)` inside
/// the epsilon ball. Movement stops naturally once the clamp activates.
pub fn cw_inf(
    model: &dyn WhiteBoxModel,
    x: &Waveform,
    label: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    kappa: f64,
    seed: u64,
) -> Result<AttackResult> {
    let alpha = if alpha > 0.0 { alpha } else { epsilon / 5.0 };
    if alpha > epsilon {
        return Err(Error::Param(format!("alpha {alpha} exceeds epsilon {epsilon}")));
    }
    let noise = crate::dsp::uniform_ball_noise(x.len(), epsilon, derive_seed(seed, 0));
    let mut cur: Vec<f64> = x.samples.iter().zip(&noise).map(|(a, b)| a + b).collect();
    project_ball(&mut cur, &x.samples, epsilon);
    let mut queries = 0;
    for step in 0..steps {
        let (margin, grad) =
            model.loss_grad(&cur, label, LossKind::Margin, derive_seed(seed, 1 + step as u64))?;
        queries += 1;
        if margin <= -kappa {
            break;
        }
        for (ci, gi) in cur.iter_mut().zip(&grad) {
            *ci -= alpha * sign(*gi);
        }
        project_ball(&mut cur, &x.samples, epsilon);
    }
    conclude(x, cur, label, queries, |samples| model.logits(samples, derive_seed(seed, 1 << 40)))
}

/// CW-L2: minimize `||delta||^2 + c * max(margin + kappa, 0)` over a
/// tanh-reparameterized variable, with an outer search on the trade-off
/// constant: doubled while no success, geometric-mean bisected afterwards.
/// Returns the lowest-distortion success, or the best failing attempt.
#[allow(clippy::too_many_arguments)]
pub fn cw_l2(
    model: &dyn WhiteBoxModel,
    x: &Waveform,
    label: usize,
    kappa: f64,
    c_init: f64,
    binary_search_steps: usize,
    max_iters: usize,
    seed: u64,
) -> Result<AttackResult> {
    if c_init <= 0.0 {
        return Err(Error::Param("cw_l2 c_init must be positive".into()));
    }
    const LR: f64 = 5e-3;
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let n = x.len();
    let to_w = |v: f64| {
        let c = v.clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        // atanh
        0.5 * ((1.0 + c) / (1.0 - c)).ln()
    };
    let w0: Vec<f64> = x.samples.iter().map(|&v| to_w(v)).collect();

    let mut c = c_init;
    let mut lower = 0.0f64;
    let mut upper = f64::INFINITY;
    let mut queries = 0u64;
    let mut best_success: Option<(f64, Vec<f64>)> = None; // (l2, samples)
    let mut best_fail: Option<(f64, Vec<f64>)> = None; // (margin, samples)

    for round in 0..binary_search_steps {
        let mut w = w0.clone();
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let mut round_success = false;

        for iter in 0..max_iters {
            let adv: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
            let (margin, gm) = model.loss_grad(
                &adv,
                label,
                LossKind::Margin,
                derive_seed(seed, ((round as u64) << 32) | iter as u64),
            )?;
            queries += 1;

            let l2sq: f64 = adv
                .iter()
                .zip(&x.samples)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if margin <= -kappa {
                round_success = true;
                let l2 = l2sq.sqrt();
                if best_success.as_ref().is_none_or(|(b, _)| l2 < *b) {
                    best_success = Some((l2, adv.clone()));
                }
            } else if best_fail.as_ref().is_none_or(|(m, _)| margin < *m) {
                best_fail = Some((margin, adv.clone()));
            }

            let hinge_active = margin + kappa > 0.0;
            let t = (iter + 1) as i32;
            for i in 0..n {
                let gx = 2.0 * (adv[i] - x.samples[i])
                    + if hinge_active { c * gm[i] } else { 0.0 };
                let gw = gx * (1.0 - adv[i] * adv[i]);
                m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * gw;
                m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * gw * gw;
                let mhat = m1[i] / (1.0 - BETA1.powi(t));
                let vhat = m2[i] / (1.0 - BETA2.powi(t));
                w[i] -= LR * mhat / (vhat.sqrt() + EPS);
            }
        }

        if round_success {
            upper = c;
            c = if lower > 0.0 { (lower * upper).sqrt() } else { upper / 10.0 };
        } else {
            lower = c;
            c = if upper.is_finite() { (lower * upper).sqrt() } else { c * 2.0 };
        }
    }

    let final_samples = match (&best_success, &best_fail) {
        (Some((_, s)), _) => s.clone(),
        (None, Some((_, s))) => s.clone(),
        (None, None) => x.samples.clone(),
    };
    conclude(x, final_samples, label, queries, |samples| {
        model.logits(samples, derive_seed(seed, 1 << 41))
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Toy white-box model: loss = w . x + b, so the gradient is constant.
    /// Logits are [-(loss), 0], making "misclassified" mean loss > 0.
    pub struct ToyLinear {
        pub w: Vec<f64>,
        pub b: f64,
    }

    impl WhiteBoxModel for ToyLinear {
        fn n_classes(&self) -> usize {
            2
        }
        fn sample_rate(&self) -> u32 {
            crate::audio::CANONICAL_SAMPLE_RATE
        }
        fn logits(&self, x: &[f64], _seed: u64) -> Result<Vec<f64>> {
            let loss = self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b;
            Ok(vec![-loss, 0.0])
        }
        fn loss_grad(
            &self,
            x: &[f64],
            _label: usize,
            _kind: LossKind,
            _seed: u64,
        ) -> Result<(f64, Vec<f64>)> {
            let loss = self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b;
            Ok((loss, self.w.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::ToyLinear;
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn wf(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, CANONICAL_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn fgsm_signed_step() {
        // L(x) = 2x at x = 0 with eps = 0.1 jumps to exactly 0.1.
        let model = ToyLinear { w: vec![2.0], b: 0.0 };
        let r = fgsm(&model, &wf(vec![0.0]), 0, 0.1).unwrap();
        assert!((r.adversarial.samples[0] - 0.1).abs() <= 1.0 / 32768.0);

        // Zero gradient leaves the input alone.
        let flat = ToyLinear { w: vec![0.0, 0.0], b: 0.0 };
        let x = wf(vec![0.25, -0.5]);
        let r = fgsm(&flat, &x, 0, 0.1).unwrap();
        assert_eq!(r.adversarial.samples, x.pcm16_round_trip().samples);

        // Every coordinate with nonzero gradient moves by exactly eps.
        let mixed = ToyLinear { w: vec![1.0, -3.0, 0.0], b: 0.0 };
        let x = wf(vec![0.1, 0.2, 0.3]);
        let r = fgsm(&mixed, &x, 0, 0.05).unwrap();
        let delta: Vec<f64> = r
            .adversarial
            .samples
            .iter()
            .zip(&x.samples)
            .map(|(a, b)| a - b)
            .collect();
        assert!((delta[0] - 0.05).abs() <= 1.0 / 32768.0);
        assert!((delta[1] + 0.05).abs() <= 1.0 / 32768.0);
        assert!(delta[2].abs() <= 1.0 / 32768.0);
    }

    /// A model wrapper asserting every gradient query stays in the ball.
    struct BallChecked {
        inner: ToyLinear,
        origin: Vec<f64>,
        eps: f64,
    }

    impl WhiteBoxModel for BallChecked {
        fn n_classes(&self) -> usize {
            2
        }
        fn sample_rate(&self) -> u32 {
            CANONICAL_SAMPLE_RATE
        }
        fn logits(&self, x: &[f64], seed: u64) -> Result<Vec<f64>> {
            self.inner.logits(x, seed)
        }
        fn loss_grad(
            &self,
            x: &[f64],
            label: usize,
            kind: LossKind,
            seed: u64,
        ) -> Result<(f64, Vec<f64>)> {
            for (xi, oi) in x.iter().zip(&self.origin) {
                assert!((xi - oi).abs() <= self.eps + 1e-12, "iterate escaped the ball");
            }
            self.inner.loss_grad(x, label, kind, seed)
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_reaches_linear_corner() {
        let origin = vec![0.0, 0.1, -0.2, 0.05];
        let model = BallChecked {
            inner: ToyLinear { w: vec![1.0, -2.0, 0.5, -0.25], b: 0.0 },
            origin: origin.clone(),
            eps: 0.01,
        };
        let x = wf(origin.clone());
        let r = pgd(&model, &x, 0, 0.01, 0.002, 20, 7).unwrap();
        // steps * alpha = 0.04 >= eps, so the corner is reached.
        for ((a, o), w) in r.adversarial.samples.iter().zip(&origin).zip(&model.inner.w) {
            let expect = o + 0.01 * w.signum();
            assert!((a - expect).abs() <= 1.0 / 32768.0 + 1e-9, "{a} vs {expect}");
        }
        assert!(r.distortion.linf <= 0.01 + 1.0 / 32768.0);
        assert_eq!(r.queries, 20);
    }

    #[test]
    fn pgd_rejects_alpha_above_epsilon() {
        let model = ToyLinear { w: vec![1.0], b: 0.0 };
        assert!(pgd(&model, &wf(vec![0.0]), 0, 0.01, 0.02, 5, 0).is_err());
    }

    /// Margin fixed at -5: already misclassified with room to spare.
    struct AlwaysBeaten;
    impl WhiteBoxModel for AlwaysBeaten {
        fn n_classes(&self) -> usize {
            2
        }
        fn sample_rate(&self) -> u32 {
            CANONICAL_SAMPLE_RATE
        }
        fn logits(&self, _x: &[f64], _seed: u64) -> Result<Vec<f64>> {
            Ok(vec![-5.0, 0.0])
        }
        fn loss_grad(
            &self,
            x: &[f64],
            _label: usize,
            _kind: LossKind,
            _seed: u64,
        ) -> Result<(f64, Vec<f64>)> {
            Ok((-5.0, vec![0.0; x.len()]))
        }
    }

    #[test]
    fn cw_inf_plateaus_when_margin_satisfied() {
        let x = wf(vec![0.1, -0.3, 0.2]);
        let r = cw_inf(&AlwaysBeaten, &x, 0, 0.002, 0.0004, 50, 0.0, 3).unwrap();
        assert!(r.success);
        // The clamp was active from the start: one probe, no movement
        // beyond the random start.
        assert_eq!(r.queries, 1);
        assert!(r.distortion.linf <= 0.002 + 1.0 / 32768.0);
    }

    #[test]
    fn cw_l2_trivial_success_keeps_delta_tiny() {
        let x = wf(vec![0.1, -0.2, 0.05, 0.3]);
        let r = cw_l2(&AlwaysBeaten, &x, 0, 0.0, 0.001, 3, 40, 5).unwrap();
        assert!(r.success);
        assert!(r.distortion.l2 <= 1e-3, "l2 {}", r.distortion.l2);
    }

    #[test]
    fn attack_config_toml_round_trip() {
        let cfgs = vec![
            AttackConfig::Fgsm { epsilon: 0.002 },
            AttackConfig::Pgd { epsilon: 0.002, alpha: 0.0004, steps: 10 },
            AttackConfig::CwL2 {
                kappa: 2.0,
                c_init: 0.001,
                binary_search_steps: 9,
                max_iters: 900,
            },
            AttackConfig::Nes {
                epsilon: 0.002,
                alpha: 0.0004,
                steps: 200,
                m: 50,
                sigma: 1e-3,
                kappa: 0.5,
            },
        ];
        for cfg in cfgs {
            let s = toml::to_string(&cfg).unwrap();
            let back: AttackConfig = toml::from_str(&s).unwrap();
            assert_eq!(cfg, back);
        }
    }
}
