//! Adaptive-attack machinery: a defended view of the model that white-box
//! attacks can differentiate through (BPDA for non-differentiable layers,
//! EOT averaging for randomized ones), query wrappers that route black-box
//! attacks through the deployed transformations, and the Replicate attacks
//! that invert feature compression.

use crate::attacks::{AttackConfig, AttackResult, ScoreQuery, WhiteBoxModel};
use crate::audio::Waveform;
use crate::dsp::Transform;
use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::grad::Graph;
use crate::model::{
    lower_waveform_transforms, FecoLayer, LossKind, SpeakerModel, FECO_STREAM,
};
use crate::rng::derive_seed;

/// How gradients traverse one transform in a defended chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientPolicy {
    /// The transform's own (sub)gradient.
    Exact,
    /// Exact forward, identity Jacobian backward.
    BpdaIdentity,
    /// FeCo with cluster assignments frozen per draw.
    FrozenAssignment,
}

/// The policy each transform kind carries; non-differentiable transforms
/// must go through BPDA, feature compression through frozen assignments.
pub fn policy_of(t: &Transform) -> GradientPolicy {
    match t {
        Transform::FeCo { .. } => GradientPolicy::FrozenAssignment,
        _ if !t.differentiable() => GradientPolicy::BpdaIdentity,
        _ => GradientPolicy::Exact,
    }
}

/// A model plus its deployed transformation chain, as seen by an adaptive
/// adversary. `eot_r` controls how many draws average each loss/gradient
/// evaluation when the chain is randomized.
pub struct DefendedModel<'a> {
    pub model: &'a SpeakerModel,
    pub chain: Vec<Transform>,
    pub eot_r: usize,
}

impl<'a> DefendedModel<'a> {
    pub fn new(model: &'a SpeakerModel, chain: Vec<Transform>, eot_r: usize) -> Result<Self> {
        for t in &chain {
            t.validate()?;
        }
        if eot_r == 0 {
            return Err(Error::Param("eot_r must be at least 1".into()));
        }
        if chain.iter().filter(|t| matches!(t, Transform::FeCo { .. })).count() > 1 {
            return Err(Error::Config("at most one FeCo layer per chain".into()));
        }
        Ok(Self { model, chain, eot_r })
    }

    pub fn randomized(&self) -> bool {
        self.chain.iter().any(|t| t.randomized())
    }

    /// Apply the waveform-level part of the chain exactly as the defense
    /// would (no graph, no gradients). FeCo layers are skipped: they act on
    /// features, not waveforms.
    pub fn apply_chain_waveform(&self, w: &Waveform, seed: u64) -> Result<Waveform> {
        let mut cur = w.clone();
        for (i, t) in self.chain.iter().enumerate() {
            if t.is_waveform_level() {
                cur = t.apply_waveform(&cur, derive_seed(seed, i as u64))?;
            }
        }
        Ok(cur)
    }

    fn forward_once(&self, x: &[f64], seed: u64) -> Result<Vec<f64>> {
        let g = Graph::new();
        let xt = g.constant(x.to_vec(), &[x.len()]);
        let (xt, feco) = lower_waveform_transforms(&g, &xt, self.chain.iter(), seed)?;
        let bound = self.model.bind_constants(&g);
        let logits = self.model.logits_graph(
            &g,
            &xt,
            feco.as_ref(),
            derive_seed(seed, FECO_STREAM),
            &bound,
        )?;
        Ok(logits.value())
    }

    fn loss_grad_once(
        &self,
        x: &[f64],
        label: usize,
        kind: LossKind,
        seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        let g = Graph::new();
        let xt = g.leaf(x.to_vec(), &[x.len()]);
        let (lowered, feco) = lower_waveform_transforms(&g, &xt, self.chain.iter(), seed)?;
        let bound = self.model.bind_constants(&g);
        let logits = self.model.logits_graph(
            &g,
            &lowered,
            feco.as_ref(),
            derive_seed(seed, FECO_STREAM),
            &bound,
        )?;
        let loss = crate::model::loss_tensor(&logits, label, kind)?;
        g.backward(&loss)?;
        Ok((loss.item(), xt.grad().expect("waveform gradient")))
    }

    /// The deployed decision for one voice (single seeded draw).
    pub fn classify(&self, w: &Waveform, seed: u64) -> Result<usize> {
        Ok(crate::model::argmax(&self.forward_once(&w.samples, seed)?))
    }

    /// Counted score oracle through the deployed chain. Each query takes a
    /// fresh randomness draw, so repeated identical queries may differ.
    pub fn score_query(&self, seed: u64) -> ScoreQuery<'_> {
        let mut counter = 0u64;
        ScoreQuery::new(move |x: &[f64]| {
            counter += 1;
            self.forward_once(x, derive_seed(seed, counter))
        })
    }

    /// Counted decision oracle through the deployed chain.
    pub fn decision_query(&self, seed: u64) -> crate::attacks::DecisionQuery<'_> {
        let mut counter = 0u64;
        crate::attacks::DecisionQuery::new(move |x: &[f64]| {
            counter += 1;
            Ok(crate::model::argmax(&self.forward_once(x, derive_seed(seed, counter))?))
        })
    }
}

impl WhiteBoxModel for DefendedModel<'_> {
    fn n_classes(&self) -> usize {
        self.model.n_speakers
    }

    fn sample_rate(&self) -> u32 {
        crate::audio::CANONICAL_SAMPLE_RATE
    }

    fn logits(&self, x: &[f64], seed: u64) -> Result<Vec<f64>> {
        self.forward_once(x, seed)
    }

    /// EOT loss: the mean of `eot_r` independent transform draws (one draw
    /// when the chain is deterministic). Gradients average the per-draw
    /// gradients in a fixed sub-seed order, so results are bit-reproducible.
    fn loss_grad(
        &self,
        x: &[f64],
        label: usize,
        kind: LossKind,
        seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        let draws = if self.randomized() { self.eot_r } else { 1 };
        let mut loss = 0.0;
        let mut grad = vec![0.0; x.len()];
        for r in 0..draws {
            let (l, g) = self.loss_grad_once(x, label, kind, derive_seed(seed, r as u64))?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / draws as f64;
        for v in &mut grad {
            *v *= inv;
        }
        Ok((loss * inv, grad))
    }
}

/// Standalone EOT loss evaluation: mean loss and mean gradient over `r`
/// draws of the chain's randomness.
pub fn eot_loss(
    model: &SpeakerModel,
    chain: &[Transform],
    x: &Waveform,
    label: usize,
    kind: LossKind,
    r: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let view = DefendedModel::new(model, chain.to_vec(), r)?;
    view.loss_grad(&x.samples, label, kind, seed)
}

/// Which interface the replicated features re-enter the system through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicateMode {
    /// Feed the feature matrix directly (assumes a feature-level API).
    Feature,
    /// Rebuild a waveform with Griffin-Lim and submit that.
    Waveform,
}

/// Outcome of a Replicate attack. Benign and adversarial audio do not align
/// sample-for-sample (replication stretches time), so no distortion report.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    /// Did the defended model misclassify the replicated input?
    pub success: bool,
    /// The white-box attack result against the FeCo-free model (stage 1).
    pub stage1: AttackResult,
    /// The submitted waveform (Waveform mode only).
    pub adversarial: Option<Waveform>,
    /// Rows of the replicated feature matrix.
    pub replicated_rows: usize,
    /// Diagnostic: fraction of rows FeCo(M') reproduces in their original
    /// positions (the multiset property is checked in tests instead).
    pub order_match_rate: f64,
    /// Queries spent by the stage-1 attack.
    pub queries: u64,
}

/// Replicate attack against a FeCo-defended model: craft an adversarial
/// voice against the chain without FeCo, inflate its feature matrix so
/// compression maps it back onto itself, and re-enter through the feature
/// or waveform interface.
pub fn replicate_attack(
    defended: &DefendedModel,
    x: &Waveform,
    label: usize,
    attack: &AttackConfig,
    mode: ReplicateMode,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let feco = defended
        .chain
        .iter()
        .find_map(FecoLayer::from_transform)
        .ok_or_else(|| Error::Contract("replicate attack needs a FeCo layer in the chain".into()))?;
    if feco.stage != crate::dsp::FeatureStage::Original {
        return Err(Error::Config(
            "replicate attack targets the original-stage FeCo deployment".into(),
        ));
    }

    // Stage 1: attack the same chain minus FeCo.
    let bare_chain: Vec<Transform> = defended
        .chain
        .iter()
        .filter(|t| !matches!(t, Transform::FeCo { .. }))
        .cloned()
        .collect();
    let bare = DefendedModel::new(defended.model, bare_chain, defended.eot_r)?;
    let stage1 = run_white_box(&bare, x, label, attack, derive_seed(seed, 1))?;

    // Stage 2: feature matrix of the adversarial voice at FeCo's stage,
    // after the waveform-level part of the chain.
    let transformed = bare.apply_chain_waveform(&stage1.adversarial, derive_seed(seed, 2))?;
    let m = extract_features(&transformed, feco.stage, &defended.model.feat_cfg)?;

    // Stage 3: replicate.
    let replication =
        crate::feco::replicate_features_detailed(&m, feco.cl_r, feco.cl_m, derive_seed(seed, 3))?;
    let m_rep = replication.matrix;

    // Diagnostic: how often does compression restore the original order?
    let check = crate::feco::feco_compress(&m_rep, feco.cl_r, feco.cl_m, derive_seed(seed, 4))?;
    let mut in_place = 0usize;
    if check.rows == m.rows {
        for i in 0..m.rows {
            if check
                .row(i)
                .iter()
                .zip(m.row(i))
                .all(|(a, b)| (a - b).abs() <= 1e-6)
            {
                in_place += 1;
            }
        }
    }
    let order_match_rate = in_place as f64 / m.rows as f64;

    // Stage 4: re-enter through the chosen interface and let the defended
    // model (fresh FeCo draw) judge.
    let eval_seed = derive_seed(seed, 5);
    let (success, adversarial) = match mode {
        ReplicateMode::Feature => {
            let logits = defended.model.logits_from_features(&m_rep, Some(&feco), eval_seed)?;
            (crate::model::argmax(&logits) != label, None)
        }
        ReplicateMode::Waveform => {
            let rebuilt = crate::feco::griffin_lim_reconstruct(
                &m_rep,
                32,
                derive_seed(seed, 6),
                &defended.model.feat_cfg,
            )?;
            let mut rebuilt = rebuilt;
            rebuilt.clip_samples();
            let rebuilt = rebuilt.pcm16_round_trip();
            let decided = defended.classify(&rebuilt, eval_seed)?;
            (decided != label, Some(rebuilt))
        }
    };

    Ok(ReplicateOutcome {
        success,
        queries: stage1.queries,
        stage1,
        adversarial,
        replicated_rows: m_rep.rows,
        order_match_rate,
    })
}

/// Dispatch a white-box attack config against a defended view.
pub fn run_white_box(
    view: &DefendedModel,
    x: &Waveform,
    label: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    match *cfg {
        AttackConfig::Fgsm { epsilon } => crate::attacks::fgsm(view, x, label, epsilon),
        AttackConfig::Pgd { epsilon, alpha, steps } => {
            crate::attacks::pgd(view, x, label, epsilon, alpha, steps, seed)
        }
        AttackConfig::CwInf { epsilon, alpha, steps, kappa } => {
            crate::attacks::cw_inf(view, x, label, epsilon, alpha, steps, kappa, seed)
        }
        AttackConfig::CwL2 { kappa, c_init, binary_search_steps, max_iters } => {
            crate::attacks::cw_l2(view, x, label, kappa, c_init, binary_search_steps, max_iters, seed)
        }
        _ => Err(Error::Contract(format!(
            "{} is not a white-box attack",
            cfg.label()
        ))),
    }
}

/// Dispatch a black-box attack config through the defended view's oracles.
pub fn run_black_box(
    view: &DefendedModel,
    x: &Waveform,
    label: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    match *cfg {
        AttackConfig::Nes { epsilon, alpha, steps, m, sigma, kappa } => {
            let mut q = view.score_query(derive_seed(seed, 0xb1ac));
            crate::attacks::nes_attack(&mut q, x, label, epsilon, alpha, steps, m, sigma, kappa, seed)
        }
        AttackConfig::Pso { epsilon, epoch_max, iter_max, n_particles, kappa } => {
            let mut q = view.score_query(derive_seed(seed, 0xb1ac));
            let params = crate::attacks::PsoParams {
                epoch_max,
                iter_max,
                n_particles,
                ..Default::default()
            };
            crate::attacks::pso_attack(&mut q, x, label, epsilon, &params, kappa, seed)
        }
        AttackConfig::Ssa { max_factor, max_iters, window } => {
            let mut q = view.decision_query(derive_seed(seed, 0xb1ac));
            let params = crate::attacks::SsaParams { max_factor, max_iters, window };
            crate::attacks::ssa_attack(&mut q, x, label, &params, seed)
        }
        _ => Err(Error::Contract(format!(
            "{} is not a black-box attack",
            cfg.label()
        ))),
    }
}
