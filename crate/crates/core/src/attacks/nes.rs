//! Score-based black-box attack: NES gradient estimation driving signed
//! updates in the epsilon ball, with early stopping on the margin.

use rand_distr::{Distribution, StandardNormal};

use crate::attacks::{AttackResult, ScoreQuery};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::model::margin_loss;
use crate::rng::{derive_seed, rng_from_seed};

/// Antithetic NES estimate of the margin-loss gradient:
/// `g = 1/(sigma*m) * sum_i [L(x + sigma*u_i) - L(x - sigma*u_i)] * u_i`
/// over `m/2` Gaussian directions.
fn nes_gradient(
    query: &mut ScoreQuery,
    x: &[f64],
    label: usize,
    m: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut grad = vec![0.0; x.len()];
    let mut probe = vec![0.0; x.len()];
    for _ in 0..m / 2 {
        let u: Vec<f64> = (0..x.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for i in 0..x.len() {
            probe[i] = x[i] + sigma * u[i];
        }
        let plus = margin_loss(&query.scores(&probe)?, label)?;
        for i in 0..x.len() {
            probe[i] = x[i] - sigma * u[i];
        }
        let minus = margin_loss(&query.scores(&probe)?, label)?;
        let w = (plus - minus) / (sigma * m as f64);
        for (g, ui) in grad.iter_mut().zip(&u) {
            *g += w * ui;
        }
    }
    Ok(grad)
}

/// NES gradient estimator exposed for calibration tests.
pub fn nes_gradient_estimate(
    query: &mut ScoreQuery,
    x: &[f64],
    label: usize,
    m: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::Param(format!("nes m must be even and >= 2, got {m}")));
    }
    nes_gradient(query, x, label, m, sigma, seed)
}

/// Score-based attack: descend the margin by NES-estimated gradients with
/// signed steps in the epsilon ball. Stops once the margin reaches
/// `-kappa`. Query accounting: 1 initial check, then `m` estimation queries
/// plus 1 margin check per executed step.
#[allow(clippy::too_many_arguments)]
pub fn nes_attack(
    query: &mut ScoreQuery,
    x: &Waveform,
    label: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    m: usize,
    sigma: f64,
    kappa: f64,
    seed: u64,
) -> Result<AttackResult> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::Param(format!("nes m must be even and >= 2, got {m}")));
    }
    if epsilon <= 0.0 {
        return Err(Error::Param("nes epsilon must be positive".into()));
    }
    let alpha = if alpha > 0.0 { alpha } else { epsilon / 5.0 };

    let mut cur = x.samples.clone();
    let mut margin = margin_loss(&query.scores(&cur)?, label)?;
    for step in 0..steps {
        if margin <= -kappa {
            break;
        }
        let grad = nes_gradient(query, &cur, label, m, sigma, derive_seed(seed, step as u64))?;
        for (ci, gi) in cur.iter_mut().zip(&grad) {
            let moved = *ci - alpha * if *gi > 0.0 { 1.0 } else if *gi < 0.0 { -1.0 } else { 0.0 };
            *ci = moved;
        }
        for (ci, xi) in cur.iter_mut().zip(&x.samples) {
            *ci = ci.clamp(xi - epsilon, xi + epsilon).clamp(-1.0, 1.0);
        }
        margin = margin_loss(&query.scores(&cur)?, label)?;
    }

    // Snapshot the optimizer's query count; the final verdict evaluation is
    // bookkeeping, not part of the attack budget.
    let queries = query.count();
    let mut wave = Waveform { samples: cur, sample_rate: x.sample_rate };
    wave.clip_samples();
    let wave = wave.pcm16_round_trip();
    let scores = query.scores(&wave.samples)?;
    Ok(AttackResult {
        distortion: crate::audio::DistortionReport::between(x, &wave)?,
        success: crate::model::argmax(&scores) != label,
        adversarial: wave,
        queries,
        final_loss_ce: crate::model::cross_entropy_loss(&scores, label)?,
        final_loss_margin: margin_loss(&scores, label)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn linear_query<'a>(w: &'a [f64]) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a {
        // margin(label 0) = scores[0] - scores[1] = w . x
        move |x: &[f64]| {
            let v: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            Ok(vec![v, 0.0])
        }
    }

    #[test]
    fn estimator_aligns_with_linear_gradient() {
        let dim = 16;
        let w: Vec<f64> = (0..dim).map(|i| ((i as f64) * 0.7).sin() + 0.2).collect();
        let x = vec![0.0; dim];
        let mut mean_cos = 0.0;
        for seed in 0..10u64 {
            let mut q = ScoreQuery::new(linear_query(&w));
            let g = nes_gradient_estimate(&mut q, &x, 0, 100, 1e-3, seed).unwrap();
            let dot: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            mean_cos += dot / (ng * nw);
        }
        mean_cos /= 10.0;
        assert!(mean_cos >= 0.8, "mean cosine {mean_cos}");
    }

    #[test]
    fn query_accounting_is_exact() {
        let w = vec![1.0, 1.0, 1.0, 1.0];
        let x = Waveform::new(vec![0.4; 4], CANONICAL_SAMPLE_RATE).unwrap();
        let mut q = ScoreQuery::new(linear_query(&w));
        let steps = 3;
        let m = 10;
        // Margin stays positive (w.x > 0 in the ball), so all steps run.
        let r = nes_attack(&mut q, &x, 0, 0.001, 0.0005, steps, m, 1e-3, 0.0, 1).unwrap();
        // 1 initial check + steps * (m estimation + 1 check); the final
        // post-PCM evaluation is bookkeeping, not an optimizer query.
        assert_eq!(r.queries, 1 + (steps as u64) * (m as u64 + 1));
    }

    #[test]
    fn early_stop_on_initially_misclassified_input() {
        // margin = -1 regardless of input.
        let mut q = ScoreQuery::new(|_x: &[f64]| Ok(vec![-1.0, 0.0]));
        let x = Waveform::new(vec![0.1; 8], CANONICAL_SAMPLE_RATE)
            .unwrap()
            .pcm16_round_trip();
        let r = nes_attack(&mut q, &x, 0, 0.002, 0.0, 50, 10, 1e-3, 0.0, 1).unwrap();
        assert!(r.success);
        assert_eq!(r.queries, 1, "no attack iterations should have run");
        assert_eq!(r.distortion.l2, 0.0);
    }

    #[test]
    fn rejects_odd_m() {
        let mut q = ScoreQuery::new(|_x: &[f64]| Ok(vec![0.0, 0.0]));
        let x = Waveform::new(vec![0.0; 4], CANONICAL_SAMPLE_RATE).unwrap();
        assert!(nes_attack(&mut q, &x, 0, 0.002, 0.0, 5, 7, 1e-3, 0.0, 1).is_err());
    }

    #[test]
    fn budget_contained_after_pcm() {
        let w = vec![2.0, -1.0, 0.5, 1.5, -2.0, 1.0];
        let x = Waveform::new(vec![0.2; 6], CANONICAL_SAMPLE_RATE).unwrap();
        let mut q = ScoreQuery::new(linear_query(&w));
        let r = nes_attack(&mut q, &x, 0, 0.002, 0.0004, 30, 8, 1e-3, 0.5, 9).unwrap();
        assert!(r.distortion.linf <= 0.002 + 1.0 / 32768.0);
    }
}
