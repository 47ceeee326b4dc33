//! Decision-only attack via singular spectrum analysis.
//!
//! The voice is decomposed with SSA: eigendecompose the Gram matrix of the
//! Hankel trajectory matrix, giving per-component rank-one series. The
//! attack reconstructs from the leading components only, keeping the
//! smallest retained-energy fraction `>= 1 - factor/max_factor`, and binary
//! searches the attack factor for the smallest value that flips the model's
//! decision.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::attacks::{AttackResult, DecisionQuery};
use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SsaParams {
    pub max_factor: f64,
    pub max_iters: usize,
    pub window: usize,
}

impl Default for SsaParams {
    fn default() -> Self {
        Self { max_factor: 100.0, max_iters: 30, window: 64 }
    }
}

/// SSA decomposition of a series: per-component reconstructions (diagonal
/// averaging of the rank-one pieces) ordered by decreasing eigenvalue, plus
/// the eigenvalues themselves.
pub struct SsaDecomposition {
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    len: usize,
}

impl SsaDecomposition {
    pub fn new(x: &[f64], window: usize) -> Result<Self> {
        let n = x.len();
        if window < 2 || window > n / 2 {
            return Err(Error::Param(format!(
                "ssa window must be in 2..={}, got {window}",
                n / 2
            )));
        }
        let l = window;
        let k = n - l + 1;

        // Gram matrix of the Hankel trajectory matrix X[i][j] = x[i+j].
        let mut gram = DMatrix::zeros(l, l);
        for a in 0..l {
            for b in a..l {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += x[a + j] * x[b + j];
                }
                gram[(a, b)] = acc;
                gram[(b, a)] = acc;
            }
        }
        let eig = SymmetricEigen::new(gram);

        // Sort components by decreasing eigenvalue.
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

        let mut weights = vec![0.0f64; n];
        for i in 0..l {
            for j in 0..k {
                weights[i + j] += 1.0;
            }
        }

        let mut components = Vec::with_capacity(l);
        let mut eigenvalues = Vec::with_capacity(l);
        for &c in &order {
            let lambda: f64 = eig.eigenvalues[c].max(0.0);
            eigenvalues.push(lambda);
            if lambda <= 0.0 {
                components.push(vec![0.0; n]);
                continue;
            }
            let sigma = lambda.sqrt();
            let u = eig.eigenvectors.column(c);
            // v = X^T u / sigma, scaled back by sigma: sv[j] = (X^T u)[j].
            let mut sv = vec![0.0; k];
            for (j, svj) in sv.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..l {
                    acc += x[i + j] * u[i];
                }
                *svj = acc;
            }
            let _ = sigma;
            // Diagonal averaging of sigma * u * v^T == u * sv^T.
            let mut comp = vec![0.0; n];
            for i in 0..l {
                let ui = u[i];
                if ui == 0.0 {
                    continue;
                }
                for (j, svj) in sv.iter().enumerate() {
                    comp[i + j] += ui * svj;
                }
            }
            for (ci, wi) in comp.iter_mut().zip(&weights) {
                *ci /= wi;
            }
            components.push(comp);
        }
        Ok(Self { components, eigenvalues, len: n })
    }

    /// Reconstruct keeping the smallest set of leading components whose
    /// retained energy fraction reaches `fraction`.
    pub fn reconstruct_fraction(&self, fraction: f64) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        let mut out = vec![0.0; self.len];
        if total <= 0.0 {
            return out;
        }
        let mut kept = 0.0;
        for (comp, lambda) in self.components.iter().zip(&self.eigenvalues) {
            if kept / total >= fraction {
                break;
            }
            for (o, c) in out.iter_mut().zip(comp) {
                *o += c;
            }
            kept += lambda;
        }
        out
    }
}

/// Reconstruct a waveform keeping the energy fraction implied by an attack
/// factor: `fraction = 1 - factor / max_factor`.
pub fn ssa_reconstruct(x: &Waveform, factor: f64, params: &SsaParams) -> Result<Waveform> {
    let decomp = SsaDecomposition::new(&x.samples, params.window)?;
    let fraction = 1.0 - factor / params.max_factor;
    Ok(Waveform {
        samples: decomp.reconstruct_fraction(fraction),
        sample_rate: x.sample_rate,
    })
}

/// Kenansville-style decision-only attack: binary search for the smallest
/// attack factor whose SSA reconstruction flips the decision away from
/// `label`, spending at most `max_iters` decision probes.
pub fn ssa_attack(
    decision: &mut DecisionQuery,
    x: &Waveform,
    label: usize,
    params: &SsaParams,
    _seed: u64,
) -> Result<AttackResult> {
    let decomp = SsaDecomposition::new(&x.samples, params.window)?;
    let rebuild = |factor: f64| -> Waveform {
        let fraction = 1.0 - factor / params.max_factor;
        Waveform {
            samples: decomp.reconstruct_fraction(fraction),
            sample_rate: x.sample_rate,
        }
    };

    let mut probes = 0usize;
    // Already misclassified: nothing to do.
    if decision.decide(&x.samples)? != label {
        probes += 1;
        let _ = probes;
        let queries = decision.count();
        let wave = x.pcm16_round_trip();
        let success = decision.decide(&wave.samples)? != label;
        return Ok(AttackResult {
            distortion: crate::audio::DistortionReport::between(x, &wave)?,
            adversarial: wave,
            success,
            queries,
            final_loss_ce: f64::NAN,
            final_loss_margin: f64::NAN,
        });
    }
    probes += 1;

    // Establish an upper bound: does the strongest distortion flip at all?
    let mut hi = params.max_factor;
    let strongest = rebuild(hi);
    let flipped_at_hi = decision.decide(&strongest.samples)? != label;
    probes += 1;
    let mut best: Option<Waveform> = flipped_at_hi.then_some(strongest);

    if flipped_at_hi {
        let mut lo = 0.0f64;
        while probes < params.max_iters {
            let mid = 0.5 * (lo + hi);
            let candidate = rebuild(mid);
            probes += 1;
            if decision.decide(&candidate.samples)? != label {
                hi = mid;
                best = Some(candidate);
            } else {
                lo = mid;
            }
        }
    }

    let queries = decision.count();
    let adv = best.unwrap_or_else(|| rebuild(params.max_factor));
    let mut adv = adv;
    adv.clip_samples();
    let adv = adv.pcm16_round_trip();
    let success = decision.decide(&adv.samples)? != label;
    Ok(AttackResult {
        distortion: crate::audio::DistortionReport::between(x, &adv)?,
        adversarial: adv,
        success,
        queries,
        final_loss_ce: f64::NAN,
        final_loss_margin: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn tone(freq: f64, len: usize) -> Waveform {
        let fs = f64::from(CANONICAL_SAMPLE_RATE);
        Waveform::new(
            (0..len)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
                .collect(),
            CANONICAL_SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn factor_zero_is_identity() {
        let w = tone(440.0, 2000);
        let out = ssa_reconstruct(&w, 0.0, &SsaParams::default()).unwrap();
        for (a, b) in w.samples.iter().zip(&out.samples) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sinusoid_has_rank_two_trajectory() {
        let w = tone(500.0, 1500);
        let d = SsaDecomposition::new(&w.samples, 64).unwrap();
        let total: f64 = d.eigenvalues.iter().sum();
        let two: f64 = d.eigenvalues[..2].iter().sum();
        assert!(two / total >= 1.0 - 1e-9, "rank-2 share {}", two / total);

        // Keeping 2 components reconstructs within 1e-6 relative error.
        let mut rec = vec![0.0; w.len()];
        for comp in &d.components[..2] {
            for (r, c) in rec.iter_mut().zip(comp) {
                *r += c;
            }
        }
        let num: f64 = rec.iter().zip(&w.samples).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = w.samples.iter().map(|v| v * v).sum();
        assert!((num / den).sqrt() <= 1e-6, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn constant_signal_is_rank_one() {
        let w = Waveform::new(vec![0.3; 800], CANONICAL_SAMPLE_RATE).unwrap();
        let d = SsaDecomposition::new(&w.samples, 64).unwrap();
        assert!(d.eigenvalues[0] > 0.0);
        assert!(d.eigenvalues[1] / d.eigenvalues[0] <= 1e-9);
    }

    #[test]
    fn attack_flips_energy_threshold_decision() {
        // Decision flips when high-rank detail is stripped: classify by
        // whether the residual energy beyond a smooth core exceeds a
        // threshold. A two-tone signal loses its weak tone under strong SSA.
        let fs = f64::from(CANONICAL_SAMPLE_RATE);
        let samples: Vec<f64> = (0..2000)
            .map(|i| {
                let t = i as f64 / fs;
                0.5 * (2.0 * std::f64::consts::PI * 200.0 * t).sin()
                    + 0.05 * (2.0 * std::f64::consts::PI * 3100.0 * t).sin()
            })
            .collect();
        let x = Waveform::new(samples, CANONICAL_SAMPLE_RATE).unwrap();
        // Label 0 = "has high-frequency detail".
        let mut q = DecisionQuery::new(|s: &[f64]| {
            let hf: f64 = s
                .windows(2)
                .map(|w| {
                    let d = w[1] - w[0];
                    d * d
                })
                .sum();
            Ok(usize::from(hf < 18.0))
        });
        let params = SsaParams { max_iters: 12, ..Default::default() };
        let r = ssa_attack(&mut q, &x, 0, &params, 0).unwrap();
        assert!(r.success, "ssa attack failed to flip the decision");
        assert!(r.queries as usize <= 12 + 1);
    }
}
