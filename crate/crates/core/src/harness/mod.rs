//! Experiment configuration and the defense-by-attack evaluation matrix.
//!
//! A TOML config names the model checkpoint, the dataset manifest, the
//! defense and attack lists, the adaptive flag, seeds, and the output
//! directory. `run_experiment` evaluates every (defense, attack) cell:
//! benign accuracy of the defended model, adversarial examples crafted
//! either against the undefended model (non-adaptive) or through the
//! defended view (adaptive), each stored to the int16 grid before being
//! judged. Seeds derive deterministically from (global seed, defense name,
//! attack name, voice index), so a rerun reproduces the report byte for
//! byte.

pub mod dataset;
pub mod report;

pub use dataset::{gen_synthetic_dataset, DatasetManifest, GenConfig, Split};
pub use report::{compute_r1, ExperimentReport, ReportFormat, ReportMetadata, ReportRow};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{run_black_box, run_white_box, DefendedModel};
use crate::attacks::{AttackConfig, AttackResult};
use crate::audio::Waveform;
use crate::dsp::Transform;
use crate::error::{Error, Result};
use crate::model::SpeakerModel;
use crate::rng::{derive_seed, hash_str};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: Option<crate::model::TrainConfig>,
    #[serde(default)]
    pub defenses: Vec<DefenseEntry>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub adaptive: AdaptiveSection,
    pub seeds: SeedsSection,
    pub output: OutputSection,
    #[serde(default)]
    pub evaluation: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub checkpoint: String,
    #[serde(default = "default_speakers")]
    pub n_speakers: usize,
}

fn default_speakers() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    /// Directory holding (or receiving) the corpus.
    pub dir: String,
    #[serde(default = "default_manifest")]
    pub manifest: String,
    #[serde(default)]
    pub gen: Option<GenConfig>,
}

fn default_manifest() -> String {
    "manifest.json".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseEntry {
    pub name: String,
    /// Explicit transform chain. Empty means "no defense".
    #[serde(default)]
    pub transforms: Vec<Transform>,
    /// Shorthand for a single tuned transform (`qt`, `at`, `as`, `ms`,
    /// `ds`, `lpf`, `bpf`, `cbr`, `vbr`, `feco-o-k`, ...).
    #[serde(default)]
    pub preset: Option<String>,
}

impl DefenseEntry {
    pub fn chain(&self) -> Result<Vec<Transform>> {
        if let Some(p) = &self.preset {
            if !self.transforms.is_empty() {
                return Err(Error::Config(format!(
                    "defense `{}`: give either preset or transforms, not both",
                    self.name
                )));
            }
            return Transform::default_of_kind(p)
                .map(|t| vec![t])
                .ok_or_else(|| Error::Config(format!("unknown defense preset `{p}`")));
        }
        for t in &self.transforms {
            t.validate()?;
        }
        Ok(self.transforms.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEntry {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub config: AttackConfig,
}

impl AttackEntry {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.config.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_eot_r")]
    pub eot_r: usize,
}

fn default_eot_r() -> usize {
    50
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        Self { enabled: false, eot_r: default_eot_r() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedsSection {
    pub global: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
    /// Also write every adversarial WAV next to the report.
    #[serde(default)]
    pub save_audio: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Cap on test voices (0 = all).
    #[serde(default)]
    pub max_voices: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_voices: 0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }
}

/// Seed for one (defense, attack, voice) cell entry.
fn cell_seed(global: u64, defense: &str, attack: &str, voice: usize) -> u64 {
    derive_seed(
        global,
        hash_str(defense) ^ hash_str(attack).rotate_left(17) ^ (voice as u64).wrapping_mul(0x9e37),
    )
}

/// One attack crafted and evaluated for one voice.
pub struct CellOutcome {
    pub result: AttackResult,
    /// Defended model's verdict on the stored adversarial example.
    pub defended_correct: bool,
    pub defended_loss_ce: f64,
    pub defended_loss_margin: f64,
}

/// Craft an adversarial example for `voice` against `defense` using
/// `attack`, then judge it on the defended model.
pub fn run_cell_voice(
    model: &SpeakerModel,
    defense_chain: &[Transform],
    attack: &AttackConfig,
    voice: &Waveform,
    label: usize,
    adaptive: bool,
    eot_r: usize,
    seed: u64,
) -> Result<CellOutcome> {
    let defended = DefendedModel::new(model, defense_chain.to_vec(), eot_r)?;
    let result = if adaptive {
        // Attack the defended view: gradients through the chain (BPDA /
        // EOT / frozen assignments) or queries through the transforms.
        if attack.is_white_box() {
            run_white_box(&defended, voice, label, attack, seed)?
        } else {
            run_black_box(&defended, voice, label, attack, seed)?
        }
    } else {
        // Attack the bare model; the defense is a surprise at test time.
        let bare = DefendedModel::new(model, Vec::new(), 1)?;
        if attack.is_white_box() {
            run_white_box(&bare, voice, label, attack, seed)?
        } else {
            run_black_box(&bare, voice, label, attack, seed)?
        }
    };

    // The deployed system's verdict on the stored adversarial example.
    let eval_seed = derive_seed(seed, 0xe7a1);
    let logits = crate::attacks::WhiteBoxModel::logits(&defended, &result.adversarial.samples, eval_seed)?;
    let decided = crate::model::argmax(&logits);
    Ok(CellOutcome {
        defended_correct: decided == label,
        defended_loss_ce: crate::model::cross_entropy_loss(&logits, label)?,
        defended_loss_margin: crate::model::margin_loss(&logits, label)?,
        result,
    })
}

/// Benign accuracy of a defended model over labeled voices.
pub fn benign_accuracy(
    model: &SpeakerModel,
    defense_chain: &[Transform],
    voices: &[(Waveform, usize)],
    global_seed: u64,
    defense_name: &str,
) -> Result<f64> {
    let defended = DefendedModel::new(model, defense_chain.to_vec(), 1)?;
    let correct: Result<Vec<bool>> = voices
        .par_iter()
        .enumerate()
        .map(|(i, (w, label))| {
            let seed = cell_seed(global_seed, defense_name, "benign", i);
            Ok(defended.classify(w, seed)? == *label)
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / voices.len().max(1) as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Run the full defense-by-attack matrix described by the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let model = SpeakerModel::load(&cfg.model.checkpoint)
        .map_err(|e| Error::Config(format!("model.checkpoint: {e}")))?;
    let base = PathBuf::from(&cfg.dataset.dir);
    let manifest = DatasetManifest::load(base.join(&cfg.dataset.manifest))
        .map_err(|e| Error::Config(format!("dataset.manifest: {e}")))?;
    let mut test = manifest.load_split(&base, Split::Test)?;
    if cfg.evaluation.max_voices > 0 {
        test.truncate(cfg.evaluation.max_voices);
    }
    if test.is_empty() {
        return Err(Error::Config("dataset has no test voices".into()));
    }

    let defenses: Vec<(String, Vec<Transform>)> = if cfg.defenses.is_empty() {
        vec![("none".into(), Vec::new())]
    } else {
        cfg.defenses
            .iter()
            .map(|d| Ok((d.name.clone(), d.chain()?)))
            .collect::<Result<_>>()?
    };

    let out_dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::new();
    for (defense_name, chain) in &defenses {
        let a_b = benign_accuracy(&model, chain, &test, cfg.seeds.global, defense_name)?;

        if cfg.attacks.is_empty() {
            rows.push(ReportRow {
                defense: defense_name.clone(),
                attack: "none".into(),
                a_b,
                a_a: None,
                r1: None,
                mean_snr: None,
                mean_l2: None,
                mean_queries: None,
                mean_loss_ce: None,
                mean_loss_margin: None,
            });
            continue;
        }

        for attack in &cfg.attacks {
            let attack_name = attack.label();
            let outcomes: Result<Vec<CellOutcome>> = test
                .par_iter()
                .enumerate()
                .map(|(i, (w, label))| {
                    run_cell_voice(
                        &model,
                        chain,
                        &attack.config,
                        w,
                        *label,
                        cfg.adaptive.enabled,
                        cfg.adaptive.eot_r,
                        cell_seed(cfg.seeds.global, defense_name, &attack_name, i),
                    )
                })
                .collect();
            let outcomes = outcomes?;

            if cfg.output.save_audio {
                let cell_dir = out_dir
                    .join("adv")
                    .join(sanitize(defense_name))
                    .join(sanitize(&attack_name));
                std::fs::create_dir_all(&cell_dir)?;
                for (i, o) in outcomes.iter().enumerate() {
                    crate::audio::write_wav(
                        &o.result.adversarial,
                        cell_dir.join(format!("voice{i:03}.wav")),
                    )?;
                }
            }

            let n = outcomes.len() as f64;
            let a_a = outcomes.iter().filter(|o| o.defended_correct).count() as f64 / n;
            rows.push(ReportRow {
                defense: defense_name.clone(),
                attack: attack_name,
                a_b,
                a_a: Some(a_a),
                r1: Some(compute_r1(a_b, a_a)?),
                mean_snr: mean(outcomes.iter().map(|o| o.result.distortion.snr_db)),
                mean_l2: mean(outcomes.iter().map(|o| o.result.distortion.l2)),
                mean_queries: mean(outcomes.iter().map(|o| o.result.queries as f64)),
                mean_loss_ce: mean(outcomes.iter().map(|o| o.defended_loss_ce)),
                mean_loss_margin: mean(outcomes.iter().map(|o| o.defended_loss_margin)),
            });
        }
    }

    let report = ExperimentReport {
        rows,
        metadata: ReportMetadata {
            global_seed: cfg.seeds.global,
            n_test_voices: test.len(),
            adaptive: cfg.adaptive.enabled,
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };

    report.emit(ReportFormat::Csv, out_dir.join("report.csv"))?;
    report.emit(ReportFormat::Json, out_dir.join("report.json"))?;
    report.emit(ReportFormat::Text, out_dir.join("report.txt"))?;
    Ok(report)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Train (or adversarially train) a model per the config and save the
/// checkpoint. Returns the per-epoch accuracies.
pub fn train_from_config(cfg: &ExperimentConfig, adversarial: bool) -> Result<crate::model::TrainReport> {
    let base = PathBuf::from(&cfg.dataset.dir);
    let manifest = DatasetManifest::load(base.join(&cfg.dataset.manifest))
        .map_err(|e| Error::Config(format!("dataset.manifest: {e}")))?;
    let train_set = manifest.load_split(&base, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Config("dataset has no training voices".into()));
    }
    let mut tc = cfg
        .training
        .clone()
        .ok_or_else(|| Error::Config("missing [training] section".into()))?;
    if adversarial && tc.adversarial.is_none() {
        return Err(Error::Config("advtrain requires [training.adversarial]".into()));
    }
    if !adversarial {
        tc.adversarial = None;
    }

    let mut model = SpeakerModel::new(manifest.speakers.len().max(cfg.model.n_speakers), tc.seed)?;
    let report = crate::model::train(&mut model, &train_set, &tc)?;
    if let Some(parent) = Path::new(&cfg.model.checkpoint).parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    model.save(&cfg.model.checkpoint)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig {
            model: ModelSection { checkpoint: "out/model.ckpt".into(), n_speakers: 10 },
            dataset: DatasetSection {
                dir: "data".into(),
                manifest: "manifest.json".into(),
                gen: Some(GenConfig::default()),
            },
            training: Some(crate::model::TrainConfig::default()),
            defenses: vec![
                DefenseEntry { name: "none".into(), transforms: vec![], preset: None },
                DefenseEntry {
                    name: "MS".into(),
                    transforms: vec![],
                    preset: Some("ms".into()),
                },
            ],
            attacks: vec![AttackEntry {
                name: None,
                config: AttackConfig::Pgd { epsilon: 0.002, alpha: 0.0004, steps: 10 },
            }],
            adaptive: AdaptiveSection { enabled: false, eot_r: 50 },
            seeds: SeedsSection { global: 42 },
            output: OutputSection { dir: "out".into(), save_audio: false },
            evaluation: EvalSection { max_voices: 8 },
        };
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.defenses[1].chain().unwrap().len(), 1);
        assert_eq!(back.attacks[0].label(), "PGD-10");
        assert_eq!(back.seeds.global, 42);
    }

    #[test]
    fn missing_config_keys_are_named() {
        let err = ExperimentConfig::load("/nonexistent/config.toml").unwrap_err();
        assert!(matches!(err, Error::Io(_)));

        let cfg = ExperimentConfig {
            model: ModelSection { checkpoint: "/nonexistent/model.ckpt".into(), n_speakers: 2 },
            dataset: DatasetSection {
                dir: "/nonexistent".into(),
                manifest: "manifest.json".into(),
                gen: None,
            },
            training: None,
            defenses: vec![],
            attacks: vec![],
            adaptive: AdaptiveSection::default(),
            seeds: SeedsSection { global: 1 },
            output: OutputSection { dir: "/tmp/advoice-test-out".into(), save_audio: false },
            evaluation: EvalSection::default(),
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("model.checkpoint"), "{err}");
    }

    #[test]
    fn cell_seeds_are_distinct_per_axis() {
        let a = cell_seed(1, "MS", "PGD-10", 0);
        assert_eq!(a, cell_seed(1, "MS", "PGD-10", 0));
        assert_ne!(a, cell_seed(1, "MS", "PGD-10", 1));
        assert_ne!(a, cell_seed(1, "QT", "PGD-10", 0));
        assert_ne!(a, cell_seed(1, "MS", "FGSM", 0));
        assert_ne!(a, cell_seed(2, "MS", "PGD-10", 0));
    }
}
