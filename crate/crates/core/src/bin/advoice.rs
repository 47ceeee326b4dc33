//! Command-line harness: corpus generation, training, the evaluation
//! matrix, single attacks, and report rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advoice::harness::{
    gen_synthetic_dataset, run_cell_voice, run_experiment, DatasetManifest, ExperimentConfig,
    GenConfig, ReportFormat, Split,
};
use advoice::rng::{derive_seed, hash_str};

#[derive(Parser)]
#[command(name = "advoice", version, about = "Adversarial robustness toolkit for speaker recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speaker corpus named by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the classifier and write the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adversarially train (PGD inner loop) and write the checkpoint.
    Advtrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full defense-by-attack evaluation matrix.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one (defense, attack) cell and save the adversarial audio.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Defense name from the config (default: first entry).
        #[arg(long)]
        defense: Option<String>,
        /// Attack name from the config (default: first entry).
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-render a JSON report as csv, json, or text.
    Report {
        /// Path to a report.json produced by `eval`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> advoice::Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let gen: GenConfig = cfg.dataset.gen.clone().unwrap_or_default();
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.dataset.dir));
            let seed = seed.unwrap_or(cfg.seeds.global);
            let manifest = gen_synthetic_dataset(&gen, seed, &dir)?;
            println!(
                "generated {} voices for {} speakers under {}",
                manifest.voices.len(),
                manifest.speakers.len(),
                dir.display()
            );
        }
        Command::Train { config, checkpoint, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(c) = checkpoint {
                cfg.model.checkpoint = c.to_string_lossy().into_owned();
            }
            if let (Some(s), Some(tc)) = (seed, cfg.training.as_mut()) {
                tc.seed = s;
            }
            let report = advoice::harness::train_from_config(&cfg, false)?;
            for (epoch, acc) in report.per_epoch_accuracy.iter().enumerate() {
                println!("epoch {:>3}: train accuracy {:.3}", epoch + 1, acc);
            }
            println!("checkpoint written to {}", cfg.model.checkpoint);
        }
        Command::Advtrain { config, checkpoint, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(c) = checkpoint {
                cfg.model.checkpoint = c.to_string_lossy().into_owned();
            }
            if let (Some(s), Some(tc)) = (seed, cfg.training.as_mut()) {
                tc.seed = s;
            }
            let report = advoice::harness::train_from_config(&cfg, true)?;
            for (epoch, acc) in report.per_epoch_accuracy.iter().enumerate() {
                println!("epoch {:>3}: adversarial train accuracy {:.3}", epoch + 1, acc);
            }
            println!("checkpoint written to {}", cfg.model.checkpoint);
        }
        Command::Eval { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output.dir = o.to_string_lossy().into_owned();
            }
            if let Some(s) = seed {
                cfg.seeds.global = s;
            }
            let report = run_experiment(&cfg)?;
            print!("{}", report.to_text_table());
            println!("report written to {}/report.{{csv,json,txt}}", cfg.output.dir);
        }
        Command::Attack { config, defense, attack, checkpoint, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(c) = checkpoint {
                cfg.model.checkpoint = c.to_string_lossy().into_owned();
            }
            if let Some(s) = seed {
                cfg.seeds.global = s;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir).join("attack"));
            std::fs::create_dir_all(&out_dir)?;

            let model = advoice::model::SpeakerModel::load(&cfg.model.checkpoint)?;
            let base = PathBuf::from(&cfg.dataset.dir);
            let manifest = DatasetManifest::load(base.join(&cfg.dataset.manifest))?;
            let mut test = manifest.load_split(&base, Split::Test)?;
            if cfg.evaluation.max_voices > 0 {
                test.truncate(cfg.evaluation.max_voices);
            }

            let defense_entry = match &defense {
                Some(name) => cfg
                    .defenses
                    .iter()
                    .find(|d| &d.name == name)
                    .ok_or_else(|| advoice::Error::Config(format!("unknown defense `{name}`")))?,
                None => cfg
                    .defenses
                    .first()
                    .ok_or_else(|| advoice::Error::Config("config has no defenses".into()))?,
            };
            let attack_entry = match &attack {
                Some(name) => cfg
                    .attacks
                    .iter()
                    .find(|a| &a.label() == name)
                    .ok_or_else(|| advoice::Error::Config(format!("unknown attack `{name}`")))?,
                None => cfg
                    .attacks
                    .first()
                    .ok_or_else(|| advoice::Error::Config("config has no attacks".into()))?,
            };
            let chain = defense_entry.chain()?;

            let mut evaded = 0usize;
            for (i, (w, label)) in test.iter().enumerate() {
                let cell = run_cell_voice(
                    &model,
                    &chain,
                    &attack_entry.config,
                    w,
                    *label,
                    cfg.adaptive.enabled,
                    cfg.adaptive.eot_r,
                    derive_seed(
                        cfg.seeds.global,
                        hash_str(&defense_entry.name)
                            ^ hash_str(&attack_entry.label()).rotate_left(17)
                            ^ (i as u64).wrapping_mul(0x9e37),
                    ),
                )?;
                let path = out_dir.join(format!("voice{i:03}.wav"));
                advoice::audio::write_wav(&cell.result.adversarial, &path)?;
                evaded += usize::from(!cell.defended_correct);
                println!(
                    "voice {i:03}: evaded={} snr={:.2} dB linf={:.6} queries={} -> {}",
                    !cell.defended_correct,
                    cell.result.distortion.snr_db,
                    cell.result.distortion.linf,
                    cell.result.queries,
                    path.display()
                );
            }
            println!(
                "{}: {} of {} voices evade {} ({})",
                attack_entry.label(),
                evaded,
                test.len(),
                defense_entry.name,
                if cfg.adaptive.enabled { "adaptive" } else { "non-adaptive" },
            );
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(&input)?;
            let report = advoice::harness::ExperimentReport::from_json(&text)?;
            let fmt: ReportFormat = format.parse()?;
            let rendered = match fmt {
                ReportFormat::Csv => report.to_csv(),
                ReportFormat::Json => report.to_json()?,
                ReportFormat::Text => report.to_text_table(),
            };
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}
