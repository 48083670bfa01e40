use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use forensic_seg::data::{build_corpus, CorpusConfig, CorpusDir};
use forensic_seg::experiments::{
    eval_markdown, run_ablation, run_generalization, run_prompt_sweep, ExperimentReport,
};
use forensic_seg::pipeline::Setting;
use forensic_seg::trainer::{fit, Checkpoint, Dataset, FitOptions, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "forensic-seg", version, about = "Edited-region segmentation with a tiny multimodal reasoner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        seen: usize,
        #[arg(long, default_value_t = 16)]
        unseen: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        /// Defaults to `eval-<split>` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate settings A to D over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset, e.g. `A,D`.
        #[arg(long, default_value = "A,B,C,D")]
        settings: String,
    },
    /// One model per fixed prompt plus one with random prompts.
    PromptSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare seen-family and unseen-family test splits.
    Generalize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild an experiment report from its run directories.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Json,
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let corpus = CorpusDir::open(dir).with_context(|| format!("opening corpus at {}", dir.display()))?;
    Ok(Dataset::from_dir(&corpus)?)
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, train, seen, unseen, size, seed } => {
            let cfg = CorpusConfig { train, seen, unseen, size, seed };
            let manifest = build_corpus(&cfg, &out)?;
            info!("wrote {} samples to {}", manifest.records().count(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let cfg = load_config(&config)?;
            let data = load_data(&data)?;
            let outcome = fit(&cfg, &data, FitOptions { out: Some(&out), resume: resume.as_deref() })?;
            if let Some(last) = outcome.losses.last() {
                info!("finished at step {} with loss {:.5}", last.step, last.loss.total);
            }
        }
        Command::Eval { ckpt, data, split, out } => {
            let trainer = Trainer::from_checkpoint(Checkpoint::load(&ckpt)?)?;
            let data = load_data(&data)?;
            if trainer.corpus_digest != data.digest {
                log::warn!("checkpoint was trained on a different corpus");
            }
            let samples = data.split(&split)?;
            let (report, masks) = trainer.evaluate_with_masks(samples, &split)?;
            let out = out.unwrap_or_else(|| {
                ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval-{split}"))
            });
            let mask_dir = out.join("masks");
            fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
            for (id, m) in &masks {
                m.save_png(&mask_dir.join(format!("{id}.png")))?;
            }
            write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            write(&out.join("report.md"), &eval_markdown(&[&report]))?;
            let by_id: BTreeMap<_, _> = report.samples.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut lines = String::new();
            for m in &report.metrics.images {
                let mut v = serde_json::to_value(m)?;
                if let Some(s) = by_id.get(m.id.as_str()) {
                    v["response"] = serde_json::to_value(&s.response)?;
                    v["instruction_accuracy"] = serde_json::to_value(s.instruction_accuracy)?;
                    v["seg_fallback"] = serde_json::to_value(s.seg_fallback)?;
                }
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
            write(&out.join("samples.jsonl"), &lines)?;
            println!(
                "{split}: mIoU {:.4} F1 {:.4} ({} images) -> {}",
                report.metrics.aggregate.miou,
                report.metrics.aggregate.f1,
                report.metrics.len(),
                out.display()
            );
        }
        Command::Ablate { config, data, seeds, out, settings } => {
            let cfg = load_config(&config)?;
            let data = load_data(&data)?;
            let settings = settings
                .split(',')
                .map(|s| s.parse::<Setting>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let report = run_ablation(&settings, &cfg, seeds, &data, Some(&out))?;
            print!("{}", report.to_markdown());
        }
        Command::PromptSweep { config, data, seeds, out } => {
            let report = run_prompt_sweep(&load_config(&config)?, seeds, &load_data(&data)?, Some(&out))?;
            print!("{}", report.to_markdown());
        }
        Command::Generalize { config, data, seeds, out } => {
            let report = run_generalization(&load_config(&config)?, seeds, &load_data(&data)?, Some(&out))?;
            print!("{}", report.to_markdown());
        }
        Command::Report { runs, format } => {
            if !runs.is_dir() {
                bail!("{} is not a directory", runs.display());
            }
            let report = ExperimentReport::from_run_dir(&runs)?;
            match format {
                Format::Md => print!("{}", report.to_markdown()),
                Format::Json => println!("{}", report.to_json()?),
            }
        }
    }
    Ok(())
}
