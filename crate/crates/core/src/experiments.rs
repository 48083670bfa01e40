//! The experiment matrix at toy scale: the component ladder A to D, the
//! prompt sweep and the seen-versus-unseen comparison.
//!
//! Every run writes its own directory with the training logs, the final
//! checkpoint and a `run.json` record, so a report can be rebuilt from the
//! run directories alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{SEEN_TEST, UNSEEN_TEST};
use crate::error::{invalid, Error, Result};
use crate::metrics::Reduction;
use crate::pipeline::Setting;
use crate::text::PROMPTS;
use crate::trainer::{fit, Dataset, EvalReport, FitOptions, PromptMode, TrainConfig};

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    PromptSweep,
    Generalization,
}

/// One trained model and its evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    /// Row the run belongs to, e.g. `"D"` or `"prompt 3"`.
    pub label: String,
    pub setting: Setting,
    pub seed: u64,
    pub prompt: PromptMode,
    pub steps: u64,
    pub seconds: f64,
    pub final_loss: f64,
    pub checkpoint: Option<PathBuf>,
    /// Keyed by split name.
    pub reports: BTreeMap<String, EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub split: String,
    pub runs: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub instruction_accuracy: Option<f64>,
}

/// Seen minus unseen mIoU for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub label: String,
    pub seen_miou: f64,
    pub unseen_miou: f64,
    pub gap: f64,
}

/// Published full-scale numbers, in percent, shown for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub dataset: String,
    pub miou: f64,
    pub f1: Option<f64>,
}

pub const REFERENCE_NOTE: &str = "published full-scale result, not reproduced";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Every row was trained from the same list of seeds.
    pub paired_seeds: bool,
    pub reduction: Reduction,
    pub seconds: f64,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub gaps: Vec<GapRow>,
    pub reference_note: String,
    pub references: Vec<ReferenceRow>,
}

fn reference(label: &str, dataset: &str, miou: f64, f1: Option<f64>) -> ReferenceRow {
    ReferenceRow {
        label: label.to_string(),
        dataset: dataset.to_string(),
        miou,
        f1,
    }
}

pub fn references(kind: ExperimentKind) -> Vec<ReferenceRow> {
    match kind {
        ExperimentKind::Ablation => vec![
            reference("A", "MagicBrush", 5.96, Some(9.83)),
            reference("B", "MagicBrush", 14.94, Some(21.98)),
            reference("C", "MagicBrush", 22.23, Some(31.55)),
            reference("D", "MagicBrush", 23.77, Some(33.19)),
        ],
        ExperimentKind::PromptSweep => vec![
            reference("prompt 1", "MagicBrush", 23.77, Some(33.19)),
            reference("prompt 2", "MagicBrush", 20.20, Some(28.69)),
            reference("prompt 3", "MagicBrush", 19.90, Some(28.35)),
            reference("prompt 4", "MagicBrush", 19.27, Some(27.46)),
            reference("random", "MagicBrush", 19.32, Some(31.54)),
        ],
        ExperimentKind::Generalization => vec![
            reference("full model", "MagicBrush (seen)", 23.77, Some(33.19)),
            reference("full model", "PerfBrush (unseen)", 22.55, Some(31.04)),
            reference("CAT-Net, fine-tuned", "MagicBrush (seen)", 30.47, Some(40.35)),
            reference("CAT-Net, fine-tuned", "PerfBrush (unseen)", 3.67, Some(5.52)),
        ],
    }
}

/// `n` consecutive seeds starting at the base config's seed.
pub fn seeds_from(base: &TrainConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.seed.wrapping_add(i)).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_dir_name(label: &str, seed: u64) -> String {
    let slug: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    format!("{slug}-seed{seed}")
}

struct Job {
    label: String,
    config: TrainConfig,
}

fn execute(kind: ExperimentKind, jobs: Vec<Job>, data: &Dataset, splits: &[&str], out: Option<&Path>) -> Result<ExperimentReport> {
    if jobs.is_empty() {
        return Err(invalid!("experiment has no runs"));
    }
    for s in splits {
        if data.split(s)?.is_empty() {
            return Err(Error::MissingSplit((*s).to_string()));
        }
    }
    let start = Instant::now();
    let mut runs = Vec::with_capacity(jobs.len());
    for job in jobs {
        let dir = out.map(|o| o.join(run_dir_name(&job.label, job.config.seed)));
        info!("{:?} run {} seed {}", kind, job.label, job.config.seed);
        let t0 = Instant::now();
        let outcome = fit(
            &job.config,
            data,
            FitOptions {
                out: dir.as_deref(),
                resume: None,
            },
        )?;
        let mut reports = BTreeMap::new();
        for s in splits {
            reports.insert((*s).to_string(), outcome.trainer.evaluate(data.split(s)?, s)?);
        }
        let record = RunRecord {
            kind,
            label: job.label,
            setting: job.config.setting,
            seed: job.config.seed,
            prompt: job.config.prompt,
            steps: outcome.trainer.step,
            seconds: t0.elapsed().as_secs_f64(),
            final_loss: outcome.losses.last().map_or(f64::NAN, |l| l.loss.total),
            checkpoint: dir.as_ref().map(|d| d.join("final.bin")),
            reports,
        };
        if let Some(d) = &dir {
            let path = d.join(RUN_RECORD);
            fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
        }
        runs.push(record);
    }
    let mut report = ExperimentReport::from_runs(kind, runs)?;
    report.seconds = start.elapsed().as_secs_f64();
    if let Some(o) = out {
        report.save(o)?;
    }
    Ok(report)
}

/// Trains and evaluates every setting once per seed. Seeds are shared
/// across settings, so rows are paired.
pub fn run_ablation(settings: &[Setting], base: &TrainConfig, n_seeds: usize, data: &Dataset, out: Option<&Path>) -> Result<ExperimentReport> {
    if settings.is_empty() || n_seeds == 0 {
        return Err(invalid!("ablation needs at least one setting and one seed"));
    }
    let mut jobs = Vec::new();
    for &setting in settings {
        for seed in seeds_from(base, n_seeds) {
            jobs.push(Job {
                label: setting.to_string(),
                config: TrainConfig {
                    setting,
                    seed,
                    ..base.clone()
                },
            });
        }
    }
    execute(ExperimentKind::Ablation, jobs, data, &[SEEN_TEST], out)
}

/// Setting D trained once per fixed prompt and once with a random prompt
/// per example.
pub fn run_prompt_sweep(base: &TrainConfig, n_seeds: usize, data: &Dataset, out: Option<&Path>) -> Result<ExperimentReport> {
    if n_seeds == 0 {
        return Err(invalid!("prompt sweep needs at least one seed"));
    }
    let modes = (1..=PROMPTS.len())
        .map(|id| (format!("prompt {id}"), PromptMode::Fixed(id)))
        .chain(std::iter::once(("random".to_string(), PromptMode::Random)));
    let mut jobs = Vec::new();
    for (label, prompt) in modes {
        for seed in seeds_from(base, n_seeds) {
            jobs.push(Job {
                label: label.clone(),
                config: TrainConfig {
                    setting: Setting::D,
                    prompt,
                    seed,
                    ..base.clone()
                },
            });
        }
    }
    execute(ExperimentKind::PromptSweep, jobs, data, &[SEEN_TEST], out)
}

/// Setting D evaluated on both test splits.
pub fn run_generalization(base: &TrainConfig, n_seeds: usize, data: &Dataset, out: Option<&Path>) -> Result<ExperimentReport> {
    if n_seeds == 0 {
        return Err(invalid!("generalization needs at least one seed"));
    }
    let jobs = seeds_from(base, n_seeds)
        .into_iter()
        .map(|seed| Job {
            label: Setting::D.to_string(),
            config: TrainConfig {
                setting: Setting::D,
                seed,
                ..base.clone()
            },
        })
        .collect();
    execute(ExperimentKind::Generalization, jobs, data, &[SEEN_TEST, UNSEEN_TEST], out)
}

impl ExperimentReport {
    /// Aggregates run records into rows, keeping the order rows first appear.
    pub fn from_runs(kind: ExperimentKind, runs: Vec<RunRecord>) -> Result<Self> {
        if runs.is_empty() {
            return Err(invalid!("no runs to summarise"));
        }
        if let Some(r) = runs.iter().find(|r| r.kind != kind) {
            return Err(invalid!("run `{}` belongs to a {:?} experiment", r.label, r.kind));
        }
        let mut labels: Vec<&str> = Vec::new();
        for r in &runs {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        let seeds_of = |label: &str| -> Vec<u64> {
            let mut s: Vec<u64> = runs.iter().filter(|r| r.label == label).map(|r| r.seed).collect();
            s.sort_unstable();
            s
        };
        let seeds = seeds_of(labels[0]);
        let paired_seeds = labels.iter().all(|l| seeds_of(l) == seeds);
        let reduction = runs[0]
            .reports
            .values()
            .next()
            .map_or(Reduction::default(), |r| r.metrics.reduction);

        let mut summary = Vec::new();
        for &label in &labels {
            let rows: Vec<&RunRecord> = runs.iter().filter(|r| r.label == label).collect();
            let splits: Vec<&String> = rows[0].reports.keys().collect();
            for split in splits {
                let reps: Vec<&EvalReport> = rows.iter().filter_map(|r| r.reports.get(split)).collect();
                let (miou_mean, miou_std) = mean_std(&reps.iter().map(|r| r.metrics.aggregate.miou).collect::<Vec<_>>());
                let (f1_mean, f1_std) = mean_std(&reps.iter().map(|r| r.metrics.aggregate.f1).collect::<Vec<_>>());
                let accs: Vec<f64> = reps.iter().filter_map(|r| r.instruction_accuracy).collect();
                summary.push(SummaryRow {
                    label: label.to_string(),
                    split: split.clone(),
                    runs: reps.len(),
                    miou_mean,
                    miou_std,
                    f1_mean,
                    f1_std,
                    instruction_accuracy: (!accs.is_empty()).then(|| mean_std(&accs).0),
                });
            }
        }
        let mut gaps = Vec::new();
        for &label in &labels {
            let find = |split: &str| summary.iter().find(|s| s.label == label && s.split == split);
            if let (Some(seen), Some(unseen)) = (find(SEEN_TEST), find(UNSEEN_TEST)) {
                gaps.push(GapRow {
                    label: label.to_string(),
                    seen_miou: seen.miou_mean,
                    unseen_miou: unseen.miou_mean,
                    gap: seen.miou_mean - unseen.miou_mean,
                });
            }
        }
        Ok(Self {
            kind,
            seeds,
            paired_seeds,
            reduction,
            seconds: runs.iter().map(|r| r.seconds).sum(),
            runs,
            summary,
            gaps,
            reference_note: REFERENCE_NOTE.to_string(),
            references: references(kind),
        })
    }

    /// Rebuilds a report from the `run.json` files under `dir`.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path().join(RUN_RECORD)))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut runs = Vec::new();
        for p in entries {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            runs.push(serde_json::from_str::<RunRecord>(&text)?);
        }
        let kind = runs.first().map(|r| r.kind).ok_or_else(|| invalid!("no run records under {}", dir.display()))?;
        // restore the order rows were trained in
        runs.sort_by_key(|r| (label_rank(kind, &r.label), r.label.clone(), r.seed));
        Self::from_runs(kind, runs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join("report.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, label: &str, split: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.label == label && r.split == split)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let title = match self.kind {
            ExperimentKind::Ablation => "Component ablation",
            ExperimentKind::PromptSweep => "Prompt sweep",
            ExperimentKind::Generalization => "Seen vs unseen edit family",
        };
        let _ = writeln!(s, "# {title}\n");
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "Seeds: {} ({}). Metrics: {:?} mean, in percent, mean ± std over runs. Runtime {:.1} s.\n",
            seeds.join(", "),
            if self.paired_seeds { "shared by every row" } else { "not shared across rows" },
            self.reduction,
            self.seconds
        );
        match self.kind {
            ExperimentKind::Ablation => {
                let _ = writeln!(s, "| Setting | LLM image embedding | Prompt | Instruction prediction | mIoU | F1 |");
                let _ = writeln!(s, "|---|---|---|---|---|---|");
                for r in &self.summary {
                    let flags = r.label.parse::<Setting>().ok();
                    let tick = |f: fn(Setting) -> bool| flags.map_or("?", |x| if f(x) { "✓" } else { "" });
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} | {} |",
                        r.label,
                        tick(Setting::uses_llm_image_embedding),
                        tick(Setting::uses_prompt),
                        tick(Setting::predicts_instruction),
                        pct(r.miou_mean, r.miou_std),
                        pct(r.f1_mean, r.f1_std)
                    );
                }
            }
            ExperimentKind::PromptSweep => {
                let _ = writeln!(s, "| Input prompt | mIoU | F1 | Instruction accuracy |");
                let _ = writeln!(s, "|---|---|---|---|");
                for r in &self.summary {
                    let text = r
                        .label
                        .strip_prefix("prompt ")
                        .and_then(|id| id.parse::<usize>().ok())
                        .and_then(|id| PROMPTS.get(id - 1))
                        .map_or_else(|| "Random choice of the prompts above".to_string(), |p| format!("\"{p}\""));
                    let _ = writeln!(
                        s,
                        "| {text} | {} | {} | {} |",
                        pct(r.miou_mean, r.miou_std),
                        pct(r.f1_mean, r.f1_std),
                        r.instruction_accuracy.map_or("-".into(), |a| format!("{:.1}", 100.0 * a))
                    );
                }
            }
            ExperimentKind::Generalization => {
                let _ = writeln!(s, "| Model | Split | mIoU | F1 |");
                let _ = writeln!(s, "|---|---|---|---|");
                for r in &self.summary {
                    let _ = writeln!(s, "| {} | {} | {} | {} |", r.label, r.split, pct(r.miou_mean, r.miou_std), pct(r.f1_mean, r.f1_std));
                }
                for g in &self.gaps {
                    let _ = writeln!(
                        s,
                        "\nGap for {}: seen {:.2} - unseen {:.2} = {:+.2} mIoU points.",
                        g.label,
                        100.0 * g.seen_miou,
                        100.0 * g.unseen_miou,
                        100.0 * g.gap
                    );
                }
            }
        }
        let _ = writeln!(s, "\n## Reference rows ({})\n", self.reference_note);
        let _ = writeln!(s, "| Row | Dataset | mIoU | F1 |");
        let _ = writeln!(s, "|---|---|---|---|");
        for r in &self.references {
            let f1 = r.f1.map_or("-".to_string(), |f| format!("{f:.2}"));
            let _ = writeln!(s, "| {} | {} | {:.2} | {f1} |", r.label, r.dataset, r.miou);
        }
        let _ = writeln!(s, "\n## Runs\n");
        let _ = writeln!(s, "| Row | Seed | Steps | Final loss | Seconds | Checkpoint |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.runs {
            let ck = r.checkpoint.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let _ = writeln!(s, "| {} | {} | {} | {:.4} | {:.1} | {ck} |", r.label, r.seed, r.steps, r.final_loss, r.seconds);
        }
        s
    }
}

/// Table of single-checkpoint evaluations, one row per report, in percent.
pub fn eval_markdown(reports: &[&EvalReport]) -> String {
    let mut s = String::from("| Setting | Step | Split | Images | mIoU | F1 | Instruction accuracy | [SEG] missing |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let a = &r.metrics.aggregate;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.2} | {:.2} | {} | {:.1} |",
            r.setting,
            r.step,
            r.metrics.split,
            r.metrics.len(),
            100.0 * a.miou,
            100.0 * a.f1,
            r.instruction_accuracy.map_or("-".into(), |v| format!("{:.1}", 100.0 * v)),
            100.0 * r.seg_missing_rate
        );
    }
    let _ = writeln!(s, "\nMetrics use {:?} reduction.", reports.first().map_or(Reduction::default(), |r| r.metrics.reduction));
    s
}

fn label_rank(kind: ExperimentKind, label: &str) -> usize {
    let order: Vec<String> = match kind {
        ExperimentKind::Ablation | ExperimentKind::Generalization => Setting::ALL.iter().map(Setting::to_string).collect(),
        ExperimentKind::PromptSweep => (1..=PROMPTS.len())
            .map(|i| format!("prompt {i}"))
            .chain(std::iter::once("random".to_string()))
            .collect(),
    };
    order.iter().position(|o| o == label).unwrap_or(order.len())
}

fn pct(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}
