//! Training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{load_group, Checkpoint, CheckpointHeader, TensorEntry, MAGIC, VERSION};
pub use optim::AdamW;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{samples_digest, Corpus, CorpusDir, EditedSample, SEEN_TEST, TRAIN};
use crate::error::{invalid, Error, Result};
use crate::image::BinaryMask;
use crate::lora::LoraConfig;
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::metrics::{evaluate_split, MetricsReport, Reduction};
use crate::pipeline::{token_accuracy, ModelConfig, Pipeline, SampleFeatures, Setting, TrainExample};
use crate::reasoner::ReasonerConfig;
use crate::seg_decoder::SegConfig;
use crate::tape::Mat;
use crate::text::{Segment, Vocabulary, PROMPTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    /// Parameters are rounded to `f32` after every update.
    Single,
}

/// Which prompt each training example sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Fixed(usize),
    /// Uniform over all prompts, drawn per example.
    Random,
}

impl Default for PromptMode {
    fn default() -> Self {
        PromptMode::Fixed(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub lora: LoraConfig,
    /// Evaluate on `eval_split` every this many steps; 0 disables.
    pub eval_every: u64,
    pub eval_split: String,
    pub precision: Precision,
    pub setting: Setting,
    pub prompt: PromptMode,
    pub reasoner: ReasonerConfig,
    pub seg: SegConfig,
    pub max_new: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 0.0,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            lora: LoraConfig::default(),
            eval_every: 0,
            eval_split: SEEN_TEST.to_string(),
            precision: Precision::Double,
            setting: Setting::D,
            prompt: PromptMode::default(),
            reasoner: ReasonerConfig::default(),
            seg: SegConfig::default(),
            max_new: 24,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_steps and batch_size must be at least 1".into()));
        }
        if let PromptMode::Fixed(id) = self.prompt {
            if !(1..=PROMPTS.len()).contains(&id) {
                return Err(Error::Config(format!("prompt id {id} not in 1..={}", PROMPTS.len())));
            }
        }
        self.loss_weights.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            reasoner: self.reasoner.clone(),
            seg: self.seg.clone(),
            lora: self.lora.clone(),
            max_new: self.max_new,
        }
    }

    /// Loss weights after the setting's overrides: settings without an
    /// instruction target never weight the language loss.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if !self.setting.predicts_instruction() {
            w.lambda_c = 0.0;
        }
        w
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Prompt used for evaluation; random-prompt runs are scored on prompt 1.
    pub fn eval_prompt(&self) -> usize {
        match self.prompt {
            PromptMode::Fixed(id) => id,
            PromptMode::Random => 1,
        }
    }

    pub fn prompt_for(&self, step: u64, index: usize) -> usize {
        match self.prompt {
            PromptMode::Fixed(id) => id,
            PromptMode::Random => {
                let mut r = ChaCha8Rng::seed_from_u64(mix(self.seed ^ 0x5052_4f4d, step, index as u64));
                r.random_range(1..=PROMPTS.len())
            }
        }
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut h = a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= b.wrapping_add(0x632B_E59B_D9B4_E019).rotate_left(17);
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= c.wrapping_add(0x94D0_49BB_1331_11EB).rotate_left(31);
    h.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Sample indices for `step`: consecutive slices of a per-epoch shuffle, so
/// the order depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut perm: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + k;
        let epoch = pos / n as u64;
        if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0xBA7C)));
            perm = Some((epoch, p));
        }
        out.push(perm.as_ref().expect("set above").1[(pos % n as u64) as usize]);
    }
    out
}

/// Samples by split plus a content hash.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub splits: BTreeMap<String, Vec<EditedSample>>,
    pub digest: String,
}

impl Dataset {
    pub fn new(splits: BTreeMap<String, Vec<EditedSample>>) -> Self {
        let digest = samples_digest(splits.values().flatten());
        Self { splits, digest }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::new(corpus.samples.clone())
    }

    pub fn from_dir(dir: &CorpusDir) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for name in dir.manifest.splits.keys() {
            splits.insert(name.clone(), dir.load_split(name)?);
        }
        Ok(Self::new(splits))
    }

    pub fn split(&self, name: &str) -> Result<&[EditedSample]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingSplit(name.to_string()))
    }

    /// Vocabulary over the instructions of every split.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.splits.values().flatten().map(|s| s.instruction.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub response: Option<String>,
    pub instruction: Option<String>,
    pub instruction_accuracy: Option<f64>,
    pub seg_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub setting: Setting,
    pub prompt_id: usize,
    pub metrics: MetricsReport,
    /// Mean over samples; `None` when the setting produces no text.
    pub instruction_accuracy: Option<f64>,
    pub seg_missing_rate: f64,
    pub samples: Vec<SampleEval>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub pipeline: Pipeline,
    pub optimizer: AdamW,
    pub step: u64,
    pub corpus_digest: String,
    trainable: BTreeSet<String>,
    features: HashMap<String, (Rc<SampleFeatures>, Rc<Mat>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocabulary, corpus_digest: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut pipeline = Pipeline::new(config.model_config(), vocab, config.seed)?;
        if config.precision == Precision::Single {
            pipeline.params.round_to_f32();
        }
        Self::assemble(config, pipeline, AdamW::new(0.0, 0.0), 0, corpus_digest.into())
    }

    fn assemble(config: TrainConfig, pipeline: Pipeline, mut optimizer: AdamW, step: u64, corpus_digest: String) -> Result<Self> {
        optimizer.lr = config.learning_rate;
        optimizer.weight_decay = config.weight_decay;
        let trainable = pipeline.trainable(config.setting)?;
        Ok(Self {
            config,
            pipeline,
            optimizer,
            step,
            corpus_digest,
            trainable,
            features: HashMap::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let vocab = Vocabulary::from_json(&ck.vocab_json)?;
        let fresh = Pipeline::new(ck.config.model_config(), vocab.clone(), ck.config.seed)?;
        for name in fresh.params.names() {
            let want = fresh.params[name].dim();
            match ck.params.get(name) {
                Some(m) if m.dim() == want => {}
                Some(m) => {
                    return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {want:?}", m.dim())));
                }
                None => return Err(Error::Checkpoint(format!("tensor `{name}` missing"))),
            }
        }
        if ck.params.len() != fresh.params.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
        }
        let pipeline = Pipeline {
            config: ck.config.model_config(),
            params: ck.params,
            vocab,
        };
        Self::assemble(ck.config, pipeline, ck.optimizer, ck.step, ck.corpus_digest)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.clone(),
            step: self.step,
            corpus_digest: self.corpus_digest.clone(),
            vocab_json: self.pipeline.vocab.to_json()?,
            params: self.pipeline.params.clone(),
            optimizer: self.optimizer.clone(),
        })
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    fn cache(&mut self, sample: &EditedSample) -> Result<()> {
        if !self.features.contains_key(&sample.id) {
            let f = self.pipeline.features(&sample.image)?;
            let m = sample.mask.to_f64();
            self.features.insert(sample.id.clone(), (Rc::new(f), Rc::new(m)));
        }
        Ok(())
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&EditedSample]) -> Result<LossBreakdown> {
        let first = batch.first().ok_or_else(|| invalid!("empty batch"))?;
        if batch.iter().any(|s| s.image.0.dim() != first.image.0.dim()) {
            return Err(invalid!("batch mixes image resolutions"));
        }
        for s in batch {
            self.cache(s)?;
        }
        let weights = self.config.effective_weights();
        let (breakdown, grads) = {
            let examples: Vec<TrainExample> = batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let (feats, mask) = &self.features[&s.id];
                    TrainExample {
                        features: feats,
                        mask: Rc::clone(mask),
                        instruction: &s.instruction,
                        prompt_id: self.config.prompt_for(self.step, i),
                    }
                })
                .collect();
            let mut g = self.pipeline.graph(&self.trainable);
            let (total, [c, bce, dice]) =
                self.pipeline
                    .batch_objective(&mut g, self.config.setting, &examples, &weights)?;
            let breakdown = total_loss(c, bce, dice, &weights).map_err(|e| Error::Diverged {
                step: self.step,
                detail: e.to_string(),
            })?;
            if !g.tape.scalar(total).is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("total loss {}", g.tape.scalar(total)),
                });
            }
            (breakdown, g.param_grads(total))
        };
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("non-finite gradient for `{name}`"),
            });
        }
        self.optimizer.step(&mut self.pipeline.params, &self.trainable, &grads);
        if self.config.precision == Precision::Single {
            for name in &self.trainable {
                if let Some(m) = self.pipeline.params.get_mut(name) {
                    m.mapv_inplace(|v| v as f32 as f64);
                }
            }
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// Greedy inference and scoring on `samples`, plus the predicted masks.
    pub fn evaluate_with_masks(&self, samples: &[EditedSample], split: &str) -> Result<(EvalReport, BTreeMap<String, BinaryMask>)> {
        if samples.is_empty() {
            return Err(Error::MissingSplit(split.to_string()));
        }
        let setting = self.config.setting;
        let prompt_id = self.config.eval_prompt();
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let p = self.pipeline.predict_sample(setting, s, prompt_id)?;
            let acc = p.instruction_ids.as_ref().map(|ids| {
                let target = self.pipeline.vocab.encode(&s.instruction, Segment::Response).ids;
                token_accuracy(ids, &target)
            });
            if p.seg_fallback {
                warn!("{}: no [SEG] in response, used last position", s.id);
            }
            rows.push(SampleEval {
                id: s.id.clone(),
                response: p.response.clone(),
                instruction: p.instruction.clone(),
                instruction_accuracy: acc,
                seg_fallback: p.seg_fallback,
            });
            preds.insert(s.id.clone(), p.mask);
            gts.insert(s.id.clone(), s.mask.clone());
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let metrics = evaluate_split(split, &preds, &gts, Reduction::PerImage)?;
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.instruction_accuracy).collect();
        let report = EvalReport {
            step: self.step,
            setting,
            prompt_id,
            metrics,
            instruction_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            seg_missing_rate: rows.iter().filter(|r| r.seg_fallback).count() as f64 / rows.len() as f64,
            samples: rows,
        };
        Ok((report, preds))
    }

    pub fn evaluate(&self, samples: &[EditedSample], split: &str) -> Result<EvalReport> {
        Ok(self.evaluate_with_masks(samples, split)?.0)
    }
}

/// Where `fit` writes and whether it resumes.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions<'a> {
    pub out: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

pub struct FitOutcome {
    pub trainer: Trainer,
    /// Steps run in this call.
    pub losses: Vec<StepLog>,
    pub evals: Vec<EvalReport>,
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Drops log lines past `step` so a resumed run continues a clean trace.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs training to `config.max_steps`, evaluating and checkpointing as
/// configured. Logs go to `losses.jsonl` and `eval.jsonl` under `opts.out`.
pub fn fit(config: &TrainConfig, data: &Dataset, opts: FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let train = data.split(TRAIN)?;
    if train.is_empty() {
        return Err(Error::MissingSplit(TRAIN.to_string()));
    }
    let vocab = data.vocabulary()?;
    let mut trainer = match opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.corpus_digest != data.digest {
                return Err(Error::Checkpoint("checkpoint was trained on a different corpus".into()));
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            if t.pipeline.vocab != vocab {
                return Err(Error::Checkpoint("vocabulary differs from the corpus".into()));
            }
            // only the step budget and logging cadence may change on resume
            t.config.max_steps = config.max_steps;
            t.config.eval_every = config.eval_every;
            t.config.checkpoint_every = config.checkpoint_every;
            t
        }
        None => Trainer::new(config.clone(), vocab, data.digest.clone())?,
    };
    if let Some(out) = opts.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let cfg_path = out.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&trainer.config)?).map_err(|e| Error::io(&cfg_path, e))?;
        if opts.resume.is_some() {
            truncate_log(&out.join("losses.jsonl"), trainer.step)?;
            truncate_log(&out.join("eval.jsonl"), trainer.step)?;
        } else {
            for f in ["losses.jsonl", "eval.jsonl"] {
                let _ = fs::remove_file(out.join(f));
            }
        }
    }
    let eval_samples = data.splits.get(&trainer.config.eval_split).filter(|s| !s.is_empty());
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    while trainer.step < trainer.config.max_steps {
        let idx = batch_indices(trainer.config.seed, trainer.step, train.len(), trainer.config.batch_size);
        let batch: Vec<&EditedSample> = idx.iter().map(|&i| &train[i]).collect();
        let loss = match trainer.train_step(&batch) {
            Ok(l) => l,
            Err(e) => {
                if let (Some(out), Error::Diverged { .. }) = (opts.out, &e) {
                    let dump = serde_json::json!({ "error": e.to_string(), "step": trainer.step, "batch": idx });
                    let _ = fs::write(out.join("divergence.json"), dump.to_string());
                }
                return Err(e);
            }
        };
        let log = StepLog { step: trainer.step, loss };
        if trainer.step % 50 == 0 || trainer.step == 1 {
            info!(
                "step {} total {:.4} (c {:.4}, bce {:.4}, dice {:.4})",
                log.step, loss.total, loss.l_c, loss.l_bce, loss.l_dice
            );
        }
        if let Some(out) = opts.out {
            append_jsonl(&out.join("losses.jsonl"), &log)?;
        }
        losses.push(log);
        let every = trainer.config.eval_every;
        if let Some(samples) = eval_samples.filter(|_| every > 0 && trainer.step % every == 0) {
            let report = trainer.evaluate(samples, &trainer.config.eval_split)?;
            info!("step {} eval miou {:.4} f1 {:.4}", trainer.step, report.metrics.aggregate.miou, report.metrics.aggregate.f1);
            if let Some(out) = opts.out {
                append_jsonl(&out.join("eval.jsonl"), &report)?;
            }
            evals.push(report);
        }
        let ck_every = trainer.config.checkpoint_every;
        if let Some(out) = opts.out.filter(|_| ck_every > 0 && trainer.step % ck_every == 0) {
            trainer.checkpoint()?.save(&out.join(format!("ckpt-{:06}.bin", trainer.step)))?;
        }
    }
    if let Some(out) = opts.out {
        trainer.checkpoint()?.save(&out.join("final.bin"))?;
    }
    Ok(FitOutcome { trainer, losses, evals })
}
