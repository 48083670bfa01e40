//! The full model: reasoner, query converter and segmentation branch, wired
//! for each ablation setting.

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EditedSample;
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage};
use crate::lora::{self, FreezePolicy, LoraConfig, ParamRole, ADAPTER_PREFIX};
use crate::losses::{LossWeights, DICE_EPS};
use crate::params::{Graph, ParamStore};
use crate::reasoner::{
    self, encode_image_for_llm, extract_seg_embedding, init_reasoner, text_ids, Reasoner, ReasonerConfig,
    ReasoningQuery, SegLocation, VisualTokens, CONVERTER, HEAD, TOK_EMB,
};
use crate::seg_decoder::{
    self, binarize, decode_mask_graph, encode_image_for_mask, init_seg, FeatureGrid, MaskLogits, SegConfig,
    LEARNED_QUERY,
};
use crate::tape::{Mat, Var};
use crate::text::{parse_response, render_prompt_id, render_response, Segment, Vocabulary, EOS, SEG};

/// Component ablation settings, from decoder-only to the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
    D,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::A, Setting::B, Setting::C, Setting::D];

    pub fn uses_llm_image_embedding(self) -> bool {
        self != Setting::A
    }

    pub fn uses_prompt(self) -> bool {
        matches!(self, Setting::C | Setting::D)
    }

    pub fn predicts_instruction(self) -> bool {
        self == Setting::D
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Setting::A),
            "B" => Ok(Setting::B),
            "C" => Ok(Setting::C),
            "D" => Ok(Setting::D),
            _ => Err(invalid!("unknown setting `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub reasoner: ReasonerConfig,
    pub seg: SegConfig,
    pub lora: LoraConfig,
    /// Token budget for greedy decoding at evaluation.
    pub max_new: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            reasoner: ReasonerConfig::default(),
            seg: SegConfig::default(),
            lora: LoraConfig::default(),
            max_new: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.reasoner.validate()?;
        self.seg.validate()?;
        self.lora.validate()?;
        if self.seg.query_dim != self.reasoner.query_dim {
            return Err(Error::Config(format!(
                "decoder query_dim {} differs from reasoner query_dim {}",
                self.seg.query_dim, self.reasoner.query_dim
            )));
        }
        if self.max_new < 4 {
            return Err(Error::Config("max_new must be at least 4".into()));
        }
        Ok(())
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        self.reasoner.check_image(height, width)?;
        if height % self.seg.patch != 0 || width % self.seg.patch != 0 {
            return Err(invalid!("image {height}x{width} is not divisible by patch {}", self.seg.patch));
        }
        Ok(())
    }

    pub fn lora_targets(&self) -> Vec<String> {
        self.lora
            .targets
            .clone()
            .unwrap_or_else(|| self.reasoner.default_lora_targets())
    }
}

/// Outputs of the two frozen encoders for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub visual: VisualTokens,
    pub grid: FeatureGrid,
}

/// Inputs the training graph needs for one sample.
pub struct TrainExample<'s> {
    pub features: &'s SampleFeatures,
    pub mask: Rc<Mat>,
    pub instruction: &'s str,
    pub prompt_id: usize,
}

/// Per-sample loss nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_c: Var,
    pub l_bce: Var,
    pub l_dice: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: MaskLogits,
    pub mask: BinaryMask,
    /// Decoded response; `None` for settings that produce no text.
    pub response: Option<String>,
    pub instruction: Option<String>,
    pub instruction_ids: Option<Vec<usize>>,
    /// No `[SEG]` was generated and the last position stood in for it.
    pub seg_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

impl Pipeline {
    /// Fresh weights from `seed`, with zero-initialised adapters attached.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut p = Self::without_adapters(config, vocab, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c4f_5241);
        lora::attach_adapters(&mut p.params, &p.config.lora_targets(), &p.config.lora, &mut rng)?;
        Ok(p)
    }

    /// Same base weights as [`Pipeline::new`] with no adapters.
    pub fn without_adapters(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_reasoner(&mut params, &config.reasoner, vocab.len(), &mut rng);
        init_seg(&mut params, &config.seg, &mut rng);
        Ok(Self { config, params, vocab })
    }

    pub fn lora_scale(&self) -> f64 {
        self.config.lora.scale()
    }

    pub fn reasoner(&self) -> Reasoner<'_> {
        Reasoner {
            cfg: &self.config.reasoner,
            params: &self.params,
            lora_scale: self.lora_scale(),
        }
    }

    pub fn graph<'a>(&'a self, trainable: &'a BTreeSet<String>) -> Graph<'a> {
        Graph::new(&self.params, trainable).with_lora_scale(self.lora_scale())
    }

    /// Role of every tensor under `setting`. Components a setting does not
    /// run are frozen so that nothing outside the active path moves.
    pub fn freeze_policy(&self, setting: Setting) -> FreezePolicy {
        let mut policy = FreezePolicy::new();
        for name in self.params.names() {
            let llm = name.starts_with("llm.");
            let mut role = if name.starts_with(ADAPTER_PREFIX) {
                ParamRole::LoraAdapted
            } else if name.starts_with(&format!("{CONVERTER}.")) {
                ParamRole::FromScratch
            } else if name.starts_with("seg.dec.") || name == TOK_EMB || name.starts_with(&format!("{HEAD}.")) {
                ParamRole::FullyTrainable
            } else {
                ParamRole::Frozen
            };
            match setting {
                Setting::A => {
                    if name == LEARNED_QUERY {
                        role = ParamRole::FullyTrainable;
                    } else if !name.starts_with("seg.") {
                        role = ParamRole::Frozen;
                    }
                }
                Setting::B => {
                    if llm || name.starts_with(ADAPTER_PREFIX) {
                        role = ParamRole::Frozen;
                    }
                }
                Setting::C => {
                    if name.starts_with(&format!("{HEAD}.")) {
                        role = ParamRole::Frozen;
                    }
                }
                Setting::D => {}
            }
            policy.assign(name, role);
        }
        policy
    }

    pub fn trainable(&self, setting: Setting) -> Result<BTreeSet<String>> {
        lora::apply_freeze_policy(&self.params, &self.freeze_policy(setting))
    }

    pub fn features(&self, image: &RgbImage) -> Result<SampleFeatures> {
        self.config.check_image(image.height(), image.width())?;
        Ok(SampleFeatures {
            visual: encode_image_for_llm(&self.params, &self.config.reasoner, image)?,
            grid: encode_image_for_mask(&self.params, &self.config.seg, image)?,
        })
    }

    /// `(response ids ending in EOS, text index of [SEG])` for teacher forcing.
    pub fn target_response(&self, setting: Setting, instruction: &str, prompt_len: usize) -> Result<(Vec<usize>, usize)> {
        let mut ids = if setting.predicts_instruction() {
            self.vocab.encode(&render_response(instruction)?, Segment::Response).ids
        } else {
            vec![SEG]
        };
        ids.push(EOS);
        let seg = ids.iter().position(|&t| t == SEG).ok_or(Error::SegMissing)?;
        Ok((ids, 1 + prompt_len + seg))
    }

    /// Builds one sample's losses on `g`.
    pub fn sample_losses(&self, g: &mut Graph, setting: Setting, ex: &TrainExample) -> Result<LossVars> {
        let feats = ex.features;
        let visual = g.tape.constant(feats.visual.0.clone());
        let (query, l_c) = match setting {
            Setting::A => (g.p(LEARNED_QUERY), None),
            Setting::B => {
                let pooled = g.tape.mean_rows(visual);
                (reasoner::project_query_graph(g, pooled), None)
            }
            Setting::C | Setting::D => {
                let prompt = self.vocab.encode_prompt(render_prompt_id(ex.prompt_id)?);
                let (response, seg_at) = self.target_response(setting, ex.instruction, prompt.len())?;
                let text = text_ids(&prompt, &response);
                // the final EOS is only ever a target
                let input = &text[..text.len() - 1];
                let (hidden, logits) = reasoner::forward_graph(g, &self.config.reasoner, visual, input)?;
                let n_vis = feats.visual.len();
                let h_seg = g.tape.slice_rows(hidden, n_vis + seg_at, 1);
                let query = reasoner::project_query_graph(g, h_seg);
                let first = 1 + prompt.len();
                let targets: Vec<(usize, usize)> = (first - 1..input.len()).map(|t| (t, text[t + 1])).collect();
                (query, Some(g.tape.cross_entropy(logits, &targets)))
            }
        };
        let grid = g.tape.constant(feats.grid.features.clone());
        let logits = decode_mask_graph(g, &self.config.seg, grid, feats.grid.rows, feats.grid.cols, query);
        if g.tape.value(logits).dim() != ex.mask.dim() {
            return Err(invalid!(
                "mask {:?} does not match prediction {:?}",
                ex.mask.dim(),
                g.tape.value(logits).dim()
            ));
        }
        let l_bce = g.tape.bce_with_logits(logits, Rc::clone(&ex.mask));
        let l_dice = g.tape.soft_dice(logits, Rc::clone(&ex.mask), DICE_EPS);
        let l_c = l_c.unwrap_or_else(|| g.tape.constant(Mat::zeros((1, 1))));
        Ok(LossVars { l_c, l_bce, l_dice })
    }

    /// Weighted mean of per-sample losses over `examples`, as one node, plus
    /// the unweighted means of `(l_c, l_bce, l_dice)`.
    pub fn batch_objective(
        &self,
        g: &mut Graph,
        setting: Setting,
        examples: &[TrainExample],
        w: &LossWeights,
    ) -> Result<(Var, [f64; 3])> {
        if examples.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let n = examples.len() as f64;
        let mut terms = Vec::with_capacity(3 * examples.len());
        let mut means = [0.0; 3];
        for ex in examples {
            let v = self.sample_losses(g, setting, ex)?;
            for (m, var) in means.iter_mut().zip([v.l_c, v.l_bce, v.l_dice]) {
                *m += g.tape.scalar(var) / n;
            }
            terms.push((v.l_c, w.lambda_c / n));
            terms.push((v.l_bce, w.lambda_m * w.lambda_bce / n));
            terms.push((v.l_dice, w.lambda_m * w.lambda_dice / n));
        }
        Ok((g.tape.weighted_sum(&terms), means))
    }

    /// Query vector for inference, plus the decoded response for settings
    /// that produce text.
    fn infer_query(&self, setting: Setting, feats: &SampleFeatures, prompt_id: usize) -> Result<(ReasoningQuery, Option<Vec<usize>>, bool)> {
        let r = self.reasoner();
        match setting {
            Setting::A => Ok((ReasoningQuery(self.params[LEARNED_QUERY].row(0).to_vec()), None, false)),
            Setting::B => {
                let pooled = feats.visual.0.mean_axis(ndarray::Axis(0)).expect("visual tokens");
                Ok((r.project_query(pooled.as_slice().expect("contiguous"))?, None, false))
            }
            Setting::C => {
                let prompt = self.vocab.encode_prompt(render_prompt_id(prompt_id)?);
                let text = text_ids(&prompt, &[SEG]);
                let states = r.forward_ids(&feats.visual, &text)?;
                let e = extract_seg_embedding(&states, SegLocation::At(text.len() - 1))?;
                Ok((r.project_query(&e.vector)?, None, false))
            }
            Setting::D => {
                let prompt = self.vocab.encode_prompt(render_prompt_id(prompt_id)?);
                let gen = r.generate(&feats.visual, &prompt, self.config.max_new)?;
                let at = match parse_response(&gen.response, &self.vocab) {
                    Ok(p) => SegLocation::At(gen.response_start + p.seg_position),
                    Err(Error::SegMissing) => SegLocation::Fallback,
                    Err(e) => return Err(e),
                };
                let e = extract_seg_embedding(&gen.states, at)?;
                Ok((r.project_query(&e.vector)?, Some(gen.response), e.fallback))
            }
        }
    }

    pub fn predict(&self, setting: Setting, feats: &SampleFeatures, prompt_id: usize) -> Result<Prediction> {
        let (query, response, seg_fallback) = self.infer_query(setting, feats, prompt_id)?;
        let logits = seg_decoder::decode_mask(&self.params, &self.config.seg, &feats.grid, &query)?;
        let mask = binarize(&logits, 0.5)?;
        let parsed = response.as_ref().and_then(|ids| parse_response(ids, &self.vocab).ok());
        Ok(Prediction {
            logits,
            mask,
            response: response.as_ref().map(|ids| {
                let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
                self.vocab.decode(&ids[..end])
            }),
            instruction: parsed.as_ref().map(|p| p.instruction.clone()),
            instruction_ids: match (&response, parsed) {
                (_, Some(p)) => Some(p.instruction_ids),
                (Some(_), None) => Some(Vec::new()),
                (None, None) => None,
            },
            seg_fallback,
        })
    }

    pub fn predict_sample(&self, setting: Setting, sample: &EditedSample, prompt_id: usize) -> Result<Prediction> {
        self.predict(setting, &self.features(&sample.image)?, prompt_id)
    }
}

/// Positional token agreement: matches over the longer of the two lengths.
pub fn token_accuracy(predicted: &[usize], target: &[usize]) -> f64 {
    let n = predicted.len().max(target.len());
    if n == 0 {
        return 1.0;
    }
    let hits = predicted.iter().zip(target).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, Family};

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig {
            reasoner: ReasonerConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 2,
                max_seq: 96,
                patch: 8,
                query_dim: 8,
                seed: 0,
            },
            seg: SegConfig {
                d_feat: 16,
                patch: 4,
                n_heads: 2,
                query_dim: 8,
            },
            lora: LoraConfig { rank: 2, ..LoraConfig::default() },
            max_new: 24,
        }
    }

    fn sample() -> EditedSample {
        generate_sample("s", 99, 32, Family::A).unwrap()
    }

    #[test]
    fn policy_per_setting() {
        let s = sample();
        let vocab = Vocabulary::build([s.instruction.as_str()]).unwrap();
        let p = Pipeline::new(micro(), vocab, 1).unwrap();
        let a = p.trainable(Setting::A).unwrap();
        assert!(a.iter().all(|n| n.starts_with("seg.dec.") || n == LEARNED_QUERY));
        let b = p.trainable(Setting::B).unwrap();
        assert!(b.iter().all(|n| n.starts_with("seg.dec.") || n.starts_with("mlp.")));
        let d = p.trainable(Setting::D).unwrap();
        assert!(d.iter().any(|n| n.starts_with("lora.")));
        assert!(d.contains(TOK_EMB));
        assert!(!d.iter().any(|n| n.starts_with("seg.enc.") || n.starts_with("llm.vis.") || n.starts_with("llm.blocks.")));
        let pol = p.freeze_policy(Setting::D);
        assert_eq!(pol.role("mlp.fc1.weight"), Some(ParamRole::FromScratch));
        assert_eq!(pol.role("seg.dec.lift.weight"), Some(ParamRole::FullyTrainable));
        let c = p.trainable(Setting::C).unwrap();
        assert!(!c.iter().any(|n| n.starts_with("llm.head.")));
    }

    #[test]
    fn teacher_forced_seg_index_points_at_seg() {
        let s = sample();
        let vocab = Vocabulary::build([s.instruction.as_str()]).unwrap();
        let p = Pipeline::new(micro(), vocab, 1).unwrap();
        let prompt = p.vocab.encode_prompt(render_prompt_id(1).unwrap());
        for setting in [Setting::C, Setting::D] {
            let (resp, at) = p.target_response(setting, &s.instruction, prompt.len()).unwrap();
            let text = text_ids(&prompt, &resp);
            assert_eq!(text[at], SEG);
            assert_eq!(*text.last().unwrap(), EOS);
        }
    }

    #[test]
    fn every_setting_predicts_full_resolution() {
        let s = sample();
        let vocab = Vocabulary::build([s.instruction.as_str()]).unwrap();
        let p = Pipeline::new(micro(), vocab, 2).unwrap();
        for setting in Setting::ALL {
            let pred = p.predict_sample(setting, &s, 1).unwrap();
            assert_eq!(pred.mask.dim(), (32, 32));
            assert_eq!(pred.response.is_some(), setting == Setting::D);
        }
    }

    #[test]
    fn accuracy_counts_positions() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
        assert_eq!(token_accuracy(&[9, 2, 3], &[1, 2, 3]), 2.0 / 3.0);
        assert_eq!(token_accuracy(&[], &[]), 1.0);
    }

    #[test]
    fn settings_parse() {
        assert_eq!("c".parse::<Setting>().unwrap(), Setting::C);
        assert!("E".parse::<Setting>().is_err());
        assert!(Setting::D.predicts_instruction() && !Setting::C.predicts_instruction());
        assert!(Setting::C.uses_prompt() && !Setting::B.uses_prompt());
    }
}
