//! Small decoder-only multimodal transformer that reads visual tokens and a
//! prompt, writes the response, and exposes the hidden state at `[SEG]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::nn::{self, apply_linear, init_layer_norm, init_linear, layer_norm, linear, patchify, sincos_2d};
use crate::params::{normal_mat, Graph, ParamStore};
use crate::tape::{AttnMask, Mat, Var};
use crate::text::{TokenSequence, BOS, EOS};

pub const VIS_PROJ: &str = "llm.vis.proj";
pub const TOK_EMB: &str = "llm.tok_emb";
pub const POS_EMB: &str = "llm.pos_emb";
pub const FINAL_NORM: &str = "llm.ln_f";
pub const HEAD: &str = "llm.head";
pub const CONVERTER: &str = "mlp";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub patch: usize,
    pub query_dim: usize,
    pub seed: u64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 128,
            patch: 8,
            query_dim: 32,
            seed: 0,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be divisible by 4".into()));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.patch == 0 || self.query_dim == 0 {
            return Err(Error::Config("reasoner sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(invalid!(
                "image {height}x{width} is not divisible by patch {}",
                self.patch
            ));
        }
        Ok(())
    }

    pub fn n_visual(&self, height: usize, width: usize) -> usize {
        (height / self.patch) * (width / self.patch)
    }

    pub fn block(&self, i: usize) -> String {
        format!("llm.blocks.{i}")
    }

    /// Query and value projections of every block.
    pub fn default_lora_targets(&self) -> Vec<String> {
        (0..self.n_layers)
            .flat_map(|i| {
                let b = self.block(i);
                [format!("{b}.attn.q"), format!("{b}.attn.v")]
            })
            .collect()
    }
}

/// Adds all reasoner and query-converter tensors to `store`.
pub fn init_reasoner(store: &mut ParamStore, cfg: &ReasonerConfig, vocab_size: usize, rng: &mut impl Rng) {
    let d = cfg.d_model;
    init_linear(store, rng, VIS_PROJ, cfg.patch * cfg.patch * 3, d);
    store.insert(TOK_EMB, normal_mat(rng, vocab_size, d, 1.0));
    store.insert(POS_EMB, normal_mat(rng, cfg.max_seq, d, 0.5));
    for i in 0..cfg.n_layers {
        let b = cfg.block(i);
        init_layer_norm(store, &format!("{b}.ln1"), d);
        nn::init_attention(store, rng, &format!("{b}.attn"), d, d, d);
        init_layer_norm(store, &format!("{b}.ln2"), d);
        nn::init_mlp(store, rng, &format!("{b}.mlp"), d, d * cfg.ffn_mult, d);
    }
    init_layer_norm(store, FINAL_NORM, d);
    init_linear(store, rng, HEAD, d, vocab_size);
    nn::init_mlp(store, rng, CONVERTER, d, d, cfg.query_dim);
}

/// Patch embeddings plus fixed 2-D positional codes, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens(pub Mat);

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Last-layer activations over the whole sequence and next-token logits over
/// the text part.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub hidden: Mat,
    pub logits: Mat,
    pub n_visual: usize,
}

impl HiddenStates {
    pub fn text_len(&self) -> usize {
        self.logits.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningQuery(pub Vec<f64>);

/// Where to read the `[SEG]` state from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegLocation {
    /// Index into the text sequence (BOS is 0).
    At(usize),
    /// No `[SEG]` was produced; use the last text position.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegEmbedding {
    pub vector: Vec<f64>,
    pub fallback: bool,
}

pub fn encode_image_for_llm(store: &ParamStore, cfg: &ReasonerConfig, image: &RgbImage) -> Result<VisualTokens> {
    let (h, w) = (image.height(), image.width());
    cfg.check_image(h, w)?;
    let patches = patchify(&image.0, cfg.patch);
    let proj_in = store[&format!("{VIS_PROJ}.weight")].ncols();
    if patches.ncols() != proj_in {
        return Err(invalid!("patch width {} does not match projection {proj_in}", patches.ncols()));
    }
    let emb = apply_linear(store, VIS_PROJ, &patches);
    Ok(VisualTokens(emb + sincos_2d(h / cfg.patch, w / cfg.patch, cfg.d_model)))
}

/// `[BOS] ∥ prompt ∥ response` ids.
pub fn text_ids(prompt: &TokenSequence, response: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(1 + prompt.len() + response.len());
    ids.push(BOS);
    ids.extend_from_slice(&prompt.ids);
    ids.extend_from_slice(response);
    ids
}

/// Runs the transformer over `visual ∥ text` on `g`. Returns the final-norm
/// activations for every position and the logits of the text positions.
pub fn forward_graph(g: &mut Graph, cfg: &ReasonerConfig, visual: Var, text: &[usize]) -> Result<(Var, Var)> {
    let n_vis = g.tape.value(visual).nrows();
    let total = n_vis + text.len();
    if total > cfg.max_seq {
        return Err(Error::Capacity { len: total, max: cfg.max_seq });
    }
    if text.is_empty() {
        return Err(invalid!("text sequence is empty"));
    }
    let vocab = g.params()[TOK_EMB].nrows();
    if let Some(&bad) = text.iter().find(|&&t| t >= vocab) {
        return Err(invalid!("token id {bad} outside vocabulary of {vocab}"));
    }
    let emb = g.p(TOK_EMB);
    let tok = g.tape.gather_rows(emb, text);
    let pos_all = g.p(POS_EMB);
    let pos = g.tape.slice_rows(pos_all, 0, text.len());
    let txt = g.tape.add(tok, pos);
    let mut x = g.tape.concat_rows(&[visual, txt]);
    let mask = AttnMask::PrefixCausal { prefix: n_vis };
    for i in 0..cfg.n_layers {
        let b = cfg.block(i);
        let h = layer_norm(g, &format!("{b}.ln1"), x);
        let a = nn::attention(g, &format!("{b}.attn"), h, h, cfg.n_heads, mask);
        x = g.tape.add(x, a);
        let h = layer_norm(g, &format!("{b}.ln2"), x);
        let m = nn::mlp(g, &format!("{b}.mlp"), h);
        x = g.tape.add(x, m);
    }
    let hidden = layer_norm(g, FINAL_NORM, x);
    let text_hidden = g.tape.slice_rows(hidden, n_vis, text.len());
    let logits = linear(g, HEAD, text_hidden);
    Ok((hidden, logits))
}

/// Query converter on the tape.
pub fn project_query_graph(g: &mut Graph, h_seg: Var) -> Var {
    nn::mlp(g, CONVERTER, h_seg)
}

/// Read-only view of reasoner weights for inference.
#[derive(Clone, Copy)]
pub struct Reasoner<'a> {
    pub cfg: &'a ReasonerConfig,
    pub params: &'a ParamStore,
    pub lora_scale: f64,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, ending with EOS unless the budget ran out.
    pub response: Vec<usize>,
    /// Index in the text sequence of the first response token.
    pub response_start: usize,
    /// States over `visual ∥ BOS ∥ prompt ∥ response`.
    pub states: HiddenStates,
}

impl<'a> Reasoner<'a> {
    fn graph(&self) -> Graph<'a> {
        static EMPTY: std::sync::OnceLock<std::collections::BTreeSet<String>> = std::sync::OnceLock::new();
        Graph::new(self.params, EMPTY.get_or_init(Default::default)).with_lora_scale(self.lora_scale)
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<VisualTokens> {
        encode_image_for_llm(self.params, self.cfg, image)
    }

    pub fn forward(&self, visual: &VisualTokens, prompt: &TokenSequence, response: &TokenSequence) -> Result<HiddenStates> {
        self.forward_ids(visual, &text_ids(prompt, &response.ids))
    }

    pub fn forward_ids(&self, visual: &VisualTokens, text: &[usize]) -> Result<HiddenStates> {
        let mut g = self.graph();
        let v = g.tape.constant(visual.0.clone());
        let (hidden, logits) = forward_graph(&mut g, self.cfg, v, text)?;
        Ok(HiddenStates {
            hidden: g.tape.value(hidden).clone(),
            logits: g.tape.value(logits).clone(),
            n_visual: visual.len(),
        })
    }

    /// Greedy decoding after `[BOS] ∥ prompt`, stopping at EOS, after
    /// `max_new` tokens, or when the sequence budget is exhausted.
    pub fn generate(&self, visual: &VisualTokens, prompt: &TokenSequence, max_new: usize) -> Result<Generation> {
        if max_new < 4 {
            return Err(invalid!("max_new must be at least 4, got {max_new}"));
        }
        let mut text = text_ids(prompt, &[]);
        let response_start = text.len();
        let budget = self.cfg.max_seq.saturating_sub(visual.len());
        if budget <= response_start {
            return Err(Error::Capacity { len: visual.len() + response_start + 1, max: self.cfg.max_seq });
        }
        let mut states = self.forward_ids(visual, &text)?;
        for _ in 0..max_new {
            if text.len() >= budget {
                break;
            }
            let last = states.logits.row(states.logits.nrows() - 1);
            let next = argmax(last.iter().copied());
            text.push(next);
            states = self.forward_ids(visual, &text)?;
            if next == EOS {
                break;
            }
        }
        Ok(Generation {
            response: text[response_start..].to_vec(),
            response_start,
            states,
        })
    }

    pub fn project_query(&self, h_seg: &[f64]) -> Result<ReasoningQuery> {
        project_query(self.params, self.cfg, h_seg)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn extract_seg_embedding(states: &HiddenStates, at: SegLocation) -> Result<SegEmbedding> {
    let n_text = states.text_len();
    let (t, fallback) = match at {
        SegLocation::At(t) if t < n_text => (t, false),
        SegLocation::At(t) => return Err(invalid!("seg position {t} outside text of length {n_text}")),
        SegLocation::Fallback => (n_text - 1, true),
    };
    Ok(SegEmbedding {
        vector: states.hidden.row(states.n_visual + t).to_vec(),
        fallback,
    })
}

pub fn project_query(store: &ParamStore, cfg: &ReasonerConfig, h_seg: &[f64]) -> Result<ReasoningQuery> {
    if h_seg.len() != cfg.d_model {
        return Err(invalid!("query input has length {}, expected {}", h_seg.len(), cfg.d_model));
    }
    let x = Mat::from_shape_vec((1, h_seg.len()), h_seg.to_vec()).expect("row vector");
    let h = apply_linear(store, &format!("{CONVERTER}.fc1"), &x).mapv(crate::tape::gelu);
    let q = apply_linear(store, &format!("{CONVERTER}.fc2"), &h);
    Ok(ReasoningQuery(q.into_raw_vec_and_offset().0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Segment, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn setup() -> (ReasonerConfig, ParamStore, Vocabulary) {
        let cfg = ReasonerConfig {
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 48,
            query_dim: 8,
            ..ReasonerConfig::default()
        };
        let vocab = Vocabulary::build(["edit cat to dog"]).unwrap();
        let mut store = ParamStore::new();
        init_reasoner(&mut store, &cfg, vocab.len(), &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, store, vocab)
    }

    fn image(seed: u64) -> RgbImage {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        RgbImage(ndarray::Array3::from_shape_simple_fn((16, 16, 3), || r.random::<f64>()))
    }

    #[test]
    fn shapes_follow_inputs() {
        let (cfg, store, vocab) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(1)).unwrap();
        assert_eq!(vis.0.dim(), (4, 16));
        let prompt = vocab.encode("edit cat", Segment::Prompt);
        let resp = vocab.encode("to dog", Segment::Response);
        let hs = r.forward(&vis, &prompt, &resp).unwrap();
        assert_eq!(hs.logits.dim(), (5, vocab.len()));
        assert_eq!(hs.hidden.dim(), (9, 16));
        assert!(encode_image_for_llm(&store, &cfg, &RgbImage::zeros(12, 16)).is_err());
    }

    #[test]
    fn zero_image_gives_positions_plus_bias() {
        let (cfg, store, _) = setup();
        let vis = encode_image_for_llm(&store, &cfg, &RgbImage::zeros(16, 16)).unwrap();
        let expect = sincos_2d(2, 2, 16) + &store["llm.vis.proj.bias"];
        assert_eq!(vis.0, expect);
    }

    #[test]
    fn text_is_causal() {
        let (cfg, store, vocab) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(2)).unwrap();
        let a = r.forward_ids(&vis, &[BOS, 6, 7, 8, 9]).unwrap();
        let b = r.forward_ids(&vis, &[BOS, 6, 7, 10, 9]).unwrap();
        for t in 0..3 {
            assert_eq!(a.logits.row(t), b.logits.row(t));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
        assert!(vocab.len() > 10);
    }

    #[test]
    fn visual_token_order_does_not_matter() {
        let (cfg, store, _) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(4)).unwrap();
        let mut swapped = vis.clone();
        let row0 = vis.0.row(0).to_owned();
        swapped.0.row_mut(0).assign(&vis.0.row(3));
        swapped.0.row_mut(3).assign(&row0);
        let text = [BOS, 6, 7, 8];
        let a = r.forward_ids(&vis, &text).unwrap();
        let b = r.forward_ids(&swapped, &text).unwrap();
        let d = (&a.logits - &b.logits).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let (cfg, mut store, _) = setup();
        for (_, m) in store.iter_mut() {
            m.fill(0.0);
        }
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(5)).unwrap();
        let hs = r.forward_ids(&vis, &[BOS, 6, 7]).unwrap();
        assert!(hs.logits.iter().all(|&v| v == hs.logits[[0, 0]]));
    }

    #[test]
    fn deterministic_and_capacity_checked() {
        let (cfg, store, _) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(6)).unwrap();
        let a = r.forward_ids(&vis, &[BOS, 6, 7]).unwrap();
        let b = r.forward_ids(&vis, &[BOS, 6, 7]).unwrap();
        assert_eq!(a, b);
        let long = vec![6; 45];
        assert!(matches!(r.forward_ids(&vis, &long), Err(Error::Capacity { .. })));
    }

    #[test]
    fn generation_respects_budget() {
        let (cfg, store, vocab) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(7)).unwrap();
        let prompt = vocab.encode("edit cat", Segment::Prompt);
        let g = r.generate(&vis, &prompt, 4).unwrap();
        assert!(g.response.len() <= 4);
        assert_eq!(g.response_start, 3);
        assert_eq!(g.states.text_len(), 3 + g.response.len());
        assert!(r.generate(&vis, &prompt, 3).is_err());
    }

    #[test]
    fn seg_embedding_lookup_and_fallback() {
        let (cfg, store, _) = setup();
        let r = Reasoner { cfg: &cfg, params: &store, lora_scale: 4.0 };
        let vis = r.encode_image(&image(8)).unwrap();
        let hs = r.forward_ids(&vis, &[BOS, 6, 5, 2]).unwrap();
        let e = extract_seg_embedding(&hs, SegLocation::At(2)).unwrap();
        assert_eq!(e.vector, hs.hidden.row(4 + 2).to_vec());
        assert!(!e.fallback);
        let f = extract_seg_embedding(&hs, SegLocation::Fallback).unwrap();
        assert!(f.fallback);
        assert_eq!(f.vector, hs.hidden.row(7).to_vec());
        assert!(extract_seg_embedding(&hs, SegLocation::At(4)).is_err());
    }

    #[test]
    fn query_with_zero_second_layer_is_its_bias() {
        let (cfg, mut store, _) = setup();
        store.get_mut("mlp.fc2.weight").unwrap().fill(0.0);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        *store.get_mut("mlp.fc2.bias").unwrap() = Mat::from_shape_vec((1, 8), bias.clone()).unwrap();
        let q = project_query(&store, &cfg, &[0.0; 16]).unwrap();
        assert_eq!(q.0, bias);
        assert!(project_query(&store, &cfg, &[0.0; 15]).is_err());
    }

    #[test]
    fn graph_query_matches_eager() {
        let (cfg, store, _) = setup();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let eager = project_query(&store, &cfg, &x).unwrap();
        let none = BTreeSet::new();
        let mut g = Graph::new(&store, &none);
        let v = g.tape.constant(Mat::from_shape_vec((1, 16), x).unwrap());
        let q = project_query_graph(&mut g, v);
        for (a, b) in g.tape.value(q).iter().zip(&eager.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
