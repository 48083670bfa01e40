//! Segmentation branch: a frozen patch encoder and a query-conditioned mask
//! decoder producing full-resolution logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage};
use crate::nn::{self, apply_linear, init_layer_norm, init_linear, layer_norm, linear, patchify, sincos_2d};
use crate::params::{normal_mat, Graph, ParamStore};
use crate::reasoner::ReasoningQuery;
use crate::tape::{gelu, sigmoid, AttnMask, Mat, Var};

pub const ENC_EMBED: &str = "seg.enc.embed";
pub const ENC_MIX: &str = "seg.enc.mix";
pub const LIFT: &str = "seg.dec.lift";
pub const NULL_TOKEN: &str = "seg.dec.null";
pub const OUT_BIAS: &str = "seg.dec.out_bias";
/// Query used when the decoder runs without the reasoner.
pub const LEARNED_QUERY: &str = "seg.learned_query";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub d_feat: usize,
    pub patch: usize,
    pub n_heads: usize,
    pub query_dim: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            d_feat: 64,
            patch: 8,
            n_heads: 4,
            query_dim: 32,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.n_heads == 0 || self.d_feat % self.n_heads != 0 || self.d_feat % 4 != 0 {
            return Err(Error::Config(format!(
                "d_feat {} must be a positive multiple of 4 and of n_heads {}",
                self.d_feat, self.n_heads
            )));
        }
        if self.patch == 0 || self.query_dim == 0 {
            return Err(Error::Config("seg sizes must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_seg(store: &mut ParamStore, cfg: &SegConfig, rng: &mut impl Rng) {
    let d = cfg.d_feat;
    init_linear(store, rng, ENC_EMBED, cfg.patch * cfg.patch * 3, d);
    // a nonzero bias keeps the GELU away from a purely linear regime
    *store.get_mut(&format!("{ENC_EMBED}.bias")).expect("just inserted") = normal_mat(rng, 1, d, 0.5);
    init_linear(store, rng, ENC_MIX, d, d);
    init_linear(store, rng, LIFT, cfg.query_dim, d);
    nn::init_attention(store, rng, "seg.dec.q2g", d, d, d);
    init_layer_norm(store, "seg.dec.ln1", d);
    nn::init_mlp(store, rng, "seg.dec.qmlp", d, 2 * d, d);
    init_layer_norm(store, "seg.dec.ln2", d);
    store.insert(NULL_TOKEN, normal_mat(rng, 1, d, 1.0));
    nn::init_attention(store, rng, "seg.dec.g2q", d, d, d);
    init_layer_norm(store, "seg.dec.ln3", d);
    nn::init_mlp(store, rng, "seg.dec.gmlp", d, 2 * d, d);
    init_layer_norm(store, "seg.dec.ln4", d);
    store.insert(OUT_BIAS, Mat::zeros((1, 1)));
    store.insert(LEARNED_QUERY, normal_mat(rng, 1, cfg.query_dim, 1.0));
}

/// Per-cell features in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub features: Mat,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl FeatureGrid {
    pub fn image_dims(&self) -> (usize, usize) {
        (self.rows * self.patch, self.cols * self.patch)
    }

    pub fn cell(&self, r: usize, c: usize) -> ndarray::ArrayView1<'_, f64> {
        self.features.row(r * self.cols + c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits(pub Mat);

pub fn encode_image_for_mask(store: &ParamStore, cfg: &SegConfig, image: &RgbImage) -> Result<FeatureGrid> {
    let (h, w) = (image.height(), image.width());
    if h % cfg.patch != 0 || w % cfg.patch != 0 || h == 0 || w == 0 {
        return Err(invalid!("image {h}x{w} is not divisible by patch {}", cfg.patch));
    }
    let patches = patchify(&image.0, cfg.patch);
    let expected = store[&format!("{ENC_EMBED}.weight")].ncols();
    if patches.ncols() != expected {
        return Err(invalid!("patch width {} does not match encoder {expected}", patches.ncols()));
    }
    let (rows, cols) = (h / cfg.patch, w / cfg.patch);
    let hidden = apply_linear(store, ENC_EMBED, &patches).mapv(gelu);
    let features = apply_linear(store, ENC_MIX, &hidden) + sincos_2d(rows, cols, cfg.d_feat);
    Ok(FeatureGrid {
        features,
        rows,
        cols,
        patch: cfg.patch,
    })
}

/// `(out × inp)` matrix doing 1-D bilinear resampling with half-pixel
/// centres and edge clamping.
pub fn upsample_matrix(out: usize, inp: usize) -> Mat {
    let mut m = Mat::zeros((out, inp));
    let ratio = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[[i, i0]] += 1.0 - t;
        m[[i, i1]] += t;
    }
    m
}

/// Decoder on the tape. `grid` is `(rows·cols) × d_feat`, `query` is
/// `1 × query_dim`; returns `(rows·patch) × (cols·patch)` logits.
pub fn decode_mask_graph(g: &mut Graph, cfg: &SegConfig, grid: Var, rows: usize, cols: usize, query: Var) -> Var {
    let q0 = linear(g, LIFT, query);
    let a = nn::attention(g, "seg.dec.q2g", q0, grid, cfg.n_heads, AttnMask::Full);
    let q = g.tape.add(q0, a);
    let q = layer_norm(g, "seg.dec.ln1", q);
    let m = nn::mlp(g, "seg.dec.qmlp", q);
    let q = g.tape.add(q, m);
    let q = layer_norm(g, "seg.dec.ln2", q);

    let null = g.p(NULL_TOKEN);
    let tokens = g.tape.concat_rows(&[q, null]);
    let a = nn::attention(g, "seg.dec.g2q", grid, tokens, cfg.n_heads, AttnMask::Full);
    let e = g.tape.add(grid, a);
    let e = layer_norm(g, "seg.dec.ln3", e);
    let m = nn::mlp(g, "seg.dec.gmlp", e);
    let e = g.tape.add(e, m);
    let e = layer_norm(g, "seg.dec.ln4", e);

    let cells = g.tape.matmul_nt(e, q);
    let cells = g.tape.scale(cells, 1.0 / (cfg.d_feat as f64).sqrt());
    let bias = g.p(OUT_BIAS);
    let cells = g.tape.add_row(cells, bias);
    let coarse = g.tape.reshape(cells, rows, cols);
    let uh = g.tape.constant(upsample_matrix(rows * cfg.patch, rows));
    let uw = g.tape.constant(upsample_matrix(cols * cfg.patch, cols));
    let tall = g.tape.matmul(uh, coarse);
    g.tape.matmul_nt(tall, uw)
}

pub fn decode_mask(
    store: &ParamStore,
    cfg: &SegConfig,
    grid: &FeatureGrid,
    query: &ReasoningQuery,
) -> Result<MaskLogits> {
    if query.0.len() != cfg.query_dim {
        return Err(invalid!("query has length {}, decoder expects {}", query.0.len(), cfg.query_dim));
    }
    if grid.features.ncols() != cfg.d_feat || grid.features.nrows() != grid.rows * grid.cols {
        return Err(invalid!("feature grid shape {:?} does not match decoder", grid.features.dim()));
    }
    let none = Default::default();
    let mut g = Graph::new(store, &none);
    let gv = g.tape.constant(grid.features.clone());
    let qv = g.tape.constant(Mat::from_shape_vec((1, cfg.query_dim), query.0.clone()).expect("row"));
    let out = decode_mask_graph(&mut g, cfg, gv, grid.rows, grid.cols, qv);
    Ok(MaskLogits(g.tape.value(out).clone()))
}

/// `1` where `sigmoid(logit) ≥ threshold`.
pub fn binarize(logits: &MaskLogits, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("threshold must lie in (0, 1), got {threshold}"));
    }
    Ok(BinaryMask(logits.0.mapv(|z| u8::from(sigmoid(z) >= threshold))))
}
