//! Layer helpers shared by the reasoner and the mask decoder.
//!
//! A linear layer named `x` owns `x.weight` (out × in) and `x.bias` (1 × out).
//! When the store also holds `lora.x.a` and `lora.x.b`, the low-rank path is
//! added to the output.

use rand::Rng;

use crate::lora;
use crate::params::{normal_mat, Graph, ParamStore};
use crate::tape::{AttnMask, Mat, Var};

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{name}.weight"), normal_mat(rng, d_out, d_in, std));
    store.insert(format!("{name}.bias"), Mat::zeros((1, d_out)));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gain"), Mat::ones((1, d)));
    store.insert(format!("{name}.bias"), Mat::zeros((1, d)));
}

pub fn linear(g: &mut Graph, name: &str, x: Var) -> Var {
    let w = g.p(&format!("{name}.weight"));
    let b = g.p(&format!("{name}.bias"));
    let y = g.tape.matmul_nt(x, w);
    let y = g.tape.add_row(y, b);
    let (a_name, b_name) = lora::adapter_names(name);
    if !g.has(&a_name) {
        return y;
    }
    let a = g.p(&a_name);
    let bm = g.p(&b_name);
    let t = g.tape.matmul_nt(x, a);
    let u = g.tape.matmul_nt(t, bm);
    let u = g.tape.scale(u, g.lora_scale());
    g.tape.add(y, u)
}

pub fn layer_norm(g: &mut Graph, name: &str, x: Var) -> Var {
    let gain = g.p(&format!("{name}.gain"));
    let bias = g.p(&format!("{name}.bias"));
    g.tape.layer_norm(x, gain, bias)
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_q: usize, d_kv: usize, d: usize) {
    init_linear(store, rng, &format!("{name}.q"), d_q, d);
    init_linear(store, rng, &format!("{name}.k"), d_kv, d);
    init_linear(store, rng, &format!("{name}.v"), d_kv, d);
    init_linear(store, rng, &format!("{name}.o"), d, d_q);
}

/// Multi-head attention of `xq` rows over `xkv` rows.
pub fn attention(g: &mut Graph, name: &str, xq: Var, xkv: Var, n_heads: usize, mask: AttnMask) -> Var {
    let q = linear(g, &format!("{name}.q"), xq);
    let k = linear(g, &format!("{name}.k"), xkv);
    let v = linear(g, &format!("{name}.v"), xkv);
    let d = g.tape.value(q).ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.tape.slice_cols(q, h * dh, dh);
        let kh = g.tape.slice_cols(k, h * dh, dh);
        let vh = g.tape.slice_cols(v, h * dh, dh);
        let s = g.tape.matmul_nt(qh, kh);
        let s = g.tape.scale(s, scale);
        let p = g.tape.softmax(s, mask);
        heads.push(g.tape.matmul(p, vh));
    }
    let cat = if n_heads == 1 { heads[0] } else { g.tape.concat_cols(&heads) };
    linear(g, &format!("{name}.o"), cat)
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_hidden: usize, d_out: usize) {
    init_linear(store, rng, &format!("{name}.fc1"), d_in, d_hidden);
    init_linear(store, rng, &format!("{name}.fc2"), d_hidden, d_out);
}

pub fn mlp(g: &mut Graph, name: &str, x: Var) -> Var {
    let h = linear(g, &format!("{name}.fc1"), x);
    let h = g.tape.gelu(h);
    linear(g, &format!("{name}.fc2"), h)
}

/// Non-overlapping `patch × patch` tiles of an (H, W, 3) image, one row per
/// tile in raster order, each flattened as (y, x, channel).
pub fn patchify(image: &ndarray::Array3<f64>, patch: usize) -> Mat {
    let (h, w, c) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Mat::zeros((gh * gw, patch * patch * c));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = out.row_mut(py * gw + px);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        row[k] = image[[py * patch + y, px * patch + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Row-wise `x · Wᵀ + b` outside any tape.
pub fn apply_linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = &store[&format!("{name}.weight")];
    let b = &store[&format!("{name}.bias")];
    x.dot(&w.t()) + b
}

/// Two sine/cosine tables over rows and columns, each filling half the
/// channels; `d` must be divisible by 4.
pub fn sincos_2d(rows: usize, cols: usize, d: usize) -> Mat {
    let half = d / 2;
    let mut out = Mat::zeros((rows * cols, d));
    for r in 0..rows {
        for c in 0..cols {
            let mut e = out.row_mut(r * cols + c);
            for (pos, off) in [(r as f64, 0), (c as f64, half)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 100f64.powf(2.0 * i as f64 / half as f64);
                    e[off + 2 * i] = (pos * freq).sin();
                    e[off + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    out
}
