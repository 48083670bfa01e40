//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! returns one gradient per node. Nodes that cannot reach a trainable leaf
//! are skipped during the backward sweep, so frozen sub-networks cost
//! nothing beyond their forward evaluation.
//!
//! Everything is row-major: a batch of `n` vectors of width `d` is an
//! `n × d` matrix, and linear layers store their weight as `out × in`
//! (`y = x·Wᵀ + b`).

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every row sees every column.
    Full,
    /// Row `i` sees column `j` when `j <= i`, or when both fall inside the
    /// leading bidirectional block of `prefix` positions.
    PrefixCausal { prefix: usize },
}

impl AttnMask {
    #[inline]
    pub fn allows(self, row: usize, col: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::PrefixCausal { prefix } => col <= row || (row < prefix && col < prefix),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Reshape(Var),
    BceWithLogits(Var, Rc<Mat>),
    SoftDice {
        z: Var,
        target: Rc<Mat>,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named leaf. Binding the same name twice returns the first handle.
    pub fn param(&mut self, name: &str, value: &Mat, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds the `1 × d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, d) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (1, d), "add_row: bias shape");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with per-column gain and bias (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, &a) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (a - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: AttnMask) -> Var {
        let av = self.value(a);
        let (n, m) = av.dim();
        let mut out = Mat::zeros((n, m));
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if mask.allows(i, j) {
                    mx = mx.max(av[[i, j]]);
                }
            }
            let mut sum = 0.0;
            for j in 0..m {
                if mask.allows(i, j) {
                    let e = (av[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
            }
            if sum > 0.0 {
                out.row_mut(i).mapv_inplace(|e| e / sum);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Embedding lookup: row `k` of the output is row `ids[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.ncols();
        let mut v = Mat::zeros((ids.len(), d));
        for (k, &id) in ids.iter().enumerate() {
            v.row_mut(k).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(v, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Column means, as a `1 × d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.nrows() as f64;
        let v = av.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape: element count");
        let data: Vec<f64> = av.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), data).expect("reshape");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Mean binary cross-entropy between `sigmoid(z)` and a {0,1} target.
    pub fn bce_with_logits(&mut self, z: Var, target: Rc<Mat>) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.dim(), target.dim(), "bce: shape mismatch");
        let n = zv.len() as f64;
        let mut total = 0.0;
        Zip::from(zv).and(&*target).for_each(|&z, &g| {
            total += softplus(z) - g * z;
        });
        let ng = self.ng(z);
        self.push(Mat::from_elem((1, 1), total / n), Op::BceWithLogits(z, target), ng)
    }

    /// `1 - (2Σpg + eps) / (Σp + Σg + eps)` with `p = sigmoid(z)`.
    pub fn soft_dice(&mut self, z: Var, target: Rc<Mat>, eps: f64) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.dim(), target.dim(), "dice: shape mismatch");
        let (num, den) = dice_sums(zv, &target, eps);
        let ng = self.ng(z);
        self.push(
            Mat::from_elem((1, 1), 1.0 - num / den),
            Op::SoftDice { z, target, eps },
            ng,
        )
    }

    /// Mean over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        assert!(!targets.is_empty(), "cross_entropy: no targets");
        let lv = self.value(logits);
        let mut probs = Mat::zeros((targets.len(), lv.ncols()));
        let mut total = 0.0;
        for (k, &(row, class)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let mx = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + r.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - r[class];
            for (p, &x) in probs.row_mut(k).iter_mut().zip(r.iter()) {
                *p = (x - lse).exp();
            }
        }
        let v = Mat::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `Σ wᵢ·aᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut v = Mat::zeros(self.value(terms[0].0).raw_dim());
        for &(t, w) in terms {
            v.scaled_add(w, self.value(t));
        }
        let ng = terms.iter().any(|&(t, _)| self.ng(t));
        self.push(v, Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::MatMulNT(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.dot(self.value(b)));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.t().dot(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRow(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(b) {
                    self.accumulate(grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            &Op::Scale(a, k) => self.accumulate(grads, a, g * k),
            &Op::Gelu(a) => {
                let mut d = self.value(a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*bias) {
                    self.accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gain) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, dg);
                }
                if self.ng(*x) {
                    let gv = self.value(*gain);
                    let dxhat = g * gv;
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let m1 = dh.sum() / d;
                        let m2 = dh.dot(&xh) / d;
                        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *o = inv_std[i] * (a - m1 - b * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = g * y;
                for i in 0..y.nrows() {
                    let s: f64 = dx.row(i).sum();
                    for (o, &p) in dx.row_mut(i).iter_mut().zip(y.row(i).iter()) {
                        *o -= p * s;
                    }
                }
                self.accumulate(grads, a, dx);
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.t().to_owned()),
            &Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.value(a).raw_dim());
                d.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                self.accumulate(grads, a, d);
            }
            &Op::SliceRows(a, start) => {
                let mut d = Mat::zeros(self.value(a).raw_dim());
                d.slice_mut(s![start..start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::GatherRows(table, ids) => {
                let mut d = Mat::zeros(self.value(*table).raw_dim());
                for (k, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(k);
                }
                self.accumulate(grads, *table, d);
            }
            &Op::MeanRows(a) => {
                let n = self.value(a).nrows();
                let row = g.row(0).to_owned() / n as f64;
                let d = row.broadcast((n, g.ncols())).expect("broadcast").to_owned();
                self.accumulate(grads, a, d);
            }
            &Op::Reshape(a) => {
                let dim = self.value(a).raw_dim();
                let data: Vec<f64> = g.iter().copied().collect();
                self.accumulate(grads, a, Mat::from_shape_vec(dim, data).expect("reshape"));
            }
            Op::BceWithLogits(z, target) => {
                let zv = self.value(*z);
                let k = g[[0, 0]] / zv.len() as f64;
                let mut d = Mat::zeros(zv.raw_dim());
                Zip::from(&mut d)
                    .and(zv)
                    .and(&**target)
                    .for_each(|o, &z, &t| *o = k * (sigmoid(z) - t));
                self.accumulate(grads, *z, d);
            }
            Op::SoftDice { z, target, eps } => {
                let zv = self.value(*z);
                let (num, den) = dice_sums(zv, target, *eps);
                // loss = 1 - num/den; dnum/dp = 2g, dden/dp = 1
                let k = g[[0, 0]];
                let mut d = Mat::zeros(zv.raw_dim());
                Zip::from(&mut d).and(zv).and(&**target).for_each(|o, &z, &t| {
                    let p = sigmoid(z);
                    let dl_dp = -(2.0 * t * den - num) / (den * den);
                    *o = k * dl_dp * p * (1.0 - p);
                });
                self.accumulate(grads, *z, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = g[[0, 0]] / targets.len() as f64;
                let mut d = Mat::zeros(self.value(*logits).raw_dim());
                for (idx, &(row, class)) in targets.iter().enumerate() {
                    let mut r = d.row_mut(row);
                    r.scaled_add(k, &probs.row(idx));
                    r[class] -= k;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    if self.ng(t) {
                        self.accumulate(grads, t, g * w);
                    }
                }
            }
        }
    }
}

fn dice_sums(z: &Mat, target: &Mat, eps: f64) -> (f64, f64) {
    let mut pg = 0.0;
    let mut ps = 0.0;
    let mut gs = 0.0;
    Zip::from(z).and(target).for_each(|&z, &t| {
        let p = sigmoid(z);
        pg += p * t;
        ps += p;
        gs += t;
    });
    (2.0 * pg + eps, ps + gs + eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a scalar function of one matrix.
    fn numeric(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: Mat) {
        let eval = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.param("x", m, true);
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.param("x", &x, true);
        let out = build(&mut t, v);
        let grads = t.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(x.raw_dim()));
        let num = numeric(&eval, &x);
        for (a, n) in analytic.iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn gelu_layer_norm_softmax_gradients() {
        check(&|t, x| {
            let y = t.gelu(x);
            let w = t.constant(array![[0.5, -1.0], [2.0, 0.3], [-0.7, 1.1]]);
            let z = t.matmul(y, w);
            let z = t.reshape(z, 1, 4);
            t.cross_entropy(z, &[(0, 2)])
        }, sample());
        check(&|t, x| {
            let g = t.constant(array![[1.2, 0.8, -0.5]]);
            let b = t.constant(array![[0.1, 0.0, 0.3]]);
            let y = t.layer_norm(x, g, b);
            let w = t.constant(array![[0.5], [-1.0], [2.0]]);
            let z = t.matmul(y, w);
            let z = t.transpose(z);
            t.cross_entropy(z, &[(0, 1)])
        }, sample());
        check(&|t, x| {
            let p = t.softmax(x, AttnMask::PrefixCausal { prefix: 1 });
            let w = t.constant(array![[0.5, -1.0, 2.0], [0.3, 0.2, -0.9]]);
            let q = t.mul(p, w);
            let q = t.mean_rows(q);
            let q = t.slice_cols(q, 1, 2);
            t.cross_entropy(q, &[(0, 0)])
        }, sample());
    }

    #[test]
    fn structural_ops_gradients() {
        check(&|t, x| {
            let a = t.slice_rows(x, 0, 1);
            let b = t.slice_rows(x, 1, 1);
            let c = t.concat_cols(&[a, b]);
            let d = t.concat_rows(&[c, c]);
            let e = t.gather_rows(x, &[1, 0, 1]);
            let f = t.matmul_nt(e, x);
            let f = t.reshape(f, 1, 6);
            let d = t.slice_cols(d, 0, 6);
            let d = t.slice_rows(d, 0, 1);
            let s = t.add(f, d);
            let s = t.scale(s, 0.3);
            let bias = t.constant(array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]]);
            let s = t.add_row(s, bias);
            t.cross_entropy(s, &[(0, 3)])
        }, sample());
    }

    #[test]
    fn segmentation_loss_gradients() {
        let target = Rc::new(array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        let t1 = target.clone();
        check(&move |t, x| t.bce_with_logits(x, t1.clone()), sample());
        let t2 = target.clone();
        check(&move |t, x| t.soft_dice(x, t2.clone(), 1.0), sample());
        check(&move |t, x| {
            let a = t.bce_with_logits(x, target.clone());
            let b = t.soft_dice(x, target.clone(), 1.0);
            t.weighted_sum(&[(a, 2.0), (b, 0.5)])
        }, sample());
    }

    #[test]
    fn masked_softmax_rows() {
        let mut t = Tape::new();
        let x = t.constant(Mat::zeros((4, 4)));
        let p = t.softmax(x, AttnMask::PrefixCausal { prefix: 2 });
        let p = t.value(p);
        assert_eq!(p.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(p.row(2).to_vec(), vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert!((p.row(3).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.param("w", &array![[1.0, 2.0]], false);
        let x = t.param("x", &array![[0.5, -0.5]], true);
        let y = t.mul(w, x);
        let y = t.cross_entropy(y, &[(0, 0)]);
        let g = t.backward(y);
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }
}
