//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every parameter leaf that was bound with
//! [`Tape::param`]. Constant leaves never receive gradients.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Identifies one trainable tensor: `group` names the owning parameter set,
/// `index` its slot inside that set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u16,
    pub index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Elu(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    NormalizeRows(Var, Rc<[f64]>),
    ConcatCols(Rc<[Var]>),
    ConcatRows(Rc<[Var]>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SparseCombine(Var, Rc<[(usize, usize, f64)]>),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Grads {
    by_param: BTreeMap<ParamKey, Tensor>,
}

impl Grads {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_param.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.by_param.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    param_of: HashMap<usize, ParamKey>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.get(0, 0)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable tensor. Binding the same key twice returns the
    /// original leaf so that gradients from every use accumulate.
    pub fn param(&mut self, key: ParamKey, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        self.param_of.insert(v.0, key);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.shape(), (1, ta.cols()), "add_row shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.shape(), (1, ta.cols()), "mul_row shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// Scales row `r` of `a` by `col[r]`, where `col` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let ta = self.value(a);
        let tc = self.value(col);
        assert_eq!(tc.shape(), (ta.rows(), 1), "mul_col shape mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let s = tc.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        let ng = self.ng(a);
        self.push(value, Op::Elu(a, alpha), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Ln(a), ng)
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` (population
    /// variance). The affine part of layer normalisation is left to callers.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols() as f64;
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            inv_std.push(s);
        }
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows(a, inv_std.into()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.into()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.into()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// `out[k] = a[idx[k]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(idx.len(), ta.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(ta.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// `out[idx[k]] += a[k]`, producing `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows(), idx.len(), "scatter index length mismatch");
        let mut out = Tensor::zeros(n, ta.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(ta.row(k)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterAddRows(a, idx), ng)
    }

    /// Weighted row combination: for each `(out_row, in_row, w)` entry,
    /// `out[out_row] += w * a[in_row]`.
    pub fn sparse_combine(
        &mut self,
        a: Var,
        entries: Rc<[(usize, usize, f64)]>,
        n_out: usize,
    ) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(n_out, ta.cols());
        for &(o, i, w) in entries.iter() {
            for (dst, &v) in out.row_mut(o).iter_mut().zip(ta.row(i)) {
                *dst += w * v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SparseCombine(a, entries), ng)
    }

    /// Row-wise inner products of two equally shaped matrices, as `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "row_dot shape mismatch");
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(ta.rows(), 1, data), Op::RowDot(a, b), ng)
    }

    /// Softmax of an `E x 1` score column within groups sharing the same
    /// `segment[e]` id.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), (segment.len(), 1), "segment_softmax expects E x 1");
        let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (e, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(ta.get(e, 0));
        }
        let mut denom = vec![0.0; n_seg];
        let mut out = Tensor::zeros(segment.len(), 1);
        for (e, &s) in segment.iter().enumerate() {
            let v = (ta.get(e, 0) - max[s]).exp();
            out.set(e, 0, v);
            denom[s] += v;
        }
        for (e, &s) in segment.iter().enumerate() {
            out.set(e, 0, out.get(e, 0) / denom[s]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentSoftmax(a, segment), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = Grads::default();
        for (&node, &key) in &self.param_of {
            if node > root.0 {
                continue;
            }
            let g = grads[node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[node].value.rows(), self.nodes[node].value.cols()));
            out.by_param.insert(key, g);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(a, row) => {
                let ta = self.value(*a);
                let tr = self.value(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, &s) in ga.row_mut(r).iter_mut().zip(tr.data()) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &av) in gr.data_mut().iter_mut().zip(g.row(r)).zip(ta.row(r)) {
                            *o += gv * av;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let ta = self.value(*a);
                let tc = self.value(*col);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = tc.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*col) {
                    let d = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::from_vec(g.rows(), 1, d));
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Elu(a, alpha) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((gv, &xv), &yv)| if xv > 0.0 { *gv } else { gv * (yv + alpha) })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > *lo && xv < *hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a, inv_std) => {
                let c = g.cols() as f64;
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c;
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let (h, w) = self.value(p).shape();
                    if self.ng(p) {
                        let gp = Tensor::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let mut ga = Tensor::zeros(idx.len(), g.cols());
                for (k, &i) in idx.iter().enumerate() {
                    ga.row_mut(k).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SparseCombine(a, entries) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for &(o, i, w) in entries.iter() {
                    for (dst, &v) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dst += w * v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = tb.clone();
                    for r in 0..ga.rows() {
                        let s = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = ta.clone();
                    for r in 0..gb.rows() {
                        let s = g.get(r, 0);
                        gb.row_mut(r).iter_mut().for_each(|o| *o *= s);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SegmentSoftmax(a, segment) => {
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for (e, &s) in segment.iter().enumerate() {
                    dot[s] += g.get(e, 0) * y.get(e, 0);
                }
                let d = segment
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y.get(e, 0) * (g.get(e, 0) - dot[s]))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(segment.len(), 1, d));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.get(0, 0)));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
