//! Trainable building blocks: parameter sets, dense layers, MLPs, layer
//! normalisation, multi-head self-attention blocks, and the Adam optimiser.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamKey, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors owned by one model part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    group: u16,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(group: u16) -> Self {
        Self {
            group,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn group(&self) -> u16 {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            group: self.group,
            index: id.0,
        }
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.key(id), &self.values[id.0])
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Copies values from `other` by name, requiring identical names and
    /// shapes in identical order.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ from the architecture".into());
        }
        for (i, (mine, theirs)) in self.values.iter().zip(&other.values).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    theirs.shape(),
                    mine.shape()
                ));
            }
        }
        self.values = other.values.clone();
        Ok(())
    }
}

/// Glorot-uniform initialisation.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Elu => tape.elu(x, 1.0),
            Activation::Identity => x,
        }
    }
}

/// Applies inverted dropout when a training RNG is supplied.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::from_vec(r, c, mask));
    tape.mul(x, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let w = ps.bind(tape, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = ps.bind(tape, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of dense layers with an activation (and optional dropout) after
/// every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        activation: Activation,
        dropout: f64,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self {
            layers,
            activation,
            dropout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        mut x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, ps, x);
            if i < last {
                x = self.activation.apply(tape, x);
                x = dropout(tape, x, self.dropout, rng.as_deref_mut());
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(1, width, 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(1, width)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Var {
        let n = tape.normalize_rows(x, self.eps);
        let g = ps.bind(tape, self.gamma);
        let b = ps.bind(tape, self.beta);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Token layout for self-attention: which token attends to which. Tokens
/// only attend within their own sequence.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub tokens: usize,
    pub query: Rc<[usize]>,
    pub key: Rc<[usize]>,
}

impl SeqLayout {
    /// `batch` sequences of `len` consecutive tokens each.
    pub fn uniform(batch: usize, len: usize) -> Self {
        let mut query = Vec::with_capacity(batch * len * len);
        let mut key = Vec::with_capacity(batch * len * len);
        for b in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    query.push(b * len + i);
                    key.push(b * len + j);
                }
            }
        }
        Self {
            tokens: batch * len,
            query: query.into(),
            key: key.into(),
        }
    }
}

/// Post-norm transformer block: multi-head self-attention and a two-layer
/// feed-forward network, each wrapped in a residual connection followed by
/// layer normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub width: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
}

impl AttentionBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_width: usize,
    ) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "heads must divide width");
        Self {
            width,
            heads,
            query: Linear::new(ps, rng, &format!("{name}.q"), width, width, true),
            key: Linear::new(ps, rng, &format!("{name}.k"), width, width, true),
            value: Linear::new(ps, rng, &format!("{name}.v"), width, width, true),
            output: Linear::new(ps, rng, &format!("{name}.o"), width, width, true),
            norm_attn: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            ffn_in: Linear::new(ps, rng, &format!("{name}.ffn1"), width, ffn_width, true),
            ffn_out: Linear::new(ps, rng, &format!("{name}.ffn2"), ffn_width, width, true),
            norm_ffn: LayerNorm::new(ps, &format!("{name}.ln2"), width),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var, layout: &SeqLayout) -> Var {
        let q = self.query.forward(tape, ps, x);
        let k = self.key.forward(tape, ps, x);
        let v = self.value.forward(tape, ps, x);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let qe = tape.gather_rows(qh, layout.query.clone());
            let ke = tape.gather_rows(kh, layout.key.clone());
            let scores = tape.row_dot(qe, ke);
            let scores = tape.scale(scores, scale);
            let alpha = tape.segment_softmax(scores, layout.query.clone());
            let ve = tape.gather_rows(vh, layout.key.clone());
            let msg = tape.mul_col(ve, alpha);
            heads.push(tape.scatter_add_rows(msg, layout.query.clone(), layout.tokens));
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn = self.output.forward(tape, ps, attn);
        let h = tape.add(x, attn);
        let h = self.norm_attn.forward(tape, ps, h);
        let f = self.ffn_in.forward(tape, ps, h);
        let f = tape.relu(f);
        let f = self.ffn_out.forward(tape, ps, f);
        let out = tape.add(h, f);
        self.norm_ffn.forward(tape, ps, out)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, ps: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = ps
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to `ps` from whichever of its parameters appear in
    /// `grads`; absent parameters are treated as having zero gradient.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let group = ps.group();
        for (i, value) in ps.tensors_mut().iter_mut().enumerate() {
            let key = ParamKey { group, index: i };
            let Some(g) = grads.get(key) else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &gv), mv), vv) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn loss_of(block: &AttentionBlock, ps: &ParamSet, x: &Tensor, layout: &SeqLayout) -> (f64, Grads) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, ps, xv, layout);
        let sq = tape.mul(y, y);
        let w = tape.constant(Tensor::from_vec(
            x.rows(),
            x.cols(),
            (0..x.len()).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        let z = tape.mul(sq, w);
        let l = tape.sum_all(z);
        (tape.scalar(l), tape.backward(l))
    }

    #[test]
    fn attention_block_gradients_over_multi_token_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new(0);
        let block = AttentionBlock::new(&mut ps, &mut rng, "blk", 4, 2, 6);
        let layout = SeqLayout::uniform(2, 3);
        let x = Tensor::from_vec(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, grads) = loss_of(&block, &ps, &x, &layout);
        let h = 1e-6;
        for (i, t) in ps.tensors().iter().enumerate() {
            let g = grads.get(ps.key(ParamId(i))).unwrap();
            for k in 0..t.len() {
                let mut plus = ps.clone();
                plus.tensors_mut()[i].data_mut()[k] += h;
                let mut minus = ps.clone();
                minus.tensors_mut()[i].data_mut()[k] -= h;
                let num = (loss_of(&block, &plus, &x, &layout).0 - loss_of(&block, &minus, &x, &layout).0) / (2.0 * h);
                let ana = g.data()[k];
                // key biases have an exactly zero gradient (softmax shift
                // invariance), so tiny absolute noise is accepted
                let diff = (num - ana).abs();
                let rel = diff / (num.abs() + ana.abs()).max(1e-7);
                assert!(rel < 1e-4 || diff < 1e-8, "{} [{k}]: {ana} vs {num}", ps.names()[i]);
            }
        }
    }

    #[test]
    fn single_token_attention_passes_value_projection() {
        // With one token per sequence the attention weight is exactly 1, so
        // query/key parameters receive no gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new(0);
        let block = AttentionBlock::new(&mut ps, &mut rng, "blk", 4, 2, 4);
        let layout = SeqLayout::uniform(3, 1);
        let x = Tensor::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, grads) = loss_of(&block, &ps, &x, &layout);
        let gq = grads.get(ps.key(block.query.weight)).unwrap();
        assert!(gq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut ps = ParamSet::new(0);
        let id = ps.add("w", Tensor::from_vec(1, 1, vec![1.0]));
        let mut adam = Adam::new(0.1, &ps);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let w = ps.bind(&mut tape, id);
            let sq = tape.mul(w, w);
            let g = tape.backward(sq);
            adam.step(&mut ps, &g);
        }
        assert!(ps.get(id).get(0, 0).abs() < 0.5);
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(2, 2, 3.0));
        let y = dropout(&mut tape, x, 0.5, None);
        assert_eq!(x, y);
    }
}
