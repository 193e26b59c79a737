//! Pre-trainable drug–target (binary) and drug–drug (P / N / no-edge)
//! edge predictors built from attention blocks over single-token inputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Grads, Tape, Var};
use crate::entity::EntityKind;
use crate::graph::{EdgeType, HetGraph};
use crate::metrics;
use crate::nn::{Activation, Adam, AttentionBlock, Mlp, ParamSet, SeqLayout};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Class indices of the drug–drug predictor output.
pub const DDI_P: usize = 0;
pub const DDI_N: usize = 1;
pub const DDI_NONE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Dti,
    Ddi,
}

impl PredictorKind {
    pub fn out_dim(self) -> usize {
        match self {
            PredictorKind::Dti => 1,
            PredictorKind::Ddi => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input has dimension {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("wrong predictor kind: expected {0:?}")]
    WrongKind(PredictorKind),
    #[error("cannot draw {needed} negatives from a complement of {available} pairs")]
    InsufficientUniverse { needed: usize, available: usize },
    #[error("negative factor must be at least 1")]
    BadFactor,
    #[error("empty pair dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgePredictorConfig {
    pub kind: PredictorKind,
    /// Embedding width of the first input (always a drug).
    pub input_a: usize,
    /// Embedding width of the second input (protein for DTI, drug for DDI).
    pub input_b: usize,
    pub heads_a: usize,
    pub heads_b: usize,
    pub branch_blocks: usize,
    pub joint_blocks: usize,
    pub joint_heads: usize,
    pub head_hidden: Vec<usize>,
    /// Feed-forward width as a multiple of the block width.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Average DDI logits over both input orders.
    pub symmetric: bool,
}

impl EdgePredictorConfig {
    pub fn dti(drug_dim: usize, protein_dim: usize) -> Self {
        Self {
            kind: PredictorKind::Dti,
            input_a: drug_dim,
            input_b: protein_dim,
            heads_a: 8,
            heads_b: 8,
            branch_blocks: 1,
            joint_blocks: 2,
            joint_heads: 12,
            head_hidden: vec![2048, 256],
            ffn_mult: 2,
            dropout: 0.2,
            symmetric: false,
        }
    }

    pub fn ddi(drug_dim: usize) -> Self {
        Self {
            kind: PredictorKind::Ddi,
            input_b: drug_dim,
            symmetric: true,
            ..Self::dti(drug_dim, drug_dim)
        }
    }

    /// Small variant for tests and toy corpora.
    pub fn toy(kind: PredictorKind, input_a: usize, input_b: usize) -> Self {
        Self {
            kind,
            input_a,
            input_b,
            heads_a: 2,
            heads_b: 2,
            branch_blocks: 1,
            joint_blocks: 2,
            joint_heads: 2,
            head_hidden: vec![8, 4],
            ffn_mult: 2,
            dropout: 0.0,
            symmetric: kind == PredictorKind::Ddi,
        }
    }

    pub fn joint_width(&self) -> usize {
        self.input_a + self.input_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgePredictor {
    pub config: EdgePredictorConfig,
    pub params: ParamSet,
    branch_a: Vec<AttentionBlock>,
    branch_b: Vec<AttentionBlock>,
    joint: Vec<AttentionBlock>,
    head: Mlp,
}

fn stack(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    n: usize,
    width: usize,
    heads: usize,
    ffn_mult: usize,
) -> Vec<AttentionBlock> {
    (0..n)
        .map(|i| AttentionBlock::new(ps, rng, &format!("{name}.{i}"), width, heads, width * ffn_mult))
        .collect()
}

impl EdgePredictor {
    /// Builds a predictor with Glorot-initialised weights in parameter group
    /// `group`.
    pub fn new(config: EdgePredictorConfig, group: u16, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamSet::new(group);
        let c = &config;
        let branch_a = stack(&mut ps, rng, "enc_a", c.branch_blocks, c.input_a, c.heads_a, c.ffn_mult);
        let branch_b = stack(&mut ps, rng, "enc_b", c.branch_blocks, c.input_b, c.heads_b, c.ffn_mult);
        let joint = stack(&mut ps, rng, "joint", c.joint_blocks, c.joint_width(), c.joint_heads, c.ffn_mult);
        let mut widths = vec![c.joint_width()];
        widths.extend(&c.head_hidden);
        widths.push(c.kind.out_dim());
        let head = Mlp::new(&mut ps, rng, "head", &widths, Activation::Relu, c.dropout);
        Self {
            config,
            params: ps,
            branch_a,
            branch_b,
            joint,
            head,
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.config.kind
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<(), PredictorError> {
        for (x, expected) in [(a, self.config.input_a), (b, self.config.input_b)] {
            if x.len() != expected {
                return Err(PredictorError::DimMismatch {
                    got: x.len(),
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Raw output scores for a batch of pairs, one order only.
    fn logits_once(&self, tape: &mut Tape, a: Var, b: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let n = tape.value(a).rows();
        let layout = SeqLayout::uniform(n, 1);
        let ps = &self.params;
        let mut ha = a;
        for blk in &self.branch_a {
            ha = blk.forward(tape, ps, ha, &layout);
        }
        let mut hb = b;
        for blk in &self.branch_b {
            hb = blk.forward(tape, ps, hb, &layout);
        }
        let mut h = tape.concat_cols(&[ha, hb]);
        for blk in &self.joint {
            h = blk.forward(tape, ps, h, &layout);
        }
        self.head.forward(tape, ps, h, rng)
    }

    /// Batched logits (`n × out_dim`). DDI logits are averaged over both
    /// input orders when the config asks for symmetry.
    pub fn logits(&self, tape: &mut Tape, a: Var, b: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let fwd = self.logits_once(tape, a, b, rng.as_deref_mut());
        if self.config.kind == PredictorKind::Ddi && self.config.symmetric {
            let rev = self.logits_once(tape, b, a, rng);
            let sum = tape.add(fwd, rev);
            tape.scale(sum, 0.5)
        } else {
            fwd
        }
    }

    /// Batched probabilities: `n × 1` sigmoid scores for DTI, `n × 3`
    /// softmax rows for DDI.
    pub fn probabilities(&self, tape: &mut Tape, a: Var, b: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let z = self.logits(tape, a, b, rng);
        match self.config.kind {
            PredictorKind::Dti => tape.sigmoid(z),
            PredictorKind::Ddi => tape.softmax_rows(z),
        }
    }

    /// Inference on a batch of embedding pairs.
    pub fn predict_batch(&self, pairs: &[(&[f64], &[f64])]) -> Result<Tensor, PredictorError> {
        if pairs.is_empty() {
            return Ok(Tensor::zeros(0, self.config.kind.out_dim()));
        }
        for (a, b) in pairs {
            self.check(a, b)?;
        }
        let ta = Tensor::from_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), self.config.input_a);
        let tb = Tensor::from_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>(), self.config.input_b);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(ta), tape.constant(tb));
        let p = self.probabilities(&mut tape, a, b, None);
        Ok(tape.value(p).clone())
    }

    /// Binding-likelihood score in (0, 1).
    pub fn predict_dti(&self, drug: &[f64], protein: &[f64]) -> Result<f64, PredictorError> {
        if self.config.kind != PredictorKind::Dti {
            return Err(PredictorError::WrongKind(PredictorKind::Dti));
        }
        Ok(self.predict_batch(&[(drug, protein)])?.get(0, 0))
    }

    /// Probabilities over (P, N, no-edge).
    pub fn predict_ddi(&self, drug_a: &[f64], drug_b: &[f64]) -> Result<[f64; 3], PredictorError> {
        if self.config.kind != PredictorKind::Ddi {
            return Err(PredictorError::WrongKind(PredictorKind::Ddi));
        }
        let p = self.predict_batch(&[(drug_a, drug_b)])?;
        Ok([p.get(0, 0), p.get(0, 1), p.get(0, 2)])
    }

    /// Mean cross-entropy of a labelled batch: binary for DTI (label 0/1),
    /// three-class for DDI (label is the class index).
    pub fn loss(
        &self,
        tape: &mut Tape,
        a: Var,
        b: Var,
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let p = self.probabilities(tape, a, b, rng);
        cross_entropy(tape, p, labels)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let ck = PredictorCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| PredictorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, group: u16) -> Result<Self, PredictorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PredictorError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: PredictorCheckpoint =
            serde_json::from_str(&text).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck, group)
    }

    pub fn from_checkpoint(ck: PredictorCheckpoint, group: u16) -> Result<Self, PredictorError> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(PredictorError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        let mut p = Self::new(ck.config, group, &mut ChaCha8Rng::seed_from_u64(0));
        p.params.load_from(&ck.params).map_err(PredictorError::Checkpoint)?;
        Ok(p)
    }

    pub fn checkpoint(&self) -> PredictorCheckpoint {
        PredictorCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorCheckpoint {
    pub format_version: u32,
    pub config: EdgePredictorConfig,
    pub params: ParamSet,
}

/// Clamp bound applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mean cross-entropy of probability rows against class labels. A
/// single-column input is read as P(label = 1).
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Var {
    let (n, k) = tape.value(probs).shape();
    debug_assert_eq!(n, labels.len());
    let mut target = Tensor::zeros(n, k.max(2));
    for (i, &y) in labels.iter().enumerate() {
        target.set(i, y, 1.0);
    }
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let full = if k == 1 {
        let one_minus = tape.affine(p, -1.0, 1.0);
        tape.concat_cols(&[one_minus, p])
    } else {
        p
    };
    let lp = tape.ln(full);
    let t = tape.constant(target);
    let picked = tape.mul(lp, t);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / n as f64)
}

/// Uniform sample without replacement of `factor · |positives|` pairs from
/// `universe_a × universe_b` minus the positives. With `unordered`, pairs
/// are drawn from the unordered distinct pairs of `universe_a` and returned
/// as `(min, max)`.
pub fn sample_negatives(
    positives: &BTreeSet<(usize, usize)>,
    universe_a: &[usize],
    universe_b: &[usize],
    factor: usize,
    seed: u64,
    unordered: bool,
) -> Result<BTreeSet<(usize, usize)>, PredictorError> {
    if factor < 1 {
        return Err(PredictorError::BadFactor);
    }
    let a: Vec<usize> = universe_a.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let b: Vec<usize> = if unordered {
        a.clone()
    } else {
        universe_b.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    };
    let canon = |(u, v): (usize, usize)| if unordered { (u.min(v), u.max(v)) } else { (u, v) };
    let pos: BTreeSet<(usize, usize)> = positives.iter().map(|&p| canon(p)).collect();
    let (aset, bset): (BTreeSet<_>, BTreeSet<_>) = (a.iter().collect(), b.iter().collect());
    let inside = pos
        .iter()
        .filter(|(u, v)| aset.contains(u) && bset.contains(v) && !(unordered && u == v))
        .count();
    let total = if unordered {
        a.len() * a.len().saturating_sub(1) / 2
    } else {
        a.len() * b.len()
    };
    let available = total - inside;
    let needed = factor * pos.len();
    if needed > available {
        return Err(PredictorError::InsufficientUniverse { needed, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    if needed * 2 <= available {
        // rejection sampling: each accepted pair is uniform over what is left
        while out.len() < needed {
            let u = a[rng.random_range(0..a.len())];
            let v = b[rng.random_range(0..b.len())];
            if unordered && u == v {
                continue;
            }
            let p = canon((u, v));
            if !pos.contains(&p) {
                out.insert(p);
            }
        }
    } else {
        let mut complement = Vec::with_capacity(available);
        for (i, &u) in a.iter().enumerate() {
            let start = if unordered { i + 1 } else { 0 };
            for &v in &b[start..] {
                if !pos.contains(&(u, v)) {
                    complement.push((u, v));
                }
            }
        }
        complement.shuffle(&mut rng);
        out.extend(complement.into_iter().take(needed));
    }
    assert!(out.is_disjoint(&pos), "negative set intersects positives");
    Ok(out)
}

/// Anything that maps a node index to its raw embedding.
pub trait EmbeddingLookup {
    fn embedding(&self, i: usize) -> &[f64];
}

impl EmbeddingLookup for HetGraph {
    fn embedding(&self, i: usize) -> &[f64] {
        &self.node(i).features
    }
}

impl EmbeddingLookup for [Vec<f64>] {
    fn embedding(&self, i: usize) -> &[f64] {
        &self[i]
    }
}

impl EmbeddingLookup for Vec<Vec<f64>> {
    fn embedding(&self, i: usize) -> &[f64] {
        &self[i]
    }
}

/// Positive pairs (with class labels for DDI) plus sampled negatives.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDataset {
    pub kind: PredictorKind,
    /// `(a, b, label)`; label is 1 for DTI positives, [`DDI_P`] or
    /// [`DDI_N`] for DDI positives.
    pub positives: Vec<(usize, usize, usize)>,
    pub negatives: BTreeSet<(usize, usize)>,
    pub universe_a: Vec<usize>,
    pub universe_b: Vec<usize>,
    pub factor: usize,
    pub seed: u64,
}

impl PairDataset {
    pub fn new(
        kind: PredictorKind,
        positives: Vec<(usize, usize, usize)>,
        universe_a: Vec<usize>,
        universe_b: Vec<usize>,
        factor: usize,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        if positives.is_empty() {
            return Err(PredictorError::EmptyDataset);
        }
        let mut ds = Self {
            kind,
            positives,
            negatives: BTreeSet::new(),
            universe_a,
            universe_b,
            factor,
            seed,
        };
        ds.negatives = ds.draw_negatives(seed)?;
        Ok(ds)
    }

    /// DTI pairs or DDI_P / DDI_N pairs already stored in `g`, with
    /// negatives drawn from the drug × protein (or drug × drug) universe.
    pub fn from_graph(g: &HetGraph, kind: PredictorKind, factor: usize, seed: u64) -> Result<Self, PredictorError> {
        let drugs = g.nodes_of(EntityKind::Drug);
        let (positives, universe_b) = match kind {
            PredictorKind::Dti => (
                g.edges(EdgeType::Dti).map(|(d, p)| (d, p, 1)).collect::<Vec<_>>(),
                g.nodes_of(EntityKind::Protein),
            ),
            PredictorKind::Ddi => {
                let mut pos = Vec::new();
                for (t, class) in [(EdgeType::DdiP, DDI_P), (EdgeType::DdiN, DDI_N)] {
                    pos.extend(g.edges(t).filter(|(u, v)| u < v).map(|(u, v)| (u, v, class)));
                }
                (pos, drugs.clone())
            }
        };
        Self::new(kind, positives, drugs, universe_b, factor, seed)
    }

    fn positive_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.positives.iter().map(|&(a, b, _)| (a, b)).collect()
    }

    fn draw_negatives(&self, seed: u64) -> Result<BTreeSet<(usize, usize)>, PredictorError> {
        sample_negatives(
            &self.positive_pairs(),
            &self.universe_a,
            &self.universe_b,
            self.factor,
            seed,
            self.kind == PredictorKind::Ddi,
        )
    }

    /// Redraws the negative set with a derived seed.
    pub fn resample(&mut self, round: u64) -> Result<(), PredictorError> {
        self.negatives = self.draw_negatives(self.seed.wrapping_add(round.wrapping_mul(0x9E37_79B9)))?;
        Ok(())
    }

    pub fn negative_label(&self) -> usize {
        match self.kind {
            PredictorKind::Dti => 0,
            PredictorKind::Ddi => DDI_NONE,
        }
    }

    /// All labelled examples, positives first.
    pub fn examples(&self) -> Vec<(usize, usize, usize)> {
        let neg = self.negative_label();
        self.positives
            .iter()
            .copied()
            .chain(self.negatives.iter().map(|&(a, b)| (a, b, neg)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of examples held out for the reported AUROC.
    pub holdout: f64,
    pub resample_negatives: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            batch_size: 64,
            seed: 0,
            holdout: 0.2,
            resample_negatives: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub heldout_auroc: Option<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

/// Builds the `(a, b)` input tensors of a batch of examples.
pub fn batch_inputs<E: EmbeddingLookup + ?Sized>(
    emb: &E,
    batch: &[(usize, usize, usize)],
    cfg: &EdgePredictorConfig,
) -> Result<(Tensor, Tensor), PredictorError> {
    let mut a = Vec::with_capacity(batch.len());
    let mut b = Vec::with_capacity(batch.len());
    for &(u, v, _) in batch {
        let (eu, ev) = (emb.embedding(u), emb.embedding(v));
        for (x, expected) in [(eu, cfg.input_a), (ev, cfg.input_b)] {
            if x.len() != expected {
                return Err(PredictorError::DimMismatch {
                    got: x.len(),
                    expected,
                });
            }
        }
        a.push(eu);
        b.push(ev);
    }
    Ok((Tensor::from_rows(&a, cfg.input_a), Tensor::from_rows(&b, cfg.input_b)))
}

/// One loss + gradient evaluation on a labelled batch.
pub fn batch_loss<E: EmbeddingLookup + ?Sized>(
    p: &EdgePredictor,
    emb: &E,
    batch: &[(usize, usize, usize)],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Grads), PredictorError> {
    let (ta, tb) = batch_inputs(emb, batch, &p.config)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.2).collect();
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(ta), tape.constant(tb));
    let l = p.loss(&mut tape, a, b, &labels, rng);
    Ok((tape.scalar(l), tape.backward(l)))
}

/// Positive-class score used for ranking: the sigmoid for DTI,
/// `1 - P(no-edge)` for DDI.
pub fn edge_scores<E: EmbeddingLookup + ?Sized>(
    p: &EdgePredictor,
    emb: &E,
    pairs: &[(usize, usize, usize)],
) -> Result<Vec<f64>, PredictorError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (ta, tb) = batch_inputs(emb, pairs, &p.config)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(ta), tape.constant(tb));
    let probs = p.probabilities(&mut tape, a, b, None);
    let v = tape.value(probs);
    Ok((0..v.rows())
        .map(|i| match p.config.kind {
            PredictorKind::Dti => v.get(i, 0),
            PredictorKind::Ddi => 1.0 - v.get(i, DDI_NONE),
        })
        .collect())
}

/// Trains `p` on `data` with Adam, holding out a seeded fraction of the
/// examples for a final AUROC.
pub fn pretrain_predictor<E: EmbeddingLookup + ?Sized>(
    p: &mut EdgePredictor,
    data: &PairDataset,
    emb: &E,
    cfg: &PretrainConfig,
) -> Result<PretrainReport, PredictorError> {
    if data.positives.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if data.kind != p.kind() {
        return Err(PredictorError::WrongKind(p.kind()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = |examples: Vec<(usize, usize, usize)>, rng: &mut ChaCha8Rng| {
        let mut ex = examples;
        ex.shuffle(rng);
        let n_hold = ((ex.len() as f64) * cfg.holdout).round() as usize;
        let n_hold = n_hold.min(ex.len().saturating_sub(1));
        let train = ex.split_off(n_hold);
        (train, ex)
    };
    let mut data = data.clone();
    let (mut train, held) = split(data.examples(), &mut rng);
    let held_pairs: BTreeSet<(usize, usize)> = held.iter().map(|e| (e.0, e.1)).collect();
    let mut adam = Adam::new(cfg.lr, &p.params);
    let mut report = PretrainReport {
        heldout_examples: held.len(),
        train_examples: train.len(),
        ..Default::default()
    };
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        if cfg.resample_negatives && epoch > 0 {
            data.resample(epoch as u64)?;
            let neg = data.negative_label();
            train = data
                .positives
                .iter()
                .copied()
                .chain(data.negatives.iter().map(|&(a, b)| (a, b, neg)))
                .filter(|e| !held_pairs.contains(&(e.0, e.1)))
                .collect();
        }
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in train.chunks(bs).enumerate() {
            let (l, grads) = batch_loss(p, emb, batch, Some(&mut rng))?;
            if !l.is_finite() || !grads.is_finite() {
                return Err(PredictorError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    value: l,
                });
            }
            adam.step(&mut p.params, &grads);
            total += l * batch.len() as f64;
        }
        report.loss_curve.push(total / train.len().max(1) as f64);
    }
    if !held.is_empty() {
        let scores = edge_scores(p, emb, &held)?;
        let labels: Vec<bool> = held.iter().map(|e| e.2 != data.negative_label()).collect();
        report.heldout_auroc = metrics::au_roc(&scores, &labels).ok().flatten();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_parameters_give_uniform_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dti = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Dti, 4, 6), 1, &mut rng);
        dti.params.zero_all();
        let (a, b) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 6));
        assert_eq!(dti.predict_dti(&a, &b).unwrap(), 0.5);
        let mut ddi = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Ddi, 4, 4), 2, &mut rng);
        ddi.params.zero_all();
        let p = ddi.predict_ddi(&a, &a).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ranges_symmetry_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dti = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Dti, 4, 6), 1, &mut rng);
        let ddi = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Ddi, 4, 4), 2, &mut rng);
        for _ in 0..100 {
            let (a, b, c) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 6), rand_vec(&mut rng, 4));
            let s = dti.predict_dti(&a, &b).unwrap();
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(s.to_bits(), dti.predict_dti(&a, &b).unwrap().to_bits());
            let p = ddi.predict_ddi(&a, &c).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p, ddi.predict_ddi(&c, &a).unwrap());
        }
        assert!(matches!(
            dti.predict_dti(&[0.0; 3], &[0.0; 6]),
            Err(PredictorError::DimMismatch { got: 3, expected: 4 })
        ));
        assert!(matches!(dti.predict_ddi(&[0.0; 4], &[0.0; 6]), Err(PredictorError::WrongKind(_))));
    }

    #[test]
    fn forced_complement() {
        let pos: BTreeSet<_> = [(0, 10)].into_iter().collect();
        let n = sample_negatives(&pos, &[0, 1], &[10, 11], 3, 7, false).unwrap();
        let expected: BTreeSet<_> = [(0, 11), (1, 10), (1, 11)].into_iter().collect();
        assert_eq!(n, expected);
        assert_eq!(n, sample_negatives(&pos, &[0, 1], &[10, 11], 3, 7, false).unwrap());
    }

    #[test]
    fn insufficient_universe() {
        let pos: BTreeSet<_> = [(0, 0), (0, 1)].into_iter().collect();
        assert!(matches!(
            sample_negatives(&pos, &[0, 1], &[0, 1], 3, 0, false),
            Err(PredictorError::InsufficientUniverse { needed: 6, available: 2 })
        ));
        assert!(matches!(sample_negatives(&pos, &[0], &[0], 0, 0, false), Err(PredictorError::BadFactor)));
    }

    #[test]
    fn unordered_negatives_are_canonical() {
        let pos: BTreeSet<_> = [(1, 0)].into_iter().collect();
        let n = sample_negatives(&pos, &[0, 1, 2, 3], &[], 3, 5, true).unwrap();
        assert_eq!(n.len(), 3);
        for &(u, v) in &n {
            assert!(u < v);
            assert_ne!((u, v), (0, 1));
        }
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb: Vec<Vec<f64>> = (0..10).map(|_| rand_vec(&mut rng, 4)).collect();
        let mut p = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Dti, 4, 4), 1, &mut rng);
        let before = p.params.clone();
        let ds = PairDataset::new(PredictorKind::Dti, vec![(0, 5, 1), (1, 6, 1)], (0..5).collect(), (5..10).collect(), 3, 1)
            .unwrap();
        let rep = pretrain_predictor(&mut p, &ds, &emb, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(rep.loss_curve.is_empty());
        assert_eq!(p.params, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EdgePredictor::new(EdgePredictorConfig::toy(PredictorKind::Ddi, 4, 4), 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ddi.json");
        p.save(&path).unwrap();
        let q = EdgePredictor::load(&path, 2).unwrap();
        assert_eq!(p, q);
        let first = fs::read(&path).unwrap();
        q.save(&path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }
}
