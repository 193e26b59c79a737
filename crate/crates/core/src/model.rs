//! The synergy model: per-kind projections, three graph-attention layers
//! (one on the ingested graph, two on the refined graph), predictor-driven
//! graph refinement and the synergy classification head.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::entity::{EntityKind, KindDims};
use crate::featurize::{CellLines, FeaturizeError};
use crate::graph::{EdgeSet, EdgeType, GraphError, HetGraph, MessageRoutes, RefinedGraph};
use crate::nn::{glorot, Activation, Mlp, ParamId, ParamSet};
use crate::predictor::{
    cross_entropy, EdgePredictor, EdgePredictorConfig, PredictorCheckpoint, PredictorError, PredictorKind, DDI_N,
    DDI_P,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Pairs scored per predictor call during refinement.
const REFINE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("node {0} is not a drug in the graph")]
    UnknownDrug(usize),
    #[error("cell line {0} is not registered")]
    UnknownCell(usize),
    #[error("drug pair ({0}, {0}) is not a combination")]
    SameDrug(usize),
    #[error("features have width {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// No predictor-driven refinement: `A* = A` throughout.
    NoPredictive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: KindDims,
    pub common_width: usize,
    /// Hidden widths of each per-kind projection MLP (empty: one linear map).
    pub projection_hidden: Vec<usize>,
    pub gat_heads: [usize; 3],
    pub negative_slope: f64,
    pub elu_alpha: f64,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub tau_dti: f64,
    pub tau_ddi: f64,
    /// Candidate partners per drug during refinement; `None` scores every
    /// drug–protein and drug–drug pair.
    pub candidate_k: Option<usize>,
    /// Average the head output over both drug orders.
    pub symmetric: bool,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(dims: KindDims) -> Self {
        Self {
            dims,
            common_width: 512,
            projection_hidden: Vec::new(),
            gat_heads: [4, 8, 12],
            negative_slope: 0.2,
            elu_alpha: 1.0,
            head_hidden: vec![3072, 768, 128],
            dropout: 0.2,
            tau_dti: 0.5,
            tau_ddi: 0.5,
            candidate_k: Some(50),
            symmetric: true,
            variant: Variant::Full,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let w = self.common_width;
        if w == 0 {
            return Err(ModelError::Config("common_width must be positive".into()));
        }
        for (i, &h) in self.gat_heads.iter().enumerate() {
            let concat = i < 2;
            if h == 0 || (concat && !w.is_multiple_of(h)) {
                return Err(ModelError::Config(format!(
                    "GAT layer {} has {h} heads, which must divide width {w}",
                    i + 1
                )));
            }
        }
        for (name, t) in [("tau_dti", self.tau_dti), ("tau_ddi", self.tau_ddi)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(ModelError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One MLP per entity kind, all ending at the common width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub drug: Mlp,
    pub protein: Mlp,
    pub disease: Mlp,
}

impl ProjectionSet {
    pub fn get(&self, kind: EntityKind) -> &Mlp {
        match kind {
            EntityKind::Drug => &self.drug,
            EntityKind::Protein => &self.protein,
            EntityKind::Disease => &self.disease,
        }
    }
}

/// Graph-attention layer with a shared linear map and per-head attention
/// vectors. Heads are concatenated, or averaged when `concat` is false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub weight: ParamId,
    pub attn_dst: Vec<ParamId>,
    pub attn_src: Vec<ParamId>,
    pub heads: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub concat: bool,
    pub negative_slope: f64,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_width: usize,
        out_width: usize,
        heads: usize,
        concat: bool,
        negative_slope: f64,
    ) -> Self {
        let per_head = if concat { out_width / heads } else { out_width };
        let weight = ps.add(format!("{name}.weight"), glorot(rng, in_width, heads * per_head));
        let attn_dst = (0..heads)
            .map(|h| ps.add(format!("{name}.attn_dst.{h}"), glorot(rng, per_head, 1)))
            .collect();
        let attn_src = (0..heads)
            .map(|h| ps.add(format!("{name}.attn_src.{h}"), glorot(rng, per_head, 1)))
            .collect();
        Self {
            weight,
            attn_dst,
            attn_src,
            heads,
            in_width,
            out_width,
            concat,
            negative_slope,
        }
    }

    pub fn per_head(&self) -> usize {
        if self.concat {
            self.out_width / self.heads
        } else {
            self.out_width
        }
    }

    /// Aggregated messages before the output nonlinearity, plus each head's
    /// attention weights (one per route).
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        x: Var,
        routes: &MessageRoutes,
    ) -> (Var, Vec<Var>) {
        let w = ps.bind(tape, self.weight);
        let z = tape.matmul(x, w);
        let ph = self.per_head();
        let mut outs = Vec::with_capacity(self.heads);
        let mut alphas = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let zh = if self.heads == 1 { z } else { tape.slice_cols(z, h * ph, ph) };
            let ad = ps.bind(tape, self.attn_dst[h]);
            let as_ = ps.bind(tape, self.attn_src[h]);
            let sd = tape.matmul(zh, ad);
            let ss = tape.matmul(zh, as_);
            let ed = tape.gather_rows(sd, routes.dst.clone());
            let es = tape.gather_rows(ss, routes.src.clone());
            let e = tape.add(ed, es);
            let e = tape.leaky_relu(e, self.negative_slope);
            let alpha = tape.segment_softmax(e, routes.dst.clone());
            let msg = tape.gather_rows(zh, routes.src.clone());
            let msg = tape.mul_col(msg, alpha);
            outs.push(tape.scatter_add_rows(msg, routes.dst.clone(), routes.nodes));
            alphas.push(alpha);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else if self.concat {
            tape.concat_cols(&outs)
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o);
            }
            tape.scale(acc, 1.0 / self.heads as f64)
        };
        (out, alphas)
    }
}

/// A labelled combination: two drug nodes, a cell-line index and
/// 1 for synergistic / 0 for antagonistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SynergyTriple {
    pub drug_a: usize,
    pub drug_b: usize,
    pub cell: usize,
    pub label: u8,
}

impl SynergyTriple {
    pub fn new(drug_a: usize, drug_b: usize, cell: usize, label: u8) -> Self {
        Self {
            drug_a,
            drug_b,
            cell,
            label,
        }
    }
}

/// Message routes for the one layer run on `A` and the two run on `A*`.
#[derive(Clone, Debug)]
pub struct Topology {
    pub base: MessageRoutes,
    pub refined: MessageRoutes,
    pub pseudo: EdgeSet,
}

impl Topology {
    pub fn pseudo_count(&self) -> usize {
        self.pseudo
            .iter()
            .map(|(t, s)| if t.is_symmetric() { s.len() / 2 } else { s.len() })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynergyModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub projections: ProjectionSet,
    pub layers: Vec<GatLayer>,
    pub head: Mlp,
    pub dti: EdgePredictor,
    pub ddi: EdgePredictor,
}

impl SynergyModel {
    /// Builds a model around two (typically pretrained) predictors.
    pub fn new(config: ModelConfig, dti: EdgePredictor, ddi: EdgePredictor) -> Result<Self, ModelError> {
        config.validate()?;
        if dti.kind() != PredictorKind::Dti || ddi.kind() != PredictorKind::Ddi {
            return Err(ModelError::Config("predictor kinds are swapped".into()));
        }
        let d = config.dims;
        if dti.config.input_a != d.drug || dti.config.input_b != d.protein || ddi.config.input_a != d.drug {
            return Err(ModelError::Config("predictor input widths do not match entity dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new(0);
        let w = config.common_width;
        let proj = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, kind: EntityKind| {
            let mut widths = vec![d.get(kind)];
            widths.extend(&config.projection_hidden);
            widths.push(w);
            Mlp::new(ps, rng, &format!("proj.{}", kind.as_str()), &widths, Activation::Relu, 0.0)
        };
        let projections = ProjectionSet {
            drug: proj(&mut ps, &mut rng, EntityKind::Drug),
            protein: proj(&mut ps, &mut rng, EntityKind::Protein),
            disease: proj(&mut ps, &mut rng, EntityKind::Disease),
        };
        let layers = (0..3)
            .map(|i| {
                GatLayer::new(
                    &mut ps,
                    &mut rng,
                    &format!("gat.{i}"),
                    w,
                    w,
                    config.gat_heads[i],
                    i < 2,
                    config.negative_slope,
                )
            })
            .collect();
        let mut widths = vec![3 * w];
        widths.extend(&config.head_hidden);
        widths.push(2);
        let head = Mlp::new(&mut ps, &mut rng, "head", &widths, Activation::Relu, config.dropout);
        Ok(Self {
            config,
            params: ps,
            projections,
            layers,
            head,
            dti,
            ddi,
        })
    }

    /// Model with freshly initialised predictors of the given configs.
    pub fn with_fresh_predictors(
        config: ModelConfig,
        dti: EdgePredictorConfig,
        ddi: EdgePredictorConfig,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
        let dti = EdgePredictor::new(dti, 1, &mut rng);
        let ddi = EdgePredictor::new(ddi, 2, &mut rng);
        Self::new(config, dti, ddi)
    }

    /// Node features projected to the common width, in node order.
    pub fn project(&self, tape: &mut Tape, g: &HetGraph) -> Result<Var, ModelError> {
        let mut parts = Vec::new();
        for kind in EntityKind::ALL {
            let nodes = g.nodes_of(kind);
            if nodes.is_empty() {
                continue;
            }
            let expected = self.config.dims.get(kind);
            if let Some(&bad) = nodes.iter().find(|&&i| g.node(i).features.len() != expected) {
                return Err(ModelError::DimMismatch {
                    got: g.node(bad).features.len(),
                    expected,
                });
            }
            let x = tape.constant(g.feature_matrix(&nodes));
            let y = self.projections.get(kind).forward(tape, &self.params, x, None);
            parts.push(tape.scatter_add_rows(y, nodes.into(), g.len()));
        }
        let mut acc = parts.first().copied().ok_or(ModelError::EmptyBatch)?;
        for &p in &parts[1..] {
            acc = tape.add(acc, p);
        }
        Ok(acc)
    }

    pub fn project_values(&self, g: &HetGraph) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let x = self.project(&mut tape, g)?;
        Ok(tape.value(x).clone())
    }

    /// One GAT layer followed by the inter-layer nonlinearity.
    pub fn gat_forward(&self, tape: &mut Tape, layer: usize, x: Var, routes: &MessageRoutes) -> Var {
        let (y, _) = self.layers[layer].forward_with_attention(tape, &self.params, x, routes);
        tape.elu(y, self.config.elu_alpha)
    }

    /// Default refinement candidates: for every drug, its `candidate_k`
    /// most cosine-similar proteins and drugs under the features `x`.
    /// Drug–protein pairs come out as `(drug, protein)`, drug–drug pairs as
    /// `(min, max)`.
    pub fn candidates(&self, g: &HetGraph, x: &Tensor) -> Vec<(usize, usize)> {
        let drugs = g.nodes_of(EntityKind::Drug);
        let proteins = g.nodes_of(EntityKind::Protein);
        let mut out = BTreeSet::new();
        let Some(k) = self.config.candidate_k else {
            for &d in &drugs {
                out.extend(proteins.iter().map(|&p| (d, p)));
                out.extend(drugs.iter().filter(|&&e| e != d).map(|&e| (d.min(e), d.max(e))));
            }
            return out.into_iter().collect();
        };
        let norms: Vec<f64> = (0..x.rows())
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let cos = |i: usize, j: usize| {
            let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            let n = norms[i] * norms[j];
            if n == 0.0 {
                0.0
            } else {
                dot / n
            }
        };
        let top = |d: usize, pool: &[usize]| {
            let mut scored: Vec<(f64, usize)> = pool.iter().filter(|&&j| j != d).map(|&j| (cos(d, j), j)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.truncate(k);
            scored.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
        };
        for &d in &drugs {
            out.extend(top(d, &proteins).into_iter().map(|p| (d, p)));
            out.extend(top(d, &drugs).into_iter().map(|e| (d.min(e), d.max(e))));
        }
        out.into_iter().collect()
    }

    /// Adds pseudo DTI / DDI edges on candidate pairs that carry no edge of
    /// that family yet. A drug–protein pair is admitted when the DTI score
    /// reaches `tau_dti`; a drug–drug pair gets a DDI_P or DDI_N edge when
    /// that class is the argmax and its probability reaches `tau_ddi`.
    /// Pairs of other kinds are ignored.
    pub fn refine_graph<'g>(
        &self,
        g: &'g HetGraph,
        candidates: &[(usize, usize)],
    ) -> Result<RefinedGraph<'g>, ModelError> {
        let mut dti_pairs = Vec::new();
        let mut ddi_pairs = BTreeSet::new();
        for &(u, v) in candidates {
            if u >= g.len() || v >= g.len() {
                return Err(GraphError::IndexOutOfRange(u.max(v)).into());
            }
            match (g.kind(u), g.kind(v)) {
                (EntityKind::Drug, EntityKind::Protein) | (EntityKind::Protein, EntityKind::Drug) => {
                    let (d, p) = if g.kind(u) == EntityKind::Drug { (u, v) } else { (v, u) };
                    if !g.has_edge(EdgeType::Dti, d, p) {
                        dti_pairs.push((d, p));
                    }
                }
                (EntityKind::Drug, EntityKind::Drug) if u != v => {
                    let linked = [EdgeType::DdiP, EdgeType::DdiN].iter().any(|&t| g.has_edge(t, u, v));
                    if !linked {
                        ddi_pairs.insert((u.min(v), u.max(v)));
                    }
                }
                _ => {}
            }
        }
        dti_pairs.sort_unstable();
        dti_pairs.dedup();
        let mut edges = Vec::new();
        for chunk in dti_pairs.chunks(REFINE_CHUNK) {
            let inputs: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&(d, p)| (g.node(d).features.as_slice(), g.node(p).features.as_slice()))
                .collect();
            let scores = self.dti.predict_batch(&inputs)?;
            for (r, &(d, p)) in chunk.iter().enumerate() {
                if scores.get(r, 0) >= self.config.tau_dti {
                    edges.push((EdgeType::Dti, d, p));
                }
            }
        }
        let ddi_pairs: Vec<(usize, usize)> = ddi_pairs.into_iter().collect();
        for chunk in ddi_pairs.chunks(REFINE_CHUNK) {
            let inputs: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&(a, b)| (g.node(a).features.as_slice(), g.node(b).features.as_slice()))
                .collect();
            let probs = self.ddi.predict_batch(&inputs)?;
            for (r, &(a, b)) in chunk.iter().enumerate() {
                let row = probs.row(r);
                let class = argmax(row);
                let t = match class {
                    DDI_P => EdgeType::DdiP,
                    DDI_N => EdgeType::DdiN,
                    _ => continue,
                };
                if row[class] >= self.config.tau_ddi {
                    edges.push((t, a, b));
                }
            }
        }
        Ok(RefinedGraph::new(g, edges)?)
    }

    /// Routes for the current parameters: refinement runs unless the
    /// variant disables it.
    pub fn topology(&self, g: &HetGraph) -> Result<Topology, ModelError> {
        let base = MessageRoutes::from_view(g);
        if self.config.variant == Variant::NoPredictive {
            return Ok(Topology {
                refined: base.clone(),
                base,
                pseudo: BTreeMap::new(),
            });
        }
        let x = self.project_values(g)?;
        let cands = self.candidates(g, &x);
        let refined = self.refine_graph(g, &cands)?;
        Ok(Self::topology_from(g, &refined))
    }

    pub fn topology_from(g: &HetGraph, refined: &RefinedGraph<'_>) -> Topology {
        Topology {
            base: MessageRoutes::from_view(g),
            refined: MessageRoutes::from_view(refined),
            pseudo: refined.pseudo().clone(),
        }
    }

    /// Final node states `X*`: one layer over `A`, two over `A*`.
    pub fn node_states(&self, tape: &mut Tape, g: &HetGraph, topo: &Topology) -> Result<Var, ModelError> {
        let x = self.project(tape, g)?;
        let x1 = self.gat_forward(tape, 0, x, &topo.base);
        let x2 = self.gat_forward(tape, 1, x1, &topo.refined);
        Ok(self.gat_forward(tape, 2, x2, &topo.refined))
    }

    fn check_triples(&self, g: &HetGraph, cells: &CellLines, triples: &[SynergyTriple]) -> Result<(), ModelError> {
        if triples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for t in triples {
            for d in [t.drug_a, t.drug_b] {
                if d >= g.len() || g.kind(d) != EntityKind::Drug {
                    return Err(ModelError::UnknownDrug(d));
                }
            }
            if t.drug_a == t.drug_b {
                return Err(ModelError::SameDrug(t.drug_a));
            }
            if t.cell >= cells.len() {
                return Err(ModelError::UnknownCell(t.cell));
            }
        }
        Ok(())
    }

    /// Cell-line vectors: expression-weighted sums of protein rows of `xs`.
    pub fn cell_vectors(&self, tape: &mut Tape, g: &HetGraph, cells: &CellLines, xs: Var) -> Result<Var, ModelError> {
        let mut entries = Vec::new();
        for (c, prof) in cells.profiles().iter().enumerate() {
            if prof.weights.is_empty() {
                return Err(FeaturizeError::EmptyProfile(prof.cell_id.clone()).into());
            }
            for &(p, w) in &prof.weights {
                if p >= g.len() || g.kind(p) != EntityKind::Protein {
                    return Err(FeaturizeError::MissingProtein(p).into());
                }
                entries.push((c, p, w));
            }
        }
        Ok(tape.sparse_combine(xs, entries.into(), cells.len()))
    }

    /// `n × 2` probabilities (antagonistic, synergistic) given node states.
    pub fn head_probabilities(
        &self,
        tape: &mut Tape,
        xs: Var,
        cell_vecs: Var,
        triples: &[SynergyTriple],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let ia: Rc<[usize]> = triples.iter().map(|t| t.drug_a).collect();
        let ib: Rc<[usize]> = triples.iter().map(|t| t.drug_b).collect();
        let ic: Rc<[usize]> = triples.iter().map(|t| t.cell).collect();
        let a = tape.gather_rows(xs, ia);
        let b = tape.gather_rows(xs, ib);
        let c = tape.gather_rows(cell_vecs, ic);
        let fwd_in = tape.concat_cols(&[a, b, c]);
        let fwd = self.head.forward(tape, &self.params, fwd_in, rng.as_deref_mut());
        let fwd = tape.softmax_rows(fwd);
        if !self.config.symmetric {
            return fwd;
        }
        let rev_in = tape.concat_cols(&[b, a, c]);
        let rev = self.head.forward(tape, &self.params, rev_in, rng);
        let rev = tape.softmax_rows(rev);
        let sum = tape.add(fwd, rev);
        tape.scale(sum, 0.5)
    }

    /// Probabilities for a batch under a fixed topology.
    pub fn probabilities(
        &self,
        tape: &mut Tape,
        g: &HetGraph,
        cells: &CellLines,
        topo: &Topology,
        triples: &[SynergyTriple],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.check_triples(g, cells, triples)?;
        let xs = self.node_states(tape, g, topo)?;
        let cv = self.cell_vectors(tape, g, cells, xs)?;
        Ok(self.head_probabilities(tape, xs, cv, triples, rng))
    }

    /// Mean two-class cross-entropy of a batch under a fixed topology.
    pub fn loss(
        &self,
        tape: &mut Tape,
        g: &HetGraph,
        cells: &CellLines,
        topo: &Topology,
        batch: &[SynergyTriple],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let p = self.probabilities(tape, g, cells, topo, batch, rng)?;
        let labels: Vec<usize> = batch.iter().map(|t| usize::from(t.label)).collect();
        Ok(cross_entropy(tape, p, &labels))
    }

    /// Predictions under a fixed topology, without dropout.
    pub fn predict_with(
        &self,
        g: &HetGraph,
        cells: &CellLines,
        topo: &Topology,
        triples: &[SynergyTriple],
    ) -> Result<Vec<[f64; 2]>, ModelError> {
        let mut tape = Tape::new();
        let p = self.probabilities(&mut tape, g, cells, topo, triples, None)?;
        let v = tape.value(p);
        Ok((0..v.rows()).map(|i| [v.get(i, 0), v.get(i, 1)]).collect())
    }

    /// Full forward pass: refine `g` with the current predictors, then
    /// score every triple.
    pub fn predict(
        &self,
        g: &HetGraph,
        cells: &CellLines,
        triples: &[SynergyTriple],
    ) -> Result<Vec<[f64; 2]>, ModelError> {
        let topo = self.topology(g)?;
        self.predict_with(g, cells, &topo, triples)
    }

    /// `(P(antagonistic), P(synergistic))` for one combination.
    pub fn forward_synergy(&self, g: &HetGraph, cells: &CellLines, triple: SynergyTriple) -> Result<[f64; 2], ModelError> {
        Ok(self.predict(g, cells, &[triple])?[0])
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
            dti: self.dti.checkpoint(),
            ddi: self.ddi.checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self, ModelError> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        let dti = EdgePredictor::from_checkpoint(ck.dti, 1)?;
        let ddi = EdgePredictor::from_checkpoint(ck.ddi, 2)?;
        let mut m = Self::new(ck.config, dti, ddi)?;
        m.params.load_from(&ck.params).map_err(ModelError::Checkpoint)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(&self.checkpoint()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }

    /// Total trainable scalars across the model and both predictors.
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count() + self.dti.params.scalar_count() + self.ddi.params.scalar_count()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamSet,
    pub dti: PredictorCheckpoint,
    pub ddi: PredictorCheckpoint,
}
