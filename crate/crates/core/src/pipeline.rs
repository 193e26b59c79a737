//! Orchestration: evaluation, k-fold cross-validation, confidence-filtered
//! self-training, and inference for drug pairs that may include drugs the
//! graph has never seen.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EntityKind, Fingerprint};
use crate::featurize::{self, CellLines, DrugFeatures, ExpressionProfile, FeaturizeError, SimilarityConfig};
use crate::graph::{EdgeType, GraphError, HetGraph};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{ModelError, SynergyModel, SynergyTriple};
use crate::train::{synergy_scores, train, AuxTasks, TrainConfig};

pub use crate::metrics::evaluate;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{n} samples cannot fill {folds} folds")]
    TooFewSamples { n: usize, folds: usize },
    #[error("need at least 2 folds, got {0}")]
    BadFolds(usize),
    #[error("drug `{0}` is not in the graph and has no embedding")]
    MissingEmbedding(String),
    #[error("`{0}` names a non-drug entity")]
    NotADrug(String),
    #[error("query embedding for `{id}` has {got} values, expected {expected}")]
    QueryDim { id: String, got: usize, expected: usize },
    #[error("expression profile references node {0}, which is not a protein")]
    UnknownProteinInProfile(usize),
    #[error("self-training needs a non-empty validation set")]
    NoValidation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
}

/// Scores and evaluates `model` on labelled triples.
pub fn evaluate_model(
    model: &SynergyModel,
    g: &HetGraph,
    cells: &CellLines,
    triples: &[SynergyTriple],
    threshold: f64,
) -> Result<MetricsReport, PipelineError> {
    let scores = synergy_scores(model, g, cells, triples)?;
    let labels: Vec<bool> = triples.iter().map(|t| t.label == 1).collect();
    Ok(metrics::evaluate(&scores, &labels, threshold)?)
}

/// Seeded fold index per sample: a shuffled order dealt round-robin, so
/// fold sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>, PipelineError> {
    if folds < 2 {
        return Err(PipelineError::BadFolds(folds));
    }
    if n < folds {
        return Err(PipelineError::TooFewSamples { n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    Ok(fold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub assignment: Vec<usize>,
}

/// k-fold cross-validation. `factory(fold)` supplies a fresh model for
/// each fold; it is trained on the other folds and evaluated on this one.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate<F>(
    mut factory: F,
    g: &HetGraph,
    cells: &CellLines,
    triples: &[SynergyTriple],
    aux: Option<&AuxTasks>,
    folds: usize,
    seed: u64,
    train_cfg: &TrainConfig,
    threshold: f64,
) -> Result<CvReport, PipelineError>
where
    F: FnMut(usize) -> Result<SynergyModel, ModelError>,
{
    let assignment = fold_assignment(triples.len(), folds, seed)?;
    let mut reports = Vec::with_capacity(folds);
    for k in 0..folds {
        let (test, rest): (Vec<_>, Vec<_>) = triples.iter().zip(&assignment).partition(|(_, &f)| f == k);
        let test: Vec<SynergyTriple> = test.into_iter().map(|(t, _)| *t).collect();
        let rest: Vec<SynergyTriple> = rest.into_iter().map(|(t, _)| *t).collect();
        let mut model = factory(k)?;
        let cfg = TrainConfig {
            seed: train_cfg.seed.wrapping_add(k as u64),
            ..train_cfg.clone()
        };
        train(&mut model, g, cells, &rest, aux, &cfg)?;
        reports.push(evaluate_model(&model, g, cells, &test, threshold)?);
    }
    let mean = MetricsReport::mean(&reports).expect("at least two folds");
    Ok(CvReport {
        folds: reports,
        mean,
        assignment,
    })
}

/// Source of unlabeled combinations scored during self-training.
pub trait CandidateSpace {
    /// Candidates for `round`, none of which may appear in `exclude`
    /// (unordered drug pair plus cell). Labels are ignored.
    fn candidates(&mut self, round: usize, exclude: &HashSet<(usize, usize, usize)>) -> Vec<SynergyTriple>;
}

/// A fixed list, filtered against the exclusion set.
#[derive(Clone, Debug)]
pub struct FixedCandidates(pub Vec<SynergyTriple>);

impl CandidateSpace for FixedCandidates {
    fn candidates(&mut self, _round: usize, exclude: &HashSet<(usize, usize, usize)>) -> Vec<SynergyTriple> {
        self.0.iter().filter(|t| !exclude.contains(&triple_key(t))).copied().collect()
    }
}

/// Seeded uniform draws of (drug, drug, cell) with a per-round budget.
#[derive(Clone, Debug)]
pub struct RandomCandidates {
    pub drugs: Vec<usize>,
    pub cells: usize,
    pub budget: usize,
    pub seed: u64,
}

impl CandidateSpace for RandomCandidates {
    fn candidates(&mut self, round: usize, exclude: &HashSet<(usize, usize, usize)>) -> Vec<SynergyTriple> {
        let n = self.drugs.len();
        if n < 2 || self.cells == 0 {
            return Vec::new();
        }
        let space = n * (n - 1) / 2 * self.cells;
        let free = space.saturating_sub(exclude.len());
        let want = self.budget.min(free);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(round as u64));
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(want);
        let mut attempts = 0usize;
        while out.len() < want && attempts < want.saturating_mul(50).max(1000) {
            attempts += 1;
            let a = self.drugs[rng.random_range(0..n)];
            let b = self.drugs[rng.random_range(0..n)];
            if a == b {
                continue;
            }
            let t = SynergyTriple::new(a, b, rng.random_range(0..self.cells), 0);
            let key = triple_key(&t);
            if !exclude.contains(&key) && seen.insert(key) {
                out.push(t);
            }
        }
        out
    }
}

/// Order-free identity of a combination.
pub fn triple_key(t: &SynergyTriple) -> (usize, usize, usize) {
    (t.drug_a.min(t.drug_b), t.drug_a.max(t.drug_b), t.cell)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub conf_threshold: f64,
    pub max_rounds: usize,
    pub min_gain: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.8,
            max_rounds: 5,
            min_gain: 0.002,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Pseudo { confidence: f64 },
}

/// `S ∪ U` with the origin of every triple.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub triples: Vec<SynergyTriple>,
    pub provenance: Vec<Provenance>,
}

impl LabeledSet {
    pub fn original(triples: &[SynergyTriple]) -> Self {
        Self {
            triples: triples.to_vec(),
            provenance: vec![Provenance::Original; triples.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub candidates: usize,
    pub admitted: usize,
    pub mean_confidence: Option<f64>,
    pub heldout_auroc: Option<f64>,
    /// Whether the retrained model became the new best.
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub model: SynergyModel,
    pub baseline_auroc: Option<f64>,
    pub rounds: Vec<RoundReport>,
    /// Training set of the returned model.
    pub labeled: LabeledSet,
}

/// Confidence-filtered self-training. Each round scores the candidates,
/// keeps those whose larger class probability exceeds the threshold
/// (labelled by argmax, capped at `|S|` by confidence), and retrains on
/// `S ∪ U` starting from the current parameters. The loop stops when no
/// pseudo label survives, the validation AUROC gains less than `min_gain`,
/// or `max_rounds` is reached; the best model by validation AUROC is
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn self_train(
    model: SynergyModel,
    g: &HetGraph,
    cells: &CellLines,
    s: &[SynergyTriple],
    validation: &[SynergyTriple],
    space: &mut dyn CandidateSpace,
    aux: Option<&AuxTasks>,
    cfg: &SelfTrainConfig,
) -> Result<SelfTrainOutcome, PipelineError> {
    if validation.is_empty() {
        return Err(PipelineError::NoValidation);
    }
    let auroc = |m: &SynergyModel| -> Result<Option<f64>, PipelineError> {
        Ok(evaluate_model(m, g, cells, validation, 0.5)?.au_roc)
    };
    let baseline = auroc(&model)?;
    let mut best = model.clone();
    let mut best_auc = baseline;
    let mut best_set = LabeledSet::original(s);
    let mut current = model;
    let mut exclude: HashSet<_> = s.iter().map(triple_key).collect();
    exclude.extend(validation.iter().map(triple_key));
    let mut rounds = Vec::new();

    for round in 1..=cfg.max_rounds {
        let cands = space.candidates(round, &exclude);
        let mut pseudo: Vec<(SynergyTriple, f64)> = Vec::new();
        if !cands.is_empty() {
            let probs = current.predict(g, cells, &cands)?;
            for (t, p) in cands.iter().zip(&probs) {
                let (label, conf) = if p[1] > p[0] { (1, p[1]) } else { (0, p[0]) };
                if conf > cfg.conf_threshold {
                    pseudo.push((SynergyTriple { label, ..*t }, conf));
                }
            }
            pseudo.sort_by(|a, b| b.1.total_cmp(&a.1));
            pseudo.truncate(s.len());
        }
        assert!(pseudo.len() <= s.len(), "pseudo set exceeds the labelled set");
        assert!(pseudo.iter().all(|&(_, c)| c > cfg.conf_threshold), "pseudo label below threshold");
        let mean_confidence =
            (!pseudo.is_empty()).then(|| pseudo.iter().map(|p| p.1).sum::<f64>() / pseudo.len() as f64);
        if pseudo.is_empty() {
            rounds.push(RoundReport {
                round,
                candidates: cands.len(),
                admitted: 0,
                mean_confidence,
                heldout_auroc: best_auc,
                accepted: false,
            });
            break;
        }
        let mut set = LabeledSet::original(s);
        for &(t, c) in &pseudo {
            set.triples.push(t);
            set.provenance.push(Provenance::Pseudo { confidence: c });
        }
        let tc = TrainConfig {
            seed: cfg.seed.wrapping_add(round as u64),
            ..cfg.train.clone()
        };
        train(&mut current, g, cells, &set.triples, aux, &tc)?;
        let auc = auroc(&current)?;
        let gain = match (auc, best_auc) {
            (Some(a), Some(b)) => a - b,
            _ => f64::NEG_INFINITY,
        };
        let accepted = gain >= cfg.min_gain;
        rounds.push(RoundReport {
            round,
            candidates: cands.len(),
            admitted: pseudo.len(),
            mean_confidence,
            heldout_auroc: auc,
            accepted,
        });
        if !accepted {
            break;
        }
        best = current.clone();
        best_auc = auc;
        best_set = set;
    }
    Ok(SelfTrainOutcome {
        model: best,
        baseline_auroc: baseline,
        rounds,
        labeled: best_set,
    })
}

/// A drug named in an inference request. Embedding and fingerprint are
/// only consulted when the graph does not know the ID.
#[derive(Clone, Debug, PartialEq)]
pub struct DrugQuery {
    pub id: String,
    pub embedding: Option<Vec<f64>>,
    pub fingerprint: Option<Fingerprint>,
}

impl DrugQuery {
    pub fn known(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            embedding: None,
            fingerprint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub probs: [f64; 2],
    /// Drugs inserted as temporary nodes.
    pub transient_nodes: Vec<String>,
    /// Every edge touching a temporary node: similarity edges from the
    /// membership step and pseudo edges from refinement.
    pub transient_edges: Vec<(String, String, String)>,
}

impl InferenceReport {
    pub fn provenance(&self) -> String {
        if self.transient_nodes.is_empty() {
            return "known".into();
        }
        format!(
            "transient:{}({} edges)",
            self.transient_nodes.join("+"),
            self.transient_edges.len()
        )
    }
}

/// Predicts one combination. Drugs missing from `g` are added to a private
/// copy of the graph together with their similarity edges; refinement then
/// may attach pseudo edges to them. `g` itself is never modified.
pub fn infer(
    model: &SynergyModel,
    g: &HetGraph,
    drug_a: &DrugQuery,
    drug_b: &DrugQuery,
    profile: &ExpressionProfile,
    sim: &SimilarityConfig,
) -> Result<InferenceReport, PipelineError> {
    for &(p, _) in &profile.weights {
        if p >= g.len() || g.kind(p) != EntityKind::Protein {
            return Err(PipelineError::UnknownProteinInProfile(p));
        }
    }
    let mut fresh = Vec::new();
    for q in [drug_a, drug_b] {
        match g.resolve(&q.id) {
            Some(i) if g.kind(i) == EntityKind::Drug => {}
            Some(_) => return Err(PipelineError::NotADrug(q.id.clone())),
            None => {
                if fresh.iter().any(|(id, _, _): &(String, _, _)| id == &q.id) {
                    continue;
                }
                let emb = q.embedding.clone().ok_or_else(|| PipelineError::MissingEmbedding(q.id.clone()))?;
                let expected = g.dims().drug;
                if emb.len() != expected || emb.iter().any(|v| !v.is_finite()) {
                    return Err(PipelineError::QueryDim {
                        id: q.id.clone(),
                        got: emb.len(),
                        expected,
                    });
                }
                fresh.push((q.id.clone(), emb, q.fingerprint.clone()));
            }
        }
    }
    let cells = CellLines::new(vec![profile.clone()]);
    if fresh.is_empty() {
        let a = g.resolve(&drug_a.id).expect("checked above");
        let b = g.resolve(&drug_b.id).expect("checked above");
        let probs = model.forward_synergy(g, &cells, SynergyTriple::new(a, b, 0, 0))?;
        return Ok(InferenceReport {
            probs,
            ..Default::default()
        });
    }

    let first_new = g.len();
    let mut g2 = g.with_transient_drugs(fresh);
    let mut report = InferenceReport::default();
    let pool = featurize::graph_drugs(&g2);
    let mut sim_edges = Vec::new();
    for i in first_new..g2.len() {
        let q = DrugFeatures {
            node: i,
            embedding: &g2.node(i).features,
            fingerprint: g2.node(i).fingerprint.as_ref(),
        };
        for j in featurize::similar_to(&q, &pool, sim)? {
            // pairs of two new drugs are found twice
            if j < i || j < first_new {
                sim_edges.push((i, j));
            }
        }
    }
    drop(pool);
    for &(i, j) in &sim_edges {
        g2.insert_edge(EdgeType::DrugSimilarity, i, j)?;
        report.transient_edges.push((
            EdgeType::DrugSimilarity.name().to_string(),
            g2.node(i).id.clone(),
            g2.node(j).id.clone(),
        ));
    }
    let topo = model.topology(&g2)?;
    for (t, set) in &topo.pseudo {
        for &(u, v) in set {
            if (u >= first_new || v >= first_new) && !(t.is_symmetric() && u > v) {
                report
                    .transient_edges
                    .push((t.name().to_string(), g2.node(u).id.clone(), g2.node(v).id.clone()));
            }
        }
    }
    report.transient_nodes = (first_new..g2.len()).map(|i| g2.node(i).id.clone()).collect();
    let a = g2.resolve(&drug_a.id).expect("inserted above");
    let b = g2.resolve(&drug_b.id).expect("inserted above");
    report.probs = model.predict_with(&g2, &cells, &topo, &[SynergyTriple::new(a, b, 0, 0)])?[0];
    Ok(report)
}
