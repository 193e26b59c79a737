//! Cell-line embeddings composed from expression-weighted protein vectors,
//! and drug–drug similarity edges from fingerprints and embedding distance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EntityKind, Fingerprint};
use crate::graph::HetGraph;
use crate::tsv::{ParseError, Table};

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("protein {0} is missing from the embedding table")]
    MissingProtein(usize),
    #[error("expression profile `{0}` is empty")]
    EmptyProfile(String),
    #[error("fingerprint lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("`{0}` is not a known protein")]
    UnknownProtein(String),
    #[error("non-finite weight for `{0}`")]
    NonFiniteWeight(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Sparse expression weights of one cell line over protein node indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionProfile {
    pub cell_id: String,
    /// Sorted by protein index, no duplicates.
    pub weights: Vec<(usize, f64)>,
}

impl ExpressionProfile {
    pub fn new(cell_id: impl Into<String>, weights: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let map: BTreeMap<usize, f64> = weights.into_iter().collect();
        Self {
            cell_id: cell_id.into(),
            weights: map.into_iter().collect(),
        }
    }

    /// Rescales weights to unit L1 norm (no-op on an all-zero profile).
    pub fn l1_normalized(&self) -> Self {
        let norm: f64 = self.weights.iter().map(|(_, w)| w.abs()).sum();
        if norm == 0.0 {
            return self.clone();
        }
        Self {
            cell_id: self.cell_id.clone(),
            weights: self.weights.iter().map(|&(p, w)| (p, w / norm)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellLineEmbedding {
    pub cell_id: String,
    pub values: Vec<f64>,
}

/// `h = Σ_i w_i · E_i` over the profile's proteins.
pub fn compose_cell_embedding<'a, F>(
    profile: &ExpressionProfile,
    table: F,
) -> Result<CellLineEmbedding, FeaturizeError>
where
    F: Fn(usize) -> Option<&'a [f64]>,
{
    let Some(&(first, _)) = profile.weights.first() else {
        return Err(FeaturizeError::EmptyProfile(profile.cell_id.clone()));
    };
    let dim = table(first).ok_or(FeaturizeError::MissingProtein(first))?.len();
    let mut values = vec![0.0; dim];
    for &(p, w) in &profile.weights {
        let e = table(p).ok_or(FeaturizeError::MissingProtein(p))?;
        if e.len() != dim {
            return Err(FeaturizeError::DimMismatch(dim, e.len()));
        }
        for (h, &x) in values.iter_mut().zip(e) {
            *h += w * x;
        }
    }
    Ok(CellLineEmbedding {
        cell_id: profile.cell_id.clone(),
        values,
    })
}

/// `|a ∧ b| / |a ∨ b|`, defined as 0 for two blank fingerprints.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, FeaturizeError> {
    if a.len() != b.len() {
        return Err(FeaturizeError::LengthMismatch(a.len(), b.len()));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words().iter().zip(b.words()) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

/// Euclidean distance, or `1 - cosine similarity` for [`DistanceMetric::Cosine`].
pub fn embedding_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64, FeaturizeError> {
    if a.len() != b.len() {
        return Err(FeaturizeError::DimMismatch(a.len(), b.len()));
    }
    Ok(match metric {
        DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        DistanceMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub dist_threshold: f64,
    pub tanimoto_threshold: f64,
    pub metric: DistanceMetric,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            dist_threshold: 90.0,
            tanimoto_threshold: 0.62,
            metric: DistanceMetric::Euclidean,
        }
    }
}

/// A drug as seen by the similarity test.
#[derive(Clone, Copy, Debug)]
pub struct DrugFeatures<'a> {
    pub node: usize,
    pub embedding: &'a [f64],
    pub fingerprint: Option<&'a Fingerprint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub pairs_tested: usize,
    /// Pairs where at least one side lacked a fingerprint, so only the
    /// distance clause applied.
    pub pairs_without_fingerprint: usize,
}

/// Strict double-threshold rule: distance below the cutoff OR Tanimoto
/// above it.
pub fn is_similar(
    a: &DrugFeatures<'_>,
    b: &DrugFeatures<'_>,
    cfg: &SimilarityConfig,
) -> Result<(bool, bool), FeaturizeError> {
    let d = embedding_distance(a.embedding, b.embedding, cfg.metric)?;
    if d < cfg.dist_threshold {
        return Ok((true, a.fingerprint.is_some() && b.fingerprint.is_some()));
    }
    match (a.fingerprint, b.fingerprint) {
        (Some(fa), Some(fb)) => Ok((tanimoto(fa, fb)? > cfg.tanimoto_threshold, true)),
        _ => Ok((false, false)),
    }
}

/// Similar partners of one drug, fingerprint-less comparisons, comparisons made.
type RowHits = (Vec<(usize, usize)>, usize, usize);

/// All unordered similar pairs `(min, max)` of distinct drugs.
pub fn similarity_edges(
    drugs: &[DrugFeatures<'_>],
    cfg: &SimilarityConfig,
) -> Result<(BTreeSet<(usize, usize)>, SimilarityReport), FeaturizeError> {
    let rows: Vec<Result<RowHits, FeaturizeError>> = (0..drugs.len())
        .into_par_iter()
        .map(|i| {
            let mut found = Vec::new();
            let mut missing = 0;
            for j in i + 1..drugs.len() {
                let (a, b) = (&drugs[i], &drugs[j]);
                if a.node == b.node {
                    continue;
                }
                let (hit, had_fp) = is_similar(a, b, cfg)?;
                if !had_fp {
                    missing += 1;
                }
                if hit {
                    found.push((a.node.min(b.node), a.node.max(b.node)));
                }
            }
            Ok((found, drugs.len() - i - 1, missing))
        })
        .collect();
    let mut edges = BTreeSet::new();
    let mut report = SimilarityReport::default();
    for r in rows {
        let (found, tested, missing) = r?;
        edges.extend(found);
        report.pairs_tested += tested;
        report.pairs_without_fingerprint += missing;
    }
    Ok((edges, report))
}

/// Similar drugs among `pool` for a single query drug.
pub fn similar_to(
    query: &DrugFeatures<'_>,
    pool: &[DrugFeatures<'_>],
    cfg: &SimilarityConfig,
) -> Result<Vec<usize>, FeaturizeError> {
    let mut out = Vec::new();
    for d in pool {
        if d.node != query.node && is_similar(query, d, cfg)?.0 {
            out.push(d.node);
        }
    }
    Ok(out)
}

/// Every drug node of the graph in the form the similarity test consumes.
pub fn graph_drugs(g: &HetGraph) -> Vec<DrugFeatures<'_>> {
    g.nodes_of(EntityKind::Drug)
        .into_iter()
        .map(|i| DrugFeatures {
            node: i,
            embedding: &g.node(i).features,
            fingerprint: g.node(i).fingerprint.as_ref(),
        })
        .collect()
}

/// Cell-line profiles keyed by cell ID, in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct CellLines {
    profiles: Vec<ExpressionProfile>,
    index: HashMap<String, usize>,
}

impl CellLines {
    pub fn new(profiles: Vec<ExpressionProfile>) -> Self {
        let index = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| (p.cell_id.clone(), i))
            .collect();
        Self { profiles, index }
    }

    /// Reads an expression TSV (`cell_id protein_id weight`). Rows naming an
    /// excluded protein are dropped; repeated (cell, protein) rows keep the
    /// last weight.
    pub fn load(
        path: &Path,
        g: &HetGraph,
        excluded: &BTreeSet<String>,
        l1_normalize: bool,
    ) -> Result<Self, FeaturizeError> {
        let table = Table::read(path)?;
        table.expect_header(&["cell_id", "protein_id", "weight"])?;
        let mut order: Vec<String> = Vec::new();
        let mut maps: HashMap<String, BTreeMap<usize, f64>> = HashMap::new();
        for row in &table.rows {
            let protein = row.get(1);
            if excluded.contains(protein) {
                continue;
            }
            let p = g
                .resolve(protein)
                .filter(|&p| g.kind(p) == EntityKind::Protein)
                .ok_or_else(|| FeaturizeError::UnknownProtein(protein.to_string()))?;
            if g.node(p).id != protein && excluded.contains(&g.node(p).id) {
                continue;
            }
            let w: f64 = row
                .get(2)
                .parse()
                .map_err(|e| table.error(row, format!("bad weight: {e}")))?;
            if !w.is_finite() {
                return Err(FeaturizeError::NonFiniteWeight(protein.to_string()));
            }
            let cell = row.get(0).to_string();
            if !maps.contains_key(&cell) {
                order.push(cell.clone());
            }
            maps.entry(cell).or_default().insert(p, w);
        }
        let profiles = order
            .into_iter()
            .map(|c| {
                let p = ExpressionProfile::new(c.clone(), maps.remove(&c).unwrap_or_default());
                if l1_normalize {
                    p.l1_normalized()
                } else {
                    p
                }
            })
            .collect();
        Ok(Self::new(profiles))
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, i: usize) -> &ExpressionProfile {
        &self.profiles[i]
    }

    pub fn resolve(&self, cell_id: &str) -> Option<usize> {
        self.index.get(cell_id).copied()
    }

    pub fn profiles(&self) -> &[ExpressionProfile] {
        &self.profiles
    }
}
