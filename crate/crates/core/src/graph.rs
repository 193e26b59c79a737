//! Typed heterogeneous graph over drugs, proteins, and diseases.
//!
//! Node `i` of a graph built from a [`FrozenStore`] is entity `i` of that
//! store. Edges are kept per [`EdgeType`] in ordered sets so that every walk
//! over the graph is deterministic. Drug–drug, protein–protein and
//! disease–disease relations are stored in both directions; drug→protein,
//! protein→disease and drug→disease relations are stored once in that
//! canonical direction. Message passing ignores direction (see
//! [`MessageRoutes`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entity::{EntityKind, Fingerprint, FrozenStore, KindDims};
use crate::tensor::Tensor;
use crate::tsv::{ParseError, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    #[serde(rename = "DDI_P")]
    DdiP,
    #[serde(rename = "DDI_N")]
    DdiN,
    DrugSimilarity,
    #[serde(rename = "DTI")]
    Dti,
    DrugDiseaseIndication,
    DrugDiseaseContraindication,
    #[serde(rename = "PPI")]
    Ppi,
    ProteinDisease,
    DiseaseDisease,
}

impl EdgeType {
    pub const ALL: [EdgeType; 9] = [
        EdgeType::DdiP,
        EdgeType::DdiN,
        EdgeType::DrugSimilarity,
        EdgeType::Dti,
        EdgeType::DrugDiseaseIndication,
        EdgeType::DrugDiseaseContraindication,
        EdgeType::Ppi,
        EdgeType::ProteinDisease,
        EdgeType::DiseaseDisease,
    ];

    /// Types that refinement may add.
    pub const PSEUDO: [EdgeType; 3] = [EdgeType::Dti, EdgeType::DdiP, EdgeType::DdiN];

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::DdiP => "DDI_P",
            EdgeType::DdiN => "DDI_N",
            EdgeType::DrugSimilarity => "DrugSimilarity",
            EdgeType::Dti => "DTI",
            EdgeType::DrugDiseaseIndication => "DrugDiseaseIndication",
            EdgeType::DrugDiseaseContraindication => "DrugDiseaseContraindication",
            EdgeType::Ppi => "PPI",
            EdgeType::ProteinDisease => "ProteinDisease",
            EdgeType::DiseaseDisease => "DiseaseDisease",
        }
    }

    /// Permitted (source, target) kinds.
    pub fn endpoints(self) -> (EntityKind, EntityKind) {
        use EntityKind::*;
        match self {
            EdgeType::DdiP | EdgeType::DdiN | EdgeType::DrugSimilarity => (Drug, Drug),
            EdgeType::Dti => (Drug, Protein),
            EdgeType::DrugDiseaseIndication | EdgeType::DrugDiseaseContraindication => {
                (Drug, Disease)
            }
            EdgeType::Ppi => (Protein, Protein),
            EdgeType::ProteinDisease => (Protein, Disease),
            EdgeType::DiseaseDisease => (Disease, Disease),
        }
    }

    pub fn is_symmetric(self) -> bool {
        let (a, b) = self.endpoints();
        a == b
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EdgeType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown edge type `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("{edge} cannot connect a {src} to a {dst}")]
    KindMismatch {
        edge: EdgeType,
        src: EntityKind,
        dst: EntityKind,
    },
    #[error("{kind} `{id}` has no embedding")]
    MissingEmbedding { id: String, kind: EntityKind },
    #[error("self edge on `{0}`")]
    SelfEdge(String),
    #[error("node index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("{0} cannot be a pseudo edge type")]
    NotPseudoType(EdgeType),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: String,
    pub kind: EntityKind,
    pub features: Vec<f64>,
    pub fingerprint: Option<Fingerprint>,
    pub transient: bool,
}

pub type EdgeSet = BTreeMap<EdgeType, BTreeSet<(usize, usize)>>;

/// The ingested graph `G = (A, X)`.
#[derive(Clone, Debug)]
pub struct HetGraph {
    dims: KindDims,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    adjacency: EdgeSet,
}

impl HetGraph {
    /// Creates an edgeless graph holding every entity of the store. Every
    /// entity needs an embedding.
    pub fn from_store(store: &FrozenStore) -> Result<Self, GraphError> {
        let mut nodes = Vec::with_capacity(store.len());
        let mut index = HashMap::new();
        for (i, e) in store.entities().iter().enumerate() {
            let emb = store.embedding(i).ok_or_else(|| GraphError::MissingEmbedding {
                id: e.id.clone(),
                kind: e.kind,
            })?;
            nodes.push(Node {
                id: e.id.clone(),
                kind: e.kind,
                features: emb.values().to_vec(),
                fingerprint: store.fingerprint(i).cloned(),
                transient: false,
            });
            for key in store.keys_of(i) {
                index.insert(key.to_string(), i);
            }
        }
        Ok(Self {
            dims: store.dims(),
            nodes,
            index,
            adjacency: BTreeMap::new(),
        })
    }

    /// Graph from a store plus an edges TSV (`src dst type`).
    pub fn build(store: &FrozenStore, edges_path: &Path) -> Result<Self, GraphError> {
        let mut g = Self::from_store(store)?;
        g.load_edges(edges_path)?;
        Ok(g)
    }

    pub fn load_edges(&mut self, path: &Path) -> Result<usize, GraphError> {
        let table = Table::read(path)?;
        table.expect_header(&["src", "dst", "type"])?;
        for row in &table.rows {
            let t: EdgeType = row.get(2).parse().map_err(|e: String| table.error(row, e))?;
            let u = self
                .resolve(row.get(0))
                .ok_or_else(|| GraphError::UnknownEntity(row.get(0).to_string()))?;
            let v = self
                .resolve(row.get(1))
                .ok_or_else(|| GraphError::UnknownEntity(row.get(1).to_string()))?;
            self.insert_edge(t, u, v)?;
        }
        Ok(table.rows.len())
    }

    /// Adds an edge, flipping directed rows given in reverse orientation and
    /// storing both directions for symmetric types.
    pub fn insert_edge(&mut self, t: EdgeType, u: usize, v: usize) -> Result<(), GraphError> {
        let (u, v) = self.orient(t, u, v)?;
        let set = self.adjacency.entry(t).or_default();
        set.insert((u, v));
        if t.is_symmetric() {
            set.insert((v, u));
        }
        Ok(())
    }

    /// Validates kinds and returns the canonical orientation of `(u, v)`.
    pub fn orient(&self, t: EdgeType, u: usize, v: usize) -> Result<(usize, usize), GraphError> {
        let n = self.nodes.len();
        if u >= n {
            return Err(GraphError::IndexOutOfRange(u));
        }
        if v >= n {
            return Err(GraphError::IndexOutOfRange(v));
        }
        if u == v {
            return Err(GraphError::SelfEdge(self.nodes[u].id.clone()));
        }
        let (ku, kv) = (self.nodes[u].kind, self.nodes[v].kind);
        let (a, b) = t.endpoints();
        if (ku, kv) == (a, b) {
            Ok((u, v))
        } else if (kv, ku) == (a, b) {
            Ok((v, u))
        } else {
            Err(GraphError::KindMismatch {
                edge: t,
                src: ku,
                dst: kv,
            })
        }
    }

    pub fn dims(&self) -> KindDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn kind(&self, i: usize) -> EntityKind {
        self.nodes[i].kind
    }

    pub fn resolve(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn nodes_of(&self, kind: EntityKind) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == kind).collect()
    }

    /// Raw feature rows of `nodes` stacked into a matrix.
    pub fn feature_matrix(&self, nodes: &[usize]) -> Tensor {
        let width = nodes
            .first()
            .map_or(0, |&i| self.nodes[i].features.len());
        let rows: Vec<&[f64]> = nodes.iter().map(|&i| self.nodes[i].features.as_slice()).collect();
        Tensor::from_rows(&rows, width)
    }

    pub fn adjacency(&self) -> &EdgeSet {
        &self.adjacency
    }

    pub fn edges(&self, t: EdgeType) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency.get(&t).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, t: EdgeType, u: usize, v: usize) -> bool {
        self.adjacency.get(&t).is_some_and(|s| s.contains(&(u, v)))
    }

    /// Number of stored (directed) entries over all types.
    pub fn stored_edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum()
    }

    /// SHA-256 over node IDs and the full typed edge list.
    pub fn edge_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.id.as_bytes());
            h.update(b"\n");
        }
        for (t, set) in &self.adjacency {
            for (u, v) in set {
                h.update(format!("{}\t{u}\t{v}\n", t.name()).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copy of this graph with extra drug nodes appended (marked transient)
    /// and the given edges added. `self` is left untouched.
    pub fn with_transient_drugs(
        &self,
        drugs: Vec<(String, Vec<f64>, Option<Fingerprint>)>,
    ) -> HetGraph {
        let mut g = self.clone();
        for (id, features, fingerprint) in drugs {
            g.index.insert(id.clone(), g.nodes.len());
            g.nodes.push(Node {
                id,
                kind: EntityKind::Drug,
                features,
                fingerprint,
                transient: true,
            });
        }
        g
    }
}

/// Read access shared by [`HetGraph`] and [`RefinedGraph`].
pub trait GraphView {
    fn base(&self) -> &HetGraph;

    /// Every stored edge of the effective adjacency, in deterministic order.
    fn typed_edges(&self) -> Vec<(EdgeType, usize, usize)>;

    fn contains(&self, t: EdgeType, u: usize, v: usize) -> bool;

    fn num_nodes(&self) -> usize {
        self.base().len()
    }
}

impl GraphView for HetGraph {
    fn base(&self) -> &HetGraph {
        self
    }

    fn typed_edges(&self) -> Vec<(EdgeType, usize, usize)> {
        self.adjacency
            .iter()
            .flat_map(|(&t, s)| s.iter().map(move |&(u, v)| (t, u, v)))
            .collect()
    }

    fn contains(&self, t: EdgeType, u: usize, v: usize) -> bool {
        self.has_edge(t, u, v)
    }
}

/// Base graph plus pseudo DTI / DDI edges: the effective adjacency `A*`.
#[derive(Clone, Debug)]
pub struct RefinedGraph<'g> {
    base: &'g HetGraph,
    pseudo: EdgeSet,
}

impl<'g> RefinedGraph<'g> {
    /// An overlay without pseudo edges (`A* = A`).
    pub fn identity(base: &'g HetGraph) -> Self {
        Self {
            base,
            pseudo: BTreeMap::new(),
        }
    }

    /// Builds an overlay, orienting each pseudo edge canonically, storing
    /// DDI edges in both directions and dropping entries already in the base.
    pub fn new(
        base: &'g HetGraph,
        edges: impl IntoIterator<Item = (EdgeType, usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut pseudo: EdgeSet = BTreeMap::new();
        for (t, u, v) in edges {
            if !EdgeType::PSEUDO.contains(&t) {
                return Err(GraphError::NotPseudoType(t));
            }
            let (u, v) = base.orient(t, u, v)?;
            let set = pseudo.entry(t).or_default();
            let dirs: &[(usize, usize)] = if t.is_symmetric() { &[(u, v), (v, u)] } else { &[(u, v)] };
            for &(a, b) in dirs {
                if !base.has_edge(t, a, b) {
                    set.insert((a, b));
                }
            }
        }
        pseudo.retain(|_, s| !s.is_empty());
        Ok(Self { base, pseudo })
    }

    pub fn pseudo(&self) -> &EdgeSet {
        &self.pseudo
    }

    /// Pseudo edges counted once per unordered DDI pair.
    pub fn pseudo_count(&self) -> usize {
        self.pseudo
            .iter()
            .map(|(t, s)| if t.is_symmetric() { s.len() / 2 } else { s.len() })
            .sum()
    }

    pub fn into_pseudo(self) -> EdgeSet {
        self.pseudo
    }
}

impl GraphView for RefinedGraph<'_> {
    fn base(&self) -> &HetGraph {
        self.base
    }

    fn typed_edges(&self) -> Vec<(EdgeType, usize, usize)> {
        let mut out = self.base.typed_edges();
        for (&t, s) in &self.pseudo {
            out.extend(s.iter().map(|&(u, v)| (t, u, v)));
        }
        out.sort_unstable();
        out
    }

    fn contains(&self, t: EdgeType, u: usize, v: usize) -> bool {
        self.base.has_edge(t, u, v) || self.pseudo.get(&t).is_some_and(|s| s.contains(&(u, v)))
    }
}

/// Neighbours of `node` over the requested types (all types when `None`),
/// following edges in either direction.
pub fn neighbors<G: GraphView + ?Sized>(
    g: &G,
    node: usize,
    types: Option<&[EdgeType]>,
) -> Result<BTreeSet<(usize, EdgeType)>, GraphError> {
    if node >= g.num_nodes() {
        return Err(GraphError::IndexOutOfRange(node));
    }
    let mut out = BTreeSet::new();
    for (t, u, v) in g.typed_edges() {
        if types.is_some_and(|ts| !ts.contains(&t)) {
            continue;
        }
        if u == node {
            out.insert((v, t));
        } else if v == node {
            out.insert((u, t));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DegreeStats {
    pub edge_count: usize,
    pub mean_degree: f64,
    pub max_degree: usize,
}

/// Per-type edge counts (undirected count for symmetric types) and degree
/// statistics over the nodes whose kind can carry that type.
pub fn degree_stats(g: &HetGraph) -> BTreeMap<EdgeType, DegreeStats> {
    let mut out = BTreeMap::new();
    for t in EdgeType::ALL {
        let mut degree = vec![0usize; g.len()];
        let mut stored = 0;
        for (u, v) in g.edges(t) {
            stored += 1;
            degree[u] += 1;
            if !t.is_symmetric() {
                degree[v] += 1;
            }
        }
        let (a, b) = t.endpoints();
        let eligible: Vec<usize> = (0..g.len())
            .filter(|&i| g.kind(i) == a || g.kind(i) == b)
            .collect();
        let total: usize = eligible.iter().map(|&i| degree[i]).sum();
        out.insert(
            t,
            DegreeStats {
                edge_count: if t.is_symmetric() { stored / 2 } else { stored },
                mean_degree: if eligible.is_empty() {
                    0.0
                } else {
                    total as f64 / eligible.len() as f64
                },
                max_degree: degree.iter().copied().max().unwrap_or(0),
            },
        );
    }
    out
}

/// Homogeneous message-passing neighbourhoods: for each node `i`, the
/// sorted set `N(i) ∪ {i}` where `N(i)` collects endpoints of every edge
/// touching `i`, regardless of type or direction.
#[derive(Clone, Debug)]
pub struct MessageRoutes {
    pub nodes: usize,
    /// Receiving node of each route.
    pub dst: Rc<[usize]>,
    /// Sending node of each route.
    pub src: Rc<[usize]>,
}

impl MessageRoutes {
    pub fn from_view<G: GraphView + ?Sized>(g: &G) -> Self {
        let n = g.num_nodes();
        let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for (_, u, v) in g.typed_edges() {
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let mut dst = Vec::new();
        let mut src = Vec::new();
        for (i, s) in sets.iter().enumerate() {
            for &j in s {
                dst.push(i);
                src.push(j);
            }
        }
        Self {
            nodes: n,
            dst: dst.into(),
            src: src.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::entity::{Embedding, EntityStore};
    use std::collections::BTreeSet as Set;

    pub(crate) fn toy(drugs: usize, proteins: usize, diseases: usize) -> HetGraph {
        let mut s = EntityStore::new(KindDims::uniform(2));
        for (kind, n, p) in [
            (EntityKind::Drug, drugs, "d"),
            (EntityKind::Protein, proteins, "p"),
            (EntityKind::Disease, diseases, "s"),
        ] {
            for i in 0..n {
                let r = s.register_entity(kind, &format!("{p}{i}"), &Set::new(), None).unwrap();
                s.attach_embedding(r, Embedding::new(vec![i as f64, 1.0]).unwrap()).unwrap();
            }
        }
        HetGraph::from_store(&s.freeze()).unwrap()
    }

    #[test]
    fn empty_edges() {
        let g = toy(1, 1, 1);
        assert_eq!(g.len(), 3);
        assert_eq!(g.stored_edge_count(), 0);
        assert!(degree_stats(&g).values().all(|s| *s == DegreeStats::default()));
    }

    #[test]
    fn symmetric_closure_and_orientation() {
        let mut g = toy(1, 2, 1);
        g.insert_edge(EdgeType::Ppi, 1, 2).unwrap();
        assert!(g.has_edge(EdgeType::Ppi, 1, 2) && g.has_edge(EdgeType::Ppi, 2, 1));
        g.insert_edge(EdgeType::Dti, 1, 0).unwrap();
        assert!(g.has_edge(EdgeType::Dti, 0, 1));
        assert!(!g.has_edge(EdgeType::Dti, 1, 0));
    }

    #[test]
    fn dti_with_disease_endpoint_is_kind_mismatch() {
        let mut g = toy(1, 1, 1);
        assert!(matches!(
            g.insert_edge(EdgeType::Dti, 0, 2),
            Err(GraphError::KindMismatch { .. })
        ));
        assert!(matches!(g.insert_edge(EdgeType::DdiP, 0, 0), Err(GraphError::SelfEdge(_))));
    }

    #[test]
    fn neighbor_filtering() {
        let mut g = toy(2, 2, 0);
        assert!(neighbors(&g, 0, None).unwrap().is_empty());
        g.insert_edge(EdgeType::Dti, 0, 2).unwrap();
        g.insert_edge(EdgeType::Dti, 0, 3).unwrap();
        g.insert_edge(EdgeType::DdiP, 0, 1).unwrap();
        assert_eq!(neighbors(&g, 0, Some(&[EdgeType::Dti])).unwrap().len(), 2);
        assert_eq!(neighbors(&g, 0, None).unwrap().len(), 3);
        assert!(matches!(neighbors(&g, 9, None), Err(GraphError::IndexOutOfRange(9))));
    }

    #[test]
    fn refined_overlay_unions_pseudo_edges() {
        let mut g = toy(1, 2, 0);
        g.insert_edge(EdgeType::Dti, 0, 1).unwrap();
        let r = RefinedGraph::new(&g, [(EdgeType::Dti, 0, 2), (EdgeType::Dti, 0, 1)]).unwrap();
        assert_eq!(r.pseudo_count(), 1);
        assert_eq!(neighbors(&r, 0, Some(&[EdgeType::Dti])).unwrap().len(), 2);
        assert!(matches!(
            RefinedGraph::new(&g, [(EdgeType::Ppi, 1, 2)]),
            Err(GraphError::NotPseudoType(EdgeType::Ppi))
        ));
    }

    #[test]
    fn triangle_degree_stats() {
        let mut g = toy(0, 0, 3);
        g.insert_edge(EdgeType::DiseaseDisease, 0, 1).unwrap();
        g.insert_edge(EdgeType::DiseaseDisease, 1, 2).unwrap();
        g.insert_edge(EdgeType::DiseaseDisease, 2, 0).unwrap();
        let s = degree_stats(&g)[&EdgeType::DiseaseDisease];
        assert_eq!(s.edge_count, 3);
        assert_eq!(s.mean_degree, 2.0);
        assert_eq!(s.max_degree, 2);
    }

    #[test]
    fn routes_include_self_and_both_directions() {
        let mut g = toy(1, 1, 1);
        g.insert_edge(EdgeType::Dti, 0, 1).unwrap();
        let r = MessageRoutes::from_view(&g);
        let pairs: Vec<(usize, usize)> = r.dst.iter().copied().zip(r.src.iter().copied()).collect();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn transient_copy_leaves_original_alone() {
        let g = toy(1, 1, 0);
        let h = g.edge_hash();
        let g2 = g.with_transient_drugs(vec![("new".into(), vec![0.0, 0.0], None)]);
        assert_eq!(g2.len(), 3);
        assert!(g2.node(2).transient);
        assert_eq!(g.len(), 2);
        assert_eq!(g.edge_hash(), h);
    }

    #[test]
    fn edge_type_names_roundtrip() {
        for t in EdgeType::ALL {
            assert_eq!(t.name().parse::<EdgeType>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }
}
