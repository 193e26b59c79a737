//! Seeded synthetic corpora with a planted, linearly recoverable synergy
//! rule. Used by tests, demos and the CLI smoke runs.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entity::{Embedding, EntityKind, EntityStore, Fingerprint, KindDims};
use crate::featurize::{CellLines, ExpressionProfile};
use crate::graph::{EdgeType, HetGraph};
use crate::model::SynergyTriple;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub drugs: usize,
    pub proteins: usize,
    pub diseases: usize,
    pub cells: usize,
    pub triples: usize,
    /// Extra labelled triples kept apart (candidate pools, held-out sets).
    pub reserve: usize,
    pub dims: KindDims,
    pub proteins_per_cell: usize,
    pub fingerprint_len: usize,
    /// Minimum |planted score| for a triple to be labelled.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            drugs: 30,
            proteins: 40,
            diseases: 5,
            cells: 6,
            triples: 200,
            reserve: 200,
            dims: KindDims {
                drug: 8,
                protein: 6,
                disease: 4,
            },
            proteins_per_cell: 8,
            fingerprint_len: 64,
            margin: 0.3,
            seed: 7,
        }
    }
}

/// The planted rule: `label = [u·(e_a + e_b) + v·c + bias > 0]` where `c`
/// is the expression-weighted sum of raw protein embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub graph: HetGraph,
    pub cells: CellLines,
    pub triples: Vec<SynergyTriple>,
    /// Further labelled triples, disjoint from `triples`.
    pub reserve: Vec<SynergyTriple>,
    pub plant: Plant,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; avoids ln(0)
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = EntityStore::new(spec.dims);
        let prefix = |k: EntityKind| match k {
            EntityKind::Drug => "DRUG",
            EntityKind::Protein => "PROT",
            EntityKind::Disease => "DIS",
        };
        for (kind, n) in [
            (EntityKind::Drug, spec.drugs),
            (EntityKind::Protein, spec.proteins),
            (EntityKind::Disease, spec.diseases),
        ] {
            for i in 0..n {
                let id = format!("{}{i:03}", prefix(kind));
                let r = store
                    .register_entity(kind, &id, &BTreeSet::new(), None)
                    .expect("fresh synthetic id");
                let emb = Embedding::new(gaussian_vec(&mut rng, spec.dims.get(kind))).expect("finite");
                store.attach_embedding(r, emb).expect("dims match");
                if kind == EntityKind::Drug {
                    let bits: Vec<usize> = (0..spec.fingerprint_len).filter(|_| rng.random::<f64>() < 0.15).collect();
                    store
                        .attach_fingerprint(r, Fingerprint::from_bits(spec.fingerprint_len, bits))
                        .expect("drug fingerprint");
                }
            }
        }
        let mut graph = HetGraph::from_store(&store.freeze()).expect("every node has an embedding");
        let drugs = graph.nodes_of(EntityKind::Drug);
        let proteins = graph.nodes_of(EntityKind::Protein);
        let diseases = graph.nodes_of(EntityKind::Disease);

        let add = |g: &mut HetGraph, t: EdgeType, a: &[usize], b: &[usize], n: usize, rng: &mut ChaCha8Rng| {
            if a.is_empty() || b.is_empty() {
                return;
            }
            for _ in 0..n {
                let (u, v) = (*a.choose(rng).unwrap(), *b.choose(rng).unwrap());
                if u != v {
                    g.insert_edge(t, u, v).expect("kinds match");
                }
            }
        };
        add(&mut graph, EdgeType::Dti, &drugs, &proteins, 2 * spec.drugs, &mut rng);
        add(&mut graph, EdgeType::Ppi, &proteins, &proteins, spec.proteins, &mut rng);
        add(&mut graph, EdgeType::DdiP, &drugs, &drugs, spec.drugs / 2, &mut rng);
        add(&mut graph, EdgeType::DdiN, &drugs, &drugs, spec.drugs / 2, &mut rng);
        add(&mut graph, EdgeType::DrugDiseaseIndication, &drugs, &diseases, spec.drugs / 2, &mut rng);
        add(&mut graph, EdgeType::ProteinDisease, &proteins, &diseases, spec.proteins / 2, &mut rng);
        add(&mut graph, EdgeType::DiseaseDisease, &diseases, &diseases, spec.diseases, &mut rng);

        let cells = CellLines::new(
            (0..spec.cells)
                .map(|c| {
                    let picked: Vec<usize> = proteins
                        .choose_multiple(&mut rng, spec.proteins_per_cell.min(proteins.len()))
                        .copied()
                        .collect();
                    let weights: Vec<(usize, f64)> =
                        picked.into_iter().map(|p| (p, rng.random_range(0.2..1.0))).collect();
                    ExpressionProfile::new(format!("CELL{c:02}"), weights)
                })
                .collect(),
        );

        let u = gaussian_vec(&mut rng, spec.dims.drug);
        let v = gaussian_vec(&mut rng, spec.dims.protein);
        let mut plant = Plant { u, v, bias: 0.0 };

        // all unordered drug pairs × cells, shuffled
        let mut pool = Vec::new();
        for (i, &a) in drugs.iter().enumerate() {
            for &b in &drugs[i + 1..] {
                for c in 0..spec.cells {
                    pool.push((a, b, c));
                }
            }
        }
        pool.shuffle(&mut rng);
        let mut raw: Vec<f64> = pool
            .iter()
            .map(|&(a, b, c)| Self::raw_score(&graph, &cells, &plant, a, b, c))
            .collect();
        // centre on the median so both classes are well represented
        let mut sorted = raw.clone();
        sorted.sort_by(f64::total_cmp);
        plant.bias = -sorted[sorted.len() / 2];
        raw.iter_mut().for_each(|s| *s += plant.bias);
        let scale = (raw.iter().map(|s| s * s).sum::<f64>() / raw.len() as f64).sqrt();

        let mut labelled = Vec::new();
        let mut seen = HashSet::new();
        for (&(a, b, c), &s) in pool.iter().zip(&raw) {
            if s.abs() < spec.margin * scale || !seen.insert((a, b, c)) {
                continue;
            }
            let (a, b) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            labelled.push(SynergyTriple::new(a, b, c, u8::from(s > 0.0)));
            if labelled.len() == spec.triples + spec.reserve {
                break;
            }
        }
        let reserve = labelled.split_off(spec.triples.min(labelled.len()));
        Self {
            spec: spec.clone(),
            graph,
            cells,
            triples: labelled,
            reserve,
            plant,
        }
    }

    fn raw_score(g: &HetGraph, cells: &CellLines, plant: &Plant, a: usize, b: usize, c: usize) -> f64 {
        let f = Self::features_of(g, cells, a, b, c);
        let (fd, fc) = f.split_at(plant.u.len());
        dot(&plant.u, fd) + dot(&plant.v, fc)
    }

    /// The plant's input features `[e_a + e_b ‖ c]` for one triple.
    pub fn features_of(g: &HetGraph, cells: &CellLines, a: usize, b: usize, c: usize) -> Vec<f64> {
        let mut f: Vec<f64> = g.node(a).features.iter().zip(&g.node(b).features).map(|(x, y)| x + y).collect();
        let dim = g.dims().protein;
        let mut cv = vec![0.0; dim];
        for &(p, w) in &cells.get(c).weights {
            for (o, x) in cv.iter_mut().zip(&g.node(p).features) {
                *o += w * x;
            }
        }
        f.extend(cv);
        f
    }

    pub fn features(&self, t: &SynergyTriple) -> Vec<f64> {
        Self::features_of(&self.graph, &self.cells, t.drug_a, t.drug_b, t.cell)
    }

    /// Planted score including the bias; its sign is the label.
    pub fn planted_score(&self, t: &SynergyTriple) -> f64 {
        Self::raw_score(&self.graph, &self.cells, &self.plant, t.drug_a, t.drug_b, t.cell) + self.plant.bias
    }

    /// Writes the corpus as the TSV files the CLI ingests.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let g = &self.graph;
        let mut entities = String::from("id\tkind\taliases\tdescriptor\n");
        for n in g.nodes() {
            let _ = writeln!(entities, "{}\t{}\t\t", n.id, n.kind.as_str());
        }
        fs::write(dir.join("entities.tsv"), entities)?;
        for kind in EntityKind::ALL {
            let mut s = String::from("id\tvalues\n");
            for i in g.nodes_of(kind) {
                let vals: Vec<String> = g.node(i).features.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{}\t{}", g.node(i).id, vals.join(","));
            }
            fs::write(dir.join(format!("{}_embeddings.tsv", kind.as_str())), s)?;
        }
        let mut fps = String::from("id\thexbits\n");
        for n in g.nodes().iter().filter(|n| n.fingerprint.is_some()) {
            let _ = writeln!(fps, "{}\t{}", n.id, n.fingerprint.as_ref().unwrap().to_hex());
        }
        fs::write(dir.join("fingerprints.tsv"), fps)?;
        let mut edges = String::from("src\tdst\ttype\n");
        for (t, set) in g.adjacency() {
            for &(u, v) in set {
                if t.is_symmetric() && u > v {
                    continue;
                }
                let _ = writeln!(edges, "{}\t{}\t{}", g.node(u).id, g.node(v).id, t.name());
            }
        }
        fs::write(dir.join("edges.tsv"), edges)?;
        let mut expr = String::from("cell_id\tprotein_id\tweight\n");
        for p in self.cells.profiles() {
            for &(i, w) in &p.weights {
                let _ = writeln!(expr, "{}\t{}\t{w}", p.cell_id, g.node(i).id);
            }
        }
        fs::write(dir.join("expression.tsv"), expr)?;
        for (name, set) in [("triples.tsv", &self.triples), ("reserve.tsv", &self.reserve)] {
            crate::data::write_triples(&dir.join(name), g, &self.cells, set).map_err(io::Error::other)?;
        }
        Ok(())
    }
}
