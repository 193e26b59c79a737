//! Independent reference implementations used as test oracles. Everything
//! here works on plain `Vec<Vec<f64>>` and reads parameters by name, so it
//! shares no forward-pass code with the library.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synergraph::autodiff::Tape;
use synergraph::entity::EntityKind;
use synergraph::featurize::CellLines;
use synergraph::graph::{EdgeType, HetGraph};
use synergraph::model::{ModelConfig, SynergyModel};
use synergraph::nn::{ParamId, ParamSet};
use synergraph::predictor::{EdgePredictor, PredictorKind};
use synergraph::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn param(ps: &ParamSet, name: &str) -> Tensor {
    ps.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).clone()
}

pub fn has_param(ps: &ParamSet, name: &str) -> bool {
    ps.by_name(name).is_some()
}

pub fn matmul(x: &Mat, w: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * w.get(k, j)).sum())
                .collect()
        })
        .collect()
}

pub fn linear(ps: &ParamSet, name: &str, x: &Mat) -> Mat {
    let w = param(ps, &format!("{name}.weight"));
    let b = param(ps, &format!("{name}.bias"));
    matmul(x, &w)
        .into_iter()
        .map(|r| r.into_iter().enumerate().map(|(j, v)| v + b.get(0, j)).collect())
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn elu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(ps: &ParamSet, name: &str, x: &Mat) -> Mat {
    let g = param(ps, &format!("{name}.gamma"));
    let b = param(ps, &format!("{name}.beta"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
                .collect()
        })
        .collect()
}

/// Dense MLP named `{prefix}.{i}` with ReLU between layers.
pub fn mlp(ps: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let mut h = x.clone();
    let mut i = 0;
    while has_param(ps, &format!("{prefix}.{i}.weight")) {
        if i > 0 {
            h = relu(&h);
        }
        h = linear(ps, &format!("{prefix}.{i}"), &h);
        i += 1;
    }
    assert!(i > 0, "no layers under {prefix}");
    h
}

/// Post-LN transformer block on sequences of one token: attention over a
/// single key is the identity mixing, so the attended value is `V x`.
pub fn single_token_block(ps: &ParamSet, name: &str, x: &Mat) -> Mat {
    let v = linear(ps, &format!("{name}.v"), x);
    let o = linear(ps, &format!("{name}.o"), &v);
    let h = layer_norm(ps, &format!("{name}.ln1"), &add(x, &o));
    let f = linear(ps, &format!("{name}.ffn2"), &relu(&linear(ps, &format!("{name}.ffn1"), &h)));
    layer_norm(ps, &format!("{name}.ln2"), &add(&h, &f))
}

fn blocks(ps: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let mut h = x.clone();
    let mut i = 0;
    while has_param(ps, &format!("{prefix}.{i}.v.weight")) {
        h = single_token_block(ps, &format!("{prefix}.{i}"), &h);
        i += 1;
    }
    h
}

fn predictor_logits_once(p: &EdgePredictor, a: &[f64], b: &[f64]) -> Vec<f64> {
    let ps = &p.params;
    let ha = blocks(ps, "enc_a", &vec![a.to_vec()]);
    let hb = blocks(ps, "enc_b", &vec![b.to_vec()]);
    let joint: Vec<f64> = ha[0].iter().chain(&hb[0]).copied().collect();
    let h = blocks(ps, "joint", &vec![joint]);
    mlp(ps, "head", &h).remove(0)
}

/// Straight-line predictor forward: sigmoid score (DTI) or class
/// probabilities (DDI).
pub fn predictor_forward(p: &EdgePredictor, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut z = predictor_logits_once(p, a, b);
    if p.config.kind == PredictorKind::Ddi && p.config.symmetric {
        let r = predictor_logits_once(p, b, a);
        z = z.iter().zip(&r).map(|(x, y)| 0.5 * (x + y)).collect();
    }
    match p.config.kind {
        PredictorKind::Dti => vec![sigmoid(z[0])],
        PredictorKind::Ddi => softmax(&z),
    }
}

/// Direct evaluation of the refinement rule over `candidates`.
pub fn exhaustive_refine(
    g: &HetGraph,
    dti: &EdgePredictor,
    ddi: &EdgePredictor,
    tau_dti: f64,
    tau_ddi: f64,
    candidates: &[(usize, usize)],
) -> BTreeSet<(EdgeType, usize, usize)> {
    let mut out = BTreeSet::new();
    for &(u, v) in candidates {
        let (ku, kv) = (g.kind(u), g.kind(v));
        let f = |i: usize| g.node(i).features.as_slice();
        if ku == EntityKind::Drug && kv == EntityKind::Protein {
            if !g.has_edge(EdgeType::Dti, u, v) && predictor_forward(dti, f(u), f(v))[0] >= tau_dti {
                out.insert((EdgeType::Dti, u, v));
            }
        } else if ku == EntityKind::Drug && kv == EntityKind::Drug && u != v {
            let (a, b) = (u.min(v), u.max(v));
            if g.has_edge(EdgeType::DdiP, a, b) || g.has_edge(EdgeType::DdiN, a, b) {
                continue;
            }
            let p = predictor_forward(ddi, f(a), f(b));
            let mut best = 0;
            for c in 1..3 {
                if p[c] > p[best] {
                    best = c;
                }
            }
            let t = match best {
                0 => EdgeType::DdiP,
                1 => EdgeType::DdiN,
                _ => continue,
            };
            if p[best] >= tau_ddi {
                out.insert((t, a, b));
            }
        }
    }
    out
}

/// Dense GAT layer over an adjacency given as neighbour sets (self
/// included), followed by ELU.
pub fn dense_gat(ps: &ParamSet, name: &str, heads: usize, concat: bool, x: &Mat, nbrs: &[BTreeSet<usize>]) -> Mat {
    let w = param(ps, &format!("{name}.weight"));
    let z = matmul(x, &w);
    let ph = w.cols() / heads;
    let n = x.len();
    let mut out = vec![vec![0.0; if concat { ph * heads } else { ph }]; n];
    for h in 0..heads {
        let ad = param(ps, &format!("{name}.attn_dst.{h}"));
        let as_ = param(ps, &format!("{name}.attn_src.{h}"));
        let zh: Mat = z.iter().map(|r| r[h * ph..(h + 1) * ph].to_vec()).collect();
        let sd: Vec<f64> = zh.iter().map(|r| (0..ph).map(|k| r[k] * ad.get(k, 0)).sum()).collect();
        let ss: Vec<f64> = zh.iter().map(|r| (0..ph).map(|k| r[k] * as_.get(k, 0)).sum()).collect();
        for i in 0..n {
            let js: Vec<usize> = nbrs[i].iter().copied().collect();
            let e: Vec<f64> = js
                .iter()
                .map(|&j| {
                    let s = sd[i] + ss[j];
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                })
                .collect();
            let alpha = softmax(&e);
            for (a, &j) in alpha.iter().zip(&js) {
                for (k, z) in zh[j].iter().enumerate().take(ph) {
                    let col = if concat { h * ph + k } else { k };
                    let scale = if concat { 1.0 } else { 1.0 / heads as f64 };
                    out[i][col] += scale * a * z;
                }
            }
        }
    }
    elu(&out)
}

/// `N(i) ∪ {i}` over undirected typed edges.
pub fn neighbour_sets(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<BTreeSet<usize>> {
    let mut s: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for (u, v) in edges {
        s[u].insert(v);
        s[v].insert(u);
    }
    s
}

/// Projection by kind, as dense rows in node order.
pub fn project(model: &SynergyModel, g: &HetGraph) -> Mat {
    (0..g.len())
        .map(|i| {
            let prefix = format!("proj.{}", g.kind(i).as_str());
            mlp(&model.params, &prefix, &vec![g.node(i).features.clone()]).remove(0)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

/// Top-k cosine candidates per drug over projected features.
pub fn topk_candidates(g: &HetGraph, x: &Mat, k: Option<usize>) -> Vec<(usize, usize)> {
    let drugs = g.nodes_of(EntityKind::Drug);
    let proteins = g.nodes_of(EntityKind::Protein);
    let mut out = BTreeSet::new();
    for &d in &drugs {
        for (pool, is_drug) in [(&proteins, false), (&drugs, true)] {
            let mut s: Vec<(f64, usize)> = pool.iter().filter(|&&j| j != d).map(|&j| (cosine(&x[d], &x[j]), j)).collect();
            s.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if let Some(k) = k {
                s.truncate(k);
            }
            for (_, j) in s {
                out.insert(if is_drug { (d.min(j), d.max(j)) } else { (d, j) });
            }
        }
    }
    out.into_iter().collect()
}

/// Whole synergy forward pass written out from the definition.
pub fn monolithic_forward(model: &SynergyModel, g: &HetGraph, cells: &CellLines, a: usize, b: usize, c: usize) -> [f64; 2] {
    let cfg: &ModelConfig = &model.config;
    let ps = &model.params;
    let x = project(model, g);
    let base_edges: Vec<(usize, usize)> = synergraph::graph::EdgeType::ALL
        .iter()
        .flat_map(|&t| g.edges(t).collect::<Vec<_>>())
        .collect();
    let base = neighbour_sets(g.len(), base_edges.iter().copied());
    let mut refined_edges = base_edges.clone();
    if cfg.variant == synergraph::model::Variant::Full {
        let cands = topk_candidates(g, &x, cfg.candidate_k);
        for (_, u, v) in exhaustive_refine(g, &model.dti, &model.ddi, cfg.tau_dti, cfg.tau_ddi, &cands) {
            refined_edges.push((u, v));
        }
    }
    let refined = neighbour_sets(g.len(), refined_edges);
    let h = cfg.gat_heads;
    let x1 = dense_gat(ps, "gat.0", h[0], true, &x, &base);
    let x2 = dense_gat(ps, "gat.1", h[1], true, &x1, &refined);
    let xs = dense_gat(ps, "gat.2", h[2], false, &x2, &refined);
    let mut cv = vec![0.0; xs[0].len()];
    for &(p, w) in &cells.get(c).weights {
        for (o, v) in cv.iter_mut().zip(&xs[p]) {
            *o += w * v;
        }
    }
    let head = |u: usize, v: usize| {
        let input: Vec<f64> = xs[u].iter().chain(&xs[v]).chain(&cv).copied().collect();
        softmax(&mlp(ps, "head", &vec![input])[0])
    };
    let f = head(a, b);
    if !cfg.symmetric {
        return [f[0], f[1]];
    }
    let r = head(b, a);
    [0.5 * (f[0] + r[0]), 0.5 * (f[1] + r[1])]
}

/// O(n²) concordance AUROC with ties counted as one half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Cell embedding by explicit accumulation over a dense weight vector.
pub fn brute_cell_embedding(weights: &[f64], table: &Mat) -> Vec<f64> {
    let dim = table[0].len();
    let mut h = vec![0.0; dim];
    for k in 0..dim {
        for (p, &w) in weights.iter().enumerate() {
            h[k] += w * table[p][k];
        }
    }
    h
}

/// Full-batch gradient-descent logistic regression; returns training
/// accuracy. Used to confirm labels are linearly recoverable.
pub fn logistic_fit_accuracy(features: &Mat, labels: &[bool], iters: usize) -> f64 {
    let d = features[0].len();
    let mut w = vec![0.0; d + 1];
    let n = features.len() as f64;
    for _ in 0..iters {
        let mut grad = vec![0.0; d + 1];
        for (x, &y) in features.iter().zip(labels) {
            let z: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = sigmoid(z) - f64::from(u8::from(y));
            for k in 0..d {
                grad[k] += err * x[k];
            }
            grad[d] += err;
        }
        for k in 0..=d {
            w[k] -= 0.5 * grad[k] / n;
        }
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| {
            let z: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == y
        })
        .count();
    correct as f64 / n
}

/// Central finite differences against reverse-mode gradients for every
/// scalar of `ps`. `f` evaluates the loss on a tape with the given
/// parameters and returns the root. Returns the worst relative error.
pub fn grad_check<F>(ps: &ParamSet, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamSet) -> synergraph::autodiff::Var,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, ps);
    let grads = tape.backward(root);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut work = ps.clone();
    for (i, t) in ps.tensors().iter().enumerate() {
        let key = ps.key(ParamId(i));
        for j in 0..t.len() {
            let analytic = grads.get(key).map_or(0.0, |g| g.data()[j]);
            let orig = t.data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + h;
            let mut tp = Tape::new();
            let r = f(&mut tp, &work);
            let up = tp.scalar(r);
            work.tensors_mut()[i].data_mut()[j] = orig - h;
            let mut tm = Tape::new();
            let r = f(&mut tm, &work);
            let down = tm.scalar(r);
            work.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sets every entry of the predictor's output bias to `values`.
pub fn force_output_bias(p: &mut EdgePredictor, values: &[f64]) {
    let last = (0..).take_while(|i| has_param(&p.params, &format!("head.{i}.weight"))).last().unwrap();
    let name = format!("head.{last}.bias");
    let idx = p.params.names().iter().position(|n| *n == name).unwrap();
    let t = &mut p.params.tensors_mut()[idx];
    assert_eq!(t.len(), values.len());
    t.data_mut().copy_from_slice(values);
}

/// Small corpus for structural tests: uniform width-4 embeddings.
pub fn small_corpus(seed: u64) -> synergraph::synthetic::SyntheticCorpus {
    use synergraph::synthetic::{SyntheticCorpus, SyntheticSpec};
    SyntheticCorpus::generate(&SyntheticSpec {
        drugs: 8,
        proteins: 8,
        diseases: 3,
        cells: 3,
        triples: 24,
        reserve: 0,
        dims: synergraph::entity::KindDims::uniform(4),
        proteins_per_cell: 4,
        fingerprint_len: 32,
        margin: 0.05,
        seed,
    })
}

/// Model over width-4 inputs with toy predictors.
pub fn small_model(width: usize, heads: [usize; 3], head_hidden: Vec<usize>, k: Option<usize>, seed: u64) -> SynergyModel {
    use synergraph::predictor::EdgePredictorConfig;
    let config = ModelConfig {
        common_width: width,
        gat_heads: heads,
        head_hidden,
        dropout: 0.0,
        candidate_k: k,
        seed,
        ..ModelConfig::new(synergraph::entity::KindDims::uniform(4))
    };
    SynergyModel::with_fresh_predictors(
        config,
        EdgePredictorConfig::toy(PredictorKind::Dti, 4, 4),
        EdgePredictorConfig::toy(PredictorKind::Ddi, 4, 4),
    )
    .unwrap()
}

/// Writes the default synthetic corpus under `dir` plus a small-model
/// config file pointing at it; returns the config path.
pub fn write_cli_fixture(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    use synergraph::synthetic::{SyntheticCorpus, SyntheticSpec};
    let data = dir.join("data");
    SyntheticCorpus::generate(&SyntheticSpec::default()).write_dir(&data).unwrap();
    let p = |f: &str| data.join(f).display().to_string();
    let text = format!(
        "entities = {}\nedges = {}\ndrug_embeddings = {}\nprotein_embeddings = {}\n\
         disease_embeddings = {}\nfingerprints = {}\nexpression = {}\ntriples = {}\n\
         out_dir = {}\ndrug_dim = 8\nprotein_dim = 6\ndisease_dim = 4\ncommon_width = 16\n\
         head_hidden = 32,16\npredictor_heads = 2\npredictor_joint_heads = 2\n\
         predictor_hidden = 8,4\ndist_threshold = 2\ncandidate_k = 5\nlr = 5e-3\n\
         dropout = 0\nepochs = 5\npretrain_epochs = 2\nfolds = 3\n{extra}",
        p("entities.tsv"),
        p("edges.tsv"),
        p("drug_embeddings.tsv"),
        p("protein_embeddings.tsv"),
        p("disease_embeddings.tsv"),
        p("fingerprints.tsv"),
        p("expression.tsv"),
        p("triples.tsv"),
        dir.join("runs").display(),
    );
    let cfg = dir.join("run.conf");
    std::fs::write(&cfg, text).unwrap();
    cfg
}
