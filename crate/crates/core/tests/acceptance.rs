//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

// `ensure!` negates its condition so that a NaN comparison fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use synergraph::autodiff::Tape;
use synergraph::entity::{EntityKind, KindDims};
use synergraph::featurize::{compose_cell_embedding, ExpressionProfile, SimilarityConfig};
use synergraph::graph::{EdgeType, GraphView};
use synergraph::model::{ModelConfig, SynergyModel, SynergyTriple, Variant};
use synergraph::pipeline::{self, DrugQuery, FixedCandidates, SelfTrainConfig};
use synergraph::predictor::{EdgePredictor, EdgePredictorConfig, PairDataset, PredictorKind};
use synergraph::synthetic::{SyntheticCorpus, SyntheticSpec};
use synergraph::tensor::Tensor;
use synergraph::train::{train, AuxTasks, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    ensure!(took <= budget, "{detail}; took {took:.1?} > budget {budget:?}");
    Ok(format!("{detail}; {took:.1?}"))
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut defined = 0;
    for _ in 0..500 {
        let n = r.random_range(1..=200);
        let levels = r.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels)).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        let got = pipeline::evaluate(&scores, &labels, 0.5).map_err(|e| e.to_string())?.au_roc;
        let want = brute_auroc(&scores, &labels);
        ensure!(got.is_some() == want.is_some(), "definedness differs at n={n}");
        if let (Some(a), Some(b)) = (got, want) {
            worst = worst.max((a - b).abs());
            defined += 1;
        }
    }
    ensure!(worst < 1e-9, "max |diff| {worst:e}");
    let fixture = pipeline::evaluate(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false], 0.5)
        .map_err(|e| e.to_string())?
        .au_roc;
    ensure!(fixture == Some(0.75), "fixture gave {fixture:?}");
    within(start, Duration::from_secs(10), format!("{defined} defined instances, max |diff| {worst:.1e}, fixture 0.75"))
}

fn cell_embedding() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    let (mut worst, mut worst_lin): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let dim = r.random_range(1..=32);
        let n = r.random_range(1..=50);
        let table: Mat = (0..n).map(|_| random_vec(&mut r, dim)).collect();
        let lookup = |p: usize| table.get(p).map(Vec::as_slice);
        let sparse = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if r.random::<f64>() < 0.3 { r.random_range(-2.0..2.0) } else { 0.0 })
                .collect()
        };
        let (w1, w2) = (sparse(&mut r), sparse(&mut r));
        let profile = |w: &[f64]| {
            let mut entries: Vec<(usize, f64)> = w.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect();
            if entries.is_empty() {
                entries.push((0, 0.0));
            }
            ExpressionProfile::new("c", entries)
        };
        let h1 = compose_cell_embedding(&profile(&w1), lookup).map_err(|e| e.to_string())?.values;
        let b1 = brute_cell_embedding(&w1, &table);
        worst = worst.max(h1.iter().zip(&b1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let h2 = compose_cell_embedding(&profile(&w2), lookup).map_err(|e| e.to_string())?.values;
        let (alpha, beta) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + beta * b).collect();
        let hm = compose_cell_embedding(&profile(&mixed), lookup).map_err(|e| e.to_string())?.values;
        for k in 0..dim {
            worst_lin = worst_lin.max((hm[k] - (alpha * h1[k] + beta * h2[k])).abs());
        }
    }
    ensure!(worst < 1e-9, "oracle |diff| {worst:e}");
    ensure!(worst_lin < 1e-9, "linearity |diff| {worst_lin:e}");
    within(
        start,
        Duration::from_secs(5),
        format!("100 profiles, oracle {worst:.1e}, linearity {worst_lin:.1e}"),
    )
}

/// Pseudo edges with each DDI pair listed once as `(min, max)`.
fn normalise(pseudo: &synergraph::graph::EdgeSet) -> BTreeSet<(EdgeType, usize, usize)> {
    pseudo
        .iter()
        .flat_map(|(&t, s)| s.iter().map(move |&(u, v)| (t, u, v)))
        .filter(|&(t, u, v)| !t.is_symmetric() || u < v)
        .collect()
}

fn refinement() -> Outcome {
    let start = Instant::now();
    let (mut admitted, mut compared) = (0, 0);
    for i in 0..20u64 {
        let c = SyntheticCorpus::generate(&SyntheticSpec {
            drugs: 4 + (i as usize % 7),
            proteins: 3 + (i as usize * 3 % 8),
            diseases: 2,
            cells: 2,
            triples: 4,
            reserve: 0,
            dims: KindDims::uniform(4),
            proteins_per_cell: 2,
            fingerprint_len: 16,
            margin: 0.0,
            seed: 100 + i,
        });
        let g = &c.graph;
        let mut r = rng(i);
        let mut m = small_model(6, [2, 3, 4], vec![5], Some(1 + i as usize % 4), 1000 + i);
        force_output_bias(&mut m.dti, &random_vec(&mut r, 1));
        force_output_bias(&mut m.ddi, &random_vec(&mut r, 3));
        m.config.tau_dti = r.random_range(0.3..0.7);
        m.config.tau_ddi = r.random_range(0.3..0.5);
        let x = m.project_values(g).map_err(|e| e.to_string())?;
        let k_cands = m.candidates(g, &x);
        let mut all = m.clone();
        all.config.candidate_k = None;
        let all_cands = all.candidates(g, &x);
        for cands in [&k_cands, &all_cands] {
            let refined = m.refine_graph(g, cands).map_err(|e| e.to_string())?;
            let got = normalise(refined.pseudo());
            let want = exhaustive_refine(g, &m.dti, &m.ddi, m.config.tau_dti, m.config.tau_ddi, cands);
            ensure!(got == want, "parameterization {i}: {} vs {} edges", got.len(), want.len());
            for (t, u, v) in g.typed_edges() {
                ensure!(refined.contains(t, u, v), "base edge {t} {u}-{v} lost");
            }
            admitted += got.len();
            compared += cands.len();
        }
        // the exhaustive list is every drug-protein and drug-drug pair
        let drugs = g.nodes_of(EntityKind::Drug).len();
        let proteins = g.nodes_of(EntityKind::Protein).len();
        ensure!(all_cands.len() == drugs * proteins + drugs * (drugs - 1) / 2, "exhaustive candidate count");
    }
    ensure!(admitted > 0, "no parameterization admitted an edge");
    within(
        start,
        Duration::from_secs(30),
        format!("20 parameterizations, {compared} candidate pairs, {admitted} admitted, all equal"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let c = small_corpus(9);
    let g = &c.graph;
    let m = small_model(6, [2, 3, 4], vec![5], Some(3), 17);
    let topo = m.topology(g).map_err(|e| e.to_string())?;
    let batch: Vec<SynergyTriple> = c.triples[..6].to_vec();
    let model_scalars = m.params.scalar_count();
    let model_err = grad_check(&m.params, |tape, ps| {
        let mut mm = m.clone();
        mm.params = ps.clone();
        mm.loss(tape, g, &c.cells, &topo, &batch, None).unwrap()
    });
    let mut r = rng(5);
    let mut report = vec![format!("synergy model {model_scalars} params rel {model_err:.1e}")];
    let mut worst = model_err;
    ensure!(model_scalars <= 2000, "synergy instance too large");
    for (kind, group) in [(PredictorKind::Dti, 1), (PredictorKind::Ddi, 2)] {
        let p = EdgePredictor::new(EdgePredictorConfig::toy(kind, 4, 4), group, &mut r);
        let a = Tensor::from_rows(&(0..5).map(|_| random_vec(&mut r, 4)).collect::<Vec<_>>(), 4);
        let b = Tensor::from_rows(&(0..5).map(|_| random_vec(&mut r, 4)).collect::<Vec<_>>(), 4);
        let labels: Vec<usize> = (0..5).map(|i| i % kind.out_dim().max(2)).collect();
        let n = p.params.scalar_count();
        ensure!(n <= 2000, "{kind:?} instance has {n} params");
        let err = grad_check(&p.params, |tape: &mut Tape, ps| {
            let mut pp = p.clone();
            pp.params = ps.clone();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            pp.loss(tape, va, vb, &labels, None)
        });
        report.push(format!("{kind:?} {n} params rel {err:.1e}"));
        worst = worst.max(err);
    }
    ensure!(worst < 1e-4, "{}", report.join(", "));
    within(start, Duration::from_secs(120), report.join(", "))
}

fn planted_model_config() -> ModelConfig {
    ModelConfig {
        common_width: 16,
        gat_heads: [4, 8, 12],
        head_hidden: vec![32, 16],
        dropout: 0.0,
        candidate_k: Some(5),
        seed: 3,
        ..ModelConfig::new(SyntheticSpec::default().dims)
    }
}

fn planted_model(seed: u64) -> SynergyModel {
    let d = SyntheticSpec::default().dims;
    SynergyModel::with_fresh_predictors(
        ModelConfig { seed, ..planted_model_config() },
        EdgePredictorConfig::toy(PredictorKind::Dti, d.drug, d.protein),
        EdgePredictorConfig::toy(PredictorKind::Ddi, d.drug, d.drug),
    )
    .expect("valid config")
}

fn planted_train_config(epochs: usize, dropout: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 5e-3,
        dropout,
        batch_size: 32,
        seed: 11,
        ..Default::default()
    }
}

fn aux_tasks(c: &SyntheticCorpus) -> AuxTasks {
    AuxTasks {
        dti: PairDataset::from_graph(&c.graph, PredictorKind::Dti, 3, 1).expect("DTI edges"),
        ddi: PairDataset::from_graph(&c.graph, PredictorKind::Ddi, 3, 1).expect("DDI edges"),
    }
}

fn planted_task() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let c = SyntheticCorpus::generate(&spec);
    ensure!(c.triples.len() == 200, "corpus has {} triples", c.triples.len());
    ensure!(
        c.graph.nodes_of(EntityKind::Drug).len() == 30
            && c.graph.nodes_of(EntityKind::Protein).len() == 40
            && c.graph.nodes_of(EntityKind::Disease).len() == 5
            && c.cells.len() == 6,
        "corpus shape"
    );
    // labels are a linear function of the embedding features
    let all: Vec<SynergyTriple> = c.triples.iter().chain(&c.reserve).copied().collect();
    ensure!(
        all.iter().all(|t| (c.planted_score(t) > 0.0) == (t.label == 1)),
        "planted rule disagrees with labels"
    );
    let feats: Mat = all.iter().map(|t| c.features(t)).collect();
    let labels: Vec<bool> = all.iter().map(|t| t.label == 1).collect();
    let lin = logistic_fit_accuracy(&feats, &labels, 3000);
    ensure!(lin >= 0.99, "logistic fit reaches only {lin}");

    let aux = aux_tasks(&c);
    let mut m = planted_model(3);
    let mut epochs = 0;
    let mut train_auc = 0.0;
    while epochs < 500 {
        let cfg = TrainConfig {
            seed: 11 + epochs as u64,
            ..planted_train_config(50, 0.0)
        };
        train(&mut m, &c.graph, &c.cells, &c.triples, Some(&aux), &cfg).map_err(|e| e.to_string())?;
        epochs += 50;
        train_auc = pipeline::evaluate_model(&m, &c.graph, &c.cells, &c.triples, 0.5)
            .map_err(|e| e.to_string())?
            .au_roc
            .unwrap_or(0.0);
        if train_auc >= 0.99 {
            break;
        }
    }
    ensure!(train_auc >= 0.99, "training AUROC {train_auc:.4} after {epochs} epochs");

    let cv = pipeline::cross_validate(
        |k| Ok(planted_model(100 + k as u64)),
        &c.graph,
        &c.cells,
        &c.triples,
        Some(&aux),
        10,
        5,
        &planted_train_config(150, 0.0),
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let held = cv.mean.au_roc.unwrap_or(0.0);
    ensure!(held >= 0.80, "10-fold held-out AUROC {held:.4}");
    within(
        start,
        Duration::from_secs(300),
        format!(
            "logistic fit {lin:.3}, train AUROC {train_auc:.4} at epoch {epochs}, 10-fold held-out AUROC {held:.4}"
        ),
    )
}

fn unseen_drug() -> Outcome {
    let start = Instant::now();
    let c = SyntheticCorpus::generate(&SyntheticSpec::default());
    let g = &c.graph;
    let hash = g.edge_hash();
    let mut m = planted_model(21);
    let sim = SimilarityConfig::default();
    ensure!(sim.dist_threshold == 90.0, "default distance threshold");
    let anchor = g.resolve("DRUG000").ok_or("no DRUG000")?;
    let near = DrugQuery {
        id: "NEAR".into(),
        embedding: Some(g.node(anchor).features.clone()),
        fingerprint: None,
    };
    let profile = c.cells.get(0);
    let rep = pipeline::infer(&m, g, &near, &DrugQuery::known("DRUG001"), profile, &sim).map_err(|e| e.to_string())?;
    let valid = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() < 1e-9;
    ensure!(valid(rep.probs), "invalid probabilities {:?}", rep.probs);
    ensure!(
        rep.transient_edges
            .iter()
            .any(|(t, u, v)| t == "DrugSimilarity" && u == "NEAR" && v == "DRUG000"),
        "no similarity edge to DRUG000: {:?}",
        rep.transient_edges
    );
    let near_edges = rep.transient_edges.len();

    force_output_bias(&mut m.dti, &[-50.0]);
    force_output_bias(&mut m.ddi, &[-50.0, -50.0, 50.0]);
    let far_emb: Vec<f64> = (0..g.dims().drug).map(|k| if k % 2 == 0 { 1e3 } else { -1e3 }).collect();
    let far = DrugQuery {
        id: "FAR".into(),
        embedding: Some(far_emb),
        fingerprint: None,
    };
    let rep = pipeline::infer(&m, g, &far, &DrugQuery::known("DRUG001"), profile, &sim).map_err(|e| e.to_string())?;
    ensure!(rep.transient_edges.is_empty(), "far drug got edges {:?}", rep.transient_edges);
    ensure!(valid(rep.probs), "invalid probabilities {:?}", rep.probs);
    ensure!(rep.transient_nodes == vec!["FAR".to_string()], "transient nodes {:?}", rep.transient_nodes);
    ensure!(g.edge_hash() == hash, "graph edges changed");
    within(
        start,
        Duration::from_secs(60),
        format!("near drug {near_edges} edges, far drug 0 edges, edge hash unchanged"),
    )
}

fn self_training() -> Outcome {
    let start = Instant::now();
    let c = SyntheticCorpus::generate(&SyntheticSpec::default());
    let s = &c.triples[..100];
    let pool = &c.triples[100..];
    let (validation, test) = c.reserve.split_at(100);
    let aux = aux_tasks(&c);
    let mut details = Vec::new();
    for epochs in [30, 60] {
        let tc = planted_train_config(epochs, 0.2);
        let mut base = planted_model(3);
        train(&mut base, &c.graph, &c.cells, s, Some(&aux), &tc).map_err(|e| e.to_string())?;
        let base_auc = pipeline::evaluate_model(&base, &c.graph, &c.cells, test, 0.5)
            .map_err(|e| e.to_string())?
            .au_roc
            .unwrap_or(0.0);
        let cfg = SelfTrainConfig {
            conf_threshold: 0.8,
            max_rounds: 3,
            min_gain: 0.002,
            seed: 11,
            train: tc,
        };
        let unlabeled: Vec<SynergyTriple> = pool.iter().map(|t| SynergyTriple { label: 0, ..*t }).collect();
        let out = pipeline::self_train(
            base,
            &c.graph,
            &c.cells,
            s,
            validation,
            &mut FixedCandidates(unlabeled),
            Some(&aux),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        ensure!(out.rounds.len() <= cfg.max_rounds, "{} rounds", out.rounds.len());
        for r in &out.rounds {
            ensure!(r.admitted <= s.len(), "round {} admitted {}", r.round, r.admitted);
            if let Some(mc) = r.mean_confidence {
                ensure!(mc > 0.8, "round {} mean confidence {mc}", r.round);
            }
        }
        let pseudo_confs: Vec<f64> = out
            .labeled
            .provenance
            .iter()
            .filter_map(|p| match p {
                pipeline::Provenance::Pseudo { confidence } => Some(*confidence),
                pipeline::Provenance::Original => None,
            })
            .collect();
        ensure!(pseudo_confs.iter().all(|&x| x > 0.8), "pseudo label at or below 0.8");
        ensure!(pseudo_confs.len() <= s.len(), "|U| > |S|");
        let st_auc = pipeline::evaluate_model(&out.model, &c.graph, &c.cells, test, 0.5)
            .map_err(|e| e.to_string())?
            .au_roc
            .unwrap_or(0.0);
        ensure!(
            st_auc >= base_auc,
            "{epochs} epochs: self-trained {st_auc:.4} < baseline {base_auc:.4}"
        );
        details.push(format!(
            "{epochs} epochs: {} rounds, |U| {}, test AUROC {base_auc:.4} -> {st_auc:.4}",
            out.rounds.len(),
            pseudo_confs.len()
        ));
    }
    within(start, Duration::from_secs(300), details.join("; "))
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let c = small_corpus(13);
    let g = &c.graph;
    let mut m = small_model(6, [2, 3, 4], vec![5], Some(3), 5);
    // predictors that would admit every candidate
    force_output_bias(&mut m.dti, &[50.0]);
    force_output_bias(&mut m.ddi, &[50.0, -50.0, -50.0]);
    let full = m.topology(g).map_err(|e| e.to_string())?.pseudo_count();
    ensure!(full > 0, "full variant produced no pseudo edges");
    let cfg = TrainConfig {
        epochs: 6,
        lr: 1e-2,
        batch_size: 8,
        variant: Variant::NoPredictive,
        ..Default::default()
    };
    let aux = AuxTasks {
        dti: PairDataset::from_graph(g, PredictorKind::Dti, 1, 0).map_err(|e| e.to_string())?,
        ddi: PairDataset::from_graph(g, PredictorKind::Ddi, 1, 0).map_err(|e| e.to_string())?,
    };
    let report = train(&mut m, g, &c.cells, &c.triples, Some(&aux), &cfg).map_err(|e| e.to_string())?;
    ensure!(report.pseudo_edges.len() == 6, "refinements {:?}", report.pseudo_edges);
    ensure!(report.pseudo_edges.iter().all(|&n| n == 0), "pseudo edges {:?}", report.pseudo_edges);
    let topo = m.topology(g).map_err(|e| e.to_string())?;
    ensure!(topo.pseudo.is_empty(), "inference topology has pseudo edges");
    ensure!(
        topo.base.src == topo.refined.src && topo.base.dst == topo.refined.dst,
        "refined routes differ from base"
    );
    within(
        start,
        Duration::from_secs(60),
        format!("full variant {full} pseudo edges, no-predictive 0 across 6 refinements"),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = write_cli_fixture(tmp.path(), "");
    let c = conf.to_str().unwrap();
    let exe = env!("CARGO_BIN_EXE_synergraph");
    let mut checked = Vec::new();
    for cmd in [
        "build-graph",
        "pretrain-dti",
        "pretrain-ddi",
        "train",
        "self-train",
        "cross-validate",
    ] {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let out = Command::new(exe).args([cmd, "-c", c]).output().map_err(|e| e.to_string())?;
            ensure!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
            let dir = String::from_utf8_lossy(&out.stdout).trim().to_string();
            runs.push((dir.clone(), snapshot(Path::new(&dir))));
            fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        }
        ensure!(runs[0].0 == runs[1].0, "{cmd}: run directories differ");
        ensure!(runs[0].1 == runs[1].1, "{cmd}: outputs differ");
        let names: Vec<&str> = runs[0].1.iter().map(|f| f.0.as_str()).collect();
        ensure!(names.contains(&"metrics.json"), "{cmd}: no metrics");
        checked.push(format!("{cmd} [{}]", names.join(",")));
    }
    within(start, Duration::from_secs(300), checked.join(" "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", metric_oracle),
        ("cell-line embedding conformance", cell_embedding),
        ("graph refinement conformance", refinement),
        ("gradient checks", gradients),
        ("planted-task learning", planted_task),
        ("unseen-drug path", unseen_drug),
        ("self-training contracts", self_training),
        ("ablation switch fidelity", ablation),
        ("determinism", determinism),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, f)| {
                s.spawn(move || {
                    std::panic::catch_unwind(f).unwrap_or_else(|p| {
                        Err(p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into()))
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("joined")).collect()
    });
    let mut failed = 0;
    for ((name, _), r) in criteria.iter().zip(&results) {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
