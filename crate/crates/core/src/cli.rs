//! Command-line front end: flat `key = value` configuration, per-command
//! execution and report files under a run directory named after the
//! config hash and seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, PredictionRow};
use crate::entity::{EntityKind, EntityStore, Fingerprint, KindDims};
use crate::featurize::{self, CellLines, DistanceMetric, SimilarityConfig};
use crate::graph::{degree_stats, EdgeType, HetGraph};
use crate::metrics::{self, MetricsReport};
use crate::model::{ModelConfig, SynergyModel, SynergyTriple, Variant};
use crate::pipeline::{self, DrugQuery, RandomCandidates, SelfTrainConfig};
use crate::predictor::{
    pretrain_predictor, EdgePredictor, EdgePredictorConfig, PairDataset, PredictorKind, PretrainConfig,
};
use crate::train::{self, AuxTasks, TrainConfig};
use crate::tsv::{parse_floats, Table};

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Taken from the published method description.
    Published,
    /// Chosen for this implementation.
    Chosen,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Ty {
    Path,
    Str,
    Bool,
    Int { min: u64 },
    Real { min: f64, max: f64 },
    IntList,
    Metric,
}

struct Key {
    name: &'static str,
    default: &'static str,
    ty: Ty,
    source: Source,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, ty: Ty, source: Source, help: &'static str) -> Key {
    Key {
        name,
        default,
        ty,
        source,
        help,
    }
}

use Source::{Chosen, Published};

const UNIT: Ty = Ty::Real { min: 0.0, max: 1.0 };
const POS_REAL: Ty = Ty::Real { min: 0.0, max: f64::INFINITY };

const KEYS: &[Key] = &[
    key("entities", "", Ty::Path, Chosen, "entities TSV (id kind aliases descriptor)"),
    key("edges", "", Ty::Path, Chosen, "edges TSV (src dst type)"),
    key("drug_embeddings", "", Ty::Path, Chosen, "drug embedding TSV (id values)"),
    key("protein_embeddings", "", Ty::Path, Chosen, "protein embedding TSV"),
    key("disease_embeddings", "", Ty::Path, Chosen, "disease embedding TSV"),
    key("fingerprints", "", Ty::Path, Chosen, "drug fingerprint TSV (id hexbits)"),
    key("expression", "", Ty::Path, Chosen, "expression TSV (cell_id protein_id weight)"),
    key("triples", "", Ty::Path, Chosen, "labelled triples TSV"),
    key("validation", "", Ty::Path, Chosen, "validation triples for self-training (default: split from triples)"),
    key("scores", "", Ty::Path, Chosen, "score/label TSV for offline evaluation"),
    key("queries", "", Ty::Path, Chosen, "inference queries TSV (drug_a drug_b cell_id)"),
    key("query_embeddings", "", Ty::Path, Chosen, "embeddings of drugs absent from the graph"),
    key("query_fingerprints", "", Ty::Path, Chosen, "fingerprints of drugs absent from the graph"),
    key("dti_checkpoint", "", Ty::Path, Chosen, "pretrained DTI predictor"),
    key("ddi_checkpoint", "", Ty::Path, Chosen, "pretrained DDI predictor"),
    key("model_checkpoint", "", Ty::Path, Chosen, "trained synergy model"),
    key("out_dir", "runs", Ty::Str, Chosen, "parent directory of run directories"),
    key("excluded_proteins", "", Ty::Str, Chosen, "comma-separated protein IDs dropped from expression"),
    key("binarize_at", "", Ty::Str, Chosen, "read a score column and label score > cut as synergistic"),
    key("drug_dim", "2304", Ty::Int { min: 1 }, Published, "drug embedding width"),
    key("protein_dim", "768", Ty::Int { min: 1 }, Published, "protein embedding width"),
    key("disease_dim", "512", Ty::Int { min: 1 }, Published, "disease embedding width"),
    key("dist_threshold", "90", POS_REAL, Published, "drug similarity: embedding distance below this"),
    key("tanimoto_threshold", "0.62", UNIT, Published, "drug similarity: Tanimoto above this"),
    key("distance_metric", "euclidean", Ty::Metric, Chosen, "euclidean | cosine"),
    key("similarity_edges", "true", Ty::Bool, Chosen, "add DrugSimilarity edges when building the graph"),
    key("l1_normalize", "false", Ty::Bool, Chosen, "L1-normalise expression profiles"),
    key("common_width", "512", Ty::Int { min: 1 }, Published, "projected node width"),
    key("projection_hidden", "", Ty::IntList, Chosen, "hidden widths of the projection MLPs"),
    key("gat_heads", "4,8,12", Ty::IntList, Published, "attention heads of the three GAT layers"),
    key("negative_slope", "0.2", POS_REAL, Chosen, "attention LeakyReLU slope"),
    key("head_hidden", "3072,768,128", Ty::IntList, Published, "synergy head hidden widths"),
    key("tau_dti", "0.5", UNIT, Chosen, "DTI pseudo-edge threshold"),
    key("tau_ddi", "0.5", UNIT, Chosen, "DDI pseudo-edge threshold"),
    key("candidate_k", "50", Ty::Int { min: 0 }, Chosen, "refinement candidates per drug (0: all pairs)"),
    key("symmetric", "true", Ty::Bool, Chosen, "average predictions over both drug orders"),
    key("predictor_heads", "8", Ty::Int { min: 1 }, Published, "heads of each predictor branch block"),
    key("predictor_joint_heads", "12", Ty::Int { min: 1 }, Published, "heads of the joint predictor blocks"),
    key("predictor_hidden", "2048,256", Ty::IntList, Published, "predictor MLP hidden widths"),
    key("ffn_mult", "2", Ty::Int { min: 1 }, Chosen, "feed-forward width multiple in attention blocks"),
    key("negative_factor", "3", Ty::Int { min: 1 }, Published, "negatives per positive pair"),
    key("resample_negatives", "false", Ty::Bool, Chosen, "redraw negatives every pretraining epoch"),
    key("pretrain_epochs", "50", Ty::Int { min: 0 }, Chosen, "predictor pretraining epochs"),
    key("pretrain_holdout", "0.2", UNIT, Chosen, "held-out fraction during pretraining"),
    key("epochs", "100", Ty::Int { min: 0 }, Chosen, "training epochs"),
    key("lr", "1e-4", POS_REAL, Published, "learning rate"),
    key("dropout", "0.2", Ty::Real { min: 0.0, max: 0.99 }, Published, "dropout on MLP hidden layers"),
    key("batch_size", "64", Ty::Int { min: 1 }, Chosen, "triples per step"),
    key("seed", "0", Ty::Int { min: 0 }, Chosen, "root random seed"),
    key("folds", "10", Ty::Int { min: 2 }, Published, "cross-validation folds"),
    key("refine_every", "1", Ty::Int { min: 1 }, Chosen, "epochs between graph refinements"),
    key("joint_finetune", "true", Ty::Bool, Chosen, "train predictors through auxiliary losses"),
    key("aux_weight_dti", "0.1", POS_REAL, Chosen, "weight of the auxiliary DTI loss"),
    key("aux_weight_ddi", "0.1", POS_REAL, Chosen, "weight of the auxiliary DDI loss"),
    key("aux_batch", "32", Ty::Int { min: 1 }, Chosen, "auxiliary pairs per step"),
    key("threshold", "0.5", UNIT, Chosen, "cutoff for thresholded metrics"),
    key("conf_threshold", "0.8", UNIT, Published, "self-training confidence cutoff"),
    key("max_rounds", "5", Ty::Int { min: 1 }, Chosen, "self-training rounds"),
    key("min_gain", "0.002", POS_REAL, Chosen, "minimum validation AUROC gain per round"),
    key("candidate_budget", "1000", Ty::Int { min: 0 }, Chosen, "candidate triples scored per round"),
    key("val_fraction", "0.1", UNIT, Chosen, "validation split when no validation file is given"),
    key("no_self_train", "false", Ty::Bool, Chosen, "ablation: skip self-training"),
    key("no_predictive", "false", Ty::Bool, Chosen, "ablation: skip graph refinement"),
];

fn key_def(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Failure of a command, tagged with the module that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub module: String,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(module: &str, kind: &str, message: impl Into<String>) -> Self {
        Self {
            module: module.into(),
            kind: kind.into(),
            message: message.into(),
        }
    }

    fn config(kind: &str, message: impl Into<String>) -> Self {
        Self::new("config", kind, message)
    }

    /// Single-line JSON form written to stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.module, self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

trait Ctx<T> {
    fn ctx(self, module: &str) -> Result<T, CliError>;
}

impl<T, E: fmt::Display + fmt::Debug> Ctx<T> for Result<T, E> {
    fn ctx(self, module: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let dbg = format!("{e:?}");
            let kind: String = dbg.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
            CliError::new(module, &kind, e.to_string())
        })
    }
}

/// Fully resolved configuration: every known key with a validated value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect(),
        }
    }

    /// Parses `key = value` lines (`#` comments, blank lines allowed) over
    /// the defaults, then applies `overrides`.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config("Syntax", format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::config("DuplicateKey", format!("line {}: `{k}` set twice", i + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::config("Syntax", format!("override `{o}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        let def = key_def(k).ok_or_else(|| CliError::config("UnknownKey", format!("unknown key `{k}`")))?;
        validate(def, v)?;
        self.values.insert(k.to_string(), v.to_string());
        Ok(())
    }

    pub fn get(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {k}"))
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))[..12].to_string()
    }

    fn usize(&self, k: &str) -> usize {
        self.get(k).parse().expect("validated")
    }

    fn f64(&self, k: &str) -> f64 {
        self.get(k).parse().expect("validated")
    }

    fn bool(&self, k: &str) -> bool {
        self.get(k) == "true"
    }

    fn list(&self, k: &str) -> Vec<usize> {
        parse_int_list(self.get(k)).expect("validated")
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        Some(self.get(k)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn require(&self, k: &str) -> Result<PathBuf, CliError> {
        self.path(k)
            .ok_or_else(|| CliError::config("MissingKey", format!("`{k}` is required for this command")))
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated")
    }

    pub fn dims(&self) -> KindDims {
        KindDims {
            drug: self.usize("drug_dim"),
            protein: self.usize("protein_dim"),
            disease: self.usize("disease_dim"),
        }
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            dist_threshold: self.f64("dist_threshold"),
            tanimoto_threshold: self.f64("tanimoto_threshold"),
            metric: if self.get("distance_metric") == "cosine" {
                DistanceMetric::Cosine
            } else {
                DistanceMetric::Euclidean
            },
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let heads = self.list("gat_heads");
        let gat_heads: [usize; 3] = heads
            .try_into()
            .map_err(|_| CliError::config("BadValue", "gat_heads needs exactly three entries"))?;
        let k = self.usize("candidate_k");
        let mc = ModelConfig {
            dims: self.dims(),
            common_width: self.usize("common_width"),
            projection_hidden: self.list("projection_hidden"),
            gat_heads,
            negative_slope: self.f64("negative_slope"),
            elu_alpha: 1.0,
            head_hidden: self.list("head_hidden"),
            dropout: self.f64("dropout"),
            tau_dti: self.f64("tau_dti"),
            tau_ddi: self.f64("tau_ddi"),
            candidate_k: (k > 0).then_some(k),
            symmetric: self.bool("symmetric"),
            variant: self.variant(),
            seed: self.seed(),
        };
        mc.validate().map_err(|e| CliError::config("BadValue", e.to_string()))?;
        Ok(mc)
    }

    pub fn variant(&self) -> Variant {
        if self.bool("no_predictive") {
            Variant::NoPredictive
        } else {
            Variant::Full
        }
    }

    pub fn predictor_config(&self, kind: PredictorKind) -> Result<EdgePredictorConfig, CliError> {
        let d = self.dims();
        let base = match kind {
            PredictorKind::Dti => EdgePredictorConfig::dti(d.drug, d.protein),
            PredictorKind::Ddi => EdgePredictorConfig::ddi(d.drug),
        };
        let c = EdgePredictorConfig {
            heads_a: self.usize("predictor_heads"),
            heads_b: self.usize("predictor_heads"),
            joint_heads: self.usize("predictor_joint_heads"),
            head_hidden: self.list("predictor_hidden"),
            ffn_mult: self.usize("ffn_mult"),
            dropout: self.f64("dropout"),
            ..base
        };
        for (w, h, what) in [
            (c.input_a, c.heads_a, "predictor_heads"),
            (c.input_b, c.heads_b, "predictor_heads"),
            (c.joint_width(), c.joint_heads, "predictor_joint_heads"),
        ] {
            if w % h != 0 {
                return Err(CliError::config("BadValue", format!("{what} = {h} does not divide width {w}")));
            }
        }
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.usize("epochs"),
            lr: self.f64("lr"),
            dropout: self.f64("dropout"),
            batch_size: self.usize("batch_size"),
            seed: self.seed(),
            refine_every: self.usize("refine_every"),
            variant: self.variant(),
            joint_finetune: self.bool("joint_finetune"),
            aux_weight_dti: self.f64("aux_weight_dti"),
            aux_weight_ddi: self.f64("aux_weight_ddi"),
            aux_batch: self.usize("aux_batch"),
        }
    }

    /// Every non-empty input path must exist.
    fn check_paths(&self) -> Result<(), CliError> {
        for k in KEYS.iter().filter(|k| k.ty == Ty::Path) {
            if let Some(p) = self.path(k.name) {
                if !p.exists() {
                    return Err(CliError::config(
                        "MissingPath",
                        format!("{} = {} does not exist", k.name, p.display()),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_int_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn validate(def: &Key, v: &str) -> Result<(), CliError> {
    let bad = |msg: String| CliError::config("BadValue", format!("{} = {v}: {msg}", def.name));
    match def.ty {
        Ty::Path | Ty::Str => {}
        Ty::Bool => {
            if v != "true" && v != "false" {
                return Err(bad("expected true or false".into()));
            }
        }
        Ty::Int { min } => {
            let n: u64 = v.parse().map_err(|e| bad(format!("{e}")))?;
            if n < min {
                return Err(bad(format!("must be at least {min}")));
            }
        }
        Ty::Real { min, max } => {
            let x: f64 = v.parse().map_err(|e| bad(format!("{e}")))?;
            if !x.is_finite() || x < min || x > max {
                return Err(bad(format!("must lie in [{min}, {max}]")));
            }
        }
        Ty::IntList => {
            let l = parse_int_list(v).map_err(bad)?;
            if l.contains(&0) {
                return Err(bad("widths must be positive".into()));
            }
        }
        Ty::Metric => {
            if v != "euclidean" && v != "cosine" {
                return Err(bad("expected euclidean or cosine".into()));
            }
        }
    }
    if def.name == "binarize_at" && !v.is_empty() {
        v.parse::<f64>().map_err(|e| bad(format!("{e}")))?;
    }
    Ok(())
}

/// Table of every key with its default and where the default comes from.
pub fn key_table() -> String {
    let mut s = String::from("Configuration keys (key = default  [source]  description):\n");
    for k in KEYS {
        let src = match k.source {
            Published => "published",
            Chosen => "chosen",
        };
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(s, "  {:<22} = {:<14} [{src:<9}] {}", k.name, default, k.help);
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "synergraph", about = "Drug-combination synergy prediction on a refined heterogeneous graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a key (repeatable): --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load entities, embeddings and fingerprints; report counts.
    #[command(after_help = key_table())]
    Ingest(CommonArgs),
    /// Build the heterogeneous graph and report per-type statistics.
    #[command(name = "build-graph", after_help = key_table())]
    BuildGraph(CommonArgs),
    /// Pretrain the drug–target predictor.
    #[command(name = "pretrain-dti", after_help = key_table())]
    PretrainDti(CommonArgs),
    /// Pretrain the drug–drug predictor.
    #[command(name = "pretrain-ddi", after_help = key_table())]
    PretrainDdi(CommonArgs),
    /// Train the synergy model.
    #[command(after_help = key_table())]
    Train(CommonArgs),
    /// Train, then self-train on confident pseudo labels.
    #[command(name = "self-train", after_help = key_table())]
    SelfTrain(CommonArgs),
    /// Predict combinations listed in `queries`.
    #[command(after_help = key_table())]
    Infer(CommonArgs),
    /// Metrics from a score file or from a model on `triples`.
    #[command(after_help = key_table())]
    Evaluate(CommonArgs),
    /// k-fold cross-validation on `triples`.
    #[command(name = "cross-validate", after_help = key_table())]
    CrossValidate(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::BuildGraph(_) => "build-graph",
            Command::PretrainDti(_) => "pretrain-dti",
            Command::PretrainDdi(_) => "pretrain-ddi",
            Command::Train(_) => "train",
            Command::SelfTrain(_) => "self-train",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
            Command::CrossValidate(_) => "cross-validate",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Ingest(a)
            | Command::BuildGraph(a)
            | Command::PretrainDti(a)
            | Command::PretrainDdi(a)
            | Command::Train(a)
            | Command::SelfTrain(a)
            | Command::Infer(a)
            | Command::Evaluate(a)
            | Command::CrossValidate(a) => a,
        }
    }
}

/// Resolves the configuration, runs the command and returns its run
/// directory. Nothing is written if the configuration is invalid.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let args = cli.command.args();
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::config("Io", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = RunConfig::parse(&text, &args.overrides)?;
    cfg.check_paths()?;
    let name = cli.command.name();
    let dir = Path::new(cfg.get("out_dir")).join(format!("{name}-{}-s{}", cfg.hash(), cfg.seed()));
    let mut run = Run { cfg, dir };
    // validate everything the command needs before creating the directory
    let plan = run.plan(&cli.command)?;
    fs::create_dir_all(&run.dir).ctx("io")?;
    run.write("config.resolved", &run.cfg.text())?;
    plan(&mut run)?;
    Ok(run.dir)
}

type Plan = Box<dyn FnOnce(&mut Run) -> Result<(), CliError>>;

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

struct Corpus {
    graph: HetGraph,
    cells: CellLines,
}

#[derive(Serialize)]
struct StoreReport {
    entities: BTreeMap<String, usize>,
    embeddings_loaded: BTreeMap<String, usize>,
    unknown_ids: Vec<String>,
    fingerprints_loaded: usize,
    missing_embeddings: Vec<String>,
}

#[derive(Serialize)]
struct GraphReport {
    nodes: usize,
    edge_hash: String,
    edges: BTreeMap<String, crate::graph::DegreeStats>,
    similarity_pairs_tested: usize,
    similarity_pairs_without_fingerprint: usize,
    similarity_edges_added: usize,
}

impl Run {
    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.dir.join(name), text).ctx("io")
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).ctx("io")?;
        s.push('\n');
        self.write(name, &s)
    }

    fn plan(&mut self, cmd: &Command) -> Result<Plan, CliError> {
        let c = &self.cfg;
        let need = |keys: &[&str]| -> Result<(), CliError> {
            for k in keys {
                c.require(k)?;
            }
            Ok(())
        };
        let graph_keys = ["entities", "edges", "drug_embeddings", "protein_embeddings", "disease_embeddings"];
        c.model_config()?;
        Ok(match cmd {
            Command::Ingest(_) => {
                need(&graph_keys[..1])?;
                Box::new(|r: &mut Run| r.ingest())
            }
            Command::BuildGraph(_) => {
                need(&graph_keys)?;
                Box::new(|r: &mut Run| r.build_graph())
            }
            Command::PretrainDti(_) | Command::PretrainDdi(_) => {
                need(&graph_keys)?;
                let kind = if matches!(cmd, Command::PretrainDti(_)) {
                    PredictorKind::Dti
                } else {
                    PredictorKind::Ddi
                };
                c.predictor_config(kind)?;
                Box::new(move |r: &mut Run| r.pretrain(kind))
            }
            Command::Train(_) | Command::SelfTrain(_) | Command::CrossValidate(_) => {
                need(&graph_keys)?;
                need(&["expression", "triples"])?;
                c.predictor_config(PredictorKind::Dti)?;
                c.predictor_config(PredictorKind::Ddi)?;
                match cmd {
                    Command::Train(_) => Box::new(|r: &mut Run| r.train()),
                    Command::SelfTrain(_) => Box::new(|r: &mut Run| r.self_train()),
                    _ => Box::new(|r: &mut Run| r.cross_validate()),
                }
            }
            Command::Infer(_) => {
                need(&graph_keys)?;
                need(&["expression", "queries", "model_checkpoint"])?;
                Box::new(|r: &mut Run| r.infer())
            }
            Command::Evaluate(_) => {
                if c.path("scores").is_none() {
                    need(&graph_keys)?;
                    need(&["expression", "triples", "model_checkpoint"])?;
                }
                Box::new(|r: &mut Run| r.evaluate())
            }
        })
    }

    fn load_store(&self) -> Result<(crate::entity::FrozenStore, StoreReport), CliError> {
        let c = &self.cfg;
        let mut store = EntityStore::new(c.dims());
        store.load_entities(&c.require("entities")?).ctx("entity-store")?;
        let mut report = StoreReport {
            entities: BTreeMap::new(),
            embeddings_loaded: BTreeMap::new(),
            unknown_ids: Vec::new(),
            fingerprints_loaded: 0,
            missing_embeddings: Vec::new(),
        };
        for (key, kind) in [
            ("drug_embeddings", EntityKind::Drug),
            ("protein_embeddings", EntityKind::Protein),
            ("disease_embeddings", EntityKind::Disease),
        ] {
            if let Some(p) = c.path(key) {
                let r = store.load_embedding_table(&p, kind).ctx("entity-store")?;
                report.embeddings_loaded.insert(kind.as_str().into(), r.loaded);
                report.unknown_ids.extend(r.unknown);
            }
        }
        if let Some(p) = c.path("fingerprints") {
            let r = store.load_fingerprints(&p).ctx("entity-store")?;
            report.fingerprints_loaded = r.loaded;
            report.unknown_ids.extend(r.unknown);
        }
        let frozen = store.freeze();
        for (i, e) in frozen.entities().iter().enumerate() {
            *report.entities.entry(e.kind.as_str().into()).or_default() += 1;
            if frozen.embedding(i).is_none() {
                report.missing_embeddings.push(e.id.clone());
            }
        }
        Ok((frozen, report))
    }

    fn build(&self) -> Result<(HetGraph, GraphReport), CliError> {
        let c = &self.cfg;
        let (store, _) = self.load_store()?;
        let mut g = HetGraph::build(&store, &c.require("edges")?).ctx("hetgraph")?;
        let mut report = GraphReport {
            nodes: g.len(),
            edge_hash: String::new(),
            edges: BTreeMap::new(),
            similarity_pairs_tested: 0,
            similarity_pairs_without_fingerprint: 0,
            similarity_edges_added: 0,
        };
        if c.bool("similarity_edges") {
            let drugs = featurize::graph_drugs(&g);
            let (pairs, rep) = featurize::similarity_edges(&drugs, &c.similarity()).ctx("featurize")?;
            drop(drugs);
            report.similarity_pairs_tested = rep.pairs_tested;
            report.similarity_pairs_without_fingerprint = rep.pairs_without_fingerprint;
            for (u, v) in pairs {
                if !g.has_edge(EdgeType::DrugSimilarity, u, v) {
                    report.similarity_edges_added += 1;
                }
                g.insert_edge(EdgeType::DrugSimilarity, u, v).ctx("hetgraph")?;
            }
        }
        report.edge_hash = g.edge_hash();
        report.edges = degree_stats(&g).into_iter().map(|(t, s)| (t.name().to_string(), s)).collect();
        Ok((g, report))
    }

    fn corpus(&self) -> Result<Corpus, CliError> {
        let c = &self.cfg;
        let (graph, _) = self.build()?;
        let excluded: BTreeSet<String> = crate::tsv::parse_list(c.get("excluded_proteins")).into_iter().collect();
        let cells =
            CellLines::load(&c.require("expression")?, &graph, &excluded, c.bool("l1_normalize")).ctx("featurize")?;
        Ok(Corpus { graph, cells })
    }

    fn triples(&self, key: &str, corpus: &Corpus) -> Result<Vec<SynergyTriple>, CliError> {
        let cut = Some(self.cfg.get("binarize_at")).filter(|v| !v.is_empty()).map(|v| v.parse().expect("validated"));
        data::load_triples(&self.cfg.require(key)?, &corpus.graph, &corpus.cells, cut).ctx("pipeline")
    }

    fn aux(&self, g: &HetGraph) -> Result<Option<AuxTasks>, CliError> {
        let factor = self.cfg.usize("negative_factor");
        let seed = self.cfg.seed();
        let make = |kind| match PairDataset::from_graph(g, kind, factor, seed) {
            Ok(d) => Ok(Some(d)),
            Err(crate::predictor::PredictorError::EmptyDataset) => Ok(None),
            Err(e) => Err(e),
        };
        let dti = make(PredictorKind::Dti).ctx("edge-predictors")?;
        let ddi = make(PredictorKind::Ddi).ctx("edge-predictors")?;
        Ok(dti.zip(ddi).map(|(dti, ddi)| AuxTasks { dti, ddi }))
    }

    fn fresh_model(&self) -> Result<SynergyModel, CliError> {
        let c = &self.cfg;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(c.seed() ^ 0x5eed_0001);
        let dti = match c.path("dti_checkpoint") {
            Some(p) => EdgePredictor::load(&p, 1).ctx("edge-predictors")?,
            None => EdgePredictor::new(c.predictor_config(PredictorKind::Dti)?, 1, &mut rng),
        };
        let ddi = match c.path("ddi_checkpoint") {
            Some(p) => EdgePredictor::load(&p, 2).ctx("edge-predictors")?,
            None => EdgePredictor::new(c.predictor_config(PredictorKind::Ddi)?, 2, &mut rng),
        };
        SynergyModel::new(c.model_config()?, dti, ddi).ctx("gnn-core")
    }

    fn ingest(&mut self) -> Result<(), CliError> {
        let (_, report) = self.load_store()?;
        self.write_json("metrics.json", &report)
    }

    fn build_graph(&mut self) -> Result<(), CliError> {
        let (_, report) = self.build()?;
        self.write_json("metrics.json", &report)
    }

    fn pretrain(&mut self, kind: PredictorKind) -> Result<(), CliError> {
        let c = &self.cfg;
        let (g, _) = self.build()?;
        let data = PairDataset::from_graph(&g, kind, c.usize("negative_factor"), c.seed()).ctx("edge-predictors")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(c.seed());
        let group = if kind == PredictorKind::Dti { 1 } else { 2 };
        let mut p = EdgePredictor::new(c.predictor_config(kind)?, group, &mut rng);
        let pc = PretrainConfig {
            epochs: c.usize("pretrain_epochs"),
            lr: c.f64("lr"),
            batch_size: c.usize("batch_size"),
            seed: c.seed(),
            holdout: c.f64("pretrain_holdout"),
            resample_negatives: c.bool("resample_negatives"),
        };
        let report = pretrain_predictor(&mut p, &data, &g, &pc).ctx("edge-predictors")?;
        let name = if kind == PredictorKind::Dti { "dti" } else { "ddi" };
        p.save(&self.dir.join(format!("{name}.ckpt.json"))).ctx("edge-predictors")?;
        self.write_json("metrics.json", &report)
    }

    fn train(&mut self) -> Result<(), CliError> {
        let corpus = self.corpus()?;
        let triples = self.triples("triples", &corpus)?;
        let aux = self.aux(&corpus.graph)?;
        let mut model = match self.cfg.path("model_checkpoint") {
            Some(p) => SynergyModel::load(&p).ctx("gnn-core")?,
            None => self.fresh_model()?,
        };
        let tc = self.cfg.train_config();
        let report = train::train(&mut model, &corpus.graph, &corpus.cells, &triples, aux.as_ref(), &tc).ctx("gnn-core")?;
        let metrics =
            pipeline::evaluate_model(&model, &corpus.graph, &corpus.cells, &triples, self.cfg.f64("threshold"))
                .ctx("pipeline")?;
        model.save(&self.dir.join("model.ckpt.json")).ctx("gnn-core")?;
        #[derive(Serialize)]
        struct Out<'a> {
            train: &'a train::TrainReport,
            train_metrics: MetricsReport,
        }
        self.write_json("metrics.json", &Out { train: &report, train_metrics: metrics })
    }

    fn self_train(&mut self) -> Result<(), CliError> {
        let c = self.cfg.clone();
        let corpus = self.corpus()?;
        let mut s = self.triples("triples", &corpus)?;
        let validation = match c.path("validation") {
            Some(_) => self.triples("validation", &corpus)?,
            None => {
                let n_val = ((s.len() as f64) * c.f64("val_fraction")).round().max(1.0) as usize;
                let assignment = pipeline::fold_assignment(s.len(), 2, c.seed()).ctx("pipeline")?;
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by_key(|&i| (assignment[i], i));
                let val: Vec<SynergyTriple> = order.iter().take(n_val).map(|&i| s[i]).collect();
                let keep: BTreeSet<usize> = order.iter().skip(n_val).copied().collect();
                s = keep.into_iter().map(|i| s[i]).collect();
                val
            }
        };
        let aux = self.aux(&corpus.graph)?;
        let mut model = match c.path("model_checkpoint") {
            Some(p) => SynergyModel::load(&p).ctx("gnn-core")?,
            None => {
                let mut m = self.fresh_model()?;
                train::train(&mut m, &corpus.graph, &corpus.cells, &s, aux.as_ref(), &c.train_config())
                    .ctx("gnn-core")?;
                m
            }
        };
        let threshold = c.f64("threshold");
        let mut rounds_jsonl = String::new();
        if !c.bool("no_self_train") {
            let mut space = RandomCandidates {
                drugs: corpus.graph.nodes_of(EntityKind::Drug),
                cells: corpus.cells.len(),
                budget: c.usize("candidate_budget"),
                seed: c.seed(),
            };
            let st = SelfTrainConfig {
                conf_threshold: c.f64("conf_threshold"),
                max_rounds: c.usize("max_rounds"),
                min_gain: c.f64("min_gain"),
                seed: c.seed(),
                train: c.train_config(),
            };
            let out = pipeline::self_train(
                model,
                &corpus.graph,
                &corpus.cells,
                &s,
                &validation,
                &mut space,
                aux.as_ref(),
                &st,
            )
            .ctx("pipeline")?;
            for r in &out.rounds {
                let _ = writeln!(rounds_jsonl, "{}", serde_json::to_string(r).ctx("io")?);
            }
            model = out.model;
        }
        self.write("rounds.jsonl", &rounds_jsonl)?;
        let metrics = pipeline::evaluate_model(&model, &corpus.graph, &corpus.cells, &validation, threshold)
            .ctx("pipeline")?;
        model.save(&self.dir.join("model.ckpt.json")).ctx("gnn-core")?;
        self.write_json("metrics.json", &metrics)
    }

    fn cross_validate(&mut self) -> Result<(), CliError> {
        let c = self.cfg.clone();
        let corpus = self.corpus()?;
        let triples = self.triples("triples", &corpus)?;
        let aux = self.aux(&corpus.graph)?;
        let report = pipeline::cross_validate(
            |_| self.fresh_model().map_err(|e| crate::model::ModelError::Config(e.to_string())),
            &corpus.graph,
            &corpus.cells,
            &triples,
            aux.as_ref(),
            c.usize("folds"),
            c.seed(),
            &c.train_config(),
            c.f64("threshold"),
        )
        .ctx("pipeline")?;
        self.write_json("metrics.json", &report)
    }

    fn evaluate(&mut self) -> Result<(), CliError> {
        let threshold = self.cfg.f64("threshold");
        if let Some(p) = self.cfg.path("scores") {
            let (scores, labels) = data::load_scores(&p).ctx("pipeline")?;
            let report = metrics::evaluate(&scores, &labels, threshold).ctx("pipeline")?;
            return self.write_json("metrics.json", &report);
        }
        let corpus = self.corpus()?;
        let triples = self.triples("triples", &corpus)?;
        let model = SynergyModel::load(&self.cfg.require("model_checkpoint")?).ctx("gnn-core")?;
        let probs = model.predict(&corpus.graph, &corpus.cells, &triples).ctx("gnn-core")?;
        let rows: Vec<PredictionRow> = triples
            .iter()
            .zip(&probs)
            .map(|(t, p)| PredictionRow {
                drug_a: corpus.graph.node(t.drug_a).id.clone(),
                drug_b: corpus.graph.node(t.drug_b).id.clone(),
                cell_id: corpus.cells.get(t.cell).cell_id.clone(),
                probs: *p,
                provenance: "known".into(),
            })
            .collect();
        data::write_predictions(&self.dir.join("predictions.tsv"), &rows).ctx("pipeline")?;
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let labels: Vec<bool> = triples.iter().map(|t| t.label == 1).collect();
        let report = metrics::evaluate(&scores, &labels, threshold).ctx("pipeline")?;
        self.write_json("metrics.json", &report)
    }

    fn infer(&mut self) -> Result<(), CliError> {
        let c = self.cfg.clone();
        let corpus = self.corpus()?;
        let model = SynergyModel::load(&c.require("model_checkpoint")?).ctx("gnn-core")?;
        let mut embeddings: HashMap<String, Vec<f64>> = HashMap::new();
        if let Some(p) = c.path("query_embeddings") {
            let t = Table::read(&p).ctx("pipeline")?;
            t.expect_header(&["id", "values"]).ctx("pipeline")?;
            for row in &t.rows {
                let v = parse_floats(row.get(1)).map_err(|e| t.error(row, e)).ctx("pipeline")?;
                embeddings.insert(row.get(0).to_string(), v);
            }
        }
        let mut fps: HashMap<String, Fingerprint> = HashMap::new();
        if let Some(p) = c.path("query_fingerprints") {
            let t = Table::read(&p).ctx("pipeline")?;
            t.expect_header(&["id", "hexbits"]).ctx("pipeline")?;
            for row in &t.rows {
                let f = Fingerprint::from_hex(row.get(1)).map_err(|e| t.error(row, e)).ctx("pipeline")?;
                fps.insert(row.get(0).to_string(), f);
            }
        }
        let q = Table::read(&c.require("queries")?).ctx("pipeline")?;
        q.expect_header(&["drug_a", "drug_b", "cell_id"]).ctx("pipeline")?;
        let query = |id: &str| DrugQuery {
            id: id.to_string(),
            embedding: embeddings.get(id).cloned(),
            fingerprint: fps.get(id).cloned(),
        };
        let sim = c.similarity();
        let hash_before = corpus.graph.edge_hash();
        let mut rows = Vec::new();
        let mut reports = Vec::new();
        for row in &q.rows {
            let cell = corpus
                .cells
                .resolve(row.get(2))
                .ok_or_else(|| CliError::new("pipeline", "UnknownCell", format!("unknown cell `{}`", row.get(2))))?;
            let rep = pipeline::infer(
                &model,
                &corpus.graph,
                &query(row.get(0)),
                &query(row.get(1)),
                corpus.cells.get(cell),
                &sim,
            )
            .ctx("pipeline")?;
            rows.push(PredictionRow {
                drug_a: row.get(0).to_string(),
                drug_b: row.get(1).to_string(),
                cell_id: row.get(2).to_string(),
                probs: rep.probs,
                provenance: rep.provenance(),
            });
            reports.push(rep);
        }
        assert_eq!(hash_before, corpus.graph.edge_hash(), "inference modified the graph");
        data::write_predictions(&self.dir.join("predictions.tsv"), &rows).ctx("pipeline")?;
        self.write_json("provenance.json", &reports)
    }
}
