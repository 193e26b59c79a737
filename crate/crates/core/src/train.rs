//! Mini-batch training of the synergy model, with periodic graph
//! refinement and optional auxiliary edge-prediction losses.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::featurize::CellLines;
use crate::graph::HetGraph;
use crate::model::{ModelError, SynergyModel, SynergyTriple, Topology, Variant};
use crate::nn::Adam;
use crate::predictor::{batch_inputs, PairDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub refine_every: usize,
    pub variant: Variant,
    /// Train the edge predictors alongside the model through auxiliary
    /// losses on their own pair datasets.
    pub joint_finetune: bool,
    pub aux_weight_dti: f64,
    pub aux_weight_ddi: f64,
    /// Pairs drawn from each auxiliary dataset per step.
    pub aux_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            dropout: 0.2,
            batch_size: 64,
            seed: 0,
            refine_every: 1,
            variant: Variant::Full,
            joint_finetune: true,
            aux_weight_dti: 0.1,
            aux_weight_ddi: 0.1,
            aux_batch: 32,
        }
    }
}

/// Labelled DTI / DDI pairs used by the auxiliary losses.
#[derive(Clone, Debug)]
pub struct AuxTasks {
    pub dti: PairDataset,
    pub ddi: PairDataset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean synergy loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Pseudo-edge count after each refinement.
    pub pseudo_edges: Vec<usize>,
}

/// Runs `cfg.epochs` epochs of Adam on `triples`. The refined topology is
/// recomputed every `refine_every` epochs from the current parameters and
/// held fixed in between.
pub fn train(
    model: &mut SynergyModel,
    g: &HetGraph,
    cells: &CellLines,
    triples: &[SynergyTriple],
    aux: Option<&AuxTasks>,
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    if triples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
    }
    model.config.variant = cfg.variant;
    model.config.dropout = cfg.dropout;
    model.head.dropout = cfg.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut adam_dti = Adam::new(cfg.lr, &model.dti.params);
    let mut adam_ddi = Adam::new(cfg.lr, &model.ddi.params);
    let aux_examples = aux.map(|a| (a.dti.examples(), a.ddi.examples()));
    let joint = cfg.joint_finetune && cfg.variant == Variant::Full && aux.is_some();

    let mut report = TrainReport::default();
    let mut order = triples.to_vec();
    let mut topo: Option<Topology> = None;
    let bs = cfg.batch_size.max(1);
    let every = cfg.refine_every.max(1);
    for epoch in 0..cfg.epochs {
        if topo.is_none() || epoch % every == 0 {
            let t = model.topology(g)?;
            report.pseudo_edges.push(t.pseudo_count());
            topo = Some(t);
        }
        let topo = topo.as_ref().expect("topology computed above");
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            let mut tape = Tape::new();
            let syn = model.loss(&mut tape, g, cells, topo, batch, Some(&mut rng))?;
            let value = tape.scalar(syn);
            let mut root = syn;
            if joint {
                let (dti_ex, ddi_ex) = aux_examples.as_ref().expect("joint implies aux");
                for (p, ex, w) in [
                    (&model.dti, dti_ex, cfg.aux_weight_dti),
                    (&model.ddi, ddi_ex, cfg.aux_weight_ddi),
                ] {
                    if w == 0.0 || ex.is_empty() {
                        continue;
                    }
                    let picked: Vec<_> = ex.choose_multiple(&mut rng, cfg.aux_batch.min(ex.len())).copied().collect();
                    let (ta, tb) = batch_inputs(g, &picked, &p.config)?;
                    let labels: Vec<usize> = picked.iter().map(|e| e.2).collect();
                    let (a, b) = (tape.constant(ta), tape.constant(tb));
                    let l = p.loss(&mut tape, a, b, &labels, Some(&mut rng));
                    let l = tape.scale(l, w);
                    root = tape.add(root, l);
                }
            }
            let full = tape.scalar(root);
            if !full.is_finite() {
                return Err(ModelError::NonFiniteLoss(full));
            }
            let grads = tape.backward(root);
            if !grads.is_finite() {
                return Err(ModelError::NonFiniteLoss(full));
            }
            adam.step(&mut model.params, &grads);
            if joint {
                adam_dti.step(&mut model.dti.params, &grads);
                adam_ddi.step(&mut model.ddi.params, &grads);
            }
            total += value * batch.len() as f64;
        }
        report.loss_curve.push(total / order.len() as f64);
    }
    Ok(report)
}

/// `P(synergistic)` for each triple, refining with the current parameters.
pub fn synergy_scores(
    model: &SynergyModel,
    g: &HetGraph,
    cells: &CellLines,
    triples: &[SynergyTriple],
) -> Result<Vec<f64>, ModelError> {
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    Ok(model.predict(g, cells, triples)?.into_iter().map(|p| p[1]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::EntityKind;
    use crate::featurize::ExpressionProfile;
    use crate::graph::tests::toy;
    use crate::model::tests::toy_model;

    fn setup() -> (HetGraph, CellLines, Vec<SynergyTriple>) {
        let g = toy(4, 3, 1);
        let ps = g.nodes_of(EntityKind::Protein);
        let cells = CellLines::new(vec![ExpressionProfile::new("c", ps.iter().map(|&p| (p, 1.0)))]);
        let d = g.nodes_of(EntityKind::Drug);
        let t = vec![
            SynergyTriple::new(d[0], d[1], 0, 1),
            SynergyTriple::new(d[2], d[3], 0, 0),
            SynergyTriple::new(d[0], d[3], 0, 1),
        ];
        (g, cells, t)
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let (g, cells, t) = setup();
        let mut m = toy_model(2, 4);
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let r = train(&mut m, &g, &cells, &t, None, &cfg).unwrap();
        assert!(r.loss_curve.is_empty());
        assert_eq!(m.params, before.params);
    }

    #[test]
    fn deterministic_curves() {
        let (g, cells, t) = setup();
        let cfg = TrainConfig { epochs: 5, lr: 1e-2, batch_size: 2, ..Default::default() };
        let run = || {
            let mut m = toy_model(2, 4);
            train(&mut m, &g, &cells, &t, None, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.loss_curve.len(), 5);
    }

    #[test]
    fn no_predictive_has_no_pseudo_edges() {
        let (g, cells, t) = setup();
        let mut m = toy_model(2, 4);
        m.dti.params.zero_all();
        let cfg = TrainConfig { epochs: 3, variant: Variant::NoPredictive, ..Default::default() };
        let r = train(&mut m, &g, &cells, &t, None, &cfg).unwrap();
        assert_eq!(r.pseudo_edges, vec![0, 0, 0]);
    }
}
