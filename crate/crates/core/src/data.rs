//! Labelled-triple and score-file I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::entity::EntityKind;
use crate::featurize::CellLines;
use crate::graph::HetGraph;
use crate::model::SynergyTriple;
use crate::tsv::{ParseError, Table};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("`{0}` is not a known drug")]
    UnknownDrug(String),
    #[error("`{0}` is not a known cell line")]
    UnknownCell(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps a continuous synergy score to a binary label: `score > cut` is
/// synergistic.
pub fn binarize(score: f64, cut: f64) -> u8 {
    u8::from(score > cut)
}

/// Reads a triples TSV. The fourth column is `label` (0/1) or, when
/// `binarize_at` is given, a continuous `score` thresholded by [`binarize`].
pub fn load_triples(
    path: &Path,
    g: &HetGraph,
    cells: &CellLines,
    binarize_at: Option<f64>,
) -> Result<Vec<SynergyTriple>, DataError> {
    let table = Table::read(path)?;
    let last = if binarize_at.is_some() { "score" } else { "label" };
    table.expect_header(&["drug_a", "drug_b", "cell_id", last])?;
    let drug = |id: &str| {
        g.resolve(id)
            .filter(|&i| g.kind(i) == EntityKind::Drug)
            .ok_or_else(|| DataError::UnknownDrug(id.to_string()))
    };
    let mut out = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let a = drug(row.get(0))?;
        let b = drug(row.get(1))?;
        if a == b {
            return Err(table.error(row, "a combination needs two distinct drugs").into());
        }
        let cell = cells
            .resolve(row.get(2))
            .ok_or_else(|| DataError::UnknownCell(row.get(2).to_string()))?;
        let label = match binarize_at {
            Some(cut) => {
                let s: f64 = row.get(3).parse().map_err(|e| table.error(row, format!("bad score: {e}")))?;
                binarize(s, cut)
            }
            None => match row.get(3) {
                "0" => 0,
                "1" => 1,
                other => return Err(table.error(row, format!("label must be 0 or 1, got `{other}`")).into()),
            },
        };
        out.push(SynergyTriple::new(a, b, cell, label));
    }
    Ok(out)
}

pub fn write_triples(path: &Path, g: &HetGraph, cells: &CellLines, triples: &[SynergyTriple]) -> Result<(), DataError> {
    let mut s = String::from("drug_a\tdrug_b\tcell_id\tlabel\n");
    for t in triples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            g.node(t.drug_a).id,
            g.node(t.drug_b).id,
            cells.get(t.cell).cell_id,
            t.label
        );
    }
    write(path, &s)
}

/// Reads a `score label` TSV for offline evaluation.
pub fn load_scores(path: &Path) -> Result<(Vec<f64>, Vec<bool>), DataError> {
    let table = Table::read(path)?;
    table.expect_header(&["score", "label"])?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in &table.rows {
        scores.push(row.get(0).parse::<f64>().map_err(|e| table.error(row, format!("bad score: {e}")))?);
        labels.push(match row.get(1) {
            "0" => false,
            "1" => true,
            other => return Err(table.error(row, format!("label must be 0 or 1, got `{other}`")).into()),
        });
    }
    Ok((scores, labels))
}

/// One row of the prediction output file.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub drug_a: String,
    pub drug_b: String,
    pub cell_id: String,
    pub probs: [f64; 2],
    pub provenance: String,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), DataError> {
    let mut s = String::from("drug_a\tdrug_b\tcell_id\tp_antagonistic\tp_synergistic\tpredicted_label\tprovenance\n");
    for r in rows {
        let label = u8::from(r.probs[1] >= r.probs[0]);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.drug_a, r.drug_b, r.cell_id, r.probs[0], r.probs[1], label, r.provenance
        );
    }
    write(path, &s)
}

pub(crate) fn write(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::ExpressionProfile;
    use crate::graph::tests::toy;

    #[test]
    fn labels_and_scores() {
        let g = toy(3, 1, 0);
        let cells = CellLines::new(vec![ExpressionProfile::new("c1", [(3, 1.0)])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        fs::write(&p, "drug_a\tdrug_b\tcell_id\tlabel\nd0\td1\tc1\t1\nd2\td1\tc1\t0\n").unwrap();
        let t = load_triples(&p, &g, &cells, None).unwrap();
        assert_eq!(t, vec![SynergyTriple::new(0, 1, 0, 1), SynergyTriple::new(2, 1, 0, 0)]);
        fs::write(&p, "drug_a\tdrug_b\tcell_id\tscore\nd0\td1\tc1\t0.0\nd2\td1\tc1\t3.5\n").unwrap();
        let t = load_triples(&p, &g, &cells, Some(0.0)).unwrap();
        assert_eq!(t[0].label, 0);
        assert_eq!(t[1].label, 1);
        fs::write(&p, "drug_a\tdrug_b\tcell_id\tlabel\nd0\tp0\tc1\t1\n").unwrap();
        assert!(matches!(load_triples(&p, &g, &cells, None), Err(DataError::UnknownDrug(_))));
        fs::write(&p, "drug_a\tdrug_b\tcell_id\tlabel\nd0\td1\tc1\t2\n").unwrap();
        assert!(matches!(load_triples(&p, &g, &cells, None), Err(DataError::Parse(_))));
    }
}
