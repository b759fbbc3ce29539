//! Macro-averaged retrieval and generation reports with bootstrap CIs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kg::ConceptId;
use crate::metrics::{
    bootstrap_ci, rouge2, rouge_l, rouge_tokens, set_metrics, CiReport, MetricsError,
};

/// Names of the two retrieval systems compared by `evaluate`.
pub const BASELINE_SYSTEM: &str = "concept_extractor";
pub const MODEL_SYSTEM: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotePrediction {
    pub note_id: String,
    pub predicted: Vec<ConceptId>,
    pub gold: Vec<ConceptId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub notes: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Bootstrap interval over per-note F1.
    pub f1_ci: CiReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
        }
    }
}

pub fn evaluate_system(
    system: &str,
    rows: &[NotePrediction],
    bootstrap: &BootstrapConfig,
    seed: u64,
) -> Result<SystemReport, MetricsError> {
    let mut per_note = Vec::with_capacity(rows.len());
    for r in rows {
        let pred: BTreeSet<&ConceptId> = r.predicted.iter().collect();
        let gold: BTreeSet<&ConceptId> = r.gold.iter().collect();
        per_note.push(set_metrics(&pred, &gold)?);
    }
    let n = per_note.len() as f64;
    let mean = |f: fn(&crate::metrics::SetMetrics) -> f64| per_note.iter().map(f).sum::<f64>() / n;
    let f1s: Vec<f64> = per_note.iter().map(|m| m.f1).collect();
    Ok(SystemReport {
        system: system.to_string(),
        notes: rows.len(),
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        f1: mean(|m| m.f1),
        f1_ci: bootstrap_ci(&f1s, bootstrap.resamples, bootstrap.level, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub outputs: usize,
    pub rouge_l_f1: f64,
    pub rouge2_f1: f64,
    pub rouge_l_ci: CiReport,
}

/// `pairs` holds `(generated, reference)` texts.
pub fn evaluate_generation(
    pairs: &[(String, String)],
    bootstrap: &BootstrapConfig,
    seed: u64,
) -> Result<GenerationReport, MetricsError> {
    let mut l = Vec::with_capacity(pairs.len());
    let mut two = Vec::with_capacity(pairs.len());
    for (c, r) in pairs {
        let (c, r) = (rouge_tokens(c), rouge_tokens(r));
        l.push(rouge_l(&c, &r).f1);
        two.push(rouge2(&c, &r).f1);
    }
    let n = pairs.len().max(1) as f64;
    Ok(GenerationReport {
        outputs: pairs.len(),
        rouge_l_f1: l.iter().sum::<f64>() / n,
        rouge2_f1: two.iter().sum::<f64>() / n,
        rouge_l_ci: bootstrap_ci(&l, bootstrap.resamples, bootstrap.level, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub bootstrap: BootstrapConfig,
    pub systems: Vec<SystemReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationReport>,
}

impl EvaluationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system\tnotes\trecall\tprecision\tf1\tf1_ci_low\tf1_ci_high\n");
        for s in &self.systems {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                s.system, s.notes, s.recall, s.precision, s.f1, s.f1_ci.lower, s.f1_ci.upper
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(n: u32) -> ConceptId {
        ConceptId::new(&format!("C{n:07}")).unwrap()
    }

    #[test]
    fn macro_average_and_tsv() {
        let rows = vec![
            NotePrediction {
                note_id: "a".into(),
                predicted: vec![cid(1), cid(2)],
                gold: vec![cid(1)],
            },
            NotePrediction {
                note_id: "b".into(),
                predicted: vec![],
                gold: vec![cid(3)],
            },
        ];
        let r = evaluate_system(MODEL_SYSTEM, &rows, &BootstrapConfig::default(), 7).unwrap();
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.precision, 0.25);
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.f1_ci.lower <= r.f1 && r.f1 <= r.f1_ci.upper);
        let report = EvaluationReport {
            seed: 7,
            bootstrap: BootstrapConfig::default(),
            systems: vec![r],
            generation: None,
        };
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("model\t2\t0.500000\t0.250000"));
    }

    #[test]
    fn empty_gold_is_an_error() {
        let rows = vec![NotePrediction {
            note_id: "a".into(),
            predicted: vec![cid(1)],
            gold: vec![],
        }];
        assert!(evaluate_system("x", &rows, &BootstrapConfig::default(), 1).is_err());
    }

    #[test]
    fn generation_scores() {
        let pairs = vec![
            ("the cat sat".to_string(), "the cat ate".to_string()),
            ("a b".to_string(), "a b".to_string()),
        ];
        let g = evaluate_generation(&pairs, &BootstrapConfig::default(), 1).unwrap();
        assert!((g.rouge_l_f1 - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((g.rouge2_f1 - 0.75).abs() < 1e-12);
    }
}
