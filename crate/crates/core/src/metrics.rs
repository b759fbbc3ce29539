//! Set retrieval metrics, ROUGE-2 / ROUGE-L over lowercase whitespace tokens,
//! and percentile bootstrap confidence intervals.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("bootstrap needs at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("resample count must be positive")]
    NoResamples,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// F1 is 0 when precision and recall are both 0. Empty predictions give
/// precision 0.
pub fn set_metrics<T: Ord>(
    pred: &BTreeSet<T>,
    gold: &BTreeSet<T>,
) -> Result<SetMetrics, MetricsError> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let hit = pred.intersection(gold).count() as f64;
    let recall = hit / gold.len() as f64;
    let precision = if pred.is_empty() {
        0.0
    } else {
        hit / pred.len() as f64
    };
    Ok(SetMetrics {
        recall,
        precision,
        f1: f1(precision, recall),
    })
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Recall, precision and F1 of the candidate against the reference.
pub type RougeScores = SetMetrics;

fn rouge_scores(overlap: usize, cand_len: usize, ref_len: usize) -> RougeScores {
    let recall = if ref_len == 0 {
        0.0
    } else {
        overlap as f64 / ref_len as f64
    };
    let precision = if cand_len == 0 {
        0.0
    } else {
        overlap as f64 / cand_len as f64
    };
    SetMetrics {
        recall,
        precision,
        f1: f1(precision, recall),
    }
}

/// Clipped bigram overlap; a side with fewer than 2 tokens scores 0.
pub fn rouge2<S: AsRef<str> + Ord>(cand: &[S], reference: &[S]) -> RougeScores {
    fn bigrams<S: AsRef<str> + Ord>(t: &[S]) -> BTreeMap<(&str, &str), usize> {
        let mut m = BTreeMap::new();
        for w in t.windows(2) {
            *m.entry((w[0].as_ref(), w[1].as_ref())).or_insert(0) += 1;
        }
        m
    }
    let (c, r) = (bigrams(cand), bigrams(reference));
    let overlap = c
        .iter()
        .map(|(k, n)| (*n).min(r.get(k).copied().unwrap_or(0)))
        .sum();
    rouge_scores(
        overlap,
        cand.len().saturating_sub(1),
        reference.len().saturating_sub(1),
    )
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: PartialEq>(cand: &[S], reference: &[S]) -> RougeScores {
    rouge_scores(lcs_len(cand, reference), cand.len(), reference.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
}

/// Linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of the mean.
pub fn bootstrap_ci(
    scores: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<CiReport, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewScores(scores.len()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::Level(level));
    }
    if resamples == 0 {
        return Err(MetricsError::NoResamples);
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let mut rng = rng_for(seed, "bootstrap");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| scores[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(CiReport {
        mean,
        lower: quantile(&means, alpha),
        upper: quantile(&means, 1.0 - alpha),
        level,
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&'static str]) -> BTreeSet<&'static str> {
        xs.iter().copied().collect()
    }

    #[test]
    fn worked_set_example() {
        let m = set_metrics(&set(&["A", "B", "C", "D"]), &set(&["A", "B", "E"])).unwrap();
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.precision, 0.5);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn set_edge_cases() {
        assert_eq!(
            set_metrics(&set(&["A"]), &set(&[])),
            Err(MetricsError::EmptyGold)
        );
        let m = set_metrics(&set(&[]), &set(&["A"])).unwrap();
        assert_eq!((m.recall, m.precision, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn worked_rouge_example() {
        let c = rouge_tokens("the cat sat");
        let r = rouge_tokens("The cat ate");
        assert_eq!(rouge_l(&c, &r).f1, 2.0 / 3.0);
        assert_eq!(rouge2(&c, &r).f1, 0.5);
        assert_eq!(rouge2(&rouge_tokens("cat"), &r).f1, 0.0);
    }

    #[test]
    fn rouge2_clips_repeats() {
        let c = rouge_tokens("a b a b a b");
        let r = rouge_tokens("a b c");
        let s = rouge2(&c, &r);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.precision, 1.0 / 5.0);
    }

    #[test]
    fn bootstrap_constant_and_errors() {
        let ci = bootstrap_ci(&[0.7; 10], 1000, 0.95, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (ci.mean, ci.mean));
        assert!((ci.mean - 0.7).abs() < 1e-15);
        assert_eq!(
            bootstrap_ci(&[1.0], 10, 0.95, 1),
            Err(MetricsError::TooFewScores(1))
        );
        assert!(bootstrap_ci(&[1.0, 2.0], 10, 1.0, 1).is_err());
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let xs: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        assert_eq!(
            bootstrap_ci(&xs, 500, 0.9, 3).unwrap(),
            bootstrap_ci(&xs, 500, 0.9, 3).unwrap()
        );
    }
}
