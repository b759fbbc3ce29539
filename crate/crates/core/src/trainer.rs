//! Hop-wise training of the path model with `L = L_pred + L_CL` and Adam.
//!
//! Each example runs the same exploration used at inference on a recording
//! tape. At every hop, `L_pred` is the BCE between the hop's node β and the
//! hop's positive nodes, and `L_CL` is a cosine hinge between the anchor
//! `h_x ⊙ h_v` and positive versus negative candidate path embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Note;
use crate::encoder::{BaseEmbeddings, EmbeddingProvider, EncoderError};
use crate::extract::{extract_concepts, ConceptWeighting, ExtractError, VocabularyIndex};
use crate::kg::{ConceptId, KnowledgeGraph};
use crate::numerics::{
    clip_grad_norm, cosine_similarity, Adam, AdamConfig, Gradients, Tape, Tensor, TensorError, Var,
};
use crate::ranker::{
    encode_input, explore, Exploration, NeuralScorer, PathModel, RankedPathSet, RankerConfig,
    RankerError,
};
use crate::seed::rng_for;

/// Lower/upper clamp applied to β before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("contrastive loss needs at least one positive and one negative")]
    NoPairs,
    #[error("anchor embedding has zero norm")]
    ZeroAnchor,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss on note {note_id}; example: {dump}")]
    NonFinite { note_id: String, dump: String },
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global grad-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            margin: 0.3,
            epochs: 20,
            batch_size: 8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(
                "lr must be finite and non-negative".into(),
            ));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(TrainError::Config("margin must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_cl: f64,
    pub total: f64,
}

/// One note prepared for the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub note_id: String,
    pub text: String,
    pub text_vector: Vec<f64>,
    /// Extracted concepts present in the graph.
    pub sources: BTreeSet<ConceptId>,
    /// Golds reachable from `sources` within `max_hops`.
    pub gold: BTreeSet<ConceptId>,
    /// W_CUI of each source for this note.
    pub weights: BTreeMap<ConceptId, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub notes: usize,
    pub kept: usize,
    pub no_sources: Vec<String>,
    pub no_reachable_gold: Vec<String>,
    pub unreachable_golds: usize,
}

/// Extracts sources, attaches W_CUI weights and drops golds that are not
/// reachable within `max_hops`. With `require_gold`, notes left without a
/// gold are skipped; otherwise they are kept with an empty gold set.
pub fn prepare_examples(
    notes: &[Note],
    graph: &KnowledgeGraph,
    index: &VocabularyIndex,
    weighting: &ConceptWeighting,
    provider: &dyn EmbeddingProvider,
    max_hops: usize,
    require_gold: bool,
) -> Result<(Vec<TrainingExample>, PrepReport), TrainError> {
    let mut report = PrepReport {
        notes: notes.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for note in notes {
        let mentions: Vec<ConceptId> = extract_concepts(&note.text, index)
            .into_iter()
            .map(|m| m.cui)
            .filter(|c| graph.contains(c))
            .collect();
        let sources: BTreeSet<ConceptId> = mentions.iter().cloned().collect();
        if sources.is_empty() {
            report.no_sources.push(note.note_id.clone());
            continue;
        }
        let reach = graph.distances_from(&sources, max_hops);
        let mut gold = BTreeSet::new();
        for g in note.gold_cuis.iter().flatten() {
            if reach.contains_key(g) {
                gold.insert(g.clone());
            } else {
                report.unreachable_golds += 1;
            }
        }
        if require_gold && gold.is_empty() {
            report.no_reachable_gold.push(note.note_id.clone());
            continue;
        }
        let all = match weighting.note_weights(&note.note_id) {
            Some(w) => w.clone(),
            None => weighting.weights_for_mentions(&mentions, |c| {
                graph.concept(c).ok().map(|c| c.semantic_types.as_slice())
            }),
        };
        let weights = sources
            .iter()
            .map(|s| (s.clone(), all.get(s).copied().unwrap_or(0.0)))
            .collect();
        out.push(TrainingExample {
            note_id: note.note_id.clone(),
            text: note.text.clone(),
            text_vector: provider.embed_note(&note.note_id, &note.text)?,
            sources,
            gold,
            weights,
        });
    }
    report.kept = out.len();
    Ok((out, report))
}

/// Mean BCE of `probs` (clamped to `[PROB_EPS, 1 - PROB_EPS]`) against labels.
pub fn bce_prediction_loss(probs: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(TrainError::EmptyCandidates);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&v, &y)| {
            let v = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -v.ln()
            } else {
                -(1.0 - v).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `max(cos_neg - cos_pos + margin, 0)`.
pub fn hinge(cos_pos: f64, cos_neg: f64, margin: f64) -> f64 {
    (cos_neg - cos_pos + margin).max(0.0)
}

/// Mean hinge over every (positive, negative) pair.
pub fn contrastive_loss(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    margin: f64,
) -> Result<f64, TrainError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(TrainError::NoPairs);
    }
    if anchor.iter().all(|a| *a == 0.0) {
        return Err(TrainError::ZeroAnchor);
    }
    let cos = |f: &Vec<f64>| cosine_similarity(anchor, f);
    let pos = positives.iter().map(cos).collect::<Result<Vec<_>, _>>()?;
    let neg = negatives.iter().map(cos).collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += hinge(*p, *n, margin);
        }
    }
    Ok(total / (pos.len() * neg.len()) as f64)
}

/// Candidate indices whose end node is / is not in `positives`.
pub fn label_paths(
    set: &RankedPathSet,
    positives: &BTreeSet<ConceptId>,
) -> (Vec<usize>, Vec<usize>) {
    (0..set.candidates.len()).partition(|&i| positives.contains(set.candidates[i].path.end()))
}

/// Positive nodes at hop `hop`: the golds, plus nodes exactly `hop` edges from
/// the sources that lie on a shortest source-to-gold path.
pub fn hop_positives(
    graph: &KnowledgeGraph,
    sources: &BTreeSet<ConceptId>,
    gold: &BTreeSet<ConceptId>,
    hop: usize,
    max_hops: usize,
) -> BTreeSet<ConceptId> {
    let dist = graph.distances_from(sources, max_hops);
    let mut out = gold.clone();
    for (v, &dv) in &dist {
        if dv != hop || gold.contains(v) {
            continue;
        }
        let single: BTreeSet<ConceptId> = [v.clone()].into_iter().collect();
        let from_v = graph.distances_from(&single, max_hops);
        let on_shortest = gold
            .iter()
            .any(|g| matches!((dist.get(g), from_v.get(g)), (Some(dg), Some(dvg)) if dv + dvg == *dg && *dg > hop));
        if on_shortest {
            out.insert(v.clone());
        }
    }
    out
}

fn cosine_var(tape: &Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let dot = tape.sum(tape.mul(a, b)?)?;
    let na = tape.sqrt(tape.sum(tape.mul(a, a)?)?)?;
    let nb = tape.sqrt(tape.sum(tape.mul(b, b)?)?)?;
    tape.div(dot, tape.mul(na, nb)?)
}

/// Differentiable per-hop losses on the scorer's recorded variables.
fn hop_loss(
    tape: &Tape,
    scorer: &NeuralScorer<'_>,
    set: &RankedPathSet,
    scores: &[Var],
    positives: &BTreeSet<ConceptId>,
    margin: f64,
) -> Result<(Var, Var), TrainError> {
    let (m, k) = (set.candidates.len(), set.nodes.len());
    let node_pos: BTreeMap<&ConceptId, usize> = set
        .nodes
        .iter()
        .enumerate()
        .map(|(j, n)| (&n.cui, j))
        .collect();
    let mut group = vec![0.0; m * k];
    for (i, c) in set.candidates.iter().enumerate() {
        group[i * k + node_pos[c.path.end()]] = 1.0;
    }
    let s = tape.reshape(tape.concat(scores, 0)?, &[1, m])?;
    let node_scores = tape.matmul(s, tape.constant(Tensor::new(vec![m, k], group)?))?;
    let beta = tape.clamp(tape.softmax(node_scores)?, PROB_EPS, 1.0 - PROB_EPS)?;
    let y: Vec<f64> = set
        .nodes
        .iter()
        .map(|n| if positives.contains(&n.cui) { 1.0 } else { 0.0 })
        .collect();
    let yv = tape.constant(Tensor::row(y.clone()));
    let ny = tape.constant(Tensor::row(y.iter().map(|v| 1.0 - v).collect()));
    let log_b = tape.ln(beta)?;
    let log_nb = tape.ln(tape.add_scalar(tape.scale(beta, -1.0)?, 1.0)?)?;
    let ll = tape.add(tape.mul(yv, log_b)?, tape.mul(ny, log_nb)?)?;
    let l_pred = tape.scale(tape.mean(ll)?, -1.0)?;

    let (pos, neg) = label_paths(set, positives);
    let l_cl = if pos.is_empty() || neg.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let anchor = tape.mul(scorer.input.hx, scorer.input.hv)?;
        let cos = |i: usize| cosine_var(tape, anchor, scorer.paths[set.candidates[i].path.handle]);
        let cp = pos.iter().map(|&i| cos(i)).collect::<Result<Vec<_>, _>>()?;
        let cn = neg.iter().map(|&i| cos(i)).collect::<Result<Vec<_>, _>>()?;
        let mut terms = Vec::with_capacity(cp.len() * cn.len());
        for p in &cp {
            for n in &cn {
                terms.push(tape.relu(tape.add_scalar(tape.sub(*n, *p)?, margin)?)?);
            }
        }
        tape.mean(tape.concat(&terms, 0)?)?
    };
    Ok((l_pred, l_cl))
}

/// Result of one recorded forward pass.
pub struct ExampleForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub exploration: Exploration,
}

/// Full per-example loss, mean over hops of `L_pred + L_CL`, on `tape`.
pub fn example_loss(
    model: &PathModel,
    graph: &KnowledgeGraph,
    base: &BaseEmbeddings,
    example: &TrainingExample,
    ranker: &RankerConfig,
    margin: f64,
    tape: &Tape,
) -> Result<ExampleForward, TrainError> {
    let input = encode_input(
        model,
        tape,
        &example.text_vector,
        &example.sources,
        base,
        &example.weights,
    )?;
    let mut scorer = NeuralScorer::new(model, tape, graph, base, &example.weights, input);
    let exploration = explore(graph, &mut scorer, &example.sources, ranker)?;
    let mut preds = Vec::new();
    let mut cls = Vec::new();
    for (h, set) in exploration.hops.iter().enumerate() {
        let positives = hop_positives(
            graph,
            &example.sources,
            &example.gold,
            h + 1,
            ranker.max_hops,
        );
        let (p, c) = hop_loss(
            tape,
            &scorer,
            set,
            &scorer.hop_scores[h],
            &positives,
            margin,
        )?;
        preds.push(p);
        cls.push(c);
    }
    let l_pred = tape.mean(tape.concat(&preds, 0)?)?;
    let l_cl = tape.mean(tape.concat(&cls, 0)?)?;
    let loss = tape.add(l_pred, l_cl)?;
    let (lp, lc) = (tape.item(l_pred)?, tape.item(l_cl)?);
    Ok(ExampleForward {
        loss,
        breakdown: LossBreakdown {
            l_pred: lp,
            l_cl: lc,
            total: lp + lc,
        },
        exploration,
    })
}

/// Exploration without gradient recording.
pub fn retrieve(
    model: &PathModel,
    graph: &KnowledgeGraph,
    base: &BaseEmbeddings,
    example: &TrainingExample,
    ranker: &RankerConfig,
) -> Result<Exploration, TrainError> {
    let tape = Tape::no_grad();
    let input = encode_input(
        model,
        &tape,
        &example.text_vector,
        &example.sources,
        base,
        &example.weights,
    )?;
    let mut scorer = NeuralScorer::new(model, &tape, graph, base, &example.weights, input);
    Ok(explore(graph, &mut scorer, &example.sources, ranker)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_cl: f64,
    pub recall_at_n: f64,
}

fn recall(pred: &[ConceptId], gold: &BTreeSet<ConceptId>) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().filter(|p| gold.contains(p)).count() as f64 / gold.len() as f64
}

/// Forward + backward for a batch in parallel, reduced in `note_id` order.
/// Returns the summed breakdown and recall.
fn batch_gradients(
    model: &PathModel,
    graph: &KnowledgeGraph,
    base: &BaseEmbeddings,
    batch: &[&TrainingExample],
    ranker: &RankerConfig,
    margin: f64,
) -> Result<Vec<(Gradients, LossBreakdown, f64)>, TrainError> {
    let mut ordered: Vec<&TrainingExample> = batch.to_vec();
    ordered.sort_by(|a, b| a.note_id.cmp(&b.note_id));
    ordered
        .par_iter()
        .map(|ex| {
            let tape = Tape::new();
            let fwd = example_loss(model, graph, base, ex, ranker, margin, &tape)?;
            if !fwd.breakdown.total.is_finite() {
                return Err(TrainError::NonFinite {
                    note_id: ex.note_id.clone(),
                    dump: serde_json::to_string(ex).unwrap_or_default(),
                });
            }
            let grads = tape.backward(fwd.loss)?;
            Ok((
                grads,
                fwd.breakdown,
                recall(&fwd.exploration.final_nodes, &ex.gold),
            ))
        })
        .collect()
}

/// Mean full-batch loss with no parameter update.
pub fn dataset_loss(
    model: &PathModel,
    graph: &KnowledgeGraph,
    base: &BaseEmbeddings,
    examples: &[TrainingExample],
    ranker: &RankerConfig,
    margin: f64,
) -> Result<LossBreakdown, TrainError> {
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let rows = batch_gradients(model, graph, base, &refs, ranker, margin)?;
    let n = rows.len() as f64;
    let (lp, lc) = rows
        .iter()
        .fold((0.0, 0.0), |(a, b), (_, l, _)| (a + l.l_pred, b + l.l_cl));
    Ok(LossBreakdown {
        l_pred: lp / n,
        l_cl: lc / n,
        total: lp / n + lc / n,
    })
}

/// Trains in place. Batches are drawn from a per-epoch shuffle seeded by
/// `seed`; within a batch, gradients are averaged in `note_id` order.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut PathModel,
    graph: &KnowledgeGraph,
    base: &BaseEmbeddings,
    examples: &[TrainingExample],
    ranker: &RankerConfig,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    config.validate()?;
    ranker.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.store,
    );
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<&TrainingExample> = examples.iter().collect();
        order.sort_by(|a, b| a.note_id.cmp(&b.note_id));
        order.shuffle(&mut rng_for(seed, &format!("train.epoch.{epoch}")));
        let (mut lp, mut lc, mut rec) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let rows = batch_gradients(model, graph, base, batch, ranker, config.margin)?;
            model.store.zero_grad();
            let scale = 1.0 / rows.len() as f64;
            for (grads, loss, r) in &rows {
                model.store.accumulate(grads, scale);
                lp += loss.l_pred;
                lc += loss.l_cl;
                rec += r;
            }
            if config.clip_norm > 0.0 {
                clip_grad_norm(&mut model.store, config.clip_norm);
            }
            adam.step(&mut model.store);
        }
        let n = examples.len() as f64;
        let m = EpochMetrics {
            epoch,
            l_pred: lp / n,
            l_cl: lc / n,
            recall_at_n: rec / n,
        };
        log::info!(
            "epoch {epoch}: l_pred={:.5} l_cl={:.5} recall@n={:.3}",
            m.l_pred,
            m.l_cl,
            m.recall_at_n
        );
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Concept, RawTriple};

    fn cid(n: u32) -> ConceptId {
        ConceptId::new(&format!("C{n:07}")).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        assert!(
            (bce_prediction_loss(&[0.5, 0.5], &[true, false]).unwrap() - 2f64.ln()).abs() < 1e-12
        );
        assert!((bce_prediction_loss(&[0.5], &[false]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let near = bce_prediction_loss(&[1.0], &[true]).unwrap();
        assert!((near - 1e-7).abs() < 1e-12, "{near}");
        assert!(bce_prediction_loss(&[], &[]).is_err());
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge(1.0, 0.0, 0.5), 0.0);
        assert_eq!(hinge(0.3, 0.3, 0.25), 0.25);
        assert_eq!(hinge(0.7, 0.7, 0.0), 0.0);
    }

    #[test]
    fn contrastive_pairs_and_errors() {
        let a = vec![1.0, 0.0];
        let pos = vec![vec![1.0, 0.0]];
        let neg = vec![vec![0.0, 1.0]];
        assert_eq!(contrastive_loss(&a, &pos, &neg, 0.5).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&a, &neg, &pos, 0.5).unwrap(), 1.5);
        assert!(contrastive_loss(&a, &pos, &[], 0.5).is_err());
        assert!(matches!(
            contrastive_loss(&[0.0, 0.0], &pos, &neg, 0.5),
            Err(TrainError::ZeroAnchor)
        ));
    }

    fn chain() -> KnowledgeGraph {
        let concepts = (1..=5)
            .map(|i| Concept::new(cid(i), vec![format!("n{i}")], vec![]).unwrap())
            .collect();
        let t = |s: u32, d: u32| RawTriple {
            src: format!("C{s:07}"),
            rel: "r".into(),
            dst: format!("C{d:07}"),
            line: 1,
        };
        KnowledgeGraph::build(
            concepts,
            vec![t(1, 2), t(2, 3), t(1, 4), t(4, 5)],
            &["r".to_string()],
        )
        .unwrap()
        .0
    }

    #[test]
    fn hop_positive_nodes() {
        let g = chain();
        let s: BTreeSet<_> = [cid(1)].into_iter().collect();
        let gold: BTreeSet<_> = [cid(3)].into_iter().collect();
        assert_eq!(
            hop_positives(&g, &s, &gold, 1, 2),
            [cid(2), cid(3)].into_iter().collect()
        );
        assert_eq!(hop_positives(&g, &s, &gold, 2, 2), gold);
    }

    #[test]
    fn labels_partition_candidates() {
        use crate::ranker::aggregate_and_select;
        use crate::ranker::PathState;
        let p = |n: u32| PathState {
            source: cid(n),
            hops: vec![],
            terminated: false,
            handle: 0,
        };
        let set = aggregate_and_select(1, (1..=5).map(|i| (p(i), i as f64)).collect(), 2).unwrap();
        let gold: BTreeSet<_> = [cid(2), cid(4)].into_iter().collect();
        let (pos, neg) = label_paths(&set, &gold);
        assert_eq!((pos.len(), neg.len(), pos.len() * neg.len()), (2, 3, 6));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig {
            margin: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
