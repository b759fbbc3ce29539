//! Hop-wise path exploration: extend surviving paths by one edge, score every
//! candidate, aggregate scores per end node, keep the top-N nodes.

mod model;

pub use model::{
    encode_input, mean_source_vector, EncodedInput, ModelConfig, NeuralScorer, PathModel, Variant,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::kg::{ConceptId, GraphError, KnowledgeGraph, RelationType, Triple};
use crate::numerics::{softmax, TensorError};

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("no source concepts")]
    EmptySources,
    #[error("no candidate paths to aggregate")]
    EmptyCandidates,
    #[error("path ending at {0} is terminated and cannot be extended")]
    Terminated(String),
    #[error("{src} -[{rel}]-> {dst} is not an edge of the graph")]
    NotAnEdge {
        src: String,
        rel: String,
        dst: String,
    },
    #[error("note text is empty")]
    EmptyText,
    #[error("no encoding for {0} in the current hop")]
    MissingEncoding(String),
    #[error("invalid ranker configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub top_n: usize,
    pub max_hops: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            top_n: 4,
            max_hops: 2,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<(), RankerError> {
        if self.top_n == 0 || self.max_hops == 0 {
            return Err(RankerError::Config(
                "top_n and max_hops must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A path `v1 -e1-> v2 …` and the scorer handle of its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PathState {
    pub source: ConceptId,
    pub hops: Vec<Triple>,
    /// Last hop is a self-loop.
    pub terminated: bool,
    pub handle: usize,
}

impl PathState {
    pub fn end(&self) -> &ConceptId {
        self.hops.last().map_or(&self.source, |t| &t.dst)
    }

    pub fn nodes(&self) -> Vec<ConceptId> {
        std::iter::once(self.source.clone())
            .chain(self.hops.iter().map(|t| t.dst.clone()))
            .collect()
    }

    pub fn relations(&self) -> Vec<String> {
        self.hops.iter().map(|t| t.rel.label.clone()).collect()
    }
}

/// Produces path embeddings and scores. Handles index scorer-owned storage.
pub trait PathScorer {
    /// Called before any root or extension of hop `hop` (1-based) with the end
    /// nodes of the paths about to be extended.
    fn begin_hop(&mut self, hop: usize, frontier: &BTreeSet<ConceptId>) -> Result<(), RankerError>;
    fn root(&mut self, source: &ConceptId) -> Result<usize, RankerError>;
    fn extend(
        &mut self,
        parent: usize,
        rel: &RelationType,
        target: &ConceptId,
    ) -> Result<usize, RankerError>;
    fn score(&mut self, path: &PathState) -> Result<f64, RankerError>;
}

/// Zero-hop states, one per distinct source.
pub fn init_paths(
    scorer: &mut dyn PathScorer,
    sources: &BTreeSet<ConceptId>,
) -> Result<Vec<PathState>, RankerError> {
    if sources.is_empty() {
        return Err(RankerError::EmptySources);
    }
    sources
        .iter()
        .map(|s| {
            Ok(PathState {
                source: s.clone(),
                hops: Vec::new(),
                terminated: false,
                handle: scorer.root(s)?,
            })
        })
        .collect()
}

pub fn extend_path(
    graph: &KnowledgeGraph,
    scorer: &mut dyn PathScorer,
    state: &PathState,
    rel: &RelationType,
    target: &ConceptId,
) -> Result<PathState, RankerError> {
    let end = state.end();
    if state.terminated {
        return Err(RankerError::Terminated(end.to_string()));
    }
    if !graph.has_edge(end, &rel.label, target) {
        return Err(RankerError::NotAnEdge {
            src: end.to_string(),
            rel: rel.label.clone(),
            dst: target.to_string(),
        });
    }
    let handle = scorer.extend(state.handle, rel, target)?;
    let mut hops = state.hops.clone();
    hops.push(Triple {
        src: end.clone(),
        rel: rel.clone(),
        dst: target.clone(),
    });
    Ok(PathState {
        source: state.source.clone(),
        hops,
        terminated: rel.is_self_loop,
        handle,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPath {
    pub path: PathState,
    pub score: f64,
    /// β of the path's end node.
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeScore {
    pub cui: ConceptId,
    /// Sum of S over candidates ending here.
    pub score: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPathSet {
    pub hop: usize,
    /// Every scored candidate, in scoring order.
    pub candidates: Vec<ScoredPath>,
    /// Candidate end nodes in CUI order; β sums to one.
    pub nodes: Vec<NodeScore>,
    /// `V_N` by descending score, ties by CUI.
    pub selected: Vec<ConceptId>,
    /// Highest-S candidate for each selected node, aligned with `selected`.
    pub witnesses: Vec<ScoredPath>,
}

/// Groups candidates by end node, sums their scores, normalizes with a
/// softmax over nodes and keeps the best `n`.
pub fn aggregate_and_select(
    hop: usize,
    scored: Vec<(PathState, f64)>,
    n: usize,
) -> Result<RankedPathSet, RankerError> {
    if scored.is_empty() {
        return Err(RankerError::EmptyCandidates);
    }
    let mut sums: BTreeMap<ConceptId, f64> = BTreeMap::new();
    for (p, s) in &scored {
        *sums.entry(p.end().clone()).or_insert(0.0) += s;
    }
    let keys: Vec<ConceptId> = sums.keys().cloned().collect();
    let values: Vec<f64> = sums.values().copied().collect();
    let betas = softmax(&values)?;
    let nodes: Vec<NodeScore> = keys
        .iter()
        .zip(values.iter().zip(&betas))
        .map(|(cui, (score, beta))| NodeScore {
            cui: cui.clone(),
            score: *score,
            beta: *beta,
        })
        .collect();
    let beta_of: BTreeMap<&ConceptId, f64> = nodes.iter().map(|n| (&n.cui, n.beta)).collect();

    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        nodes[b]
            .score
            .total_cmp(&nodes[a].score)
            .then_with(|| nodes[a].cui.cmp(&nodes[b].cui))
    });
    let selected: Vec<ConceptId> = order
        .iter()
        .take(n)
        .map(|&i| nodes[i].cui.clone())
        .collect();

    let candidates: Vec<ScoredPath> = scored
        .into_iter()
        .map(|(path, score)| {
            let beta = beta_of[path.end()];
            ScoredPath { path, score, beta }
        })
        .collect();
    let witnesses = selected
        .iter()
        .map(|cui| {
            candidates
                .iter()
                .filter(|c| c.path.end() == cui)
                .fold(None::<&ScoredPath>, |best, c| match best {
                    Some(b) if b.score >= c.score => Some(b),
                    _ => Some(c),
                })
                .cloned()
                .expect("selected node has a candidate")
        })
        .collect();
    Ok(RankedPathSet {
        hop,
        candidates,
        nodes,
        selected,
        witnesses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exploration {
    pub hops: Vec<RankedPathSet>,
    /// `V_N` of the last hop.
    pub final_nodes: Vec<ConceptId>,
}

/// Hop 1 scores every one-edge extension (self-loops included) of each
/// source; later hops extend only the previous hop's witnesses. Terminated
/// witnesses are carried forward and rescored so they keep competing for
/// beam slots. Stops after `max_hops` or once every witness is terminated.
pub fn explore(
    graph: &KnowledgeGraph,
    scorer: &mut dyn PathScorer,
    sources: &BTreeSet<ConceptId>,
    config: &RankerConfig,
) -> Result<Exploration, RankerError> {
    config.validate()?;
    if sources.is_empty() {
        return Err(RankerError::EmptySources);
    }
    for s in sources {
        graph.concept(s)?;
    }
    scorer.begin_hop(1, sources)?;
    let mut frontier = init_paths(scorer, sources)?;
    let mut hops = Vec::new();
    for hop in 1..=config.max_hops {
        if hop > 1 {
            let open: BTreeSet<ConceptId> = frontier
                .iter()
                .filter(|p| !p.terminated)
                .map(|p| p.end().clone())
                .collect();
            if open.is_empty() {
                break;
            }
            scorer.begin_hop(hop, &open)?;
        }
        let mut scored = Vec::new();
        for state in &frontier {
            if state.terminated {
                let s = scorer.score(state)?;
                scored.push((state.clone(), s));
                continue;
            }
            for (rel, target) in graph.neighbors(state.end())? {
                let next = extend_path(graph, scorer, state, &rel, &target)?;
                let s = scorer.score(&next)?;
                scored.push((next, s));
            }
        }
        let set = aggregate_and_select(hop, scored, config.top_n)?;
        frontier = set.witnesses.iter().map(|w| w.path.clone()).collect();
        hops.push(set);
    }
    let final_nodes = hops.last().map(|h| h.selected.clone()).unwrap_or_default();
    Ok(Exploration { hops, final_nodes })
}

/// JSONL row of the retrieval output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub note_id: String,
    pub hops: Vec<HopRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub paths: Vec<PathRecord>,
    pub selected: Vec<ConceptId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub nodes: Vec<ConceptId>,
    pub relations: Vec<String>,
    pub score: f64,
    pub beta: f64,
}

impl RetrievalRecord {
    pub fn from_exploration(note_id: &str, ex: &Exploration) -> Self {
        Self {
            note_id: note_id.to_string(),
            hops: ex
                .hops
                .iter()
                .map(|h| HopRecord {
                    paths: h
                        .candidates
                        .iter()
                        .map(|c| PathRecord {
                            nodes: c.path.nodes(),
                            relations: c.path.relations(),
                            score: c.score,
                            beta: c.beta,
                        })
                        .collect(),
                    selected: h.selected.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Concept, RawTriple};

    fn cid(n: u32) -> ConceptId {
        ConceptId::new(&format!("C{n:07}")).unwrap()
    }

    fn path_to(n: u32) -> PathState {
        PathState {
            source: cid(n),
            hops: vec![],
            terminated: false,
            handle: 0,
        }
    }

    #[test]
    fn select_top_nodes() {
        let set = aggregate_and_select(
            1,
            vec![(path_to(1), 0.5), (path_to(2), 0.1), (path_to(3), 0.3)],
            2,
        )
        .unwrap();
        assert_eq!(set.selected, vec![cid(1), cid(3)]);
        let total: f64 = set.nodes.iter().map(|n| n.beta).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_cui_and_all_selected_when_n_large() {
        let set = aggregate_and_select(
            1,
            vec![(path_to(3), 1.0), (path_to(1), 1.0), (path_to(2), 1.0)],
            2,
        )
        .unwrap();
        assert_eq!(set.selected, vec![cid(1), cid(2)]);
        assert!(set.nodes.iter().all(|n| (n.beta - 1.0 / 3.0).abs() < 1e-15));
        let set = aggregate_and_select(1, vec![(path_to(3), 1.0), (path_to(1), 2.0)], 10).unwrap();
        assert_eq!(set.selected.len(), 2);
        assert!(aggregate_and_select(1, vec![], 1).is_err());
    }

    #[test]
    fn scores_sum_per_node_and_best_witness_kept() {
        let mut a = path_to(1);
        a.handle = 7;
        let set = aggregate_and_select(1, vec![(path_to(1), 0.2), (a, 0.3), (path_to(2), 0.4)], 1)
            .unwrap();
        assert_eq!(set.selected, vec![cid(1)]);
        assert!((set.nodes[0].score - 0.5).abs() < 1e-15);
        assert_eq!(set.witnesses[0].path.handle, 7);
    }

    /// Scores a path by the CUI number of its end node, with a bonus for one leaf.
    struct Stub {
        favored: ConceptId,
        next: usize,
    }

    impl PathScorer for Stub {
        fn begin_hop(&mut self, _: usize, _: &BTreeSet<ConceptId>) -> Result<(), RankerError> {
            Ok(())
        }
        fn root(&mut self, _: &ConceptId) -> Result<usize, RankerError> {
            self.next += 1;
            Ok(self.next)
        }
        fn extend(
            &mut self,
            _: usize,
            _: &RelationType,
            _: &ConceptId,
        ) -> Result<usize, RankerError> {
            self.next += 1;
            Ok(self.next)
        }
        fn score(&mut self, p: &PathState) -> Result<f64, RankerError> {
            Ok(if p.end() == &self.favored { 10.0 } else { 0.0 })
        }
    }

    fn star() -> KnowledgeGraph {
        let concepts = (1..=4)
            .map(|i| Concept::new(cid(i), vec![format!("n{i}")], vec![]).unwrap())
            .collect();
        let triples = (2..=4)
            .map(|i| RawTriple {
                src: "C0000001".into(),
                rel: "r".into(),
                dst: format!("C{i:07}"),
                line: 1,
            })
            .collect();
        KnowledgeGraph::build(concepts, triples, &["r".to_string()])
            .unwrap()
            .0
    }

    #[test]
    fn star_graph_favored_leaf_then_self_loop() {
        let g = star();
        let mut stub = Stub {
            favored: cid(3),
            next: 0,
        };
        let ex = explore(
            &g,
            &mut stub,
            &[cid(1)].into_iter().collect(),
            &RankerConfig {
                top_n: 1,
                max_hops: 2,
            },
        )
        .unwrap();
        assert_eq!(ex.hops[0].selected, vec![cid(3)]);
        assert_eq!(ex.hops.len(), 2);
        let w = &ex.hops[1].witnesses[0].path;
        assert!(w.terminated);
        assert_eq!(w.nodes(), vec![cid(1), cid(3), cid(3)]);
        assert_eq!(ex.final_nodes, vec![cid(3)]);
    }

    #[test]
    fn isolated_sources_return_themselves() {
        let g = star();
        let mut stub = Stub {
            favored: cid(9),
            next: 0,
        };
        let sources: BTreeSet<_> = [cid(2), cid(4)].into_iter().collect();
        let ex = explore(
            &g,
            &mut stub,
            &sources,
            &RankerConfig {
                top_n: 4,
                max_hops: 2,
            },
        )
        .unwrap();
        assert_eq!(ex.hops.len(), 1);
        assert_eq!(ex.final_nodes, vec![cid(2), cid(4)]);
    }

    #[test]
    fn extension_contract() {
        let g = star();
        let mut stub = Stub {
            favored: cid(9),
            next: 0,
        };
        let root = init_paths(&mut stub, &[cid(1)].into_iter().collect())
            .unwrap()
            .remove(0);
        let looped =
            extend_path(&g, &mut stub, &root, &RelationType::self_loop(), &cid(1)).unwrap();
        assert!(looped.terminated);
        assert_eq!(looped.end(), &cid(1));
        assert!(matches!(
            extend_path(&g, &mut stub, &looped, &RelationType::named("r"), &cid(2)),
            Err(RankerError::Terminated(_))
        ));
        assert!(matches!(
            extend_path(&g, &mut stub, &root, &RelationType::named("r"), &cid(1)),
            Err(RankerError::NotAnEdge { .. })
        ));
        assert!(init_paths(&mut stub, &BTreeSet::new()).is_err());
    }
}
