//! Beam exploration invariants on random graphs, with a hash scorer and with
//! the neural scorer.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use kgpath_core::encoder::HashingProvider;
use kgpath_core::kg::{Concept, ConceptId, KnowledgeGraph, RawTriple, RelationType};
use kgpath_core::pipeline::Pipeline;
use kgpath_core::ranker::{
    aggregate_and_select, explore, Exploration, ModelConfig, PathModel, PathScorer, PathState,
    RankerConfig, RankerError, RetrievalRecord,
};
use kgpath_core::synth::SyntheticSpec;
use kgpath_core::trainer::retrieve;
use proptest::prelude::*;

const LABELS: [&str; 3] = ["cause of", "isa", "may treat"];

fn cid(n: usize) -> ConceptId {
    ConceptId::new(&format!("C{n:07}")).unwrap()
}

/// Scores a path by hashing its node and relation sequence.
struct HashScorer {
    paths: Vec<(Vec<ConceptId>, Vec<String>)>,
    salt: u64,
}

impl PathScorer for HashScorer {
    fn begin_hop(
        &mut self,
        _hop: usize,
        _frontier: &BTreeSet<ConceptId>,
    ) -> Result<(), RankerError> {
        Ok(())
    }

    fn root(&mut self, source: &ConceptId) -> Result<usize, RankerError> {
        self.paths.push((vec![source.clone()], vec![]));
        Ok(self.paths.len() - 1)
    }

    fn extend(
        &mut self,
        parent: usize,
        rel: &RelationType,
        target: &ConceptId,
    ) -> Result<usize, RankerError> {
        let (mut nodes, mut rels) = self.paths[parent].clone();
        nodes.push(target.clone());
        rels.push(rel.label.clone());
        self.paths.push((nodes, rels));
        Ok(self.paths.len() - 1)
    }

    fn score(&mut self, path: &PathState) -> Result<f64, RankerError> {
        let mut h = DefaultHasher::new();
        self.salt.hash(&mut h);
        self.paths[path.handle].hash(&mut h);
        // Coarse buckets so ties between node sums occur.
        Ok((h.finish() % 7) as f64 / 3.0 - 1.0)
    }
}

fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
    (2usize..25).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..LABELS.len(), 0..n), 0..3 * n),
        )
    })
}

fn build(n: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let concepts = (0..n)
        .map(|i| Concept::new(cid(i), vec![format!("c{i}")], vec!["T047".into()]).unwrap())
        .collect();
    let raw = edges
        .iter()
        .map(|&(s, l, d)| RawTriple {
            src: cid(s).to_string(),
            rel: LABELS[l].into(),
            dst: cid(d).to_string(),
            line: 1,
        })
        .collect();
    let allow: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
    KnowledgeGraph::build(concepts, raw, &allow).unwrap().0
}

fn run(
    g: &KnowledgeGraph,
    sources: &BTreeSet<ConceptId>,
    cfg: &RankerConfig,
    salt: u64,
) -> Exploration {
    let mut scorer = HashScorer {
        paths: vec![],
        salt,
    };
    explore(g, &mut scorer, sources, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exploration_invariants(
        (n, edges) in arb_graph(),
        picks in prop::collection::btree_set(0usize..25, 1..4),
        top_n in 1usize..5,
        max_hops in 1usize..4,
        salt in any::<u64>(),
    ) {
        let g = build(n, &edges);
        let sources: BTreeSet<ConceptId> = picks.into_iter().filter(|&p| p < n).map(cid).collect();
        prop_assume!(!sources.is_empty());
        let cfg = RankerConfig { top_n, max_hops };
        let ex = run(&g, &sources, &cfg, salt);
        prop_assert!(!ex.hops.is_empty() && ex.hops.len() <= max_hops);
        prop_assert_eq!(&ex.final_nodes, &ex.hops.last().unwrap().selected);

        for (h, set) in ex.hops.iter().enumerate() {
            prop_assert_eq!(set.hop, h + 1);
            let beta_sum: f64 = set.nodes.iter().map(|v| v.beta).sum();
            prop_assert!((beta_sum - 1.0).abs() < 1e-9);
            prop_assert!(set.selected.len() <= top_n);
            prop_assert_eq!(set.selected.len(), top_n.min(set.nodes.len()));

            let score_of = |c: &ConceptId| set.nodes.iter().find(|v| &v.cui == c).unwrap().score;
            for w in set.selected.windows(2) {
                let (a, b) = (score_of(&w[0]), score_of(&w[1]));
                prop_assert!(a > b || (a == b && w[0] < w[1]));
            }
            let cutoff = set.selected.last().map(score_of).unwrap();
            for v in &set.nodes {
                if !set.selected.contains(&v.cui) {
                    prop_assert!(v.score < cutoff || (v.score == cutoff && &v.cui > set.selected.last().unwrap()));
                }
            }

            for c in &set.candidates {
                let p = &c.path;
                prop_assert!(sources.contains(&p.source));
                prop_assert!(!p.hops.is_empty() && p.hops.len() <= h + 1);
                let mut at = p.source.clone();
                for t in &p.hops {
                    prop_assert_eq!(&t.src, &at);
                    prop_assert!(g.has_edge(&t.src, &t.rel.label, &t.dst));
                    at = t.dst.clone();
                }
                prop_assert_eq!(p.terminated, p.hops.last().unwrap().rel.is_self_loop);
                prop_assert!(p.hops[..p.hops.len() - 1].iter().all(|t| !t.rel.is_self_loop));
            }
            prop_assert_eq!(
                set.witnesses.iter().map(|w| w.path.end().clone()).collect::<Vec<_>>(),
                set.selected.clone()
            );
        }
        prop_assert_eq!(ex, run(&g, &sources, &cfg, salt));
    }

    #[test]
    fn selection_ignores_a_shared_score_offset(
        scores in prop::collection::vec((0usize..10, -3.0f64..3.0), 1..30),
        shift in -50.0f64..50.0,
        top_n in 1usize..6,
    ) {
        let states = |offset: f64| -> Vec<(PathState, f64)> {
            scores
                .iter()
                .map(|&(v, s)| {
                    let p = PathState { source: cid(v), hops: vec![], terminated: false, handle: 0 };
                    (p, s + offset)
                })
                .collect()
        };
        // One candidate per node keeps node sums equal to the shifted score.
        let mut seen = BTreeSet::new();
        let unique: Vec<(PathState, f64)> = states(0.0).into_iter().filter(|(p, _)| seen.insert(p.source.clone())).collect();
        let shifted: Vec<(PathState, f64)> = unique.iter().map(|(p, s)| (p.clone(), s + shift)).collect();
        let a = aggregate_and_select(1, unique, top_n).unwrap();
        let b = aggregate_and_select(1, shifted, top_n).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            prop_assert!((x.beta - y.beta).abs() < 1e-9);
        }
    }
}

#[test]
fn neural_retrieval_is_byte_identical_across_runs() {
    let data = SyntheticSpec {
        notes: 20,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let cfg = ModelConfig::default();
    let ranker = RankerConfig::default();
    let records = || {
        let p = Pipeline::new(
            data.graph(),
            &data.train,
            Box::new(HashingProvider::new(cfg.embed_dim, 5)),
        )
        .unwrap();
        let model = PathModel::new(cfg.clone(), p.graph.relation_vocab().to_vec(), 5).unwrap();
        let (examples, _) = p.examples(&data.test, ranker.max_hops, false).unwrap();
        let rows: Vec<String> = examples
            .iter()
            .map(|ex| {
                let e = retrieve(&model, &p.graph, &p.base, ex, &ranker).unwrap();
                serde_json::to_string(&RetrievalRecord::from_exploration(&ex.note_id, &e)).unwrap()
            })
            .collect();
        rows.join("\n")
    };
    let first = records();
    assert!(!first.is_empty());
    assert_eq!(first, records());
}
