//! Concept graph: CUIs with names and semantic types, typed directed relations
//! filtered by an allowlist, and an implicit self-loop on every node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reserved relation label marking path termination.
pub const SELF_LOOP: &str = "self";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("triples reference unknown concepts: {}", .0.join(", "))]
    UnknownConcepts(Vec<String>),
    #[error("concept {0} not found")]
    NotFound(String),
    #[error("invalid concept id {0:?}: expected C followed by 7 digits")]
    InvalidId(String),
    #[error("invalid semantic type {0:?}: expected T followed by 3 digits")]
    InvalidSemanticType(String),
    #[error("relation allowlist is empty")]
    EmptyAllowlist,
    #[error("source set is empty")]
    EmptySources,
    #[error("relation {0:?} is not in the relation vocabulary")]
    UnknownRelation(String),
    #[error("no edge {src} -[{rel}]-> {dst}")]
    NoSuchEdge {
        src: String,
        rel: String,
        dst: String,
    },
    #[error("concept {0} is defined twice")]
    DuplicateConcept(String),
    #[error("concept {0} has no names")]
    NoNames(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `C` followed by exactly seven ASCII digits.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(value: &str) -> Result<Self, GraphError> {
        let b = value.as_bytes();
        if b.len() == 8 && b[0] == b'C' && b[1..].iter().all(u8::is_ascii_digit) {
            Ok(Self(value.to_string()))
        } else {
            Err(GraphError::InvalidId(value.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ConceptId {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl Serialize for ConceptId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ConceptId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ConceptId::new(&s).map_err(serde::de::Error::custom)
    }
}

fn valid_semantic_type(t: &str) -> bool {
    let b = t.as_bytes();
    b.len() == 4 && b[0] == b'T' && b[1..].iter().all(u8::is_ascii_digit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    /// Always equal to `names[0]`.
    pub preferred_name: String,
    pub names: Vec<String>,
    pub semantic_types: Vec<String>,
}

impl Concept {
    pub fn new(
        id: ConceptId,
        names: Vec<String>,
        semantic_types: Vec<String>,
    ) -> Result<Self, GraphError> {
        if names.is_empty() || names.iter().all(|n| n.trim().is_empty()) {
            return Err(GraphError::NoNames(id.to_string()));
        }
        if let Some(bad) = semantic_types.iter().find(|t| !valid_semantic_type(t)) {
            return Err(GraphError::InvalidSemanticType(bad.clone()));
        }
        Ok(Self {
            id,
            preferred_name: names[0].clone(),
            names,
            semantic_types,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationType {
    pub label: String,
    pub is_self_loop: bool,
}

impl RelationType {
    pub fn self_loop() -> Self {
        Self {
            label: SELF_LOOP.to_string(),
            is_self_loop: true,
        }
    }

    pub fn named(label: &str) -> Self {
        Self {
            label: label.to_string(),
            is_self_loop: label == SELF_LOOP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub src: ConceptId,
    pub rel: RelationType,
    pub dst: ConceptId,
}

/// Raw `(src, label, dst)` as read from a triple file, before validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTriple {
    pub src: String,
    pub rel: String,
    pub dst: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub concepts: usize,
    pub kept: usize,
    pub dropped: usize,
    pub deduped: usize,
    /// Explicit `(v, self, v)` lines, absorbed by the implicit self-loop.
    pub implicit_self_loops: usize,
    pub dropped_by_relation: BTreeMap<String, usize>,
}

/// Edges restricted to the out-edges of `sources`, plus their self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub sources: Vec<ConceptId>,
    /// `sources ∪ {dst of every edge}`, sorted.
    pub nodes: Vec<ConceptId>,
    /// Sorted by `(src, label, dst)`.
    pub edges: Vec<Triple>,
}

impl Subgraph {
    /// Edges without the implicit self-loops.
    pub fn stored_edges(&self) -> impl Iterator<Item = &Triple> {
        self.edges.iter().filter(|t| !t.rel.is_self_loop)
    }

    pub fn node_index(&self, id: &ConceptId) -> Option<usize> {
        self.nodes.binary_search(id).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    concepts: BTreeMap<ConceptId, Concept>,
    /// Stored out-edges per node, sorted by `(label, dst)`; no self-loops.
    adjacency: BTreeMap<ConceptId, Vec<(RelationType, ConceptId)>>,
    /// Allowlist labels plus `self`, sorted.
    relation_vocab: Vec<String>,
}

/// Serialized form of a loaded graph; stable across loads of identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub relation_vocab: Vec<String>,
    pub concepts: Vec<Concept>,
    pub triples: Vec<(ConceptId, String, ConceptId)>,
}

impl KnowledgeGraph {
    /// Validates concepts and triples, filters relations by `allowlist`, and
    /// deduplicates.
    pub fn build(
        concepts: Vec<Concept>,
        triples: Vec<RawTriple>,
        allowlist: &[String],
    ) -> Result<(Self, LoadReport), GraphError> {
        Self::build_named(concepts, triples, allowlist, "<triples>")
    }

    fn build_named(
        concepts: Vec<Concept>,
        triples: Vec<RawTriple>,
        allowlist: &[String],
        triples_file: &str,
    ) -> Result<(Self, LoadReport), GraphError> {
        let allowed: BTreeSet<String> = allowlist
            .iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty() && s != SELF_LOOP)
            .collect();
        if allowed.is_empty() {
            return Err(GraphError::EmptyAllowlist);
        }
        let mut table = BTreeMap::new();
        for c in concepts {
            let id = c.id.clone();
            if table.insert(id.clone(), c).is_some() {
                return Err(GraphError::DuplicateConcept(id.to_string()));
            }
        }

        let mut unknown = BTreeSet::new();
        for t in &triples {
            for id in [&t.src, &t.dst] {
                match ConceptId::new(id) {
                    Ok(cid) if table.contains_key(&cid) => {}
                    _ => {
                        unknown.insert(id.clone());
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(GraphError::UnknownConcepts(unknown.into_iter().collect()));
        }

        let mut report = LoadReport {
            concepts: table.len(),
            ..Default::default()
        };
        let mut edges: BTreeSet<(ConceptId, String, ConceptId)> = BTreeSet::new();
        for t in triples {
            let (src, dst) = (ConceptId(t.src), ConceptId(t.dst));
            if t.rel == SELF_LOOP {
                if src != dst {
                    return Err(GraphError::Parse {
                        file: triples_file.to_string(),
                        line: t.line,
                        message: format!(
                            "self relation must connect a node to itself, got {src} -> {dst}"
                        ),
                    });
                }
                report.implicit_self_loops += 1;
                continue;
            }
            if !allowed.contains(&t.rel) {
                report.dropped += 1;
                *report.dropped_by_relation.entry(t.rel).or_default() += 1;
                continue;
            }
            if edges.insert((src, t.rel, dst)) {
                report.kept += 1;
            } else {
                report.deduped += 1;
            }
        }

        let mut adjacency: BTreeMap<ConceptId, Vec<(RelationType, ConceptId)>> =
            table.keys().map(|k| (k.clone(), Vec::new())).collect();
        for (src, rel, dst) in edges {
            adjacency
                .get_mut(&src)
                .expect("validated")
                .push((RelationType::named(&rel), dst));
        }
        for list in adjacency.values_mut() {
            list.sort_by(|a, b| (&a.0.label, &a.1).cmp(&(&b.0.label, &b.1)));
        }

        let mut relation_vocab: Vec<String> = allowed.into_iter().collect();
        relation_vocab.push(SELF_LOOP.to_string());
        relation_vocab.sort();

        Ok((
            Self {
                concepts: table,
                adjacency,
                relation_vocab,
            },
            report,
        ))
    }

    pub fn from_snapshot(snapshot: GraphSnapshot) -> Result<Self, GraphError> {
        let allowlist: Vec<String> = snapshot.relation_vocab.clone();
        let triples = snapshot
            .triples
            .into_iter()
            .enumerate()
            .map(|(i, (s, r, d))| RawTriple {
                src: s.0,
                rel: r,
                dst: d.0,
                line: i + 1,
            })
            .collect();
        let (g, report) = Self::build(snapshot.concepts, triples, &allowlist)?;
        if report.dropped > 0 {
            return Err(GraphError::UnknownRelation(
                report
                    .dropped_by_relation
                    .keys()
                    .next()
                    .cloned()
                    .unwrap_or_default(),
            ));
        }
        Ok(g)
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            relation_vocab: self.relation_vocab.clone(),
            concepts: self.concepts.values().cloned().collect(),
            triples: self
                .triples()
                .map(|t| (t.src, t.rel.label, t.dst))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.concepts.contains_key(id)
    }

    pub fn concept(&self, id: &ConceptId) -> Result<&Concept, GraphError> {
        self.concepts
            .get(id)
            .ok_or_else(|| GraphError::NotFound(id.to_string()))
    }

    /// Concepts in CUI order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ConceptId> {
        self.concepts.keys()
    }

    pub fn relation_vocab(&self) -> &[String] {
        &self.relation_vocab
    }

    /// One-hot index of `label`: its rank in the sorted vocabulary.
    pub fn relation_index(&self, label: &str) -> Result<usize, GraphError> {
        self.relation_vocab
            .binary_search_by(|l| l.as_str().cmp(label))
            .map_err(|_| GraphError::UnknownRelation(label.to_string()))
    }

    /// Stored out-edges, without the implicit self-loop.
    pub fn out_edges(&self, v: &ConceptId) -> Result<&[(RelationType, ConceptId)], GraphError> {
        self.adjacency
            .get(v)
            .map(Vec::as_slice)
            .ok_or_else(|| GraphError::NotFound(v.to_string()))
    }

    /// Stored out-edges plus `(self, v)`, sorted by `(label, dst)`.
    pub fn neighbors(&self, v: &ConceptId) -> Result<Vec<(RelationType, ConceptId)>, GraphError> {
        let mut out = self.out_edges(v)?.to_vec();
        let pos = out
            .binary_search_by(|(r, d)| (r.label.as_str(), d).cmp(&(SELF_LOOP, v)))
            .unwrap_or_else(|p| p);
        out.insert(pos, (RelationType::self_loop(), v.clone()));
        Ok(out)
    }

    /// True for stored edges and for `(v, self, v)`.
    pub fn has_edge(&self, src: &ConceptId, rel: &str, dst: &ConceptId) -> bool {
        if rel == SELF_LOOP {
            return src == dst && self.contains(src);
        }
        self.adjacency
            .get(src)
            .is_some_and(|l| l.iter().any(|(r, d)| r.label == rel && d == dst))
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.adjacency.iter().flat_map(|(src, list)| {
            list.iter().map(move |(rel, dst)| Triple {
                src: src.clone(),
                rel: rel.clone(),
                dst: dst.clone(),
            })
        })
    }

    pub fn one_hop_subgraph(&self, sources: &BTreeSet<ConceptId>) -> Result<Subgraph, GraphError> {
        if sources.is_empty() {
            return Err(GraphError::EmptySources);
        }
        let mut nodes: BTreeSet<ConceptId> = BTreeSet::new();
        let mut edges = Vec::new();
        for s in sources {
            for (rel, dst) in self.neighbors(s)? {
                nodes.insert(dst.clone());
                edges.push(Triple {
                    src: s.clone(),
                    rel,
                    dst,
                });
            }
            nodes.insert(s.clone());
        }
        edges.sort_by(|a, b| (&a.src, &a.rel.label, &a.dst).cmp(&(&b.src, &b.rel.label, &b.dst)));
        Ok(Subgraph {
            sources: sources.iter().cloned().collect(),
            nodes: nodes.into_iter().collect(),
            edges,
        })
    }

    /// Nodes reachable from `sources` in at most `max_hops` stored edges,
    /// with their BFS distance.
    pub fn distances_from(
        &self,
        sources: &BTreeSet<ConceptId>,
        max_hops: usize,
    ) -> BTreeMap<ConceptId, usize> {
        let mut dist: BTreeMap<ConceptId, usize> = sources.iter().map(|s| (s.clone(), 0)).collect();
        let mut frontier: Vec<ConceptId> = sources.iter().cloned().collect();
        for d in 1..=max_hops {
            let mut next = Vec::new();
            for v in &frontier {
                for (_, dst) in self.adjacency.get(v).into_iter().flatten() {
                    if !dist.contains_key(dst) {
                        dist.insert(dst.clone(), d);
                        next.push(dst.clone());
                    }
                }
            }
            frontier = next;
        }
        dist
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Content lines with their 1-based numbers; blank and `#` lines skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// `CUI<TAB>types<TAB>preferred<TAB>aliases?`, types comma-separated and
/// aliases pipe-separated.
pub fn parse_concepts(text: &str, file: &str) -> Result<Vec<Concept>, GraphError> {
    let parse_err = |line: usize, message: String| GraphError::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(parse_err(
                line,
                format!(
                    "expected 3 or 4 tab-separated columns, found {}",
                    cols.len()
                ),
            ));
        }
        let id = ConceptId::new(cols[0].trim()).map_err(|e| parse_err(line, e.to_string()))?;
        let types: Vec<String> = cols[1]
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        let mut names = vec![cols[2].trim().to_string()];
        if names[0].is_empty() {
            return Err(parse_err(line, "empty preferred name".into()));
        }
        if let Some(aliases) = cols.get(3) {
            names.extend(
                aliases
                    .split('|')
                    .map(str::trim)
                    .filter(|a| !a.is_empty())
                    .map(String::from),
            );
        }
        out.push(Concept::new(id, names, types).map_err(|e| parse_err(line, e.to_string()))?);
    }
    Ok(out)
}

/// `CUI<TAB>relation<TAB>CUI`.
pub fn parse_triples(text: &str, file: &str) -> Result<Vec<RawTriple>, GraphError> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.trim().is_empty()) {
            return Err(GraphError::Parse {
                file: file.to_string(),
                line,
                message: format!("expected 3 non-empty tab-separated columns, found {:?}", l),
            });
        }
        out.push(RawTriple {
            src: cols[0].trim().to_string(),
            rel: cols[1].trim().to_string(),
            dst: cols[2].trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// One label per line; blank and `#` lines skipped.
pub fn parse_allowlist(text: &str) -> Vec<String> {
    content_lines(text)
        .map(|(_, l)| l.trim().to_string())
        .collect()
}

pub fn load_allowlist(path: &Path) -> Result<Vec<String>, GraphError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_allowlist(&text))
}

pub fn load_graph(
    concepts_path: &Path,
    triples_path: &Path,
    relation_allowlist: &[String],
) -> Result<(KnowledgeGraph, LoadReport), GraphError> {
    let ctext = fs::read_to_string(concepts_path).map_err(io_err(concepts_path))?;
    let ttext = fs::read_to_string(triples_path).map_err(io_err(triples_path))?;
    let tname = triples_path.display().to_string();
    let concepts = parse_concepts(&ctext, &concepts_path.display().to_string())?;
    let triples = parse_triples(&ttext, &tname)?;
    let (g, report) = KnowledgeGraph::build_named(concepts, triples, relation_allowlist, &tname)?;
    log::info!(
        "loaded {} concepts, {} edges (dropped {}, deduped {})",
        g.len(),
        g.edge_count(),
        report.dropped,
        report.deduped
    );
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cid(n: u32) -> ConceptId {
        ConceptId::new(&format!("C{n:07}")).unwrap()
    }

    fn concept(n: u32, name: &str) -> Concept {
        Concept::new(cid(n), vec![name.into()], vec!["T047".into()]).unwrap()
    }

    fn raw(s: u32, r: &str, d: u32) -> RawTriple {
        RawTriple {
            src: format!("C{s:07}"),
            rel: r.into(),
            dst: format!("C{d:07}"),
            line: 1,
        }
    }

    fn allow(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn concept_id_format() {
        assert!(ConceptId::new("C0243026").is_ok());
        for bad in [
            "",
            "c0243026",
            "C024302",
            "C02430266",
            "C02430a6",
            "X0243026",
        ] {
            assert!(ConceptId::new(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn minimal_graph() {
        let (g, r) = KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "isa", 2)],
            &allow(&["isa"]),
        )
        .unwrap();
        assert_eq!((g.edge_count(), r.kept, r.dropped), (1, 1, 0));
    }

    #[test]
    fn disallowed_relation_dropped() {
        let (g, r) = KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "inverse isa", 2)],
            &allow(&["isa"]),
        )
        .unwrap();
        assert_eq!((g.edge_count(), r.dropped), (0, 1));
        assert_eq!(r.dropped_by_relation["inverse isa"], 1);
    }

    #[test]
    fn duplicates_deduped() {
        let (g, r) = KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "isa", 2), raw(1, "isa", 2)],
            &allow(&["isa"]),
        )
        .unwrap();
        assert_eq!((g.edge_count(), r.deduped), (1, 1));
    }

    #[test]
    fn unknown_concepts_listed() {
        let err = KnowledgeGraph::build(
            vec![concept(1, "a")],
            vec![raw(1, "isa", 9), raw(8, "isa", 1)],
            &allow(&["isa"]),
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("C0000009") && err.contains("C0000008"),
            "{err}"
        );
    }

    #[test]
    fn neighbors_order_and_self_loop() {
        let (g, _) = KnowledgeGraph::build(
            vec![concept(1, "v"), concept(2, "a"), concept(3, "b")],
            vec![raw(1, "r2", 3), raw(1, "r1", 2)],
            &allow(&["r1", "r2"]),
        )
        .unwrap();
        let n = g.neighbors(&cid(1)).unwrap();
        let labels: Vec<&str> = n.iter().map(|(r, _)| r.label.as_str()).collect();
        assert_eq!(labels, ["r1", "r2", "self"]);
        assert_eq!(
            g.neighbors(&cid(2)).unwrap(),
            vec![(RelationType::self_loop(), cid(2))]
        );
        assert!(g.neighbors(&cid(5)).is_err());
    }

    #[test]
    fn relation_vocab_includes_self_sorted() {
        let (g, _) = KnowledgeGraph::build(
            vec![concept(1, "a")],
            vec![],
            &allow(&["zeta", "alpha", "self"]),
        )
        .unwrap();
        assert_eq!(g.relation_vocab(), ["alpha", "self", "zeta"]);
        assert_eq!(g.relation_index("zeta").unwrap(), 2);
        assert!(g.relation_index("nope").is_err());
    }

    #[test]
    fn explicit_self_triples() {
        let (g, r) = KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "self", 1)],
            &allow(&["isa"]),
        )
        .unwrap();
        assert_eq!((g.edge_count(), r.implicit_self_loops), (0, 1));
        assert!(KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "self", 2)],
            &allow(&["isa"])
        )
        .is_err());
    }

    #[test]
    fn subgraph_of_isolated_source() {
        let (g, _) =
            KnowledgeGraph::build(vec![concept(1, "a")], vec![], &allow(&["isa"])).unwrap();
        let s = g.one_hop_subgraph(&[cid(1)].into_iter().collect()).unwrap();
        assert_eq!(s.nodes, vec![cid(1)]);
        assert_eq!(s.edges.len(), 1);
        assert!(s.edges[0].rel.is_self_loop);
        assert!(g.one_hop_subgraph(&BTreeSet::new()).is_err());
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let err = parse_concepts("# header\nC0000001\tT047\tFever\nbad line\n", "c.tsv")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("c.tsv:3:"), "{err}");
        let err = parse_triples("C0000001\tisa\n", "t.tsv")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("t.tsv:1:"), "{err}");
        let err = parse_concepts("C0000001\tX47\tFever\n", "c.tsv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("semantic type"), "{err}");
    }

    #[test]
    fn concepts_with_aliases() {
        let cs = parse_concepts(
            "C0000001\tT047,T184\tPneumonia\tPNA| lung infection \n",
            "c",
        )
        .unwrap();
        assert_eq!(cs[0].names, ["Pneumonia", "PNA", "lung infection"]);
        assert_eq!(cs[0].preferred_name, "Pneumonia");
        assert_eq!(cs[0].semantic_types, ["T047", "T184"]);
    }

    #[test]
    fn snapshot_round_trip() {
        let (g, _) = KnowledgeGraph::build(
            vec![concept(1, "a"), concept(2, "b")],
            vec![raw(1, "isa", 2)],
            &allow(&["isa", "part of"]),
        )
        .unwrap();
        let back = KnowledgeGraph::from_snapshot(g.snapshot()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn distances() {
        let (g, _) = KnowledgeGraph::build(
            vec![
                concept(1, "a"),
                concept(2, "b"),
                concept(3, "c"),
                concept(4, "d"),
            ],
            vec![raw(1, "r", 2), raw(2, "r", 3), raw(3, "r", 4)],
            &allow(&["r"]),
        )
        .unwrap();
        let d = g.distances_from(&[cid(1)].into_iter().collect(), 2);
        assert_eq!(d.get(&cid(3)), Some(&2));
        assert_eq!(d.get(&cid(4)), None);
    }
}
