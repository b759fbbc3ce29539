//! Synthetic concept graphs and notes with planted two-hop diagnoses.
//!
//! Nodes are split into sources (symptoms), mids, diseases and miscellaneous
//! findings. Every source `s_i` has the chain
//! `s_i -[PLANTED_FIRST]-> m_i -[PLANTED_SECOND]-> d_i`; all other edges use
//! the remaining relation labels. A note mentions some sources and its gold
//! set is their planted diseases, optionally plus diseases named in the note.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{to_jsonl, Note};
use crate::kg::{Concept, ConceptId, KnowledgeGraph, RawTriple};
use crate::seed::rng_for;

pub const PLANTED_FIRST: &str = "definitional manifestation of";
pub const PLANTED_SECOND: &str = "cause of";
/// Emitted into triple files but kept out of the allowlist.
pub const EXCLUDED_RELATION: &str = "inverse isa";

const DISTRACTOR_RELATIONS: [&str; 10] = [
    "associated with",
    "due to",
    "finding site of",
    "has causative agent",
    "has finding site",
    "isa",
    "method of",
    "occurs after",
    "possibly equivalent to",
    "has definitional manifestation",
];

const FILLER: [&str; 16] = [
    "patient",
    "reports",
    "today",
    "with",
    "and",
    "was",
    "seen",
    "in",
    "clinic",
    "overnight",
    "stable",
    "on",
    "exam",
    "follow",
    "up",
    "noted",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("planted gold {gold} is unreachable from {source_cui}")]
    Unreachable { source_cui: String, gold: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub nodes: usize,
    /// Out-degree of source, mid and misc nodes, planted edges included.
    pub branching: usize,
    pub notes: usize,
    pub sources_per_note: usize,
    /// Probability that a source mention is misspelled past the matcher.
    pub noise_rate: f64,
    /// Diseases named in the note and added to its gold set.
    pub extractive_golds_per_note: usize,
    /// Negated disease mentions that are not gold.
    pub negated_per_note: usize,
    /// Miscellaneous finding mentions.
    pub distractors_per_note: usize,
    /// Share of notes in the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 50,
            branching: 3,
            notes: 200,
            sources_per_note: 1,
            noise_rate: 0.0,
            extractive_golds_per_note: 0,
            negated_per_note: 0,
            distractors_per_note: 1,
            train_fraction: 0.8,
            seed: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub concepts: Vec<Concept>,
    pub triples: Vec<(ConceptId, String, ConceptId)>,
    pub allowlist: Vec<String>,
    pub notes: Vec<Note>,
    pub train: Vec<Note>,
    pub test: Vec<Note>,
    /// `(source, mid, disease)` per planted chain.
    pub planted: Vec<(ConceptId, ConceptId, ConceptId)>,
}

struct Roles {
    sources: Vec<usize>,
    mids: Vec<usize>,
    diseases: Vec<usize>,
    misc: Vec<usize>,
}

fn roles(n: usize) -> Roles {
    let k = n / 5;
    Roles {
        sources: (0..k).collect(),
        mids: (k..2 * k).collect(),
        diseases: (2 * k..3 * k).collect(),
        misc: (3 * k..n).collect(),
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 14] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(VOWELS.choose(rng).expect("non-empty"));
    }
    w
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.nodes < 10 {
            return bad("at least 10 nodes are required");
        }
        if self.branching < 1 {
            return bad("branching must be at least 1");
        }
        if self.notes < 2 {
            return bad("at least 2 notes are required");
        }
        let r = roles(self.nodes);
        if self.sources_per_note == 0 || self.sources_per_note > r.sources.len() {
            return bad("sources_per_note must be between 1 and the number of source nodes");
        }
        if self.extractive_golds_per_note + self.negated_per_note + self.sources_per_note
            > r.diseases.len()
        {
            return bad("too many disease mentions per note for the number of disease nodes");
        }
        if self.distractors_per_note > r.misc.len() {
            return bad("distractors_per_note exceeds the number of misc nodes");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("noise_rate and train_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticData, SynthError> {
        self.validate()?;
        let n = self.nodes;
        let r = roles(n);
        let mut rng = rng_for(self.seed, "synth.graph");

        let ids: Vec<ConceptId> = (1..=n)
            .map(|i| ConceptId::new(&format!("C{:07}", 9_000_000 + i)).expect("valid id"))
            .collect();
        let mut used = BTreeSet::new();
        let mut names = Vec::with_capacity(n);
        while names.len() < n {
            let w = pseudo_word(&mut rng);
            if used.insert(w.clone()) {
                names.push(w);
            }
        }
        let type_of = |i: usize| {
            if r.sources.contains(&i) {
                "T184"
            } else if r.mids.contains(&i) {
                "T046"
            } else if r.diseases.contains(&i) {
                "T047"
            } else {
                "T033"
            }
        };
        let concepts: Vec<Concept> = (0..n)
            .map(|i| {
                Concept::new(
                    ids[i].clone(),
                    vec![names[i].clone()],
                    vec![type_of(i).to_string()],
                )
                .expect("valid concept")
            })
            .collect();

        let mut edges: BTreeSet<(usize, &str, usize)> = BTreeSet::new();
        let mut planted = Vec::new();
        for (k, &s) in r.sources.iter().enumerate() {
            let (m, d) = (r.mids[k % r.mids.len()], r.diseases[k % r.diseases.len()]);
            edges.insert((s, PLANTED_FIRST, m));
            edges.insert((m, PLANTED_SECOND, d));
            planted.push((ids[s].clone(), ids[m].clone(), ids[d].clone()));
        }
        for v in 0..n {
            let already = edges.iter().filter(|(s, _, _)| *s == v).count();
            let want = if r.diseases.contains(&v) {
                1
            } else {
                self.branching
            };
            let mut guard = 0;
            while edges.iter().filter(|(s, _, _)| *s == v).count() < want.max(already)
                && guard < 100
            {
                guard += 1;
                let dst = rng.gen_range(0..n);
                if dst == v {
                    continue;
                }
                let rel = *DISTRACTOR_RELATIONS.choose(&mut rng).expect("non-empty");
                if edges.iter().any(|(s, _, d)| *s == v && *d == dst) {
                    continue;
                }
                edges.insert((v, rel, dst));
            }
        }
        let mut triples: Vec<(ConceptId, String, ConceptId)> = edges
            .iter()
            .map(|(s, l, d)| (ids[*s].clone(), l.to_string(), ids[*d].clone()))
            .collect();
        for &d in r.diseases.iter().take(3) {
            triples.push((
                ids[d].clone(),
                EXCLUDED_RELATION.to_string(),
                ids[r.misc[0]].clone(),
            ));
        }

        let mut allowlist: Vec<String> =
            DISTRACTOR_RELATIONS.iter().map(|s| s.to_string()).collect();
        allowlist.push(PLANTED_FIRST.to_string());
        allowlist.push(PLANTED_SECOND.to_string());
        allowlist.sort();

        let mut nrng = rng_for(self.seed, "synth.notes");
        let mut notes = Vec::with_capacity(self.notes);
        for i in 0..self.notes {
            let mut srcs = r.sources.clone();
            srcs.shuffle(&mut nrng);
            srcs.truncate(self.sources_per_note);
            srcs.sort();
            let planted_golds: BTreeSet<usize> =
                srcs.iter().map(|&s| planted_disease(&r, s)).collect();
            let mut other: Vec<usize> = r
                .diseases
                .iter()
                .copied()
                .filter(|d| !planted_golds.contains(d))
                .collect();
            other.shuffle(&mut nrng);
            let extractive: Vec<usize> = other
                .iter()
                .copied()
                .take(self.extractive_golds_per_note)
                .collect();
            let negated: Vec<usize> = other
                .iter()
                .copied()
                .skip(self.extractive_golds_per_note)
                .take(self.negated_per_note)
                .collect();
            let mut misc = r.misc.clone();
            misc.shuffle(&mut nrng);
            misc.truncate(self.distractors_per_note);

            let mut clauses: Vec<String> = Vec::new();
            for &s in &srcs {
                let mut name = names[s].clone();
                if nrng.gen_bool(self.noise_rate) {
                    name.push('x');
                }
                clauses.push(format!("presents with {name}"));
            }
            for &d in &extractive {
                clauses.push(format!("history of {}", names[d]));
            }
            for &d in &negated {
                clauses.push(format!("no {}", names[d]));
            }
            for &m in &misc {
                clauses.push(format!("noted {}", names[m]));
            }
            clauses.shuffle(&mut nrng);
            let mut text = String::new();
            for c in clauses {
                let f1 = FILLER.choose(&mut nrng).expect("non-empty");
                let f2 = FILLER.choose(&mut nrng).expect("non-empty");
                let _ = write!(text, "{f1} {c} {f2}. ");
            }
            let gold: BTreeSet<ConceptId> = planted_golds
                .iter()
                .chain(&extractive)
                .map(|&d| ids[d].clone())
                .collect();
            notes.push(Note {
                note_id: format!("note{:04}", i + 1),
                text: text.trim_end().to_string(),
                gold_cuis: Some(gold.into_iter().collect()),
            });
        }

        let mut order: Vec<usize> = (0..notes.len()).collect();
        order.shuffle(&mut rng_for(self.seed, "synth.split"));
        let n_train = ((notes.len() as f64) * self.train_fraction).round() as usize;
        let mut train_idx: Vec<usize> = order[..n_train].to_vec();
        let mut test_idx: Vec<usize> = order[n_train..].to_vec();
        train_idx.sort();
        test_idx.sort();

        let data = SyntheticData {
            train: train_idx.iter().map(|&i| notes[i].clone()).collect(),
            test: test_idx.iter().map(|&i| notes[i].clone()).collect(),
            concepts,
            triples,
            allowlist,
            notes,
            planted,
        };
        data.check_reachability()?;
        Ok(data)
    }
}

fn planted_disease(r: &Roles, s: usize) -> usize {
    let k = r.sources.iter().position(|&x| x == s).expect("source");
    r.diseases[k % r.diseases.len()]
}

impl SyntheticData {
    pub fn graph(&self) -> KnowledgeGraph {
        let raw = self
            .triples
            .iter()
            .enumerate()
            .map(|(i, (s, l, d))| RawTriple {
                src: s.to_string(),
                rel: l.clone(),
                dst: d.to_string(),
                line: i + 1,
            })
            .collect();
        KnowledgeGraph::build(self.concepts.clone(), raw, &self.allowlist)
            .expect("generated graph is valid")
            .0
    }

    fn check_reachability(&self) -> Result<(), SynthError> {
        let g = self.graph();
        for (s, _, d) in &self.planted {
            let reach = g.distances_from(&[s.clone()].into_iter().collect(), 2);
            if !reach.contains_key(d) {
                return Err(SynthError::Unreachable {
                    source_cui: s.to_string(),
                    gold: d.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn concepts_tsv(&self) -> String {
        let mut out = String::from("# cui\tsemantic_types\tpreferred_name\taliases\n");
        for c in &self.concepts {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                c.id,
                c.semantic_types.join(","),
                c.preferred_name,
                c.names[1..].join("|")
            );
        }
        out
    }

    pub fn triples_tsv(&self) -> String {
        let mut out = String::from("# src\trelation\tdst\n");
        for (s, l, d) in &self.triples {
            let _ = writeln!(out, "{s}\t{l}\t{d}");
        }
        out
    }

    /// Writes `concepts.tsv`, `triples.tsv`, `relations.txt`, `notes.jsonl`,
    /// `train.jsonl` and `test.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let p = path.display().to_string();
            move |source| SynthError::Io { path: p, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            ("concepts.tsv", self.concepts_tsv()),
            ("triples.tsv", self.triples_tsv()),
            ("relations.txt", self.allowlist.join("\n") + "\n"),
            ("notes.jsonl", to_jsonl(&self.notes)),
            ("train.jsonl", to_jsonl(&self.train)),
            ("test.jsonl", to_jsonl(&self.test)),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(&p))?;
        }
        Ok(())
    }
}
