//! Dictionary concept extraction by greedy leftmost-longest token match, and
//! per-concept TF-IDF weights.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Concept, ConceptId};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("concept list is empty")]
    NoConcepts,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("note id {0:?} appears more than once")]
    DuplicateNote(String),
}

/// A token with its char span in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Splits on anything that is not alphanumeric and lowercases each token.
/// Offsets are char positions in the original string.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur: Option<Token> = None;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            let tok = cur.get_or_insert_with(|| Token {
                start: i,
                end: i,
                text: String::new(),
            });
            tok.text.extend(ch.to_lowercase());
            tok.end = i + 1;
        } else if let Some(tok) = cur.take() {
            out.push(tok);
        }
    }
    out.extend(cur);
    out
}

/// Lowercased tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabularyIndex {
    /// Normalized surface → CUIs sorted by id.
    pub entries: BTreeMap<String, Vec<ConceptId>>,
    /// Longest indexed surface in tokens.
    pub max_tokens: usize,
    /// Concepts whose every name normalized to the empty string.
    pub skipped: usize,
}

impl VocabularyIndex {
    pub fn lookup(&self, normalized: &str) -> Option<&[ConceptId]> {
        self.entries.get(normalized).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_vocab_index<'a>(
    concepts: impl IntoIterator<Item = &'a Concept>,
) -> Result<VocabularyIndex, ExtractError> {
    let mut index = VocabularyIndex::default();
    let mut any = false;
    for c in concepts {
        any = true;
        let mut indexed = false;
        for name in &c.names {
            let norm = normalize(name);
            if norm.is_empty() {
                continue;
            }
            indexed = true;
            index.max_tokens = index.max_tokens.max(norm.split(' ').count());
            let ids = index.entries.entry(norm).or_default();
            if let Err(pos) = ids.binary_search(&c.id) {
                ids.insert(pos, c.id.clone());
            }
        }
        if !indexed {
            index.skipped += 1;
        }
    }
    if !any {
        return Err(ExtractError::NoConcepts);
    }
    if index.skipped > 0 {
        log::warn!("{} concepts have no indexable name", index.skipped);
    }
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedMention {
    /// Char offsets, end exclusive.
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub cui: ConceptId,
}

/// Mentions sorted by start offset; spans never overlap. An ambiguous span
/// yields one mention per CUI, in CUI order.
pub fn extract_concepts(text: &str, index: &VocabularyIndex) -> Vec<ExtractedMention> {
    let tokens = tokenize(text);
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = index.max_tokens.min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|len| {
            let key = tokens[i..i + len]
                .iter()
                .map(|t| t.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            index.lookup(&key).map(|ids| (len, ids))
        });
        match hit {
            Some((len, ids)) => {
                let (start, end) = (tokens[i].start, tokens[i + len - 1].end);
                let surface: String = chars[start..end].iter().collect();
                out.extend(ids.iter().map(|cui| ExtractedMention {
                    start,
                    end,
                    surface: surface.clone(),
                    cui: cui.clone(),
                }));
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

/// Distinct CUIs of a mention list, sorted.
pub fn mention_cuis(mentions: &[ExtractedMention]) -> BTreeSet<ConceptId> {
    mentions.iter().map(|m| m.cui.clone()).collect()
}

/// `ln((1 + n_docs) / (1 + df)) + 1`.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptWeighting {
    pub corpus_size: usize,
    pub concept_df: BTreeMap<ConceptId, usize>,
    pub type_df: BTreeMap<String, usize>,
    pub semantic_types: BTreeMap<ConceptId, Vec<String>>,
    /// W_CUI per note.
    pub per_note: BTreeMap<String, BTreeMap<ConceptId, f64>>,
    /// Mean of `per_note` over the notes containing each concept.
    pub corpus: BTreeMap<ConceptId, f64>,
    /// Concepts seen in the corpus with no semantic type; their weight is 0.
    pub untyped: BTreeSet<ConceptId>,
}

impl ConceptWeighting {
    /// Corpus-level weight; 0 for concepts never seen.
    pub fn weight(&self, cui: &ConceptId) -> f64 {
        self.corpus.get(cui).copied().unwrap_or(0.0)
    }

    pub fn note_weights(&self, note_id: &str) -> Option<&BTreeMap<ConceptId, f64>> {
        self.per_note.get(note_id)
    }

    /// Per-note weights for a note outside the corpus, using the corpus
    /// document frequencies. `types_of` covers concepts the corpus never saw.
    pub fn weights_for_mentions<'a>(
        &self,
        cuis: &[ConceptId],
        types_of: impl Fn(&ConceptId) -> Option<&'a [String]>,
    ) -> BTreeMap<ConceptId, f64> {
        let types = |c: &ConceptId| -> Vec<String> {
            self.semantic_types
                .get(c)
                .cloned()
                .or_else(|| types_of(c).map(<[String]>::to_vec))
                .unwrap_or_default()
        };
        note_weights(
            cuis,
            self.corpus_size,
            &self.concept_df,
            &self.type_df,
            types,
        )
    }
}

fn note_weights(
    cuis: &[ConceptId],
    n_docs: usize,
    concept_df: &BTreeMap<ConceptId, usize>,
    type_df: &BTreeMap<String, usize>,
    types_of: impl Fn(&ConceptId) -> Vec<String>,
) -> BTreeMap<ConceptId, f64> {
    let mut ctf: BTreeMap<&ConceptId, usize> = BTreeMap::new();
    let mut ttf: BTreeMap<String, usize> = BTreeMap::new();
    for c in cuis {
        *ctf.entry(c).or_default() += 1;
        for t in types_of(c) {
            *ttf.entry(t).or_default() += 1;
        }
    }
    ctf.into_iter()
        .map(|(c, tf)| {
            let tfidf_c = tf as f64 * idf(n_docs, concept_df.get(c).copied().unwrap_or(0));
            let type_sum: f64 = types_of(c)
                .iter()
                .map(|t| ttf[t] as f64 * idf(n_docs, type_df.get(t).copied().unwrap_or(0)))
                .sum();
            (c.clone(), tfidf_c * type_sum)
        })
        .collect()
}

/// `corpus` pairs a note id with the CUI of every mention in that note.
pub fn compute_tfidf_weights<'a>(
    corpus: &[(String, Vec<ConceptId>)],
    semantic_types_of: impl Fn(&ConceptId) -> Option<&'a [String]>,
) -> Result<ConceptWeighting, ExtractError> {
    if corpus.is_empty() {
        return Err(ExtractError::EmptyCorpus);
    }
    let mut w = ConceptWeighting {
        corpus_size: corpus.len(),
        ..Default::default()
    };
    let mut seen_notes = BTreeSet::new();
    for (note_id, cuis) in corpus {
        if !seen_notes.insert(note_id.as_str()) {
            return Err(ExtractError::DuplicateNote(note_id.clone()));
        }
        let distinct: BTreeSet<&ConceptId> = cuis.iter().collect();
        let mut note_types = BTreeSet::new();
        for c in distinct {
            *w.concept_df.entry(c.clone()).or_default() += 1;
            let types = semantic_types_of(c)
                .map(<[String]>::to_vec)
                .unwrap_or_default();
            if types.is_empty() {
                w.untyped.insert(c.clone());
            }
            note_types.extend(types.iter().cloned());
            w.semantic_types.entry(c.clone()).or_insert(types);
        }
        for t in note_types {
            *w.type_df.entry(t).or_default() += 1;
        }
    }
    for (note_id, cuis) in corpus {
        let weights = note_weights(cuis, w.corpus_size, &w.concept_df, &w.type_df, |c| {
            w.semantic_types.get(c).cloned().unwrap_or_default()
        });
        w.per_note.insert(note_id.clone(), weights);
    }
    let mut sums: BTreeMap<ConceptId, (f64, usize)> = BTreeMap::new();
    for weights in w.per_note.values() {
        for (c, v) in weights {
            let e = sums.entry(c.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    w.corpus = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect();
    if !w.untyped.is_empty() {
        log::warn!(
            "{} concepts have no semantic type and get weight 0",
            w.untyped.len()
        );
    }
    Ok(w)
}
