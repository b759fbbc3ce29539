//! Shared preprocessing: vocabulary index, W_CUI weighting and base
//! embeddings for one graph and one training corpus.

use crate::corpus::Note;
use crate::encoder::{encode_concepts, BaseEmbeddings, EmbeddingProvider};
use crate::extract::{
    build_vocab_index, compute_tfidf_weights, extract_concepts, ConceptWeighting, VocabularyIndex,
};
use crate::kg::{ConceptId, KnowledgeGraph};
use crate::trainer::{prepare_examples, PrepReport, TrainError, TrainingExample};

pub struct Pipeline {
    pub graph: KnowledgeGraph,
    pub index: VocabularyIndex,
    pub weighting: ConceptWeighting,
    pub base: BaseEmbeddings,
    pub provider: Box<dyn EmbeddingProvider>,
}

/// Mention CUIs per note, in text order with repeats.
pub fn corpus_mentions(notes: &[Note], index: &VocabularyIndex) -> Vec<(String, Vec<ConceptId>)> {
    notes
        .iter()
        .map(|n| {
            (
                n.note_id.clone(),
                extract_concepts(&n.text, index)
                    .into_iter()
                    .map(|m| m.cui)
                    .collect(),
            )
        })
        .collect()
}

impl Pipeline {
    /// `corpus` fixes the document frequencies used by W_CUI.
    pub fn new(
        graph: KnowledgeGraph,
        corpus: &[Note],
        provider: Box<dyn EmbeddingProvider>,
    ) -> Result<Self, TrainError> {
        let index = build_vocab_index(graph.concepts())?;
        let mentions = corpus_mentions(corpus, &index);
        let weighting = compute_tfidf_weights(&mentions, |c| {
            graph.concept(c).ok().map(|c| c.semantic_types.as_slice())
        })?;
        let base = encode_concepts(provider.as_ref(), &graph, provider.dim())?;
        Ok(Self {
            graph,
            index,
            weighting,
            base,
            provider,
        })
    }

    pub fn examples(
        &self,
        notes: &[Note],
        max_hops: usize,
        require_gold: bool,
    ) -> Result<(Vec<TrainingExample>, PrepReport), TrainError> {
        prepare_examples(
            notes,
            &self.graph,
            &self.index,
            &self.weighting,
            self.provider.as_ref(),
            max_hops,
            require_gold,
        )
    }
}
