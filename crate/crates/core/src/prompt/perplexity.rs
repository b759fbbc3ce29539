//! Template selection by language-model perplexity of rendered prompts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{PathStyle, PromptError, PromptInput, Template};

pub trait LmScorer {
    /// Per-character perplexity, finite and at least 1.
    fn perplexity(&self, text: &str) -> f64;
}

const PAD: char = '\u{2}';

/// Character trigram model with add-k smoothing over the training alphabet
/// plus one unknown symbol.
#[derive(Clone, Debug)]
pub struct TrigramScorer {
    k: f64,
    vocab: usize,
    trigrams: BTreeMap<(char, char, char), usize>,
    contexts: BTreeMap<(char, char), usize>,
}

impl TrigramScorer {
    pub fn fit<S: AsRef<str>>(texts: &[S], k: f64) -> Result<Self, PromptError> {
        let mut alphabet = BTreeSet::new();
        let mut trigrams = BTreeMap::new();
        let mut contexts = BTreeMap::new();
        for t in texts {
            let chars: Vec<char> = [PAD, PAD].into_iter().chain(t.as_ref().chars()).collect();
            alphabet.extend(chars[2..].iter().copied());
            for w in chars.windows(3) {
                *trigrams.entry((w[0], w[1], w[2])).or_insert(0) += 1;
                *contexts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        if alphabet.is_empty() {
            return Err(PromptError::EmptyLmCorpus);
        }
        Ok(Self {
            k,
            vocab: alphabet.len() + 1,
            trigrams,
            contexts,
        })
    }

    fn log_prob(&self, a: char, b: char, c: char) -> f64 {
        let num = self.trigrams.get(&(a, b, c)).copied().unwrap_or(0) as f64 + self.k;
        let den =
            self.contexts.get(&(a, b)).copied().unwrap_or(0) as f64 + self.k * self.vocab as f64;
        (num / den).ln()
    }
}

impl LmScorer for TrigramScorer {
    fn perplexity(&self, text: &str) -> f64 {
        let chars: Vec<char> = [PAD, PAD].into_iter().chain(text.chars()).collect();
        let n = chars.len() - 2;
        if n == 0 {
            return 1.0;
        }
        let ll: f64 = chars
            .windows(3)
            .map(|w| self.log_prob(w[0], w[1], w[2]))
            .sum();
        (-ll / n as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template: String,
    pub mean_perplexity: f64,
}

/// Mean perplexity of each template rendered over `samples`, ascending, ties
/// by template id.
pub fn rank_templates_by_perplexity(
    templates: &[Template],
    samples: &[PromptInput],
    style: PathStyle,
    scorer: &dyn LmScorer,
) -> Result<Vec<TemplateScore>, PromptError> {
    if samples.is_empty() {
        return Err(PromptError::NoSamples);
    }
    let mut scores: Vec<TemplateScore> = templates
        .iter()
        .map(|t| TemplateScore {
            template: t.id.clone(),
            mean_perplexity: samples
                .iter()
                .map(|s| scorer.perplexity(&t.render(s, style)))
                .sum::<f64>()
                / samples.len() as f64,
        })
        .collect();
    scores.sort_by(|a, b| {
        a.mean_perplexity
            .total_cmp(&b.mean_perplexity)
            .then_with(|| a.template.cmp(&b.template))
    });
    Ok(scores)
}
