//! Knowledge-graph path retrieval for clinical notes: graph storage, concept
//! extraction, a small autodiff engine, GIN node encoding, hop-wise neural
//! path ranking, training, evaluation and prompt construction.

pub mod corpus;
pub mod encoder;
pub mod evaluate;
pub mod extract;
pub mod kg;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod prompt;
pub mod ranker;
pub mod seed;
pub mod synth;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] kg::GraphError),
    #[error(transparent)]
    Extract(#[from] extract::ExtractError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Tensor(#[from] numerics::TensorError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Ranker(#[from] ranker::RankerError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Prompt(#[from] prompt::PromptError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
