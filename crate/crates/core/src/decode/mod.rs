//! Beam search, BLEU/WER scoring, similarity matrices and the ablation ladder.

mod ablation;
mod beam;
mod metrics;
mod similarity;

pub use ablation::{ablation_suite, AblationRow, AblationSetup, AblationStage, AblationSummary};
pub use beam::{
    beam_search, beam_search_with, encode_speech_memory, encode_text_memory, evaluate, greedy_decode, greedy_with,
    EvalReport, Hypothesis, ModelTranslator,
};
pub use metrics::{corpus_bleu, word_error_rate};
pub use similarity::{similarity_matrix, SimMode, SimilarityMatrix};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("{0}")]
    Invalid(String),
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("reference is empty after filtering")]
    EmptyReference,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
