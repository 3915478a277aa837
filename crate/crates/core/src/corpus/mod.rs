//! Synthetic triplet corpus, transcript masking, batching and pseudo labels.

mod batch;
mod io;
mod mask;
mod pseudo;
mod synth;
mod vocab;

pub use batch::{collate_batch, Batch};
pub use io::{read_manifest, write_manifest};
pub use mask::{mask_all, mask_transcript, mask_with};
pub use pseudo::{pseudo_label, PseudoOutcome, Translator};
pub use synth::{
    pair_offset, sigma, synth_corpus, synth_unlabeled, translate, Acoustics, LangProfile, SynthConfig,
    TripletExample,
};
pub use vocab::{Lang, Task, Vocab};

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus config: {0}")]
    Config(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot collate an empty example list")]
    EmptyBatch,
    #[error("example {index} has frame width {got}, expected {expected}")]
    FeatureWidth { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}
