use std::collections::HashSet;

use super::synth::TripletExample;
use super::vocab::Lang;
use super::CorpusError;

/// Text-to-text translator used to label unlabeled transcripts.
pub trait Translator {
    fn translate(&self, src: Lang, transcript: &[usize]) -> Result<Vec<usize>, CorpusError>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoOutcome {
    pub examples: Vec<TripletExample>,
    /// Pairs whose transcript already occurs in the gold corpus.
    pub filtered_existing: usize,
    /// Repeats of a transcript already labeled in this run.
    pub filtered_duplicate: usize,
    /// Pairs for which the teacher produced nothing.
    pub skipped_empty: usize,
}

/// Labels unlabeled speech/transcript pairs with the teacher's translation.
/// Transcripts present in `existing` and repeated transcripts are dropped.
pub fn pseudo_label(
    unlabeled: &[TripletExample],
    teacher: &impl Translator,
    existing: &[TripletExample],
) -> Result<PseudoOutcome, CorpusError> {
    let gold: HashSet<&[usize]> = existing.iter().map(|e| e.transcript.as_slice()).collect();
    let mut seen: HashSet<&[usize]> = HashSet::new();
    let mut out = PseudoOutcome::default();
    for ex in unlabeled {
        let x = ex.transcript.as_slice();
        if gold.contains(x) {
            out.filtered_existing += 1;
            continue;
        }
        if !seen.insert(x) {
            out.filtered_duplicate += 1;
            continue;
        }
        let y = teacher.translate(ex.src_lang, x)?;
        if y.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        out.examples.push(TripletExample {
            translation: y,
            is_pseudo: true,
            ..ex.clone()
        });
    }
    Ok(out)
}
