use std::collections::HashMap;

use super::DecodeError;
use crate::corpus::Vocab;

const MAX_ORDER: usize = 4;
const SMOOTH: f64 = 1e-9;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over token ids, in `[0, 100]`.
///
/// Clipped n-gram matches and hypothesis n-gram totals are pooled over the
/// corpus; a zero precision is replaced by 1e-9.
pub fn corpus_bleu<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<f64, DecodeError> {
    if hyps.len() != refs.len() {
        return Err(DecodeError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(DecodeError::EmptyCorpus);
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        if r.is_empty() {
            return Err(DecodeError::EmptyReference);
        }
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|i| {
            let p = if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            };
            if p == 0.0 { SMOOTH } else { p }.ln()
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over content tokens divided by the filtered reference length.
/// SILENCE and every other special id are dropped first.
pub fn word_error_rate(vocab: &Vocab, hyp: &[usize], reference: &[usize]) -> Result<f64, DecodeError> {
    let keep = |s: &[usize]| -> Vec<usize> { s.iter().copied().filter(|&t| vocab.is_content(t)).collect() };
    let (h, r) = (keep(hyp), keep(reference));
    if r.is_empty() {
        return Err(DecodeError::EmptyReference);
    }
    Ok(levenshtein(&h, &r) as f64 / r.len() as f64)
}
