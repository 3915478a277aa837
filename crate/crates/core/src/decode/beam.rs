use std::cmp::Ordering;

use super::metrics::{corpus_bleu, word_error_rate};
use super::DecodeError;
use crate::corpus::{CorpusError, Lang, Task, Translator, TripletExample, Vocab};
use crate::model::ComSLModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A decoded sequence without tags or EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / length`, where the length counts EOS for finished hypotheses.
    pub score: f64,
    pub finished: bool,
}

/// Speech-only encoder output `z^s` as a plain tensor.
pub fn encode_speech_memory<T: Scalar>(model: &ComSLModel<T>, frames: &Tensor<T>) -> Result<Tensor<T>, DecodeError> {
    let mut f = model.eval();
    let e = f.encode_speech(frames)?;
    let z = f.encode_speech_memory(e)?;
    Ok(f.tape.value(z.hidden).clone())
}

/// Text encoder output `z^x` as a plain tensor.
pub fn encode_text_memory<T: Scalar>(model: &ComSLModel<T>, tokens: &[usize]) -> Result<Tensor<T>, DecodeError> {
    let mut f = model.eval();
    let z = f.encode_text(tokens)?;
    Ok(f.tape.value(z.hidden).clone())
}

fn next_log_probs<T: Scalar>(
    model: &ComSLModel<T>,
    memory: &Tensor<T>,
    prefix: &[usize],
    out: &mut Vec<f64>,
) -> Result<(), DecodeError> {
    let mut f = model.eval();
    let mem = f.tape.constant(memory.clone());
    let logits = f.decode_logits(mem, prefix)?;
    let value = f.tape.value(logits);
    let last = value.row(value.rows() - 1);
    out.clear();
    out.extend(last.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for v in out.iter_mut() {
        *v -= lse;
    }
    Ok(())
}

fn allowed(vocab: &Vocab, id: usize) -> bool {
    id == Vocab::EOS || vocab.is_content(id)
}

fn check_args<T: Scalar>(model: &ComSLModel<T>, vocab: &Vocab, prefix: &[usize], max_len: usize) -> Result<usize, DecodeError> {
    if prefix.is_empty() {
        return Err(DecodeError::Invalid("decoder prefix is empty".into()));
    }
    if max_len == 0 {
        return Err(DecodeError::Invalid("max_len must be at least 1".into()));
    }
    if vocab.size() > model.config().vocab_size {
        return Err(DecodeError::Invalid(format!(
            "vocabulary of {} exceeds the model's {}",
            vocab.size(),
            model.config().vocab_size
        )));
    }
    // The decoder accepts at most max_tokens generated positions after the tags.
    Ok(max_len.min((model.config().max_tokens + 2).saturating_sub(prefix.len())).max(1))
}

/// Argmax decoding over content tokens and EOS; ties go to the smaller id.
pub fn greedy_decode<T: Scalar>(
    model: &ComSLModel<T>,
    vocab: &Vocab,
    memory: &Tensor<T>,
    prefix: &[usize],
    max_len: usize,
) -> Result<Hypothesis, DecodeError> {
    let max_len = check_args(model, vocab, prefix, max_len)?;
    greedy_with(vocab, prefix, max_len, |seq, out| next_log_probs(model, memory, seq, out))
}

/// [`greedy_decode`] over any next-token log-probability function, which
/// receives the full sequence so far (prefix included).
pub fn greedy_with<F>(vocab: &Vocab, prefix: &[usize], max_len: usize, mut next: F) -> Result<Hypothesis, DecodeError>
where
    F: FnMut(&[usize], &mut Vec<f64>) -> Result<(), DecodeError>,
{
    let mut seq = prefix.to_vec();
    let mut logprob = 0.0;
    let mut lp = Vec::new();
    for step in 0..max_len {
        next(&seq, &mut lp)?;
        let mut best = None::<(usize, f64)>;
        for (id, &v) in lp.iter().enumerate() {
            if allowed(vocab, id) && v != f64::NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        let Some((id, v)) = best else {
            if step == 0 {
                return Err(DecodeError::Invalid("no decodable token in distribution".into()));
            }
            break;
        };
        logprob += v;
        if id == Vocab::EOS {
            let tokens = seq[prefix.len()..].to_vec();
            let len = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                logprob,
                score: logprob / len as f64,
                finished: true,
            });
        }
        seq.push(id);
    }
    let tokens = seq[prefix.len()..].to_vec();
    let len = tokens.len();
    Ok(Hypothesis {
        tokens,
        logprob,
        score: logprob / len as f64,
        finished: false,
    })
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Hypotheses that emit EOS retire into a
/// pool; the best retired hypothesis wins, else the best one alive at
/// `max_len`.
pub fn beam_search<T: Scalar>(
    model: &ComSLModel<T>,
    vocab: &Vocab,
    memory: &Tensor<T>,
    prefix: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, DecodeError> {
    if beam == 0 {
        return Err(DecodeError::Invalid("beam must be at least 1".into()));
    }
    let max_len = check_args(model, vocab, prefix, max_len)?;
    beam_search_with(vocab, prefix, beam, max_len, |seq, out| next_log_probs(model, memory, seq, out))
}

/// [`beam_search`] over any next-token log-probability function.
pub fn beam_search_with<F>(
    vocab: &Vocab,
    prefix: &[usize],
    beam: usize,
    max_len: usize,
    mut next: F,
) -> Result<Hypothesis, DecodeError>
where
    F: FnMut(&[usize], &mut Vec<f64>) -> Result<(), DecodeError>,
{
    if beam == 0 || max_len == 0 {
        return Err(DecodeError::Invalid("beam and max_len must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut lp = Vec::new();
    let mut seq = Vec::new();
    for step in 0..max_len {
        let len = (step + 1) as f64;
        let mut candidates = Vec::with_capacity(alive.len() * lp.len().max(1));
        for h in &alive {
            seq.clear();
            seq.extend_from_slice(prefix);
            seq.extend_from_slice(&h.tokens);
            next(&seq, &mut lp)?;
            for (id, &v) in lp.iter().enumerate() {
                // Zero-probability continuations never enter the beam.
                if !allowed(vocab, id) || v == f64::NEG_INFINITY {
                    continue;
                }
                let logprob = h.logprob + v;
                let finished = id == Vocab::EOS;
                let mut tokens = h.tokens.clone();
                if !finished {
                    tokens.push(id);
                }
                candidates.push(Hypothesis {
                    tokens,
                    logprob,
                    score: logprob / len,
                    finished,
                });
            }
        }
        // Every candidate at this step has the same length, so the score
        // order is the log-probability order. Finished ones rank as if EOS
        // were the token id, keeping ties deterministic.
        candidates.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                let key = |h: &Hypothesis| {
                    let mut k = h.tokens.clone();
                    if h.finished {
                        k.push(Vocab::EOS);
                    }
                    k
                };
                key(a).cmp(&key(b))
            })
        });
        if candidates.is_empty() {
            if step == 0 {
                return Err(DecodeError::Invalid("no decodable token in distribution".into()));
            }
            break;
        }
        candidates.truncate(beam);
        alive.clear();
        for c in candidates {
            if c.finished {
                pool.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    let best = if pool.is_empty() { alive } else { pool };
    Ok(best.into_iter().min_by(rank).expect("nonempty hypothesis set"))
}

/// Beam-search MT over transcripts, used as the pseudo-label teacher.
pub struct ModelTranslator<'a, T> {
    pub model: &'a ComSLModel<T>,
    pub vocab: &'a Vocab,
    pub beam: usize,
}

impl<T: Scalar> Translator for ModelTranslator<'_, T> {
    fn translate(&self, src: Lang, transcript: &[usize]) -> Result<Vec<usize>, CorpusError> {
        let memory = encode_text_memory(self.model, transcript).map_err(|e| match e {
            DecodeError::Model(m) => CorpusError::Model(m),
            other => CorpusError::Format(other.to_string()),
        })?;
        let prefix = self.vocab.prefix(Task::Mt, src);
        let max_len = self.model.config().max_tokens;
        beam_search(self.model, self.vocab, &memory, &prefix, self.beam, max_len)
            .map(|h| h.tokens)
            .map_err(|e| match e {
                DecodeError::Model(m) => CorpusError::Model(m),
                other => CorpusError::Format(other.to_string()),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub st_bleu: f64,
    /// BLEU of translating ground-truth transcripts.
    pub mt_bleu: f64,
    /// Mean per-utterance WER of transcribing speech; NaN when not measured.
    pub asr_wer: f64,
}

/// Decodes every example and scores it. `with_mt_asr` also measures MT BLEU
/// and ASR WER, which costs two more decodes per example.
pub fn evaluate<T: Scalar>(
    model: &ComSLModel<T>,
    vocab: &Vocab,
    examples: &[TripletExample],
    beam: usize,
    with_mt_asr: bool,
) -> Result<EvalReport, DecodeError> {
    let max_len = model.config().max_tokens;
    let mut st = Vec::with_capacity(examples.len());
    let mut mt = Vec::new();
    let mut wer_sum = 0.0;
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let frames: Tensor<T> = ex.frames.cast();
        let z_s = encode_speech_memory(model, &frames)?;
        let prefix = vocab.prefix(Task::St, ex.src_lang);
        st.push(beam_search(model, vocab, &z_s, &prefix, beam, max_len)?.tokens);
        refs.push(ex.translation.as_slice());
        if with_mt_asr {
            let z_x = encode_text_memory(model, &ex.transcript)?;
            let prefix = vocab.prefix(Task::Mt, ex.src_lang);
            mt.push(beam_search(model, vocab, &z_x, &prefix, beam, max_len)?.tokens);
            let prefix = vocab.prefix(Task::Asr, ex.src_lang);
            let hyp = beam_search(model, vocab, &z_s, &prefix, beam, max_len)?.tokens;
            wer_sum += word_error_rate(vocab, &hyp, &ex.transcript)?;
        }
    }
    let st_bleu = corpus_bleu(&st, &refs)?;
    let (mt_bleu, asr_wer) = if with_mt_asr {
        (corpus_bleu(&mt, &refs)?, wer_sum / examples.len() as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(EvalReport {
        st_bleu,
        mt_bleu,
        asr_wer,
    })
}
