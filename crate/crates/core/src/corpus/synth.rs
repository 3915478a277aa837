//! Synthetic speech/transcript/translation triples.
//!
//! Transcripts are random content tokens. The translation of source language
//! `l` applies `σ(t) = (7t + 3) mod n` plus a per-language offset to every
//! token and reverses the sentence. Speech renders each token as 2-4 noisy
//! copies of a fixed per-token prototype frame, with silence at both ends and
//! occasionally between words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::{Lang, Vocab};
use super::CorpusError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletExample {
    pub id: usize,
    /// `T × feat_dim` speech frames.
    pub frames: Tensor<f32>,
    pub transcript: Vec<usize>,
    /// Empty for unlabeled speech/transcript pairs.
    pub translation: Vec<usize>,
    pub src_lang: Lang,
    pub tgt_lang: Lang,
    pub is_pseudo: bool,
}

impl TripletExample {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Generator parameters other than the seed and language profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub feat_dim: usize,
    pub max_frames: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub silence_prob: f64,
    /// Seeds the token prototypes; shared by every corpus that must sound alike.
    pub acoustic_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feat_dim: 16,
            max_frames: 256,
            min_len: 3,
            max_len: 12,
            noise: 0.1,
            silence_prob: 0.1,
            acoustic_seed: 0x5eed,
        }
    }
}

/// `(7t + 3) mod n` on content indices.
pub fn sigma(t: usize, n_content: usize) -> usize {
    (7 * t + 3) % n_content
}

/// Offset added after `σ` for pairs from `src`. Zero for the first language.
pub fn pair_offset(src: Lang, n_content: usize) -> usize {
    (13 * src.index()) % n_content
}

/// Gold translation of a transcript (token ids in, token ids out).
pub fn translate(vocab: &Vocab, src: Lang, transcript: &[usize]) -> Result<Vec<usize>, CorpusError> {
    let n = vocab.n_content();
    let off = pair_offset(src, n);
    transcript
        .iter()
        .rev()
        .map(|&tok| {
            let c = vocab
                .content_index(tok)
                .ok_or_else(|| CorpusError::Format(format!("token {tok} is not a content token")))?;
            Ok(vocab.content((sigma(c, n) + off) % n))
        })
        .collect()
}

/// Fixed prototype vectors for every content token and for silence.
#[derive(Debug, Clone)]
pub struct Acoustics {
    feat_dim: usize,
    /// Row `c` for content index `c`; last row is silence.
    prototypes: Vec<Vec<f32>>,
}

impl Acoustics {
    pub fn new(vocab: &Vocab, feat_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let prototypes = (0..=vocab.n_content())
            .map(|_| (0..feat_dim).map(|_| normal.sample(&mut rng) as f32).collect())
            .collect();
        Acoustics {
            feat_dim,
            prototypes,
        }
    }

    fn silence(&self) -> &[f32] {
        self.prototypes.last().expect("silence prototype")
    }
}

/// Per-language example counts; listed languages become `Lang(0..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LangProfile {
    pub counts: Vec<usize>,
}

impl LangProfile {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn render(
    cfg: &SynthConfig,
    acoustics: &Acoustics,
    vocab: &Vocab,
    transcript: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let noise = Normal::new(0.0f64, cfg.noise).expect("noise scale");
    let mut rows: Vec<f32> = Vec::new();
    let mut emit = |proto: &[f32], rng: &mut ChaCha8Rng| {
        let copies = rng.random_range(2..=4usize);
        for _ in 0..copies {
            rows.extend(proto.iter().map(|&p| p + noise.sample(rng) as f32));
        }
    };
    emit(acoustics.silence(), rng);
    for (i, &tok) in transcript.iter().enumerate() {
        if i > 0 && rng.random_bool(cfg.silence_prob) {
            emit(acoustics.silence(), rng);
        }
        let c = vocab.content_index(tok).expect("content token");
        emit(&acoustics.prototypes[c], rng);
    }
    emit(acoustics.silence(), rng);
    let t = rows.len() / acoustics.feat_dim;
    Tensor::new(vec![t, acoustics.feat_dim], rows).expect("frame rows")
}

fn check_config(cfg: &SynthConfig) -> Result<(), CorpusError> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(CorpusError::Config(format!(
            "bad sentence length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    // Shortest possible rendering: silence + two frames per token + silence.
    if 2 * cfg.min_len + 4 > cfg.max_frames {
        return Err(CorpusError::Config(format!(
            "max_frames {} cannot fit a {}-token sentence",
            cfg.max_frames, cfg.min_len
        )));
    }
    if cfg.feat_dim == 0 {
        return Err(CorpusError::Config("feat_dim must be positive".into()));
    }
    Ok(())
}

fn generate(
    vocab: &Vocab,
    cfg: &SynthConfig,
    acoustics: &Acoustics,
    seed: u64,
    index: usize,
    lang: Lang,
    labeled: bool,
) -> Result<TripletExample, CorpusError> {
    let mut rng = example_rng(seed, index);
    // Over-long renderings are redrawn, never truncated.
    loop {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let transcript: Vec<usize> = (0..len)
            .map(|_| vocab.content(rng.random_range(0..vocab.n_content())))
            .collect();
        let frames = render(cfg, acoustics, vocab, &transcript, &mut rng);
        if frames.rows() > cfg.max_frames {
            continue;
        }
        let translation = if labeled {
            translate(vocab, lang, &transcript)?
        } else {
            Vec::new()
        };
        return Ok(TripletExample {
            id: index,
            frames,
            transcript,
            translation,
            src_lang: lang,
            tgt_lang: Lang::TARGET,
            is_pseudo: false,
        });
    }
}

fn language_order(profile: &LangProfile, seed: u64) -> Vec<Lang> {
    let mut order: Vec<Lang> = profile
        .counts
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| std::iter::repeat_n(Lang(l as u16), n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_0ca7);
    // Fisher-Yates with the seeded stream.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Labeled triples. Each example draws from its own stream derived from
/// `(seed, index)`, so generation can be split into shards freely.
pub fn synth_corpus(
    vocab: &Vocab,
    cfg: &SynthConfig,
    profile: &LangProfile,
    seed: u64,
) -> Result<Vec<TripletExample>, CorpusError> {
    check_config(cfg)?;
    if profile.counts.len() > vocab.n_langs() {
        return Err(CorpusError::Config(format!(
            "profile lists {} languages but the vocabulary has {}",
            profile.counts.len(),
            vocab.n_langs()
        )));
    }
    let acoustics = Acoustics::new(vocab, cfg.feat_dim, cfg.acoustic_seed);
    language_order(profile, seed)
        .into_iter()
        .enumerate()
        .map(|(i, lang)| generate(vocab, cfg, &acoustics, seed, i, lang, true))
        .collect()
}

/// Speech/transcript pairs without translations for the given languages.
pub fn synth_unlabeled(
    vocab: &Vocab,
    cfg: &SynthConfig,
    profile: &LangProfile,
    seed: u64,
) -> Result<Vec<TripletExample>, CorpusError> {
    check_config(cfg)?;
    let acoustics = Acoustics::new(vocab, cfg.feat_dim, cfg.acoustic_seed);
    language_order(profile, seed)
        .into_iter()
        .enumerate()
        .map(|(i, lang)| generate(vocab, cfg, &acoustics, seed, i, lang, false))
        .collect()
}
