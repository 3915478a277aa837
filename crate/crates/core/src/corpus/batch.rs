use std::borrow::Borrow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::mask_with;
use super::synth::TripletExample;
use super::vocab::{Lang, Vocab};
use super::CorpusError;
use crate::tensor::Tensor;

/// Right-padded view of several examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × T_max × feat_dim`, zero beyond each example's frame count.
    pub frames: Tensor<f32>,
    pub frame_lens: Vec<usize>,
    /// Each row padded with PAD to the longest transcript.
    pub x: Vec<Vec<usize>>,
    pub x_lens: Vec<usize>,
    pub y: Vec<Vec<usize>>,
    pub y_lens: Vec<usize>,
    /// Masked transcripts x', padded like `x`.
    pub x_masked: Vec<Vec<usize>>,
    pub mask_positions: Vec<Vec<usize>>,
    pub src_langs: Vec<Lang>,
    pub tgt_langs: Vec<Lang>,
    pub is_pseudo: Vec<bool>,
}

fn pad_rows(rows: &[&[usize]]) -> Vec<Vec<usize>> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, Vocab::PAD);
            v
        })
        .collect()
}

/// Pads every sequence and masks each transcript with a stream derived from
/// `(seed, position in batch)`.
pub fn collate_batch<E: Borrow<TripletExample>>(
    examples: &[E],
    vocab: &Vocab,
    p_mask: f64,
    seed: u64,
) -> Result<Batch, CorpusError> {
    let examples: Vec<&TripletExample> = examples.iter().map(Borrow::borrow).collect();
    let first = examples.first().ok_or(CorpusError::EmptyBatch)?;
    let feat = first.frames.cols();
    for (index, ex) in examples.iter().enumerate() {
        if ex.frames.cols() != feat {
            return Err(CorpusError::FeatureWidth {
                index,
                expected: feat,
                got: ex.frames.cols(),
            });
        }
    }
    let b = examples.len();
    let t_max = examples.iter().map(|e| e.num_frames()).max().unwrap_or(0);
    let mut frames = vec![0f32; b * t_max * feat];
    for (i, ex) in examples.iter().enumerate() {
        let start = i * t_max * feat;
        frames[start..start + ex.frames.numel()].copy_from_slice(ex.frames.data());
    }

    let mut masked = Vec::with_capacity(b);
    let mut mask_positions = Vec::with_capacity(b);
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (m, pos) = mask_with(vocab, &ex.transcript, p_mask, &mut rng);
        masked.push(m);
        mask_positions.push(pos);
    }

    let xs: Vec<&[usize]> = examples.iter().map(|e| e.transcript.as_slice()).collect();
    let ys: Vec<&[usize]> = examples.iter().map(|e| e.translation.as_slice()).collect();
    let ms: Vec<&[usize]> = masked.iter().map(|m| m.as_slice()).collect();
    Ok(Batch {
        frames: Tensor::new(vec![b, t_max, feat], frames).expect("padded frame buffer"),
        frame_lens: examples.iter().map(|e| e.num_frames()).collect(),
        x: pad_rows(&xs),
        x_lens: xs.iter().map(|x| x.len()).collect(),
        y: pad_rows(&ys),
        y_lens: ys.iter().map(|y| y.len()).collect(),
        x_masked: pad_rows(&ms),
        mask_positions,
        src_langs: examples.iter().map(|e| e.src_lang).collect(),
        tgt_langs: examples.iter().map(|e| e.tgt_lang).collect(),
        is_pseudo: examples.iter().map(|e| e.is_pseudo).collect(),
    })
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frame_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lens.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Unpadded `T_i × feat_dim` frames of example `i`.
    pub fn frames_of(&self, i: usize) -> Tensor<f32> {
        let (t_max, feat) = (self.frames.shape()[1], self.feat_dim());
        let start = i * t_max * feat;
        let data = self.frames.data()[start..start + self.frame_lens[i] * feat].to_vec();
        Tensor::new(vec![self.frame_lens[i], feat], data).expect("frame slice")
    }

    pub fn transcript(&self, i: usize) -> &[usize] {
        &self.x[i][..self.x_lens[i]]
    }

    pub fn translation(&self, i: usize) -> &[usize] {
        &self.y[i][..self.y_lens[i]]
    }

    pub fn masked_transcript(&self, i: usize) -> &[usize] {
        &self.x_masked[i][..self.x_lens[i]]
    }

    pub fn masked_fraction(&self) -> f64 {
        let masked: usize = self.mask_positions.iter().map(Vec::len).sum();
        let total: usize = self.x_lens.iter().sum();
        masked as f64 / total.max(1) as f64
    }
}
