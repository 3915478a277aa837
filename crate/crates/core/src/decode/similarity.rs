use std::fmt::Write as _;
use std::path::Path;

use super::DecodeError;
use crate::model::ComSLModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Speech states from the concatenated speech + text forward.
    Cml,
    /// Speech states from the speech-only forward.
    SpeechOnly,
}

impl SimMode {
    pub fn name(self) -> &'static str {
        match self {
            SimMode::Cml => "cml",
            SimMode::SpeechOnly => "speech-only",
        }
    }
}

/// Speech positions × text positions, each row a softmax over the text axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub layer: usize,
    pub mode: SimMode,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Row-softmax of `a·bᵀ / √d`.
    pub fn from_states(speech: &Tensor<f64>, text: &Tensor<f64>, layer: usize, mode: SimMode) -> Self {
        let (rows, cols, d) = (speech.rows(), text.rows(), speech.cols());
        let scale = 1.0 / (d as f64).sqrt();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let s = speech.row(i);
            let start = data.len();
            data.extend((0..cols).map(|j| s.iter().zip(text.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale));
            crate::tensor::kernels::softmax_in_place(&mut data[start..]);
        }
        SimilarityMatrix {
            rows,
            cols,
            layer,
            mode,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mean Shannon entropy (nats) of the rows.
    pub fn mean_row_entropy(&self) -> f64 {
        let total: f64 = (0..self.rows)
            .map(|i| -self.row(i).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .sum();
        total / self.rows.max(1) as f64
    }

    /// One line per row, space-separated decimals.
    pub fn grid_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn header_text(&self) -> String {
        format!("rows={} cols={} layer={} mode={}\n", self.rows, self.cols, self.layer, self.mode.name())
    }

    /// Writes `<stem>.txt` (grid) and `<stem>.hdr` (header line).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(), DecodeError> {
        for (ext, body) in [("txt", self.grid_text()), ("hdr", self.header_text())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|source| DecodeError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Similarity between layer-`k` speech states and layer-`k` text-only states
/// of one example. The concatenated forward sees the unmasked transcript.
pub fn similarity_matrix<T: Scalar>(
    model: &ComSLModel<T>,
    frames: &Tensor<T>,
    transcript: &[usize],
    layer: usize,
    mode: SimMode,
) -> Result<SimilarityMatrix, DecodeError> {
    let mut f = model.eval().with_trace_layer(layer)?;
    let e = f.encode_speech(frames)?;
    let speech = match mode {
        SimMode::Cml => f.encode_concat(e, transcript)?.speech_trace,
        SimMode::SpeechOnly => f.encode_speech_memory(e)?.layer_trace,
    };
    let text = f.encode_text(transcript)?.layer_trace;
    let s: Tensor<f64> = f.tape.value(speech).cast();
    let t: Tensor<f64> = f.tape.value(text).cast();
    Ok(SimilarityMatrix::from_states(&s, &t, layer, mode))
}
