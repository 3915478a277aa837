use rand_chacha::ChaCha8Rng;

use super::{Attn, ComSLModel, EncBlock, Ffn, Linear, ModelConfig, ModelError, Norm};
use crate::scalar::Scalar;
use crate::tensor::{AttnMask, Gradients, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;
const SPEECH_SEGMENT: usize = 0;
const TEXT_SEGMENT: usize = 1;

/// Text-encoder output for one input, with the hidden state after the traced block.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    pub hidden: Var,
    pub layer_trace: Var,
    /// `(speech_len, text_len)`; one of them is zero outside concatenated mode.
    pub segment_lengths: (usize, usize),
}

/// Concatenated speech + masked-text encoding, already split back into segments.
#[derive(Debug, Clone, Copy)]
pub struct ConcatEncoding {
    pub hidden: Var,
    /// Speech half of the encoder output.
    pub speech: Var,
    /// Text half of the encoder output.
    pub text: Var,
    /// Speech half of the traced block output.
    pub speech_trace: Var,
    pub segment_lengths: (usize, usize),
}

/// One forward computation over a model, recorded on its own tape.
///
/// Parameters are materialized lazily as tape leaves, once per tape.
pub struct Forward<'m, T: Scalar> {
    model: &'m ComSLModel<T>,
    pub tape: Tape<T>,
    vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    track_grads: bool,
    trace_layer: usize,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub(crate) fn new(model: &'m ComSLModel<T>, rng: Option<ChaCha8Rng>, track_grads: bool) -> Self {
        Forward {
            model,
            tape: Tape::new(),
            vars: vec![None; model.params().len()],
            rng,
            track_grads,
            trace_layer: model.config().erm_layer,
        }
    }

    /// Records the trace after text-encoder block `k` (1-based) instead of
    /// the configured ERM layer.
    pub fn with_trace_layer(mut self, k: usize) -> Result<Self, ModelError> {
        let layers = self.cfg().text_enc_layers;
        if k == 0 || k > layers {
            return Err(ModelError::TraceLayer { k, layers });
        }
        self.trace_layer = k;
        Ok(self)
    }

    pub fn model(&self) -> &'m ComSLModel<T> {
        self.model
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.tape.backward(loss)
    }

    fn cfg(&self) -> &'m ModelConfig {
        self.model.config()
    }

    fn p(&mut self, id: crate::tensor::ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.model.params().get(id).value.clone();
        let v = self.tape.param(value, id, self.track_grads);
        self.vars[id.0] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var, TensorError> {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var, TensorError> {
        let g = self.p(n.g);
        let b = self.p(n.b);
        self.tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    fn attend(
        &mut self,
        xq: Var,
        xkv: Var,
        a: Attn,
        mask: AttnMask,
        attn_dropout: f64,
    ) -> Result<Var, TensorError> {
        let q = self.linear(xq, a.q)?;
        let k = self.linear(xkv, a.k)?;
        let v = self.linear(xkv, a.v)?;
        let heads = self.cfg().n_heads;
        let drop = match self.rng.as_mut() {
            Some(rng) if attn_dropout > 0.0 => Some((attn_dropout, rng)),
            _ => None,
        };
        let ctx = self.tape.attention(q, k, v, heads, mask, drop)?;
        self.linear(ctx, a.o)
    }

    fn ffn(&mut self, x: Var, f: Ffn) -> Result<Var, TensorError> {
        let h = self.linear(x, f.up)?;
        let h = self.tape.gelu(h);
        self.linear(h, f.down)
    }

    /// Pre-norm encoder block.
    fn enc_block(
        &mut self,
        x: Var,
        b: EncBlock,
        mask: AttnMask,
        dropout: f64,
        attn_dropout: f64,
    ) -> Result<Var, TensorError> {
        let h = self.norm(x, b.ln_attn)?;
        let h = self.attend(h, h, b.attn, mask, attn_dropout)?;
        let h = self.dropout(h, dropout)?;
        let x = self.tape.add(x, h)?;
        let h = self.norm(x, b.ln_ffn)?;
        let h = self.ffn(h, b.ffn)?;
        let h = self.dropout(h, dropout)?;
        self.tape.add(x, h)
    }

    fn positions(&mut self, len: usize) -> Result<Var, TensorError> {
        let table = self.model.positions();
        let d = table.cols();
        if len > table.rows() {
            return Err(TensorError::invalid(
                "positions",
                format!("{len} positions exceed table of {}", table.rows()),
            ));
        }
        let rows = Tensor::new(vec![len, d], table.data()[..len * d].to_vec())?;
        Ok(self.tape.constant(rows))
    }

    fn check_tokens(&self, tokens: &[usize], max: usize) -> Result<(), ModelError> {
        if tokens.is_empty() || tokens.len() > max {
            return Err(ModelError::TokenCount {
                len: tokens.len(),
                max,
            });
        }
        let vocab = self.cfg().vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(ModelError::UnknownToken { id, vocab });
        }
        Ok(())
    }

    /// Speech blocks followed by the adapter; returns `e^s` with
    /// `ceil(ceil(T/2)/2)` rows.
    pub fn encode_speech(&mut self, frames: &Tensor<T>) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        if frames.rank() != 2 || frames.cols() != cfg.feat_dim {
            return Err(ModelError::FeatureWidth {
                got: frames.cols(),
                expected: cfg.feat_dim,
            });
        }
        let len = frames.rows();
        if len == 0 || len > cfg.max_frames {
            return Err(ModelError::FrameCount {
                frames: len,
                max: cfg.max_frames,
            });
        }
        let layout = self.model.layout();
        let x = self.tape.constant(frames.clone());
        let x = self.linear(x, layout.speech_in)?;
        let pos = self.positions(len)?;
        let mut x = self.tape.add(x, pos)?;
        for &b in &layout.speech_blocks {
            x = self.enc_block(x, b, AttnMask::Full, cfg.dropout_speech, 0.0)?;
        }
        x = self.norm(x, layout.speech_ln)?;
        for stage in layout.adapter {
            let h = self.norm(x, stage.ln)?;
            let h = self.ffn(h, stage.ffn)?;
            let h = self.tape.add(x, h)?;
            let w = self.p(stage.conv_w);
            let b = self.p(stage.conv_b);
            x = self.tape.conv1d_stride2(h, w, b)?;
        }
        Ok(x)
    }

    fn segment_row(&mut self, segment: usize) -> Result<Var, TensorError> {
        let table = self.p(self.model.layout().segment);
        self.tape.slice_seq(table, segment, 1)
    }

    fn speech_input(&mut self, e_s: Var) -> Result<Var, TensorError> {
        let len = self.tape.shape(e_s)[0];
        let pos = self.positions(len)?;
        let x = self.tape.add(e_s, pos)?;
        let seg = self.segment_row(SPEECH_SEGMENT)?;
        self.tape.add_row(x, seg)
    }

    fn token_input(&mut self, tokens: &[usize], segment: Option<usize>) -> Result<Var, TensorError> {
        let embed = self.p(self.model.layout().embed);
        let x = self.tape.embedding(embed, tokens)?;
        let x = self.tape.scale(x, T::of((self.cfg().d_model as f64).sqrt()));
        let pos = self.positions(tokens.len())?;
        let x = self.tape.add(x, pos)?;
        match segment {
            Some(s) => {
                let seg = self.segment_row(s)?;
                self.tape.add_row(x, seg)
            }
            None => Ok(x),
        }
    }

    fn run_text_encoder(&mut self, x: Var, mask: AttnMask) -> Result<(Var, Var), TensorError> {
        let cfg = self.cfg();
        let layout = self.model.layout();
        let mut x = self.dropout(x, cfg.dropout_text)?;
        let mut trace = x;
        for (i, &b) in layout.enc_blocks.iter().enumerate() {
            x = self.enc_block(x, b, mask, cfg.dropout_text, cfg.attn_dropout_text)?;
            if i + 1 == self.trace_layer {
                trace = x;
            }
        }
        let out = self.norm(x, layout.enc_ln)?;
        Ok((out, trace))
    }

    /// Text encoder over the speech embedding alone (`z^s`, trace `a^s_k`).
    pub fn encode_speech_memory(&mut self, e_s: Var) -> Result<Encoding, ModelError> {
        let len = self.tape.shape(e_s)[0];
        let x = self.speech_input(e_s)?;
        let (hidden, layer_trace) = self.run_text_encoder(x, AttnMask::Full)?;
        Ok(Encoding {
            hidden,
            layer_trace,
            segment_lengths: (len, 0),
        })
    }

    /// Text encoder over tokens (`z^x`, trace `a^x_k`).
    pub fn encode_text(&mut self, tokens: &[usize]) -> Result<Encoding, ModelError> {
        self.check_tokens(tokens, self.cfg().max_tokens)?;
        let x = self.token_input(tokens, Some(TEXT_SEGMENT))?;
        let (hidden, layer_trace) = self.run_text_encoder(x, AttnMask::Full)?;
        Ok(Encoding {
            hidden,
            layer_trace,
            segment_lengths: (0, tokens.len()),
        })
    }

    /// `[e^s ; e^{x'}]` through the text encoder with attention across both
    /// segments, split back into `(ẑ^s, ẑ^x)`.
    pub fn encode_concat(&mut self, e_s: Var, masked_tokens: &[usize]) -> Result<ConcatEncoding, ModelError> {
        self.concat_with_mask(e_s, masked_tokens, false)
    }

    /// Diagnostic variant of [`Self::encode_concat`] in which neither segment can
    /// attend to the other.
    pub fn encode_concat_isolated(
        &mut self,
        e_s: Var,
        masked_tokens: &[usize],
    ) -> Result<ConcatEncoding, ModelError> {
        self.concat_with_mask(e_s, masked_tokens, true)
    }

    fn concat_with_mask(
        &mut self,
        e_s: Var,
        masked_tokens: &[usize],
        isolate: bool,
    ) -> Result<ConcatEncoding, ModelError> {
        self.check_tokens(masked_tokens, self.cfg().max_tokens)?;
        let speech_len = self.tape.shape(e_s)[0];
        let text_len = masked_tokens.len();
        let cap = self.cfg().concat_capacity();
        if speech_len == 0 || speech_len + text_len > cap {
            return Err(ModelError::Capacity {
                len: speech_len + text_len,
                max: cap,
            });
        }
        let xs = self.speech_input(e_s)?;
        let xt = self.token_input(masked_tokens, Some(TEXT_SEGMENT))?;
        let x = self.tape.concat_seq(xs, xt)?;
        let mask = if isolate {
            AttnMask::BlockDiagonal { boundary: speech_len }
        } else {
            AttnMask::Full
        };
        let (hidden, trace) = self.run_text_encoder(x, mask)?;
        let (speech, text) = self.tape.split_seq(hidden, speech_len)?;
        let speech_trace = self.tape.slice_seq(trace, 0, speech_len)?;
        Ok(ConcatEncoding {
            hidden,
            speech,
            text,
            speech_trace,
            segment_lengths: (speech_len, text_len),
        })
    }

    /// Teacher-forced next-token logits `[len(prefix) × |V|]` given encoder memory.
    pub fn decode_logits(&mut self, memory: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        self.check_tokens(prefix, self.cfg().max_tokens + 2)?;
        let cfg = self.cfg();
        let layout = self.model.layout();
        let x = self.token_input(prefix, None)?;
        let mut x = self.dropout(x, cfg.dropout_text)?;
        for &b in &layout.dec_blocks {
            let h = self.norm(x, b.ln_self)?;
            let h = self.attend(h, h, b.self_attn, AttnMask::Causal, cfg.attn_dropout_text)?;
            let h = self.dropout(h, cfg.dropout_text)?;
            x = self.tape.add(x, h)?;
            let h = self.norm(x, b.ln_cross)?;
            let h = self.attend(h, memory, b.cross_attn, AttnMask::Full, cfg.attn_dropout_text)?;
            let h = self.dropout(h, cfg.dropout_text)?;
            x = self.tape.add(x, h)?;
            let h = self.norm(x, b.ln_ffn)?;
            let h = self.ffn(h, b.ffn)?;
            let h = self.dropout(h, cfg.dropout_text)?;
            x = self.tape.add(x, h)?;
        }
        let h = self.norm(x, layout.dec_ln)?;
        let embed = self.p(layout.embed);
        Ok(self.tape.matmul_bt(h, embed)?)
    }
}
