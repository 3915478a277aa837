//! Speech transformer blocks → two-stage downsampling adapter → text
//! transformer encoder/decoder, with speech-only, text-only, concatenated
//! and decoding forwards.

mod config;
mod forward;
mod gradcheck;
mod params;

pub use config::ModelConfig;
pub use forward::{ConcatEncoding, Encoding, Forward};
pub use gradcheck::{param_grad_check, sample_param_coords};
pub use params::{ParamGroup, ParamStore, Parameter};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{ParamId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("speech input of {frames} frames outside 1..={max}")]
    FrameCount { frames: usize, max: usize },
    #[error("token sequence of length {len} outside 1..={max}")]
    TokenCount { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("frame width {got} does not match feat_dim {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error("concatenated length {len} exceeds encoder capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("trace layer {k} outside 1..={layers}")]
    TraceLayer { k: usize, layers: usize },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EncBlock {
    pub ln_attn: Norm,
    pub attn: Attn,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DecBlock {
    pub ln_self: Norm,
    pub self_attn: Attn,
    pub ln_cross: Norm,
    pub cross_attn: Attn,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AdapterStage {
    pub ln: Norm,
    pub ffn: Ffn,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub speech_in: Linear,
    pub speech_blocks: Vec<EncBlock>,
    pub speech_ln: Norm,
    pub adapter: [AdapterStage; 2],
    pub embed: ParamId,
    /// Row 0 marks speech positions, row 1 text positions.
    pub segment: ParamId,
    pub enc_blocks: Vec<EncBlock>,
    pub enc_ln: Norm,
    pub dec_blocks: Vec<DecBlock>,
    pub dec_ln: Norm,
}

/// The full parameter set θ plus its fixed positional table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComSLModel<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    positions: Tensor<T>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Linear {
        let w = self
            .store
            .add_uniform(self.rng, format!("{name}.w"), group, &[d_in, d_out], d_in, d_out);
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, d: usize) -> Norm {
        let g = self
            .store
            .add(format!("{name}.g"), group, Tensor::full(&[d], T::one()));
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros(&[d]));
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, group: ParamGroup, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), group, d, d),
            k: self.linear(&format!("{name}.k"), group, d, d),
            v: self.linear(&format!("{name}.v"), group, d, d),
            o: self.linear(&format!("{name}.o"), group, d, d),
        }
    }

    fn ffn(&mut self, name: &str, group: ParamGroup, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), group, d, hidden),
            down: self.linear(&format!("{name}.down"), group, hidden, d),
        }
    }

    fn enc_block(&mut self, name: &str, group: ParamGroup, d: usize, ff: usize) -> EncBlock {
        EncBlock {
            ln_attn: self.norm(&format!("{name}.ln_attn"), group, d),
            attn: self.attn(&format!("{name}.attn"), group, d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), group, d),
            ffn: self.ffn(&format!("{name}.ffn"), group, d, ff),
        }
    }

    fn dec_block(&mut self, name: &str, d: usize, ff: usize) -> DecBlock {
        let g = ParamGroup::TextDecoder;
        DecBlock {
            ln_self: self.norm(&format!("{name}.ln_self"), g, d),
            self_attn: self.attn(&format!("{name}.self_attn"), g, d),
            ln_cross: self.norm(&format!("{name}.ln_cross"), g, d),
            cross_attn: self.attn(&format!("{name}.cross_attn"), g, d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), g, d),
            ffn: self.ffn(&format!("{name}.ffn"), g, d, ff),
        }
    }

    fn adapter_stage(&mut self, name: &str, d: usize) -> AdapterStage {
        let g = ParamGroup::Adapter;
        let ln = self.norm(&format!("{name}.ln"), g, d);
        let ffn = self.ffn(&format!("{name}.ffn"), g, d, 2 * d);
        let conv_w = self
            .store
            .add_uniform(self.rng, format!("{name}.conv.w"), g, &[3, d, d], 3 * d, 3 * d);
        let conv_b = self.store.add(format!("{name}.conv.b"), g, Tensor::zeros(&[d]));
        AdapterStage {
            ln,
            ffn,
            conv_w,
            conv_b,
        }
    }
}

/// Fixed sinusoidal table `[rows × d]`.
pub fn sinusoidal_positions<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows * d];
    for pos in 0..rows {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, d], data).expect("table shape")
}

impl<T: Scalar> ComSLModel<T> {
    /// Deterministic initialization: Xavier-uniform weights, zero biases,
    /// unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };

        let speech_in = b.linear("speech.input", ParamGroup::Speech, cfg.feat_dim, d);
        let speech_blocks = (0..cfg.speech_layers)
            .map(|i| b.enc_block(&format!("speech.block{i}"), ParamGroup::Speech, d, cfg.ff_dim))
            .collect();
        let speech_ln = b.norm("speech.ln_final", ParamGroup::Speech, d);
        let adapter = [b.adapter_stage("adapter.stage0", d), b.adapter_stage("adapter.stage1", d)];

        // Embedding rows have std 1/sqrt(d); inputs are rescaled by sqrt(d).
        let bound = (3.0 / d as f64).sqrt();
        let embed = b.store.add_bounded(
            b.rng,
            "embed.tokens".into(),
            ParamGroup::SharedEmbed,
            &[cfg.vocab_size, d],
            bound,
        );
        let segment = b.store.add_bounded(
            b.rng,
            "embed.segments".into(),
            ParamGroup::SharedEmbed,
            &[2, d],
            bound,
        );

        let enc_blocks = (0..cfg.text_enc_layers)
            .map(|i| b.enc_block(&format!("text_enc.block{i}"), ParamGroup::TextEncoder, d, cfg.ff_dim))
            .collect();
        let enc_ln = b.norm("text_enc.ln_final", ParamGroup::TextEncoder, d);
        let dec_blocks = (0..cfg.text_dec_layers)
            .map(|i| b.dec_block(&format!("text_dec.block{i}"), d, cfg.ff_dim))
            .collect();
        let dec_ln = b.norm("text_dec.ln_final", ParamGroup::TextDecoder, d);

        let layout = Layout {
            speech_in,
            speech_blocks,
            speech_ln,
            adapter,
            embed,
            segment,
            enc_blocks,
            enc_ln,
            dec_blocks,
            dec_ln,
        };
        Ok(ComSLModel {
            cfg: cfg.clone(),
            params: store,
            layout,
            positions: sinusoidal_positions(cfg.position_capacity(), d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Eval-mode forward context (no dropout, no gradient tracking).
    pub fn eval(&self) -> Forward<'_, T> {
        Forward::new(self, None, false)
    }

    /// Forward context that records gradients; `dropout_seed` enables
    /// train-mode dropout.
    pub fn train_forward(&self, dropout_seed: Option<u64>) -> Forward<'_, T> {
        Forward::new(self, dropout_seed.map(ChaCha8Rng::seed_from_u64), true)
    }

    /// Copies parameter values from `other` for every group accepted by
    /// `filter`. Both models must share the same config.
    pub fn copy_groups_from(&mut self, other: &ComSLModel<T>, filter: impl Fn(ParamGroup) -> bool) {
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            debug_assert_eq!(dst.name, src.name);
            if filter(dst.group) {
                dst.value = src.value.clone();
            }
        }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ComSLModel<U> {
        let mut params = ParamStore::default();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.group, p.value.cast());
        }
        ComSLModel {
            cfg: self.cfg.clone(),
            params,
            layout: self.layout.clone(),
            positions: sinusoidal_positions(self.cfg.position_capacity(), self.cfg.d_model),
        }
    }
}
