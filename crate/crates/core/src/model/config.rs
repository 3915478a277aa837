use std::fmt::Write as _;

use super::ModelError;
use crate::kv::{KvMap, KvError};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Hidden width of the transformer feed-forward sub-layers.
    pub ff_dim: usize,
    pub speech_layers: usize,
    pub text_enc_layers: usize,
    pub text_dec_layers: usize,
    /// Text-encoder block (1-based) whose output is traced for representation matching.
    pub erm_layer: usize,
    pub feat_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub dropout_text: f64,
    pub attn_dropout_text: f64,
    pub dropout_speech: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 62,
            d_model: 48,
            n_heads: 4,
            ff_dim: 96,
            speech_layers: 2,
            text_enc_layers: 4,
            text_dec_layers: 2,
            erm_layer: 4,
            feat_dim: 16,
            max_frames: 256,
            max_tokens: 16,
            dropout_text: 0.0,
            attn_dropout_text: 0.0,
            dropout_speech: 0.0,
        }
    }
}

impl ModelConfig {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut issues = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("speech_layers", self.speech_layers),
            ("text_enc_layers", self.text_enc_layers),
            ("text_dec_layers", self.text_dec_layers),
            ("feat_dim", self.feat_dim),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                issues.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            issues.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.erm_layer == 0 || self.erm_layer > self.text_enc_layers {
            issues.push(format!(
                "erm_layer {} must lie in 1..={}",
                self.erm_layer, self.text_enc_layers
            ));
        }
        if self.max_frames < 4 {
            issues.push(format!("max_frames {} must be at least 4", self.max_frames));
        }
        for (name, p) in [
            ("dropout_text", self.dropout_text),
            ("attn_dropout_text", self.attn_dropout_text),
            ("dropout_speech", self.dropout_speech),
        ] {
            if !(0.0..1.0).contains(&p) {
                issues.push(format!("{name} {p} must lie in [0, 1)"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(issues))
        }
    }

    /// Length of the speech embedding after the two stride-2 adapter stages.
    pub fn downsampled_len(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }

    /// Rows in the fixed positional table.
    pub fn position_capacity(&self) -> usize {
        self.max_frames.max(self.max_tokens + 2)
    }

    /// Longest concatenated encoder input.
    pub fn concat_capacity(&self) -> usize {
        Self::downsampled_len(self.max_frames) + self.max_tokens
    }

    pub fn write_kv(&self, prefix: &str, out: &mut String) {
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{prefix}{k} = {v}");
        };
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("ff_dim", self.ff_dim.to_string());
        put("speech_layers", self.speech_layers.to_string());
        put("text_enc_layers", self.text_enc_layers.to_string());
        put("text_dec_layers", self.text_dec_layers.to_string());
        put("erm_layer", self.erm_layer.to_string());
        put("feat_dim", self.feat_dim.to_string());
        put("max_frames", self.max_frames.to_string());
        put("max_tokens", self.max_tokens.to_string());
        put("dropout_text", self.dropout_text.to_string());
        put("attn_dropout_text", self.attn_dropout_text.to_string());
        put("dropout_speech", self.dropout_speech.to_string());
    }

    /// Applies every `prefix`-scoped key present in `kv`, consuming it.
    pub fn apply_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_parse(&format!("{prefix}vocab_size"), &mut self.vocab_size)?;
        kv.take_parse(&format!("{prefix}d_model"), &mut self.d_model)?;
        kv.take_parse(&format!("{prefix}n_heads"), &mut self.n_heads)?;
        kv.take_parse(&format!("{prefix}ff_dim"), &mut self.ff_dim)?;
        kv.take_parse(&format!("{prefix}speech_layers"), &mut self.speech_layers)?;
        kv.take_parse(&format!("{prefix}text_enc_layers"), &mut self.text_enc_layers)?;
        kv.take_parse(&format!("{prefix}text_dec_layers"), &mut self.text_dec_layers)?;
        kv.take_parse(&format!("{prefix}erm_layer"), &mut self.erm_layer)?;
        kv.take_parse(&format!("{prefix}feat_dim"), &mut self.feat_dim)?;
        kv.take_parse(&format!("{prefix}max_frames"), &mut self.max_frames)?;
        kv.take_parse(&format!("{prefix}max_tokens"), &mut self.max_tokens)?;
        kv.take_parse(&format!("{prefix}dropout_text"), &mut self.dropout_text)?;
        kv.take_parse(&format!("{prefix}attn_dropout_text"), &mut self.attn_dropout_text)?;
        kv.take_parse(&format!("{prefix}dropout_speech"), &mut self.dropout_speech)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn every_violation_is_reported() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            erm_layer: 5,
            text_enc_layers: 4,
            max_frames: 3,
            dropout_text: 1.0,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(ModelError::InvalidConfig(issues)) => {
                assert_eq!(issues.len(), 4, "{issues:?}");
                assert!(issues.iter().any(|i| i.contains("erm_layer 5")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            dropout_text: 0.25,
            ..ModelConfig::default()
        };
        let mut text = String::new();
        cfg.write_kv("model.", &mut text);
        let mut kv = KvMap::parse(&text).unwrap();
        let mut back = ModelConfig::default();
        back.apply_kv("model.", &mut kv).unwrap();
        assert!(kv.is_empty());
        assert_eq!(back, cfg);
    }
}
