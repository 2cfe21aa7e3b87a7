use serde::{Deserialize, Serialize};

use crate::datapipe::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Architecture hyperparameters of one transformer stack.
///
/// `d_ffn` is the combined width of the two gated up-projections, so each of
/// `ffn.gate` and `ffn.up` maps `d_model -> d_ffn / 2`. This is the
/// convention under which the published preset sizes add up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_max_seq() -> usize {
    8192
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        d_model: usize,
        d_ffn: usize,
        q_heads: usize,
        kv_heads: usize,
        d_head: usize,
    ) -> Self {
        Self {
            num_layers,
            d_model,
            d_ffn,
            q_heads,
            kv_heads,
            d_head,
            vocab_size: VOCAB_SIZE,
            rope_base: default_rope_base(),
            max_seq: default_max_seq(),
        }
    }

    /// Width of each gated FFN projection.
    pub fn ffn_hidden(&self) -> usize {
        self.d_ffn / 2
    }

    pub fn q_width(&self) -> usize {
        self.q_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.d_head
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.q_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(format!(
                "q_heads {} is not a multiple of kv_heads {}",
                self.q_heads, self.kv_heads
            )));
        }
        if !self.d_ffn.is_multiple_of(2) {
            return Err(Error::Config(format!("d_ffn {} must be even", self.d_ffn)));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Table 1 presets, by name.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "2B" => Self::new(26, 2304, 18432, 8, 4, 256),
            "9B" => Self::new(42, 3584, 28672, 16, 8, 256),
            "S" => Self::new(8, 512, 1024, 8, 8, 64),
            "B" => Self::new(12, 768, 2048, 12, 12, 64),
            "L" => Self::new(24, 1024, 2816, 16, 16, 64),
            "XL" => Self::new(24, 2048, 5120, 32, 32, 64),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// True for presets too large to train on a desk machine.
    pub fn is_huge(&self) -> bool {
        self.d_model >= 2304
    }
}

pub const PRESET_NAMES: [&str; 6] = ["S", "B", "L", "XL", "2B", "9B"];

/// Self-attention visibility pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Position `i` sees positions `j <= i`.
    Causal,
    /// Every position sees every unpadded position.
    #[default]
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchKind {
    DecoderOnly {
        config: ModelConfig,
    },
    EncoderDecoder {
        encoder: ModelConfig,
        decoder: ModelConfig,
        /// Encoder reads `emb.tok`; otherwise it owns `enc.emb.tok`.
        shared_embeddings: bool,
    },
}

impl ArchKind {
    pub fn decoder_only(config: ModelConfig) -> Self {
        ArchKind::DecoderOnly { config }
    }

    /// Encoder-decoder pair; embeddings are shared when the widths agree.
    pub fn encoder_decoder(encoder: ModelConfig, decoder: ModelConfig) -> Self {
        let shared_embeddings = encoder.d_model == decoder.d_model;
        ArchKind::EncoderDecoder {
            encoder,
            decoder,
            shared_embeddings,
        }
    }

    /// Parses `S`, `2B` (decoder-only) or `S-S`, `9B-2B` (encoder-decoder).
    pub fn from_preset(name: &str) -> Result<Self> {
        match name.split_once('-') {
            None => Ok(Self::decoder_only(ModelConfig::preset(name)?)),
            Some((e, d)) => Ok(Self::encoder_decoder(
                ModelConfig::preset(e)?,
                ModelConfig::preset(d)?,
            )),
        }
    }

    /// The stack that produces logits.
    pub fn decoder(&self) -> &ModelConfig {
        match self {
            ArchKind::DecoderOnly { config } => config,
            ArchKind::EncoderDecoder { decoder, .. } => decoder,
        }
    }

    pub fn encoder(&self) -> Option<&ModelConfig> {
        match self {
            ArchKind::DecoderOnly { .. } => None,
            ArchKind::EncoderDecoder { encoder, .. } => Some(encoder),
        }
    }

    pub fn is_encoder_decoder(&self) -> bool {
        matches!(self, ArchKind::EncoderDecoder { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchKind::DecoderOnly { config } => config.validate(),
            ArchKind::EncoderDecoder {
                encoder,
                decoder,
                shared_embeddings,
            } => {
                encoder.validate()?;
                decoder.validate()?;
                if encoder.vocab_size != decoder.vocab_size {
                    return Err(Error::Config(format!(
                        "encoder vocab {} differs from decoder vocab {}",
                        encoder.vocab_size, decoder.vocab_size
                    )));
                }
                if *shared_embeddings && encoder.d_model != decoder.d_model {
                    return Err(Error::Config(
                        "shared embeddings need equal encoder and decoder d_model".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn is_huge(&self) -> bool {
        self.decoder().is_huge() || self.encoder().is_some_and(|e| e.is_huge())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("XXL").is_err());
    }

    #[test]
    fn gqa_grouping_must_divide() {
        let mut c = ModelConfig::new(1, 8, 16, 3, 2, 4);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.q_heads = 4;
        c.validate().unwrap();
        assert_eq!(c.group_size(), 2);
    }

    #[test]
    fn arch_presets_parse() {
        let a = ArchKind::from_preset("9B-2B").unwrap();
        assert_eq!(a.encoder().unwrap().d_model, 3584);
        assert_eq!(a.decoder().d_model, 2304);
        assert!(matches!(
            a,
            ArchKind::EncoderDecoder {
                shared_embeddings: false,
                ..
            }
        ));
        assert!(!ArchKind::from_preset("S").unwrap().is_encoder_decoder());
    }
}
