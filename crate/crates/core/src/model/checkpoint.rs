//! Named tensor collections and the canonical naming scheme.
//!
//! ```text
//! emb.tok                                   [vocab, d_model(decoder)]
//! enc.emb.tok                               [vocab, d_model(encoder)]  unshared only
//! {enc|dec}.{i}.attn.{q|k|v|o}
//! {enc|dec}.{i}.ffn.{gate|up|down}
//! {enc|dec}.{i}.norm.{pre_attn|post_attn|pre_ffn|post_ffn}
//! dec.{i}.xattn.{q|k|v|o}
//! dec.{i}.xattn.{pre_norm|post_norm}
//! {enc|dec}.final_norm
//! ```
//!
//! Decoder-only checkpoints use the `dec.*` namespace. Projection matrices
//! are stored `[fan_in, fan_out]` and applied as `x · W`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ArchKind, MaskKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: ArchKind,
    /// Encoder self-attention pattern; ignored for decoder-only models.
    #[serde(default)]
    pub encoder_mask: MaskKind,
    #[serde(default)]
    pub objective: Option<String>,
    #[serde(default)]
    pub step: u64,
    /// Cross-attention-only warmup steps the trainer must honor.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    /// Content hashes of the checkpoints this one was merged from.
    #[serde(default)]
    pub parents: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(arch: ArchKind) -> Self {
        Self {
            arch,
            encoder_mask: MaskKind::Bidirectional,
            objective: None,
            step: 0,
            warmup_steps: None,
            parents: Vec::new(),
        }
    }
}

/// Map from canonical tensor name to binary32 tensor plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedCheckpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: CheckpointMeta,
}

pub(crate) fn layer_shapes(
    prefix: &str,
    cfg: &ModelConfig,
    out: &mut BTreeMap<String, Vec<usize>>,
) {
    let (d, h) = (cfg.d_model, cfg.ffn_hidden());
    for i in 0..cfg.num_layers {
        let p = format!("{prefix}.{i}");
        out.insert(format!("{p}.attn.q"), vec![d, cfg.q_width()]);
        out.insert(format!("{p}.attn.k"), vec![d, cfg.kv_width()]);
        out.insert(format!("{p}.attn.v"), vec![d, cfg.kv_width()]);
        out.insert(format!("{p}.attn.o"), vec![cfg.q_width(), d]);
        out.insert(format!("{p}.ffn.gate"), vec![d, h]);
        out.insert(format!("{p}.ffn.up"), vec![d, h]);
        out.insert(format!("{p}.ffn.down"), vec![h, d]);
        for n in ["pre_attn", "post_attn", "pre_ffn", "post_ffn"] {
            out.insert(format!("{p}.norm.{n}"), vec![d]);
        }
    }
    if cfg.num_layers > 0 {
        out.insert(format!("{prefix}.final_norm"), vec![d]);
    }
}

pub(crate) fn xattn_shapes(
    enc: &ModelConfig,
    dec: &ModelConfig,
    out: &mut BTreeMap<String, Vec<usize>>,
) {
    for i in 0..dec.num_layers {
        let p = format!("dec.{i}.xattn");
        out.insert(format!("{p}.q"), vec![dec.d_model, dec.q_width()]);
        out.insert(format!("{p}.k"), vec![enc.d_model, dec.kv_width()]);
        out.insert(format!("{p}.v"), vec![enc.d_model, dec.kv_width()]);
        out.insert(format!("{p}.o"), vec![dec.q_width(), dec.d_model]);
        out.insert(format!("{p}.pre_norm"), vec![dec.d_model]);
        out.insert(format!("{p}.post_norm"), vec![dec.d_model]);
    }
}

/// Every tensor name the architecture needs, with its exact shape.
pub fn expected_shapes(arch: &ArchKind) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    match arch {
        ArchKind::DecoderOnly { config } => {
            out.insert("emb.tok".into(), vec![config.vocab_size, config.d_model]);
            layer_shapes("dec", config, &mut out);
        }
        ArchKind::EncoderDecoder {
            encoder,
            decoder,
            shared_embeddings,
        } => {
            out.insert("emb.tok".into(), vec![decoder.vocab_size, decoder.d_model]);
            if !shared_embeddings {
                out.insert(
                    "enc.emb.tok".into(),
                    vec![encoder.vocab_size, encoder.d_model],
                );
            }
            layer_shapes("enc", encoder, &mut out);
            layer_shapes("dec", decoder, &mut out);
            xattn_shapes(encoder, decoder, &mut out);
        }
    }
    out
}

/// True for tensors belonging to decoder cross-attention.
pub fn is_cross_attention(name: &str) -> bool {
    name.starts_with("dec.") && name.contains(".xattn.")
}

pub(crate) fn is_norm(name: &str) -> bool {
    name.contains(".norm.") || name.ends_with("_norm")
}

/// Initial value for a freshly created tensor: unit norm scales, normal
/// matrices with std `1/sqrt(fan_in)`, and embeddings with std `1/sqrt(d)`.
pub(crate) fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if is_norm(name) {
        Tensor::ones(shape)
    } else if name.ends_with("emb.tok") {
        Tensor::randn(shape, 1.0 / (shape[1] as f64).sqrt(), rng)
    } else {
        Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
    }
}

impl NamedCheckpoint {
    /// Builds a checkpoint and runs full name/shape validation.
    pub fn new(meta: CheckpointMeta, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let ckpt = Self { tensors, meta };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Randomly initialized model, deterministic in `seed`.
    pub fn init_random(arch: ArchKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = expected_shapes(&arch)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Self::new(CheckpointMeta::new(arch), tensors)
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut CheckpointMeta {
        &mut self.meta
    }

    pub fn arch(&self) -> &ArchKind {
        &self.meta.arch
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Validation {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::Validation {
            name: name.to_string(),
            reason: "not part of this architecture".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::Validation {
                name: name.to_string(),
                reason: format!("shape {:?} != expected {:?}", value.shape(), slot.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn into_parts(self) -> (CheckpointMeta, BTreeMap<String, Tensor>) {
        (self.meta, self.tensors)
    }

    /// Checks that the tensor set is exactly the canonical set for the
    /// architecture and that every shape matches.
    pub fn validate(&self) -> Result<()> {
        self.meta.arch.validate()?;
        let expected = expected_shapes(&self.meta.arch);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Validation {
                        name: name.clone(),
                        reason: "missing".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation {
                        name: name.clone(),
                        reason: format!("shape {:?} != expected {:?}", t.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Validation {
                name: extra.clone(),
                reason: "not part of this architecture".into(),
            });
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian payloads, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when every tensor is bit-identical to the one in `other`.
    pub fn same_tensors(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|o| v.same_bits(o)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PRESET_NAMES;

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::new(2, 8, 16, 2, 1, 4);
        c.vocab_size = 11;
        c
    }

    #[test]
    fn random_init_is_valid_and_deterministic() {
        let arch = ArchKind::encoder_decoder(toy(), toy());
        let a = NamedCheckpoint::init_random(arch.clone(), 7).unwrap();
        let b = NamedCheckpoint::init_random(arch, 7).unwrap();
        assert!(a.same_tensors(&b));
        assert_eq!(a.content_hash(), b.content_hash());
        assert!(a.get("dec.1.xattn.k").is_some());
        assert!(a.get("enc.emb.tok").is_none());
    }

    #[test]
    fn canonical_shapes_cover_all_presets() {
        for e in PRESET_NAMES {
            let arch = ArchKind::from_preset(e).unwrap();
            let shapes = expected_shapes(&arch);
            assert!(shapes.contains_key("dec.0.attn.q"));
            assert!(shapes.keys().all(|k| !k.starts_with("enc.")));
        }
        let un = ArchKind::from_preset("L-S").unwrap();
        let shapes = expected_shapes(&un);
        assert_eq!(shapes["dec.0.xattn.k"], vec![1024, 8 * 64]);
        assert_eq!(shapes["enc.emb.tok"][1], 1024);
    }

    #[test]
    fn validation_names_offending_tensor() {
        let arch = ArchKind::decoder_only(toy());
        let ckpt = NamedCheckpoint::init_random(arch, 1).unwrap();
        let (meta, mut tensors) = ckpt.into_parts();
        tensors.insert("dec.0.attn.q".into(), Tensor::zeros(&[8, 9]));
        match NamedCheckpoint::new(meta.clone(), tensors.clone()) {
            Err(Error::Validation { name, .. }) => assert_eq!(name, "dec.0.attn.q"),
            other => panic!("{other:?}"),
        }
        tensors.remove("dec.0.attn.q");
        assert!(matches!(
            NamedCheckpoint::new(meta, tensors),
            Err(Error::Validation { .. })
        ));
    }
}
