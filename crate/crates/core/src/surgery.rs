//! Checkpoint-to-checkpoint transformations: decoder-only to encoder-decoder
//! initialization, GQA to MHA expansion and uniform merging.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{expected_shapes, CheckpointMeta, NamedCheckpoint};
use crate::model::config::{ArchKind, MaskKind, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Balanced,
    Unbalanced,
}

/// Everything needed to build an encoder-decoder checkpoint from one or two
/// decoder-only sources.
#[derive(Clone, Debug)]
pub struct AdaptationPlan {
    pub encoder_source: NamedCheckpoint,
    pub decoder_source: NamedCheckpoint,
    pub mode: AdaptMode,
    /// Steps during which only cross-attention trains.
    pub warmup_steps: u64,
    pub init_seed: u64,
    /// Cross-attention weights are drawn with std `scale / sqrt(fan_in)`.
    pub cross_attn_init_scale: f64,
    /// Start `xattn.o` at zero so cross-attention initially contributes nothing.
    pub zero_init_output: bool,
}

impl AdaptationPlan {
    pub fn balanced(source: NamedCheckpoint) -> Self {
        Self {
            encoder_source: source.clone(),
            decoder_source: source,
            mode: AdaptMode::Balanced,
            warmup_steps: 0,
            init_seed: 0,
            cross_attn_init_scale: 1.0,
            zero_init_output: false,
        }
    }

    pub fn unbalanced(
        encoder_source: NamedCheckpoint,
        decoder_source: NamedCheckpoint,
        warmup_steps: u64,
        init_seed: u64,
    ) -> Self {
        Self {
            encoder_source,
            decoder_source,
            mode: AdaptMode::Unbalanced,
            warmup_steps,
            init_seed,
            cross_attn_init_scale: 1.0,
            zero_init_output: false,
        }
    }
}

/// Runs the plan according to its mode.
pub fn adapt(plan: &AdaptationPlan) -> Result<NamedCheckpoint> {
    match plan.mode {
        AdaptMode::Balanced => {
            if decoder_config(&plan.encoder_source)? != decoder_config(&plan.decoder_source)? {
                return Err(Error::Surgery(
                    "balanced adaptation needs identical encoder and decoder source configs".into(),
                ));
            }
            let mut out = adapt_balanced(&plan.decoder_source)?;
            if plan.encoder_source.content_hash() != plan.decoder_source.content_hash() {
                for (name, t) in plan.encoder_source.iter() {
                    if let Some(rest) = name.strip_prefix("dec.") {
                        out.set(&format!("enc.{rest}"), t.clone())?;
                    }
                }
            }
            out.meta_mut().warmup_steps = Some(plan.warmup_steps);
            Ok(out)
        }
        AdaptMode::Unbalanced => adapt_unbalanced(plan),
    }
}

fn decoder_config(ckpt: &NamedCheckpoint) -> Result<&ModelConfig> {
    match ckpt.arch() {
        ArchKind::DecoderOnly { config } => Ok(config),
        _ => Err(Error::Surgery("source checkpoint is not decoder-only".into())),
    }
}

fn finish(meta: CheckpointMeta, tensors: BTreeMap<String, Tensor>) -> Result<NamedCheckpoint> {
    let expected = expected_shapes(&meta.arch);
    let missing: Vec<&str> = expected
        .keys()
        .filter(|k| !tensors.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Surgery(format!("unmapped tensors: {}", missing.join(", "))));
    }
    NamedCheckpoint::new(meta, tensors).map_err(|e| Error::Surgery(e.to_string()))
}

/// Copies every decoder layer into both stacks and initializes
/// cross-attention from the same layer's self-attention.
pub fn adapt_balanced(source: &NamedCheckpoint) -> Result<NamedCheckpoint> {
    let cfg = decoder_config(source)?.clone();
    source.validate().map_err(|e| Error::Surgery(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in source.iter() {
        tensors.insert(name.to_string(), t.clone());
        if let Some(rest) = name.strip_prefix("dec.") {
            tensors.insert(format!("enc.{rest}"), t.clone());
        }
    }
    for i in 0..cfg.num_layers {
        for p in ["q", "k", "v", "o"] {
            let t = source.tensor(&format!("dec.{i}.attn.{p}"))?;
            tensors.insert(format!("dec.{i}.xattn.{p}"), t.clone());
        }
        for (from, to) in [("pre_attn", "pre_norm"), ("post_attn", "post_norm")] {
            let t = source.tensor(&format!("dec.{i}.norm.{from}"))?;
            tensors.insert(format!("dec.{i}.xattn.{to}"), t.clone());
        }
    }
    let mut meta = CheckpointMeta::new(ArchKind::encoder_decoder(cfg.clone(), cfg));
    meta.encoder_mask = MaskKind::Bidirectional;
    meta.parents = vec![source.content_hash()];
    finish(meta, tensors)
}

/// Encoder from one source, decoder from another, freshly sampled
/// cross-attention, and the warmup length recorded for the trainer.
pub fn adapt_unbalanced(plan: &AdaptationPlan) -> Result<NamedCheckpoint> {
    if !(plan.cross_attn_init_scale > 0.0) {
        return Err(Error::Surgery("cross_attn_init_scale must be positive".into()));
    }
    let enc = decoder_config(&plan.encoder_source)?.clone();
    let dec = decoder_config(&plan.decoder_source)?.clone();
    for src in [&plan.encoder_source, &plan.decoder_source] {
        src.validate().map_err(|e| Error::Surgery(e.to_string()))?;
    }
    if enc.vocab_size != dec.vocab_size {
        return Err(Error::Surgery(format!(
            "encoder vocab {} differs from decoder vocab {}",
            enc.vocab_size, dec.vocab_size
        )));
    }
    if dec.q_heads % dec.kv_heads != 0 {
        return Err(Error::Surgery(format!(
            "decoder q_heads {} not divisible by kv_heads {}",
            dec.q_heads, dec.kv_heads
        )));
    }
    let arch = ArchKind::encoder_decoder(enc.clone(), dec.clone());
    let shared = matches!(arch, ArchKind::EncoderDecoder { shared_embeddings: true, .. });

    let mut tensors = BTreeMap::new();
    for (name, t) in plan.decoder_source.iter() {
        tensors.insert(name.to_string(), t.clone());
    }
    for (name, t) in plan.encoder_source.iter() {
        if let Some(rest) = name.strip_prefix("dec.") {
            tensors.insert(format!("enc.{rest}"), t.clone());
        } else if name == "emb.tok" && !shared {
            tensors.insert("enc.emb.tok".into(), t.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.init_seed);
    let scale = plan.cross_attn_init_scale;
    for i in 0..dec.num_layers {
        let p = format!("dec.{i}.xattn");
        let shapes = [
            ("q", [dec.d_model, dec.q_width()]),
            ("k", [enc.d_model, dec.kv_width()]),
            ("v", [enc.d_model, dec.kv_width()]),
            ("o", [dec.q_width(), dec.d_model]),
        ];
        for (n, shape) in shapes {
            let std = scale / (shape[0] as f64).sqrt();
            let mut t = Tensor::randn(&shape, std, &mut rng);
            if n == "o" && plan.zero_init_output {
                t = Tensor::zeros(&shape);
            }
            tensors.insert(format!("{p}.{n}"), t);
        }
        tensors.insert(format!("{p}.pre_norm"), Tensor::ones(&[dec.d_model]));
        tensors.insert(format!("{p}.post_norm"), Tensor::ones(&[dec.d_model]));
    }

    let mut meta = CheckpointMeta::new(arch);
    meta.warmup_steps = Some(plan.warmup_steps);
    meta.parents = vec![
        plan.encoder_source.content_hash(),
        plan.decoder_source.content_hash(),
    ];
    finish(meta, tensors)
}

/// Which stacks [`expand_gqa_to_mha`] touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpandScope {
    Encoder,
    /// Decoder self-attention and, for encoder-decoder models, cross-attention.
    Decoder,
    All,
}

/// Repeats each key/value head `group` times along the output columns, so
/// kv head `j` of the result is kv head `j / group` of the input.
fn replicate_heads(t: &Tensor, kv_heads: usize, d_head: usize, group: usize) -> Tensor {
    let rows = t.shape()[0];
    let width = kv_heads * d_head;
    let mut out = Vec::with_capacity(rows * width * group);
    for r in 0..rows {
        let row = &t.data()[r * width..(r + 1) * width];
        for h in 0..kv_heads {
            for _ in 0..group {
                out.extend_from_slice(&row[h * d_head..(h + 1) * d_head]);
            }
        }
    }
    Tensor::new(vec![rows, width * group], out).expect("replicated shape")
}

fn expand_stack(
    cfg: &mut ModelConfig,
    stack: &str,
    sublayers: &[&str],
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    if !cfg.q_heads.is_multiple_of(cfg.kv_heads) {
        return Err(Error::Surgery(format!(
            "q_heads {} not divisible by kv_heads {}",
            cfg.q_heads, cfg.kv_heads
        )));
    }
    let group = cfg.group_size();
    if group == 1 {
        return Ok(());
    }
    for i in 0..cfg.num_layers {
        for sub in sublayers {
            for p in ["k", "v"] {
                let name = format!("{stack}.{i}.{sub}.{p}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::Surgery(format!("missing tensor {name}")))?;
                let t = replicate_heads(t, cfg.kv_heads, cfg.d_head, group);
                tensors.insert(name, t);
            }
        }
    }
    cfg.kv_heads = cfg.q_heads;
    Ok(())
}

/// Converts grouped-query attention into multi-head attention in `scope`
/// by replicating key/value projection columns; the function computed by
/// the model is unchanged. Stacks already at `kv_heads == q_heads` are left
/// alone.
pub fn expand_gqa_to_mha(ckpt: &NamedCheckpoint, scope: ExpandScope) -> Result<NamedCheckpoint> {
    let (mut meta, mut tensors) = ckpt.clone().into_parts();
    match &mut meta.arch {
        ArchKind::DecoderOnly { config } => {
            if scope != ExpandScope::Encoder {
                expand_stack(config, "dec", &["attn"], &mut tensors)?;
            }
        }
        ArchKind::EncoderDecoder {
            encoder, decoder, ..
        } => {
            if scope != ExpandScope::Decoder {
                expand_stack(encoder, "enc", &["attn"], &mut tensors)?;
            }
            if scope != ExpandScope::Encoder {
                expand_stack(decoder, "dec", &["attn", "xattn"], &mut tensors)?;
            }
        }
    }
    NamedCheckpoint::new(meta, tensors)
}

/// Elementwise mean of two checkpoints with identical names and shapes.
/// The result records both parents' content hashes.
pub fn merge_uniform(a: &NamedCheckpoint, b: &NamedCheckpoint) -> Result<NamedCheckpoint> {
    let na: BTreeSet<&str> = a.names().collect();
    let nb: BTreeSet<&str> = b.names().collect();
    let diff: Vec<&str> = na.symmetric_difference(&nb).copied().collect();
    if !diff.is_empty() {
        return Err(Error::Surgery(format!(
            "tensor names differ: {}",
            diff.join(", ")
        )));
    }
    if a.arch() != b.arch() {
        return Err(Error::Surgery("checkpoints have different architectures".into()));
    }
    let mut tensors = BTreeMap::new();
    for (name, ta) in a.iter() {
        let tb = b.tensor(name)?;
        if ta.shape() != tb.shape() {
            return Err(Error::Surgery(format!(
                "{name}: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        tensors.insert(name.to_string(), ta.zip_map(tb, |x, y| (x + y) * 0.5));
    }
    let mut meta = a.meta().clone();
    meta.step = 0;
    meta.objective = match (&a.meta().objective, &b.meta().objective) {
        (Some(x), Some(y)) if x == y => Some(x.clone()),
        (Some(x), Some(y)) => Some(format!("merge({x},{y})")),
        _ => None,
    };
    meta.parents = vec![a.content_hash(), b.content_hash()];
    NamedCheckpoint::new(meta, tensors)
}
