//! Closed-form inference flops.
//!
//! A projection `[fan_in, fan_out]` applied to `n` tokens costs
//! `2·n·fan_in·fan_out`. Attention costs `2·H·d_head·Lq·Lkv` for the scores
//! and the same again for mixing values. Causal self-attention over `L`
//! tokens is counted at the average `L²/2` pairs. Embedding lookups and the
//! output projection are excluded.

use serde::Serialize;

use crate::model::config::{ArchKind, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub encoder_flops: f64,
    /// Decoder self-attention, FFN and projections (cross-attention excluded).
    pub decoder_flops: f64,
    pub cross_attn_flops: f64,
    pub total: f64,
    pub in_len: usize,
    pub out_len: usize,
    pub notes: String,
}

fn projections(cfg: &ModelConfig, tokens: f64) -> f64 {
    let (d, qw, kvw, h) = (
        cfg.d_model as f64,
        cfg.q_width() as f64,
        cfg.kv_width() as f64,
        cfg.ffn_hidden() as f64,
    );
    2.0 * tokens * (d * qw + 2.0 * d * kvw + qw * d + 3.0 * d * h)
}

fn attention(cfg: &ModelConfig, pairs: f64) -> f64 {
    4.0 * cfg.q_heads as f64 * cfg.d_head as f64 * pairs
}

/// Flops of one stack over `len` tokens of self-attention.
pub fn stack_flops(cfg: &ModelConfig, len: usize, causal: bool) -> f64 {
    let l = len as f64;
    let pairs = if causal { l * l / 2.0 } else { l * l };
    cfg.num_layers as f64 * (projections(cfg, l) + attention(cfg, pairs))
}

/// Cross-attention of `out_len` decoder queries over `in_len` encoder states.
pub fn cross_flops(enc: &ModelConfig, dec: &ModelConfig, in_len: usize, out_len: usize) -> f64 {
    if out_len == 0 {
        return 0.0;
    }
    let (lq, lkv) = (out_len as f64, in_len as f64);
    let (dd, de) = (dec.d_model as f64, enc.d_model as f64);
    let (qw, kvw) = (dec.q_width() as f64, dec.kv_width() as f64);
    let q_o = 2.0 * lq * (dd * qw + qw * dd);
    let k_v = 2.0 * lkv * 2.0 * de * kvw;
    dec.num_layers as f64 * (q_o + k_v + attention(dec, lq * lkv))
}

/// Encoder-decoder: encoder over `in_len` (bidirectional), decoder over
/// `out_len` (causal) plus cross-attention. Decoder-only: one causal pass
/// over `in_len + out_len`.
pub fn estimate_flops(arch: &ArchKind, in_len: usize, out_len: usize) -> FlopsReport {
    let (encoder_flops, decoder_flops, cross_attn_flops, notes) = match arch {
        ArchKind::DecoderOnly { config } => (
            0.0,
            stack_flops(config, in_len + out_len, true),
            0.0,
            format!("decoder-only causal over {} tokens", in_len + out_len),
        ),
        ArchKind::EncoderDecoder { encoder, decoder, .. } => (
            stack_flops(encoder, in_len, false),
            stack_flops(decoder, out_len, true),
            cross_flops(encoder, decoder, in_len, out_len),
            format!("encoder bidirectional over {in_len}, decoder causal over {out_len}"),
        ),
    };
    FlopsReport {
        encoder_flops,
        decoder_flops,
        cross_attn_flops,
        total: encoder_flops + decoder_flops + cross_attn_flops,
        in_len,
        out_len,
        notes: format!("{notes}; causal pairs at L^2/2; embeddings excluded"),
    }
}
