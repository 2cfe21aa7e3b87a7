//! Decoder-only and encoder-decoder forward passes.

use super::checkpoint::NamedCheckpoint;
use super::config::{ArchKind, MaskKind, ModelConfig};
use super::layers::{
    attend, attn_mask, cross_kv, embed, project_heads, run_stack, self_mask, tied_logits,
    CrossKv, ParamVars, TokenBatch,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn need_decoder_only(arch: &ArchKind) -> Result<&ModelConfig> {
    match arch {
        ArchKind::DecoderOnly { config } => Ok(config),
        _ => Err(Error::Contract("expected a decoder-only checkpoint".into())),
    }
}

fn need_encdec(arch: &ArchKind) -> Result<(&ModelConfig, &ModelConfig, bool)> {
    match arch {
        ArchKind::EncoderDecoder {
            encoder,
            decoder,
            shared_embeddings,
        } => Ok((encoder, decoder, *shared_embeddings)),
        _ => Err(Error::Contract("expected an encoder-decoder checkpoint".into())),
    }
}

/// Final-normed hidden states of a decoder-only stack, `[B, S, d]`.
pub fn decoder_only_hidden<'t, F: Float>(
    p: &ParamVars<'t, F>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Var<'t, F>> {
    batch.check(cfg, "decoder")?;
    let emb = p.get("emb.tok")?;
    let x = embed(emb, batch)?;
    let mask = self_mask(emb.tape(), MaskKind::Causal, batch, cfg);
    run_stack(p, "dec", cfg, x, mask, None)
}

/// Next-token logits `[B, S, vocab]`.
pub fn decoder_only_logits<'t, F: Float>(
    p: &ParamVars<'t, F>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Var<'t, F>> {
    let h = decoder_only_hidden(p, cfg, batch)?;
    tied_logits(h, p.get("emb.tok")?)
}

/// Encoder output `[B, S, d_enc]` under the given self-attention mask.
pub fn encoder_hidden<'t, F: Float>(
    p: &ParamVars<'t, F>,
    arch: &ArchKind,
    mask: MaskKind,
    batch: &TokenBatch,
) -> Result<Var<'t, F>> {
    let (enc, _, shared) = need_encdec(arch)?;
    batch.check(enc, "input")?;
    let emb = p.get(if shared { "emb.tok" } else { "enc.emb.tok" })?;
    let x = embed(emb, batch)?;
    let m = self_mask(emb.tape(), mask, batch, enc);
    run_stack(p, "enc", enc, x, m, None)
}

/// Cross-attention keys/values for every decoder layer.
pub(crate) fn all_cross_kv<'t, F: Float>(
    p: &ParamVars<'t, F>,
    dec: &ModelConfig,
    enc_out: Var<'t, F>,
    enc_lens: &[usize],
    q_len: usize,
) -> Result<Vec<CrossKv<'t, F>>> {
    let enc_len = enc_out.shape()[1];
    let mask = attn_mask(
        enc_out.tape(),
        MaskKind::Bidirectional,
        q_len,
        0,
        enc_len,
        enc_lens,
        dec.kv_heads,
        dec.group_size(),
    );
    (0..dec.num_layers)
        .map(|i| cross_kv(p, i, dec, enc_out, mask))
        .collect()
}

/// Decoder hidden states `[B, T, d_dec]` given encoder output.
pub fn decoder_hidden<'t, F: Float>(
    p: &ParamVars<'t, F>,
    arch: &ArchKind,
    enc_out: Var<'t, F>,
    enc_lens: &[usize],
    dec_batch: &TokenBatch,
) -> Result<Var<'t, F>> {
    let (_, dec, _) = need_encdec(arch)?;
    dec_batch.check(dec, "target")?;
    let emb = p.get("emb.tok")?;
    let x = embed(emb, dec_batch)?;
    let mask = self_mask(emb.tape(), MaskKind::Causal, dec_batch, dec);
    let cross = all_cross_kv(p, dec, enc_out, enc_lens, dec_batch.seq_len)?;
    run_stack(p, "dec", dec, x, mask, Some(&cross))
}

/// Encoder-decoder logits `[B, T, vocab]`: row `j` predicts the token after
/// `dec_batch[j]`.
pub fn encdec_logits<'t, F: Float>(
    p: &ParamVars<'t, F>,
    arch: &ArchKind,
    encoder_mask: MaskKind,
    enc_batch: &TokenBatch,
    dec_batch: &TokenBatch,
) -> Result<Var<'t, F>> {
    if enc_batch.batch_size() != dec_batch.batch_size() {
        return Err(Error::Input("input and target batch sizes differ".into()));
    }
    let enc_out = encoder_hidden(p, arch, encoder_mask, enc_batch)?;
    let h = decoder_hidden(p, arch, enc_out, &enc_batch.lens, dec_batch)?;
    tied_logits(h, p.get("emb.tok")?)
}

fn strip_batch<F: Float>(t: Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape().to_vec();
    t.reshape(&s[1..])
}

/// Logits `[S, vocab]` of a decoder-only checkpoint for one sequence.
pub fn decoder_only_forward(ckpt: &NamedCheckpoint, tokens: &[u32]) -> Result<Tensor> {
    let cfg = need_decoder_only(ckpt.arch())?;
    let tape = Tape::<f32>::new();
    let p = ParamVars::bind(&tape, ckpt, |_| false);
    strip_batch(decoder_only_logits(&p, cfg, &TokenBatch::single(tokens))?.value())
}

/// Final hidden states `[S, d]` of a decoder-only checkpoint.
pub fn decoder_only_hidden_states(ckpt: &NamedCheckpoint, tokens: &[u32]) -> Result<Tensor> {
    let cfg = need_decoder_only(ckpt.arch())?;
    let tape = Tape::<f32>::new();
    let p = ParamVars::bind(&tape, ckpt, |_| false);
    strip_batch(decoder_only_hidden(&p, cfg, &TokenBatch::single(tokens))?.value())
}

/// Encoder output `[S, d_enc]`, with the mask overridden.
pub fn encoder_forward(ckpt: &NamedCheckpoint, input: &[u32], mask: MaskKind) -> Result<Tensor> {
    let tape = Tape::<f32>::new();
    let p = ParamVars::bind(&tape, ckpt, |_| false);
    strip_batch(encoder_hidden(&p, ckpt.arch(), mask, &TokenBatch::single(input))?.value())
}

/// Logits `[T, vocab]` of an encoder-decoder checkpoint; the encoder uses
/// the mask recorded in the checkpoint metadata.
pub fn encdec_forward(ckpt: &NamedCheckpoint, input: &[u32], target: &[u32]) -> Result<Tensor> {
    if input.is_empty() {
        return Err(Error::Input("input sequence is empty".into()));
    }
    let tape = Tape::<f32>::new();
    let p = ParamVars::bind(&tape, ckpt, |_| false);
    let logits = encdec_logits(
        &p,
        ckpt.arch(),
        ckpt.meta().encoder_mask,
        &TokenBatch::single(input),
        &TokenBatch::single(target),
    )?;
    strip_batch(logits.value())
}

/// Rotary embedding over `[..., seq, d_head]` activations.
pub fn rope_apply<F: Float>(x: &Tensor<F>, positions: &[usize], base: f64) -> Result<Tensor<F>> {
    let tape = Tape::<F>::new();
    Ok(tape.constant(x.clone()).rope(positions, base)?.value())
}

/// Projection weights of one attention sublayer, stored `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<F: Float = f32> {
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub o: Tensor<F>,
}

/// Standalone attention over single sequences `x_q [Sq, dq]` and
/// `x_kv [Skv, dkv]`, with head layout from `cfg`. `rotary` applies RoPE at
/// positions `0..S` to queries and keys (self-attention).
pub fn attention<F: Float>(
    x_q: &Tensor<F>,
    x_kv: &Tensor<F>,
    w: &AttentionWeights<F>,
    cfg: &ModelConfig,
    mask: MaskKind,
    rotary: bool,
) -> Result<Tensor<F>> {
    if x_kv.ndim() != 2 || x_kv.shape()[0] == 0 {
        return Err(Error::Contract("attention over an empty key sequence".into()));
    }
    let tape = Tape::<F>::new();
    let xq = tape.constant(x_q.reshape(&[1, x_q.shape()[0], x_q.shape()[1]])?);
    let xkv = tape.constant(x_kv.reshape(&[1, x_kv.shape()[0], x_kv.shape()[1]])?);
    let (sq, skv) = (x_q.shape()[0], x_kv.shape()[0]);
    let mut q = project_heads(xq, tape.constant(w.q.clone()), cfg.q_heads, cfg.d_head)?;
    let mut k = project_heads(xkv, tape.constant(w.k.clone()), cfg.kv_heads, cfg.d_head)?;
    let v = project_heads(xkv, tape.constant(w.v.clone()), cfg.kv_heads, cfg.d_head)?;
    if rotary {
        q = q.rope(&(0..sq).collect::<Vec<_>>(), cfg.rope_base)?;
        k = k.rope(&(0..skv).collect::<Vec<_>>(), cfg.rope_base)?;
    }
    let m = attn_mask(&tape, mask, sq, 0, skv, &[skv], cfg.kv_heads, cfg.group_size());
    let out = attend(q, k, v, m)?.matmul(tape.constant(w.o.clone()))?;
    strip_batch(out.value())
}
