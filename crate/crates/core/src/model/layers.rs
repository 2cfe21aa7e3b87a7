//! Transformer building blocks recorded on a [`Tape`].
//!
//! Activations are `[batch, seq, width]`. Attention heads are laid out as
//! `[batch, heads, seq, d_head]`; grouped-query attention folds the query
//! heads of one group into the sequence axis so each key/value head is
//! contracted once per group without materializing replicated weights.

use std::any::Any;
use std::collections::BTreeMap;

use super::checkpoint::NamedCheckpoint;
use super::config::{MaskKind, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

/// Checkpoint tensors bound as tape leaves.
pub struct ParamVars<'t, F: Float> {
    vars: BTreeMap<String, Var<'t, F>>,
}

/// Converts checkpoint storage to the compute type, sharing the buffer when
/// no conversion is needed.
pub(crate) fn to_float<F: Float>(t: &Tensor<f32>) -> Tensor<F> {
    if let Some(same) = (t as &dyn Any).downcast_ref::<Tensor<F>>() {
        return same.clone();
    }
    t.cast()
}

impl<'t, F: Float> ParamVars<'t, F> {
    /// Binds every tensor of `ckpt`; `trainable` decides which ones record
    /// gradients.
    pub fn bind(tape: &'t Tape<F>, ckpt: &NamedCheckpoint, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = ckpt
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(to_float(t), trainable(name))))
            .collect();
        Self { vars }
    }

    /// Binds explicit tensors (used by gradient checks).
    pub fn from_vars(vars: BTreeMap<String, Var<'t, F>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, F>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Right-padded token rows of equal stored length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub lens: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn single(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            lens: vec![tokens.len()],
            seq_len: tokens.len(),
        }
    }

    /// Pads every row to the longest one with `pad`.
    pub fn from_rows(rows: &[Vec<u32>], pad: u32) -> Self {
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            tokens.extend_from_slice(r);
            tokens.extend(std::iter::repeat_n(pad, seq_len - r.len()));
        }
        Self {
            tokens,
            lens: rows.iter().map(Vec::len).collect(),
            seq_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..b * self.seq_len + self.lens[b]]
    }

    fn padded(&self) -> bool {
        self.lens.iter().any(|&l| l != self.seq_len)
    }

    /// Rejects empty rows, over-long rows and out-of-vocabulary ids.
    pub fn check(&self, cfg: &ModelConfig, what: &str) -> Result<()> {
        if self.lens.contains(&0) {
            return Err(Error::Input(format!("{what} sequence is empty")));
        }
        if self.seq_len > cfg.max_seq {
            return Err(Error::Input(format!(
                "{what} length {} exceeds max_seq {}",
                self.seq_len, cfg.max_seq
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "{what} token {t} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Additive attention mask `[batch, kv_heads, groups·q_len, kv_len]`, or
/// `None` when every pair is visible. Query `i` sits at absolute position
/// `q_offset + i`; keys past `kv_lens[b]` are padding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_mask<'t, F: Float>(
    tape: &'t Tape<F>,
    kind: MaskKind,
    q_len: usize,
    q_offset: usize,
    kv_len: usize,
    kv_lens: &[usize],
    kv_heads: usize,
    groups: usize,
) -> Option<Var<'t, F>> {
    let causal = kind == MaskKind::Causal && q_offset + 1 < kv_len;
    let padded = kv_lens.iter().any(|&l| l < kv_len);
    if !causal && !padded {
        return None;
    }
    let rows = groups * q_len;
    let mut data = Vec::with_capacity(kv_lens.len() * kv_heads * rows * kv_len);
    let masked = F::of(MASKED);
    for &len in kv_lens {
        for _ in 0..kv_heads {
            for r in 0..rows {
                let i = q_offset + r % q_len;
                for j in 0..kv_len {
                    let hidden = j >= len || (kind == MaskKind::Causal && j > i);
                    data.push(if hidden { masked } else { F::zero() });
                }
            }
        }
    }
    let shape = vec![kv_lens.len(), kv_heads, rows, kv_len];
    Some(tape.constant(Tensor::new(shape, data).expect("mask shape")))
}

/// `x [B,S,d] · w [d, heads·d_head]` split into `[B, heads, S, d_head]`.
pub(crate) fn project_heads<'t, F: Float>(
    x: Var<'t, F>,
    w: Var<'t, F>,
    heads: usize,
    d_head: usize,
) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (b, seq) = (s[0], s[1]);
    x.matmul(w)?
        .reshape(&[b, seq, heads, d_head])?
        .permute(&[0, 2, 1, 3])
}

/// Scaled dot-product attention. `q` is `[B, q_heads, Sq, dh]`, `k`/`v`
/// are `[B, kv_heads, Skv, dh]`; returns `[B, Sq, q_heads·dh]`.
pub(crate) fn attend<'t, F: Float>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    mask: Option<Var<'t, F>>,
) -> Result<Var<'t, F>> {
    let qs = q.shape();
    let ks = k.shape();
    let (b, heads, sq, dh) = (qs[0], qs[1], qs[2], qs[3]);
    let kv_heads = ks[1];
    if ks[2] == 0 {
        return Err(Error::Contract("attention over an empty key sequence".into()));
    }
    if heads % kv_heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let groups = heads / kv_heads;
    let q = q.reshape(&[b, kv_heads, groups * sq, dh])?;
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores
        .softmax()?
        .matmul(v)?
        .reshape(&[b, heads, sq, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, sq, heads * dh])
}

/// Growing self-attention keys/values for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct SelfKv<F: Float = f32> {
    pub k: Option<Tensor<F>>,
    pub v: Option<Tensor<F>>,
}

impl<F: Float> SelfKv<F> {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) enum SelfAttn<'a, 't, F: Float> {
    /// Whole sequence at once, positions `0..S`.
    Full { mask: Option<Var<'t, F>> },
    /// Appends to `cache`; the new rows start at position `cache.len()`.
    Cached { cache: &'a mut SelfKv<F> },
}

pub(crate) struct CrossKv<'t, F: Float> {
    pub k: Var<'t, F>,
    pub v: Var<'t, F>,
    pub mask: Option<Var<'t, F>>,
}

/// Projects encoder output through one layer's cross-attention keys/values.
pub(crate) fn cross_kv<'t, F: Float>(
    p: &ParamVars<'t, F>,
    layer: usize,
    cfg: &ModelConfig,
    enc_out: Var<'t, F>,
    mask: Option<Var<'t, F>>,
) -> Result<CrossKv<'t, F>> {
    let pre = format!("dec.{layer}.xattn");
    Ok(CrossKv {
        k: project_heads(enc_out, p.get(&format!("{pre}.k"))?, cfg.kv_heads, cfg.d_head)?,
        v: project_heads(enc_out, p.get(&format!("{pre}.v"))?, cfg.kv_heads, cfg.d_head)?,
        mask,
    })
}

/// Gated FFN: `down(gelu(x·gate) ⊙ (x·up))`.
fn ffn<'t, F: Float>(p: &ParamVars<'t, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let gate = x.matmul(p.get(&format!("{prefix}.ffn.gate"))?)?.gelu()?;
    let up = x.matmul(p.get(&format!("{prefix}.ffn.up"))?)?;
    gate.mul(up)?.matmul(p.get(&format!("{prefix}.ffn.down"))?)
}

/// One block: pre/post-normed self-attention, optional cross-attention,
/// and pre/post-normed FFN, each added to the residual stream.
pub(crate) fn block<'t, F: Float>(
    p: &ParamVars<'t, F>,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var<'t, F>,
    self_attn: SelfAttn<'_, 't, F>,
    cross: Option<&CrossKv<'t, F>>,
) -> Result<Var<'t, F>> {
    let tape = x.tape();
    let name = |s: &str| p.get(&format!("{prefix}.{s}"));
    let seq = x.shape()[1];

    let h = x.rms_norm(name("norm.pre_attn")?, NORM_EPS)?;
    let q = project_heads(h, name("attn.q")?, cfg.q_heads, cfg.d_head)?;
    let k = project_heads(h, name("attn.k")?, cfg.kv_heads, cfg.d_head)?;
    let v = project_heads(h, name("attn.v")?, cfg.kv_heads, cfg.d_head)?;
    let ctx = match self_attn {
        SelfAttn::Full { mask } => {
            let pos: Vec<usize> = (0..seq).collect();
            attend(q.rope(&pos, cfg.rope_base)?, k.rope(&pos, cfg.rope_base)?, v, mask)?
        }
        SelfAttn::Cached { cache } => {
            let start = cache.len();
            let pos: Vec<usize> = (start..start + seq).collect();
            let q = q.rope(&pos, cfg.rope_base)?;
            let mut k = k.rope(&pos, cfg.rope_base)?;
            let mut v = v;
            if let (Some(pk), Some(pv)) = (cache.k.take(), cache.v.take()) {
                k = Var::concat(&[tape.constant(pk), k], 2)?;
                v = Var::concat(&[tape.constant(pv), v], 2)?;
            }
            cache.k = Some(k.value());
            cache.v = Some(v.value());
            let total = start + seq;
            let batch = x.shape()[0];
            let mask = attn_mask(
                tape,
                MaskKind::Causal,
                seq,
                start,
                total,
                &vec![total; batch],
                cfg.kv_heads,
                cfg.group_size(),
            );
            attend(q, k, v, mask)?
        }
    };
    let a = ctx.matmul(name("attn.o")?)?;
    let mut x = x.add(a.rms_norm(name("norm.post_attn")?, NORM_EPS)?)?;

    if let Some(c) = cross {
        let h = x.rms_norm(name("xattn.pre_norm")?, NORM_EPS)?;
        let q = project_heads(h, name("xattn.q")?, cfg.q_heads, cfg.d_head)?;
        let a = attend(q, c.k, c.v, c.mask)?.matmul(name("xattn.o")?)?;
        x = x.add(a.rms_norm(name("xattn.post_norm")?, NORM_EPS)?)?;
    }

    let h = x.rms_norm(name("norm.pre_ffn")?, NORM_EPS)?;
    let f = ffn(p, prefix, h)?;
    x.add(f.rms_norm(name("norm.post_ffn")?, NORM_EPS)?)
}

/// Token embedding scaled by `sqrt(d_model)`, as `[B, S, d]`.
pub(crate) fn embed<'t, F: Float>(table: Var<'t, F>, batch: &TokenBatch) -> Result<Var<'t, F>> {
    let d = table.shape()[1];
    table
        .embedding(&batch.tokens)?
        .reshape(&[batch.batch_size(), batch.seq_len, d])?
        .scale((d as f64).sqrt())
}

/// Runs every layer of a stack followed by its final norm.
pub(crate) fn run_stack<'t, F: Float>(
    p: &ParamVars<'t, F>,
    prefix: &str,
    cfg: &ModelConfig,
    mut x: Var<'t, F>,
    mask: Option<Var<'t, F>>,
    cross: Option<&[CrossKv<'t, F>]>,
) -> Result<Var<'t, F>> {
    for i in 0..cfg.num_layers {
        x = block(
            p,
            &format!("{prefix}.{i}"),
            cfg,
            x,
            SelfAttn::Full { mask },
            cross.map(|c| &c[i]),
        )?;
    }
    if cfg.num_layers > 0 {
        x = x.rms_norm(p.get(&format!("{prefix}.final_norm"))?, NORM_EPS)?;
    }
    Ok(x)
}

/// Tied output projection `h · embᵀ`.
pub(crate) fn tied_logits<'t, F: Float>(h: Var<'t, F>, table: Var<'t, F>) -> Result<Var<'t, F>> {
    h.matmul(table.transpose()?)
}

/// Self-attention mask for a full (non-incremental) pass over `batch`.
pub(crate) fn self_mask<'t, F: Float>(
    tape: &'t Tape<F>,
    kind: MaskKind,
    batch: &TokenBatch,
    cfg: &ModelConfig,
) -> Option<Var<'t, F>> {
    if kind == MaskKind::Bidirectional && !batch.padded() {
        return None;
    }
    attn_mask(
        tape,
        kind,
        batch.seq_len,
        0,
        batch.seq_len,
        &batch.lens,
        cfg.kv_heads,
        cfg.group_size(),
    )
}

/// Runs a stack incrementally: the new rows of `x` attend to everything in
/// `caches` (one per layer) plus themselves, and the caches grow by
/// `x.shape()[1]` positions.
pub(crate) fn run_stack_cached<'t, F: Float>(
    p: &ParamVars<'t, F>,
    prefix: &str,
    cfg: &ModelConfig,
    mut x: Var<'t, F>,
    caches: &mut [SelfKv<F>],
    cross: Option<&[CrossKv<'t, F>]>,
) -> Result<Var<'t, F>> {
    for (i, cache) in caches.iter_mut().enumerate().take(cfg.num_layers) {
        x = block(
            p,
            &format!("{prefix}.{i}"),
            cfg,
            x,
            SelfAttn::Cached { cache },
            cross.map(|c| &c[i]),
        )?;
    }
    if cfg.num_layers > 0 {
        x = x.rms_norm(p.get(&format!("{prefix}.final_norm"))?, NORM_EPS)?;
    }
    Ok(x)
}
