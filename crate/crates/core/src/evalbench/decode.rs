//! Greedy decoding with and without key/value caching.

use crate::autodiff::Tape;
use crate::datapipe::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::model::config::{ArchKind, ModelConfig};
use crate::model::forward::{
    all_cross_kv, decoder_only_forward, encdec_forward, encoder_hidden,
};
use crate::model::layers::{embed, run_stack_cached, tied_logits, CrossKv, ParamVars, SelfKv, TokenBatch};
use crate::tensor::Tensor;

/// Decoder self-attention keys/values per layer, plus the cross-attention
/// keys/values computed once from the encoder output.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub layers: Vec<SelfKv<f32>>,
    pub cross: Option<Vec<(Tensor, Tensor)>>,
}

impl KvCache {
    /// Decoder positions consumed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, SelfKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn last_row(t: &Tensor) -> &[f32] {
    let v = *t.shape().last().unwrap();
    &t.data()[t.numel() - v..]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new: usize,
    pub stop_at_eos: bool,
    pub use_cache: bool,
}

impl DecodeOptions {
    pub fn new(max_new: usize) -> Self {
        Self {
            max_new,
            stop_at_eos: true,
            use_cache: true,
        }
    }
}

/// Incremental decoder state for one sequence.
pub struct Decoder<'c> {
    ckpt: &'c NamedCheckpoint,
    cfg: &'c ModelConfig,
    pub cache: KvCache,
}

impl<'c> Decoder<'c> {
    /// Encodes `input` (encoder-decoder) or prepares an empty cache
    /// (decoder-only).
    pub fn new(ckpt: &'c NamedCheckpoint, input: &[u32]) -> Result<Self> {
        let cfg = ckpt.arch().decoder();
        let mut cache = KvCache {
            layers: vec![SelfKv::default(); cfg.num_layers],
            cross: None,
        };
        if let arch @ ArchKind::EncoderDecoder { .. } = ckpt.arch() {
            if input.is_empty() {
                return Err(Error::Input("input sequence is empty".into()));
            }
            let tape = Tape::<f32>::new();
            let p = ParamVars::bind(&tape, ckpt, |_| false);
            let batch = TokenBatch::single(input);
            let enc = encoder_hidden(&p, arch, ckpt.meta().encoder_mask, &batch)?;
            let kv = all_cross_kv(&p, cfg, enc, &batch.lens, 1)?;
            cache.cross = Some(kv.into_iter().map(|c| (c.k.value(), c.v.value())).collect());
        }
        Ok(Self { ckpt, cfg, cache })
    }

    /// Feeds `tokens` and returns the logits of the last one.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let batch = TokenBatch::single(tokens);
        batch.check(self.cfg, "decoder")?;
        if self.cache.len() + tokens.len() > self.cfg.max_seq {
            return Err(Error::Input("decoding past max_seq".into()));
        }
        let tape = Tape::<f32>::new();
        let p = ParamVars::bind(&tape, self.ckpt, |_| false);
        let emb = p.get("emb.tok")?;
        let x = embed(emb, &batch)?;
        let cross: Option<Vec<CrossKv<'_, f32>>> = self.cache.cross.as_ref().map(|c| {
            c.iter()
                .map(|(k, v)| CrossKv {
                    k: tape.constant(k.clone()),
                    v: tape.constant(v.clone()),
                    mask: None,
                })
                .collect()
        });
        let h = run_stack_cached(&p, "dec", self.cfg, x, &mut self.cache.layers, cross.as_deref())?;
        let logits = tied_logits(h, emb)?.value();
        Ok(last_row(&logits).to_vec())
    }
}

/// Greedy continuation. Decoder-only models continue `input`; encoder-decoder
/// models encode it and decode from `BOS`. The returned tokens exclude the
/// prompt and include a final `EOS` if one was produced.
pub fn greedy_decode(ckpt: &NamedCheckpoint, input: &[u32], opts: DecodeOptions) -> Result<Vec<u32>> {
    if opts.max_new == 0 {
        return Err(Error::Contract("max_new must be at least 1".into()));
    }
    let encdec = ckpt.arch().is_encoder_decoder();
    if !encdec && input.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let mut out = Vec::with_capacity(opts.max_new);
    if opts.use_cache {
        let mut dec = Decoder::new(ckpt, input)?;
        let mut logits = if encdec { dec.feed(&[BOS])? } else { dec.feed(input)? };
        loop {
            let t = argmax(&logits);
            out.push(t);
            if out.len() == opts.max_new || (opts.stop_at_eos && t == EOS) {
                break;
            }
            logits = dec.feed(&[t])?;
        }
    } else {
        loop {
            let logits = if encdec {
                let mut target = vec![BOS];
                target.extend_from_slice(&out);
                encdec_forward(ckpt, input, &target)?
            } else {
                let mut seq = input.to_vec();
                seq.extend_from_slice(&out);
                decoder_only_forward(ckpt, &seq)?
            };
            let t = argmax(last_row(&logits));
            out.push(t);
            if out.len() == opts.max_new || (opts.stop_at_eos && t == EOS) {
                break;
            }
        }
    }
    Ok(out)
}
