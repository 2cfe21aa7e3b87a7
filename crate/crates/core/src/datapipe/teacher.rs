//! Top-k teacher distributions for distillation.

use super::examples::{PrefixLmExample, TopK};
use super::vocab::VOCAB_SIZE;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::model::config::ArchKind;
use crate::model::forward::decoder_only_logits;
use crate::model::layers::{ParamVars, TokenBatch};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 16;

/// Sorted top-`k` of the softmax of one logit row; ties go to the lower id.
pub fn topk_probs(logits: &[f32], k: usize) -> TopK {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, |m, v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx.into_iter()
        .map(|i| (i as u32, ((exps[i] / z) as f32).max(f32::MIN_POSITIVE)))
        .collect()
}

/// Annotates every target position with the teacher's top-`k` next-token
/// distribution given the input and the preceding target tokens.
pub fn teacher_record(
    teacher: &NamedCheckpoint,
    examples: &[PrefixLmExample],
    k: usize,
) -> Result<Vec<PrefixLmExample>> {
    let cfg = match teacher.arch() {
        ArchKind::DecoderOnly { config } => config,
        _ => return Err(Error::Config("teacher must be a decoder-only model".into())),
    };
    if cfg.vocab_size != VOCAB_SIZE {
        return Err(Error::Config(format!(
            "teacher vocab {} differs from data vocab {VOCAB_SIZE}",
            cfg.vocab_size
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let v = cfg.vocab_size;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(16) {
        let rows: Vec<Vec<u32>> = chunk
            .iter()
            .map(|e| {
                if e.input.is_empty() || e.target.is_empty() {
                    return Err(Error::Input("example with empty input or target".into()));
                }
                let mut r = e.input.clone();
                r.extend_from_slice(&e.target[..e.target.len() - 1]);
                Ok(r)
            })
            .collect::<Result<_>>()?;
        let batch = TokenBatch::from_rows(&rows, 0);
        let tape = Tape::<f32>::new();
        let p = ParamVars::bind(&tape, teacher, |_| false);
        let logits: Tensor = decoder_only_logits(&p, cfg, &batch)?.value();
        for (b, e) in chunk.iter().enumerate() {
            let topk = (0..e.target.len())
                .map(|j| {
                    let pos = e.input.len() - 1 + j;
                    let start = (b * batch.seq_len + pos) * v;
                    topk_probs(&logits.data()[start..start + v], k)
                })
                .collect();
            out.push(PrefixLmExample {
                teacher_topk: Some(topk),
                ..e.clone()
            });
        }
    }
    Ok(out)
}
