//! One optimizer step and batch-level loss evaluation.

use std::collections::BTreeMap;

use super::loss::{ce_loss, kd_loss};
use super::optim::{clip_global_norm, OptimizerState};
use super::schedule::TrainSchedule;
use crate::autodiff::{Tape, Var};
use crate::datapipe::Batch;
use crate::error::{Error, Result};
use crate::model::checkpoint::{is_cross_attention, NamedCheckpoint};
use crate::model::config::ArchKind;
use crate::model::forward::{decoder_only_logits, encdec_logits};
use crate::model::layers::ParamVars;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Only cross-attention was trainable.
    pub frozen: bool,
}

/// Logits for a batch under the checkpoint's architecture.
pub fn batch_logits<'t>(
    p: &ParamVars<'t, f32>,
    ckpt: &NamedCheckpoint,
    batch: &Batch,
) -> Result<Var<'t, f32>> {
    match (ckpt.arch(), &batch.encoder_input) {
        (ArchKind::DecoderOnly { config }, None) => decoder_only_logits(p, config, &batch.decoder_input),
        (arch @ ArchKind::EncoderDecoder { .. }, Some(enc)) => {
            encdec_logits(p, arch, ckpt.meta().encoder_mask, enc, &batch.decoder_input)
        }
        (ArchKind::DecoderOnly { .. }, Some(_)) => Err(Error::Contract(
            "encoder-decoder batch given to a decoder-only model".into(),
        )),
        (ArchKind::EncoderDecoder { .. }, None) => Err(Error::Contract(
            "decoder-only batch given to an encoder-decoder model".into(),
        )),
    }
}

/// Training loss: distillation where sidecars exist and `kd_lambda > 0`,
/// cross-entropy otherwise.
pub fn batch_loss<'t>(
    p: &ParamVars<'t, f32>,
    ckpt: &NamedCheckpoint,
    batch: &Batch,
    kd_lambda: f64,
) -> Result<Var<'t, f32>> {
    let logits = batch_logits(p, ckpt, batch)?;
    match &batch.teacher {
        Some(t) if kd_lambda > 0.0 => kd_loss(logits, &batch.labels, &batch.loss_mask, t, kd_lambda),
        _ => ce_loss(logits, &batch.labels, &batch.loss_mask),
    }
}

/// Cross-entropy averaged over every unmasked target token of `batches`.
pub fn eval_loss(ckpt: &NamedCheckpoint, batches: &[Batch]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches {
        let n = b.target_tokens();
        if n == 0 {
            continue;
        }
        let tape = Tape::<f32>::new();
        let p = ParamVars::bind(&tape, ckpt, |_| false);
        let l = ce_loss(batch_logits(&p, ckpt, b)?, &b.labels, &b.loss_mask)?;
        total += l.value().item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("evaluation set has no target tokens".into()));
    }
    Ok(total / count as f64)
}

/// Steps during which only cross-attention trains: the schedule's value if
/// set, else the one recorded by surgery. Always zero for decoder-only.
pub fn freeze_steps(ckpt: &NamedCheckpoint, schedule: &TrainSchedule) -> u64 {
    if !ckpt.arch().is_encoder_decoder() {
        return 0;
    }
    schedule
        .freeze_xattn_steps
        .or(ckpt.meta().warmup_steps)
        .unwrap_or(0)
}

/// Forward, backward, global-norm clipping and one optimizer update. While
/// `step` is inside the freeze window only `dec.*.xattn.*` tensors change.
pub fn train_step(
    ckpt: &mut NamedCheckpoint,
    batch: &Batch,
    schedule: &TrainSchedule,
    opt: &mut OptimizerState,
    step: u64,
) -> Result<StepStats> {
    if step >= schedule.total_steps {
        return Err(Error::Contract(format!(
            "step {step} is past total_steps {}",
            schedule.total_steps
        )));
    }
    let frozen = step < freeze_steps(ckpt, schedule);
    let trainable = |name: &str| !frozen || is_cross_attention(name);
    let lr = schedule.lr_at(step);

    let (loss, mut grads) = {
        let tape = Tape::<f32>::new();
        let p = ParamVars::bind(&tape, ckpt, trainable);
        let loss = batch_loss(&p, ckpt, batch, schedule.kd_lambda)?;
        let mut g = tape.backward(loss)?;
        let grads: BTreeMap<String, _> = p
            .iter()
            .filter(|(name, _)| trainable(name))
            .filter_map(|(name, v)| g.take(v).map(|t| (name.to_string(), t)))
            .collect();
        (loss.value().item() as f64, grads)
    };
    let grad_norm = clip_global_norm(&mut grads, schedule.grad_clip_norm);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite { step, lr, grad_norm });
    }
    opt.apply(ckpt, &grads, lr)?;
    ckpt.meta_mut().step += 1;
    Ok(StepStats {
        loss,
        grad_norm,
        lr,
        frozen,
    })
}
