use crate::datapipe::{pack_batches, pack_decoder_batches, TrainingExample};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::trainer::eval_loss;

/// `exp` of the mean target-token NLL. Decoder-only models read
/// `input ++ target` and are scored on the target part only.
pub fn perplexity(ckpt: &NamedCheckpoint, shard: &[TrainingExample], batch_size: usize) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::Input("perplexity shard is empty".into()));
    }
    let batches = if ckpt.arch().is_encoder_decoder() {
        pack_batches(shard, batch_size, usize::MAX, usize::MAX)
    } else {
        pack_decoder_batches(shard, batch_size, usize::MAX, false)
    };
    Ok(eval_loss(ckpt, &batches)?.exp())
}
