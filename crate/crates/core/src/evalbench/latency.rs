//! Wall-clock decoding latency.

use std::time::Instant;

use serde::Serialize;

use super::decode::{greedy_decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub queries: usize,
    pub max_new: usize,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times cached greedy decoding of every prompt at batch size 1, always
/// generating `max_new` tokens. The first `warmup` queries are discarded.
pub fn measure_latency(
    ckpt: &NamedCheckpoint,
    prompts: &[Vec<u32>],
    max_new: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if prompts.is_empty() {
        return Err(Error::Input("no prompts".into()));
    }
    if warmup < 2 {
        return Err(Error::Config("at least 2 warmup queries are required".into()));
    }
    let opts = DecodeOptions {
        max_new,
        stop_at_eos: false,
        use_cache: true,
    };
    for i in 0..warmup {
        greedy_decode(ckpt, &prompts[i % prompts.len()], opts)?;
    }
    let mut samples: Vec<f64> = prompts
        .iter()
        .map(|p| {
            let start = Instant::now();
            greedy_decode(ckpt, p, opts)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    samples.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        median_ms: percentile(&samples, 0.5),
        p90_ms: percentile(&samples, 0.9),
        queries: samples.len(),
        max_new,
    })
}
