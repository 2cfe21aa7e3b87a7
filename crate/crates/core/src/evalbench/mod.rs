//! Decoding, perplexity, classification probes, flops and latency.

pub mod decode;
pub mod flops;
pub mod latency;
pub mod ppl;
pub mod probe;

pub use decode::{argmax, greedy_decode, DecodeOptions, Decoder, KvCache};
pub use flops::{estimate_flops, FlopsReport};
pub use latency::{measure_latency, LatencyReport};
pub use ppl::perplexity;
pub use probe::{finetune_classifier, HeadConfig, LabeledExample, ProbeData, ProbeResult};
