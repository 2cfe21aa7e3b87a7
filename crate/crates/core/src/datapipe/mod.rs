//! Corpus preparation: tokenization, PrefixLM and UL2 example construction,
//! teacher sidecars and batching.

pub mod batch;
pub mod corpus;
pub mod examples;
pub mod records;
pub mod teacher;
pub mod vocab;

pub use batch::{pack_batches, pack_decoder_batches, Batch};
pub use corpus::{chunk_stream, read_corpus, SyntheticCorpus};
pub use examples::{
    decorrupt, example_seed, prefixlm_split, truncation_count, ul2_corrupt, ul2_mixture,
    DenoiserConfig, Mode, PrefixLmExample, TopK, TrainingExample, Ul2Example, Ul2Mixture,
};
pub use records::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use teacher::{teacher_record, topk_probs, DEFAULT_TOP_K};
