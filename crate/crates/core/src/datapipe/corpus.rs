//! Corpus loading and the synthetic Markov corpus used for desk-scale runs.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use crate::error::{Error, Result};

/// Newline-delimited UTF-8 text, one byte-tokenized sequence per non-empty
/// line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(tokenize).collect())
}

/// Concatenates sequences and cuts the stream into windows of `len`,
/// dropping the incomplete tail.
pub fn chunk_stream(seqs: &[Vec<u32>], len: usize) -> Vec<Vec<u32>> {
    let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
    flat.chunks_exact(len.max(1)).map(<[u32]>::to_vec).collect()
}

/// Mixture of first-order Markov chains ("topics") over a small byte
/// alphabet. Every sequence follows one topic, so its first half carries
/// information about how the second half continues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpus {
    pub num_sequences: usize,
    pub seq_len: usize,
    pub alphabet: usize,
    pub topics: usize,
    /// Likely successors per state; the rest get a small floor probability.
    pub branching: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            num_sequences: 2048,
            seq_len: 64,
            alphabet: 32,
            topics: 4,
            branching: 3,
            seed: 0,
        }
    }
}

impl SyntheticCorpus {
    pub fn generate(&self) -> Result<Vec<Vec<u32>>> {
        if self.alphabet == 0 || self.alphabet > 94 || self.topics == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "synthetic corpus needs 1..=94 symbols, a topic and a length".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.alphabet;
        let tables: Vec<Vec<WeightedIndex<f64>>> = (0..self.topics)
            .map(|_| {
                (0..a)
                    .map(|_| {
                        let mut w = vec![0.02; a];
                        for _ in 0..self.branching {
                            w[rng.gen_range(0..a)] += rng.gen_range(1.0..4.0);
                        }
                        WeightedIndex::new(w).expect("positive weights")
                    })
                    .collect()
            })
            .collect();
        // printable ASCII starting at '!'
        let sym = |s: usize| 33 + s as u32;
        Ok((0..self.num_sequences)
            .map(|_| {
                let topic = &tables[rng.gen_range(0..self.topics)];
                let mut s = rng.gen_range(0..a);
                let mut out = Vec::with_capacity(self.seq_len);
                for _ in 0..self.seq_len {
                    out.push(sym(s));
                    s = topic[s].sample(&mut rng);
                }
                out
            })
            .collect())
    }
}
