//! PrefixLM splitting and UL2 span corruption.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use serde::{Deserialize, Serialize};

use super::vocab::{self, EOS, MODE_R, MODE_S, MODE_X, NUM_SENTINELS};
use crate::error::{Error, Result};

/// Per-position teacher distribution: `(token, probability)` pairs sorted by
/// descending probability.
pub type TopK = Vec<(u32, f32)>;

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixLmExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    /// One entry per target position.
    pub teacher_topk: Option<Vec<TopK>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    R,
    S,
    X,
}

impl Mode {
    pub fn token(self) -> u32 {
        match self {
            Mode::R => MODE_R,
            Mode::S => MODE_S,
            Mode::X => MODE_X,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ul2Example {
    pub mode: Mode,
    /// Mode token, then the sequence with each span replaced by a sentinel.
    pub input: Vec<u32>,
    /// `<s0> span0 <s1> span1 ... EOS`, or the plain suffix in S mode.
    pub target: Vec<u32>,
    /// Corruption stopped at the sentinel limit before reaching the rate.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingExample {
    PrefixLm(PrefixLmExample),
    Ul2(Ul2Example),
}

impl TrainingExample {
    pub fn input(&self) -> &[u32] {
        match self {
            TrainingExample::PrefixLm(e) => &e.input,
            TrainingExample::Ul2(e) => &e.input,
        }
    }

    pub fn target(&self) -> &[u32] {
        match self {
            TrainingExample::PrefixLm(e) => &e.target,
            TrainingExample::Ul2(e) => &e.target,
        }
    }

    pub fn teacher(&self) -> Option<&[TopK]> {
        match self {
            TrainingExample::PrefixLm(e) => e.teacher_topk.as_deref(),
            TrainingExample::Ul2(_) => None,
        }
    }
}

impl From<PrefixLmExample> for TrainingExample {
    fn from(e: PrefixLmExample) -> Self {
        TrainingExample::PrefixLm(e)
    }
}

impl From<Ul2Example> for TrainingExample {
    fn from(e: Ul2Example) -> Self {
        TrainingExample::Ul2(e)
    }
}

/// Input gets the first `floor(n/2)` tokens, target the rest.
pub fn prefixlm_split(sequence: &[u32]) -> Result<PrefixLmExample> {
    if sequence.len() < 2 {
        return Err(Error::Input(format!(
            "PrefixLM needs at least 2 tokens, got {}",
            sequence.len()
        )));
    }
    let cut = sequence.len() / 2;
    Ok(PrefixLmExample {
        input: sequence[..cut].to_vec(),
        target: sequence[cut..].to_vec(),
        teacher_topk: None,
    })
}

/// One denoiser. For S mode `rate` is the suffix fraction and `mean_span`
/// is unused.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub mode: Mode,
    pub mean_span: f64,
    pub rate: f64,
}

impl DenoiserConfig {
    pub fn r(mean_span: f64, rate: f64) -> Self {
        Self { mode: Mode::R, mean_span, rate }
    }

    pub fn x(mean_span: f64, rate: f64) -> Self {
        Self { mode: Mode::X, mean_span, rate }
    }

    pub fn s(suffix_fraction: f64) -> Self {
        Self { mode: Mode::S, mean_span: 0.0, rate: suffix_fraction }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("corruption rate {} not in (0,1)", self.rate)));
        }
        if self.mode != Mode::S && !(self.mean_span >= 1.0) {
            return Err(Error::Config(format!("mean span {} below 1", self.mean_span)));
        }
        Ok(())
    }
}

static TRUNCATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of corruptions cut short at the sentinel limit in this process.
pub fn truncation_count() -> u64 {
    TRUNCATIONS.load(Ordering::Relaxed)
}

/// Applies one denoiser. Span lengths are `1 + Geometric(1/mean_span)`
/// (mean `mean_span`), drawn until `round(rate·n)` tokens are covered,
/// each clipped to the remaining budget. Spans are then placed between
/// uniformly sampled gaps of uncorrupted tokens.
pub fn ul2_corrupt(sequence: &[u32], denoiser: &DenoiserConfig, seed: u64) -> Result<Ul2Example> {
    denoiser.validate()?;
    let n = sequence.len();
    if n < 4 {
        return Err(Error::Input(format!("UL2 needs at least 4 tokens, got {n}")));
    }
    let budget = ((denoiser.rate * n as f64).round() as usize).clamp(1, n - 1);
    if denoiser.mode == Mode::S {
        let keep = n - budget;
        let mut input = vec![MODE_S];
        input.extend_from_slice(&sequence[..keep]);
        return Ok(Ul2Example {
            mode: Mode::S,
            input,
            target: sequence[keep..].to_vec(),
            truncated: false,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometric::new(1.0 / denoiser.mean_span)
        .map_err(|e| Error::Config(format!("span law: {e}")))?;
    let mut spans = Vec::new();
    let mut left = budget;
    let mut truncated = false;
    while left > 0 {
        if spans.len() == NUM_SENTINELS as usize {
            truncated = true;
            TRUNCATIONS.fetch_add(1, Ordering::Relaxed);
            break;
        }
        let len = (geom.sample(&mut rng) as usize).saturating_add(1).min(left);
        spans.push(len);
        left -= len;
    }
    let noise: usize = spans.iter().sum();
    let free = n - noise;
    let mut cuts: Vec<usize> = (0..spans.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();

    let mut input = vec![denoiser.mode.token()];
    let mut target = Vec::with_capacity(noise + spans.len() + 1);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in spans.iter().zip(&cuts).enumerate() {
        let gap = cut - prev_cut;
        prev_cut = cut;
        input.extend_from_slice(&sequence[pos..pos + gap]);
        pos += gap;
        let s = vocab::sentinel(i)?;
        input.push(s);
        target.push(s);
        target.extend_from_slice(&sequence[pos..pos + len]);
        pos += len;
    }
    input.extend_from_slice(&sequence[pos..]);
    target.push(EOS);
    Ok(Ul2Example {
        mode: denoiser.mode,
        input,
        target,
        truncated,
    })
}

/// Reconstructs the original sequence from a UL2 example.
pub fn decorrupt(example: &Ul2Example) -> Result<Vec<u32>> {
    let body = example
        .input
        .split_first()
        .filter(|(m, _)| **m == example.mode.token())
        .map(|(_, rest)| rest)
        .ok_or_else(|| Error::Input("example does not start with its mode token".into()))?;
    if example.mode == Mode::S {
        return Ok(body.iter().chain(&example.target).copied().collect());
    }
    let mut segments: Vec<&[u32]> = Vec::new();
    let mut rest = example.target.as_slice();
    while let Some((&head, tail)) = rest.split_first() {
        if head == EOS {
            break;
        }
        let idx = vocab::sentinel_index(head)
            .ok_or_else(|| Error::Input(format!("expected sentinel in target, got {head}")))?;
        if idx != segments.len() {
            return Err(Error::Input(format!("sentinel <s{idx}> out of order")));
        }
        let end = tail
            .iter()
            .position(|&t| t == EOS || vocab::sentinel_index(t).is_some())
            .unwrap_or(tail.len());
        segments.push(&tail[..end]);
        rest = &tail[end..];
    }
    let mut out = Vec::new();
    let mut next = 0;
    for &t in body {
        match vocab::sentinel_index(t) {
            Some(i) if i == next && i < segments.len() => {
                out.extend_from_slice(segments[i]);
                next += 1;
            }
            Some(i) => return Err(Error::Input(format!("unexpected sentinel <s{i}> in input"))),
            None => out.push(t),
        }
    }
    if next != segments.len() {
        return Err(Error::Input("target has spans missing from the input".into()));
    }
    Ok(out)
}

/// Weighted set of denoisers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ul2Mixture {
    pub denoisers: Vec<(DenoiserConfig, f64)>,
}

impl Default for Ul2Mixture {
    /// Seven denoisers with equal weight: two R, one S, four X.
    fn default() -> Self {
        let ds = [
            DenoiserConfig::r(3.0, 0.15),
            DenoiserConfig::r(8.0, 0.15),
            DenoiserConfig::s(0.25),
            DenoiserConfig::x(3.0, 0.5),
            DenoiserConfig::x(8.0, 0.5),
            DenoiserConfig::x(64.0, 0.15),
            DenoiserConfig::x(64.0, 0.5),
        ];
        Self {
            denoisers: ds.into_iter().map(|d| (d, 1.0)).collect(),
        }
    }
}

impl Ul2Mixture {
    pub fn single(d: DenoiserConfig) -> Self {
        Self {
            denoisers: vec![(d, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.denoisers.is_empty() {
            return Err(Error::Config("UL2 mixture is empty".into()));
        }
        for (d, w) in &self.denoisers {
            d.validate()?;
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("mixture weight {w} must be positive")));
            }
        }
        Ok(())
    }
}

/// Seed used for the `index`-th example of a stream seeded with `seed`.
pub fn example_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lazily corrupts a corpus stream. The denoiser for each example comes
/// from a generator seeded by `seed`; the corruption of example `i` uses
/// [`example_seed`]`(seed, i)`.
pub fn ul2_mixture<I>(
    corpus: I,
    mixture: &Ul2Mixture,
    seed: u64,
) -> Result<impl Iterator<Item = Result<Ul2Example>>>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    mixture.validate()?;
    let weights = WeightedIndex::new(mixture.denoisers.iter().map(|(_, w)| *w))
        .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
    let denoisers: Vec<DenoiserConfig> = mixture.denoisers.iter().map(|(d, _)| *d).collect();
    let mut picker = ChaCha8Rng::seed_from_u64(seed);
    Ok(corpus.into_iter().enumerate().map(move |(i, seq)| {
        let d = &denoisers[weights.sample(&mut picker)];
        ul2_corrupt(&seq, d, example_seed(seed, i as u64))
    }))
}
