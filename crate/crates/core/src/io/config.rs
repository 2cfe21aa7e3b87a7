//! TOML run configuration.
//!
//! ```toml
//! seed = 1
//! output_dir = "runs/s-s"
//!
//! [model]
//! preset = "S-S"              # or an inline `arch` table
//! encoder_mask = "bidirectional"
//! init = "ckpt/s-s.edsg"      # optional starting weights
//!
//! [data]
//! train = "corpus/train.txt"
//! eval = "corpus/eval.txt"
//!
//! [schedule]
//! total_steps = 2000
//! objectives = ["ul2", "prefixlm"]
//! stage_switch_fraction = 0.9
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{chunk_stream, read_corpus, SyntheticCorpus, Ul2Mixture};
use crate::error::{Error, Result};
use crate::model::config::{ArchKind, MaskKind};
use crate::trainer::{Objective, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `S`, `2B`, `S-S`, `9B-2B`, ...
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub arch: Option<ArchKind>,
    #[serde(default)]
    pub encoder_mask: MaskKind,
    #[serde(default)]
    pub init: Option<PathBuf>,
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ArchKind> {
        let arch = match (&self.preset, &self.arch) {
            (Some(p), None) => ArchKind::from_preset(p)?,
            (None, Some(a)) => a.clone(),
            _ => {
                return Err(Error::Config(
                    "model needs exactly one of `preset` or `arch`".into(),
                ))
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Newline-delimited training text.
    #[serde(default)]
    pub train: Option<PathBuf>,
    /// Held-out text; required with `train`.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Generated corpus used instead of `train`/`eval`.
    #[serde(default)]
    pub synthetic: Option<SyntheticCorpus>,
    /// Share of synthetic sequences held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Re-cut the token stream into windows of this length.
    #[serde(default)]
    pub chunk_len: Option<usize>,
    /// Prepared PrefixLM dataset (possibly with teacher sidecars) that
    /// replaces the PrefixLM pool derived from the corpus.
    #[serde(default)]
    pub prefixlm_records: Option<PathBuf>,
    #[serde(default)]
    pub ul2: Option<Ul2Mixture>,
}

fn default_eval_fraction() -> f64 {
    0.1
}

/// Train and eval sequences.
pub struct Corpus {
    pub train: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.train, &self.eval, &self.synthetic) {
            (Some(_), Some(_), None) => {}
            (None, None, Some(s)) => {
                if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
                    return Err(Error::Config("eval_fraction must lie in (0, 1)".into()));
                }
                if ((s.num_sequences as f64) * self.eval_fraction).round() < 1.0 {
                    return Err(Error::Config("synthetic corpus leaves no eval sequences".into()));
                }
            }
            _ => {
                return Err(Error::Config(
                    "data needs `train` and `eval` paths, or a `synthetic` table".into(),
                ))
            }
        }
        if self.chunk_len == Some(0) {
            return Err(Error::Config("chunk_len must be positive".into()));
        }
        if let Some(m) = &self.ul2 {
            m.validate()?;
        }
        Ok(())
    }

    /// Every file this spec reads.
    pub fn input_files(&self) -> Vec<PathBuf> {
        [&self.train, &self.eval, &self.prefixlm_records]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn load(&self) -> Result<Corpus> {
        let (train, eval) = match (&self.train, &self.eval, &self.synthetic) {
            (Some(t), Some(e), _) => (read_corpus(t)?, read_corpus(e)?),
            (_, _, Some(s)) => {
                let mut all = s.generate()?;
                let n_eval = ((all.len() as f64) * self.eval_fraction).round() as usize;
                let eval = all.split_off(all.len() - n_eval);
                (all, eval)
            }
            _ => return Err(Error::Config("data source missing".into())),
        };
        let cut = |s: Vec<Vec<u32>>| match self.chunk_len {
            Some(n) => chunk_stream(&s, n),
            None => s,
        };
        Ok(Corpus {
            train: cut(train),
            eval: cut(eval),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    /// Seeds weight init and data generation; the schedule seed drives
    /// batching.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Permits training the 2B and 9B presets.
    #[serde(default)]
    pub allow_huge: bool,
}

impl RunConfig {
    /// Parses without validating.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::load_unchecked(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::load`] without validation, for callers that adjust
    /// fields first.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.model.init,
            &mut self.data.train,
            &mut self.data.eval,
            &mut self.data.prefixlm_records,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let arch = self.model.resolve()?;
        if arch.is_huge() && !self.allow_huge {
            return Err(Error::Config(
                "2B/9B presets are for accounting only; pass --i-know-this-is-huge to train them".into(),
            ));
        }
        self.schedule.validate()?;
        self.data.validate()?;
        Ok(())
    }

    /// Whether any step trains on `o`.
    pub fn uses(&self, o: Objective) -> bool {
        let s = &self.schedule;
        (s.switch_step() > 0 && s.objectives[0] == o)
            || (s.switch_step() < s.total_steps && s.objectives[1] == o)
    }
}
