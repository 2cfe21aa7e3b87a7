//! Config-driven training runs.

use std::path::PathBuf;

use super::config::{Corpus, RunConfig};
use super::repro::ReproRecord;
use super::{load_checkpoint, save_checkpoint};
use crate::datapipe::{prefixlm_split, read_dataset, ul2_mixture, TrainingExample};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::trainer::{run_adaptation, MetricsLog, Objective, RunData, RunOutcome};

/// Materialized example pools for a run.
pub struct Pools {
    pub prefixlm: Vec<TrainingExample>,
    pub ul2: Vec<TrainingExample>,
    pub eval: Vec<TrainingExample>,
}

impl Pools {
    pub fn data(&self) -> RunData<'_> {
        RunData {
            prefixlm: &self.prefixlm,
            ul2: &self.ul2,
            eval: &self.eval,
        }
    }
}

fn split_all(seqs: &[Vec<u32>]) -> Result<Vec<TrainingExample>> {
    seqs.iter()
        .filter(|s| s.len() >= 2)
        .map(|s| prefixlm_split(s).map(Into::into))
        .collect()
}

/// Builds the pools a config needs. Evaluation always uses the PrefixLM
/// split of the held-out sequences.
pub fn build_pools(cfg: &RunConfig, corpus: &Corpus) -> Result<Pools> {
    let prefixlm = match &cfg.data.prefixlm_records {
        Some(p) => read_dataset(p)?,
        None if cfg.uses(Objective::PrefixLm) => split_all(&corpus.train)?,
        None => Vec::new(),
    };
    let ul2 = if cfg.uses(Objective::Ul2) {
        let mixture = cfg.data.ul2.clone().unwrap_or_default();
        ul2_mixture(corpus.train.iter().filter(|s| s.len() >= 2).cloned(), &mixture, cfg.seed)?
            .map(|e| e.map(Into::into))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let eval = split_all(&corpus.eval)?;
    if eval.is_empty() {
        return Err(Error::Input("evaluation corpus has no usable sequences".into()));
    }
    Ok(Pools { prefixlm, ul2, eval })
}

/// Starting weights: the configured checkpoint, or a seeded random init.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<NamedCheckpoint> {
    let arch = cfg.model.resolve()?;
    let mut ckpt = match &cfg.model.init {
        Some(p) => {
            let c = load_checkpoint(p)?;
            if *c.arch() != arch {
                return Err(Error::Config(format!(
                    "{} does not have the configured architecture",
                    p.display()
                )));
            }
            c
        }
        None => NamedCheckpoint::init_random(arch, cfg.seed)?,
    };
    if ckpt.arch().is_encoder_decoder() {
        ckpt.meta_mut().encoder_mask = cfg.model.encoder_mask;
    }
    Ok(ckpt)
}

/// Paths a run writes inside `output_dir`.
pub struct RunFiles {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub repro: PathBuf,
}

impl RunFiles {
    pub fn new(cfg: &RunConfig) -> Self {
        let d = &cfg.output_dir;
        Self {
            metrics: d.join("metrics.tsv"),
            checkpoint: d.join("final.edsg"),
            repro: d.join("repro.json"),
        }
    }
}

/// Trains per `cfg`, writing the metrics log, the final checkpoint and a
/// reproducibility record. An existing metrics log is replaced.
pub fn run_config(cfg: &RunConfig, command: Vec<String>) -> Result<RunOutcome> {
    cfg.validate()?;
    let files = RunFiles::new(cfg);
    let corpus = cfg.data.load()?;
    let pools = build_pools(cfg, &corpus)?;
    let ckpt = initial_checkpoint(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    if files.metrics.exists() {
        std::fs::remove_file(&files.metrics).map_err(|e| Error::io(&files.metrics, e))?;
    }
    let mut log = MetricsLog::open(&files.metrics)?;
    let outcome = run_adaptation(ckpt, pools.data(), &cfg.schedule, |row, _| log.append(row))?;
    save_checkpoint(&outcome.checkpoint, &files.checkpoint)?;

    let mut rec = ReproRecord::new(command, cfg)?;
    rec.seed("init", cfg.seed).seed("schedule", cfg.schedule.seed);
    for p in cfg.data.input_files().iter().chain(&cfg.model.init) {
        rec.input(p)?;
    }
    rec.output(&files.metrics)?.output(&files.checkpoint)?;
    rec.save(&files.repro)?;
    Ok(outcome)
}
