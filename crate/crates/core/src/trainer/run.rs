//! The training loop: batching with seeded reshuffles, stage switching,
//! periodic evaluation and the metrics log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::optim::OptimizerState;
use super::schedule::{Objective, TrainSchedule};
use super::step::{eval_loss, train_step};
use crate::datapipe::{example_seed, pack_batches, pack_decoder_batches, Batch, TrainingExample};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;

/// Example pools for each objective plus the held-out evaluation shard.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub prefixlm: &'a [TrainingExample],
    pub ul2: &'a [TrainingExample],
    pub eval: &'a [TrainingExample],
}

impl<'a> RunData<'a> {
    fn pool(&self, o: Objective) -> &'a [TrainingExample] {
        match o {
            Objective::PrefixLm => self.prefixlm,
            Objective::Ul2 => self.ul2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    /// Steps completed.
    pub step: u64,
    pub tokens: u64,
    pub objective: Objective,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: NamedCheckpoint,
    pub rows: Vec<MetricsRow>,
    /// Completed passes over each objective's pool.
    pub epochs: [u64; 2],
}

/// Cycles through a pool in a seeded order, reshuffling at every wrap.
struct Sampler {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(self.seed, self.epoch));
        self.order.shuffle(&mut rng);
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.cursor == self.len {
                    self.cursor = 0;
                    self.epoch += 1;
                    self.shuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn pack(ckpt: &NamedCheckpoint, ex: &[TrainingExample], s: &TrainSchedule) -> Vec<Batch> {
    if ckpt.arch().is_encoder_decoder() {
        pack_batches(ex, s.batch_size, s.max_in, s.max_out)
    } else {
        pack_decoder_batches(ex, s.batch_size, s.max_in + s.max_out, s.loss_on_input)
    }
}

/// Trains `ckpt` for `schedule.total_steps`. A metrics row is produced
/// after every `eval_every` steps and after the last one, and passed to
/// `on_row` together with the current weights.
pub fn run_adaptation(
    mut ckpt: NamedCheckpoint,
    data: RunData<'_>,
    schedule: &TrainSchedule,
    mut on_row: impl FnMut(&MetricsRow, &NamedCheckpoint) -> Result<()>,
) -> Result<RunOutcome> {
    schedule.validate()?;
    for stage in 0..2 {
        let o = schedule.objectives[stage];
        let used = if stage == 0 {
            schedule.switch_step() > 0
        } else {
            schedule.switch_step() < schedule.total_steps
        };
        if used && data.pool(o).is_empty() {
            return Err(Error::Input(format!("no training examples for {o:?}")));
        }
    }
    let eval = pack(&ckpt, data.eval, schedule);
    let mut samplers = [0, 1].map(|stage| {
        let o = schedule.objectives[stage];
        Sampler::new(data.pool(o).len(), example_seed(schedule.seed, 1000 + stage as u64))
    });
    let mut opt = OptimizerState::new(schedule.optimizer);
    let mut rows = Vec::new();
    let (mut tokens, mut loss_sum, mut loss_n) = (0u64, 0.0, 0u64);
    for step in 0..schedule.total_steps {
        let stage = schedule.stage_at(step);
        let objective = schedule.objectives[stage];
        let pool = data.pool(objective);
        let picked: Vec<TrainingExample> = samplers[stage]
            .take(schedule.batch_size)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        let batch = pack(&ckpt, &picked, schedule).remove(0);
        tokens += batch.tokens_seen() as u64;
        let stats = train_step(&mut ckpt, &batch, schedule, &mut opt, step)?;
        loss_sum += stats.loss;
        loss_n += 1;
        let done = step + 1;
        if done % schedule.eval_every == 0 || done == schedule.total_steps {
            let row = MetricsRow {
                step: done,
                tokens,
                objective,
                train_loss: loss_sum / loss_n as f64,
                eval_loss: eval_loss(&ckpt, &eval)?,
            };
            on_row(&row, &ckpt)?;
            rows.push(row);
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(RunOutcome {
        checkpoint: ckpt,
        rows,
        epochs: [samplers[0].epoch, samplers[1].epoch],
    })
}

/// Append-only tab-separated log with columns `step tokens split loss`;
/// each metrics row becomes a `train` line and an `eval` line.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step\ttokens\tsplit\tloss";

    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn lines(row: &MetricsRow) -> [String; 2] {
        [
            format!("{}\t{}\ttrain\t{:.6}", row.step, row.tokens, row.train_loss),
            format!("{}\t{}\teval\t{:.6}", row.step, row.tokens, row.eval_loss),
        ]
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        for l in Self::lines(row) {
            writeln!(self.file, "{l}").map_err(|e| Error::Format(format!("metrics log: {e}")))?;
        }
        self.file
            .flush()
            .map_err(|e| Error::Format(format!("metrics log: {e}")))
    }
}
