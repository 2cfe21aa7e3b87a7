//! Last-token classification probe with full finetuning.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datapipe::vocab::{tokenize, PAD};
use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::model::config::ArchKind;
use crate::model::forward::{decoder_only_hidden, encoder_hidden};
use crate::model::layers::{ParamVars, TokenBatch};
use crate::tensor::Tensor;
use crate::trainer::{ce_loss, clip_global_norm, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    /// Label names; example labels index into this list.
    pub classes: Vec<String>,
}

/// Parses `text<TAB>label` lines, skipping blank ones.
pub fn parse_tsv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.rsplit_once('\t')
                .map(|(t, y)| (t.to_string(), y.trim().to_string()))
                .ok_or_else(|| Error::Input(format!("line {}: expected text<TAB>label", i + 1)))
        })
        .collect()
}

impl ProbeData {
    /// Builds splits from raw rows; classes are the sorted label names
    /// seen in either split.
    pub fn from_rows(train: &[(String, String)], dev: &[(String, String)]) -> Result<Self> {
        let classes: Vec<String> = train
            .iter()
            .chain(dev)
            .map(|(_, y)| y.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let conv = |rows: &[(String, String)]| -> Result<Vec<LabeledExample>> {
            rows.iter()
                .map(|(t, y)| {
                    let tokens = tokenize(t);
                    if tokens.is_empty() {
                        return Err(Error::Input("probe example with empty text".into()));
                    }
                    Ok(LabeledExample {
                        tokens,
                        label: classes.binary_search(y).expect("label collected above"),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: conv(train)?,
            dev: conv(dev)?,
            classes,
        })
    }

    pub fn load(train: &Path, dev: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_rows(&parse_tsv(&read(train)?)?, &parse_tsv(&read(dev)?)?)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub epochs: usize,
    /// Grid learning rates are `lr_base · 3^i` for `i < lr_steps`.
    pub lr_base: f64,
    pub lr_steps: usize,
    pub batch_sizes: Vec<usize>,
    pub max_len: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr_base: 1e-5,
            lr_steps: 3,
            batch_sizes: vec![8, 32],
            max_len: 256,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl HeadConfig {
    pub fn learning_rates(&self) -> Vec<f64> {
        (0..self.lr_steps).map(|i| self.lr_base * 3f64.powi(i as i32)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub lr: f64,
    pub batch_size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub best: GridPoint,
    pub grid: Vec<GridPoint>,
    pub num_classes: usize,
    /// `[d_model, classes]` of the linear head.
    pub head_shape: [usize; 2],
    /// `encoder` or `decoder`: which stack supplied the representation.
    pub representation: String,
}

/// Which stack feeds the head.
pub fn representation_side(arch: &ArchKind) -> &'static str {
    if arch.is_encoder_decoder() {
        "encoder"
    } else {
        "decoder"
    }
}

/// Final hidden state of each row's last unpadded token, `[B, d]`.
pub fn last_token_states<'t>(
    p: &ParamVars<'t, f32>,
    ckpt: &NamedCheckpoint,
    batch: &TokenBatch,
) -> Result<Var<'t, f32>> {
    let h = match ckpt.arch() {
        ArchKind::DecoderOnly { config } => decoder_only_hidden(p, config, batch)?,
        arch => encoder_hidden(p, arch, ckpt.meta().encoder_mask, batch)?,
    };
    let d = *h.shape().last().unwrap();
    let ids: Vec<u32> = batch
        .lens
        .iter()
        .enumerate()
        .map(|(b, &l)| (b * batch.seq_len + l - 1) as u32)
        .collect();
    h.reshape(&[batch.batch_size() * batch.seq_len, d])?.embedding(&ids)
}

fn head_width(arch: &ArchKind) -> usize {
    arch.encoder().unwrap_or(arch.decoder()).d_model
}

struct Head {
    w: Tensor,
    b: Tensor,
}

fn head_logits<'t>(tape: &'t Tape<f32>, x: Var<'t, f32>, head: &Head, train: bool) -> (Var<'t, f32>, Var<'t, f32>, Var<'t, f32>) {
    let w = tape.leaf(head.w.clone(), train);
    let b = tape.leaf(head.b.clone(), train);
    let z = x.matmul(w).and_then(|z| z.add(b)).expect("head shapes");
    (z, w, b)
}

fn rows(examples: &[&LabeledExample], max_len: usize) -> TokenBatch {
    let r: Vec<Vec<u32>> = examples
        .iter()
        .map(|e| e.tokens[..e.tokens.len().min(max_len)].to_vec())
        .collect();
    TokenBatch::from_rows(&r, PAD)
}

/// Head logits `[B, classes]` for a batch, without gradients.
fn predict(ckpt: &NamedCheckpoint, head: &Head, ex: &[&LabeledExample], max_len: usize) -> Result<Vec<usize>> {
    let tape = Tape::<f32>::new();
    let p = ParamVars::bind(&tape, ckpt, |_| false);
    let x = last_token_states(&p, ckpt, &rows(ex, max_len))?;
    let (z, _, _) = head_logits(&tape, x, head, false);
    let z = z.value();
    let c = head.b.numel();
    Ok((0..ex.len())
        .map(|i| crate::evalbench::decode::argmax(&z.data()[i * c..(i + 1) * c]) as usize)
        .collect())
}

pub fn accuracy(ckpt: &NamedCheckpoint, head_w: &Tensor, head_b: &Tensor, dev: &[LabeledExample], max_len: usize) -> Result<f64> {
    let head = Head { w: head_w.clone(), b: head_b.clone() };
    let mut correct = 0;
    for chunk in dev.chunks(32) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let pred = predict(ckpt, &head, &refs, max_len)?;
        correct += pred.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(correct as f64 / dev.len().max(1) as f64)
}

fn train_one(
    ckpt: &NamedCheckpoint,
    data: &ProbeData,
    cfg: &HeadConfig,
    lr: f64,
    batch_size: usize,
) -> Result<f64> {
    let mut model = ckpt.clone();
    let d = head_width(model.arch());
    let c = data.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Head {
        w: Tensor::randn(&[d, c], 1.0 / (d as f64).sqrt(), &mut rng),
        b: Tensor::zeros(&[c]),
    };
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch_size) {
            let ex: Vec<&LabeledExample> = idx.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<u32> = ex.iter().map(|e| e.label as u32).collect();
            let tape = Tape::<f32>::new();
            let p = ParamVars::bind(&tape, &model, |_| true);
            let x = last_token_states(&p, &model, &rows(&ex, cfg.max_len))?;
            let (z, w, b) = head_logits(&tape, x, &head, true);
            let loss = ce_loss(z, &labels, &vec![1.0; labels.len()])?;
            let mut g = tape.backward(loss)?;
            let mut grads: std::collections::BTreeMap<String, Tensor> = p
                .iter()
                .filter_map(|(n, v)| g.take(v).map(|t| (n.to_string(), t)))
                .collect();
            grads.insert("head.w".into(), g.take(w).expect("head grad"));
            grads.insert("head.b".into(), g.take(b).expect("head grad"));
            clip_global_norm(&mut grads, 1.0);
            let gw = grads.remove("head.w").unwrap();
            let gb = grads.remove("head.b").unwrap();
            head.w = opt.update("head.w", &head.w, &gw, lr)?;
            head.b = opt.update("head.b", &head.b, &gb, lr)?;
            opt.apply(&mut model, &grads, lr)?;
        }
    }
    accuracy(&model, &head.w, &head.b, &data.dev, cfg.max_len)
}

/// Stacks a linear head on the last token's representation (encoder side
/// for encoder-decoder models), finetunes everything for every grid point
/// and reports the best dev accuracy.
pub fn finetune_classifier(ckpt: &NamedCheckpoint, data: &ProbeData, cfg: &HeadConfig) -> Result<ProbeResult> {
    let seen: BTreeSet<usize> = data.train.iter().map(|e| e.label).collect();
    if seen.len() < 2 {
        return Err(Error::Contract("training split has fewer than two classes".into()));
    }
    if data.dev.is_empty() {
        return Err(Error::Input("dev split is empty".into()));
    }
    if cfg.batch_sizes.is_empty() || cfg.batch_sizes.contains(&0) || cfg.lr_steps == 0 {
        return Err(Error::Config("probe grid is empty".into()));
    }
    let mut grid = Vec::new();
    for lr in cfg.learning_rates() {
        for &bs in &cfg.batch_sizes {
            let accuracy = train_one(ckpt, data, cfg, lr, bs)?;
            grid.push(GridPoint { lr, batch_size: bs, accuracy });
        }
    }
    let best = grid
        .iter()
        .fold(None::<&GridPoint>, |b, g| match b {
            Some(b) if b.accuracy >= g.accuracy => Some(b),
            _ => Some(g),
        })
        .cloned()
        .expect("non-empty grid");
    Ok(ProbeResult {
        best,
        grid,
        num_classes: data.num_classes(),
        head_shape: [head_width(ckpt.arch()), data.num_classes()],
        representation: representation_side(ckpt.arch()).into(),
    })
}
