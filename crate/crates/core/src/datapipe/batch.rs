//! Padding examples into training batches.

use super::examples::{TopK, TrainingExample};
use super::vocab::{BOS, PAD};
use crate::model::layers::TokenBatch;

/// Right-padded batch. Row `b`, position `j` of the decoder predicts
/// `labels[b·T + j]`, counted in the loss where `loss_mask` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Encoder input; `None` for decoder-only batches.
    pub encoder_input: Option<TokenBatch>,
    pub decoder_input: TokenBatch,
    pub labels: Vec<u32>,
    pub loss_mask: Vec<f32>,
    /// Teacher distribution per decoder position, empty where absent.
    pub teacher: Option<Vec<TopK>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.decoder_input.batch_size()
    }

    /// Tokens that contribute to the loss.
    pub fn target_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m > 0.0).count()
    }

    /// Encoder plus decoder tokens, padding excluded.
    pub fn tokens_seen(&self) -> usize {
        let enc: usize = self.encoder_input.as_ref().map_or(0, |e| e.lens.iter().sum());
        enc + self.decoder_input.lens.iter().sum::<usize>()
    }
}

fn finish(
    encoder_input: Option<TokenBatch>,
    dec_rows: Vec<Vec<u32>>,
    label_rows: Vec<Vec<u32>>,
    mask_rows: Vec<Vec<f32>>,
    teacher_rows: Option<Vec<Vec<TopK>>>,
) -> Batch {
    let decoder_input = TokenBatch::from_rows(&dec_rows, PAD);
    let t = decoder_input.seq_len;
    let mut labels = Vec::with_capacity(dec_rows.len() * t);
    let mut loss_mask = Vec::with_capacity(dec_rows.len() * t);
    for (l, m) in label_rows.iter().zip(&mask_rows) {
        labels.extend_from_slice(l);
        labels.extend(std::iter::repeat_n(PAD, t - l.len()));
        loss_mask.extend_from_slice(m);
        loss_mask.extend(std::iter::repeat_n(0.0, t - m.len()));
    }
    let teacher = teacher_rows.map(|rows| {
        let mut flat = Vec::with_capacity(rows.len() * t);
        for r in rows {
            let n = r.len();
            flat.extend(r);
            flat.extend(std::iter::repeat_n(Vec::new(), t - n));
        }
        flat
    });
    Batch {
        encoder_input,
        decoder_input,
        labels,
        loss_mask,
        teacher,
    }
}

fn teacher_rows<'a>(
    chunk: impl Iterator<Item = &'a TrainingExample>,
    offset: impl Fn(&TrainingExample) -> usize,
    len: impl Fn(&TrainingExample) -> usize,
) -> Option<Vec<Vec<TopK>>> {
    let mut any = false;
    let rows: Vec<Vec<TopK>> = chunk
        .map(|e| {
            let mut row = vec![Vec::new(); offset(e)];
            match e.teacher() {
                Some(t) => {
                    any = true;
                    row.extend(t.iter().cloned());
                }
                None => row.extend(std::iter::repeat_n(Vec::new(), e.target().len())),
            }
            row.truncate(len(e));
            row
        })
        .collect();
    any.then_some(rows)
}

/// Encoder-decoder batches. Inputs are cut to `max_in` and targets to
/// `max_out` tokens, keeping the front; the decoder reads `BOS` followed
/// by the target shifted right.
pub fn pack_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    max_in: usize,
    max_out: usize,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let inputs: Vec<Vec<u32>> = chunk
                .iter()
                .map(|e| e.input()[..e.input().len().min(max_in)].to_vec())
                .collect();
            let targets: Vec<Vec<u32>> = chunk
                .iter()
                .map(|e| e.target()[..e.target().len().min(max_out)].to_vec())
                .collect();
            let dec_rows = targets
                .iter()
                .map(|t| std::iter::once(BOS).chain(t.iter().copied()).take(t.len()).collect())
                .collect();
            let masks = targets.iter().map(|t| vec![1.0; t.len()]).collect();
            let teacher = teacher_rows(chunk.iter(), |_| 0, |e| e.target().len().min(max_out));
            finish(
                Some(TokenBatch::from_rows(&inputs, PAD)),
                dec_rows,
                targets,
                masks,
                teacher,
            )
        })
        .collect()
}

/// Decoder-only batches over `input ++ target`, cut to `max_len` tokens.
/// The loss covers target positions, and input positions too when
/// `loss_on_input` is set.
pub fn pack_decoder_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    max_len: usize,
    loss_on_input: bool,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let mut dec_rows = Vec::new();
            let mut labels = Vec::new();
            let mut masks = Vec::new();
            for e in chunk {
                let full: Vec<u32> = e.input().iter().chain(e.target()).copied().take(max_len).collect();
                let n_in = e.input().len().min(full.len());
                let dec: Vec<u32> = std::iter::once(BOS).chain(full.iter().copied()).take(full.len()).collect();
                let mask: Vec<f32> = (0..full.len())
                    .map(|i| if loss_on_input || i >= n_in { 1.0 } else { 0.0 })
                    .collect();
                dec_rows.push(dec);
                labels.push(full);
                masks.push(mask);
            }
            let teacher = teacher_rows(
                chunk.iter(),
                |e| e.input().len(),
                |e| (e.input().len() + e.target().len()).min(max_len),
            );
            finish(None, dec_rows, labels, masks, teacher)
        })
        .collect()
}
