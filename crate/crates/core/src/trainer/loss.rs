//! Cross-entropy and top-k distillation losses.
//!
//! Both are written as one weighted sum over log-probabilities,
//! `-Σ_{i,j} W[i,j] · log_softmax(z_i)_j / M`, so that distillation with
//! `λ = 0` runs exactly the same arithmetic as plain cross-entropy.

use crate::autodiff::Var;
use crate::datapipe::TopK;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn check<F: Float>(logits: &Var<'_, F>, targets: &[u32], mask: &[f32]) -> Result<(usize, usize, f64)> {
    let shape = logits.shape();
    let v = *shape.last().ok_or_else(|| Error::Contract("logits must have a vocab axis".into()))?;
    let n = shape.iter().product::<usize>() / v.max(1);
    if targets.len() != n || mask.len() != n {
        return Err(Error::Contract(format!(
            "{n} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(t) = targets.iter().zip(mask).find(|(t, m)| **m > 0.0 && **t as usize >= v) {
        return Err(Error::Input(format!("target {} outside vocab of {v}", t.0)));
    }
    let m: f64 = mask.iter().map(|&x| x as f64).sum();
    if m <= 0.0 {
        return Err(Error::Contract("every position is masked".into()));
    }
    Ok((n, v, m))
}

fn weighted_nll<'t, F: Float>(logits: Var<'t, F>, weights: Vec<F>) -> Result<Var<'t, F>> {
    let w = logits.tape().constant(Tensor::new(logits.shape(), weights)?);
    logits.log_softmax()?.mul(w)?.sum()
}

/// Mean negative log-likelihood over positions with mask 1.
pub fn ce_loss<'t, F: Float>(logits: Var<'t, F>, targets: &[u32], mask: &[f32]) -> Result<Var<'t, F>> {
    let (n, v, m) = check(&logits, targets, mask)?;
    let mut w = vec![F::zero(); n * v];
    for i in 0..n {
        if mask[i] > 0.0 {
            w[i * v + targets[i] as usize] = F::of(-(mask[i] as f64) / m);
        }
    }
    weighted_nll(logits, w)
}

/// `λ · KL(teacher ‖ student) + (1 − λ) · CE`, averaged over unmasked
/// positions. Teacher top-k probabilities are renormalized to sum to 1.
/// Positions without teacher entries use cross-entropy alone.
pub fn kd_loss<'t, F: Float>(
    logits: Var<'t, F>,
    targets: &[u32],
    mask: &[f32],
    teacher: &[TopK],
    lambda: f64,
) -> Result<Var<'t, F>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("distillation weight {lambda} not in [0, 1]")));
    }
    let (n, v, m) = check(&logits, targets, mask)?;
    if teacher.len() != n {
        return Err(Error::Contract(format!(
            "{} teacher rows for {n} positions",
            teacher.len()
        )));
    }
    let mut w = vec![0f64; n * v];
    let mut entropy = 0f64;
    for i in 0..n {
        if mask[i] <= 0.0 {
            continue;
        }
        let scale = mask[i] as f64 / m;
        let row = &teacher[i];
        if row.is_empty() {
            w[i * v + targets[i] as usize] -= scale;
            continue;
        }
        w[i * v + targets[i] as usize] -= (1.0 - lambda) * scale;
        let z: f64 = row.iter().map(|&(_, p)| p as f64).sum();
        for &(id, p) in row {
            if id as usize >= v {
                return Err(Error::Input(format!("teacher token {id} outside vocab of {v}")));
            }
            let q = p as f64 / z;
            w[i * v + id as usize] -= lambda * scale * q;
            if q > 0.0 {
                entropy += lambda * scale * q * q.ln();
            }
        }
    }
    let loss = weighted_nll(logits, w.into_iter().map(F::of).collect())?;
    if lambda > 0.0 {
        let c = loss.tape().constant(Tensor::scalar(F::of(entropy)));
        loss.add(c)
    } else {
        Ok(loss)
    }
}
