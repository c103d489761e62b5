//! Source and target objectives.
//!
//! The graph contrastive loss pairs view 1 of subject `n` with view 2 of the
//! same subject in the numerator and with view 2 of every *other* subject in
//! the denominator; the positive pair is not part of the denominator, so the
//! loss may be negative. Per-subject terms lie in
//! `[ln(N-1) - 2/τ, ln(N-1) + 2/τ]`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Two augmented views of the same `N` subjects.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[N, d]` embeddings of the first sub-sequence per subject.
    pub view1: Tensor,
    /// `[N, d]` embeddings of the second sub-sequence per subject.
    pub view2: Tensor,
    pub temperature: f64,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Records the contrastive loss of two `[N, d]` view embeddings on `tape`.
pub fn contrastive_loss(tape: &Tape, view1: Var, view2: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let s1 = tape.shape(view1);
    let s2 = tape.shape(view2);
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape(
            "contrastive_loss",
            format!("views {s1:?} and {s2:?}"),
        ));
    }
    let n = s1[0];
    if n < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs at least 2 subjects, got {n}"
        )));
    }
    let sim = tape.cosine_similarity(view1, view2)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let eye = tape.constant(Tensor::eye(n));
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let off_diag = tape.constant(mask);
    let positives = tape.mul(logits, eye)?;
    let positive = tape.sum_axis(positives, 1)?;
    let exp = tape.exp(logits)?;
    let negatives = tape.mul(exp, off_diag)?;
    let denom = tape.sum_axis(negatives, 1)?;
    let log_denom = tape.log(denom)?;
    let per_subject = tape.sub(log_denom, positive)?;
    tape.mean(per_subject)
}

/// Value of the contrastive loss for a concrete batch.
pub fn graph_contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    for view in [&batch.view1, &batch.view2] {
        if view.rank() == 2 && view.data().chunks(view.shape()[1].max(1)).any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid("contrastive batch has a zero-norm embedding"));
        }
    }
    let tape = Tape::new();
    let v1 = tape.constant(batch.view1.clone());
    let v2 = tape.constant(batch.view2.clone());
    let loss = contrastive_loss(&tape, v1, v2, batch.temperature)?;
    let value = tape.value(loss).item()?;
    Ok(value)
}

/// Records the mean softmax cross-entropy of `[N, C]` logits.
pub fn cross_entropy_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} with {} labels", labels.len()),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!(
            "label {bad} is not a valid class index for {c} classes"
        )));
    }
    // Max-shift for stability; log-sum-exp is invariant to it, so it is a constant.
    let values = tape.value(logits);
    let mut shift = Tensor::zeros(&[n, c]);
    let mut onehot = Tensor::zeros(&[n, c]);
    for (i, &label) in labels.iter().enumerate() {
        let row = &values.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.data_mut()[i * c..(i + 1) * c].fill(-max);
        onehot.data_mut()[i * c + label] = 1.0;
    }
    let shifted = tape.add(logits, tape.constant(shift))?;
    let exp = tape.exp(shifted)?;
    let total = tape.sum_axis(exp, 1)?;
    let lse = tape.log(total)?;
    let picked = tape.mul(shifted, tape.constant(onehot))?;
    let picked = tape.sum_axis(picked, 1)?;
    let per_sample = tape.sub(lse, picked)?;
    tape.mean(per_sample)
}

/// Value of the mean cross-entropy for concrete logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = cross_entropy_loss(&tape, l, labels)?;
    let value = tape.value(loss).item()?;
    Ok(value)
}

/// `L_S + λ·L_T`.
pub fn total_meta_loss(source: f64, target: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    source + lambda * target
}

/// Tape form of [`total_meta_loss`].
pub fn combine_losses(tape: &Tape, source: Var, target: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(target, lambda)?;
    tape.add(source, weighted)
}
