//! Class-weighted detection loss and the attention sparsity penalty.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` inside the logs.
pub const PROB_EPS: f64 = 1e-7;

/// Occurrence rates below this are raised to it before weighting.
pub const RATE_EPS: f64 = 1e-3;

/// `w_j = (1/o_j) / Σ_k (1/o_k)` with rates clamped below at [`RATE_EPS`].
pub fn class_weights<T: Scalar>(rates: &[T]) -> Result<Tensor<T>> {
    if rates.is_empty() {
        return Err(Error::shape("no occurrence rates"));
    }
    if let Some(r) = rates.iter().find(|r| **r < T::zero() || **r > T::one()) {
        return Err(Error::Domain(format!("occurrence rate {r} outside [0, 1]")));
    }
    let floor = T::lit(RATE_EPS);
    let inv: Vec<T> = rates.iter().map(|&r| T::one() / r.max(floor)).collect();
    let total = inv.iter().fold(T::zero(), |a, &b| a + b);
    Tensor::new(&[rates.len()], inv.into_iter().map(|v| v / total).collect())
}

/// Column means of a binary n×m label matrix.
pub fn occurrence_rates<T: Scalar>(labels: &Tensor<T>) -> Result<Vec<T>> {
    let (n, m) = labels.as_matrix()?;
    let d = labels.data();
    let nt = T::from_usize(n).unwrap();
    Ok((0..m)
        .map(|j| (0..n).fold(T::zero(), |a, i| a + d[i * m + j]) / nt)
        .collect())
}

fn check_binary<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    if labels.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(Error::Domain("labels must be 0 or 1".into()))
    }
}

/// Sum over entries of `w_j [p log p̂ + (1 − p) log(1 − p̂)]`, negated, over
/// an n×m probability matrix. Dividing by the frame count is left to the
/// caller so per-frame tapes can share one normalizer.
pub fn weighted_bce_sum<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &Tensor<T>, w: &Tensor<T>) -> Result<Var> {
    let (n, m) = tape.value(probs).as_matrix()?;
    if labels.shape() != [n, m] || w.shape() != [m] {
        return Err(Error::shape(format!(
            "loss inputs disagree: probabilities {n}×{m}, labels {:?}, weights {:?}",
            labels.shape(),
            w.shape()
        )));
    }
    check_binary(labels)?;
    let eps = T::lit(PROB_EPS);
    let wd = w.data();
    let pos = Tensor::from_fn(&[n, m], |i| labels.data()[i] * wd[i % m]);
    let neg = Tensor::from_fn(&[n, m], |i| (T::one() - labels.data()[i]) * wd[i % m]);
    let clamped = tape.clamp(probs, eps, T::one() - eps)?;
    let log_p = tape.log(clamped)?;
    let comp = tape.affine(clamped, -T::one(), T::one())?;
    let log_q = tape.log(comp)?;
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.scalar_mul(total, -T::one())
}

/// `L^u = −(1/t) Σ_i Σ_j w_j [p_ij log p̂_ij + (1 − p_ij) log(1 − p̂_ij)]`.
pub fn au_detection_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &Tensor<T>, w: &Tensor<T>) -> Result<Var> {
    let t = tape.value(probs).shape()[0];
    let s = weighted_bce_sum(tape, probs, labels, w)?;
    tape.scalar_mul(s, T::one() / T::from_usize(t).unwrap())
}

/// `R(M)`: mean attention entry.
pub fn attention_regularizer<T: Scalar>(tape: &mut Tape<T>, map: Var) -> Result<Var> {
    tape.mean(map)
}

/// Numerator pieces of `L^a` for a run of frames, before division by the
/// sequence length: `L^u·t + (λ/m) Σ R(M_ij)`.
pub fn attention_loss_sum<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    maps: &[Vec<Var>],
    labels: &Tensor<T>,
    w: &Tensor<T>,
    lambda_r: T,
) -> Result<Var> {
    if lambda_r < T::zero() {
        return Err(Error::Config(format!("lambda_r must be non-negative, got {lambda_r}")));
    }
    let (n, m) = tape.value(probs).as_matrix()?;
    if maps.len() != n || maps.iter().any(|row| row.len() != m) {
        return Err(Error::shape("attention maps do not match the probability matrix"));
    }
    let bce = weighted_bce_sum(tape, probs, labels, w)?;
    if lambda_r == T::zero() {
        return Ok(bce);
    }
    let mut terms = Vec::with_capacity(n * m);
    for row in maps {
        for &map in row {
            terms.push(attention_regularizer(tape, map)?);
        }
    }
    let stacked = tape.concat(&terms, 0)?;
    let reg = tape.sum(stacked)?;
    let reg = tape.scalar_mul(reg, lambda_r / T::from_usize(m).unwrap())?;
    tape.add(bce, reg)
}

/// `L^a = L^u + λ^r · (1/(m·t)) Σ_i Σ_j R(M_ij)`.
pub fn attention_stage_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    maps: &[Vec<Var>],
    labels: &Tensor<T>,
    w: &Tensor<T>,
    lambda_r: T,
) -> Result<Var> {
    let t = maps.len().max(1);
    let s = attention_loss_sum(tape, probs, maps, labels, w, lambda_r)?;
    tape.scalar_mul(s, T::one() / T::from_usize(t).unwrap())
}
