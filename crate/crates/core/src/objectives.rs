//! Auxiliary objectives: the logistic alignment loss over the in-batch
//! cross-modal similarity matrix, and the label-smoothed identity loss with a
//! classifier shared by both modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Rows entering a similarity computation must be unit-norm to this
/// tolerance.
pub const ROW_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub tau_p: f64,
    pub tau_n: f64,
    pub alpha: f64,
    pub beta: f64,
    /// How the off-diagonal terms of one anchor are aggregated.
    pub negatives: Reduction,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tau_p: 10.0,
            tau_n: 40.0,
            alpha: 0.6,
            beta: 0.4,
            negatives: Reduction::Mean,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p > 0.0 && self.tau_n > 0.0) {
            return Err(Error::Config("align temperatures must be positive".into()));
        }
        if !(0.0 <= self.beta && self.beta < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "align margins must satisfy 0 <= beta < alpha <= 1 (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Shared `D×N` identity classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub epsilon: f64,
}

impl ClassifierHead {
    pub fn new(weight: Tensor, epsilon: f64) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape("classifier", weight.shape(), &[0, 0]));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
        }
        Ok(ClassifierHead { weight, epsilon })
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

pub(crate) fn check_unit_rows(what: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > ROW_NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// `S[i][j] = Vq_i · Tq_j`.
pub fn similarity_matrix(tape: &mut Tape, vq: Var, tq: Var) -> Result<Var> {
    if tape.value(vq).shape() != tape.value(tq).shape() {
        return Err(Error::shape("similarity_matrix", tape.value(vq).shape(), tape.value(tq).shape()));
    }
    check_unit_rows("visual query", tape.value(vq))?;
    check_unit_rows("textual query", tape.value(tq))?;
    let tt = tape.transpose(tq)?;
    tape.matmul(vq, tt)
}

/// Logistic alignment loss over a `B×B` similarity matrix.
///
/// Per anchor `i`: `log(1 + e^{−τ_p(S_ii − α)})` plus the aggregate over
/// `j ≠ i` of `log(1 + e^{τ_n(S_ij − β)})`. The total is `(2/B)·Σ_i`, the 2
/// accounting for the textual side, whose computation is identical.
pub fn align_loss(tape: &mut Tape, s: Var, cfg: &AlignConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("align_loss", &shape, &[shape[0], shape[0]]));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::Contract("align_loss needs at least two pairs".into()));
    }
    let scale = 2.0 / b as f64;
    let neg_weight = match cfg.negatives {
        Reduction::Mean => scale / (b - 1) as f64,
        Reduction::Sum => scale,
    };
    let mut pos_mask = Tensor::zeros(&[b, b]);
    let mut neg_mask = Tensor::full(&[b, b], neg_weight);
    for i in 0..b {
        pos_mask.data_mut()[i * b + i] = scale;
        neg_mask.data_mut()[i * b + i] = 0.0;
    }

    let shifted = tape.add_scalar(s, -cfg.alpha);
    let pos_arg = tape.scale(shifted, -cfg.tau_p);
    let pos = tape.softplus(pos_arg);
    let shifted = tape.add_scalar(s, -cfg.beta);
    let neg_arg = tape.scale(shifted, cfg.tau_n);
    let neg = tape.softplus(neg_arg);

    let pm = tape.constant(pos_mask);
    let nm = tape.constant(neg_mask);
    let pos = tape.mul(pos, pm)?;
    let neg = tape.mul(neg, nm)?;
    let pos = tape.sum(pos);
    let neg = tape.sum(neg);
    tape.add(pos, neg)
}

/// Smoothed one-hot targets: `1−ε+ε/N` on the true class, `ε/N` elsewhere.
fn smoothed_targets(labels: &[usize], classes: usize, epsilon: f64) -> Result<Tensor> {
    let mut t = Tensor::full(&[labels.len(), classes], epsilon / classes as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Contract(format!("identity label {label} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + label] = 1.0 - epsilon + epsilon / classes as f64;
    }
    Ok(t)
}

fn smoothed_ce(tape: &mut Tape, features: Var, head: Var, targets: &Tensor) -> Result<Var> {
    let logits = tape.matmul(features, head)?;
    let lse = tape.logsumexp_rows(logits)?;
    let t = tape.constant(targets.clone());
    let weighted = tape.mul(logits, t)?;
    let lse = tape.sum(lse);
    let weighted = tape.sum(weighted);
    let total = tape.sub(lse, weighted)?;
    Ok(tape.scale(total, 1.0 / targets.rows() as f64))
}

/// Label-smoothed cross-entropy of both modalities through the shared head,
/// each averaged over the batch, then summed.
pub fn id_loss(tape: &mut Tape, vq: Var, tq: Var, labels: &[usize], head: Var, epsilon: f64) -> Result<Var> {
    let classes = tape.value(head).cols();
    if tape.value(vq).rows() != labels.len() || tape.value(tq).rows() != labels.len() {
        return Err(Error::shape("id_loss", tape.value(vq).shape(), &[labels.len()]));
    }
    let targets = smoothed_targets(labels, classes, epsilon)?;
    let lv = smoothed_ce(tape, vq, head, &targets)?;
    let lt = smoothed_ce(tape, tq, head, &targets)?;
    tape.add(lv, lt)
}

/// Unweighted sum of the three components; a missing contrastive term
/// contributes nothing.
pub fn total_loss(tape: &mut Tape, cmc: Option<Var>, align: Var, id: Var) -> Result<Var> {
    let head = match cmc {
        Some(c) => tape.add(c, align)?,
        None => align,
    };
    tape.add(head, id)
}

/// Alignment loss value and `∂L/∂S` for a plain matrix.
pub fn align_loss_value(s: &Tensor, cfg: &AlignConfig) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let sv = tape.param(s.clone());
    let out = align_loss(&mut tape, sv, cfg)?;
    let mut grads = tape.backward(out)?;
    Ok((tape.value(out).item(), grads.take(sv).expect("trainable leaf")))
}

/// Identity loss value for plain feature matrices and head weights.
pub fn id_loss_value(vq: &Tensor, tq: &Tensor, labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(vq.clone());
    let t = tape.constant(tq.clone());
    let w = tape.constant(head.weight.clone());
    let out = id_loss(&mut tape, v, t, labels, w, head.epsilon)?;
    Ok(tape.value(out).item())
}
