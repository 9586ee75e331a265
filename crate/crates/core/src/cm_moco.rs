//! Cross-modal momentum contrast: the lockstep key queues, identity-aware
//! negative filtering, the symmetric contrastive loss and one training step.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model, Sgd};
use crate::objectives::{self, check_unit_rows, Reduction};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CmcConfig {
    pub tau_c: f64,
    pub reduction: Reduction,
}

impl Default for CmcConfig {
    fn default() -> Self {
        CmcConfig {
            tau_c: 0.07,
            reduction: Reduction::Mean,
        }
    }
}

impl CmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0) {
            return Err(Error::Config(format!("tau_c must be positive, got {}", self.tau_c)));
        }
        Ok(())
    }
}

/// Whether and how the contrastive term takes part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmcMode {
    /// Anchors against the positive key and the filtered queue.
    On,
    /// The contrastive term is dropped from the objective.
    Off,
    /// Only the positive logit is kept (no queue negatives).
    PositiveOnly,
}

impl CmcMode {
    pub fn name(self) -> &'static str {
        match self {
            CmcMode::On => "on",
            CmcMode::Off => "off",
            CmcMode::PositiveOnly => "positive_only",
        }
    }
}

impl std::str::FromStr for CmcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(CmcMode::On),
            "off" => Ok(CmcMode::Off),
            "positive_only" => Ok(CmcMode::PositiveOnly),
            other => Err(Error::Config(format!("cmc mode must be on, off or positive_only, got `{other}`"))),
        }
    }
}

/// One queued sample: its visual key, textual key and identity.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
    pub identity: u32,
}

/// Fixed-capacity FIFO of key pairs with their identities. The visual,
/// textual and identity queues are stored as one sequence of triples, so they
/// can only advance together.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        FeatureQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.identity).collect()
    }

    /// Restores a queue from stored entries (oldest first).
    pub fn from_entries(capacity: usize, dim: usize, entries: Vec<QueueEntry>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Config(format!(
                "{} queue entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        if entries.iter().any(|e| e.visual.len() != dim || e.textual.len() != dim) {
            return Err(Error::Config("queue entry dimension mismatch".into()));
        }
        Ok(FeatureQueue {
            capacity,
            dim,
            entries: entries.into(),
        })
    }

    /// Indices of entries whose identity is not among `batch_ids`, in queue
    /// order.
    pub fn filter_negatives(&self, batch_ids: &[u32]) -> Vec<usize> {
        let in_batch: HashSet<u32> = batch_ids.iter().copied().collect();
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !in_batch.contains(&e.identity))
            .map(|(i, _)| i)
            .collect()
    }

    /// Appends a batch of keys at the tail and evicts from the head down to
    /// capacity. A zero-capacity queue stays empty.
    pub fn enqueue_batch(&mut self, visual: &Tensor, textual: &Tensor, ids: &[u32]) -> Result<()> {
        let b = ids.len();
        if visual.rows() != b || textual.rows() != b {
            return Err(Error::shape("enqueue_batch", visual.shape(), textual.shape()));
        }
        if visual.cols() != self.dim || textual.cols() != self.dim {
            return Err(Error::shape("enqueue_batch", &[self.dim], &[visual.cols()]));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if b > self.capacity {
            return Err(Error::Config(format!(
                "batch of {b} exceeds queue capacity {}",
                self.capacity
            )));
        }
        for (i, &identity) in ids.iter().enumerate() {
            self.entries.push_back(QueueEntry {
                visual: visual.row(i).to_vec(),
                textual: textual.row(i).to_vec(),
                identity,
            });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// `D×n` matrix whose columns are the selected keys of one modality.
    fn key_columns(&self, indices: &[usize], textual: bool) -> Tensor {
        let n = indices.len();
        let mut data = vec![0.0; self.dim * n];
        for (c, &i) in indices.iter().enumerate() {
            let e = &self.entries[i];
            let key = if textual { &e.textual } else { &e.visual };
            for (d, v) in key.iter().enumerate() {
                data[d * n + c] = *v;
            }
        }
        Tensor::matrix(self.dim, n, data).expect("consistent shape")
    }
}

/// Cross-entropy with the positive at index 0, summed over anchors.
fn directional_term(tape: &mut Tape, anchor: Var, positive: Var, negatives: Option<Var>, inv_tau: f64) -> Result<Var> {
    let pos = tape.mul(anchor, positive)?;
    let pos = tape.sum_cols(pos)?;
    let logits = match negatives {
        Some(neg_cols) => {
            let neg = tape.matmul(anchor, neg_cols)?;
            tape.concat_cols(&[pos, neg])?
        }
        None => pos,
    };
    let logits = tape.scale(logits, inv_tau);
    let lse = tape.logsumexp_rows(logits)?;
    let pos_scaled = tape.scale(pos, inv_tau);
    let ce = tape.sub(lse, pos_scaled)?;
    Ok(tape.sum(ce))
}

/// Symmetric contrastive loss of query features against the partner
/// modality's keys, with queue entries of other identities as negatives.
///
/// Keys are detached before use, so only `vq` and `tq` receive gradients.
/// Returns `None` when the filtered queue is empty: the term contributes
/// exactly zero then.
#[allow(clippy::too_many_arguments)]
pub fn cmc_loss(
    tape: &mut Tape,
    vq: Var,
    tq: Var,
    vk: Var,
    tk: Var,
    ids: &[u32],
    queue: &FeatureQueue,
    cfg: &CmcConfig,
) -> Result<Option<Var>> {
    cfg.validate()?;
    let b = ids.len();
    for (name, v) in [("visual query", vq), ("textual query", tq), ("visual key", vk), ("textual key", tk)] {
        let t = tape.value(v);
        if t.rows() != b || t.cols() != queue.dim() || t.shape().len() != 2 {
            return Err(Error::shape("cmc_loss", t.shape(), &[b, queue.dim()]));
        }
        check_unit_rows(name, t)?;
    }
    let negatives = queue.filter_negatives(ids);
    if negatives.is_empty() {
        return Ok(None);
    }
    let vk = tape.detach(vk);
    let tk = tape.detach(tk);
    let textual_neg = tape.constant(queue.key_columns(&negatives, true));
    let visual_neg = tape.constant(queue.key_columns(&negatives, false));
    let inv_tau = 1.0 / cfg.tau_c;
    let image_anchored = directional_term(tape, vq, tk, Some(textual_neg), inv_tau)?;
    let text_anchored = directional_term(tape, tq, vk, Some(visual_neg), inv_tau)?;
    let total = tape.add(image_anchored, text_anchored)?;
    Ok(Some(match cfg.reduction {
        Reduction::Mean => tape.scale(total, 1.0 / b as f64),
        Reduction::Sum => total,
    }))
}

/// Contrastive term with the positive logit alone. The softmax then has a
/// single entry, so the value is identically zero.
fn cmc_positive_only(tape: &mut Tape, vq: Var, tq: Var, vk: Var, tk: Var, cfg: &CmcConfig) -> Result<Var> {
    let vk = tape.detach(vk);
    let tk = tape.detach(tk);
    let inv_tau = 1.0 / cfg.tau_c;
    let a = directional_term(tape, vq, tk, None, inv_tau)?;
    let b = directional_term(tape, tq, vk, None, inv_tau)?;
    tape.add(a, b)
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cmc: f64,
    pub align: f64,
    pub id: f64,
    pub total: f64,
}

/// Everything one step needs besides the model and queue.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub cmc: CmcConfig,
    pub cmc_mode: CmcMode,
    pub align: objectives::AlignConfig,
    pub momentum: f64,
}

/// One optimization step:
/// 1. query and key forward passes,
/// 2. the three losses against the queue as it was before this step,
/// 3. a gradient step on the query encoders and classifier,
/// 4. the momentum update of the key encoders,
/// 5. enqueueing this batch's keys.
pub fn train_step(
    batch: &Batch,
    model: &mut Model,
    queue: &mut FeatureQueue,
    optimizer: &Sgd,
    lr: f64,
    cfg: &StepConfig,
) -> Result<LossBreakdown> {
    let use_keys = match cfg.cmc_mode {
        CmcMode::On => queue.capacity() > 0,
        CmcMode::PositiveOnly => true,
        CmcMode::Off => false,
    };

    let mut tape = Tape::new();
    let vars = model.bind_query(&mut tape);
    let (vq, tq) = match model.forward(&mut tape, &vars, batch) {
        Err(e @ Error::Degenerate { .. }) => {
            let nan = LossBreakdown {
                cmc: f64::NAN,
                align: f64::NAN,
                id: f64::NAN,
                total: f64::NAN,
            };
            return Err(Error::NonFinite {
                epoch: 0,
                step: 0,
                component: format!("query features ({e})"),
                diagnostic: Box::new(crate::train::Diagnostic::capture(model, batch, nan)),
            });
        }
        other => other?,
    };

    let keys = if use_keys { Some(model.encode_keys(batch)?) } else { None };

    let cmc = match (&keys, cfg.cmc_mode) {
        (Some((vk, tk)), CmcMode::On) => {
            let (vk, tk) = (tape.constant(vk.clone()), tape.constant(tk.clone()));
            cmc_loss(&mut tape, vq, tq, vk, tk, &batch.identities, queue, &cfg.cmc)?
        }
        (Some((vk, tk)), CmcMode::PositiveOnly) => {
            let (vk, tk) = (tape.constant(vk.clone()), tape.constant(tk.clone()));
            Some(cmc_positive_only(&mut tape, vq, tq, vk, tk, &cfg.cmc)?)
        }
        _ => None,
    };
    let s = objectives::similarity_matrix(&mut tape, vq, tq)?;
    let align = objectives::align_loss(&mut tape, s, &cfg.align)?;
    let id = objectives::id_loss(&mut tape, vq, tq, &batch.labels, vars.head, model.head.epsilon)?;
    let total = objectives::total_loss(&mut tape, cmc, align, id)?;

    let losses = LossBreakdown {
        cmc: cmc.map_or(0.0, |c| tape.value(c).item()),
        align: tape.value(align).item(),
        id: tape.value(id).item(),
        total: tape.value(total).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: 0,
            component: format!("{losses:?}"),
            diagnostic: Box::new(crate::train::Diagnostic::capture(model, batch, losses)),
        });
    }

    let mut grads = tape.backward(total)?;
    optimizer.apply(model, &vars, &mut grads, lr);
    if !model.query_params_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: 0,
            component: "parameters after update".into(),
            diagnostic: Box::new(crate::train::Diagnostic::capture(model, batch, losses)),
        });
    }
    model.visual.momentum_update(cfg.momentum)?;
    model.text.momentum_update(cfg.momentum)?;
    if let (Some((vk, tk)), CmcMode::On) = (keys, cfg.cmc_mode) {
        queue.enqueue_batch(&vk, &tk, &batch.identities)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn unit_matrix(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..b).map(|_| unit(rng, d)).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn queue_with(ids: &[u32], d: usize, rng: &mut ChaCha8Rng) -> FeatureQueue {
        let entries = ids
            .iter()
            .map(|&identity| QueueEntry {
                visual: unit(rng, d),
                textual: unit(rng, d),
                identity,
            })
            .collect();
        FeatureQueue::from_entries(ids.len().max(1), d, entries).unwrap()
    }

    fn eval_cmc(v: &Tensor, t: &Tensor, vk: &Tensor, tk: &Tensor, ids: &[u32], q: &FeatureQueue, cfg: &CmcConfig) -> f64 {
        let mut tape = Tape::new();
        let vars = [v, t, vk, tk].map(|x| tape.constant(x.clone()));
        cmc_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], ids, q, cfg)
            .unwrap()
            .map_or(0.0, |l| tape.value(l).item())
    }

    #[test]
    fn filter_negatives_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = queue_with(&[1, 2, 3, 2], 2, &mut rng);
        assert_eq!(q.filter_negatives(&[2]), vec![0, 2]);
        assert_eq!(q.filter_negatives(&[7, 8]), vec![0, 1, 2, 3]);
        assert!(q.filter_negatives(&[1, 2, 3, 4]).is_empty());
    }

    #[test]
    fn empty_queue_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = unit_matrix(&mut rng, 3, 4);
        let t = unit_matrix(&mut rng, 3, 4);
        let q = FeatureQueue::new(8, 4);
        let mut tape = Tape::new();
        let vars = [&v, &t, &v, &t].map(|x| tape.constant(x.clone()));
        let out = cmc_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], &[0, 1, 2], &q, &CmcConfig::default()).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn equal_similarities_give_two_ln_two() {
        let e = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let q = FeatureQueue::from_entries(
            1,
            2,
            vec![QueueEntry {
                visual: vec![1.0, 0.0],
                textual: vec![1.0, 0.0],
                identity: 9,
            }],
        )
        .unwrap();
        for tau in [0.07, 0.5, 3.0] {
            let cfg = CmcConfig {
                tau_c: tau,
                reduction: Reduction::Mean,
            };
            let loss = eval_cmc(&e, &e, &e, &e, &[0], &q, &cfg);
            assert!((loss - 2.0 * LN_2).abs() <= 1e-12, "tau {tau}: {loss}");
        }
    }

    /// Direct evaluation of the two-directional contrastive sum.
    fn cmc_oracle(v: &Tensor, t: &Tensor, vk: &Tensor, tk: &Tensor, ids: &[u32], q: &FeatureQueue, tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let entries: Vec<&QueueEntry> = q.entries().filter(|e| !ids.contains(&e.identity)).collect();
        let mut total = 0.0;
        for i in 0..ids.len() {
            let pos = (dot(v.row(i), tk.row(i)) / tau).exp();
            let neg: f64 = entries.iter().map(|e| (dot(v.row(i), &e.textual) / tau).exp()).sum();
            total -= (pos / (pos + neg)).ln();
            let pos = (dot(t.row(i), vk.row(i)) / tau).exp();
            let neg: f64 = entries.iter().map(|e| (dot(t.row(i), &e.visual) / tau).exp()).sum();
            total -= (pos / (pos + neg)).ln();
        }
        total / ids.len() as f64
    }

    #[test]
    fn matches_oracle_and_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let cfg = CmcConfig::default();
        for _ in 0..20 {
            let v = unit_matrix(&mut rng, 2, d);
            let t = unit_matrix(&mut rng, 2, d);
            let vk = unit_matrix(&mut rng, 2, d);
            let tk = unit_matrix(&mut rng, 2, d);
            let ids = [3, 5];
            let q = queue_with(&[1, 3, 2, 4], d, &mut rng);
            let loss = eval_cmc(&v, &t, &vk, &tk, &ids, &q, &cfg);
            let oracle = cmc_oracle(&v, &t, &vk, &tk, &ids, &q, cfg.tau_c);
            assert!((loss - oracle).abs() <= 1e-12, "{loss} vs {oracle}");
        }

        let raw_v = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let raw_t = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let vk = unit_matrix(&mut rng, 2, d);
        let tk = unit_matrix(&mut rng, 2, d);
        let q = queue_with(&[1, 3, 2, 4], d, &mut rng);
        let report = grad_check(
            |tape, p| {
                let vq = tape.l2_normalize(p[0])?;
                let tq = tape.l2_normalize(p[1])?;
                let (kv, kt) = (tape.constant(vk.clone()), tape.constant(tk.clone()));
                Ok(cmc_loss(tape, vq, tq, kv, kt, &[3, 5], &q, &cfg)?.expect("negatives present"))
            },
            &[raw_v, raw_t],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn keys_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let q = queue_with(&[7, 8], d, &mut rng);
        let mut tape = Tape::new();
        let vars = [0; 4].map(|_| tape.param(unit_matrix(&mut rng, 2, d)));
        let loss = cmc_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], &[0, 1], &q, &CmcConfig::default())
            .unwrap()
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(vars[0]).unwrap().norm() > 0.0);
        assert!(grads.get(vars[1]).unwrap().norm() > 0.0);
        assert_eq!(grads.get(vars[2]).unwrap().norm(), 0.0);
        assert_eq!(grads.get(vars[3]).unwrap().norm(), 0.0);
    }

    #[test]
    fn non_unit_input_is_a_contract_violation() {
        let q = FeatureQueue::new(4, 2);
        let ok = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let bad = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let (o, b) = (tape.constant(ok), tape.constant(bad));
        let err = cmc_loss(&mut tape, b, o, o, o, &[0], &q, &CmcConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn permutation_invariance_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let cfg = CmcConfig::default();
        for _ in 0..20 {
            let v = unit_matrix(&mut rng, 3, d);
            let t = unit_matrix(&mut rng, 3, d);
            let vk = unit_matrix(&mut rng, 3, d);
            let tk = unit_matrix(&mut rng, 3, d);
            let ids = [0, 1, 2];
            let q = queue_with(&[5, 6, 1, 7, 8], d, &mut rng);
            let base = eval_cmc(&v, &t, &vk, &tk, &ids, &q, &cfg);

            let mut shuffled: Vec<QueueEntry> = q.entries().cloned().collect();
            shuffled.reverse();
            shuffled.swap(0, 2);
            let q2 = FeatureQueue::from_entries(5, d, shuffled).unwrap();
            assert!((base - eval_cmc(&v, &t, &vk, &tk, &ids, &q2, &cfg)).abs() <= 1e-12);

            let fewer: Vec<QueueEntry> = q.entries().take(2).cloned().collect();
            let q3 = FeatureQueue::from_entries(5, d, fewer).unwrap();
            assert!(base >= eval_cmc(&v, &t, &vk, &tk, &ids, &q3, &cfg));
        }
    }

    #[test]
    fn sum_reduction_scales_by_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let (v, t) = (unit_matrix(&mut rng, 4, d), unit_matrix(&mut rng, 4, d));
        let q = queue_with(&[9, 10], d, &mut rng);
        let mean = eval_cmc(&v, &t, &v, &t, &[0, 1, 2, 3], &q, &CmcConfig::default());
        let sum = eval_cmc(
            &v,
            &t,
            &v,
            &t,
            &[0, 1, 2, 3],
            &q,
            &CmcConfig {
                reduction: Reduction::Sum,
                ..CmcConfig::default()
            },
        );
        assert!((sum - 4.0 * mean).abs() <= 1e-12);
    }

    #[test]
    fn enqueue_fifo_cases() {
        let mut q = FeatureQueue::new(4, 1);
        let keys = |vals: &[f64]| Tensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap();
        q.enqueue_batch(&keys(&[1.0, 1.0]), &keys(&[1.0, 1.0]), &[10, 11]).unwrap();
        assert_eq!(q.identities(), vec![10, 11]);
        q.enqueue_batch(&keys(&[1.0, 1.0]), &keys(&[1.0, 1.0]), &[12, 13]).unwrap();
        q.enqueue_batch(&keys(&[1.0, 1.0]), &keys(&[1.0, 1.0]), &[14, 15]).unwrap();
        assert_eq!(q.identities(), vec![12, 13, 14, 15]);
        let err = q
            .enqueue_batch(&keys(&[1.0; 5]), &keys(&[1.0; 5]), &[0, 1, 2, 3, 4])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let mut zero = FeatureQueue::new(0, 1);
        zero.enqueue_batch(&keys(&[1.0, 1.0]), &keys(&[1.0, 1.0]), &[1, 2]).unwrap();
        assert!(zero.is_empty());
    }

    #[test]
    fn queue_length_is_min_of_pushed_and_capacity() {
        let (b, k) = (4, 12);
        let mut q = FeatureQueue::new(k, 1);
        let keys = Tensor::full(&[b, 1], 1.0);
        for n in 1..10 {
            q.enqueue_batch(&keys, &keys, &[0, 1, 2, 3]).unwrap();
            assert_eq!(q.len(), (n * b).min(k));
        }
    }
}
