//! The gradient-check suite: every loss and every encoder-into-loss
//! composition, each over many random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cm_moco::{cmc_loss, CmcConfig, FeatureQueue, QueueEntry};
use crate::encoders::{FrozenWordTable, TextConfig, TextEncoder, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with_fault, GradCheckReport};
use crate::objectives::{align_loss, id_loss, similarity_matrix, AlignConfig};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;
/// Amount added to every analytic gradient entry of the faulted operation.
pub const FAULT_DELTA: f64 = 1e-2;

pub const OPERATIONS: [&str; 5] = [
    "cmc_loss",
    "align_loss",
    "id_loss",
    "encode_text∘loss",
    "encode_visual∘loss",
];

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    /// Operation whose analytic gradients are deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperationResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("sized")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], 1.0);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// A random instance: its loss function and the point to check it at.
type Instance = (Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

fn cmc_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(1..4usize);
    let d = rng.random_range(2..5usize);
    let ids: Vec<u32> = (0..b).map(|_| rng.random_range(0..4)).collect();
    let n = rng.random_range(1..7usize);
    let entries: Vec<QueueEntry> = (0..n)
        .map(|i| QueueEntry {
            visual: unit_rows(rng, 1, d).into_data(),
            textual: unit_rows(rng, 1, d).into_data(),
            // Guarantee one negative survives the identity filter.
            identity: if i == 0 { 99 } else { rng.random_range(0..6) },
        })
        .collect();
    let queue = FeatureQueue::from_entries(n, d, entries).expect("consistent");
    let vk = unit_rows(rng, b, d);
    let tk = unit_rows(rng, b, d);
    let cfg = CmcConfig {
        tau_c: rng.random_range(0.2..1.0),
        ..CmcConfig::default()
    };
    let params = vec![uniform(rng, &[b, d], 1.0), uniform(rng, &[b, d], 1.0)];
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let vq = tape.l2_normalize(v[0])?;
        let tq = tape.l2_normalize(v[1])?;
        let vk = tape.constant(vk.clone());
        let tk = tape.constant(tk.clone());
        cmc_loss(tape, vq, tq, vk, tk, &ids, &queue, &cfg)?.ok_or_else(|| Error::Contract("empty negative set".into()))
    };
    (Box::new(f), params)
}

fn align_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(2..6usize);
    let s = uniform(rng, &[b, b], 1.0);
    let cfg = AlignConfig::default();
    let f = move |tape: &mut Tape, v: &[Var]| align_loss(tape, v[0], &cfg);
    (Box::new(f), vec![s])
}

fn id_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(1..5usize);
    let d = rng.random_range(2..5usize);
    let classes = rng.random_range(2..6usize);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let eps = rng.random_range(0.0..0.3);
    let params = vec![uniform(rng, &[b, d], 1.0), uniform(rng, &[b, d], 1.0), uniform(rng, &[d, classes], 2.0)];
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let vq = tape.l2_normalize(v[0])?;
        let tq = tape.l2_normalize(v[1])?;
        id_loss(tape, vq, tq, &labels, v[2], eps)
    };
    (Box::new(f), params)
}

/// Alignment plus identity loss of `(v, t)` with a fixed classifier.
fn joint_loss(tape: &mut Tape, v: Var, t: Var, labels: &[usize], head: &Tensor) -> Result<Var> {
    let s = similarity_matrix(tape, v, t)?;
    let a = align_loss(tape, s, &AlignConfig::default())?;
    let w = tape.constant(head.clone());
    let i = id_loss(tape, v, t, labels, w, 0.1)?;
    tape.add(a, i)
}

fn text_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(2..4usize);
    let cfg = TextConfig {
        vocab_size: 7,
        embed_dim: rng.random_range(2..4),
        hidden: rng.random_range(2..4),
        feature_dim: 3,
        max_len: 4,
    };
    let table = FrozenWordTable::new(rng.random(), cfg.vocab_size, cfg.embed_dim);
    let encoder = TextEncoder::new(cfg.clone());
    let shapes: Vec<Vec<usize>> = encoder.init(rng).tensors().iter().map(|t| t.shape().to_vec()).collect();
    let params: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s, 0.8)).collect();
    let seqs: Vec<Vec<u32>> = (0..b)
        .map(|_| (0..rng.random_range(1..=cfg.max_len)).map(|_| rng.random_range(0..7)).collect())
        .collect();
    let visual = unit_rows(rng, b, cfg.feature_dim);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let head = uniform(rng, &[cfg.feature_dim, 3], 2.0);
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let t = encoder.forward(tape, v, &table, &refs)?;
        let vis = tape.constant(visual.clone());
        joint_loss(tape, vis, t, &labels, &head)
    };
    (Box::new(f), params)
}

fn visual_instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(2..4usize);
    let cfg = VisualConfig {
        input_dim: rng.random_range(2..5),
        hidden: vec![rng.random_range(2..5)],
        feature_dim: 3,
    };
    let encoder = VisualEncoder::new(cfg.clone());
    let shapes: Vec<Vec<usize>> = encoder.init(rng).tensors().iter().map(|t| t.shape().to_vec()).collect();
    let params: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s, 1.0)).collect();
    let x = uniform(rng, &[b, cfg.input_dim], 1.0);
    let text = unit_rows(rng, b, cfg.feature_dim);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let head = uniform(rng, &[cfg.feature_dim, 3], 2.0);
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let input = tape.constant(x.clone());
        let vis = encoder.forward(tape, v, input)?;
        let t = tape.constant(text.clone());
        joint_loss(tape, vis, t, &labels, &head)
    };
    (Box::new(f), params)
}

/// Checks one operation over `instances` random instances.
pub fn check_operation(name: &str, seed: u64, instances: usize, fault: bool) -> Result<OperationResult> {
    let make: fn(&mut ChaCha8Rng) -> Instance = match name {
        "cmc_loss" => cmc_instance,
        "align_loss" => align_instance,
        "id_loss" => id_instance,
        "encode_text∘loss" => text_instance,
        "encode_visual∘loss" => visual_instance,
        other => return Err(Error::Config(format!("unknown operation `{other}`"))),
    };
    let op_index = OPERATIONS.iter().position(|&o| o == name).expect("listed") as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(op_index);
    let mut result = OperationResult {
        name: name.to_string(),
        instances,
        coordinates: 0,
        max_rel_error: 0.0,
        passed: true,
    };
    for i in 0..instances {
        let (f, params) = make(&mut rng);
        let delta = if fault { FAULT_DELTA } else { 0.0 };
        let report: GradCheckReport = grad_check_with_fault(f, &params, STEP, TOLERANCE, delta)
            .map_err(|e| Error::GradCheck(format!("{name}, instance {i}: {e}")))?;
        result.coordinates += report.coordinates;
        result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
        result.passed &= report.passed;
    }
    Ok(result)
}

/// Runs every operation of the suite.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OperationResult>> {
    if let Some(f) = &cfg.fault {
        if !OPERATIONS.contains(&f.as_str()) {
            return Err(Error::Config(format!("unknown operation `{f}` for fault injection")));
        }
    }
    OPERATIONS
        .iter()
        .map(|&op| check_operation(op, cfg.seed, cfg.instances, cfg.fault.as_deref() == Some(op)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let results = run_suite(&SuiteConfig {
            seed: 3,
            instances: 5,
            fault: None,
        })
        .unwrap();
        assert_eq!(results.len(), 5);
        for r in &results {
            assert!(r.passed, "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn fault_is_caught_and_named() {
        let results = run_suite(&SuiteConfig {
            seed: 3,
            instances: 2,
            fault: Some("cmc_loss".into()),
        })
        .unwrap();
        let failing: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failing, vec!["cmc_loss"]);
    }

    #[test]
    fn unknown_operation() {
        assert!(check_operation("nope", 0, 1, false).is_err());
        assert!(run_suite(&SuiteConfig {
            fault: Some("nope".into()),
            ..SuiteConfig::default()
        })
        .is_err());
    }
}
