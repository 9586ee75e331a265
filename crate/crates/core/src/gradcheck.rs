//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, params: &[Tensor], trainable: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if trainable {
                tape.param(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences of step `step` at every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, params, step, tol, 0.0)
}

/// As [`grad_check`], but adds `fault` to every analytic gradient entry
/// before comparing. Used to verify that the checker actually catches errors.
pub fn grad_check_with_fault<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    tol: f64,
    fault: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, params, true)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::GradCheck("base point".into()));
    }
    let mut grads = tape.backward(out)?;
    if fault != 0.0 {
        for v in &vars {
            grads.corrupt(*v, fault);
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        passed: true,
    };
    let mut shifted: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            let mut eval_at = |x: f64| -> Result<f64> {
                shifted[p].data_mut()[i] = x;
                let location = || format!("parameter {p}, element {i}");
                let (tape, _, out) = evaluate(&f, &shifted, false)
                    .map_err(|e| Error::GradCheck(format!("{} ({e})", location())))?;
                let v = tape.value(out).item();
                if !v.is_finite() {
                    return Err(Error::GradCheck(location()));
                }
                Ok(v)
            };
            let plus = eval_at(original + step)?;
            let minus = eval_at(original - step)?;
            shifted[p].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p, i));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let w = random(&mut rng, &[3, 2]);
        let report = grad_check(
            |tape, p| {
                let m = tape.matmul(p[0], p[1])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(m, wv)?;
                Ok(tape.sum(prod))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn l2_normalize_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[8]);
        let w = random(&mut rng, &[8]);
        let report = grad_check(
            |tape, p| {
                let y = tape.l2_normalize(p[0])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(y, wv)?;
                Ok(tape.sum(prod))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    /// Every differentiable primitive against central differences on 100
    /// random instances each.
    #[test]
    fn all_primitives_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for instance in 0..100 {
            let x = random(&mut rng, &[3, 4]);
            let y = random(&mut rng, &[3, 4]);
            let bias = random(&mut rng, &[4]);
            let w = random(&mut rng, &[4, 3]);
            let s = random(&mut rng, &[1]);
            let pos = Tensor::new(vec![3, 4], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
            let report = grad_check(
                |tape, p| {
                    let (x, y, bias, w, s, pos) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                    let terms = [
                        tape.tanh(x),
                        tape.sigmoid(y),
                        tape.exp(x),
                        tape.log(pos)?,
                        tape.softplus(y),
                        tape.add(x, y)?,
                        tape.sub(x, y)?,
                        tape.mul(x, y)?,
                        tape.mul(x, s)?,
                        tape.scale(y, -0.7),
                        tape.add_scalar(x, 0.3),
                        tape.add_row(x, bias)?,
                        tape.l2_normalize(y)?,
                    ];
                    let mixed = tape.matmul(x, w)?;
                    let mixed_t = tape.transpose(mixed)?;
                    let lse = tape.logsumexp_rows(mixed_t)?;
                    let pooled = tape.max_pool_over_time(y)?;
                    let maxed = tape.max_of(&[x, y])?;
                    let cat = tape.concat_cols(&[x, y])?;
                    let stacked = tape.concat_rows(&[x, y])?;
                    let picked = tape.select_rows(stacked, &[5, 0, 0, 2])?;
                    let rowsum = tape.sum_cols(picked)?;
                    let mut total = tape.sum(lse);
                    for v in terms.into_iter().chain([pooled, maxed, cat, rowsum]) {
                        let sq = tape.mul(v, v)?;
                        let sv = tape.sum(sq);
                        total = tape.add(total, sv)?;
                    }
                    Ok(total)
                },
                &[x, y, bias, w, s, pos],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "instance {instance}: {report:?}");
        }
    }

    #[test]
    fn fault_injection_is_detected() {
        let report = grad_check_with_fault(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                Ok(tape.sum(sq))
            },
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
            1e-4,
            0.5,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_evaluation_aborts() {
        let err = grad_check(
            |tape, p| {
                let l = tape.log(p[0])?;
                Ok(tape.sum(l))
            },
            &[Tensor::vector(vec![1e-6])],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::GradCheck(loc) if loc.contains("parameter 0, element 0")), "{err}");
    }
}
