//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormMode, OpKind, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with step `h`. `f` must be deterministic.
pub fn grad_check<F>(mut f: F, point: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut eval = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(with_grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(point, true)?;
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].get(j).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values bounded away from zero, so kinks (relu, max) are not straddled by `h`.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values on a coarse grid plus jitter, so maxima are well separated.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut slots: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        slots.swap(i, j);
    }
    let data = slots
        .into_iter()
        .map(|s| s - 0.05 * n as f64 + rng.random_range(-0.01..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects an arbitrary-shaped output onto a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Runs [`grad_check`] on a randomly generated instance of `kind`.
///
/// Every operand that the op differentiates is a checked input; outputs are
/// reduced to a scalar through a fixed random projection.
pub fn check_op(kind: OpKind, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9));
    macro_rules! projected {
        ($out_shape:expr, $points:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let w = rand_tensor(&mut rng, &$out_shape);
            grad_check(
                |$tape, $v| {
                    let out = $body?;
                    project($tape, out, &w)
                },
                &$points,
                h,
                tol,
            )
        }};
    }
    match kind {
        OpKind::MatMul => {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let bt = rand_tensor(&mut rng, &[5, 4]);
            let r1 = projected!([3, 2], [a.clone(), b], |t, v| t.matmul(v[0], v[1]))?;
            let r2 = projected!([3, 5], [a, bt], |t, v| t.matmul_nt(v[0], v[1]))?;
            Ok(merge(r1, r2))
        }
        OpKind::Add => {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[3, 4]);
            let bias = rand_tensor(&mut rng, &[4]);
            let r1 = projected!([3, 4], [a.clone(), b], |t, v| t.add(v[0], v[1]))?;
            let r2 = projected!([3, 4], [a, bias], |t, v| t.add(v[0], v[1]))?;
            Ok(merge(r1, r2))
        }
        OpKind::Mul => {
            let pts = [rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[2, 5])];
            projected!([2, 5], pts, |t, v| t.mul(v[0], v[1]))
        }
        OpKind::Scale => {
            let pts = [rand_tensor(&mut rng, &[6])];
            let f = rng.random_range(-2.0..2.0);
            projected!([6], pts, |t, v| t.scale(v[0], f))
        }
        OpKind::Sigmoid => {
            let pts = [rand_tensor(&mut rng, &[2, 3])];
            projected!([2, 3], pts, |t, v| t.sigmoid(v[0]))
        }
        OpKind::Tanh => {
            let pts = [rand_tensor(&mut rng, &[2, 3])];
            projected!([2, 3], pts, |t, v| t.tanh(v[0]))
        }
        OpKind::Relu => {
            let pts = [rand_away_from_zero(&mut rng, &[3, 3])];
            projected!([3, 3], pts, |t, v| t.relu(v[0]))
        }
        OpKind::Concat => {
            let a = rand_tensor(&mut rng, &[2, 3]);
            let b = rand_tensor(&mut rng, &[2, 2]);
            let c = rand_tensor(&mut rng, &[1, 3]);
            let r1 = projected!([2, 5], [a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 1))?;
            let r2 = projected!([3, 3], [a, c], |t, v| t.concat(&[v[0], v[1]], 0))?;
            Ok(merge(r1, r2))
        }
        OpKind::Slice => {
            let pts = [rand_tensor(&mut rng, &[3, 6])];
            projected!([3, 2], pts, |t, v| t.slice(v[0], 1, 3, 2))
        }
        OpKind::Reshape => {
            let pts = [rand_tensor(&mut rng, &[2, 6])];
            projected!([3, 4], pts, |t, v| t.reshape(v[0], &[3, 4]))
        }
        OpKind::EmbeddingLookup => {
            let pts = [rand_tensor(&mut rng, &[5, 3])];
            let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            projected!([6, 3], pts, |t, v| t.embedding(v[0], &ids))
        }
        OpKind::DropoutMaskApply => {
            let pts = [rand_tensor(&mut rng, &[4, 3])];
            let mask: Vec<f64> = super::dropout_mask(12, 0.5, &mut rng);
            projected!([4, 3], pts, |t, v| t.dropout(v[0], mask.clone()))
        }
        OpKind::BatchNorm => {
            let x = rand_tensor(&mut rng, &[8, 3]);
            let g = Tensor::uniform([3], 0.5, 1.5, &mut rng);
            let b = rand_tensor(&mut rng, &[3]);
            let r1 = projected!([8, 3], [x.clone(), g.clone(), b.clone()], |t, v| t
                .batch_norm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5))?;
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
            let r2 = projected!([8, 3], [x, g, b], |t, v| t.batch_norm(
                v[0],
                v[1],
                v[2],
                BatchNormMode::Eval {
                    mean: &mean,
                    var: &var
                },
                1e-5
            ))?;
            Ok(merge(r1, r2))
        }
        OpKind::MaxOverTime => {
            let pts = [rand_distinct(&mut rng, &[4, 2, 3])];
            let mask = [true, true, false, true, true, true, true, false];
            projected!([2, 3], pts, |t, v| t.max_over_time(v[0], Some(&mask)))
        }
        OpKind::MeanOverTime => {
            let pts = [rand_tensor(&mut rng, &[4, 2, 3])];
            let mask = [false, true, true, true, true, false, true, true];
            projected!([2, 3], pts, |t, v| t.mean_over_time(v[0], Some(&mask)))
        }
        OpKind::SumOverTime => {
            let pts = [rand_tensor(&mut rng, &[3, 2, 2])];
            let mask = [false, true, true, true, true, true];
            projected!([2, 2], pts, |t, v| t.sum_over_time(v[0], Some(&mask)))
        }
        OpKind::Maximum => {
            let both = rand_distinct(&mut rng, &[2, 8]);
            let a = Tensor::new([2, 4], both.data()[..8].to_vec())?;
            let b = Tensor::new([2, 4], both.data()[8..].to_vec())?;
            projected!([2, 4], [a, b], |t, v| t.maximum(v[0], v[1]))
        }
        OpKind::ScaleRows => {
            let pts = [rand_tensor(&mut rng, &[3, 4])];
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            projected!([3, 4], pts, |t, v| t.scale_rows(v[0], &s))
        }
        OpKind::SoftmaxCrossEntropy => {
            let pts = [rand_tensor(&mut rng, &[4, 5])];
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            grad_check(
                |t, v| t.softmax_cross_entropy(v[0], &targets),
                &pts,
                h,
                tol,
            )
        }
        OpKind::Sum => {
            let pts = [rand_tensor(&mut rng, &[2, 3])];
            grad_check(|t, v| t.sum(v[0]), &pts, h, tol)
        }
    }
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let (max_rel_error, worst) = if b.max_rel_error > a.max_rel_error {
        (b.max_rel_error, b.worst)
    } else {
        (a.max_rel_error, a.worst)
    };
    GradCheckReport {
        passed: a.passed && b.passed,
        max_rel_error,
        worst,
        checked: a.checked + b.checked,
    }
}
