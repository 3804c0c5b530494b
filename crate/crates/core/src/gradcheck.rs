//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchNormState, ConvSpec, Graph, Mode, Result, Tensor, TensorError, Var};

/// Floor on the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Flat index where the largest error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because a probe crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Compares the tape gradient of a scalar-valued `f` at `point` against
/// central differences with step `eps`, over every element of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_at(f, point, eps, &coords)
}

/// Like [`grad_check`] but only probes the listed flat indices.
pub fn grad_check_at<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let x = graph.leaf(point.clone(), true);
    let y = f(&mut graph, x)?;
    let out = graph.value(y);
    if out.len() != 1 {
        return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
    }
    let grads = graph.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };
    compare(
        analytic.data(),
        coords,
        |i, delta| {
            let mut p = point.clone();
            p.data_mut()[i] += delta;
            eval(p)
        },
        eps,
    )
}

/// Shared core: `eval(i, delta)` returns the function value with coordinate
/// `i` shifted by `delta`; `analytic[i]` is the claimed derivative.
pub fn compare<E>(analytic: &[f64], coords: &[usize], mut eval: E, eps: f64) -> Result<GradCheckReport>
where
    E: FnMut(usize, f64) -> Result<f64>,
{
    compare_piecewise(analytic, coords, |i, d| Ok((eval(i, d)?, 0)), 0, eps)
}

/// [`compare`] for piecewise-smooth functions: `eval` also returns a
/// fingerprint of the smooth piece it landed on, and coordinates whose
/// probes leave the piece `base` of the unperturbed point are skipped.
pub fn compare_piecewise<E>(
    analytic: &[f64],
    coords: &[usize],
    mut eval: E,
    base: u64,
    eps: f64,
) -> Result<GradCheckReport>
where
    E: FnMut(usize, f64) -> Result<(f64, u64)>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in coords {
        let (plus, piece_plus) = eval(i, eps)?;
        let (minus, piece_minus) = eval(i, -eps)?;
        if !plus.is_finite() || !minus.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite("grad_check"));
        }
        if piece_plus != base || piece_minus != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Result of checking one layer op over several random trials.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    /// Worst report across trials and differentiated inputs.
    pub report: GradCheckReport,
    pub trials: usize,
}

fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut out: Option<GradCheckReport> = None;
    for r in reports {
        out = Some(match out {
            None => r,
            Some(o) => {
                let (checked, skipped) = (o.checked + r.checked, o.skipped + r.skipped);
                let mut w = if r.max_rel_error > o.max_rel_error { r } else { o };
                w.checked = checked;
                w.skipped = skipped;
                w
            }
        });
    }
    out.expect("at least one report")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder of distinct values, so max-pool windows have no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::from_fn(shape, |i| i as f64 * 0.01 - 0.5);
    t.data_mut().shuffle(rng);
    t
}

/// `Σ y ⊙ R` for a fixed random `R` derived from `seed`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.leaf(r, false);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Checks `op` with respect to each of `inputs` in turn, holding the others fixed.
fn check_inputs<F>(inputs: &[Tensor], eps: f64, seed: u64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let reports = (0..inputs.len())
        .map(|k| {
            grad_check(
                |g, x| {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == k { x } else { g.leaf(t.clone(), false) })
                        .collect();
                    let y = op(g, &vars)?;
                    project(g, y, seed)
                },
                &inputs[k],
                eps,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(worst(reports))
}

type OpCase = fn(&mut ChaCha8Rng, f64, u64) -> Result<GradCheckReport>;

const OP_CASES: &[(&str, OpCase)] = &[
    ("conv2d", |rng, eps, seed| {
        let spec = ConvSpec::same(3, 4, 3, 3).with_stride(2).with_bias(true);
        let inputs = [
            uniform(rng, &[2, 3, 6, 6], -1.0, 1.0),
            uniform(rng, &[4, 3, 3, 3], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ];
        check_inputs(&inputs, eps, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec))
    }),
    ("conv2d_asymmetric", |rng, eps, seed| {
        let spec = ConvSpec::same(2, 3, 1, 3);
        let inputs = [
            uniform(rng, &[2, 2, 4, 5], -1.0, 1.0),
            uniform(rng, &[3, 2, 1, 3], -1.0, 1.0),
        ];
        check_inputs(&inputs, eps, seed, |g, v| g.conv2d(v[0], v[1], None, spec))
    }),
    ("maxpool2d", |rng, eps, seed| {
        let inputs = [distinct(rng, &[2, 2, 7, 7])];
        check_inputs(&inputs, eps, seed, |g, v| g.maxpool2d(v[0], 3, 2))
    }),
    ("avgpool2d", |rng, eps, seed| {
        let inputs = [uniform(rng, &[2, 2, 5, 5], -1.0, 1.0)];
        check_inputs(&inputs, eps, seed, |g, v| g.avgpool2d(v[0], 3, 1, 1))
    }),
    ("global_avgpool", |rng, eps, seed| {
        let inputs = [uniform(rng, &[2, 3, 4, 4], -1.0, 1.0)];
        check_inputs(&inputs, eps, seed, |g, v| g.global_avgpool(v[0]))
    }),
    ("relu", |rng, eps, seed| {
        let inputs = [off_kink(rng, &[2, 3, 4, 4])];
        check_inputs(&inputs, eps, seed, |g, v| Ok(g.relu(v[0])))
    }),
    ("batchnorm_train", |rng, eps, seed| {
        let inputs = [
            uniform(rng, &[3, 2, 3, 3], -2.0, 2.0),
            uniform(rng, &[2], 0.5, 1.5),
            uniform(rng, &[2], -0.5, 0.5),
        ];
        let state = BatchNormState::new(2);
        check_inputs(&inputs, eps, seed, |g, v| {
            Ok(g.batchnorm(v[0], v[1], v[2], &state, Mode::Train)?.0)
        })
    }),
    ("batchnorm_eval", |rng, eps, seed| {
        let inputs = [
            uniform(rng, &[3, 2, 3, 3], -2.0, 2.0),
            uniform(rng, &[2], 0.5, 1.5),
            uniform(rng, &[2], -0.5, 0.5),
        ];
        let mut state = BatchNormState::new(2);
        state.running_mean = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        state.running_var = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        check_inputs(&inputs, eps, seed, |g, v| {
            Ok(g.batchnorm(v[0], v[1], v[2], &state, Mode::Eval)?.0)
        })
    }),
    ("concat_channels", |rng, eps, seed| {
        let inputs = [
            uniform(rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
        ];
        check_inputs(&inputs, eps, seed, |g, v| g.concat_channels(v))
    }),
    ("slice_channels", |rng, eps, seed| {
        let inputs = [uniform(rng, &[2, 5, 3, 3], -1.0, 1.0)];
        check_inputs(&inputs, eps, seed, |g, v| g.slice_channels(v[0], 1, 4))
    }),
    ("residual_add_scaled", |rng, eps, seed| {
        let inputs = [
            uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
            uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
        ];
        check_inputs(&inputs, eps, seed, |g, v| g.residual_add_scaled(v[0], v[1], 0.1))
    }),
    ("mul", |rng, eps, seed| {
        let inputs = [uniform(rng, &[2, 3, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3], -1.0, 1.0)];
        check_inputs(&inputs, eps, seed, |g, v| g.mul(v[0], v[1]))
    }),
    ("dropout_mask", |rng, eps, seed| {
        let inputs = [uniform(rng, &[4, 6], -1.0, 1.0)];
        let mask: Vec<f64> = (0..24).map(|_| if rng.random_bool(0.8) { 1.25 } else { 0.0 }).collect();
        check_inputs(&inputs, eps, seed, |g, v| g.mask(v[0], mask.clone()))
    }),
    ("linear", |rng, eps, seed| {
        let inputs = [
            uniform(rng, &[3, 5], -1.0, 1.0),
            uniform(rng, &[4, 5], -1.0, 1.0),
            uniform(rng, &[4], -1.0, 1.0),
        ];
        check_inputs(&inputs, eps, seed, |g, v| g.linear(v[0], v[1], v[2]))
    }),
    ("softmax_cross_entropy", |rng, eps, _| {
        let logits = uniform(rng, &[4, 6], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        grad_check(|g, x| g.softmax_cross_entropy(x, &labels), &logits, eps)
    }),
];

/// Names of the ops covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    OP_CASES.iter().map(|(n, _)| *n).collect()
}

/// Gradient-checks every layer op on `trials` random draws each.
pub fn op_suite(trials: usize, eps: f64, seed: u64) -> Result<Vec<OpCheck>> {
    OP_CASES
        .iter()
        .enumerate()
        .map(|(k, &(name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let reports = (0..trials.max(1))
                .map(|_| {
                    let proj_seed = rng.random();
                    case(&mut rng, eps, proj_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OpCheck {
                name,
                report: worst(reports),
                trials: trials.max(1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for check in op_suite(2, 1e-5, 0).unwrap() {
            assert!(check.report.passes(1e-4), "{}: {:?}", check.name, check.report);
        }
    }

    #[test]
    fn probes_across_a_kink_are_skipped() {
        // relu(x) at x = [5e-6, 1.0]: the first probe pair straddles 0.
        let x = [5e-6, 1.0];
        let analytic = [1.0, 1.0];
        let eval = |i: usize, d: f64| {
            let mut p = x;
            p[i] += d;
            let mut g = Graph::new();
            let v = g.leaf(Tensor::new(vec![2], p.to_vec()).unwrap(), false);
            let r = g.relu(v);
            let s = g.sum(r);
            Ok((g.value(s).data()[0], g.kink_fingerprint()))
        };
        let (_, base) = eval(0, 0.0).unwrap();
        let report = compare_piecewise(&analytic, &[0, 1], eval, base, 1e-5).unwrap();
        assert_eq!((report.checked, report.skipped), (1, 1));
        assert!(report.passes(1e-9));
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn sum_gradient_is_exactly_one() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 8.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let s = g.sum(v);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), [1.0; 4]);
        let r = grad_check(
            |g, x| Ok(g.sum(x)),
            &Tensor::new(vec![2], vec![1.0, 3.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at an exact kink: subgradient 0 but the central difference sees 0.5.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = compare(&[f64::NAN], &[0], |_, _| Ok(0.0), 1e-5);
        assert_eq!(r.unwrap_err(), TensorError::NonFinite("grad_check"));
    }
}
