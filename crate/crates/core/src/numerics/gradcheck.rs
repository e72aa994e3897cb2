//! Central finite-difference verification of backward rules.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Coordinates whose relative error exceeds this are re-probed with
    /// smaller steps; a step that straddles a kink of a piecewise-linear op
    /// (rectifier, clamp, absolute value) otherwise reports a spurious error.
    pub refine_above: f64,
    pub refinements: u32,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            refine_above: 1e-6,
            refinements: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(
            "gradcheck",
            format!("function must return a scalar, got {:?}", v.shape()),
        ));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::NonFinite("gradcheck function value".into()));
    }
    Ok(s)
}

/// Compares the recorded adjoints of a scalar function of several tensors
/// against central differences at every coordinate.
pub fn gradcheck_multi<F>(
    f: F,
    points: &[Tensor],
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    if analytic.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = points.to_vec();
    for (pi, a_grad) in analytic.iter().enumerate() {
        for ci in 0..points[pi].numel() {
            let a = a_grad.data()[ci];
            let mut best: Option<(f64, f64)> = None;
            let mut eps = opts.eps;
            for attempt in 0..=opts.refinements {
                let x0 = points[pi].data()[ci];
                probe[pi].data_mut()[ci] = x0 + eps;
                let fp = eval_scalar(&f, &probe)?;
                probe[pi].data_mut()[ci] = x0 - eps;
                let fm = eval_scalar(&f, &probe)?;
                probe[pi].data_mut()[ci] = x0;
                let n = (fp - fm) / (2.0 * eps);
                let e = rel_error(a, n);
                if best.is_none_or(|(be, _)| e < be) {
                    best = Some((e, n));
                }
                if e <= opts.refine_above || attempt == opts.refinements {
                    break;
                }
                eps /= 10.0;
            }
            let (e, n) = best.expect("at least one probe");
            report.coordinates += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

/// Single-input form: returns the max relative error over coordinates.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let opts = GradcheckOptions {
        eps,
        ..GradcheckOptions::default()
    };
    gradcheck_multi(|g, v| f(g, v[0]), std::slice::from_ref(point), opts).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = random(&[3, 4, 5], 1, -1.0, 1.0);
        let err = gradcheck(|g, v| Ok(g.sum(g.square(v))), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{}", err);
    }

    #[test]
    fn elementwise_rules_pass() {
        let x = random(&[2, 3, 3], 2, 0.2, 0.8);
        let checks: Vec<(&str, Box<dyn Fn(&Graph, Var) -> Result<Var>>)> = vec![
            ("sigmoid", Box::new(|g, v| Ok(g.sum(g.sigmoid(v))))),
            ("ln", Box::new(|g, v| Ok(g.sum(g.ln(v))))),
            (
                "leaky",
                Box::new(|g, v| Ok(g.sum(g.square(g.leaky_relu(g.add_scalar(v, -0.5), 0.2))))),
            ),
            (
                "abs",
                Box::new(|g, v| Ok(g.sum(g.abs(g.add_scalar(v, -0.5))))),
            ),
            (
                "clamp",
                Box::new(|g, v| Ok(g.sum(g.square(g.clamp(v, 0.3, 0.7))))),
            ),
            (
                "pool",
                Box::new(|g, v| {
                    let p = g.global_avg_pool(g.square(v))?;
                    Ok(g.sum(g.square(p)))
                }),
            ),
            (
                "avgpool",
                Box::new(|g, v| {
                    let v = g.reshape(v, &[2, 3, 3])?;
                    let w = g.concat_channels(&[v, v])?;
                    let p = g.avg_pool(g.square(w), 1)?;
                    Ok(g.sum(p))
                }),
            ),
        ];
        for (name, f) in checks {
            let err = gradcheck(|g, v| f(g, v), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{}: {}", name, err);
        }
    }

    #[test]
    fn structured_rules_pass_on_three_shapes() {
        for (i, &(c, h, w)) in [(1, 4, 4), (2, 6, 5), (3, 8, 8)].iter().enumerate() {
            let x = random(&[c, h, w], 10 + i as u64, -1.0, 1.0);
            let k = random(&[4, c, 3, 3], 20 + i as u64, -0.5, 0.5);
            let b = random(&[4], 30 + i as u64, -0.5, 0.5);
            let probe = random(&[1, 2 * h, 2 * w], 40 + i as u64, -1.0, 1.0);
            let opts = GradcheckOptions::default();
            let report = gradcheck_multi(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    let z = g.pixel_shuffle(y, 2)?;
                    let p = g.constant(probe.clone());
                    Ok(g.sum(g.mul(g.square(z), p)?))
                },
                &[x.clone(), k.clone(), b.clone()],
                opts,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{:?}", report);

            let strided = gradcheck_multi(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                    let pooled = g.global_avg_pool(g.square(y))?;
                    let wl = g.constant(Tensor::full(&[2, 4], 0.3));
                    let out = g.linear(pooled, wl, None)?;
                    Ok(g.sum(g.square(out)))
                },
                &[x.clone(), k.clone()],
                opts,
            )
            .unwrap();
            assert!(strided.max_rel_error < 1e-6, "{:?}", strided);
        }
    }

    #[test]
    fn linear_rule_passes() {
        let x = random(&[5], 3, -1.0, 1.0);
        let w = random(&[3, 5], 4, -1.0, 1.0);
        let b = random(&[3], 5, -1.0, 1.0);
        let r = gradcheck_multi(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                Ok(g.sum(g.square(y)))
            },
            &[x, w, b],
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{:?}", r);
    }

    #[test]
    fn wrong_rule_is_caught() {
        let x = random(&[6], 6, 0.5, 1.5);
        // derivative of x^2 reported as x
        let err = gradcheck(
            |g, v| Ok(g.sum(g.map(v, "bad_square", |t| t * t, |t, _| t))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_values_error() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 1.0]).unwrap();
        assert!(gradcheck(|g, v| Ok(g.sum(g.ln(v))), &x, 1e-5).is_err());
    }
}
