//! Built-in verification suite: finite-difference gradient checks of every
//! loss and network, exact loss identities, and kernel properties.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, feature_block, identity_loss, identity_loss_for,
    identity_loss_value, orthogonal_loss, orthogonal_loss_value, patch_loss, patch_loss_value,
    pixel_loss, pixel_loss_value, ssim_index, total_g_loss, tv_loss, tv_loss_value, FeatureBlock,
    LossTerms, LossWeights, OrthVariant, PATCH_SIZE, SSIM_C1, SSIM_C2,
};
use crate::model::{
    parsing_input, Bound, Discriminator, DiscriminatorConfig, DiscriminatorKind, EmbedderConfig,
    Generator, GeneratorConfig, ParamStore, ToyEmbedder,
};
use crate::numerics::{
    bicubic_resample, gradcheck_multi, masked_product, pixel_shuffle, pixel_unshuffle,
    BackwardRule, GradcheckOptions, Graph, Ratio, Tensor, Var,
};
use crate::synthdata::{synth_parsing_masks, SyntheticIdentity};

/// Largest accepted relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradients,
    Identities,
    Kernels,
}

type CheckFn = Box<dyn Fn() -> Result<(bool, String)> + Send + Sync>;

pub struct Check {
    pub name: &'static str,
    pub suite: Suite,
    run: CheckFn,
}

impl Check {
    pub fn new(
        name: &'static str,
        suite: Suite,
        run: impl Fn() -> Result<(bool, String)> + Send + Sync + 'static,
    ) -> Self {
        Check {
            name,
            suite,
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfcheckSummary {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfcheckSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect()
    }
}

/// Runs every check; an error inside a check counts as its failure.
pub fn run_checks(checks: &[Check]) -> SelfcheckSummary {
    let start = Instant::now();
    let results = checks
        .iter()
        .map(|c| {
            let t = Instant::now();
            let (passed, detail) = match (c.run)() {
                Ok(v) => v,
                Err(e) => (false, format!("error: {}", e)),
            };
            CheckResult {
                name: c.name,
                suite: c.suite,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect();
    SelfcheckSummary {
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn all_checks() -> Vec<Check> {
    let mut v = gradient_checks();
    v.extend(identity_checks());
    v.extend(kernel_checks());
    v
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape product")
}

fn grad_case<F>(name: &'static str, points: Vec<Tensor>, f: F) -> Check
where
    F: Fn(&Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    Check::new(name, Suite::Gradients, move || {
        let r = gradcheck_multi(&f, &points, GradcheckOptions::default())?;
        Ok((
            r.max_rel_error < GRADCHECK_TOLERANCE,
            format!(
                "max relative error {:.2e} over {} coordinates",
                r.max_rel_error, r.coordinates
            ),
        ))
    })
}

fn small_embedder() -> ToyEmbedder {
    let cfg = EmbedderConfig {
        image_channels: 1,
        hr_size: 32,
        d1: 6,
        n_classes: 4,
    };
    let mut e = ToyEmbedder::new(cfg, 3).expect("valid embedder config");
    e.mark_trained();
    e
}

fn small_discriminator(kind: DiscriminatorKind) -> Discriminator {
    let cfg = DiscriminatorConfig {
        image_channels: 1,
        channels: 2,
        hr_size: 16,
    };
    Discriminator::new(kind, cfg, 5).expect("valid discriminator config")
}

/// Pairs whose pointwise differences stay away from zero, so the L1 kink is
/// never straddled.
fn offset_pair(shape: &[usize], seed: u64) -> (Tensor, Tensor) {
    let a = random(shape, seed, 0.2, 0.8);
    let sign = random(shape, seed + 1, -1.0, 1.0);
    let b = Tensor::from_vec(
        shape,
        a.data()
            .iter()
            .zip(sign.data())
            .map(|(x, s)| x + if *s < 0.0 { -0.1 } else { 0.1 })
            .collect(),
    )
    .expect("same shape");
    (a, b)
}

/// Parameters with random biases. Zero biases put masked-out activations
/// exactly on the rectifier's corner, where no finite difference agrees.
fn nonzero_biases(params: &ParamStore, seed: u64) -> Vec<Tensor> {
    params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            if name.ends_with(".b") {
                random(t.shape(), seed * 100 + i as u64, -0.2, 0.2)
            } else {
                t.clone()
            }
        })
        .collect()
}

pub fn gradient_checks() -> Vec<Check> {
    let (hp, sp) = offset_pair(&[2, 6, 6], 1);
    let (hf, sf) = offset_pair(&[2, 6, 6], 3);
    let mut checks = vec![grad_case("pixel_loss", vec![sp, sf], move |g, v| {
        pixel_loss(
            g,
            g.constant(hp.clone()),
            v[0],
            g.constant(hf.clone()),
            v[1],
        )
    })];

    checks.push(grad_case(
        "patch_loss",
        vec![
            random(&[2, 16, 16], 5, 0.0, 1.0),
            random(&[2, 16, 16], 6, 0.0, 1.0),
        ],
        |g, v| patch_loss(g, v[0], v[1], PATCH_SIZE, PATCH_SIZE),
    ));
    checks.push(grad_case(
        "tv_loss",
        vec![random(&[2, 5, 7], 7, 0.0, 1.0)],
        |g, v| tv_loss(g, v[0]),
    ));
    checks.push(grad_case(
        "identity_loss_features",
        vec![
            random(&[6], 8, -1.0, 1.0),
            random(&[4], 9, -1.0, 1.0),
            random(&[6], 10, -1.0, 1.0),
            random(&[4], 11, -1.0, 1.0),
        ],
        |g, v| identity_loss(g, (v[0], v[1]), (v[2], v[3])),
    ));
    let emb = small_embedder();
    let hf_id = random(&[1, 32, 32], 12, 0.0, 1.0);
    checks.push(grad_case(
        "identity_loss_embedder",
        vec![random(&[1, 32, 32], 13, 0.0, 1.0)],
        move |g, v| identity_loss_for(g, &emb, v[0], &hf_id),
    ));
    checks.push(grad_case(
        "adversarial_d_loss",
        vec![
            random(&[1], 14, 0.1, 0.9),
            random(&[1], 15, 0.1, 0.9),
            random(&[1], 16, 0.1, 0.9),
        ],
        |g, v| adversarial_d_loss(g, &[v[0], v[1]], &[v[2]]),
    ));
    checks.push(grad_case(
        "adversarial_g_loss",
        vec![random(&[1], 17, 0.1, 0.9)],
        |g, v| adversarial_g_loss(g, &[v[0]]),
    ));
    let df = small_discriminator(DiscriminatorKind::Frontal);
    let mut points = vec![random(&[1, 16, 16], 18, 0.0, 1.0)];
    points.extend(nonzero_biases(&df.params, 18));
    checks.push(grad_case("frontal_discriminator", points, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        adversarial_g_loss(g, &[df.forward(g, &p, v[0])?])
    }));
    let dp = small_discriminator(DiscriminatorKind::Parsing);
    let masks = synth_parsing_masks(&SyntheticIdentity::new(0, 1), 16).as_array();
    let mut points = vec![random(&[1, 16, 16], 19, 0.0, 1.0)];
    points.extend(nonzero_biases(&dp.params, 19));
    checks.push(grad_case("parsing_discriminator", points, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let x = parsing_input(g, v[0], &masks)?;
        adversarial_g_loss(g, &[dp.forward(g, &p, x)?])
    }));
    for (name, variant) in [
        ("orthogonal_loss_literal", OrthVariant::Literal),
        ("orthogonal_loss_srip", OrthVariant::Srip),
    ] {
        checks.push(grad_case(
            name,
            vec![
                random(&[3, 4, 4], 20, -0.5, 0.5),
                random(&[3, 4, 4], 21, -0.5, 0.5),
            ],
            move |g, v| {
                let blocks = [feature_block(g, v[0])?, feature_block(g, v[1])?];
                orthogonal_loss(g, &blocks, variant)
            },
        ));
    }
    checks.push(grad_case(
        "total_g_loss",
        (0..6).map(|i| random(&[1], 30 + i, 0.0, 1.0)).collect(),
        |g, v| {
            let terms = LossTerms {
                pixel: v[0],
                patch: v[1],
                adversarial: v[2],
                identity: v[3],
                tv: v[4],
                orthogonal: Some(v[5]),
            };
            total_g_loss(g, &LossWeights::default(), &terms)
        },
    ));
    let gen = Generator::new(GeneratorConfig::tiny(), 13).expect("valid tiny config");
    let probe = random(&[1, 32, 32], 40, 0.0, 1.0);
    let mut points = vec![random(&[1, 8, 8], 41, 0.0, 1.0)];
    points.extend(gen.params.tensors().iter().cloned());
    checks.push(grad_case("tiny_generator", points, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let out = gen.forward(g, &p, &v[..1])?;
        let a = g.sum(g.mul(out.sf, g.constant(probe.clone()))?);
        let b = g.sum(g.square(out.sp));
        g.add(a, b)
    }));
    checks
}

fn verdict(ok: bool, detail: impl Into<String>) -> Result<(bool, String)> {
    Ok((ok, detail.into()))
}

pub fn identity_checks() -> Vec<Check> {
    vec![
        Check::new("zero_on_identical_inputs", Suite::Identities, || {
            let x = random(&[1, 16, 16], 50, 0.0, 1.0);
            let e = small_embedder();
            let x32 = random(&[1, 32, 32], 51, 0.0, 1.0);
            let vals = [
                pixel_loss_value(&x, &x, &x, &x)?,
                patch_loss_value(&x, &x, PATCH_SIZE, PATCH_SIZE)?,
                identity_loss_value(&e, &x32, &x32)?,
                tv_loss_value(&Tensor::full(&[1, 16, 16], 0.37))?,
            ];
            verdict(
                vals.iter().all(|&v| v == 0.0),
                format!("pixel/patch/identity/tv = {:?}", vals),
            )
        }),
        Check::new("ssim_self_similarity", Suite::Identities, || {
            let mut worst: f64 = 0.0;
            for seed in 0..20 {
                let p = random(&[64], 60 + seed, 0.0, 1.0);
                worst = worst.max((ssim_index(p.data(), p.data(), SSIM_C1, SSIM_C2)? - 1.0).abs());
            }
            let c = [0.42; 64];
            worst = worst.max((ssim_index(&c, &c, SSIM_C1, SSIM_C2)? - 1.0).abs());
            verdict(
                worst <= 1e-12,
                format!("max |ssim(x,x) - 1| = {:.1e}", worst),
            )
        }),
        Check::new("pixel_loss_constant_offset", Suite::Identities, || {
            let hp = random(&[1, 8, 8], 70, 0.0, 0.5);
            let hf = random(&[1, 8, 8], 71, 0.0, 0.5);
            let v = pixel_loss_value(&hp, &hp.map(|x| x + 0.5), &hf, &hf.map(|x| x + 0.5))?;
            verdict(
                (v - 1.0).abs() < 1e-12,
                format!("offset 0.5 on both pairs gives {}", v),
            )
        }),
        Check::new(
            "orthogonal_srip_zero_iff_orthonormal",
            Suite::Identities,
            || {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                let ortho = [
                    vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                    vec![s, 0.0, s, 0.0, 0.0, 1.0, 0.0, 0.0],
                    vec![0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5],
                ];
                let not = [
                    vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    vec![2.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0],
                ];
                let value = |rows: &Vec<f64>| -> Result<f64> {
                    orthogonal_loss_value(
                        &[FeatureBlock::from_rows(4, 2, rows.clone())?],
                        OrthVariant::Srip,
                    )
                };
                let zeros = ortho.iter().map(value).collect::<Result<Vec<_>>>()?;
                let nonzero = not.iter().map(value).collect::<Result<Vec<_>>>()?;
                verdict(
                    zeros.iter().all(|v| v.abs() < 1e-12) && nonzero.iter().all(|v| *v > 1e-3),
                    format!("orthonormal {:?}, not orthonormal {:?}", zeros, nonzero),
                )
            },
        ),
    ]
}

pub fn kernel_checks() -> Vec<Check> {
    vec![
        Check::new("pixel_shuffle_round_trip", Suite::Kernels, || {
            let x = random(&[8, 5, 3], 80, -1.0, 1.0);
            let y = random(&[2, 6, 8], 81, -1.0, 1.0);
            let a = pixel_unshuffle(&pixel_shuffle(&x, 2)?, 2)? == x;
            let b = pixel_shuffle(&pixel_unshuffle(&y, 2)?, 2)? == y;
            verdict(
                a && b,
                format!(
                    "unshuffle(shuffle) exact: {}, shuffle(unshuffle) exact: {}",
                    a, b
                ),
            )
        }),
        Check::new("bicubic_constants_and_shape", Suite::Kernels, || {
            let c = Tensor::full(&[1, 128, 128], 0.3);
            let down = bicubic_resample(&c, Ratio::new(1, 4))?;
            let up = bicubic_resample(&down, Ratio::new(4, 1))?;
            let exact = down.data().iter().chain(up.data()).all(|&v| v == 0.3);
            verdict(
                exact && down.shape() == [1, 32, 32] && up.shape() == [1, 128, 128],
                format!(
                    "down {:?}, up {:?}, constants exact: {}",
                    down.shape(),
                    up.shape(),
                    exact
                ),
            )
        }),
        Check::new("masked_product_oracle", Suite::Kernels, || {
            let mut rng = ChaCha8Rng::seed_from_u64(90);
            for case in 0..100 {
                let (c, h, w) = (
                    rng.gen_range(1..4),
                    rng.gen_range(1..9),
                    rng.gen_range(1..9),
                );
                let x = Tensor::from_vec(
                    &[c, h, w],
                    (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )?;
                let m = Tensor::from_vec(
                    &[1, h, w],
                    (0..h * w).map(|_| rng.gen_range(0..2) as f64).collect(),
                )?;
                let got = masked_product(&x, &m)?;
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            if got.at3(ci, y, xx) != x.at3(ci, y, xx) * m.at3(0, y, xx) {
                                return verdict(
                                    false,
                                    format!("case {} differs at ({}, {}, {})", case, ci, y, xx),
                                );
                            }
                        }
                    }
                }
            }
            verdict(true, "100 random cases match")
        }),
    ]
}

/// `x^2` with a wrong adjoint (`3x` instead of `2x`).
struct CorruptedSquare;

impl BackwardRule for CorruptedSquare {
    fn name(&self) -> &'static str {
        "corrupted_square"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = grad.item();
        vec![Some(inputs[0].map(|x| 3.0 * x * g))]
    }
}

/// A gradient check over a deliberately wrong backward rule; it must fail.
pub fn corrupted_rule_check() -> Check {
    grad_case(
        "corrupted_square_fixture",
        vec![random(&[4], 99, 0.5, 1.0)],
        |g, v| {
            let x = g.value(v[0]);
            let value = Tensor::scalar(x.data().iter().map(|a| a * a).sum());
            Ok(g.apply(Box::new(CorruptedSquare), &[v[0]], value))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_kernel_suites_pass() {
        let mut checks = identity_checks();
        checks.extend(kernel_checks());
        let s = run_checks(&checks);
        assert!(s.passed(), "{:#?}", s.results);
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let s = run_checks(&[corrupted_rule_check()]);
        assert_eq!(s.failures(), vec!["corrupted_square_fixture"]);
        assert!(s.results[0].detail.contains("relative error"));
    }
}
