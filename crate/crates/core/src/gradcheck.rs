//! Central finite-difference verification of the autodiff engine on every
//! training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, irm_grad_theta, mm_rex, modality_irm_loss, nt_xent_align, sup_infonce, v_rex,
    ContrastiveBatch, IrmConfig, IrmVariant,
};
use crate::tensor::{Graph, Tensor, Var};

/// Perturbation used by the central differences.
pub const EPSILON: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;
/// Tolerance for autodiff gradients of every loss.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the analytic dummy-scale derivative.
pub const THETA_TOLERANCE: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPSILON;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - EPSILON;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * EPSILON);
    }
    Ok(grad)
}

/// Largest relative error between the reverse-mode gradient of the scalar
/// `build(graph, x)` and its central difference.
pub fn check_gradient(build: impl Fn(&Graph, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let root = build(&g, leaf)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(
        |probe| {
            let g = Graph::new();
            let leaf = g.leaf(probe.clone(), true);
            g.item(build(&g, leaf)?)
        },
        x,
    )?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Outcome of checking one loss over many random configurations.
#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub name: String,
    pub configs: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Labels for `m` rows with every class appearing at least twice.
fn paired_labels(rng: &mut ChaCha8Rng, m: usize) -> Vec<usize> {
    let classes = (m / 2).max(1);
    let mut labels: Vec<usize> = (0..m).map(|i| (i / 2) % classes).collect();
    // Random relabel of whole classes keeps the pairing intact.
    let offset = rng.random_range(0..classes);
    labels.iter_mut().for_each(|l| *l = (*l + offset) % classes);
    labels
}

fn split_envs(g: &Graph, x: Var, envs: usize, labels: &[usize]) -> Result<Vec<ContrastiveBatch>> {
    let m = labels.len();
    (0..envs)
        .map(|e| {
            let rows: Vec<usize> = (e * m..(e + 1) * m).collect();
            Ok(ContrastiveBatch {
                features: g.select_rows(x, &rows)?,
                labels: labels.to_vec(),
            })
        })
        .collect()
}

fn env_risks(g: &Graph, envs: &[ContrastiveBatch]) -> Result<Vec<Var>> {
    envs.iter()
        .map(|e| sup_infonce(g, e, 1.0).map(|r| r.loss))
        .collect()
}

fn run_check(
    name: &str,
    configs: usize,
    tolerance: f64,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<LossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let err = one(&mut rng)?;
        if !err.is_finite() {
            return Err(Error::numeric("gradcheck", format!("{name}: non-finite error")));
        }
        worst = worst.max(err);
    }
    Ok(LossCheck {
        name: name.to_string(),
        configs,
        max_relative_error: worst,
        tolerance,
    })
}

/// Runs every loss check on `configs` random configurations each.
pub fn run_suite(configs: usize, seed: u64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();

    checks.push(run_check(
        "cross_entropy",
        configs,
        GRADIENT_TOLERANCE,
        seed,
        |rng| {
            let (b, c) = (rng.random_range(1..6), rng.random_range(2..7));
            let logits = random_tensor(rng, &[b, c]).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            check_gradient(|g, x| g.mean(cross_entropy(g, x, &labels)?), &logits)
        },
    )?);

    checks.push(run_check(
        "sup_infonce",
        configs,
        GRADIENT_TOLERANCE,
        seed + 1,
        |rng| {
            let m = rng.random_range(3..8);
            let d = rng.random_range(2..5);
            let labels = paired_labels(rng, m);
            let theta = rng.random_range(0.5..3.0);
            let x = random_tensor(rng, &[m, d]);
            check_gradient(
                |g, x| {
                    let batch = ContrastiveBatch {
                        features: x,
                        labels: labels.clone(),
                    };
                    Ok(sup_infonce(g, &batch, theta)?.loss)
                },
                &x,
            )
        },
    )?);

    checks.push(run_check(
        "irm_grad_theta",
        configs,
        THETA_TOLERANCE,
        seed + 2,
        |rng| {
            let m = rng.random_range(3..8);
            let d = rng.random_range(2..5);
            let labels = paired_labels(rng, m);
            let x = random_tensor(rng, &[m, d]);
            let g = Graph::new();
            let batch = ContrastiveBatch {
                features: g.constant(x.clone()),
                labels: labels.clone(),
            };
            let analytic = g.item(irm_grad_theta(&g, &batch)?)?;
            let theta = Tensor::scalar(IrmConfig::DUMMY_THETA);
            let numeric = numeric_gradient(
                |t| {
                    let g = Graph::new();
                    let batch = ContrastiveBatch {
                        features: g.constant(x.clone()),
                        labels: labels.clone(),
                    };
                    g.item(sup_infonce(&g, &batch, t.item()?)?.loss)
                },
                &theta,
            )?;
            Ok(relative_error(analytic, numeric.data()[0]))
        },
    )?);

    checks.push(run_check(
        "modality_irm_loss",
        configs,
        GRADIENT_TOLERANCE,
        seed + 3,
        |rng| {
            let m = rng.random_range(3..7);
            let d = rng.random_range(2..5);
            let envs = rng.random_range(2..4);
            let labels = paired_labels(rng, m);
            let cfg = IrmConfig {
                lambda: rng.random_range(0.0..10.0),
                ..IrmConfig::default()
            };
            let x = random_tensor(rng, &[envs * m, d]);
            let features = check_gradient(
                |g, x| modality_irm_loss(g, &split_envs(g, x, envs, &labels)?, &cfg).map(|l| l.total),
                &x,
            )?;
            // Same loss seen from a shared gate applied to every environment.
            let logits = random_tensor(rng, &[d]);
            let gate = check_gradient(
                |g, w| {
                    let gated = g.mul(g.constant(x.clone()), g.sigmoid(w)?)?;
                    modality_irm_loss(g, &split_envs(g, gated, envs, &labels)?, &cfg).map(|l| l.total)
                },
                &logits,
            )?;
            Ok(features.max(gate))
        },
    )?);

    checks.push(run_check(
        "nt_xent_align",
        configs,
        GRADIENT_TOLERANCE,
        seed + 4,
        |rng| {
            let b = rng.random_range(2..6);
            let d = rng.random_range(2..5);
            let tau = rng.random_range(0.5..10.0);
            let x = random_tensor(rng, &[2 * b, d]);
            check_gradient(
                |g, x| {
                    let z2 = g.select_rows(x, &(0..b).collect::<Vec<_>>())?;
                    let z3 = g.select_rows(x, &(b..2 * b).collect::<Vec<_>>())?;
                    nt_xent_align(g, z2, z3, tau)
                },
                &x,
            )
        },
    )?);

    checks.push(run_check(
        "mm_rex",
        configs,
        GRADIENT_TOLERANCE,
        seed + 5,
        |rng| {
            let m = rng.random_range(3..7);
            let d = rng.random_range(2..5);
            let envs = rng.random_range(2..4);
            let labels = paired_labels(rng, m);
            let lambda_min = rng.random_range(0.0..1.0 / envs as f64);
            let x = random_tensor(rng, &[envs * m, d]);
            check_gradient(
                |g, x| mm_rex(g, &env_risks(g, &split_envs(g, x, envs, &labels)?)?, lambda_min),
                &x,
            )
        },
    )?);

    checks.push(run_check(
        "v_rex",
        configs,
        GRADIENT_TOLERANCE,
        seed + 6,
        |rng| {
            let m = rng.random_range(3..7);
            let d = rng.random_range(2..5);
            let envs = rng.random_range(2..4);
            let labels = paired_labels(rng, m);
            let beta = rng.random_range(0.0..10.0);
            let x = random_tensor(rng, &[envs * m, d]);
            check_gradient(
                |g, x| v_rex(g, &env_risks(g, &split_envs(g, x, envs, &labels)?)?, beta),
                &x,
            )
        },
    )?);

    let rex_cfg = IrmConfig {
        variant: IrmVariant::VRex,
        beta: 2.0,
        ..IrmConfig::default()
    };
    checks.push(run_check(
        "modality_irm_loss_vrex",
        configs,
        GRADIENT_TOLERANCE,
        seed + 7,
        |rng| {
            let m = rng.random_range(3..7);
            let d = rng.random_range(2..5);
            let labels = paired_labels(rng, m);
            let x = random_tensor(rng, &[2 * m, d]);
            check_gradient(
                |g, x| modality_irm_loss(g, &split_envs(g, x, 2, &labels)?, &rex_cfg).map(|l| l.total),
                &x,
            )
        },
    )?);

    Ok(GradcheckReport { checks })
}
