//! Hard-example mining: a two-component Gaussian mixture over per-sample
//! losses flags each branch's hard samples, then two quantile-thresholded
//! predicates pick the joint-hard ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VARIANCE_FLOOR: f64 = 1e-6;
const TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 200;

/// A fitted two-component mixture with components ordered by mean, so
/// component 0 is the "easy" low-loss one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first update and after every update.
    pub log_likelihood: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + (x - mean).powi(2) / variance)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-point log joint densities `ln w_k + ln N(x; mu_k, var_k)`.
fn log_joint(x: f64, means: &[f64; 2], variances: &[f64; 2], weights: &[f64; 2]) -> [f64; 2] {
    [0, 1].map(|k| weights[k].ln() + log_normal(x, means[k], variances[k]))
}

pub fn mixture_log_likelihood(
    data: &[f64],
    means: &[f64; 2],
    variances: &[f64; 2],
    weights: &[f64; 2],
) -> f64 {
    data.iter()
        .map(|&x| {
            let [a, b] = log_joint(x, means, variances, weights);
            log_sum_exp(a, b)
        })
        .sum()
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

/// Fits two Gaussians to `losses` by EM, initialized by splitting the sorted
/// values at the median.
pub fn fit_gmm2(losses: &[f64]) -> Result<MixtureFit> {
    if losses.len() < 4 {
        return Err(Error::contract(format!(
            "mixture fit needs at least 4 samples, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fit_gmm2", "non-finite loss"));
    }
    if losses.iter().all(|&v| v == losses[0]) {
        return Err(Error::Degenerate("all losses are identical".into()));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (lo, hi) = (moments(&sorted[..half]), moments(&sorted[half..]));
    let mut means = [lo.0, hi.0];
    let mut variances = [lo.1, hi.1];
    let mut weights = [
        half as f64 / sorted.len() as f64,
        1.0 - half as f64 / sorted.len() as f64,
    ];

    let n = losses.len();
    let mut trace = vec![mixture_log_likelihood(losses, &means, &variances, &weights)];
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = vec![[0.0; 2]; n];
    while iterations < MAX_ITERATIONS {
        let previous = (means, variances, weights);
        for (r, &x) in resp.iter_mut().zip(losses) {
            let [a, b] = log_joint(x, &means, &variances, &weights);
            let total = log_sum_exp(a, b);
            *r = [(a - total).exp(), (b - total).exp()];
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                // A component lost all its mass; keep it where it was.
                weights[k] = f64::MIN_POSITIVE;
                continue;
            }
            let mean = resp.iter().zip(losses).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r[k] * (x - mean).powi(2))
                .sum::<f64>()
                / nk;
            means[k] = mean;
            variances[k] = var.max(VARIANCE_FLOOR);
            weights[k] = nk / n as f64;
        }
        iterations += 1;
        let ll = mixture_log_likelihood(losses, &means, &variances, &weights);
        let improvement = ll - trace[trace.len() - 1];
        if improvement < 0.0 {
            // At the fixed point rounding can make the step a tiny loss;
            // keep the previous parameters instead.
            (means, variances, weights) = previous;
            converged = true;
            break;
        }
        trace.push(ll);
        if improvement < TOLERANCE {
            converged = true;
            break;
        }
    }
    if means[0] > means[1] {
        means.swap(0, 1);
        variances.swap(0, 1);
        weights.swap(0, 1);
    }
    Ok(MixtureFit {
        means,
        variances,
        weights,
        iterations,
        converged,
        log_likelihood: trace,
    })
}

/// Responsibility of the smaller-mean component for `loss`.
pub fn posterior_small(fit: &MixtureFit, loss: f64) -> f64 {
    let [a, b] = log_joint(loss, &fit.means, &fit.variances, &fit.weights);
    (a - log_sum_exp(a, b)).exp()
}

/// Indices whose small-component posterior is strictly below `p`. A
/// degenerate loss distribution yields no hard samples.
pub fn select_modality_hard(losses: &[f64], p: f64) -> Result<Vec<usize>> {
    let fit = match fit_gmm2(losses) {
        Ok(fit) => fit,
        Err(Error::Degenerate(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(losses
        .iter()
        .enumerate()
        .filter(|&(_, &l)| posterior_small(&fit, l) < p)
        .map(|(i, _)| i)
        .collect())
}

/// Indices of the `k` largest scores, ties broken towards the smaller index.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::contract(format!("top-{k} of {} classes", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Size of the intersection of the two top-`k` class sets.
pub fn topk_overlap(f2: &[f64], f3: &[f64], k: usize) -> Result<usize> {
    if f2.len() != f3.len() {
        return Err(Error::contract(format!(
            "class dimensions differ: {} vs {}",
            f2.len(),
            f3.len()
        )));
    }
    let a = topk(f2, k)?;
    let b = topk(f3, k)?;
    Ok(a.iter().filter(|i| b.contains(i)).count())
}

/// Default overlap depth: five, capped below the class count.
pub fn default_k(classes: usize) -> usize {
    5.min(classes.saturating_sub(1)).max(1)
}

/// Largest joint wrong-class confidence `max_{i != label} (p2_i + p3_i)`.
pub fn wrong_class_confidence(p2: &[f64], p3: &[f64], label: usize) -> f64 {
    p2.iter()
        .zip(p3)
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, (a, b))| a + b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Nearest-rank `q`-quantile of `values` (need not be sorted).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Overlap threshold in `0..=k` whose strict-below fraction is closest to
/// `rho`, ties going to the smaller threshold.
pub fn overlap_threshold(overlaps: &[usize], k: usize, rho: f64) -> usize {
    let n = overlaps.len() as f64;
    (0..=k)
        .map(|r| {
            let frac = overlaps.iter().filter(|&&o| o < r).count() as f64 / n;
            (r, (frac - rho).abs())
        })
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
        .0
}

/// Joint-hard selection over a candidate set, with the thresholds realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSelection {
    pub joint: Vec<usize>,
    pub r1: f64,
    pub r2: usize,
}

/// Keeps candidates whose joint wrong-class confidence exceeds the
/// `(1 - rho)`-quantile `r1` and whose top-`k` overlap is below `r2`.
///
/// `probs2`, `probs3` and `labels` are indexed by sample id; `candidates`
/// lists the sample ids to consider. The output preserves candidate order.
pub fn select_joint_hard(
    candidates: &[usize],
    probs2: &[Vec<f64>],
    probs3: &[Vec<f64>],
    labels: &[usize],
    rho: f64,
    k: usize,
) -> Result<JointSelection> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::contract(format!("rho {rho} outside (0, 1]")));
    }
    if candidates.is_empty() {
        return Err(Error::contract("joint-hard selection needs candidates"));
    }
    let mut s1 = Vec::with_capacity(candidates.len());
    let mut overlaps = Vec::with_capacity(candidates.len());
    for &i in candidates {
        let (p2, p3) = (&probs2[i], &probs3[i]);
        s1.push(wrong_class_confidence(p2, p3, labels[i]));
        overlaps.push(topk_overlap(p2, p3, k)?);
    }
    let r1 = nearest_rank_quantile(&s1, 1.0 - rho);
    let r2 = overlap_threshold(&overlaps, k, rho);
    let joint = candidates
        .iter()
        .zip(s1.iter().zip(&overlaps))
        .filter(|&(_, (&s, &o))| s > r1 && o < r2)
        .map(|(&i, _)| i)
        .collect();
    Ok(JointSelection { joint, r1, r2 })
}

/// Should mining run at `epoch`, given `warmup` epochs and a `period`?
pub fn mining_schedule(epoch: usize, warmup: usize, period: usize) -> bool {
    debug_assert!(period >= 1);
    epoch >= warmup && (epoch - warmup) % period.max(1) == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Target fraction of candidates passing each threshold.
    pub rho: f64,
    /// Posterior threshold for the 2D branch.
    pub p2: f64,
    /// Posterior threshold for the 3D branch.
    pub p3: f64,
    pub warmup: usize,
    pub period: usize,
    /// Top-k depth; `None` picks [`default_k`] for the class count.
    pub k: Option<usize>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            rho: 0.25,
            p2: 0.5,
            p3: 0.5,
            warmup: 5,
            period: 1,
            k: None,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        for (name, p) in [("p2", self.p2), ("p3", self.p3)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.period == 0 {
            return Err(Error::Config("mining period must be at least 1".into()));
        }
        Ok(())
    }
}

/// One mining epoch's hard sets and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub epoch: usize,
    pub d2: Vec<usize>,
    pub d3: Vec<usize>,
    pub joint: Vec<usize>,
    pub r1: Option<f64>,
    pub r2: Option<usize>,
    pub p2: f64,
    pub p3: f64,
    pub rho: f64,
    pub k: usize,
}

/// Runs both per-branch mixture fits and the joint selection over `D2 u D3`.
pub fn mine(
    epoch: usize,
    losses2: &[f64],
    losses3: &[f64],
    probs2: &[Vec<f64>],
    probs3: &[Vec<f64>],
    labels: &[usize],
    cfg: &MiningConfig,
) -> Result<SelectionReport> {
    let classes = probs2.first().map_or(0, Vec::len);
    let k = cfg.k.unwrap_or_else(|| default_k(classes));
    let d2 = select_modality_hard(losses2, cfg.p2)?;
    let d3 = select_modality_hard(losses3, cfg.p3)?;
    let mut candidates: Vec<usize> = d2.iter().chain(&d3).copied().collect();
    candidates.sort_unstable();
    candidates.dedup();
    let (joint, r1, r2) = if candidates.is_empty() {
        (Vec::new(), None, None)
    } else {
        let sel = select_joint_hard(&candidates, probs2, probs3, labels, cfg.rho, k)?;
        (sel.joint, Some(sel.r1), Some(sel.r2))
    };
    Ok(SelectionReport {
        epoch,
        d2,
        d3,
        joint,
        r1,
        r2,
        p2: cfg.p2,
        p3: cfg.p3,
        rho: cfg.rho,
        k,
    })
}
