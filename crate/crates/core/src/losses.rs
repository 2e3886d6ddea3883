//! Training objectives: per-sample cross-entropy, supervised InfoNCE with its
//! analytic dummy-scale gradient, the modality-wise invariance loss and its
//! REx relaxations, cross-modality NT-Xent, and the routed total objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, GroupId, Tensor, Var};

/// Per-sample cross-entropy `[batch]` for logits `[batch, classes]`.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "cross entropy: logits {shape:?} with {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let picked = g.gather_last(g.log_softmax(logits)?, labels)?;
    g.neg(picked)
}

/// Gated features of one environment and their class labels. Rows with equal
/// labels are positives of each other; all other rows are negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub features: Var,
    pub labels: Vec<usize>,
}

/// Result of [`sup_infonce`].
#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    pub loss: Var,
    /// Anchors that had at least one positive.
    pub anchors: usize,
    /// Anchors skipped for lack of a positive.
    pub skipped: usize,
}

struct PairMasks {
    /// Per-pair weight: `1 / (positives(i) * anchors)` for positive pairs.
    weights: Tensor,
    negatives: Tensor,
    anchors: usize,
    skipped: usize,
}

fn pair_masks(labels: &[usize]) -> Result<PairMasks> {
    let m = labels.len();
    let mut positives = vec![0usize; m];
    let mut negatives = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                positives[i] += 1;
            } else {
                negatives.data_mut()[i * m + j] = 1.0;
            }
        }
    }
    let anchors = positives.iter().filter(|&&n| n > 0).count();
    if anchors == 0 {
        return Err(Error::Degenerate("no anchor has a positive".into()));
    }
    let mut weights = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            if i != j && labels[i] == labels[j] {
                weights.data_mut()[i * m + j] = 1.0 / (positives[i] * anchors) as f64;
            }
        }
    }
    Ok(PairMasks {
        weights,
        negatives,
        anchors,
        skipped: m - anchors,
    })
}

struct ScaledSimilarities {
    sims: Var,
    exp: Var,
    /// Per-row sum of `exp` over negatives, spread across columns `[m, m]`.
    neg_sum: Var,
    masks: PairMasks,
}

fn scaled_similarities(g: &Graph, batch: &ContrastiveBatch, scale: f64) -> Result<ScaledSimilarities> {
    let shape = g.shape(batch.features);
    if shape.len() != 2 || shape[0] != batch.labels.len() {
        return Err(Error::contract(format!(
            "contrastive batch: features {shape:?} with {} labels",
            batch.labels.len()
        )));
    }
    let masks = pair_masks(&batch.labels)?;
    let m = batch.labels.len();
    let sims = g.cosine_matrix(batch.features, batch.features)?;
    let exp = g.exp(g.scale(sims, scale)?)?;
    let neg = g.constant(masks.negatives.clone());
    let row_sum = g.reshape(g.sum_last(g.mul(exp, neg)?)?, &[m, 1])?;
    let neg_sum = g.matmul(row_sum, g.constant(Tensor::full(&[1, m], 1.0)))?;
    Ok(ScaledSimilarities {
        sims,
        exp,
        neg_sum,
        masks,
    })
}

/// Supervised InfoNCE with the similarity multiplied by `theta`.
///
/// For each anchor and each of its positives the term is
/// `-log(exp(theta s+) / (exp(theta s+) + sum_neg exp(theta s-)))`, with `s` the
/// cosine similarity. Terms are averaged per anchor, then over anchors that
/// have a positive.
pub fn sup_infonce(g: &Graph, batch: &ContrastiveBatch, theta: f64) -> Result<InfoNce> {
    let s = scaled_similarities(g, batch, theta)?;
    let log_denominator = g.log(g.add(s.exp, s.neg_sum)?)?;
    let terms = g.sub(log_denominator, g.scale(s.sims, theta)?)?;
    let loss = g.sum(g.mul(terms, g.constant(s.masks.weights.clone()))?)?;
    Ok(InfoNce {
        loss,
        anchors: s.masks.anchors,
        skipped: s.masks.skipped,
    })
}

/// Analytic `d sup_infonce / d theta` at the given `theta`.
///
/// Per pair the derivative is `sum_j p_j s_j - s+`, where `p` is the softmax
/// of `theta * s` over the positive and all negatives. The value is built from
/// graph operations so it can itself be differentiated with respect to the
/// features.
pub fn sup_infonce_theta_grad(g: &Graph, batch: &ContrastiveBatch, theta: f64) -> Result<Var> {
    let s = scaled_similarities(g, batch, theta)?;
    let m = batch.labels.len();
    let neg = g.constant(s.masks.negatives.clone());
    let weighted = g.mul(s.sims, s.exp)?;
    let neg_weighted = g.reshape(g.sum_last(g.mul(weighted, neg)?)?, &[m, 1])?;
    let neg_weighted = g.matmul(neg_weighted, g.constant(Tensor::full(&[1, m], 1.0)))?;
    let expectation = g.div(g.add(weighted, neg_weighted)?, g.add(s.exp, s.neg_sum)?)?;
    let terms = g.sub(expectation, s.sims)?;
    g.sum(g.mul(terms, g.constant(s.masks.weights.clone()))?)
}

/// The invariance penalty's inner gradient: `d L_e / d theta` at `theta = 1`.
pub fn irm_grad_theta(g: &Graph, batch: &ContrastiveBatch) -> Result<Var> {
    sup_infonce_theta_grad(g, batch, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IrmVariant {
    #[serde(rename = "irmv1")]
    IrmV1,
    MmRex,
    VRex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrmConfig {
    /// Weight of the squared dummy-scale gradient (IRMv1).
    pub lambda: f64,
    pub variant: IrmVariant,
    /// Minimum environment weight for MM-REx.
    pub lambda_min: f64,
    /// Variance weight for V-REx.
    pub beta: f64,
    /// Adds the cross-attention 2.5D features as a third environment.
    pub include_25d: bool,
}

impl Default for IrmConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            variant: IrmVariant::IrmV1,
            lambda_min: 0.0,
            beta: 1.0,
            include_25d: false,
        }
    }
}

impl IrmConfig {
    /// The dummy classifier scale is always evaluated at one.
    pub const DUMMY_THETA: f64 = 1.0;
}

/// Result of [`modality_irm_loss`].
#[derive(Debug, Clone)]
pub struct IrmLoss {
    pub total: Var,
    /// Per-environment contrastive risks `L_e`.
    pub risks: Vec<Var>,
    /// Per-environment `d L_e / d theta` at one (IRMv1 only).
    pub theta_grads: Vec<Var>,
    /// `lambda * sum_e grad_e^2` (IRMv1) or the REx excess over `sum_e L_e`.
    pub penalty: Var,
}

/// Modality-wise invariance loss over two or more environments.
///
/// IRMv1: `sum_e [L_e + lambda * (dL_e/dtheta at 1)^2]`. The REx variants
/// replace the gradient penalty by a min-max or variance combination of the
/// environment risks.
pub fn modality_irm_loss(g: &Graph, envs: &[ContrastiveBatch], cfg: &IrmConfig) -> Result<IrmLoss> {
    if envs.len() < 2 {
        return Err(Error::contract(format!(
            "invariance loss needs at least two environments, got {}",
            envs.len()
        )));
    }
    let risks = envs
        .iter()
        .map(|e| sup_infonce(g, e, IrmConfig::DUMMY_THETA).map(|r| r.loss))
        .collect::<Result<Vec<_>>>()?;
    let risk_sum = g.sum(g.concat_rows(&risks)?)?;
    match cfg.variant {
        IrmVariant::IrmV1 => {
            let theta_grads = envs
                .iter()
                .map(|e| irm_grad_theta(g, e))
                .collect::<Result<Vec<_>>>()?;
            let squares = g.square(g.concat_rows(&theta_grads)?)?;
            let penalty = g.scale(g.sum(squares)?, cfg.lambda)?;
            Ok(IrmLoss {
                total: g.add(risk_sum, penalty)?,
                risks,
                theta_grads,
                penalty,
            })
        }
        IrmVariant::MmRex => {
            let total = mm_rex(g, &risks, cfg.lambda_min)?;
            let penalty = g.sub(total, risk_sum)?;
            Ok(IrmLoss {
                total,
                risks,
                theta_grads: Vec::new(),
                penalty,
            })
        }
        IrmVariant::VRex => {
            let total = v_rex(g, &risks, cfg.beta)?;
            let penalty = g.sub(total, risk_sum)?;
            Ok(IrmLoss {
                total,
                risks,
                theta_grads: Vec::new(),
                penalty,
            })
        }
    }
}

/// Min-max REx: `(1 - m lambda_min) max_e L_e + lambda_min sum_e L_e`.
pub fn mm_rex(g: &Graph, risks: &[Var], lambda_min: f64) -> Result<Var> {
    let m = risks.len();
    if m < 2 {
        return Err(Error::contract("MM-REx needs at least two environments"));
    }
    if lambda_min > 1.0 / m as f64 {
        return Err(Error::contract(format!(
            "lambda_min {lambda_min} exceeds 1/m = {}",
            1.0 / m as f64
        )));
    }
    let stacked = g.concat_rows(risks)?;
    let worst = g.scale(g.max(stacked)?, 1.0 - m as f64 * lambda_min)?;
    g.add(worst, g.scale(g.sum(stacked)?, lambda_min)?)
}

/// Variance REx: `beta * Var_pop({L_e}) + sum_e L_e`.
pub fn v_rex(g: &Graph, risks: &[Var], beta: f64) -> Result<Var> {
    let m = risks.len();
    if m < 2 {
        return Err(Error::contract("V-REx needs at least two environments"));
    }
    let stacked = g.concat_rows(risks)?;
    let centered = g.sub(stacked, g.mean(stacked)?)?;
    let variance = g.mean(g.square(centered)?)?;
    g.add(g.scale(variance, beta)?, g.sum(stacked)?)
}

fn with_constants(values: &[f64], f: impl FnOnce(&Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let out = f(&g, &vars)?;
    g.item(out)
}

/// [`mm_rex`] on plain numbers.
pub fn mm_rex_value(risks: &[f64], lambda_min: f64) -> Result<f64> {
    with_constants(risks, |g, v| mm_rex(g, v, lambda_min))
}

/// [`v_rex`] on plain numbers.
pub fn v_rex_value(risks: &[f64], beta: f64) -> Result<f64> {
    with_constants(risks, |g, v| v_rex(g, v, beta))
}

/// Cross-modality NT-Xent between gated 2D and 3D features `[batch, d]`.
///
/// Row `i` of each modality is the positive of row `i` of the other; every
/// other row of either modality is a negative. Similarities are cosines
/// multiplied by `tau`. The loss is averaged over all `2 * batch` anchors, so
/// it is symmetric in its two arguments.
pub fn nt_xent_align(g: &Graph, z2: Var, z3: Var, tau: f64) -> Result<Var> {
    let batch = g.shape(z2).first().copied().unwrap_or(0);
    if batch < 2 {
        return Err(Error::Degenerate(
            "alignment needs a batch of at least two samples".into(),
        ));
    }
    nt_xent_pairs(g, z2, z3, tau)
}

fn nt_xent_pairs(g: &Graph, z2: Var, z3: Var, tau: f64) -> Result<Var> {
    let (s2, s3) = (g.shape(z2), g.shape(z3));
    if s2 != s3 || s2.len() != 2 {
        return Err(Error::contract(format!("alignment inputs {s2:?} vs {s3:?}")));
    }
    let b = s2[0];
    let n = 2 * b;
    let z = g.concat_rows(&[z2, z3])?;
    let logits = g.scale(g.cosine_matrix(z, z)?, tau)?;
    let off_diagonal = {
        let mut m = Tensor::full(&[n, n], 1.0);
        for i in 0..n {
            m.data_mut()[i * n + i] = 0.0;
        }
        g.constant(m)
    };
    let denominator = g.sum_last(g.mul(g.exp(logits)?, off_diagonal)?)?;
    let partner: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let positive = g.gather_last(logits, &partner)?;
    g.mean(g.sub(g.log(denominator)?, positive)?)
}

/// Identifies a loss term of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    CrossEntropy,
    Invariance,
    Alignment,
}

/// One term of the objective and the parameter groups its gradient may update.
#[derive(Debug, Clone)]
pub struct Route {
    pub term: Term,
    pub loss: Var,
    pub groups: Vec<GroupId>,
}

/// Parameter groups that receive each loss term's gradient.
#[derive(Debug, Clone)]
pub struct RoutingGroups {
    pub encoders: Vec<GroupId>,
    pub invariance: Vec<GroupId>,
}

/// The summed objective and its routing plan.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub routes: Vec<Route>,
}

impl Objective {
    /// Routes merged by identical group sets: one backward root per set.
    pub fn merged_roots(&self, g: &Graph) -> Result<Vec<(Var, Vec<GroupId>)>> {
        let mut merged: Vec<(Var, Vec<GroupId>)> = Vec::new();
        for route in &self.routes {
            match merged.iter_mut().find(|(_, groups)| *groups == route.groups) {
                Some((root, _)) => *root = g.add(*root, route.loss)?,
                None => merged.push((route.loss, route.groups.clone())),
            }
        }
        Ok(merged)
    }

    pub fn groups(&self) -> Vec<GroupId> {
        let mut all: Vec<GroupId> = self.routes.iter().flat_map(|r| r.groups.clone()).collect();
        all.sort();
        all.dedup();
        all
    }
}

/// `L_CE + L_inv + alpha * L_align` with its routing: cross-entropy and
/// alignment update the encoders, the invariance loss updates only the gate
/// side. A missing invariance term (empty hard set) is simply skipped.
pub fn total_objective(
    g: &Graph,
    ce: Var,
    invariance: Option<Var>,
    align: Option<Var>,
    alpha: f64,
    groups: &RoutingGroups,
) -> Result<Objective> {
    let mut routes = vec![Route {
        term: Term::CrossEntropy,
        loss: ce,
        groups: groups.encoders.clone(),
    }];
    let mut total = ce;
    if let Some(inv) = invariance {
        routes.push(Route {
            term: Term::Invariance,
            loss: inv,
            groups: groups.invariance.clone(),
        });
        total = g.add(total, inv)?;
    }
    if let Some(align) = align {
        let weighted = g.scale(align, alpha)?;
        routes.push(Route {
            term: Term::Alignment,
            loss: weighted,
            groups: groups.encoders.clone(),
        });
        total = g.add(total, weighted)?;
    }
    Ok(Objective { total, routes })
}
