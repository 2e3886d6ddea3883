//! Toy modality encoders, the shared gate, class heads and the optional
//! multi-view and cross-attention aggregators.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; forward passes take the
//! [`ParamVars`] produced by binding that store to a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, GroupId, ParamId, ParamStore, ParamVars, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2.5d")]
    Fused,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::TwoD => "2D",
            Modality::ThreeD => "3D",
            Modality::Fused => "2.5D",
        })
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

fn check_last_dim(g: &Graph, x: Var, expected: usize, what: &str) -> Result<()> {
    let shape = g.shape(x);
    match shape.last() {
        Some(&d) if d == expected => Ok(()),
        _ => Err(Error::contract(format!(
            "{what}: expected last dimension {expected}, got shape {shape:?}"
        ))),
    }
}

/// Affine map `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        Ok(Self {
            weight: store.add(group, format!("{name}.weight"), weight),
            bias: store.add(group, format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        })
    }

    pub fn identity(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::new(
            store,
            group,
            name,
            Tensor::eye(in_dim, out_dim),
            Tensor::zeros(&[out_dim]),
        )
        .expect("consistent shapes")
    }

    pub fn random(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            store,
            group,
            name,
            gaussian(in_dim, out_dim, std, rng),
            Tensor::zeros(&[out_dim]),
        )
        .expect("consistent shapes")
    }

    /// Applies the map to `[m, in]` rows or a single `[in]` vector.
    pub fn forward(&self, g: &Graph, p: &ParamVars, x: Var) -> Result<Var> {
        check_last_dim(g, x, self.in_dim, "linear")?;
        if g.shape(x).len() == 1 {
            let row = g.reshape(x, &[1, self.in_dim])?;
            let y = g.add(g.matmul(row, p.get(self.weight))?, p.get(self.bias))?;
            g.reshape(y, &[self.out_dim])
        } else {
            g.add(g.matmul(x, p.get(self.weight))?, p.get(self.bias))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    /// Standard deviation of the hidden-stage weights, scaled by `1/sqrt(input_dim)`.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_layers: 2,
            output_dim: 16,
            init_std: 0.1,
        }
    }
}

/// A stack of residual `h + relu(affine(h))` stages followed by an
/// identity-initialised projection to the shared output dimension.
///
/// Near initialisation the encoder is close to the identity, so output
/// coordinate `i` still corresponds to input feature `i`.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub stages: Vec<Linear>,
    pub projection: Linear,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModalityEncoder {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        modality: Modality,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = format!("enc{modality}");
        let std = cfg.init_std / (cfg.input_dim as f64).sqrt();
        let stages = (0..cfg.hidden_layers)
            .map(|i| {
                Linear::random(
                    store,
                    group,
                    &format!("{prefix}.stage{i}"),
                    cfg.input_dim,
                    cfg.input_dim,
                    std,
                    rng,
                )
            })
            .collect();
        let projection = Linear::identity(
            store,
            group,
            &format!("{prefix}.proj"),
            cfg.input_dim,
            cfg.output_dim,
        );
        Self {
            modality,
            stages,
            projection,
            input_dim: cfg.input_dim,
            output_dim: cfg.output_dim,
        }
    }

    /// Encodes `[m, input_dim]` rows (or one `[input_dim]` vector).
    pub fn forward(&self, g: &Graph, p: &ParamVars, x: Var) -> Result<Var> {
        check_last_dim(g, x, self.input_dim, "encoder input")?;
        let mut h = x;
        for stage in &self.stages {
            h = g.add(h, g.relu(stage.forward(g, p, h)?)?)?;
        }
        self.projection.forward(g, p, h)
    }
}

/// Encodes 3D features: `x3 = E_3D(features)`.
pub fn encode_3d(g: &Graph, p: &ParamVars, encoder: &ModalityEncoder, features: Var) -> Result<Var> {
    encoder.forward(g, p, features)
}

/// The rendered-view features of one sample, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    views: Tensor,
}

impl ViewSet {
    pub fn new(views: &[Vec<f64>]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::contract("view set must contain at least one view"));
        }
        Ok(Self {
            views: Tensor::from_rows(views)?,
        })
    }

    pub fn len(&self) -> usize {
        self.views.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.views.shape()[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.views
    }
}

/// Row-averaging matrix `[groups, groups * size]` that means consecutive
/// blocks of `size` rows.
pub fn block_mean_matrix(groups: usize, size: usize) -> Tensor {
    let mut m = Tensor::zeros(&[groups, groups * size]);
    let w = 1.0 / size as f64;
    for i in 0..groups {
        for j in 0..size {
            m.data_mut()[i * groups * size + i * size + j] = w;
        }
    }
    m
}

/// Encodes every view of one sample and averages them into `x2`.
pub fn encode_2d(g: &Graph, p: &ParamVars, encoder: &ModalityEncoder, views: &ViewSet) -> Result<(Var, Var)> {
    let input = g.constant(views.as_tensor().clone());
    let per_view = encoder.forward(g, p, input)?;
    let x2 = g.mean_rows(per_view)?;
    Ok((per_view, x2))
}

/// Batched [`encode_2d`]: `views` holds `batch * n` rows, grouped per sample.
/// Returns per-view features `[batch * n, d]` and `x2` as `[batch, d]`.
pub fn encode_2d_batch(
    g: &Graph,
    p: &ParamVars,
    encoder: &ModalityEncoder,
    views: Var,
    n: usize,
) -> Result<(Var, Var)> {
    let rows = g.shape(views)[0];
    if n == 0 || !rows.is_multiple_of(n) {
        return Err(Error::contract(format!("{rows} view rows not divisible by {n}")));
    }
    let per_view = encoder.forward(g, p, views)?;
    let avg = g.constant(block_mean_matrix(rows / n, n));
    let x2 = g.matmul(avg, per_view)?;
    Ok((per_view, x2))
}

/// Learnable soft mask `G(x) = sigmoid(logits) * x`, shared by all modalities.
#[derive(Debug, Clone)]
pub struct GateMask {
    pub logits: ParamId,
    pub dim: usize,
}

impl GateMask {
    pub fn new(store: &mut ParamStore, group: GroupId, dim: usize) -> Self {
        Self {
            logits: store.add(group, "gate.logits", Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn apply(&self, g: &Graph, p: &ParamVars, x: Var) -> Result<Var> {
        check_last_dim(g, x, self.dim, "gate")?;
        let mask = g.sigmoid(p.get(self.logits))?;
        g.mul(x, mask)
    }

    /// Current mask weights `sigmoid(logits)`.
    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        store
            .value(self.logits)
            .data()
            .iter()
            .map(|&v| crate::tensor::sigmoid(v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Cosine,
    Affine,
}

/// Class prototypes producing logits from features.
///
/// Cosine mode returns `scale * cos(feature, prototype_c)`; affine mode
/// returns `feature . prototype_c + bias_c`.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub prototypes: ParamId,
    pub bias: Option<ParamId>,
    pub mode: HeadMode,
    pub scale: f64,
    pub classes: usize,
    pub dim: usize,
}

impl ClassHead {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        prototypes: Tensor,
        mode: HeadMode,
        scale: f64,
    ) -> Result<Self> {
        if prototypes.rank() != 2 {
            return Err(Error::shape("class_head", format!("{:?}", prototypes.shape())));
        }
        let (classes, dim) = (prototypes.shape()[0], prototypes.shape()[1]);
        let bias = match mode {
            HeadMode::Affine => Some(store.add(group, format!("{name}.bias"), Tensor::zeros(&[classes]))),
            HeadMode::Cosine => None,
        };
        Ok(Self {
            prototypes: store.add(group, format!("{name}.prototypes"), prototypes),
            bias,
            mode,
            scale,
            classes,
            dim,
        })
    }

    pub fn random(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        classes: usize,
        dim: usize,
        mode: HeadMode,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self::new(store, group, name, gaussian(classes, dim, std, rng), mode, scale)
            .expect("rank-2 prototypes")
    }

    /// Logits `[m, classes]` for `[m, dim]` features. A zero-norm feature in
    /// cosine mode is a numeric error.
    pub fn classify(&self, g: &Graph, p: &ParamVars, features: Var) -> Result<Var> {
        check_last_dim(g, features, self.dim, "classify")?;
        let x = if g.shape(features).len() == 1 {
            g.reshape(features, &[1, self.dim])?
        } else {
            features
        };
        let protos = p.get(self.prototypes);
        match self.mode {
            HeadMode::Cosine => {
                let cos = g.cosine_matrix(x, protos)?;
                if self.scale == 1.0 {
                    Ok(cos)
                } else {
                    g.scale(cos, self.scale)
                }
            }
            HeadMode::Affine => {
                let logits = g.matmul(x, g.transpose(protos)?)?;
                match self.bias {
                    Some(b) => g.add(logits, p.get(b)),
                    None => Ok(logits),
                }
            }
        }
    }

    /// 2D-branch logits: classify each view, then average per sample.
    /// `per_view` holds `batch * n` rows grouped per sample.
    pub fn classify_views(&self, g: &Graph, p: &ParamVars, per_view: Var, n: usize) -> Result<Var> {
        let rows = g.shape(per_view)[0];
        if n == 0 || !rows.is_multiple_of(n) {
            return Err(Error::contract(format!("{rows} view rows not divisible by {n}")));
        }
        let logits = self.classify(g, p, per_view)?;
        let avg = g.constant(block_mean_matrix(rows / n, n));
        g.matmul(avg, logits)
    }
}

/// Multi-view adapter blending a global MLP summary of all views with an
/// affinity-weighted view average: `F = (1 - delta) F_global + delta F_view`.
#[derive(Debug, Clone)]
pub struct MultiViewAdapter {
    pub f1: Linear,
    pub f2: Linear,
    pub proj: Linear,
    pub views: usize,
    pub dim: usize,
    pub delta: f64,
}

impl MultiViewAdapter {
    pub fn new(
        store: &mut ParamStore,
        group: GroupId,
        views: usize,
        dim: usize,
        hidden: usize,
        delta: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_delta(delta)?;
        let std1 = 1.0 / ((views * dim) as f64).sqrt();
        let std2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            f1: Linear::random(store, group, "mv.f1", views * dim, hidden, std1, rng),
            f2: Linear::random(store, group, "mv.f2", hidden, dim, std2, rng),
            proj: Linear::identity(store, group, "mv.proj", dim, dim),
            views,
            dim,
            delta,
        })
    }

    /// Aggregates `[views, dim]` per-view features into one `[dim]` vector.
    pub fn aggregate(&self, g: &Graph, p: &ParamVars, per_view: Var) -> Result<Var> {
        multi_view_aggregate(g, p, self, per_view, self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::contract(format!("mix coefficient {delta} outside [0, 1]")))
    }
}

/// View weights: softmax over the row means of the cosine affinity matrix.
pub fn view_weights(g: &Graph, per_view: Var) -> Result<Var> {
    let n = g.shape(per_view)[0];
    let affinity = g.cosine_matrix(per_view, per_view)?;
    let row_means = g.scale(g.sum_last(affinity)?, 1.0 / n as f64)?;
    g.softmax(row_means)
}

pub fn multi_view_aggregate(
    g: &Graph,
    p: &ParamVars,
    adapter: &MultiViewAdapter,
    per_view: Var,
    delta: f64,
) -> Result<Var> {
    check_delta(delta)?;
    let shape = g.shape(per_view);
    if shape.len() != 2 || shape[0] != adapter.views || shape[1] != adapter.dim {
        return Err(Error::contract(format!(
            "adapter expects [{}, {}] views, got {shape:?}",
            adapter.views, adapter.dim
        )));
    }
    let flat = g.reshape(per_view, &[adapter.views * adapter.dim])?;
    let global = adapter
        .f2
        .forward(g, p, g.relu(adapter.f1.forward(g, p, flat)?)?)?;

    let weights = g.reshape(view_weights(g, per_view)?, &[1, adapter.views])?;
    let projected = adapter.proj.forward(g, p, per_view)?;
    let pooled = g.reshape(g.matmul(weights, projected)?, &[adapter.dim])?;
    let view = g.relu(pooled)?;

    g.add(g.scale(global, 1.0 - delta)?, g.scale(view, delta)?)
}

/// Bidirectional cross-attention producing the 2.5D feature.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q3: ParamId,
    pub k2: ParamId,
    pub v2: ParamId,
    pub q2: ParamId,
    pub k3: ParamId,
    pub v3: ParamId,
    pub dim: usize,
}

impl CrossAttention {
    /// All six projections start at the identity.
    pub fn new(store: &mut ParamStore, group: GroupId, dim: usize) -> Self {
        let mut add = |name: &str| store.add(group, format!("xattn.{name}"), Tensor::eye(dim, dim));
        Self {
            q3: add("q3"),
            k2: add("k2"),
            v2: add("v2"),
            q2: add("q2"),
            k3: add("k3"),
            v3: add("v3"),
            dim,
        }
    }

    /// Fuses 2D tokens `[n2, d]` with 3D tokens `[n3, d]` into one `[d]` vector.
    ///
    /// The forward direction queries with 3D and attends over 2D; the reverse
    /// direction swaps roles. Each direction is mean-pooled over its query
    /// tokens and the two are averaged.
    pub fn fuse(&self, g: &Graph, p: &ParamVars, x2: Var, x3: Var) -> Result<Var> {
        let as_tokens = |x: Var| -> Result<Var> {
            check_last_dim(g, x, self.dim, "cross attention")?;
            if g.shape(x).len() == 1 {
                g.reshape(x, &[1, self.dim])
            } else {
                Ok(x)
            }
        };
        let (t2, t3) = (as_tokens(x2)?, as_tokens(x3)?);
        let attend = |q_src: Var, kv_src: Var, wq: ParamId, wk: ParamId, wv: ParamId| -> Result<Var> {
            let q = g.matmul(q_src, p.get(wq))?;
            let k = g.matmul(kv_src, p.get(wk))?;
            let v = g.matmul(kv_src, p.get(wv))?;
            let attn = g.softmax(g.matmul(q, g.transpose(k)?)?)?;
            g.mean_rows(g.matmul(attn, v)?)
        };
        let forward = attend(t3, t2, self.q3, self.k2, self.v2)?;
        let reverse = attend(t2, t3, self.q2, self.k3, self.v3)?;
        g.scale(g.add(forward, reverse)?, 0.5)
    }
}
