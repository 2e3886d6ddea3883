use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::data::Sample;
use crate::encoders::{
    encode_2d_batch, ClassHead, CrossAttention, EncoderConfig, GateMask, HeadMode, Modality, ModalityEncoder,
    MultiViewAdapter,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, GroupId, ParamStore, ParamVars, Tensor, Var};

pub const GROUP_2D: &str = "E_2D";
pub const GROUP_3D: &str = "E_3D";
pub const GROUP_GATE: &str = "G";
pub const GROUP_XATTN: &str = "X_25D";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelGroups {
    pub e2d: GroupId,
    pub e3d: GroupId,
    pub gate: GroupId,
    pub xattn: GroupId,
}

/// Both branches, their heads, the shared gate and the optional
/// cross-attention block, with every parameter in one store.
///
/// Each head lives in its branch's group, so the classification loss trains
/// encoder and head together.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub groups: ModelGroups,
    pub enc2: ModalityEncoder,
    pub enc3: ModalityEncoder,
    pub head2: ClassHead,
    pub head3: ClassHead,
    pub adapter: Option<MultiViewAdapter>,
    pub gate: GateMask,
    pub xattn: CrossAttention,
    pub input_dim: usize,
    pub views: usize,
    pub classes: usize,
}

/// Forward pass of one batch through both branches.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    /// Per-view 2D features `[batch * views, d]`.
    pub per_view: Var,
    /// Aggregated 2D features `[batch, d]`.
    pub x2: Var,
    pub logits2: Var,
    /// 3D features `[batch, d]`.
    pub x3: Var,
    pub logits3: Var,
}

/// Stacks the views `[batch * views, input]` and 3D inputs `[batch, input]`.
pub fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let views: Vec<Vec<f64>> = samples.iter().flat_map(|s| s.views.iter().cloned()).collect();
    let x3: Vec<Vec<f64>> = samples.iter().map(|s| s.x3.clone()).collect();
    Ok((Tensor::from_rows(&views)?, Tensor::from_rows(&x3)?))
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let gen = &cfg.generator;
        let m = &cfg.model;
        let input_dim = gen.feature_dim();
        let mut store = ParamStore::new();
        let groups = ModelGroups {
            e2d: store.group(GROUP_2D),
            e3d: store.group(GROUP_3D),
            gate: store.group(GROUP_GATE),
            xattn: store.group(GROUP_XATTN),
        };
        let enc_cfg = EncoderConfig {
            input_dim,
            hidden_layers: m.hidden_layers,
            output_dim: m.output_dim,
            init_std: m.init_std,
        };
        // Separate streams keep each branch's initialization independent of
        // whether the other branch exists.
        let mut rng2 = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng2.set_stream(1);
        let mut rng3 = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng3.set_stream(2);

        let enc2 = ModalityEncoder::new(&mut store, groups.e2d, Modality::TwoD, &enc_cfg, &mut rng2);
        let head2 = ClassHead::random(
            &mut store,
            groups.e2d,
            "head2d",
            gen.classes,
            m.output_dim,
            HeadMode::Cosine,
            m.head_scale_2d,
            &mut rng2,
        );
        let adapter = match m.adapter_delta {
            Some(delta) => Some(MultiViewAdapter::new(
                &mut store,
                groups.e2d,
                gen.views,
                m.output_dim,
                m.output_dim,
                delta,
                &mut rng2,
            )?),
            None => None,
        };
        let enc3 = ModalityEncoder::new(&mut store, groups.e3d, Modality::ThreeD, &enc_cfg, &mut rng3);
        let head3 = ClassHead::random(
            &mut store,
            groups.e3d,
            "head3d",
            gen.classes,
            m.output_dim,
            m.head_mode_3d,
            1.0,
            &mut rng3,
        );
        let gate = GateMask::new(&mut store, groups.gate, m.output_dim);
        let xattn = CrossAttention::new(&mut store, groups.xattn, m.output_dim);
        Ok(Self {
            store,
            groups,
            enc2,
            enc3,
            head2,
            head3,
            adapter,
            gate,
            xattn,
            input_dim,
            views: gen.views,
            classes: gen.classes,
        })
    }

    /// 2D branch: per-view features, aggregated features and logits.
    pub fn forward_2d(&self, g: &Graph, p: &ParamVars, views: Var) -> Result<(Var, Var, Var)> {
        let (per_view, mean) = encode_2d_batch(g, p, &self.enc2, views, self.views)?;
        match &self.adapter {
            None => {
                let logits = self.head2.classify_views(g, p, per_view, self.views)?;
                Ok((per_view, mean, logits))
            }
            Some(adapter) => {
                let batch = g.shape(per_view)[0] / self.views;
                let rows = (0..batch)
                    .map(|b| {
                        let idx: Vec<usize> = (b * self.views..(b + 1) * self.views).collect();
                        let v = adapter.aggregate(g, p, g.select_rows(per_view, &idx)?)?;
                        g.reshape(v, &[1, adapter.dim])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let x2 = g.concat_rows(&rows)?;
                let logits = self.head2.classify(g, p, x2)?;
                Ok((per_view, x2, logits))
            }
        }
    }

    /// 3D branch: features and logits.
    pub fn forward_3d(&self, g: &Graph, p: &ParamVars, x3: Var) -> Result<(Var, Var)> {
        let f = self.enc3.forward(g, p, x3)?;
        let logits = self.head3.classify(g, p, f)?;
        Ok((f, logits))
    }

    pub fn forward(&self, g: &Graph, p: &ParamVars, views: &Tensor, x3: &Tensor) -> Result<BranchOutputs> {
        self.check_inputs(views, x3)?;
        let (per_view, x2, logits2) = self.forward_2d(g, p, g.constant(views.clone()))?;
        let (x3, logits3) = self.forward_3d(g, p, g.constant(x3.clone()))?;
        Ok(BranchOutputs {
            per_view,
            x2,
            logits2,
            x3,
            logits3,
        })
    }

    fn check_inputs(&self, views: &Tensor, x3: &Tensor) -> Result<()> {
        if views.last_dim() != self.input_dim || x3.last_dim() != self.input_dim {
            return Err(Error::contract(format!(
                "model expects {}-dimensional inputs, got views {:?} and 3D {:?}",
                self.input_dim,
                views.shape(),
                x3.shape()
            )));
        }
        if views.rows() != x3.rows() * self.views {
            return Err(Error::contract(format!(
                "{} view rows for {} samples with {} views each",
                views.rows(),
                x3.rows(),
                self.views
            )));
        }
        Ok(())
    }

    /// Ungated branch logits of `samples`, one row per sample.
    pub fn logits(&self, samples: &[&Sample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (views, x3) = batch_tensors(samples)?;
        let g = Graph::new();
        let p = self.store.bind(&g);
        let out = self.forward(&g, &p, &views, &x3)?;
        let rows = |v: Var| {
            let t = g.value(v);
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>()
        };
        Ok((rows(out.logits2), rows(out.logits3)))
    }

    /// Current sigmoid gate weights.
    pub fn gate_weights(&self) -> Vec<f64> {
        self.gate.weights(&self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn branch_initialization_is_independent_of_the_other_branch() {
        let cfg = RunConfig::default();
        let a = Model::new(&cfg).unwrap();
        let mut other = cfg.clone();
        other.model.adapter_delta = Some(0.5);
        let b = Model::new(&other).unwrap();
        let group = |m: &Model, id: GroupId| m.store.groups()[id.0].params.clone();
        assert_eq!(group(&a, a.groups.e3d), group(&b, b.groups.e3d));
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let mut cfg = RunConfig::default();
        cfg.generator.per_class = 2;
        let data = generate(&cfg.generator).unwrap();
        let model = Model::new(&cfg).unwrap();
        let samples: Vec<&Sample> = data.train.iter().take(5).collect();
        let (l2, l3) = model.logits(&samples).unwrap();
        assert_eq!((l2.len(), l2[0].len()), (5, 10));
        assert_eq!((l3.len(), l3[0].len()), (5, 10));
        assert_eq!(model.gate_weights(), vec![0.5; 16]);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let model = Model::new(&RunConfig::default()).unwrap();
        let g = Graph::new();
        let p = model.store.bind(&g);
        let views = Tensor::zeros(&[4, 7]);
        let x3 = Tensor::zeros(&[1, 7]);
        assert!(matches!(
            model.forward(&g, &p, &views, &x3),
            Err(Error::Contract(_))
        ));
    }
}
