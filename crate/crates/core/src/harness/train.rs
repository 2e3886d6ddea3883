use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::metrics::MetricsRecord;
use super::model::{batch_tensors, Model};
use crate::data::{augment_3d, Augment3d, Dataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::{EvalRecord, FusionConfig};
use crate::losses::{cross_entropy, modality_irm_loss, nt_xent_align, ContrastiveBatch};
use crate::mining::{mine, mining_schedule, SelectionReport};
use crate::tensor::{
    cosine_lr, sgd_step, softmax, Graph, GroupId, OptimizerState, ParamStore, ParamVars, Tensor, Var,
};

/// Which branches a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branches {
    #[default]
    Both,
    Only2d,
    Only3d,
}

impl Branches {
    fn has_2d(self) -> bool {
        self != Branches::Only3d
    }

    fn has_3d(self) -> bool {
        self != Branches::Only2d
    }
}

/// Loss terms a single step may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTerms {
    pub ce: bool,
    pub inv: bool,
    pub align: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub ce: Option<f64>,
    pub inv: Option<f64>,
    pub align: Option<f64>,
    /// Hard samples of this batch that fed the invariance loss.
    pub hard_in_batch: usize,
    /// Groups the optimizer step was allowed to change.
    pub updated: Vec<GroupId>,
    /// Groups that received gradient from the invariance loss.
    pub inv_groups: Vec<GroupId>,
}

/// Parameter snapshots around one optimizer step, for instrumentation.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub report: &'a StepReport,
    pub before: &'a ParamStore,
    pub after: &'a ParamStore,
}

/// Deterministic seed derivation from a sequence of integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Clone)]
pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub model: Model,
    pub epoch: usize,
    pub records: Vec<MetricsRecord>,
    data: &'d Dataset,
    branches: Branches,
    hard: Vec<bool>,
    shuffle: ChaCha8Rng,
    augment: Augment3d,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Dataset) -> Result<Self> {
        Self::with_branches(cfg, data, Branches::Both)
    }

    pub fn with_branches(cfg: &RunConfig, data: &'d Dataset, branches: Branches) -> Result<Self> {
        cfg.validate()?;
        let (g, d) = (&cfg.generator, &data.config);
        if g.classes != d.classes || g.feature_dim() != d.feature_dim() || g.views != d.views {
            return Err(Error::contract(format!(
                "run expects {} classes, {} dims, {} views; dataset has {}, {}, {}",
                g.classes,
                g.feature_dim(),
                g.views,
                d.classes,
                d.feature_dim(),
                d.views
            )));
        }
        let model = Model::new(cfg)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(3);
        let a = &cfg.ablation;
        let everything = a.enable_step2 && a.invariance_on_all && !a.enable_step1;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            epoch: 0,
            records: Vec::new(),
            data,
            branches,
            hard: vec![everything; data.train.len()],
            shuffle,
            augment: Augment3d::for_generator(&data.config),
        })
    }

    pub fn hard_set(&self) -> Vec<usize> {
        (0..self.hard.len()).filter(|&i| self.hard[i]).collect()
    }

    pub fn set_hard_set(&mut self, indices: &[usize]) {
        self.hard.iter_mut().for_each(|h| *h = false);
        for &i in indices {
            self.hard[i] = true;
        }
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        let o = &self.cfg.optim;
        OptimizerState {
            base_lr: o.base_lr,
            weight_decay: o.weight_decay,
            momentum: o.momentum,
            epoch: self.epoch,
            total_epochs: o.epochs,
        }
    }

    /// Step 1: fits the loss mixtures on the training split and selects the
    /// joint-hard samples, replacing the current hard set.
    pub fn mine(&mut self) -> Result<SelectionReport> {
        let samples: Vec<&Sample> = self.data.train.iter().collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let (l2, l3) = self.model.logits(&samples)?;
        let losses = |logits: &[Vec<f64>]| -> Result<Vec<f64>> {
            let g = Graph::new();
            let v = g.constant(Tensor::from_rows(logits)?);
            Ok(g.value(cross_entropy(&g, v, &labels)?).into_data())
        };
        let probs = |logits: &[Vec<f64>]| logits.iter().map(|l| softmax(l)).collect::<Vec<_>>();
        let report = mine(
            self.epoch,
            &losses(&l2)?,
            &losses(&l3)?,
            &probs(&l2),
            &probs(&l3),
            &labels,
            &self.cfg.mining,
        )?;
        self.set_hard_set(&report.joint);
        Ok(report)
    }

    /// One optimizer step on the training samples `indices`. Any non-finite
    /// value aborts with the epoch and batch.
    pub fn step(&mut self, indices: &[usize], terms: StepTerms, batch: usize) -> Result<StepReport> {
        let epoch = self.epoch;
        self.try_step(indices, terms, batch).map_err(|e| match e {
            Error::Numeric { op, .. } => Error::NonFiniteLoss {
                term: op,
                epoch,
                batch,
            },
            e => e,
        })
    }

    fn try_step(&mut self, indices: &[usize], terms: StepTerms, batch: usize) -> Result<StepReport> {
        let data = self.data;
        let model = &self.model;
        let groups = model.groups;
        let samples: Vec<&Sample> = indices.iter().map(|&i| &data.train[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let (views, x3_in) = batch_tensors(&samples)?;
        let (use2, use3) = (self.branches.has_2d(), self.branches.has_3d());
        let loss_cfg = self.cfg.loss;
        let epoch = self.epoch;
        let non_finite = |term: &'static str| Error::NonFiniteLoss { term, epoch, batch };

        let g = Graph::new();
        let p = model.store.bind(&g);
        let two = if use2 {
            Some(model.forward_2d(&g, &p, g.constant(views))?)
        } else {
            None
        };
        let three = if use3 {
            Some(model.forward_3d(&g, &p, g.constant(x3_in.clone()))?)
        } else {
            None
        };

        let mut encoder_root: Option<Var> = None;
        let add_root = |root: &mut Option<Var>, v: Var| -> Result<()> {
            *root = Some(match *root {
                Some(r) => g.add(r, v)?,
                None => v,
            });
            Ok(())
        };
        let mut report = StepReport {
            ce: None,
            inv: None,
            align: None,
            hard_in_batch: 0,
            updated: Vec::new(),
            inv_groups: Vec::new(),
        };

        if terms.ce {
            let mut total = 0.0;
            if let Some((_, _, logits2)) = two {
                let l = g.mean(cross_entropy(&g, logits2, &labels)?)?;
                total += g.item(l)?;
                add_root(&mut encoder_root, l)?;
            }
            if let Some((_, logits3)) = three {
                let l = g.mean(cross_entropy(&g, logits3, &labels)?)?;
                total += g.item(l)?;
                add_root(&mut encoder_root, l)?;
            }
            if !total.is_finite() {
                return Err(non_finite("cross_entropy"));
            }
            report.ce = Some(total);
        }

        let both = two.zip(three);
        if terms.align && loss_cfg.alpha > 0.0 && samples.len() >= 2 {
            if let Some(((_, x2, _), (x3, _))) = both {
                let z2 = model.gate.apply(&g, &p, x2)?;
                let z3 = model.gate.apply(&g, &p, x3)?;
                let l = nt_xent_align(&g, z2, z3, loss_cfg.tau)?;
                let v = g.item(l)?;
                if !v.is_finite() {
                    return Err(non_finite("alignment"));
                }
                report.align = Some(v);
                add_root(&mut encoder_root, g.scale(l, loss_cfg.alpha)?)?;
            }
        }

        let mut inv_root = None;
        if terms.inv {
            if let Some(((per_view, _, _), (x3, _))) = both {
                let hard: Vec<usize> = (0..indices.len()).filter(|&b| self.hard[indices[b]]).collect();
                report.hard_in_batch = hard.len();
                if !hard.is_empty() {
                    match self.invariance(&g, &p, per_view, x3, &x3_in, &hard, indices, &labels) {
                        Ok(l) => {
                            let v = g.item(l)?;
                            if !v.is_finite() {
                                return Err(non_finite("invariance"));
                            }
                            report.inv = Some(v);
                            inv_root = Some(l);
                        }
                        // Too few hard samples to form positives: no invariance term.
                        Err(Error::Degenerate(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }

        let state = self.optimizer_state();
        let scale = self.cfg.optim.gate_lr_scale;
        let store = &mut self.model.store;
        if let Some(root) = encoder_root {
            let mut enc_groups = Vec::new();
            if use2 {
                enc_groups.push(groups.e2d);
            }
            if use3 {
                enc_groups.push(groups.e3d);
            }
            let grads = g.backward(root)?;
            store.accumulate(&grads, &p, &enc_groups);
            report.updated.extend(enc_groups);
        }
        if let Some(root) = inv_root {
            let mut inv_groups = vec![groups.gate];
            if loss_cfg.include_25d {
                inv_groups.push(groups.xattn);
            }
            let grads = g.backward(root)?;
            store.accumulate(&grads, &p, &inv_groups);
            report.inv_groups = inv_groups.clone();
            report.updated.extend(inv_groups);
        }
        if !report.updated.is_empty() {
            if scale != 1.0 && report.updated.contains(&groups.gate) {
                let rest: Vec<GroupId> = report
                    .updated
                    .iter()
                    .copied()
                    .filter(|&g| g != groups.gate)
                    .collect();
                store.set_trainable(&rest);
                sgd_step(store.groups_mut(), &state)?;
                store.set_trainable(&[groups.gate]);
                let gate_state = OptimizerState {
                    base_lr: state.base_lr * scale,
                    ..state
                };
                sgd_step(store.groups_mut(), &gate_state)?;
            } else {
                store.set_trainable(&report.updated);
                sgd_step(store.groups_mut(), &state)?;
            }
        }
        store.zero_grad();
        let all: Vec<GroupId> = (0..store.groups().len()).map(GroupId).collect();
        store.set_trainable(&all);
        Ok(report)
    }

    /// Invariance loss over the hard positions `hard` of the current batch.
    #[allow(clippy::too_many_arguments)]
    fn invariance(
        &self,
        g: &Graph,
        p: &ParamVars,
        per_view: Var,
        x3: Var,
        x3_in: &Tensor,
        hard: &[usize],
        indices: &[usize],
        labels: &[usize],
    ) -> Result<Var> {
        let model = &self.model;
        let n = model.views;
        let copies = self.cfg.loss.augment_copies;
        let gate = |v: Var| model.gate.apply(g, p, v);

        let view_rows: Vec<usize> = hard.iter().flat_map(|&h| h * n..(h + 1) * n).collect();
        let view_labels: Vec<usize> = hard.iter().flat_map(|&h| vec![labels[h]; n]).collect();
        let env2 = ContrastiveBatch {
            features: gate(g.select_rows(per_view, &view_rows)?)?,
            labels: view_labels,
        };

        let originals = g.select_rows(x3, hard)?;
        let mut parts3 = vec![originals];
        let mut labels3: Vec<usize> = hard.iter().map(|&h| labels[h]).collect();
        let mut augmented = None;
        if copies > 0 {
            let mut rows = Vec::with_capacity(hard.len() * copies);
            for c in 0..copies {
                for &h in hard {
                    let seed = mix_seed(&[self.cfg.seed, self.epoch as u64, indices[h] as u64, c as u64]);
                    rows.push(augment_3d(x3_in.row(h), &self.augment, seed));
                    labels3.push(labels[h]);
                }
            }
            let enc = model.enc3.forward(g, p, g.constant(Tensor::from_rows(&rows)?))?;
            parts3.push(enc);
            augmented = Some(enc);
        }
        let env3 = ContrastiveBatch {
            features: gate(g.concat_rows(&parts3)?)?,
            labels: labels3,
        };

        let mut envs = vec![env2, env3];
        if self.cfg.loss.include_25d {
            let mut fused = Vec::new();
            let mut labels25 = Vec::new();
            for (k, &h) in hard.iter().enumerate() {
                let tokens2 = g.select_rows(per_view, &(h * n..(h + 1) * n).collect::<Vec<_>>())?;
                let mut partners = vec![g.select_rows(x3, &[h])?];
                if let Some(aug) = augmented {
                    partners.push(g.select_rows(aug, &[k])?);
                }
                for t3 in partners {
                    let v = model.xattn.fuse(g, p, tokens2, t3)?;
                    fused.push(g.reshape(v, &[1, model.xattn.dim])?);
                    labels25.push(labels[h]);
                }
            }
            envs.push(ContrastiveBatch {
                features: gate(g.concat_rows(&fused)?)?,
                labels: labels25,
            });
        }
        Ok(modality_irm_loss(g, &envs, &self.cfg.loss.irm())?.total)
    }

    /// Test-split evaluation with ungated branch logits.
    pub fn evaluate(&self, fusion: &FusionConfig) -> Result<EvalRecord> {
        evaluate_model(&self.model, &self.data.test, fusion)
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        self.run_epoch_observed(None)
    }

    /// Runs one epoch: optional mining, one pass of shuffled batches, then a
    /// test evaluation. `observer` sees every optimizer step.
    pub fn run_epoch_observed(
        &mut self,
        mut observer: Option<&mut dyn FnMut(&StepEvent)>,
    ) -> Result<MetricsRecord> {
        let a = self.cfg.ablation;
        let m = self.cfg.mining;
        let selection = if a.enable_step1 && mining_schedule(self.epoch, m.warmup, m.period) {
            Some(self.mine()?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let terms = StepTerms {
            ce: true,
            inv: a.enable_step2,
            align: a.enable_align,
        };
        let (mut ce, mut inv, mut align) = (Vec::new(), Vec::new(), Vec::new());
        let mut steps = 0;
        for (b, chunk) in order.chunks(self.cfg.optim.batch_size).enumerate() {
            let before = observer.as_ref().map(|_| self.model.store.clone());
            let report = self.step(chunk, terms, b)?;
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(&StepEvent {
                    epoch: self.epoch,
                    batch: b,
                    report: &report,
                    before,
                    after: &self.model.store,
                });
            }
            ce.extend(report.ce);
            inv.extend(report.inv);
            align.extend(report.align);
            steps += 1;
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let eval = self.evaluate(&self.cfg.fusion)?;
        let weights = self.model.gate_weights();
        let split = self.cfg.generator.invariant_dims.min(weights.len());
        let avg = |w: &[f64]| {
            if w.is_empty() {
                0.0
            } else {
                w.iter().sum::<f64>() / w.len() as f64
            }
        };
        let record = MetricsRecord {
            epoch: self.epoch,
            lr: cosine_lr(self.cfg.optim.base_lr, self.epoch, self.cfg.optim.epochs),
            loss_ce: mean(&ce).unwrap_or(0.0),
            loss_inv: mean(&inv),
            loss_align: mean(&align),
            steps,
            steps_with_inv: inv.len(),
            hard_set_size: self.hard.iter().filter(|&&h| h).count(),
            gate_invariant_mean: avg(&weights[..split]),
            gate_confounder_mean: avg(&weights[split..]),
            eval: eval.summary(),
            selection,
        };
        self.records.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.cfg.optim.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Evaluates `model` on `samples` with ungated branch logits.
pub fn evaluate_model(model: &Model, samples: &[Sample], fusion: &FusionConfig) -> Result<EvalRecord> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (l2, l3) = model.logits(&refs)?;
    EvalRecord::from_logits(&l2, &l3, &labels, fusion)
}

/// Result of a complete training run.
pub struct TrainRun {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub epoch: usize,
    pub optimizer: OptimizerState,
}

/// Trains a model on `data` for the configured number of epochs.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainRun> {
    train_branches(cfg, data, Branches::Both)
}

pub fn train_branches(cfg: &RunConfig, data: &Dataset, branches: Branches) -> Result<TrainRun> {
    let mut t = Trainer::with_branches(cfg, data, branches)?;
    t.run()?;
    let optimizer = t.optimizer_state();
    Ok(TrainRun {
        epoch: t.epoch,
        optimizer,
        records: t.records,
        model: t.model,
    })
}

/// Logits of the whole training split, for diagnostics.
pub fn train_logits(model: &Model, data: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let refs: Vec<&Sample> = data.train.iter().collect();
    model.logits(&refs)
}
