use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor together with its accumulated gradient and momentum
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            momentum: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate(&mut self, grad: &Tensor) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(grad),
            None => self.grad = Some(grad.clone()),
        }
    }
}

/// A named set of parameters that is updated (or frozen) as a unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Parameter>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub usize);

/// Location of one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub group: GroupId,
    pub index: usize,
}

/// Owns every parameter of a model, partitioned into groups. A parameter
/// belongs to exactly one group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

/// Graph handles for every parameter of a store, produced by
/// [`ParamStore::bind`].
pub struct ParamVars {
    vars: Vec<Vec<Var>>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.group.0][id.index]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of the named group, creating it if needed.
    pub fn group(&mut self, name: &str) -> GroupId {
        if let Some(i) = self.groups.iter().position(|g| g.name == name) {
            return GroupId(i);
        }
        self.groups.push(ParamGroup {
            name: name.to_string(),
            params: Vec::new(),
            frozen: false,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn find_group(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn add(&mut self, group: GroupId, name: impl Into<String>, value: Tensor) -> ParamId {
        let params = &mut self.groups[group.0].params;
        params.push(Parameter::new(name, value));
        ParamId {
            group,
            index: params.len() - 1,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.groups[id.group.0].params[id.index]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.groups[id.group.0].params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.param(id).value
    }

    /// Registers every parameter as a gradient-tracking leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> ParamVars {
        let vars = self
            .groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|p| graph.leaf(p.value.clone(), true))
                    .collect()
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds gradients from `grads` into the parameters of the listed groups
    /// only. Parameters that did not influence the root are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &ParamVars, groups: &[GroupId]) {
        for &gid in groups {
            for (p, &v) in self.groups[gid.0].params.iter_mut().zip(&vars.vars[gid.0]) {
                if let Some(g) = grads.get(v) {
                    p.accumulate(g);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.params.iter_mut().for_each(Parameter::zero_grad);
        }
    }

    /// Marks exactly the listed groups trainable and freezes the rest.
    pub fn set_trainable(&mut self, groups: &[GroupId]) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.frozen = !groups.contains(&GroupId(i));
        }
    }
}

/// Hyper-parameters and position of the SGD schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.epoch, self.total_epochs)
    }
}

/// Cosine-annealed learning rate with a floor of zero.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}

/// One SGD step with heavy-ball momentum and decoupled weight decay.
///
/// Frozen groups are skipped entirely: neither values nor momentum buffers
/// change. Every parameter of a non-frozen group must carry a gradient.
pub fn sgd_step(groups: &mut [ParamGroup], state: &OptimizerState) -> Result<()> {
    for group in groups.iter() {
        if group.frozen {
            continue;
        }
        if let Some(p) = group.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::contract(format!(
                "parameter {}/{} has no gradient",
                group.name, p.name
            )));
        }
    }
    let lr = state.lr();
    for group in groups.iter_mut().filter(|g| !g.frozen) {
        for p in &mut group.params {
            let grad = p.grad.as_ref().expect("checked above");
            let buf = match &mut p.momentum {
                Some(buf) => {
                    for (b, g) in buf.data_mut().iter_mut().zip(grad.data()) {
                        *b = state.momentum * *b + g;
                    }
                    buf
                }
                slot @ None => slot.insert(grad.clone()),
            };
            let decay = lr * state.weight_decay;
            for (w, b) in p.value.data_mut().iter_mut().zip(buf.data()) {
                *w -= lr * b + decay * *w;
            }
        }
    }
    Ok(())
}
