use std::path::Path;

use super::config::RunConfig;
use super::model::Model;
use crate::container::{format_error, ByteWriter, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::tensor::{OptimizerState, ParamStore, Tensor};

const MAGIC: [u8; 8] = *b"IJCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Trained parameters with the configuration and optimizer position that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, model: &Model, optimizer: OptimizerState, epoch: usize) -> Self {
        Self {
            config: config.clone(),
            store: model.store.clone(),
            optimizer,
            epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ContainerWriter::new(MAGIC, CHECKPOINT_VERSION);
        w.section("config", serde_json::to_vec(&self.config)?);
        let mut params = ByteWriter::default();
        let groups = self.store.groups();
        params.u64(groups.len() as u64);
        for group in groups {
            params.string(&group.name);
            params.u64(group.params.len() as u64);
            for p in &group.params {
                params.string(&p.name);
                write_tensor(&mut params, &p.value);
                match &p.momentum {
                    Some(m) => {
                        params.u8(1);
                        write_tensor(&mut params, m);
                    }
                    None => params.u8(0),
                }
            }
        }
        w.section("params", params.0);
        let o = &self.optimizer;
        let mut opt = ByteWriter::default();
        opt.f64s(&[o.base_lr, o.weight_decay, o.momentum]);
        opt.u64(o.epoch as u64);
        opt.u64(o.total_epochs as u64);
        w.section("optimizer", opt.0);
        let mut epoch = ByteWriter::default();
        epoch.u64(self.epoch as u64);
        w.section("epoch", epoch.0);
        Ok(w.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, MAGIC, WHAT)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(format_error(
                WHAT,
                format!(
                    "version {} is not supported (expected {CHECKPOINT_VERSION})",
                    c.version
                ),
            ));
        }
        let config: RunConfig = serde_json::from_slice(c.get("config")?)?;

        let mut r = c.reader("params")?;
        let mut store = ParamStore::new();
        for _ in 0..r.u64()? {
            let gid = store.group(&r.string()?);
            for _ in 0..r.u64()? {
                let name = r.string()?;
                let value = read_tensor(&mut r)?;
                let id = store.add(gid, name, value);
                if r.u8()? == 1 {
                    store.param_mut(id).momentum = Some(read_tensor(&mut r)?);
                }
            }
        }
        r.finish()?;

        let mut r = c.reader("optimizer")?;
        let v = r.f64s(3)?;
        let optimizer = OptimizerState {
            base_lr: v[0],
            weight_decay: v[1],
            momentum: v[2],
            epoch: r.u64()? as usize,
            total_epochs: r.u64()? as usize,
        };
        r.finish()?;
        let mut r = c.reader("epoch")?;
        let epoch = r.u64()? as usize;
        r.finish()?;
        Ok(Self {
            config,
            store,
            optimizer,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored parameters into `model`, which must have exactly
    /// the same groups, names and shapes.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        check_layout(&model.store, &self.store)?;
        model.store = self.store.clone();
        Ok(())
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u64(t.shape().len() as u64);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut crate::container::ByteReader) -> Result<Tensor> {
    let rank = r.u64()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape.iter().product();
    Tensor::new(shape, r.f64s(n)?)
}

/// Names the first array whose group, name or shape differs.
fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    let (eg, fg) = (expected.groups(), found.groups());
    for (i, e) in eg.iter().enumerate() {
        let Some(f) = fg.get(i) else {
            return Err(Error::contract(format!("checkpoint lacks group {}", e.name)));
        };
        if f.name != e.name {
            return Err(Error::contract(format!(
                "checkpoint group {} where {} was expected",
                f.name, e.name
            )));
        }
        for (j, ep) in e.params.iter().enumerate() {
            let Some(fp) = f.params.get(j) else {
                return Err(Error::contract(format!(
                    "checkpoint lacks array {}/{}",
                    e.name, ep.name
                )));
            };
            if fp.name != ep.name {
                return Err(Error::contract(format!(
                    "checkpoint array {}/{} where {}/{} was expected",
                    f.name, fp.name, e.name, ep.name
                )));
            }
            if fp.value.shape() != ep.value.shape() {
                return Err(Error::contract(format!(
                    "array {}/{} has shape {:?} in the checkpoint, model expects {:?}",
                    e.name,
                    ep.name,
                    fp.value.shape(),
                    ep.value.shape()
                )));
            }
        }
        if let Some(extra) = f.params.get(e.params.len()) {
            return Err(Error::contract(format!(
                "unexpected array {}/{}",
                f.name, extra.name
            )));
        }
    }
    if let Some(extra) = fg.get(eg.len()) {
        return Err(Error::contract(format!("unexpected group {}", extra.name)));
    }
    Ok(())
}
