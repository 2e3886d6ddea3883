use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, RunConfig};
use super::train::{evaluate_model, train};
use crate::data::generate;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};

/// One explicit grid cell. Unset fields keep the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: Option<String>,
    pub step1: Option<bool>,
    pub step2: Option<bool>,
    pub align: Option<bool>,
    pub invariance_on_all: Option<bool>,
    pub fusion: Option<FusionMode>,
    pub phi: Option<f64>,
}

/// Cartesian product of switches. A cell with Step 2 but not Step 1 runs the
/// invariance loss on every sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub step1: Vec<bool>,
    #[serde(default)]
    pub step2: Vec<bool>,
    #[serde(default)]
    pub align: Vec<bool>,
    #[serde(default)]
    pub fusion: Vec<FusionMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Seeds shared by every cell; empty means the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cell: Vec<GridCell>,
    pub axes: Option<GridAxes>,
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Explicit cells followed by the expanded axes.
    pub fn cells(&self, base: &RunConfig) -> Vec<GridCell> {
        let mut cells = self.cell.clone();
        if let Some(axes) = &self.axes {
            let or = |v: &Vec<bool>, d: bool| if v.is_empty() { vec![d] } else { v.clone() };
            let a = &base.ablation;
            let fusions = if axes.fusion.is_empty() {
                vec![base.fusion.mode]
            } else {
                axes.fusion.clone()
            };
            for &s1 in &or(&axes.step1, a.enable_step1) {
                for &s2 in &or(&axes.step2, a.enable_step2) {
                    for &al in &or(&axes.align, a.enable_align) {
                        for &fusion in &fusions {
                            cells.push(GridCell {
                                name: None,
                                step1: Some(s1),
                                step2: Some(s2),
                                align: Some(al),
                                invariance_on_all: Some(s2 && !s1),
                                fusion: Some(fusion),
                                phi: None,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

impl GridCell {
    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let a = &mut cfg.ablation;
        a.enable_step1 = self.step1.unwrap_or(a.enable_step1);
        a.enable_step2 = self.step2.unwrap_or(a.enable_step2);
        a.enable_align = self.align.unwrap_or(a.enable_align);
        a.invariance_on_all = self.invariance_on_all.unwrap_or(a.invariance_on_all);
        cfg.fusion.mode = self.fusion.unwrap_or(cfg.fusion.mode);
        cfg.fusion.phi = self.phi.unwrap_or(cfg.fusion.phi);
        cfg
    }

    fn label(&self, cfg: &RunConfig) -> String {
        self.name.clone().unwrap_or_else(|| {
            let a = &cfg.ablation;
            let on = |b: bool| if b { "on" } else { "off" };
            format!(
                "step1={} step2={} align={} fusion={}",
                on(a.enable_step1),
                on(a.enable_step2),
                on(a.enable_align),
                cfg.fusion.mode
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub flags: AblationFlags,
    pub fusion: FusionConfig,
    pub acc2: f64,
    pub acc3: f64,
    pub acc_joint: f64,
    pub conflict_ratio: f64,
    /// The model came from an earlier cell with the same training settings.
    pub reused: bool,
}

/// Trains every cell for every seed and evaluates it on the test split.
///
/// Fusion is inference-only, so cells that differ only in fusion settings
/// share one trained model per seed.
pub fn ablate(base: &RunConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(Error::Config("ablation grid has no cells".into()));
    }
    let seeds = if grid.seeds.is_empty() {
        vec![base.seed]
    } else {
        grid.seeds.clone()
    };
    let mut rows = Vec::new();
    for &seed in &seeds {
        let seeded = base.with_seed(seed);
        let data = generate(&seeded.generator)?;
        let mut trained = HashMap::new();
        for cell in &cells {
            let cfg = cell.apply(&seeded);
            cfg.validate()?;
            let reused = trained.contains_key(&cfg.ablation);
            if !reused {
                let mut train_cfg = cfg.clone();
                train_cfg.fusion = seeded.fusion;
                trained.insert(cfg.ablation, train(&train_cfg, &data)?.model);
            }
            let eval = evaluate_model(&trained[&cfg.ablation], &data.test, &cfg.fusion)?;
            rows.push(AblationRow {
                cell: cell.label(&cfg),
                seed,
                flags: cfg.ablation,
                fusion: cfg.fusion,
                acc2: eval.acc2,
                acc3: eval.acc3,
                acc_joint: eval.acc_joint,
                conflict_ratio: eval.conflict_ratio,
                reused,
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str =
    "cell,seed,step1,step2,align,invariance_on_all,fusion,phi,acc2,acc3,acc_joint,conflict_ratio,reused";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let f = &r.flags;
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.replace('"', "\"\""),
            r.seed,
            f.enable_step1,
            f.enable_step2,
            f.enable_align,
            f.invariance_on_all,
            r.fusion.mode,
            r.fusion.phi,
            r.acc2,
            r.acc3,
            r.acc_joint,
            r.conflict_ratio,
            r.reused
        ));
    }
    out
}
