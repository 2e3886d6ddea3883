//! Late fusion of the two branch outputs and the evaluation metrics built on
//! the resulting predictions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FusionMode {
    /// `softmax(f2 / phi) * softmax(f3)`, elementwise.
    #[default]
    #[serde(rename = "mul")]
    Multiplicative,
    /// `softmax(f2 / phi) + softmax(f3)`.
    #[serde(rename = "add")]
    Additive,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(Self::Multiplicative),
            "add" => Ok(Self::Additive),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Multiplicative => "mul",
            Self::Additive => "add",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Temperature applied to the 2D logits.
    pub phi: f64,
    pub mode: FusionMode,
    /// Rescales fused scores to sum to one. Never changes the prediction.
    pub renormalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            phi: 1.0,
            mode: FusionMode::Multiplicative,
            renormalize: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi must be positive, got {}", self.phi)));
        }
        Ok(())
    }
}

/// Fused class scores of one sample.
pub fn fuse(f2: &[f64], f3: &[f64], cfg: &FusionConfig) -> Result<Vec<f64>> {
    if f2.len() != f3.len() || f2.is_empty() {
        return Err(Error::contract(format!(
            "fusion of {} and {} class scores",
            f2.len(),
            f3.len()
        )));
    }
    cfg.validate()?;
    if f2.iter().chain(f3).any(|v| !v.is_finite()) {
        return Err(Error::numeric("fuse", "non-finite logits"));
    }
    let scaled: Vec<f64> = f2.iter().map(|v| v / cfg.phi).collect();
    let (p2, p3) = (softmax(&scaled), softmax(f3));
    let mut scores: Vec<f64> = match cfg.mode {
        FusionMode::Multiplicative => p2.iter().zip(&p3).map(|(a, b)| a * b).collect(),
        FusionMode::Additive => p2.iter().zip(&p3).map(|(a, b)| a + b).collect(),
    };
    if cfg.renormalize {
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            scores.iter_mut().for_each(|s| *s /= total);
        }
    }
    Ok(scores)
}

/// Highest-scoring class, ties resolved towards the smaller index.
pub fn predict(scores: &[f64]) -> usize {
    argmax(scores)
}

fn check_lengths(lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(Error::contract(format!("sequence lengths differ: {lens:?}")));
    }
    Ok(())
}

/// Fraction of samples that at least one branch gets right but the joint
/// prediction gets wrong.
pub fn conflict_ratio(pred2: &[usize], pred3: &[usize], joint: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(&[pred2.len(), pred3.len(), joint.len(), labels.len()])?;
    if labels.is_empty() {
        return Err(Error::contract("conflict ratio of an empty set"));
    }
    let conflicts = (0..labels.len())
        .filter(|&i| {
            let y = labels[i];
            (pred2[i] == y || pred3[i] == y) && joint[i] != y
        })
        .count();
    Ok(conflicts as f64 / labels.len() as f64)
}

/// `m[i][j]` counts samples labelled `i` and predicted `j`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    check_lengths(&[preds.len(), labels.len()])?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::contract(format!(
                "class id out of range: label {y}, prediction {p}, {classes} classes"
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-sample predictions of both branches and the fusion, plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub labels: Vec<usize>,
    pub pred2: Vec<usize>,
    pub pred3: Vec<usize>,
    pub pred_joint: Vec<usize>,
    pub acc2: f64,
    pub acc3: f64,
    pub acc_joint: f64,
    pub conflict_ratio: f64,
    pub confusion2: Vec<Vec<u64>>,
    pub confusion3: Vec<Vec<u64>>,
    pub confusion_joint: Vec<Vec<u64>>,
}

impl EvalRecord {
    pub fn from_predictions(
        labels: Vec<usize>,
        pred2: Vec<usize>,
        pred3: Vec<usize>,
        pred_joint: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            acc2: accuracy(&pred2, &labels),
            acc3: accuracy(&pred3, &labels),
            acc_joint: accuracy(&pred_joint, &labels),
            conflict_ratio: conflict_ratio(&pred2, &pred3, &pred_joint, &labels)?,
            confusion2: confusion_matrix(&pred2, &labels, classes)?,
            confusion3: confusion_matrix(&pred3, &labels, classes)?,
            confusion_joint: confusion_matrix(&pred_joint, &labels, classes)?,
            labels,
            pred2,
            pred3,
            pred_joint,
        })
    }

    /// Builds the record from raw branch logits, one row per sample.
    pub fn from_logits(
        logits2: &[Vec<f64>],
        logits3: &[Vec<f64>],
        labels: &[usize],
        cfg: &FusionConfig,
    ) -> Result<Self> {
        check_lengths(&[logits2.len(), logits3.len(), labels.len()])?;
        let classes = logits2.first().map_or(0, Vec::len);
        let pred2 = logits2.iter().map(|l| predict(l)).collect();
        let pred3 = logits3.iter().map(|l| predict(l)).collect();
        let joint = logits2
            .iter()
            .zip(logits3)
            .map(|(a, b)| fuse(a, b, cfg).map(|s| predict(&s)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_predictions(labels.to_vec(), pred2, pred3, joint, classes)
    }

    pub fn classes(&self) -> usize {
        self.confusion_joint.len()
    }

    /// Aggregates only, for the metrics log.
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            acc2: self.acc2,
            acc3: self.acc3,
            acc_joint: self.acc_joint,
            conflict_ratio: self.conflict_ratio,
            confusion2: self.confusion2.clone(),
            confusion3: self.confusion3.clone(),
            confusion_joint: self.confusion_joint.clone(),
        }
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,label,pred2,pred3,pred_joint\n");
        for i in 0..self.labels.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{}",
                self.labels[i], self.pred2[i], self.pred3[i], self.pred_joint[i]
            );
        }
        out
    }

    /// Writes `samples.csv` and the three confusion matrices into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))
        };
        write("samples.csv", self.samples_csv())?;
        write("confusion_2d.csv", confusion_csv(&self.confusion2))?;
        write("confusion_3d.csv", confusion_csv(&self.confusion3))?;
        write("confusion_joint.csv", confusion_csv(&self.confusion_joint))
    }
}

/// Aggregate metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub acc2: f64,
    pub acc3: f64,
    pub acc_joint: f64,
    pub conflict_ratio: f64,
    pub confusion2: Vec<Vec<u64>>,
    pub confusion3: Vec<Vec<u64>>,
    pub confusion_joint: Vec<Vec<u64>>,
}

/// Dense integer CSV, one matrix row per line, no header.
pub fn confusion_csv(m: &[Vec<u64>]) -> String {
    m.iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            cells.join(",") + "\n"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mul(phi: f64) -> FusionConfig {
        FusionConfig {
            phi,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn fuse_examples() {
        let s = fuse(&[0.0, 0.0], &[0.0, 0.0], &mul(1.0)).unwrap();
        assert_eq!(s, vec![0.25, 0.25]);

        let s = fuse(&[2f64.ln(), 0.0], &[0.0, 2f64.ln()], &mul(1.0)).unwrap();
        assert!((s[0] - 2.0 / 9.0).abs() < 1e-15 && (s[1] - 2.0 / 9.0).abs() < 1e-15);

        let f2 = [5.0, 0.0, 1.0];
        let f3 = [0.0, 0.5, 0.2];
        assert_eq!(
            predict(&fuse(&f2, &f3, &mul(1e6)).unwrap()),
            predict(&softmax(&f3))
        );

        assert!(matches!(
            fuse(&[f64::NAN, 0.0], &[0.0, 0.0], &mul(1.0)),
            Err(Error::Numeric { .. })
        ));
        assert!(fuse(&[0.0], &[0.0, 1.0], &mul(1.0)).is_err());
        assert!(fuse(&[0.0], &[0.0], &mul(0.0)).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.5, 0.5]), 0);
    }

    #[test]
    fn conflict_ratio_examples() {
        let labels = vec![0; 10];
        let correct =
            |set: &[usize]| -> Vec<usize> { (0..10).map(|i| if set.contains(&i) { 0 } else { 1 }).collect() };
        let r = conflict_ratio(&correct(&[1, 2, 3]), &correct(&[3, 4]), &correct(&[3]), &labels).unwrap();
        assert!((r - 0.3).abs() < 1e-15);
        assert_eq!(conflict_ratio(&labels, &labels, &labels, &labels).unwrap(), 0.0);
        let r = conflict_ratio(&correct(&[1]), &correct(&[2]), &correct(&[1, 2, 5]), &labels).unwrap();
        assert_eq!(r, 0.0);
        assert!(matches!(
            conflict_ratio(&[0], &[0], &[0], &[0, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn confusion_examples() {
        let labels = [0, 0, 1, 2, 2, 2];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 1, 0], vec![0, 0, 3]]);
        let m = confusion_matrix(&[1; 6], &labels, 3).unwrap();
        assert_eq!(m, vec![vec![0, 2, 0], vec![0, 1, 0], vec![0, 3, 0]]);

        let preds = [2, 0, 1, 2, 0, 2];
        let m = confusion_matrix(&preds, &labels, 3).unwrap();
        // Tally by hand: (0,2) (0,0) (1,1) (2,2) (2,0) (2,2).
        assert_eq!(m, vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 0, 2]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert_eq!(confusion_csv(&m), "1,0,1\n0,1,0\n1,0,2\n");
    }

    #[test]
    fn record_tallies() {
        let l2 = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]];
        let l3 = vec![vec![0.0, 3.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let rec = EvalRecord::from_logits(&l2, &l3, &[0, 1, 0], &mul(1.0)).unwrap();
        assert_eq!(rec.pred2, vec![0, 1, 0]);
        assert_eq!(rec.pred3, vec![1, 1, 0]);
        assert_eq!(rec.pred_joint, vec![1, 1, 0]);
        assert!((rec.conflict_ratio - 1.0 / 3.0).abs() < 1e-15);
        for row in 0..2 {
            let count = rec.labels.iter().filter(|&&y| y == row).count() as u64;
            assert_eq!(rec.confusion_joint[row].iter().sum::<u64>(), count);
        }
        assert!(rec
            .samples_csv()
            .starts_with("index,label,pred2,pred3,pred_joint\n0,0,0,1,1\n"));
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn shift_invariance(f2 in logits(6), f3 in logits(6), c in -50.0f64..50.0) {
            let base = fuse(&f2, &f3, &mul(0.7)).unwrap();
            let shifted: Vec<f64> = f2.iter().map(|v| v + c).collect();
            let again = fuse(&shifted, &f3, &mul(0.7)).unwrap();
            for (a, b) in base.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn renormalization_keeps_argmax(f2 in logits(5), f3 in logits(5)) {
            let raw = fuse(&f2, &f3, &mul(1.0)).unwrap();
            let cfg = FusionConfig { renormalize: true, ..mul(1.0) };
            let norm = fuse(&f2, &f3, &cfg).unwrap();
            prop_assert_eq!(predict(&raw), predict(&norm));
            prop_assert!((norm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sharper_phi_never_lowers_the_peak(f2 in logits(5), a in 0.1f64..10.0, b in 0.1f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let peak = |phi: f64| {
                let s: Vec<f64> = f2.iter().map(|v| v / phi).collect();
                softmax(&s).into_iter().fold(f64::NEG_INFINITY, f64::max)
            };
            prop_assert!(peak(hi) <= peak(lo) + 1e-15);
        }

        #[test]
        fn fusion_modes_agree_when_branches_agree(f2 in logits(5), mut f3 in logits(5)) {
            // Move the 3D peak onto the 2D peak so both branches agree.
            let (i, j) = (predict(&f2), predict(&f3));
            f3.swap(i, j);
            prop_assert_eq!(predict(&softmax(&f3)), i);
            let add = FusionConfig { mode: FusionMode::Additive, ..mul(1.0) };
            prop_assert_eq!(
                predict(&fuse(&f2, &f3, &mul(1.0)).unwrap()),
                predict(&fuse(&f2, &f3, &add).unwrap())
            );
        }
    }
}
