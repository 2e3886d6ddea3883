//! Synthetic two-modality testbed.
//!
//! Each sample carries a class feature `z_c` shared by both modalities and a
//! per-modality confounder `z_d`. For a `p_conflict` fraction of samples the
//! confounders point at two different wrong classes, one per modality, which
//! plants joint-hard samples by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{format_error, ByteWriter, Container, ContainerWriter};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: [u8; 8] = *b"IJDATA\0\0";
const TEXT_HEADER: &str = "invjoint-dataset text";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Test samples per class.
    pub test_per_class: usize,
    /// Dimensions of the shared class feature.
    pub invariant_dims: usize,
    /// Confounder dimensions per modality.
    pub confounder_dims: usize,
    pub views: usize,
    pub sigma_c: f64,
    pub sigma_d: f64,
    pub p_conflict: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 16,
            test_per_class: 16,
            invariant_dims: 8,
            confounder_dims: 8,
            views: 4,
            sigma_c: 0.3,
            sigma_d: 0.1,
            p_conflict: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn feature_dim(&self) -> usize {
        self.invariant_dims + self.confounder_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("generator needs at least two classes"));
        }
        if self.p_conflict > 0.0 && self.classes < 3 {
            return Err(Error::contract("conflicting samples need at least three classes"));
        }
        if !(0.0..=1.0).contains(&self.p_conflict) {
            return Err(Error::contract(format!(
                "p_conflict {} outside [0, 1]",
                self.p_conflict
            )));
        }
        if self.per_class == 0 || self.test_per_class == 0 {
            return Err(Error::contract("each split needs samples per class"));
        }
        if self.invariant_dims == 0 || self.confounder_dims == 0 || self.views == 0 {
            return Err(Error::contract("dimensions and view count must be positive"));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_d >= 0.0) {
            return Err(Error::contract("noise scales must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x3: Vec<f64>,
    pub views: Vec<Vec<f64>>,
    pub label: usize,
    pub planted_hard: bool,
    /// Wrong classes the 2D and 3D confounders point at.
    pub hard_targets: Option<(usize, usize)>,
}

/// Ground-truth means the samples were drawn around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    /// `[classes][invariant_dims]`.
    pub class_means: Vec<Vec<f64>>,
    /// `[classes][confounder_dims]` for the 2D modality.
    pub confounders_2d: Vec<Vec<f64>>,
    /// `[classes][confounder_dims]` for the 3D modality.
    pub confounders_3d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub meta: Option<GeneratorMeta>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Independent random stream for one `(split, class)` cell.
fn cell_rng(seed: u64, split: Split, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_index = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    rng.set_stream(1 + 2 * class as u64 + split_index);
    rng
}

fn noisy(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Two distinct wrong classes, uniformly among all such pairs.
fn distinct_wrong(rng: &mut ChaCha8Rng, label: usize, classes: usize) -> (usize, usize) {
    let pick = |rng: &mut ChaCha8Rng, exclude: &[usize]| loop {
        let c = rng.random_range(0..classes);
        if !exclude.contains(&c) {
            return c;
        }
    };
    let r2 = pick(rng, &[label]);
    let r3 = pick(rng, &[label, r2]);
    (r2, r3)
}

/// Independent draws around a sample's 2D feature, one per view.
pub fn augment_2d(center: &[f64], views: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_views(&mut rng, center, views, noise)
}

fn draw_views(rng: &mut ChaCha8Rng, center: &[f64], views: usize, noise: f64) -> Vec<Vec<f64>> {
    (0..views).map(|_| noisy(rng, center, noise)).collect()
}

/// Draws the full dataset. Identical configurations give identical data.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let meta = GeneratorMeta {
        class_means: unit_vectors(&mut rng, cfg.classes, cfg.invariant_dims),
        confounders_2d: unit_vectors(&mut rng, cfg.classes, cfg.confounder_dims),
        confounders_3d: unit_vectors(&mut rng, cfg.classes, cfg.confounder_dims),
    };
    let draw_split = |split: Split, per_class: usize| {
        let mut samples = Vec::with_capacity(per_class * cfg.classes);
        for class in 0..cfg.classes {
            let mut rng = cell_rng(cfg.seed, split, class);
            for _ in 0..per_class {
                let z_c = noisy(&mut rng, &meta.class_means[class], cfg.sigma_c);
                let conflict = rng.random::<f64>() < cfg.p_conflict;
                let (t2, t3) = if conflict {
                    distinct_wrong(&mut rng, class, cfg.classes)
                } else {
                    (class, class)
                };
                let z_d2 = noisy(&mut rng, &meta.confounders_2d[t2], cfg.sigma_d);
                let z_d3 = noisy(&mut rng, &meta.confounders_3d[t3], cfg.sigma_d);
                let x2: Vec<f64> = z_c.iter().chain(&z_d2).copied().collect();
                let x3: Vec<f64> = z_c.iter().chain(&z_d3).copied().collect();
                let views = draw_views(&mut rng, &x2, cfg.views, cfg.sigma_c / 2.0);
                samples.push(Sample {
                    x3,
                    views,
                    label: class,
                    planted_hard: conflict,
                    hard_targets: conflict.then_some((t2, t3)),
                });
            }
        }
        samples
    };
    Ok(Dataset {
        config: *cfg,
        train: draw_split(Split::Train, cfg.per_class),
        test: draw_split(Split::Test, cfg.test_per_class),
        meta: Some(meta),
    })
}

/// Spatial augmentation of a 3D feature: global scale, per-coordinate
/// sign-preserving stretch and additive jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment3d {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of the additive jitter.
    pub jitter: f64,
    /// Half-width of the per-coordinate factor `1 + u`.
    pub coordinate: f64,
}

impl Default for Augment3d {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.25,
            jitter: 0.15,
            coordinate: 0.1,
        }
    }
}

impl Augment3d {
    /// Defaults with the jitter tied to the class noise scale.
    pub fn for_generator(cfg: &GeneratorConfig) -> Self {
        Self {
            jitter: cfg.sigma_c / 2.0,
            ..Self::default()
        }
    }

    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            jitter: 0.0,
            coordinate: 0.0,
        }
    }
}

pub fn augment_3d(x3: &[f64], params: &Augment3d, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if params.scale_max > params.scale_min {
        rng.random_range(params.scale_min..=params.scale_max)
    } else {
        params.scale_min
    };
    x3.iter()
        .map(|&x| {
            let u = if params.coordinate > 0.0 {
                rng.random_range(-params.coordinate..=params.coordinate)
            } else {
                0.0
            };
            let jitter: f64 = rng.sample(StandardNormal);
            scale * x * (1.0 + u) + params.jitter * jitter
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest mean, ties towards the smaller index.
pub fn nearest_mean(x: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, m) in means.iter().enumerate() {
        let d = squared_distance(x, m);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Test accuracy of nearest-class-mean classification on the shared class
/// coordinates only, a reference free of modality bias.
pub fn bayes_oracle(data: &Dataset) -> Result<f64> {
    let meta = data
        .meta
        .as_ref()
        .ok_or_else(|| Error::contract("dataset carries no generator metadata"))?;
    let dc = data.config.invariant_dims;
    let hits = data
        .test
        .iter()
        .filter(|s| nearest_mean(&s.x3[..dc], &meta.class_means) == s.label)
        .count();
    Ok(hits as f64 / data.test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Binary,
    Text,
}

fn write_sample(w: &mut ByteWriter, s: &Sample) {
    w.u64(s.label as u64);
    w.u8(u8::from(s.planted_hard));
    let (r2, r3) = s
        .hard_targets
        .map_or((u64::MAX, u64::MAX), |(a, b)| (a as u64, b as u64));
    w.u64(r2);
    w.u64(r3);
    w.f64s(&s.x3);
    for v in &s.views {
        w.f64s(v);
    }
}

fn write_means(w: &mut ByteWriter, means: &[Vec<f64>]) {
    for m in means {
        w.f64s(m);
    }
}

impl Dataset {
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let mut out = ContainerWriter::new(MAGIC, DATASET_VERSION);
        let mut header = ByteWriter::default();
        header.string(&serde_json::to_string(&self.config)?);
        header.u64(self.train.len() as u64);
        header.u64(self.test.len() as u64);
        out.section("header", header.0);
        if let Some(meta) = &self.meta {
            let mut w = ByteWriter::default();
            write_means(&mut w, &meta.class_means);
            write_means(&mut w, &meta.confounders_2d);
            write_means(&mut w, &meta.confounders_3d);
            out.section("meta", w.0);
        }
        for (name, samples) in [("train", &self.train), ("test", &self.test)] {
            let mut w = ByteWriter::default();
            samples.iter().for_each(|s| write_sample(&mut w, s));
            out.section(name, w.0);
        }
        Ok(out.to_bytes())
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, MAGIC, "dataset")?;
        if c.version != DATASET_VERSION {
            return Err(format_error(
                "dataset",
                format!("version {} (expected {DATASET_VERSION})", c.version),
            ));
        }
        let mut h = c.reader("header")?;
        let config: GeneratorConfig = serde_json::from_str(&h.string()?)?;
        let (n_train, n_test) = (h.u64()? as usize, h.u64()? as usize);
        h.finish()?;
        let (d, dc, dd) = (
            config.feature_dim(),
            config.invariant_dims,
            config.confounder_dims,
        );
        let meta = if c.names().any(|n| n == "meta") {
            let mut r = c.reader("meta")?;
            let mut means =
                |dim: usize| -> Result<Vec<Vec<f64>>> { (0..config.classes).map(|_| r.f64s(dim)).collect() };
            let meta = GeneratorMeta {
                class_means: means(dc)?,
                confounders_2d: means(dd)?,
                confounders_3d: means(dd)?,
            };
            r.finish()?;
            Some(meta)
        } else {
            None
        };
        let read_split = |name: &'static str, count: usize| -> Result<Vec<Sample>> {
            let mut r = c.reader(name)?;
            let samples = (0..count)
                .map(|_| {
                    let label = r.u64()? as usize;
                    let planted_hard = r.u8()? != 0;
                    let (r2, r3) = (r.u64()?, r.u64()?);
                    let x3 = r.f64s(d)?;
                    let views = (0..config.views).map(|_| r.f64s(d)).collect::<Result<_>>()?;
                    Ok(Sample {
                        x3,
                        views,
                        label,
                        planted_hard,
                        hard_targets: (r2 != u64::MAX).then_some((r2 as usize, r3 as usize)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            r.finish()?;
            Ok(samples)
        };
        Ok(Dataset {
            config,
            meta,
            train: read_split("train", n_train)?,
            test: read_split("test", n_test)?,
        })
    }

    /// Line-oriented text form; floats use the shortest exact decimal.
    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("{TEXT_HEADER} {DATASET_VERSION}\n");
        let _ = writeln!(out, "config {}", serde_json::to_string(&self.config)?);
        let row = |out: &mut String, tag: &str, v: &[f64]| {
            out.push_str(tag);
            for x in v {
                let _ = write!(out, " {x:?}");
            }
            out.push('\n');
        };
        if let Some(meta) = &self.meta {
            for (tag, means) in [
                ("class_mean", &meta.class_means),
                ("confounder_2d", &meta.confounders_2d),
                ("confounder_3d", &meta.confounders_3d),
            ] {
                means.iter().for_each(|m| row(&mut out, tag, m));
            }
        }
        for (name, samples) in [("train", &self.train), ("test", &self.test)] {
            let _ = writeln!(out, "split {name} {}", samples.len());
            for s in samples {
                let targets = s
                    .hard_targets
                    .map_or("- -".to_string(), |(a, b)| format!("{a} {b}"));
                let _ = writeln!(out, "sample {} {} {targets}", s.label, u8::from(s.planted_hard));
                row(&mut out, "x3", &s.x3);
                s.views.iter().for_each(|v| row(&mut out, "view", v));
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cur = TextCursor {
            lines: text.lines().collect(),
            pos: 0,
        };
        let (i, head) = cur.next("header")?;
        if head.len() != 3 || head[..2].join(" ") != TEXT_HEADER {
            return Err(text_error(i, "not a dataset text file"));
        }
        if head[2] != DATASET_VERSION.to_string() {
            return Err(text_error(i, "unsupported version"));
        }
        let (i, cfg_line) = cur.next("config")?;
        if cfg_line[0] != "config" {
            return Err(text_error(i, "expected config"));
        }
        let config: GeneratorConfig = serde_json::from_str(&cfg_line[1..].join(" "))?;
        let (d, dc, dd) = (
            config.feature_dim(),
            config.invariant_dims,
            config.confounder_dims,
        );

        let meta = if cur.peek_tag() == Some("class_mean") {
            let mut read = |tag: &str, dim: usize| -> Result<Vec<Vec<f64>>> {
                (0..config.classes).map(|_| cur.floats(tag, dim)).collect()
            };
            Some(GeneratorMeta {
                class_means: read("class_mean", dc)?,
                confounders_2d: read("confounder_2d", dd)?,
                confounders_3d: read("confounder_3d", dd)?,
            })
        } else {
            None
        };
        let mut splits = Vec::new();
        for name in ["train", "test"] {
            let (i, parts) = cur.next("split")?;
            if parts.len() != 3 || parts[0] != "split" || parts[1] != name {
                return Err(text_error(i, &format!("expected 'split {name}'")));
            }
            let count = parse_int(i, parts[2])?;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let (i, p) = cur.next("sample")?;
                if p.len() != 5 || p[0] != "sample" {
                    return Err(text_error(i, "expected sample record"));
                }
                let hard_targets = if p[3] == "-" {
                    None
                } else {
                    Some((parse_int(i, p[3])?, parse_int(i, p[4])?))
                };
                let label = parse_int(i, p[1])?;
                let planted_hard = p[2] == "1";
                let x3 = cur.floats("x3", d)?;
                let views = (0..config.views)
                    .map(|_| cur.floats("view", d))
                    .collect::<Result<_>>()?;
                samples.push(Sample {
                    x3,
                    views,
                    label,
                    planted_hard,
                    hard_targets,
                });
            }
            splits.push(samples);
        }
        if cur.pos != cur.lines.len() {
            return Err(text_error(cur.pos, "trailing content"));
        }
        let test = splits.pop().expect("two splits");
        Ok(Dataset {
            config,
            meta,
            train: splits.pop().expect("two splits"),
            test,
        })
    }

    pub fn save(&self, path: &Path, format: DataFormat) -> Result<()> {
        let bytes = match format {
            DataFormat::Binary => self.to_binary()?,
            DataFormat::Text => self.to_text()?.into_bytes(),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads either format, recognized by its leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(&MAGIC) {
            Self::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| format_error("dataset", "neither binary nor UTF-8 text"))?;
            Self::from_text(&text)
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let counts = |samples: &[Sample]| {
            let mut by_class = BTreeMap::new();
            for s in samples {
                *by_class.entry(s.label).or_insert(0usize) += 1;
            }
            SplitCounts {
                total: samples.len(),
                planted_hard: samples.iter().filter(|s| s.planted_hard).count(),
                per_class: by_class.into_values().collect(),
            }
        };
        DatasetManifest {
            format_version: DATASET_VERSION,
            seed: self.config.seed,
            config: self.config,
            train: counts(&self.train),
            test: counts(&self.test),
        }
    }
}

struct TextCursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

fn text_error(line: usize, detail: &str) -> Error {
    format_error("dataset text", format!("line {}: {detail}", line + 1))
}

fn parse_int(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| text_error(line, "bad integer"))
}

impl<'a> TextCursor<'a> {
    fn next(&mut self, expect: &str) -> Result<(usize, Vec<&'a str>)> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| format_error("dataset text", format!("truncated before '{expect}'")))?;
        self.pos += 1;
        Ok((self.pos - 1, line.split(' ').collect()))
    }

    fn peek_tag(&self) -> Option<&'a str> {
        self.lines.get(self.pos).and_then(|l| l.split(' ').next())
    }

    fn floats(&mut self, tag: &str, n: usize) -> Result<Vec<f64>> {
        let (i, parts) = self.next(tag)?;
        if parts[0] != tag || parts.len() != n + 1 {
            return Err(text_error(i, &format!("expected '{tag}' with {n} values")));
        }
        parts[1..]
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| text_error(i, "bad number")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub planted_hard: usize,
    pub per_class: Vec<usize>,
}

/// Human-readable summary written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GeneratorConfig,
    pub train: SplitCounts,
    pub test: SplitCounts,
}
