use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use invjoint_core::data::{generate, DataFormat, Dataset};
use invjoint_core::fusion::FusionMode;
use invjoint_core::gradcheck::run_suite;
use invjoint_core::harness::{
    ablate, ablation_csv, evaluate_model, train, write_metrics, AblationGrid, Checkpoint, RunConfig,
    SeedSource,
};
use invjoint_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "invjoint",
    version,
    about = "Two-branch joint training and late fusion on a synthetic testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from the generator section of a run config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to text for a `.txt` path, binary otherwise.
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset and write metrics, predictions and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        no_step1: bool,
        #[arg(long)]
        no_step2: bool,
        #[arg(long)]
        no_align: bool,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        /// Directory for the per-sample and confusion CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and print the results table as CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct SeedRecord {
    seed: u64,
    source: SeedSource,
    env_var: &'static str,
}

/// Config file, then the seed environment variable, then `--seed`.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<(RunConfig, SeedRecord)> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut source = cfg.apply_seed_env()?;
    if let Some(s) = seed {
        cfg.seed = s;
        source = SeedSource::CommandLine;
    }
    let cfg = cfg.with_seed(cfg.seed);
    let record = SeedRecord {
        seed: cfg.seed,
        source,
        env_var: invjoint_core::harness::SEED_ENV,
    };
    Ok((cfg, record))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            config,
            out,
            format,
            seed,
        } => {
            let (cfg, seed) = load_config(config.as_deref(), seed)?;
            let data = generate(&cfg.generator)?;
            let format = match format {
                Some(Format::Text) => DataFormat::Text,
                Some(Format::Binary) => DataFormat::Binary,
                None if out.extension().is_some_and(|e| e == "txt") => DataFormat::Text,
                None => DataFormat::Binary,
            };
            data.save(&out, format)?;
            #[derive(Serialize)]
            struct Manifest<M: Serialize> {
                seed: SeedRecord,
                format: DataFormat,
                dataset: M,
            }
            write_json(
                &sibling(&out, ".manifest.json"),
                &Manifest {
                    seed,
                    format,
                    dataset: data.manifest(),
                },
            )?;
            eprintln!(
                "wrote {} ({} train, {} test)",
                out.display(),
                data.train.len(),
                data.test.len()
            );
            Ok(true)
        }
        Command::Train {
            config,
            data,
            out,
            lambda,
            alpha,
            phi,
            rho,
            no_step1,
            no_step2,
            no_align,
            fusion,
            seed,
        } => {
            let (mut cfg, seed) = load_config(config.as_deref(), seed)?;
            let dataset = Dataset::load(&data)?;
            cfg.generator = dataset.config;
            cfg.loss.lambda = lambda.unwrap_or(cfg.loss.lambda);
            cfg.loss.alpha = alpha.unwrap_or(cfg.loss.alpha);
            cfg.fusion.phi = phi.unwrap_or(cfg.fusion.phi);
            cfg.fusion.mode = fusion.unwrap_or(cfg.fusion.mode);
            cfg.mining.rho = rho.unwrap_or(cfg.mining.rho);
            let a = &mut cfg.ablation;
            a.enable_step1 &= !no_step1;
            a.enable_step2 &= !no_step2;
            a.enable_align &= !no_align;
            cfg.validate()?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let run = train(&cfg, &dataset)?;
            write_metrics(&out.join("metrics.jsonl"), &run.records)?;
            let checkpoint = Checkpoint::new(&cfg, &run.model, run.optimizer, run.epoch);
            checkpoint.save(&out.join("checkpoint.bin"))?;
            let eval = evaluate_model(&run.model, &dataset.test, &cfg.fusion)?;
            eval.write_csvs(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
            #[derive(Serialize)]
            struct Manifest<'a> {
                seed: SeedRecord,
                data: &'a Path,
                data_seed: u64,
                epochs: usize,
                config: &'a RunConfig,
                result: invjoint_core::fusion::EvalSummary,
            }
            let summary = eval.summary();
            println!(
                "acc2 {:.4} acc3 {:.4} acc_joint {:.4} conflict_ratio {:.4}",
                summary.acc2, summary.acc3, summary.acc_joint, summary.conflict_ratio
            );
            write_json(
                &out.join("manifest.json"),
                &Manifest {
                    seed,
                    data: &data,
                    data_seed: dataset.config.seed,
                    epochs: run.epoch,
                    config: &cfg,
                    result: summary,
                },
            )?;
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            phi,
            fusion,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let model = ck.model()?;
            let mut cfg = ck.config.fusion;
            cfg.phi = phi.unwrap_or(cfg.phi);
            cfg.mode = fusion.unwrap_or(cfg.mode);
            cfg.validate()?;
            let eval = evaluate_model(&model, &dataset.test, &cfg)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                eval.write_csvs(&dir)?;
            }
            println!("{}", serde_json::to_string_pretty(&eval.summary())?);
            Ok(true)
        }
        Command::Ablate { config, grid, out } => {
            let (cfg, _) = load_config(config.as_deref(), None)?;
            let grid = AblationGrid::load(&grid)?;
            let csv = ablation_csv(&ablate(&cfg, &grid)?);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Gradcheck { configs, seed } => {
            let report = run_suite(configs, seed)?;
            for c in &report.checks {
                println!(
                    "{} {:<28} configs {:>3} max_rel_err {:.3e} (tol {:.0e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.configs,
                    c.max_relative_error,
                    c.tolerance
                );
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
