use std::path::Path;
use std::process::{Command, Output};

use invjoint_core::data::Dataset;
use invjoint_core::harness::{parse_metrics, Checkpoint};

fn invjoint(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_invjoint"));
    cmd.args(args).env_remove("INVJOINT_SEED");
    cmd
}

fn ok(mut cmd: Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, "seed = 4\n[optim]\nepochs = 4\n[mining]\nwarmup = 1\n").unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("data.bin");
    let data_s = data.to_str().unwrap();
    ok(invjoint(&["generate", "--config", &config, "--out", data_s]));
    let manifest = json(&dir.path().join("data.bin.manifest.json"));
    assert_eq!(manifest["seed"]["seed"], 4);
    assert_eq!(manifest["seed"]["source"], "config");
    let dataset = Dataset::load(&data).unwrap();

    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(invjoint(&[
        "train",
        "--config",
        &config,
        "--data",
        data_s,
        "--out",
        run_s,
        "--lambda",
        "2",
        "--alpha",
        "0.5",
        "--rho",
        "0.3",
        "--fusion",
        "add",
        "--no-align",
    ]));
    let (_, records) = parse_metrics(&std::fs::read_to_string(run.join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(records.len(), 4);
    for name in [
        "samples.csv",
        "confusion_2d.csv",
        "confusion_3d.csv",
        "confusion_joint.csv",
        "config.toml",
    ] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let ck = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.config.loss.lambda, 2.0);
    assert_eq!(ck.config.loss.alpha, 0.5);
    assert_eq!(ck.config.mining.rho, 0.3);
    assert!(!ck.config.ablation.enable_align);
    assert_eq!(ck.config.generator, dataset.config);

    // Evaluating with the training settings reproduces the last record.
    let out = ok(invjoint(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        data_s,
    ]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let last = records.last().unwrap();
    assert_eq!(summary["acc_joint"].as_f64().unwrap(), last.eval.acc_joint);
    assert_eq!(
        summary["conflict_ratio"].as_f64().unwrap(),
        last.eval.conflict_ratio
    );

    let out = ok(invjoint(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        data_s,
        "--phi",
        "1e12",
        "--fusion",
        "mul",
    ]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["acc_joint"], summary["acc3"]);
}

#[test]
fn seed_environment_variable_is_honoured_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let mut cmd = invjoint(&["generate", "--out", data.to_str().unwrap()]);
    cmd.env("INVJOINT_SEED", "77");
    ok(cmd);
    let manifest = json(&dir.path().join("data.txt.manifest.json"));
    assert_eq!(manifest["seed"]["seed"], 77);
    assert_eq!(manifest["seed"]["source"], "environment");
    assert_eq!(manifest["seed"]["env_var"], "INVJOINT_SEED");
    assert_eq!(manifest["format"], "text");
    assert_eq!(Dataset::load(&data).unwrap().config.seed, 77);

    // The command line wins over the environment.
    let other = dir.path().join("other.bin");
    let mut cmd = invjoint(&["generate", "--out", other.to_str().unwrap(), "--seed", "5"]);
    cmd.env("INVJOINT_SEED", "77");
    ok(cmd);
    let manifest = json(&dir.path().join("other.bin.manifest.json"));
    assert_eq!(manifest["seed"]["seed"], 5);
    assert_eq!(manifest["seed"]["source"], "command_line");

    let mut cmd = invjoint(&["generate", "--out", other.to_str().unwrap()]);
    cmd.env("INVJOINT_SEED", "seven");
    assert!(!cmd.output().unwrap().status.success());
}

#[test]
fn train_manifest_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("data.bin");
    ok(invjoint(&[
        "generate",
        "--config",
        &config,
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    let mut cmd = invjoint(&[
        "train",
        "--config",
        &config,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    cmd.env("INVJOINT_SEED", "12");
    ok(cmd);
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["seed"]["seed"], 12);
    assert_eq!(manifest["seed"]["source"], "environment");
    assert_eq!(manifest["config"]["seed"], 12);
    assert_eq!(manifest["data_seed"], 4);
}

#[test]
fn ablate_prints_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "seeds = [1]\n[[cell]]\nname = \"full\"\n[[cell]]\nname = \"plain\"\nstep1 = false\nstep2 = false\nalign = false\n",
    )
    .unwrap();
    let out = ok(invjoint(&[
        "ablate",
        "--config",
        &config,
        "--grid",
        grid.to_str().unwrap(),
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("cell,seed,"));
    assert!(lines[1].starts_with("\"full\",1,true,true,true"));
    assert!(lines[2].starts_with("\"plain\",1,false,false,false"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(invjoint(&["gradcheck", "--configs", "5"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 8);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nepochs = \"many\"\n").unwrap();
    let out = invjoint(&["generate", "--config", bad.to_str().unwrap(), "--out", "x.bin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));

    let missing = dir.path().join("missing.bin");
    let out = invjoint(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
}
