use invjoint_core::data::{generate, Dataset, GeneratorConfig};
use invjoint_core::fusion::{FusionConfig, FusionMode};
use invjoint_core::harness::metrics::RECORD_FIELDS;
use invjoint_core::harness::{
    ablate, ablation_csv, evaluate_model, metrics_jsonl, train, train_branches, AblationFlags, AblationGrid,
    Branches, Checkpoint, GridCell, RunConfig, Trainer,
};
use invjoint_core::Error;

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.optim.epochs = 6;
    cfg.mining.warmup = 1;
    cfg
}

fn dataset(cfg: &RunConfig) -> Dataset {
    generate(&cfg.generator).unwrap()
}

#[test]
fn joint_run_without_coupling_matches_single_branch_runs() {
    let mut cfg = small(3);
    cfg.ablation = AblationFlags::baseline();
    cfg.loss.lambda = 0.0;
    cfg.loss.alpha = 0.0;
    let data = dataset(&cfg);
    let both = train(&cfg, &data).unwrap();
    let only2 = train_branches(&cfg, &data, Branches::Only2d).unwrap();
    let only3 = train_branches(&cfg, &data, Branches::Only3d).unwrap();
    for ((b, o2), o3) in both.records.iter().zip(&only2.records).zip(&only3.records) {
        assert!((b.eval.acc2 - o2.eval.acc2).abs() <= 1e-9);
        assert!((b.eval.acc3 - o3.eval.acc3).abs() <= 1e-9);
    }
}

#[test]
fn gate_is_untouched_when_the_hard_set_stays_empty() {
    let mut cfg = small(1);
    // Mining never fires, so the hard set is empty in every epoch.
    cfg.mining.warmup = cfg.optim.epochs;
    let data = dataset(&cfg);
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let gate = t.model.groups.gate.0;
    let initial = t.model.store.groups()[gate].clone();
    t.run().unwrap();
    let after = &t.model.store.groups()[gate];
    for (p, q) in initial.params.iter().zip(&after.params) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p.value.data()), bits(q.value.data()), "{}", p.name);
    }
    assert!(t.records.iter().all(|r| r.steps_with_inv == 0));
}

#[test]
fn metrics_log_has_one_complete_record_per_epoch() {
    let cfg = small(2);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    assert_eq!(run.records.len(), cfg.optim.epochs);
    assert!(run.records.windows(2).all(|w| w[1].lr <= w[0].lr));
    let text = metrics_jsonl(&run.records).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), cfg.optim.epochs + 1);
    for line in &lines[1..] {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        for field in RECORD_FIELDS {
            assert!(value.get(field).is_some(), "missing {field}");
        }
    }
}

#[test]
fn joint_selection_stays_inside_the_branch_sets() {
    let cfg = small(4);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    let mut mined = 0;
    for r in &run.records {
        if let Some(s) = &r.selection {
            mined += 1;
            assert!(s.joint.iter().all(|i| s.d2.contains(i) || s.d3.contains(i)));
        }
    }
    assert_eq!(mined, cfg.optim.epochs - cfg.mining.warmup);
}

#[test]
fn evaluation_is_deterministic_and_tends_to_the_3d_branch() {
    let cfg = small(5);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    let a = evaluate_model(&run.model, &data.test, &cfg.fusion).unwrap();
    let b = evaluate_model(&run.model, &data.test, &cfg.fusion).unwrap();
    assert_eq!(a, b);
    for mode in [FusionMode::Multiplicative, FusionMode::Additive] {
        let far = FusionConfig {
            phi: 1e12,
            mode,
            ..cfg.fusion
        };
        let e = evaluate_model(&run.model, &data.test, &far).unwrap();
        assert_eq!(e.pred_joint, e.pred3);
        assert_eq!(e.acc_joint, e.acc3);
    }
}

#[test]
fn aggregates_match_a_tally_of_the_written_csvs() {
    let cfg = small(6);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    let eval = evaluate_model(&run.model, &data.test, &cfg.fusion).unwrap();
    let dir = tempfile::tempdir().unwrap();
    eval.write_csvs(dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let n = rows.len() as f64;
    let hits = |col: usize| rows.iter().filter(|r| r[col] == r[1]).count() as f64 / n;
    let conflicts = rows
        .iter()
        .filter(|r| (r[2] == r[1] || r[3] == r[1]) && r[4] != r[1])
        .count() as f64
        / n;
    assert_eq!(hits(2), eval.acc2);
    assert_eq!(hits(3), eval.acc3);
    assert_eq!(hits(4), eval.acc_joint);
    assert_eq!(conflicts, eval.conflict_ratio);

    for (name, col) in [
        ("confusion_2d.csv", 2),
        ("confusion_3d.csv", 3),
        ("confusion_joint.csv", 4),
    ] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let m: Vec<Vec<u64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        let c = m.len();
        let mut tally = vec![vec![0u64; c]; c];
        for r in &rows {
            tally[r[1]][r[col]] += 1;
        }
        assert_eq!(m, tally, "{name}");
    }
}

#[test]
fn single_cell_ablation_equals_train_and_evaluate() {
    let cfg = small(7);
    let grid = AblationGrid {
        seeds: vec![7],
        cell: vec![GridCell::default()],
        axes: None,
    };
    let rows = ablate(&cfg, &grid).unwrap();
    assert_eq!(rows.len(), 1);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    let eval = evaluate_model(&run.model, &data.test, &cfg.fusion).unwrap();
    assert_eq!(rows[0].acc_joint, eval.acc_joint);
    assert_eq!(rows[0].acc2, eval.acc2);
    assert_eq!(rows[0].acc3, eval.acc3);
    assert_eq!(rows[0].conflict_ratio, eval.conflict_ratio);
}

#[test]
fn eight_cell_grid_reuses_models_across_fusion_modes() {
    let mut cfg = small(8);
    cfg.optim.epochs = 3;
    let grid = AblationGrid::from_toml(
        "[axes]\nstep1 = [true, false]\nstep2 = [true, false]\nfusion = [\"mul\", \"add\"]\n",
    )
    .unwrap();
    let rows = ablate(&cfg, &grid).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.reused).count(), 4);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].flags, pair[1].flags);
        assert_ne!(pair[0].fusion.mode, pair[1].fusion.mode);
        // Same trained model, so the branch accuracies agree.
        assert_eq!(pair[0].acc2, pair[1].acc2);
        assert_eq!(pair[0].acc3, pair[1].acc3);
    }
    let csv = ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn non_finite_input_aborts_with_epoch_and_batch() {
    let cfg = small(9);
    let mut data = dataset(&cfg);
    for s in &mut data.train {
        s.x3[0] = f64::NAN;
    }
    match train(&cfg, &data) {
        Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training accepted NaN inputs"),
    }
}

#[test]
fn config_violations_surface_before_training() {
    let mut cfg = small(10);
    cfg.ablation.enable_step1 = false;
    cfg.ablation.invariance_on_all = false;
    let data = dataset(&cfg);
    assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
}

#[test]
fn dataset_with_other_dimensions_is_rejected() {
    let cfg = small(11);
    let data = dataset(&cfg);
    let run = train(&cfg, &data).unwrap();
    let ck = Checkpoint::new(&cfg, &run.model, run.optimizer, run.epoch);
    let model = ck.model().unwrap();
    let other = generate(&GeneratorConfig {
        invariant_dims: cfg.generator.invariant_dims + 2,
        ..cfg.generator.clone()
    })
    .unwrap();
    let err = evaluate_model(&model, &other.test, &cfg.fusion).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let mut wrong = cfg.clone();
    wrong.generator = other.config.clone();
    assert!(matches!(Trainer::new(&wrong, &data), Err(Error::Contract(_))));
}
