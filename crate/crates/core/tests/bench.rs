use lcnn::bench::{
    run, write_outputs, DatasetSpec, ExperimentConfig, ExperimentKind, ExperimentResult, Normalizer, SearchMode,
};
use lcnn::hpo::HyperConfig;
use lcnn::model::ModelKind;
use lcnn::training::TrainConfig;

fn tiny(experiment: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment,
        dataset: DatasetSpec::Frequency {
            num_tasks: 6,
            n_train: 240,
            n_test: 120,
            sigma: 0.1,
        },
        hyper: HyperConfig {
            peak_lr: 0.02,
            hidden_dim: 8,
            lambda_alpha: 1e-6,
            lambda_beta: 1e-6,
            d_beta: 2,
        },
        num_residual_blocks: 1,
        train: TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        },
        hpo_iterations: 3,
        repeats: 3,
        fractions: vec![1.0, 0.5],
        dims: vec![1, 2],
        holdout_dims: vec![1],
        holdout_fractions: vec![0.1, 1.0],
        holdout_refine_evaluations: 50,
        ..ExperimentConfig::default()
    }
}

fn check_normalization(res: &ExperimentResult) {
    for row in &res.rows {
        assert!((row.normalized * row.normalizer - row.rmse).abs() <= 1e-12, "{row:?}");
    }
}

#[test]
fn base_reports_every_model_and_lme() {
    let res = run(&tiny(ExperimentKind::Base)).unwrap();
    assert!(res.errors.is_empty(), "{:?}", res.errors);
    let models: Vec<&str> = res.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models, ["LC", "CS", "LL", "LME"]);
    assert!(res.rows.iter().all(|r| r.normalizer_kind == Normalizer::ResponseStd));
    check_normalization(&res);
}

#[test]
fn single_task_base_runs() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Frequency {
            num_tasks: 1,
            n_train: 60,
            n_test: 30,
            sigma: 0.1,
        },
        ..tiny(ExperimentKind::Base)
    };
    let res = run(&cfg).unwrap();
    assert!(res.errors.is_empty(), "{:?}", res.errors);
    assert_eq!(res.rows.len(), 4);
}

#[test]
fn parallel_and_serial_runs_agree() {
    let serial = run(&tiny(ExperimentKind::Datasize)).unwrap();
    let parallel = run(&ExperimentConfig {
        jobs: 3,
        ..tiny(ExperimentKind::Datasize)
    })
    .unwrap();
    assert_eq!(serial.rows, parallel.rows);
    assert_eq!(serial.rows.len(), 2 * 4);
    check_normalization(&serial);
}

#[test]
fn repeat_reports_spread_and_forced_divergence() {
    let res = run(&tiny(ExperimentKind::Repeat)).unwrap();
    let ratio = res.statistic("LC", "max_over_min").unwrap();
    assert!(ratio >= 1.0 && ratio.is_finite());
    assert_eq!(
        res.statistic("LC", "min_relative").unwrap().min(1.0),
        res.statistic("LC", "min_relative").unwrap()
    );
    assert_eq!(res.row("LC", "run0").unwrap().normalized, 1.0);

    let mut cfg = tiny(ExperimentKind::Repeat);
    cfg.models = vec![ModelKind::LearnedContext, ModelKind::ContextSensitive];
    cfg.model_hyper.insert(
        ModelKind::ContextSensitive,
        HyperConfig {
            peak_lr: 1e4,
            ..cfg.hyper
        },
    );
    cfg.train.max_retries = 1;
    let res = run(&cfg).unwrap();
    assert!(res.statistic("CS", "divergences").unwrap() > 0.0);
    assert_eq!(res.statistic("LC", "divergences").unwrap(), 0.0);
}

#[test]
fn repeat_is_deterministic() {
    let a = run(&tiny(ExperimentKind::Repeat)).unwrap();
    let b = run(&tiny(ExperimentKind::Repeat)).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn dbeta_sweep_normalizes_by_lc_base() {
    let mut cfg = tiny(ExperimentKind::DbetaSweep);
    cfg.models = vec![ModelKind::LearnedContext, ModelKind::LastLayer];
    let res = run(&cfg).unwrap();
    let base = res.row("LC", "base").unwrap().rmse;
    assert_eq!(res.row("LC", "d_beta=2").unwrap().rmse, base);
    assert!(res.row("LL", "d_beta=1").is_some());
    assert!(res.rows.iter().all(|r| r.normalizer == base));
}

#[test]
fn holdout_grid_covers_dims_and_fractions() {
    let mut cfg = tiny(ExperimentKind::Holdout);
    cfg.holdout_folds = Some(1);
    let res = run(&cfg).unwrap();
    assert!(res.row("LC", "d_beta=1,fraction=0.1").is_some());
    assert!(res.row("LC", "d_beta=1,fraction=1").is_some());
    let (name, csv) = &res.attachments[0];
    assert_eq!(name, "holdout_tasks.csv");
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    check_normalization(&res);
}

#[test]
fn likelihood_scan_emits_curves() {
    let mut cfg = tiny(ExperimentKind::LikelihoodScan);
    cfg.scan.grid_points = 41;
    let res = run(&cfg).unwrap();
    assert!(res.passed.is_some());
    assert!(res.statistic("LC", "modes_n0").unwrap() <= 1.0);
    let scan = &res.attachments.iter().find(|(n, _)| n == "scan.csv").unwrap().1;
    assert_eq!(scan.lines().count(), 1 + 5 * 41);
}

#[test]
fn construct_verify_passes_and_detects_perturbation() {
    let res = run(&tiny(ExperimentKind::ConstructVerify)).unwrap();
    assert_eq!(res.passed, Some(true));
    let mut cfg = tiny(ExperimentKind::ConstructVerify);
    cfg.perturbation = 1e-3;
    let res = run(&cfg).unwrap();
    assert_eq!(res.passed, Some(false));
    let worst = res.summary.iter().map(|s| s.value).fold(0.0, f64::max);
    assert!(worst >= 1e-4);
}

#[test]
fn outputs_are_written_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::Base);
    cfg.models = vec![ModelKind::LearnedContext];
    cfg.search = SearchMode::Hpo;
    cfg.output_dir = dir.path().join("a");
    let res = run(&cfg).unwrap();
    write_outputs(&cfg, &res).unwrap();
    for f in ["config.json", "results.csv", "diagnostics.json", "trials.csv"] {
        assert!(cfg.output_dir.join(f).exists(), "{f}");
    }
    let trials = std::fs::read_to_string(cfg.output_dir.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 3);

    let mut again = ExperimentConfig::from_json_file(cfg.output_dir.join("config.json")).unwrap();
    again.output_dir = dir.path().join("b");
    write_outputs(&again, &run(&again).unwrap()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join("results.csv")).unwrap();
    assert_eq!(read(&cfg.output_dir), read(&again.output_dir));
}
