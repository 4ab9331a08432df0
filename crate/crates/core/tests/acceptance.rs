//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `LCNN_ACCEPT=A4,A5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use lcnn::bench::{
    fit_lme, fit_model, holdout_grid, scan_frequency_task, DatasetSpec, ExperimentConfig, FittedModel, Splits,
};
use lcnn::constructions::verify_all;
use lcnn::data::MultiTaskDataset;
use lcnn::hpo::{lipo_minimize, Dimension, HyperBox, HyperConfig};
use lcnn::lme::lme_fit;
use lcnn::model::{ModelKind, ModelSpec, MultiTaskModel};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    id: &'static str,
    passed: bool,
}

struct Suite {
    only: Option<Vec<String>>,
    outcomes: Vec<Outcome>,
    /// Frequency half of the dimension contrast, reported with the sine half.
    contrast: Option<(bool, String)>,
}

impl Suite {
    fn wants(&self, ids: &[&str]) -> bool {
        match &self.only {
            None => true,
            Some(list) => ids.iter().any(|id| list.iter().any(|w| w == id)),
        }
    }

    fn report(&mut self, id: &'static str, passed: bool, detail: String) {
        if !self.wants(&[id]) {
            return;
        }
        println!("{} {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.outcomes.push(Outcome { id, passed });
    }

    fn error(&mut self, ids: &[&'static str], e: &lcnn::Error) {
        for &id in ids {
            self.report(id, false, format!("error: {e}"));
        }
    }
}

fn frequency_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::frequency_desk(),
        hyper: HyperConfig {
            peak_lr: 0.05,
            hidden_dim: 128,
            d_beta: 2,
            ..HyperConfig::default()
        },
        num_residual_blocks: 2,
        ..ExperimentConfig::default()
    }
}

fn sine_config() -> ExperimentConfig {
    let hyper = HyperConfig {
        peak_lr: 0.05,
        hidden_dim: 128,
        d_beta: 4,
        lambda_alpha: 1e-4,
        lambda_beta: 1e-4,
    };
    ExperimentConfig {
        dataset: DatasetSpec::sine_line_desk(),
        hyper,
        model_hyper: BTreeMap::from([(ModelKind::LastLayer, HyperConfig { peak_lr: 0.1, ..hyper })]),
        num_residual_blocks: 2,
        ..ExperimentConfig::default()
    }
}

fn train(
    cfg: &ExperimentConfig,
    splits: &Splits,
    kind: ModelKind,
    d_beta: usize,
    seed: u64,
) -> lcnn::Result<(FittedModel, f64, f64)> {
    let start = Instant::now();
    let hyper = HyperConfig {
        d_beta,
        ..cfg.hyper_for(kind)
    };
    let mut fit = fit_model(cfg, kind, hyper, &splits.train, seed, false)?;
    let secs = start.elapsed().as_secs_f64();
    let rmse = fit.calibrate(&splits.test)?;
    println!(
        "  trained {} d_beta={d_beta} seed={seed}: rmse {rmse:.4}, {secs:.0} s, retries {}",
        kind.abbrev(),
        fit.diagnostics.retries
    );
    Ok((fit, rmse, secs))
}

fn frequency_block(suite: &mut Suite) -> lcnn::Result<()> {
    let cfg = frequency_config();
    let splits = cfg.dataset.load(0)?;
    let mut lc2_rmse = None;
    if suite.wants(&["A1", "A6"]) {
        let (_, rmse, secs) = train(&cfg, &splits, ModelKind::LearnedContext, 2, 0)?;
        suite.report(
            "A1",
            rmse <= 0.13 && secs <= 1800.0,
            format!("frequency LC test RMSE {rmse:.4} (<= 0.13), training {secs:.0} s (<= 1800 s)"),
        );
        lc2_rmse = Some(rmse);
    }
    let mut lc1 = None;
    if suite.wants(&["A3", "A6"]) {
        let (fit, lc_rmse, _) = train(&cfg, &splits, ModelKind::LearnedContext, 1, 0)?;
        if suite.wants(&["A3"]) {
            let (_, ll_rmse, _) = train(&cfg, &splits, ModelKind::LastLayer, 1, 0)?;
            let ratio = ll_rmse / lc_rmse;
            suite.contrast = Some((
                ratio >= 1.5,
                format!("frequency d_beta=1: LL {ll_rmse:.4} / LC {lc_rmse:.4} = {ratio:.2} (>= 1.5)"),
            ));
        }
        lc1 = Some(fit);
    }
    if suite.wants(&["A6"]) {
        let base = lc2_rmse.unwrap_or(f64::NAN);
        let hcfg = ExperimentConfig {
            holdout_dims: vec![2],
            holdout_fractions: vec![1.0],
            holdout_folds: Some(1),
            ..cfg.clone()
        };
        let cells = holdout_grid(&hcfg, &splits, hcfg.hyper)?;
        let mean = cells.iter().map(|c| c.rmse).sum::<f64>() / cells.len() as f64;
        let normalized = mean / base;
        let holdout_ok = normalized <= 1.4;

        let omega = splits.omega.clone().ok_or(lcnn::Error::EmptyDataset)?;
        let fit = lc1.as_ref().expect("d_beta=1 model trained above");
        let DatasetSpec::Frequency { sigma, .. } = cfg.dataset else {
            unreachable!()
        };
        let mut settings = cfg.scan.clone();
        settings.d_beta = 1;
        let report = scan_frequency_task(fit, &omega, &splits.test, sigma, &settings, cfg.seed)?;
        let modes: Vec<usize> = report
            .curves
            .iter()
            .filter(|c| c.points >= 1)
            .map(|c| c.modes.len())
            .collect();
        let non_increasing = report.modes_non_increasing();
        let global = report.truth_mode_is_global();
        suite.report(
            "A6",
            holdout_ok && non_increasing && global,
            format!(
                "hold-out normalized RMSE {normalized:.3} (<= 1.4, {} tasks); scan modes for 1..4 points {modes:?} non-increasing: {non_increasing}; truth mode global at 4 points: {global}",
                cells.len()
            ),
        );
    }
    Ok(())
}

fn sine_block(suite: &mut Suite) -> lcnn::Result<()> {
    let cfg = sine_config();
    let splits = cfg.dataset.load(0)?;
    let (lc, lc_rmse, _) = train(&cfg, &splits, ModelKind::LearnedContext, 4, 0)?;
    if suite.wants(&["A2", "A3"]) {
        let (_, ll_rmse, _) = train(&cfg, &splits, ModelKind::LastLayer, 4, 0)?;
        let lme_rmse = fit_lme(&splits.train, &splits.test)?;
        println!("  LME rmse {lme_rmse:.4}");
        suite.report(
            "A2",
            lc_rmse <= 0.40 && ll_rmse <= 0.40 && lme_rmse >= 3.0,
            format!("sine-and-line LC {lc_rmse:.4} (<= 0.40), LL d_beta=4 {ll_rmse:.4} (<= 0.40), LME {lme_rmse:.3} (>= 3.0)"),
        );
        let gap = (ll_rmse - lc_rmse).abs() / lc_rmse;
        let (freq_ok, freq) = suite
            .contrast
            .take()
            .unwrap_or((false, "frequency half not run".into()));
        suite.report(
            "A3",
            freq_ok && gap <= 0.10,
            format!("{freq}; sine-and-line d_beta=4: |LL - LC| / LC = {gap:.3} (<= 0.10)"),
        );
    }
    if suite.wants(&["A8"]) {
        let mut rmses = vec![lc_rmse];
        let mut divergences = lc.diagnostics.retries;
        for seed in 1..5 {
            match train(&cfg, &splits, ModelKind::LearnedContext, 4, seed) {
                Ok((fit, r, _)) => {
                    divergences += fit.diagnostics.retries;
                    rmses.push(r);
                }
                Err(lcnn::Error::RetriesExhausted { attempts }) => divergences += attempts,
                Err(e) => return Err(e),
            }
        }
        let max = rmses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = rmses.iter().copied().fold(f64::INFINITY, f64::min);
        suite.report(
            "A8",
            rmses.len() == 5 && max / min <= 1.2 && divergences == 0,
            format!(
                "5 LC runs {:?}: max/min {:.3} (<= 1.2), divergences {divergences}",
                rmses.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
                max / min
            ),
        );
    }
    Ok(())
}

fn constructions(suite: &mut Suite) -> lcnn::Result<()> {
    let report = verify_all(0.0, 0)?;
    let worst = report
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_deviation))
        .collect::<Vec<_>>()
        .join(", ");
    let exact = report.all_passed() && report.checks.iter().all(|c| c.tolerance <= 1e-12);
    suite.report("A4", exact, format!("{} checks: {worst}", report.checks.len()));
    Ok(())
}

fn random_model(kind: ModelKind, rng: &mut ChaCha8Rng) -> lcnn::Result<MultiTaskModel> {
    let spec = ModelSpec {
        kind,
        x_dim: rng.gen_range(1..=3),
        num_tasks: rng.gen_range(2..=4),
        d_beta: rng.gen_range(1..=3),
        hidden_dim: rng.gen_range(2..=7),
        num_residual_blocks: rng.gen_range(0..=2),
    };
    let mut model = spec.build(rng.gen())?;
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let values: Vec<f64> = (0..model.net().num_params()).map(|_| normal.sample(rng)).collect();
    model.net_mut().set_flat_values(&values)?;
    if let Some(t) = model.tasks_mut() {
        t.values_mut().mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    }
    Ok(model)
}

fn batch_loss(model: &MultiTaskModel, x: &Array2<f64>, y: &Array1<f64>, tasks: &[usize]) -> f64 {
    let pred = model.predict_batch(x.view(), tasks).expect("valid batch");
    (&pred - y).mapv(|r| r * r).mean().expect("non-empty batch")
}

fn near_kink(model: &MultiTaskModel, x: &Array2<f64>, tasks: &[usize]) -> bool {
    let z = model.input_batch(x.view(), tasks).expect("valid batch");
    let trace = model.net().forward_batch(z.view()).expect("valid input");
    trace.states.iter().any(|s| s.iter().any(|v| v.abs() < 1e-3))
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt())
        .max(1e-8);
    diff / scale
}

/// Worst relative error of batch-loss gradients (network weights and task
/// parameters) over `cases` random models and inputs.
fn gradient_worst(kind: ModelKind, cases: usize, seed: u64) -> lcnn::Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let model = random_model(kind, &mut rng)?;
        let n = rng.gen_range(1..=4);
        let x = Array2::from_shape_fn((n, model.x_dim()), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let tasks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..model.num_tasks())).collect();
        if near_kink(&model, &x, &tasks) {
            continue;
        }
        let (_, grads) = model.mse_gradients(x.view(), y.view(), &tasks)?;

        let base = model.net().flat_values();
        let mut numeric = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut shifted = model.clone();
            let mut v = base.clone();
            v[k] += h;
            shifted.net_mut().set_flat_values(&v)?;
            let plus = batch_loss(&shifted, &x, &y, &tasks);
            v[k] -= 2.0 * h;
            shifted.net_mut().set_flat_values(&v)?;
            let minus = batch_loss(&shifted, &x, &y, &tasks);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let mut analytic = grads.net.flat_values();

        if let (Some(table), Some(dt)) = (model.tasks(), &grads.tasks) {
            let (m, d) = table.values().dim();
            for j in 0..m {
                for k in 0..d {
                    let mut plus = model.clone();
                    plus.tasks_mut().expect("task table").values_mut()[[j, k]] += h;
                    let mut minus = model.clone();
                    minus.tasks_mut().expect("task table").values_mut()[[j, k]] -= h;
                    numeric.push((batch_loss(&plus, &x, &y, &tasks) - batch_loss(&minus, &x, &y, &tasks)) / (2.0 * h));
                    analytic.push(dt[[j, k]]);
                }
            }
        }
        worst = worst.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    Ok((worst, done))
}

fn gradients(suite: &mut Suite) -> lcnn::Result<()> {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, kind) in ModelKind::ALL.into_iter().enumerate() {
        let (worst, cases) = gradient_worst(kind, 100, 100 + i as u64)?;
        ok &= worst <= 1e-6;
        parts.push(format!("{} {cases} cases worst {worst:.1e}", kind.abbrev()));
    }
    suite.report("A5", ok, format!("{} (<= 1e-6)", parts.join(", ")));
    Ok(())
}

fn dataset(x: &[f64], y: &[f64], tasks: &[usize], m: usize) -> lcnn::Result<MultiTaskDataset> {
    MultiTaskDataset::new(
        Array2::from_shape_vec((x.len(), 1), x.to_vec()).map_err(|e| lcnn::Error::InvalidArgument(e.to_string()))?,
        Array1::from(y.to_vec()),
        tasks.to_vec(),
        m,
    )
}

fn lme_oracles(suite: &mut Suite) -> lcnn::Result<()> {
    // two balanced tasks with offset intercepts
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let per = 12;
    let (mut x, mut y, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for (j, offset) in [0.8, -0.5].into_iter().enumerate() {
        for i in 0..per {
            let xi = i as f64 / per as f64;
            x.push(xi);
            y.push(1.0 + 2.0 * xi + offset + noise.sample(&mut rng));
            t.push(j);
        }
    }
    let fit = lme_fit(&dataset(&x, &y, &t, 2)?)?;

    // generalized least squares with the fitted variance components
    let n = x.len();
    let design = DMatrix::from_fn(n, 2, |i, k| if k == 0 { x[i] } else { 1.0 });
    let cov = DMatrix::from_fn(n, n, |a, b| {
        let shared = if t[a] == t[b] { fit.sigma_beta2 } else { 0.0 };
        shared + if a == b { fit.sigma_eps2 } else { 0.0 }
    });
    let inv = cov.clone().try_inverse().ok_or(lcnn::Error::SingularDesign)?;
    let yv = DVector::from_vec(y.clone());
    let gram = design.transpose() * &inv * &design;
    let coef = gram.try_inverse().ok_or(lcnn::Error::SingularDesign)? * design.transpose() * &inv * &yv;
    let resid = &yv - &design * &coef;
    let weighted = &inv * resid;
    let blup: Vec<f64> = (0..2)
        .map(|j| fit.sigma_beta2 * (0..n).filter(|&i| t[i] == j).map(|i| weighted[i]).sum::<f64>())
        .collect();
    let gls_dev = [
        (fit.slope[0] - coef[0]).abs(),
        (fit.intercept - coef[1]).abs(),
        (fit.task_intercepts[0] - blup[0]).abs(),
        (fit.task_intercepts[1] - blup[1]).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    // single task against ordinary least squares
    let one: Vec<usize> = vec![0; per];
    let xs = &x[..per];
    let ys = &y[..per];
    let single = lme_fit(&dataset(xs, ys, &one, 1)?)?;
    let d1 = DMatrix::from_fn(per, 2, |i, k| if k == 0 { xs[i] } else { 1.0 });
    let ols = (d1.transpose() * &d1)
        .try_inverse()
        .ok_or(lcnn::Error::SingularDesign)?
        * d1.transpose()
        * DVector::from_column_slice(ys);
    let ols_dev = (single.slope[0] - ols[0]).abs().max((single.intercept - ols[1]).abs());

    suite.report(
        "A7",
        fit.sigma_beta2 > 0.0 && gls_dev <= 1e-6 && ols_dev <= 1e-8,
        format!(
            "EM vs GLS {gls_dev:.1e} (<= 1e-6, task variance {:.3}), single task vs OLS {ols_dev:.1e} (<= 1e-8)",
            fit.sigma_beta2
        ),
    );
    Ok(())
}

fn lipo(suite: &mut Suite) -> lcnn::Result<()> {
    let target = 0.37;
    let bounds = HyperBox::new(vec![Dimension::linear("x", -2.0, 3.0)])?;
    let objective = |p: &[f64]| (p[0] - target).powi(2);
    let a = lipo_minimize(objective, &bounds, 25, 9)?;
    let b = lipo_minimize(objective, &bounds, 25, 9)?;
    let error = (a.best_point[0] - target).abs();
    let mut incumbent = f64::INFINITY;
    let mut monotone = true;
    let mut previous = f64::INFINITY;
    for trial in &a.trials {
        incumbent = incumbent.min(trial.value);
        monotone &= incumbent <= previous;
        previous = incumbent;
    }
    monotone &= incumbent == a.best_value;
    let deterministic = a == b;
    suite.report(
        "A9",
        a.trials.len() == 25 && error <= 1e-2 && monotone && deterministic,
        format!(
            "{} evaluations, optimum error {error:.1e} (<= 1e-2), incumbent monotone: {monotone}, deterministic: {deterministic}",
            a.trials.len()
        ),
    );
    Ok(())
}

fn main() -> ExitCode {
    let only = std::env::var("LCNN_ACCEPT").ok().map(|v| {
        v.split(',')
            .map(|s| s.trim().to_uppercase())
            .filter(|s| !s.is_empty())
            .collect()
    });
    let mut suite = Suite {
        only,
        outcomes: Vec::new(),
        contrast: None,
    };
    let start = Instant::now();

    if suite.wants(&["A4"]) {
        if let Err(e) = constructions(&mut suite) {
            suite.error(&["A4"], &e);
        }
    }
    if suite.wants(&["A5"]) {
        if let Err(e) = gradients(&mut suite) {
            suite.error(&["A5"], &e);
        }
    }
    if suite.wants(&["A7"]) {
        if let Err(e) = lme_oracles(&mut suite) {
            suite.error(&["A7"], &e);
        }
    }
    if suite.wants(&["A9"]) {
        if let Err(e) = lipo(&mut suite) {
            suite.error(&["A9"], &e);
        }
    }
    if suite.wants(&["A1", "A3", "A6"]) {
        if let Err(e) = frequency_block(&mut suite) {
            let missing: Vec<&'static str> = ["A1", "A3", "A6"]
                .into_iter()
                .filter(|id| suite.outcomes.iter().all(|o| o.id != *id))
                .collect();
            suite.error(&missing, &e);
        }
    }
    if suite.wants(&["A2", "A3", "A8"]) {
        if let Err(e) = sine_block(&mut suite) {
            let missing: Vec<&'static str> = ["A2", "A3", "A8"]
                .into_iter()
                .filter(|id| suite.outcomes.iter().all(|o| o.id != *id))
                .collect();
            suite.error(&missing, &e);
        }
    }

    let mut by_id: BTreeMap<&str, bool> = BTreeMap::new();
    for o in &suite.outcomes {
        by_id.insert(o.id, o.passed);
    }
    let failed: Vec<&str> = by_id.iter().filter(|(_, &p)| !p).map(|(id, _)| *id).collect();
    println!("\nsummary ({:.0} s):", start.elapsed().as_secs_f64());
    for o in &suite.outcomes {
        println!("{} {}", if o.passed { "PASS" } else { "FAIL" }, o.id);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
