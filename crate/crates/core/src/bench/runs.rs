use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    DatasetSpec, ExperimentConfig, ExperimentKind, ExperimentResult, Normalizer, ResultRow, RunDiagnostics,
    ScanSettings, SearchMode, Splits, SummaryRow, TrialLog,
};
use crate::bundle::ModelBundle;
use crate::constructions::verify_all;
use crate::data::{frequency_value, subsample_balanced, task_groups, MultiTaskDataset, Scaler};
use crate::error::{Error, Result};
use crate::holdout::{
    fit_holdout_task, grid_1d, grid_2d, holdout_box, likelihood_scan, linspace, local_maxima, prior_from_model,
    sample_rmse, HoldoutFit, HoldoutOptions, ScanPoint, TaskSample,
};
use crate::hpo::{hpo_search, train_config, HpoSettings, HyperBox, HyperConfig, TrialRecord};
use crate::lme::lme_fit;
use crate::model::ModelKind;
use crate::training::{rmse, TrainDiagnostics};

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// A trained model in original units plus how it was obtained.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub bundle: ModelBundle,
    pub hyper: HyperConfig,
    pub diagnostics: TrainDiagnostics,
    pub search: Option<(HyperBox, Vec<TrialRecord>)>,
}

impl FittedModel {
    /// Test RMSE in original units; also stores the test residual variance
    /// (scaled units) in the bundle.
    pub fn calibrate(&mut self, test: &MultiTaskDataset) -> Result<f64> {
        let r = self.bundle.rmse(test)?;
        let scaled = r / self.bundle.scaler.y_std;
        self.bundle.residual_variance = Some(scaled * scaled);
        Ok(r)
    }
}

/// Scales `train`, then trains `kind` with `hyper`, or with the best point of
/// a search when `search` is set, and bundles the result.
pub fn fit_model(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    hyper: HyperConfig,
    train: &MultiTaskDataset,
    seed: u64,
    search: bool,
) -> Result<FittedModel> {
    let scaler = Scaler::fit(train)?;
    let scaled = scaler.apply(train)?;
    let settings = HpoSettings {
        iterations: cfg.hpo_iterations,
        validation_fraction: cfg.validation_fraction,
        num_residual_blocks: cfg.num_residual_blocks,
        train: cfg.train.clone(),
        defaults: hyper,
        seed,
    };
    let (hyper, outcome, search) = if search {
        let bounds = cfg.search_box_for(kind, train.num_tasks())?;
        let out = hpo_search(&scaled, kind, &bounds, &settings)?;
        (out.best, out.final_model, Some((bounds, out.trials)))
    } else {
        (hyper, train_config(kind, &hyper, &scaled, &settings, seed)?, None)
    };
    let train_mse = rmse(&outcome.model, &scaled)?.powi(2);
    let bundle = ModelBundle::new(outcome.model, scaler, train)?.with_residual_variance(train_mse);
    Ok(FittedModel {
        kind,
        bundle,
        hyper,
        diagnostics: outcome.diagnostics,
        search,
    })
}

/// Test RMSE of the linear mixed-effect baseline.
pub fn fit_lme(train: &MultiTaskDataset, test: &MultiTaskDataset) -> Result<f64> {
    let model = lme_fit(train)?;
    let pred = model.predict_dataset(test)?;
    let mse = (test.y() - &pred).mapv(|r| r * r).mean().ok_or(Error::EmptyDataset)?;
    Ok(mse.sqrt())
}

impl ExperimentResult {
    fn record(&mut self, row: ResultRow, fit: &FittedModel) {
        self.diagnostics.push(RunDiagnostics {
            model: row.model.clone(),
            setting: row.setting.clone(),
            hyper: Some(fit.hyper),
            train: Some(fit.diagnostics.clone()),
        });
        if let Some((bounds, trials)) = &fit.search {
            self.trials.push(TrialLog {
                model: row.model.clone(),
                setting: row.setting.clone(),
                bounds: bounds.clone(),
                trials: trials.clone(),
            });
        }
        self.rows.push(row.with_retries(fit.diagnostics.retries));
    }

    fn fail(&mut self, what: &str, e: &Error) {
        self.errors.push(format!("{what}: {e}"));
    }

    fn stat(&mut self, model: &str, statistic: &str, value: f64) {
        self.summary.push(SummaryRow {
            model: model.to_string(),
            statistic: statistic.to_string(),
            value,
        });
    }
}

fn searched(cfg: &ExperimentConfig) -> bool {
    cfg.search == SearchMode::Hpo
}

/// Runs the configured experiment after validating the configuration.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut result = match cfg.experiment {
        ExperimentKind::Base => run_base(cfg),
        ExperimentKind::Repeat => run_repeat(cfg),
        ExperimentKind::Datasize => run_datasize(cfg),
        ExperimentKind::DbetaSweep => run_dbeta_sweep(cfg),
        ExperimentKind::Holdout => run_holdout(cfg),
        ExperimentKind::LikelihoodScan => run_likelihood_scan(cfg),
        ExperimentKind::ConstructVerify => run_construct_verify(cfg),
    }?;
    result.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Test RMSE of every model, normalized by the training response standard
/// deviation.
pub fn run_base(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(run_base_models(cfg)?.0)
}

/// [`run_base`] that also returns the trained models, calibrated on the
/// test data, in configuration order.
pub fn run_base_models(cfg: &ExperimentConfig) -> Result<(ExperimentResult, Vec<FittedModel>)> {
    let splits = cfg.dataset.load(cfg.seed)?;
    let std = splits.train.response_std();
    let fits = par_map(cfg.jobs, &cfg.models, |&kind| {
        let mut fit = fit_model(cfg, kind, cfg.hyper_for(kind), &splits.train, cfg.seed, searched(cfg))?;
        let r = fit.calibrate(&splits.test)?;
        Ok((fit, r))
    })?;
    let mut res = ExperimentResult::default();
    let mut models = Vec::new();
    for (kind, fit) in cfg.models.iter().zip(fits) {
        match fit {
            Ok((fit, r)) => {
                res.record(
                    ResultRow::new(
                        cfg.experiment,
                        kind.abbrev(),
                        "base".into(),
                        r,
                        Normalizer::ResponseStd,
                        std,
                    ),
                    &fit,
                );
                models.push(fit);
            }
            Err(e) => res.fail(kind.abbrev(), &e),
        }
    }
    if cfg.include_lme {
        match fit_lme(&splits.train, &splits.test) {
            Ok(r) => res.rows.push(ResultRow::new(
                cfg.experiment,
                "LME",
                "base".into(),
                r,
                Normalizer::ResponseStd,
                std,
            )),
            Err(e) => res.fail("LME", &e),
        }
    }
    Ok((res, models))
}

/// Repeated training with fresh seeds and fixed hyperparameters, relative to
/// the first learned-context run.
///
/// Run `r` uses seed `seed + r`; under a search the hyperparameters come from
/// the run-0 search. Diverged attempts are counted per model, including those
/// of runs that ran out of retries.
pub fn run_repeat(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let splits = cfg.dataset.load(cfg.seed)?;
    let mut kinds = cfg.models.clone();
    if !kinds.contains(&ModelKind::LearnedContext) {
        kinds.insert(0, ModelKind::LearnedContext);
    }
    let first = par_map(cfg.jobs, &kinds, |&kind| {
        fit_model(cfg, kind, cfg.hyper_for(kind), &splits.train, cfg.seed, searched(cfg))
    })?;
    let mut hypers = Vec::with_capacity(kinds.len());
    let mut runs: Vec<Vec<Result<(FittedModel, f64)>>> = Vec::with_capacity(kinds.len());
    for (&kind, fit) in kinds.iter().zip(first) {
        let fit = fit.and_then(|mut f| {
            let r = f.calibrate(&splits.test)?;
            Ok((f, r))
        });
        hypers.push(match &fit {
            Ok((f, _)) => f.hyper,
            Err(_) => cfg.hyper_for(kind),
        });
        runs.push(vec![fit]);
    }
    let jobs: Vec<(usize, u64)> = (0..kinds.len())
        .flat_map(|k| (1..cfg.repeats as u64).map(move |r| (k, r)))
        .collect();
    let rest = par_map(cfg.jobs, &jobs, |&(k, r)| {
        let mut fit = fit_model(cfg, kinds[k], hypers[k], &splits.train, cfg.seed + r, false)?;
        let rmse = fit.calibrate(&splits.test)?;
        Ok((fit, rmse))
    })?;
    for (&(k, _), fit) in jobs.iter().zip(rest) {
        runs[k].push(fit);
    }

    let mut res = ExperimentResult::default();
    let lc = kinds.iter().position(|&k| k == ModelKind::LearnedContext).unwrap_or(0);
    let reference = match &runs[lc][0] {
        Ok((_, r)) => *r,
        Err(e) => {
            return Err(Error::InvalidArgument(format!(
                "reference learned-context run failed: {e}"
            )))
        }
    };
    for (k, &kind) in kinds.iter().enumerate() {
        if !cfg.models.contains(&kind) {
            continue;
        }
        let name = kind.abbrev();
        let mut divergences = 0usize;
        let mut failed = 0usize;
        let mut relative = Vec::new();
        for (r, run) in runs[k].iter().enumerate() {
            match run {
                Ok((fit, rmse)) => {
                    divergences += fit.diagnostics.retries;
                    let row = ResultRow::new(
                        cfg.experiment,
                        name,
                        format!("run{r}"),
                        *rmse,
                        Normalizer::LcBase,
                        reference,
                    );
                    relative.push(row.normalized);
                    res.record(row, fit);
                }
                Err(e) => {
                    if let Error::RetriesExhausted { attempts } = e {
                        divergences += attempts;
                    }
                    failed += 1;
                    res.fail(&format!("{name} run{r}"), e);
                }
            }
        }
        let min = relative.iter().copied().fold(f64::INFINITY, f64::min);
        let max = relative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        res.stat(name, "min_relative", min);
        res.stat(name, "max_relative", max);
        res.stat(name, "max_over_min", max / min);
        res.stat(name, "divergences", divergences as f64);
        res.stat(name, "failed_runs", failed as f64);
    }
    Ok(res)
}

fn fraction_label(f: f64) -> String {
    format!("fraction={f}")
}

/// Every model retrained on balanced subsamples of the training data.
/// Errors are normalized by the response standard deviation of the full
/// training set.
pub fn run_datasize(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let splits = cfg.dataset.load(cfg.seed)?;
    let std = splits.train.response_std();
    let subsets = cfg
        .fractions
        .iter()
        .map(|&f| subsample_balanced(&splits.train, f, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, ModelKind)> = (0..subsets.len())
        .flat_map(|i| cfg.models.iter().map(move |&k| (i, k)))
        .collect();
    let fits = par_map(cfg.jobs, &jobs, |&(i, kind)| {
        let mut fit = fit_model(cfg, kind, cfg.hyper_for(kind), &subsets[i], cfg.seed, searched(cfg))?;
        let r = fit.calibrate(&splits.test)?;
        Ok((fit, r))
    })?;
    let mut res = ExperimentResult::default();
    let mut fits = fits.into_iter();
    for (i, &f) in cfg.fractions.iter().enumerate() {
        for &kind in &cfg.models {
            match fits.next().expect("one fit per job") {
                Ok((fit, r)) => res.record(
                    ResultRow::new(
                        cfg.experiment,
                        kind.abbrev(),
                        fraction_label(f),
                        r,
                        Normalizer::ResponseStd,
                        std,
                    ),
                    &fit,
                ),
                Err(e) => res.fail(&format!("{} {}", kind.abbrev(), fraction_label(f)), &e),
            }
        }
        if cfg.include_lme {
            match fit_lme(&subsets[i], &splits.test) {
                Ok(r) => res.rows.push(ResultRow::new(
                    cfg.experiment,
                    "LME",
                    fraction_label(f),
                    r,
                    Normalizer::ResponseStd,
                    std,
                )),
                Err(e) => res.fail(&format!("LME {}", fraction_label(f)), &e),
            }
        }
    }
    Ok(res)
}

/// The learned-context reference model for normalized errors: trained on
/// all tasks with the configured (or searched) hyperparameters.
fn lc_reference(cfg: &ExperimentConfig, splits: &Splits) -> Result<(FittedModel, f64)> {
    let kind = ModelKind::LearnedContext;
    let mut fit = fit_model(cfg, kind, cfg.hyper_for(kind), &splits.train, cfg.seed, searched(cfg))?;
    let r = fit.calibrate(&splits.test)?;
    Ok((fit, r))
}

/// LC and LL trained at every task-parameter dimension with all other
/// hyperparameters copied from the base models, relative to the LC base.
pub fn run_dbeta_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let splits = cfg.dataset.load(cfg.seed)?;
    let kinds: Vec<ModelKind> = cfg.models.iter().copied().filter(|k| k.has_task_parameters()).collect();
    let (reference, base_rmse) = lc_reference(cfg, &splits)?;
    let mut res = ExperimentResult::default();
    res.record(
        ResultRow::new(
            cfg.experiment,
            "LC",
            "base".into(),
            base_rmse,
            Normalizer::LcBase,
            base_rmse,
        ),
        &reference,
    );
    let mut bases = Vec::new();
    for &kind in &kinds {
        bases.push(if kind == ModelKind::LearnedContext {
            reference.hyper
        } else if searched(cfg) {
            fit_model(cfg, kind, cfg.hyper_for(kind), &splits.train, cfg.seed, true)?.hyper
        } else {
            cfg.hyper_for(kind)
        });
    }
    let jobs: Vec<(usize, usize)> = cfg
        .dims
        .iter()
        .flat_map(|&d| (0..kinds.len()).map(move |k| (d, k)))
        .collect();
    let fits = par_map(cfg.jobs, &jobs, |&(d, k)| {
        let hyper = HyperConfig { d_beta: d, ..bases[k] };
        if kinds[k] == ModelKind::LearnedContext && hyper == reference.hyper {
            return Ok((reference.clone(), base_rmse));
        }
        let mut fit = fit_model(cfg, kinds[k], hyper, &splits.train, cfg.seed, false)?;
        let r = fit.calibrate(&splits.test)?;
        Ok((fit, r))
    })?;
    for (&(d, k), fit) in jobs.iter().zip(fits) {
        let name = kinds[k].abbrev();
        match fit {
            Ok((fit, r)) => res.record(
                ResultRow::new(
                    cfg.experiment,
                    name,
                    format!("d_beta={d}"),
                    r,
                    Normalizer::LcBase,
                    base_rmse,
                ),
                &fit,
            ),
            Err(e) => res.fail(&format!("{name} d_beta={d}"), &e),
        }
    }
    Ok(res)
}

/// Test RMSE of one hold-out task fitted from part of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutCell {
    pub d_beta: usize,
    pub fraction: f64,
    pub fold: usize,
    pub task: String,
    pub n_points: usize,
    pub rmse: f64,
    pub beta: Vec<f64>,
}

/// Hold-out fits over task-group rotations.
///
/// For every dimension and fold the LC model is trained on the other groups
/// with `hyper` (dimension replaced); each task of the held-out group is then
/// fitted from its first `ceil(fraction · n)` training points and scored on
/// all of its test points.
pub fn holdout_grid(cfg: &ExperimentConfig, splits: &Splits, hyper: HyperConfig) -> Result<Vec<HoldoutCell>> {
    let m = splits.train.num_tasks();
    let groups = task_groups(m, cfg.holdout_groups, cfg.seed)?;
    let folds = cfg.holdout_folds.unwrap_or(groups.len()).clamp(1, groups.len());
    let bases: Vec<(usize, usize)> = cfg
        .holdout_dims
        .iter()
        .flat_map(|&d| (0..folds).map(move |f| (d, f)))
        .collect();
    let models = par_map(cfg.jobs, &bases, |&(d, fold)| {
        let held = &groups[fold];
        let base: Vec<usize> = (0..m).filter(|j| !held.contains(j)).collect();
        let train = splits.train.select_tasks(&base)?;
        let test = splits.test.select_tasks(&base)?;
        let fit = fit_model(
            cfg,
            ModelKind::LearnedContext,
            HyperConfig { d_beta: d, ..hyper },
            &train,
            cfg.seed,
            false,
        )?;
        let model = &fit.bundle.model;
        let prior = prior_from_model(model, &fit.bundle.scaler.apply(&test)?)?;
        let table = model
            .tasks()
            .ok_or_else(|| Error::InvalidArgument("LC model without task table".into()))?;
        let bounds = holdout_box(table.values().view())?;
        Ok((fit, prior, bounds))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..bases.len())
        .flat_map(|b| groups[bases[b].1].iter().map(move |&j| (b, j)))
        .collect();
    let cells = par_map(cfg.jobs, &jobs, |&(b, j)| -> Result<Vec<HoldoutCell>> {
        let (d, fold) = bases[b];
        let (fit, prior, bounds) = &models[b];
        let scaler = &fit.bundle.scaler;
        let model = &fit.bundle.model;
        let train = scaler.apply(&splits.train.select_tasks(&[j])?)?;
        let test = scaler.apply(&splits.test.select_tasks(&[j])?)?;
        let full = TaskSample::from_dataset(&train, 0);
        let test = TaskSample::from_dataset(&test, 0);
        let opts = HoldoutOptions {
            refine_evaluations: cfg.holdout_refine_evaluations,
            seed: cfg.seed.wrapping_add(j as u64),
            ..HoldoutOptions::default()
        };
        cfg.holdout_fractions
            .iter()
            .map(|&f| {
                let n = ((f * full.len() as f64).ceil() as usize).clamp(1, full.len().max(1));
                let fitted = fit_holdout_task(model, &full.head(n), prior, bounds, opts)?;
                Ok(HoldoutCell {
                    d_beta: d,
                    fraction: f,
                    fold,
                    task: splits.train.task_labels()[j].clone(),
                    n_points: n.min(full.len()),
                    rmse: sample_rmse(model, &test, &fitted.beta)? * scaler.y_std,
                    beta: fitted.beta,
                })
            })
            .collect()
    })?;
    let mut out = Vec::new();
    for c in cells {
        out.extend(c?);
    }
    Ok(out)
}

/// Mean hold-out task RMSE per dimension and fraction, each task weighted
/// equally across folds, relative to `base_rmse`.
pub fn summarize_holdout(cfg: &ExperimentConfig, cells: &[HoldoutCell], base_rmse: f64) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for &d in &cfg.holdout_dims {
        for &f in &cfg.holdout_fractions {
            let picked: Vec<f64> = cells
                .iter()
                .filter(|c| c.d_beta == d && c.fraction == f)
                .map(|c| c.rmse)
                .collect();
            if picked.is_empty() {
                continue;
            }
            let mean = picked.iter().sum::<f64>() / picked.len() as f64;
            rows.push(ResultRow::new(
                ExperimentKind::Holdout,
                "LC",
                format!("d_beta={d},fraction={f}"),
                mean,
                Normalizer::LcBase,
                base_rmse,
            ));
        }
    }
    rows
}

fn holdout_csv(cells: &[HoldoutCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["d_beta", "fraction", "fold", "task", "n_points", "rmse", "beta"])?;
    for c in cells {
        let beta: Vec<String> = c.beta.iter().map(|v| v.to_string()).collect();
        w.write_record([
            c.d_beta.to_string(),
            c.fraction.to_string(),
            c.fold.to_string(),
            c.task.clone(),
            c.n_points.to_string(),
            c.rmse.to_string(),
            beta.join(";"),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Normalized hold-out RMSE grid; the normalizer is the LC model trained on
/// all tasks.
pub fn run_holdout(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let splits = cfg.dataset.load(cfg.seed)?;
    let (reference, base_rmse) = lc_reference(cfg, &splits)?;
    let mut res = ExperimentResult::default();
    res.record(
        ResultRow::new(
            cfg.experiment,
            "LC",
            "base".into(),
            base_rmse,
            Normalizer::LcBase,
            base_rmse,
        ),
        &reference,
    );
    let cells = holdout_grid(cfg, &splits, reference.hyper)?;
    res.rows.extend(summarize_holdout(cfg, &cells, base_rmse));
    res.attachments.push(("holdout_tasks.csv".into(), holdout_csv(&cells)?));
    Ok(res)
}

/// Likelihood scan after a given number of observations of the new task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCurve {
    pub points: usize,
    pub curve: Vec<ScanPoint>,
    /// Local maxima above the mode threshold, in grid order.
    pub modes: Vec<Vec<f64>>,
    pub argmax: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub omega: f64,
    /// Task parameters interpolated from the base tasks with the nearest
    /// frequencies on either side.
    pub truth: Vec<f64>,
    /// `(frequency, task parameters)` of those neighbors.
    pub neighbors: Vec<(f64, Vec<f64>)>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub curves: Vec<ScanCurve>,
    /// MAP fit from all observations.
    pub fit: HoldoutFit,
    /// True-model likelihood over the frequency for 1..=n observations.
    pub omega_curves: Vec<(usize, Vec<(f64, f64)>)>,
}

impl ScanReport {
    pub fn mode_counts(&self) -> Vec<usize> {
        self.curves.iter().map(|c| c.modes.len()).collect()
    }

    /// Mode counts never grow from one observation onwards.
    pub fn modes_non_increasing(&self) -> bool {
        let counts: Vec<usize> = self
            .curves
            .iter()
            .filter(|c| c.points >= 1)
            .map(|c| c.modes.len())
            .collect();
        counts.windows(2).all(|w| w[1] <= w[0])
    }

    /// With every observation, the mode nearest the true parameters is the
    /// global maximum.
    pub fn truth_mode_is_global(&self) -> bool {
        let Some(last) = self.curves.last() else {
            return false;
        };
        let dist = |b: &[f64]| -> f64 { b.iter().zip(&self.truth).map(|(a, t)| (a - t).powi(2)).sum() };
        last.modes
            .iter()
            .min_by(|a, b| dist(a).total_cmp(&dist(b)))
            .is_some_and(|m| *m == last.argmax)
    }
}

/// Maxima of a scan with density at least `threshold`; two-dimensional
/// scans are laid out as `side × side` with the first coordinate outermost.
fn scan_modes(curve: &[ScanPoint], d: usize, side: usize, threshold: f64) -> Vec<Vec<f64>> {
    let density: Vec<f64> = curve.iter().map(|p| p.density).collect();
    let keep = |i: &usize| density[*i] >= threshold;
    if d == 1 {
        return local_maxima(&density)
            .into_iter()
            .filter(keep)
            .map(|i| curve[i].beta.clone())
            .collect();
    }
    let at = |a: usize, b: usize| density[a * side + b];
    let mut out = Vec::new();
    for a in 0..side {
        for b in 0..side {
            let v = at(a, b);
            let mut higher_or_equal = true;
            let mut strictly_above = false;
            for da in -1i64..=1 {
                for db in -1i64..=1 {
                    let (na, nb) = (a as i64 + da, b as i64 + db);
                    if (da, db) == (0, 0) || na < 0 || nb < 0 || na >= side as i64 || nb >= side as i64 {
                        continue;
                    }
                    let n = at(na as usize, nb as usize);
                    higher_or_equal &= v >= n;
                    strictly_above |= v > n;
                }
            }
            if higher_or_equal && strictly_above && v >= threshold {
                out.push(curve[a * side + b].beta.clone());
            }
        }
    }
    out
}

/// Scans the task-parameter posterior of a new frequency task observed at
/// up to `settings.max_points` random inputs, using `fitted` (a frequency LC
/// model) frozen.
pub fn scan_frequency_task(
    fitted: &FittedModel,
    omega: &[f64],
    test: &MultiTaskDataset,
    sigma: f64,
    settings: &ScanSettings,
    seed: u64,
) -> Result<ScanReport> {
    let model = &fitted.bundle.model;
    let scaler = &fitted.bundle.scaler;
    let table = model
        .tasks()
        .ok_or_else(|| Error::InvalidArgument(format!("{} models have no task parameters", model.kind())))?;
    let d = table.dim();
    if !(1..=2).contains(&d) {
        return Err(Error::InvalidArgument(format!(
            "scans support one or two task parameters, got {d}"
        )));
    }
    if omega.len() != model.num_tasks() {
        return Err(Error::DimensionMismatch {
            what: "task frequencies",
            expected: model.num_tasks(),
            got: omega.len(),
        });
    }
    let target = settings.omega;

    let below = (0..omega.len())
        .filter(|&j| omega[j] <= target)
        .max_by(|&a, &b| omega[a].total_cmp(&omega[b]));
    let above = (0..omega.len())
        .filter(|&j| omega[j] > target)
        .min_by(|&a, &b| omega[a].total_cmp(&omega[b]));
    let beta_of = |j: usize| table.values().row(j).to_vec();
    let (truth, neighbors) = match (below, above) {
        (Some(a), Some(b)) => {
            let t = (target - omega[a]) / (omega[b] - omega[a]);
            let (ba, bb) = (beta_of(a), beta_of(b));
            let truth = ba.iter().zip(&bb).map(|(u, v)| u + t * (v - u)).collect();
            (truth, vec![(omega[a], ba), (omega[b], bb)])
        }
        (Some(j), None) | (None, Some(j)) => (beta_of(j), vec![(omega[j], beta_of(j))]),
        (None, None) => return Err(Error::EmptyDataset),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let x: Vec<f64> = (0..settings.max_points).map(|_| rng.gen_range(0.0..1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| frequency_value(target, v) + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let xs = Array2::from_shape_fn((x.len(), 1), |(i, _)| (x[i] - scaler.x_mean[0]) / scaler.x_std[0]);
    let ys = Array1::from_iter(y.iter().map(|&v| scaler.scale_y(v)));
    let sample = TaskSample::new(xs, ys)?;

    let prior = prior_from_model(model, &scaler.apply(test)?)?;
    let bounds = holdout_box(table.values().view())?;
    let axes: Vec<Vec<f64>> = bounds
        .dims
        .iter()
        .map(|dim| linspace(dim.min, dim.max, settings.grid_points))
        .collect();
    let grid = if d == 1 {
        grid_1d(&axes[0])
    } else {
        grid_2d(&axes[0], &axes[1])
    };
    let mut curves = Vec::new();
    for n in 0..=settings.max_points {
        let curve = likelihood_scan(model, &sample.head(n), &prior, &grid, settings.include_prior)?;
        let argmax = curve
            .iter()
            .max_by(|a, b| a.density.total_cmp(&b.density))
            .map(|p| p.beta.clone())
            .unwrap_or_default();
        curves.push(ScanCurve {
            points: n,
            modes: scan_modes(&curve, d, settings.grid_points, settings.mode_threshold),
            curve,
            argmax,
        });
    }
    let fit = fit_holdout_task(
        model,
        &sample,
        &prior,
        &bounds,
        HoldoutOptions {
            seed,
            ..HoldoutOptions::default()
        },
    )?;

    let omegas = linspace(0.5, 4.0, settings.grid_points);
    let s2 = sigma.max(1e-12).powi(2);
    let omega_curves = (1..=settings.max_points)
        .map(|n| {
            let sse: Vec<f64> = omegas
                .iter()
                .map(|&w| (0..n).map(|i| (y[i] - frequency_value(w, x[i])).powi(2)).sum())
                .collect();
            let low = sse.iter().copied().fold(f64::INFINITY, f64::min);
            (
                n,
                omegas
                    .iter()
                    .zip(&sse)
                    .map(|(&w, &e)| (w, (-(e - low) / (2.0 * s2)).exp()))
                    .collect(),
            )
        })
        .collect();
    Ok(ScanReport {
        omega: target,
        truth,
        neighbors,
        x,
        y,
        curves,
        fit,
        omega_curves,
    })
}

fn scan_csv(report: &ScanReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = report.truth.len();
    let mut header = vec!["points".to_string()];
    header.extend((0..d).map(|k| format!("beta{k}")));
    header.push("density".into());
    w.write_record(&header)?;
    for c in &report.curves {
        for p in &c.curve {
            let mut row = vec![c.points.to_string()];
            row.extend(p.beta.iter().map(|v| v.to_string()));
            row.push(p.density.to_string());
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn omega_csv(report: &ScanReport) -> String {
    let mut out = String::from("points,omega,density\n");
    for (n, curve) in &report.omega_curves {
        for (w, p) in curve {
            out.push_str(&format!("{n},{w},{p}\n"));
        }
    }
    out
}

/// Trains LC on a frequency dataset with the scan dimension and scans a new
/// task of the configured frequency.
pub fn run_likelihood_scan(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let DatasetSpec::Frequency { sigma, .. } = cfg.dataset else {
        return Err(Error::InvalidArgument(
            "likelihood scans need a frequency dataset".into(),
        ));
    };
    let splits = cfg.dataset.load(cfg.seed)?;
    let omega = splits.omega.clone().ok_or(Error::EmptyDataset)?;
    let hyper = HyperConfig {
        d_beta: cfg.scan.d_beta,
        ..cfg.hyper_for(ModelKind::LearnedContext)
    };
    let mut fit = fit_model(cfg, ModelKind::LearnedContext, hyper, &splits.train, cfg.seed, false)?;
    let base_rmse = fit.calibrate(&splits.test)?;
    let report = scan_frequency_task(&fit, &omega, &splits.test, sigma, &cfg.scan, cfg.seed)?;

    let mut res = ExperimentResult::default();
    res.record(
        ResultRow::new(
            cfg.experiment,
            "LC",
            "base".into(),
            base_rmse,
            Normalizer::ResponseStd,
            splits.train.response_std(),
        ),
        &fit,
    );
    for c in &report.curves {
        res.stat("LC", &format!("modes_n{}", c.points), c.modes.len() as f64);
    }
    for (k, v) in report.truth.iter().enumerate() {
        res.stat("LC", &format!("truth_beta{k}"), *v);
    }
    for (k, v) in report.fit.beta.iter().enumerate() {
        res.stat("LC", &format!("fit_beta{k}"), *v);
    }
    let truth_global = report.truth_mode_is_global();
    res.stat("LC", "truth_mode_is_global", f64::from(u8::from(truth_global)));
    res.passed = Some(report.modes_non_increasing() && truth_global);
    res.attachments.push(("scan.csv".into(), scan_csv(&report)?));
    res.attachments
        .push(("omega_likelihood.csv".into(), omega_csv(&report)));
    res.attachments
        .push(("scan_report.json".into(), serde_json::to_string_pretty(&report)?));
    Ok(res)
}

/// Checks every constructed network; `passed` is false if any deviation
/// exceeds its tolerance.
pub fn run_construct_verify(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let report = verify_all(cfg.perturbation, cfg.seed)?;
    let mut res = ExperimentResult::default();
    let mut table = String::from("check,tolerance,max_deviation,passed\n");
    for c in &report.checks {
        res.stat(&c.name, "max_deviation", c.max_deviation);
        table.push_str(&format!(
            "{},{},{},{}\n",
            c.name, c.tolerance, c.max_deviation, c.passed
        ));
    }
    res.passed = Some(report.all_passed());
    res.attachments.push(("checks.csv".into(), table));
    res.attachments
        .push(("construct_report.json".into(), serde_json::to_string_pretty(&report)?));
    Ok(res)
}
