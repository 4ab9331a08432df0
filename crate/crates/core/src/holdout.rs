//! Task parameters for tasks that were not part of training.
//!
//! The shared network stays frozen. A new task's parameter vector is the
//! minimizer of
//!
//! ```text
//! (1 / s²) Σ_i (y_i − f(x_i; β))² + βᵀ D⁻¹ β
//! ```
//!
//! where `D` is the spread of the trained task parameters and `s²` the test
//! error variance of the trained model.

use std::cell::{Cell, RefCell};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::MultiTaskDataset;
use crate::error::{check_dim, Error, Result};
use crate::hpo::{lipo_minimize, Dimension, HyperBox};
use crate::model::MultiTaskModel;

/// Added to the diagonal of every prior covariance.
pub const PRIOR_JITTER: f64 = 1e-8;

/// Prior covariance of task parameters and the likelihood scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutPrior {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    likelihood_scale: f64,
}

impl HoldoutPrior {
    /// Adds the jitter to `covariance` and checks positive definiteness.
    pub fn new(covariance: Array2<f64>, likelihood_scale: f64) -> Result<Self> {
        let d = covariance.nrows();
        if d == 0 || covariance.ncols() != d {
            return Err(Error::InvalidArgument(format!(
                "prior covariance must be square and non-empty, got {:?}",
                covariance.dim()
            )));
        }
        if !(likelihood_scale > 0.0 && likelihood_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "likelihood scale must be positive, got {likelihood_scale}"
            )));
        }
        let mut cov = DMatrix::from_fn(d, d, |i, k| 0.5 * (covariance[[i, k]] + covariance[[k, i]]));
        for i in 0..d {
            cov[(i, i)] += PRIOR_JITTER;
        }
        let precision = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("prior covariance is not positive definite".into()))?
            .inverse();
        Ok(Self {
            covariance: cov,
            precision,
            likelihood_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((d, d), |(i, k)| self.covariance[(i, k)])
    }

    pub fn likelihood_scale(&self) -> f64 {
        self.likelihood_scale
    }

    /// Same prior with the covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut cov = self.covariance() * factor;
        for i in 0..self.dim() {
            cov[[i, i]] -= PRIOR_JITTER;
        }
        Self::new(cov, self.likelihood_scale)
    }

    /// `βᵀ D⁻¹ β`.
    pub fn penalty(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        (b.transpose() * &self.precision * &b)[(0, 0)]
    }
}

/// Centered sample covariance of task parameters, one row per task.
pub fn sample_covariance(base_betas: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = base_betas.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "prior estimation needs at least 2 tasks, got {m}"
        )));
    }
    let mean = base_betas.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &base_betas - &mean;
    Ok(centered.t().dot(&centered) / (m - 1) as f64)
}

/// Sample covariance of the trained task parameters and the mean squared
/// held-out residual.
pub fn estimate_prior(base_betas: ArrayView2<f64>, base_residuals: &[f64]) -> Result<HoldoutPrior> {
    let cov = sample_covariance(base_betas)?;
    if base_residuals.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s2 = base_residuals.iter().map(|r| r * r).sum::<f64>() / base_residuals.len() as f64;
    HoldoutPrior::new(cov, s2)
}

/// Prior from a trained model: its task parameters and its residuals on
/// held-out rows of the training tasks.
pub fn prior_from_model(model: &MultiTaskModel, heldout: &MultiTaskDataset) -> Result<HoldoutPrior> {
    let table = model
        .tasks()
        .ok_or_else(|| Error::InvalidArgument(format!("{} models have no task parameters", model.kind())))?;
    let pred = model.predict_batch(heldout.x().view(), heldout.tasks())?;
    let residuals: Vec<f64> = (heldout.y() - &pred).to_vec();
    estimate_prior(table.values().view(), &residuals)
}

/// Observations of a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl TaskSample {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        check_dim("task sample rows", x.nrows(), y.len())?;
        Ok(Self { x, y })
    }

    pub fn empty(x_dim: usize) -> Self {
        Self {
            x: Array2::zeros((0, x_dim)),
            y: Array1::zeros(0),
        }
    }

    /// Rows of `task` in `data`.
    pub fn from_dataset(data: &MultiTaskDataset, task: usize) -> Self {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| data.tasks()[i] == task).collect();
        Self {
            x: data.x().select(ndarray::Axis(0), &rows),
            y: data.y().select(ndarray::Axis(0), &rows),
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            x: self.x.slice(ndarray::s![..n, ..]).to_owned(),
            y: self.y.slice(ndarray::s![..n]).to_owned(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn check_model(model: &MultiTaskModel, sample: &TaskSample, prior: &HoldoutPrior) -> Result<()> {
    if !model.kind().has_task_parameters() {
        return Err(Error::InvalidArgument(format!(
            "{} models have no task parameters",
            model.kind()
        )));
    }
    check_dim("prior dimension", model.d_beta(), prior.dim())?;
    check_dim("task sample columns", model.x_dim(), sample.x.ncols())
}

fn sum_squared_error(model: &MultiTaskModel, sample: &TaskSample, beta: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict_with_beta(sample.x.view(), beta)?;
    Ok(sample.y.iter().zip(&pred).map(|(y, p)| (y - p).powi(2)).sum())
}

/// `(1/s²) Σ (y − f(x; β))² + βᵀ D⁻¹ β` with the shared parameters of `model`.
pub fn holdout_objective(
    model: &MultiTaskModel,
    sample: &TaskSample,
    beta: &[f64],
    prior: &HoldoutPrior,
) -> Result<f64> {
    check_model(model, sample, prior)?;
    check_dim("task parameter", prior.dim(), beta.len())?;
    Ok(sum_squared_error(model, sample, beta)? / prior.likelihood_scale + prior.penalty(beta))
}

/// Per-coordinate search range: the span of the trained task parameters
/// widened by half of it on both sides.
pub fn holdout_box(base_betas: ArrayView2<f64>) -> Result<HyperBox> {
    if base_betas.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let dims = base_betas
        .columns()
        .into_iter()
        .enumerate()
        .map(|(k, col)| {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pad = 0.5 * (hi - lo);
            Dimension::linear(&format!("beta{k}"), lo - pad, hi + pad)
        })
        .collect();
    HyperBox::new(dims)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutOptions {
    /// LIPO evaluations; `None` means 25 per task-parameter dimension.
    pub budget: Option<usize>,
    /// Evaluation cap for the compass refinement after LIPO (0 disables it).
    pub refine_evaluations: usize,
    /// Refinement stops once the step is below this fraction of the box width.
    pub refine_tolerance: f64,
    pub seed: u64,
}

impl Default for HoldoutOptions {
    fn default() -> Self {
        Self {
            budget: None,
            refine_evaluations: 2000,
            refine_tolerance: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutFit {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
}

/// MAP task parameters of a new task, searched inside `bounds`.
///
/// Without observations the prior mode `0` is returned directly, as it is
/// when every coordinate of the box is collapsed.
pub fn fit_holdout_task(
    model: &MultiTaskModel,
    sample: &TaskSample,
    prior: &HoldoutPrior,
    bounds: &HyperBox,
    opts: HoldoutOptions,
) -> Result<HoldoutFit> {
    check_model(model, sample, prior)?;
    let d = prior.dim();
    check_dim("search box dimension", d, bounds.dim())?;
    let zero = vec![0.0; d];
    if sample.is_empty() || bounds.dims.iter().all(Dimension::is_fixed) {
        return Ok(HoldoutFit {
            objective: holdout_objective(model, sample, &zero, prior)?,
            beta: zero,
            evaluations: 1,
        });
    }

    let evaluations = Cell::new(0usize);
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let mut objective = |beta: &[f64]| -> f64 {
        evaluations.set(evaluations.get() + 1);
        match holdout_objective(model, sample, beta, prior) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let budget = opts.budget.unwrap_or(25 * d).max(1);
    let global = lipo_minimize(&mut objective, bounds, budget, opts.seed);
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    let global = global?;
    let (beta, value) = compass_refine(
        &mut objective,
        bounds,
        global.best_point,
        global.best_value,
        opts.refine_evaluations,
        opts.refine_tolerance,
    );
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    let evaluations = evaluations.get();
    Ok(HoldoutFit {
        beta,
        objective: value,
        evaluations,
    })
}

/// Coordinate pattern search inside the box, halving the step when no
/// coordinate move improves.
fn compass_refine<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    bounds: &HyperBox,
    mut x: Vec<f64>,
    mut fx: f64,
    max_evaluations: usize,
    tolerance: f64,
) -> (Vec<f64>, f64) {
    let widths: Vec<f64> = bounds.dims.iter().map(|d| d.max - d.min).collect();
    let mut step = 0.05;
    let mut used = 0;
    while step > tolerance && used < max_evaluations {
        let mut improved = false;
        for k in 0..x.len() {
            if widths[k] == 0.0 {
                continue;
            }
            for sign in [1.0, -1.0] {
                let mut trial = x.clone();
                trial[k] = (x[k] + sign * step * widths[k]).clamp(bounds.dims[k].min, bounds.dims[k].max);
                if trial[k] == x[k] {
                    continue;
                }
                let v = f(&trial);
                used += 1;
                if v < fx {
                    x = trial;
                    fx = v;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

/// One evaluated grid point of a likelihood scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub beta: Vec<f64>,
    pub density: f64,
}

/// `n` evenly spaced values from `lo` to `hi`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Grid for a one-dimensional scan.
pub fn grid_1d(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|&v| vec![v]).collect()
}

/// Cartesian grid for a two-dimensional scan, first coordinate outermost.
pub fn grid_2d(first: &[f64], second: &[f64]) -> Vec<Vec<f64>> {
    first
        .iter()
        .flat_map(|&a| second.iter().map(move |&b| vec![a, b]))
        .collect()
}

/// `exp(−objective / 2)` over `grid`, scaled to a unit maximum. With
/// `include_prior` off only the data term enters.
pub fn likelihood_scan(
    model: &MultiTaskModel,
    sample: &TaskSample,
    prior: &HoldoutPrior,
    grid: &[Vec<f64>],
    include_prior: bool,
) -> Result<Vec<ScanPoint>> {
    check_model(model, sample, prior)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty scan grid".into()));
    }
    if prior.dim() > 2 {
        return Err(Error::InvalidArgument(format!(
            "scans support one or two task parameters, model has {}",
            prior.dim()
        )));
    }
    let mut values = Vec::with_capacity(grid.len());
    for beta in grid {
        check_dim("grid point", prior.dim(), beta.len())?;
        let mut v = sum_squared_error(model, sample, beta)? / prior.likelihood_scale;
        if include_prior {
            v += prior.penalty(beta);
        }
        values.push(v);
    }
    let lowest = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(grid
        .iter()
        .zip(values)
        .map(|(beta, v)| ScanPoint {
            beta: beta.clone(),
            density: (-(v - lowest) / 2.0).exp(),
        })
        .collect())
}

/// Indices of local maxima of a sampled curve. A flat top counts once, at
/// its first index; the curve ends count when they exceed their neighbor.
pub fn local_maxima(curve: &[f64]) -> Vec<usize> {
    let n = curve.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && curve[j + 1] == curve[i] {
            j += 1;
        }
        let left_lower = i == 0 || curve[i - 1] < curve[i];
        let right_lower = j + 1 == n || curve[j + 1] < curve[i];
        if left_lower && right_lower && n > 1 && !(i == 0 && j + 1 == n) {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

/// `beta…, density` rows.
pub fn write_scan_csv(points: &[ScanPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = points.first().map_or(0, |p| p.beta.len());
    let mut header: Vec<String> = (0..d).map(|k| format!("beta{k}")).collect();
    header.push("density".into());
    w.write_record(&header)?;
    for p in points {
        let mut row: Vec<String> = p.beta.iter().map(|v| v.to_string()).collect();
        row.push(p.density.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fit summary with the test RMSE of the adapted task.
pub fn write_fit_json(fit: &HoldoutFit, test_rmse: f64, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        beta_hat: &'a [f64],
        objective: f64,
        evaluations: usize,
        test_rmse: f64,
    }
    let doc = Doc {
        beta_hat: &fit.beta,
        objective: fit.objective,
        evaluations: fit.evaluations,
        test_rmse,
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// RMSE of `model` on `sample` with task parameters `beta`.
pub fn sample_rmse(model: &MultiTaskModel, sample: &TaskSample, beta: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((sum_squared_error(model, sample, beta)? / sample.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model(kind: ModelKind, d: usize, seed: u64) -> MultiTaskModel {
        ModelSpec {
            kind,
            x_dim: 1,
            num_tasks: 3,
            d_beta: d,
            hidden_dim: 6,
            num_residual_blocks: 1,
        }
        .build(seed)
        .unwrap()
    }

    fn unit_prior(d: usize, s2: f64) -> HoldoutPrior {
        HoldoutPrior::new(Array2::eye(d), s2).unwrap()
    }

    fn xs(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64)
    }

    #[test]
    fn prior_covariance_matches_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let betas = Array2::from_shape_fn((1000, 1), |_| normal.sample(&mut rng));
        let p = estimate_prior(betas.view(), &[0.5]).unwrap();
        assert!((p.covariance()[[0, 0]] - 0.04).abs() <= 0.005);
    }

    #[test]
    fn identical_betas_leave_only_jitter() {
        let betas = Array2::from_elem((5, 2), 0.3);
        let p = estimate_prior(betas.view(), &[0.1, -0.1]).unwrap();
        let cov = p.covariance();
        assert!((cov[[0, 0]] - PRIOR_JITTER).abs() < 1e-20);
        assert_eq!(cov[[0, 1]], 0.0);
        assert!((p.likelihood_scale() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn prior_needs_two_tasks_and_positive_scale() {
        let one = Array2::zeros((1, 1));
        assert!(estimate_prior(one.view(), &[0.1]).is_err());
        let two = Array2::zeros((2, 1));
        assert!(estimate_prior(two.view(), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn objective_without_data_is_prior_term() {
        let m = model(ModelKind::LearnedContext, 2, 0);
        let prior = HoldoutPrior::new(ndarray::arr2(&[[2.0, 0.0], [0.0, 0.5]]), 1.0).unwrap();
        let v = holdout_objective(&m, &TaskSample::empty(1), &[1.0, 1.0], &prior).unwrap();
        assert!((v - (0.5 + 2.0)).abs() < 1e-6);
    }

    #[test]
    fn perfect_fit_leaves_prior_term() {
        let m = model(ModelKind::LearnedContext, 2, 1);
        let beta = [0.3, -0.2];
        let x = xs(20);
        let y = m.predict_with_beta(x.view(), &beta).unwrap();
        let prior = unit_prior(2, 0.1);
        let v = holdout_objective(&m, &TaskSample::new(x, y).unwrap(), &beta, &prior).unwrap();
        assert!((v - prior.penalty(&beta)).abs() < 1e-12);
    }

    fn ridge_oracle(m: &MultiTaskModel, s: &TaskSample, prior: &HoldoutPrior) -> DVector<f64> {
        // last-layer predictions are linear in beta: column k is f(x; e_k)
        let d = m.d_beta();
        let h = DMatrix::from_fn(s.len(), d, |i, k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            m.predict_with_beta(s.x.slice(ndarray::s![i..i + 1, ..]), &e).unwrap()[0]
        });
        let y = DVector::from_iterator(s.len(), s.y.iter().copied());
        let s2 = prior.likelihood_scale();
        let a = h.transpose() * &h / s2 + &prior.precision;
        a.cholesky().unwrap().solve(&(h.transpose() * y / s2))
    }

    #[test]
    fn linear_model_map_matches_ridge() {
        let m = model(ModelKind::LastLayer, 2, 3);
        let x = xs(15);
        let y = x.column(0).mapv(|v| (2.0 * v).sin());
        let sample = TaskSample::new(x, y).unwrap();
        let prior = HoldoutPrior::new(ndarray::arr2(&[[0.5, 0.1], [0.1, 0.3]]), 0.2).unwrap();
        let oracle = ridge_oracle(&m, &sample, &prior);
        let bounds = HyperBox::new(vec![
            Dimension::linear("beta0", -5.0, 5.0),
            Dimension::linear("beta1", -5.0, 5.0),
        ])
        .unwrap();
        let fit = fit_holdout_task(&m, &sample, &prior, &bounds, HoldoutOptions::default()).unwrap();
        for k in 0..2 {
            assert!((fit.beta[k] - oracle[k]).abs() <= 1e-8, "{:?} vs {oracle}", fit.beta);
        }
    }

    #[test]
    fn no_data_returns_prior_mode() {
        let m = model(ModelKind::LearnedContext, 2, 0);
        let bounds = holdout_box(ndarray::arr2(&[[0.5, 1.0], [1.0, 2.0]]).view()).unwrap();
        let fit = fit_holdout_task(
            &m,
            &TaskSample::empty(1),
            &unit_prior(2, 1.0),
            &bounds,
            HoldoutOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.beta, vec![0.0, 0.0]);
    }

    #[test]
    fn collapsed_box_returns_zero() {
        let m = model(ModelKind::LearnedContext, 1, 0);
        let bounds = holdout_box(ndarray::arr2(&[[0.4], [0.4]]).view()).unwrap();
        let sample = TaskSample::new(xs(4), Array1::ones(4)).unwrap();
        let fit = fit_holdout_task(&m, &sample, &unit_prior(1, 1.0), &bounds, HoldoutOptions::default()).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
    }

    #[test]
    fn box_spans_half_range_either_side() {
        let b = holdout_box(ndarray::arr2(&[[0.0, -1.0], [2.0, 1.0]]).view()).unwrap();
        assert_eq!((b.dims[0].min, b.dims[0].max), (-1.0, 3.0));
        assert_eq!((b.dims[1].min, b.dims[1].max), (-2.0, 2.0));
    }

    #[test]
    fn fit_leaves_model_untouched_and_is_deterministic() {
        let m = model(ModelKind::LearnedContext, 1, 5);
        let before = m.net().flat_values();
        let tasks_before = m.tasks().unwrap().values().clone();
        let sample = TaskSample::new(xs(6), Array1::from_vec(vec![0.1, 0.4, 0.2, -0.1, 0.0, 0.3])).unwrap();
        let bounds = holdout_box(ndarray::arr2(&[[-1.0], [1.0]]).view()).unwrap();
        let opts = HoldoutOptions {
            seed: 9,
            ..HoldoutOptions::default()
        };
        let a = fit_holdout_task(&m, &sample, &unit_prior(1, 0.05), &bounds, opts).unwrap();
        let b = fit_holdout_task(&m, &sample, &unit_prior(1, 0.05), &bounds, opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.net().flat_values(), before);
        assert_eq!(m.tasks().unwrap().values(), &tasks_before);
    }

    #[test]
    fn context_sensitive_models_are_rejected() {
        let m = model(ModelKind::ContextSensitive, 1, 0);
        let r = holdout_objective(&m, &TaskSample::empty(1), &[0.0], &unit_prior(1, 1.0));
        assert!(r.is_err());
    }

    #[test]
    fn scan_without_data_follows_prior() {
        let m = model(ModelKind::LearnedContext, 1, 0);
        let grid = grid_1d(&linspace(-2.0, 2.0, 41));
        let scan = likelihood_scan(&m, &TaskSample::empty(1), &unit_prior(1, 1.0), &grid, true).unwrap();
        let dens: Vec<f64> = scan.iter().map(|p| p.density).collect();
        assert_eq!(local_maxima(&dens), vec![20]);
        assert_eq!(dens[20], 1.0);
        assert!((dens[30] - (-0.5f64).exp()).abs() < 1e-6);
        assert!(likelihood_scan(&m, &TaskSample::empty(1), &unit_prior(1, 1.0), &[], true).is_err());
    }

    #[test]
    fn scan_peak_agrees_with_fit() {
        let m = model(ModelKind::LearnedContext, 1, 7);
        let x = xs(8);
        let y = m.predict_with_beta(x.view(), &[0.6]).unwrap();
        let sample = TaskSample::new(x, y).unwrap();
        let prior = unit_prior(1, 0.01);
        let values = linspace(-2.0, 2.0, 401);
        let step = values[1] - values[0];
        let scan = likelihood_scan(&m, &sample, &prior, &grid_1d(&values), true).unwrap();
        let peak = scan.iter().max_by(|a, b| a.density.total_cmp(&b.density)).unwrap();
        let bounds = HyperBox::new(vec![Dimension::linear("beta0", -2.0, 2.0)]).unwrap();
        let fit = fit_holdout_task(&m, &sample, &prior, &bounds, HoldoutOptions::default()).unwrap();
        assert!(
            (peak.beta[0] - fit.beta[0]).abs() <= step,
            "{} vs {}",
            peak.beta[0],
            fit.beta[0]
        );
    }

    #[test]
    fn tighter_prior_pulls_towards_zero() {
        let m = model(ModelKind::LastLayer, 1, 4);
        let x = xs(5);
        let y = m.predict_with_beta(x.view(), &[1.5]).unwrap() + 0.05;
        let sample = TaskSample::new(x, y).unwrap();
        let grid = grid_1d(&linspace(-3.0, 3.0, 601));
        let base = unit_prior(1, 0.5);
        let mut last = f64::INFINITY;
        for c in [1.0, 0.5, 0.1, 0.01] {
            let scan = likelihood_scan(&m, &sample, &base.scaled(c).unwrap(), &grid, true).unwrap();
            let peak = scan.iter().max_by(|a, b| a.density.total_cmp(&b.density)).unwrap();
            assert!(peak.beta[0].abs() <= last + 1e-12);
            last = peak.beta[0].abs();
        }
    }

    #[test]
    fn local_maxima_counts_plateaus_once() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 0.0, 2.0, 0.5]), vec![1, 4]);
        assert_eq!(local_maxima(&[3.0, 2.0, 1.0]), vec![0]);
        assert_eq!(local_maxima(&[1.0, 1.0]), Vec::<usize>::new());
        assert_eq!(local_maxima(&[1.0, 2.0, 3.0]), vec![2]);
    }

    #[test]
    fn scan_csv_round_trip() {
        let pts = vec![
            ScanPoint {
                beta: vec![0.0, 1.0],
                density: 1.0,
            },
            ScanPoint {
                beta: vec![0.5, 1.0],
                density: 0.2,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scan.csv");
        write_scan_csv(&pts, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next(), Some("beta0,beta1,density"));
        let fit = HoldoutFit {
            beta: vec![0.1],
            objective: 2.0,
            evaluations: 3,
        };
        write_fit_json(&fit, 0.4, dir.path().join("fit.json")).unwrap();
    }
}
