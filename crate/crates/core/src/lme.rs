//! Linear varying-intercept model `y = aᵀx + b + β_j + ε` with
//! `β_j ~ N(0, σ_β²)`, `ε ~ N(0, σ_ε²)`, fitted by EM on the marginal likelihood.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::MultiTaskDataset;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeModel {
    pub slope: Vec<f64>,
    pub intercept: f64,
    /// Posterior means of the task intercepts.
    pub task_intercepts: Vec<f64>,
    pub sigma_eps2: f64,
    /// Zero for single-task data, where the model reduces to OLS.
    pub sigma_beta2: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmeOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LmeOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100_000,
        }
    }
}

/// Normal-equation solver for the fixed design `[X, 1]`.
struct Design {
    z: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Design {
    fn new(data: &MultiTaskDataset) -> Result<Self> {
        let (n, d) = (data.len(), data.x_dim());
        let z = DMatrix::from_fn(n, d + 1, |i, k| if k < d { data.x()[[i, k]] } else { 1.0 });
        let gram = z.transpose() * &z;
        let chol = gram.cholesky().ok_or(Error::SingularDesign)?;
        // reject near-singular designs that Cholesky still accepts
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
        if lo <= hi * 1e-7 {
            return Err(Error::SingularDesign);
        }
        Ok(Self { z, chol })
    }

    fn solve(&self, target: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(self.z.transpose() * target))
    }

    fn fitted(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.z * coef
    }
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-12)
}

pub fn lme_fit(data: &MultiTaskDataset) -> Result<LmeModel> {
    lme_fit_with(data, LmeOptions::default())
}

pub fn lme_fit_with(data: &MultiTaskDataset, opts: LmeOptions) -> Result<LmeModel> {
    let (n, d, m) = (data.len(), data.x_dim(), data.num_tasks());
    if n < d + 2 {
        return Err(Error::InvalidArgument(format!(
            "LME needs at least {} observations, got {n}",
            d + 2
        )));
    }
    let design = Design::new(data)?;
    let y = DVector::from_iterator(n, data.y().iter().copied());
    let tasks = data.tasks();
    let counts: Vec<f64> = data.task_counts().iter().map(|&c| c as f64).collect();

    let mut coef = design.solve(&y);
    let resid = &y - design.fitted(&coef);
    let mut sigma_eps2 = resid.norm_squared() / n as f64;

    let split = |coef: &DVector<f64>| (coef.rows(0, d).iter().copied().collect(), coef[d]);

    let observed = counts.iter().filter(|&&c| c > 0.0).count();
    // non-positive likelihood slope at zero task variance: the pooled fit is the maximum
    let mut sums = vec![0.0; m];
    for (i, &t) in tasks.iter().enumerate() {
        sums[t] += resid[i];
    }
    let slope_at_zero: f64 = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s * s / (sigma_eps2 * sigma_eps2) - c / sigma_eps2)
        .sum();
    if observed < 2 || slope_at_zero <= 0.0 {
        let (slope, intercept) = split(&coef);
        return Ok(LmeModel {
            slope,
            intercept,
            task_intercepts: vec![0.0; m],
            sigma_eps2,
            sigma_beta2: 0.0,
            iterations: 0,
        });
    }

    // start from the spread of per-task mean residuals
    let task_means = |r: &DVector<f64>| {
        let mut sums = vec![0.0; m];
        for (i, &t) in tasks.iter().enumerate() {
            sums[t] += r[i];
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0.0 { s / c } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let means = task_means(&resid);
    let mut sigma_beta2 = (means.iter().map(|v| v * v).sum::<f64>() / observed as f64).max(1e-3 * sigma_eps2);

    let mut post_mean = vec![0.0; m];
    let mut post_var = vec![0.0; m];
    for iter in 1..=opts.max_iterations {
        // E-step
        let resid = &y - design.fitted(&coef);
        let means = task_means(&resid);
        for j in 0..m {
            let nj = counts[j];
            post_var[j] = 1.0 / (1.0 / sigma_beta2 + nj / sigma_eps2);
            post_mean[j] = if nj > 0.0 {
                sigma_beta2 / (sigma_beta2 + sigma_eps2 / nj) * means[j]
            } else {
                0.0
            };
        }
        // M-step
        let shifted = DVector::from_fn(n, |i, _| y[i] - post_mean[tasks[i]]);
        let new_coef = design.solve(&shifted);
        let new_beta2 = (0..m)
            .filter(|&j| counts[j] > 0.0)
            .map(|j| post_mean[j].powi(2) + post_var[j])
            .sum::<f64>()
            / observed as f64;
        let fitted = design.fitted(&new_coef);
        let new_eps2 = (0..n)
            .map(|i| (y[i] - fitted[i] - post_mean[tasks[i]]).powi(2) + post_var[tasks[i]])
            .sum::<f64>()
            / n as f64;

        let coef_scale = new_coef.amax().max(1e-12);
        let change = ((&new_coef - &coef).amax() / coef_scale)
            .max(rel_change(new_beta2, sigma_beta2))
            .max(rel_change(new_eps2, sigma_eps2));
        coef = new_coef;
        sigma_beta2 = new_beta2;
        sigma_eps2 = new_eps2;
        if change < opts.tolerance {
            // final E-step so intercepts match the returned variances
            let resid = &y - design.fitted(&coef);
            let means = task_means(&resid);
            let task_intercepts = (0..m)
                .map(|j| {
                    if counts[j] > 0.0 {
                        sigma_beta2 / (sigma_beta2 + sigma_eps2 / counts[j]) * means[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let (slope, intercept) = split(&coef);
            return Ok(LmeModel {
                slope,
                intercept,
                task_intercepts,
                sigma_eps2,
                sigma_beta2,
                iterations: iter,
            });
        }
        if iter == opts.max_iterations {
            return Err(Error::NotConverged {
                iterations: iter,
                last_change: change,
            });
        }
    }
    unreachable!("loop returns on the last iteration")
}

impl LmeModel {
    pub fn num_tasks(&self) -> usize {
        self.task_intercepts.len()
    }

    /// `aᵀx + b + β_j`; tasks the model has not seen get the prior mean 0.
    pub fn predict(&self, x: ArrayView1<f64>, task: usize) -> Result<f64> {
        check_dim("x", self.slope.len(), x.len())?;
        let beta = self.task_intercepts.get(task).copied().unwrap_or(0.0);
        Ok(x.iter().zip(&self.slope).map(|(a, b)| a * b).sum::<f64>() + self.intercept + beta)
    }

    pub fn predict_dataset(&self, data: &MultiTaskDataset) -> Result<Array1<f64>> {
        (0..data.len())
            .map(|i| self.predict(data.x_row(i), data.tasks()[i]))
            .collect::<Result<Vec<_>>>()
            .map(Array1::from)
    }

    /// Marginal log-likelihood of `data` (task intercepts integrated out).
    pub fn log_likelihood(&self, data: &MultiTaskDataset) -> Result<f64> {
        let m = data.num_tasks();
        let mut sum_r = vec![0.0; m];
        let mut sum_r2 = vec![0.0; m];
        for i in 0..data.len() {
            let x = data.x_row(i);
            check_dim("x", self.slope.len(), x.len())?;
            let r = data.y()[i] - x.iter().zip(&self.slope).map(|(a, b)| a * b).sum::<f64>() - self.intercept;
            sum_r[data.tasks()[i]] += r;
            sum_r2[data.tasks()[i]] += r * r;
        }
        let (se, sb) = (self.sigma_eps2, self.sigma_beta2);
        let mut ll = -0.5 * data.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        for (j, nj) in data.task_counts().into_iter().enumerate() {
            if nj == 0 {
                continue;
            }
            let nj = nj as f64;
            let denom = se + nj * sb;
            let logdet = (nj - 1.0) * se.ln() + denom.ln();
            let quad = (sum_r2[j] - sb / denom * sum_r[j] * sum_r[j]) / se;
            ll -= 0.5 * (logdet + quad);
        }
        Ok(ll)
    }
}
