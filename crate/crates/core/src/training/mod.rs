//! Regularized multi-task loss, SGD with momentum, and the training loop.

mod momentum;
mod schedule;

pub use momentum::{sgd_step, MomentumState};
pub use schedule::{convergence_test, Phase, ScheduleState, ScheduleStep, StopReason};

use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::model::{ModelGradients, ModelKind, MultiTaskModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub momentum: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub warmup_fraction: f64,
    pub window_fraction: f64,
    pub lr_floor: f64,
    pub convergence_p_threshold: f64,
    /// Training stops once the epoch loss reaches this value.
    pub min_loss: f64,
    /// After warm-up, an epoch loss above this multiple of the first
    /// post-warm-up loss counts as divergence.
    pub divergence_factor: f64,
    pub max_retries: usize,
    pub retry_lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.01,
            momentum: 0.7,
            lambda_alpha: 0.0,
            lambda_beta: 0.0,
            max_epochs: 2000,
            batches_per_epoch: 2,
            warmup_fraction: 0.10,
            window_fraction: 0.01,
            lr_floor: 1e-8,
            convergence_p_threshold: 0.51,
            min_loss: 1e-10,
            divergence_factor: 10.0,
            max_retries: 10,
            retry_lr_factor: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Epoch and batch budget used for full-scale runs: 10 000 epochs of two
    /// batches below 100 000 observations, 1 000 epochs of 20 batches otherwise.
    pub fn full_scale_budget(num_observations: usize) -> (usize, usize) {
        if num_observations < 100_000 {
            (10_000, 2)
        } else {
            (1_000, 20)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("train config: {msg}")));
        if !self.peak_lr.is_finite() || self.peak_lr <= self.lr_floor {
            return bad("peak_lr must exceed lr_floor");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lambda_alpha >= 0.0 && self.lambda_beta >= 0.0) {
            return bad("regularization factors must be non-negative");
        }
        if self.batches_per_epoch == 0 {
            return bad("batches_per_epoch must be positive");
        }
        for (name, f) in [
            ("warmup_fraction", self.warmup_fraction),
            ("window_fraction", self.window_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(&format!("{name} must lie in (0, 1)"));
            }
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return bad("divergence_factor must exceed 1");
        }
        if !(self.retry_lr_factor > 0.0 && self.retry_lr_factor < 1.0) {
            return bad("retry_lr_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

fn regularization(model: &MultiTaskModel, lambda_alpha: f64, lambda_beta: f64) -> f64 {
    let mut reg = lambda_alpha * model.net().l2_penalty();
    if model.kind() != ModelKind::ContextSensitive {
        reg += lambda_beta * model.tasks().map_or(0.0, |t| t.l2_penalty());
    }
    reg
}

/// Mean squared error over `data` plus `λ_α‖α‖² + λ_β Σ‖β_j‖²`; the task term
/// is dropped for context-sensitive models.
pub fn mtl_loss(model: &MultiTaskModel, data: &MultiTaskDataset, lambda_alpha: f64, lambda_beta: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict_batch(data.x().view(), data.tasks())?;
    let mse = (&pred - data.y()).mapv(|r| r * r).mean().ok_or(Error::EmptyDataset)?;
    Ok(mse + regularization(model, lambda_alpha, lambda_beta))
}

/// Root mean squared prediction error over `data`, in the units of `data`.
pub fn rmse(model: &MultiTaskModel, data: &MultiTaskDataset) -> Result<f64> {
    Ok(mtl_loss(model, data, 0.0, 0.0)?.sqrt())
}

/// Loss and gradients of one batch, regularization included.
pub fn batch_gradients(
    model: &MultiTaskModel,
    data: &MultiTaskDataset,
    rows: &[usize],
    lambda_alpha: f64,
    lambda_beta: f64,
) -> Result<(f64, ModelGradients)> {
    let x = data.x().select(Axis(0), rows);
    let y = data.y().select(Axis(0), rows);
    let tasks: Vec<usize> = rows.iter().map(|&i| data.tasks()[i]).collect();
    let (mse, mut grads) = model.mse_gradients(x.view(), y.view(), &tasks)?;
    grads.net.add_l2(model.net(), lambda_alpha);
    if model.kind() != ModelKind::ContextSensitive {
        if let (Some(g), Some(t)) = (grads.tasks.as_mut(), model.tasks()) {
            g.scaled_add(2.0 * lambda_beta, t.values());
        }
    }
    Ok((mse + regularization(model, lambda_alpha, lambda_beta), grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub converged_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub stop_reason: Option<StopReason>,
    pub epochs_run: usize,
    pub lr_halvings: usize,
    /// Diverged attempts before the returned one.
    pub retries: usize,
    pub peak_lr_used: f64,
    pub seed_used: u64,
    pub final_loss: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultiTaskModel,
    pub history: Vec<EpochRecord>,
    pub diagnostics: TrainDiagnostics,
}

/// Splits `n` shuffled indices into `batches` chunks whose sizes differ by at most one.
fn batch_bounds(n: usize, batches: usize) -> Vec<(usize, usize)> {
    let batches = batches.min(n).max(1);
    let mut start = 0;
    (0..batches)
        .map(|b| {
            let len = n / batches + usize::from(b < n % batches);
            let range = (start, start + len);
            start += len;
            range
        })
        .collect()
}

/// Trains `model` in place with the warm-up/halving schedule.
///
/// Returns [`Error::Diverged`] if an epoch loss is non-finite or, after
/// warm-up, exceeds `divergence_factor` times the first post-warm-up loss.
pub fn train(mut model: MultiTaskModel, data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut schedule = ScheduleState::new(cfg);
    let mut velocity = MomentumState::zeros_like(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bounds = batch_bounds(data.len(), cfg.batches_per_epoch);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut reference = None;
    let mut stop_reason = None;
    let mut final_loss = f64::NAN;

    while !schedule.is_exhausted() {
        let epoch = schedule.epoch();
        let lr = schedule.current_lr();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(lo, hi) in &bounds {
            let rows = &order[lo..hi];
            let (loss, grads) = batch_gradients(&model, data, rows, cfg.lambda_alpha, cfg.lambda_beta)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sgd_step(&mut model, &grads, &mut velocity, lr, cfg.momentum)?;
            total += loss * rows.len() as f64;
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        // the reference is the first loss at peak learning rate
        if epoch >= schedule.warmup_epochs() {
            let reference = *reference.get_or_insert(loss);
            if loss > cfg.divergence_factor * reference {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        final_loss = loss;
        let step = schedule.step(loss);
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss,
            converged_flag: step.converged,
        });
        if let Some(reason) = step.stop {
            stop_reason = Some(reason);
            break;
        }
    }

    let diagnostics = TrainDiagnostics {
        stop_reason,
        epochs_run: history.len(),
        lr_halvings: schedule.halvings(),
        retries: 0,
        peak_lr_used: cfg.peak_lr,
        seed_used: cfg.seed,
        final_loss,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        history,
        diagnostics,
    })
}

/// Trains a model from `factory(seed)`; on divergence the peak learning rate
/// is multiplied by `retry_lr_factor` and a fresh model is built with the next
/// seed, up to `max_retries` times.
pub fn train_with_retry<F>(factory: F, data: &MultiTaskDataset, cfg: &TrainConfig) -> Result<TrainOutcome>
where
    F: Fn(u64) -> Result<MultiTaskModel>,
{
    let started = Instant::now();
    let mut attempt_cfg = cfg.clone();
    for attempt in 0..=cfg.max_retries {
        attempt_cfg.seed = cfg.seed.wrapping_add(attempt as u64);
        let model = factory(attempt_cfg.seed)?;
        match train(model, data, &attempt_cfg) {
            Ok(mut outcome) => {
                outcome.diagnostics.retries = attempt;
                outcome.diagnostics.wall_time_secs = started.elapsed().as_secs_f64();
                return Ok(outcome);
            }
            Err(Error::Diverged { .. }) => attempt_cfg.peak_lr *= cfg.retry_lr_factor,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetriesExhausted {
        attempts: cfg.max_retries + 1,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_json(diag: &TrainDiagnostics, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(diag)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_frequency;
    use crate::model::ModelSpec;
    use ndarray::{array, Array1, Array2};

    fn spec(kind: ModelKind, x_dim: usize, m: usize, d: usize, hidden: usize) -> ModelSpec {
        ModelSpec {
            kind,
            x_dim,
            num_tasks: m,
            d_beta: d,
            hidden_dim: hidden,
            num_residual_blocks: 1,
        }
    }

    fn line_data() -> MultiTaskDataset {
        let x: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        MultiTaskDataset::new(
            Array2::from_shape_vec((64, 1), x).unwrap(),
            Array1::from(y),
            vec![0; 64],
            1,
        )
        .unwrap()
    }

    #[test]
    fn loss_of_perfect_and_zero_models() {
        let model = spec(ModelKind::LearnedContext, 1, 2, 1, 4).build(0).unwrap();
        let x = array![[0.1], [0.2], [0.3]];
        let tasks = vec![0, 1, 1];
        let pred = model.predict_batch(x.view(), &tasks).unwrap();
        let data = MultiTaskDataset::new(x.clone(), pred, tasks.clone(), 2).unwrap();
        assert_eq!(mtl_loss(&model, &data, 0.0, 0.0).unwrap(), 0.0);

        let mut zero = model.clone();
        for l in zero.net_mut().layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let y = array![1.0, -2.0, 3.0];
        let data = MultiTaskDataset::new(x, y, tasks, 2).unwrap();
        assert!((mtl_loss(&zero, &data, 0.0, 0.0).unwrap() - 14.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn loss_with_regularization_matches_hand_sum() {
        let mut model = spec(ModelKind::LearnedContext, 1, 2, 1, 2).build(3).unwrap();
        model.tasks_mut().unwrap().set(1, &[0.5]).unwrap();
        let x = array![[0.1], [-0.4], [0.7]];
        let y = array![0.3, 0.0, -1.0];
        let tasks = vec![0, 1, 0];
        let data = MultiTaskDataset::new(x.clone(), y.clone(), tasks.clone(), 2).unwrap();
        let mut sse = 0.0;
        for i in 0..3 {
            sse += (y[i] - model.predict(&[x[[i, 0]]], tasks[i]).unwrap()).powi(2);
        }
        let alpha: f64 = model.net().flat_values().iter().map(|v| v * v).sum();
        let expected = sse / 3.0 + 0.1 * alpha + 0.2 * 0.25;
        assert!((mtl_loss(&model, &data, 0.1, 0.2).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn context_sensitive_loss_ignores_task_penalty() {
        let model = spec(ModelKind::ContextSensitive, 1, 2, 0, 2).build(3).unwrap();
        let data = MultiTaskDataset::new(array![[0.1]], array![0.3], vec![1], 2).unwrap();
        assert_eq!(
            mtl_loss(&model, &data, 0.0, 5.0).unwrap(),
            mtl_loss(&model, &data, 0.0, 0.0).unwrap()
        );
    }

    #[test]
    fn batch_bounds_cover_everything() {
        assert_eq!(batch_bounds(7, 2), vec![(0, 4), (4, 7)]);
        assert_eq!(batch_bounds(2, 5), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn fits_a_line() {
        let data = line_data();
        let cfg = TrainConfig {
            peak_lr: 0.02,
            max_epochs: 1500,
            batches_per_epoch: 1,
            ..TrainConfig::default()
        };
        let model = spec(ModelKind::LearnedContext, 1, 1, 1, 8).build(1).unwrap();
        let out = train(model, &data, &cfg).unwrap();
        assert!(rmse(&out.model, &data).unwrap() <= 0.01);
    }

    #[test]
    fn zero_epochs_keeps_zero_task_parameters() {
        let data = line_data();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let model = spec(ModelKind::LearnedContext, 1, 1, 3, 4).build(1).unwrap();
        let out = train(model.clone(), &data, &cfg).unwrap();
        assert!(out.model.tasks().unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, _, _) = gen_frequency(4, 200, 10, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            peak_lr: 0.01,
            max_epochs: 50,
            lambda_alpha: 1e-6,
            lambda_beta: 1e-6,
            seed: 9,
            ..TrainConfig::default()
        };
        let build = || spec(ModelKind::LastLayer, 1, 4, 2, 8).build(2).unwrap();
        let a = train(build(), &train_set, &cfg).unwrap();
        let b = train(build(), &train_set, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn full_batch_descent_does_not_increase_loss() {
        let (data, _, _) = gen_frequency(3, 90, 10, 0.1, 5).unwrap();
        let mut model = spec(ModelKind::LearnedContext, 1, 3, 1, 6).build(4).unwrap();
        let mut velocity = MomentumState::zeros_like(&model);
        let rows: Vec<usize> = (0..data.len()).collect();
        let mut prev = mtl_loss(&model, &data, 0.0, 0.0).unwrap();
        let mut violations = 0;
        for _ in 0..100 {
            let (_, g) = batch_gradients(&model, &data, &rows, 0.0, 0.0).unwrap();
            sgd_step(&mut model, &g, &mut velocity, 1e-3, 0.0).unwrap();
            let loss = mtl_loss(&model, &data, 0.0, 0.0).unwrap();
            if loss > prev + 1e-9 {
                violations += 1;
            }
            prev = loss;
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn stronger_task_penalty_shrinks_task_parameters() {
        let (data, _, _) = gen_frequency(5, 250, 10, 0.1, 2).unwrap();
        let norm = |lambda_beta: f64| {
            let cfg = TrainConfig {
                peak_lr: 0.01,
                max_epochs: 200,
                lambda_beta,
                seed: 3,
                ..TrainConfig::default()
            };
            let model = spec(ModelKind::LearnedContext, 1, 5, 2, 8).build(3).unwrap();
            train(model, &data, &cfg).unwrap().model.tasks().unwrap().l2_penalty()
        };
        let norms: Vec<f64> = [1e-6, 1e-3, 1e-1].iter().map(|&l| norm(l)).collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn huge_learning_rate_triggers_retry() {
        let (data, _, _) = gen_frequency(4, 200, 10, 0.1, 6).unwrap();
        let cfg = TrainConfig {
            peak_lr: 1e3,
            max_epochs: 30,
            max_retries: 2,
            ..TrainConfig::default()
        };
        let factory = |seed| spec(ModelKind::LearnedContext, 1, 4, 2, 8).build(seed);
        match train_with_retry(factory, &data, &cfg) {
            Ok(out) => assert!(out.diagnostics.retries >= 1),
            Err(e) => assert!(matches!(e, Error::RetriesExhausted { attempts: 3 })),
        }
    }

    #[test]
    fn well_conditioned_run_needs_no_retry() {
        let data = line_data();
        let cfg = TrainConfig {
            peak_lr: 0.01,
            max_epochs: 40,
            ..TrainConfig::default()
        };
        let factory = |seed| spec(ModelKind::LearnedContext, 1, 1, 1, 4).build(seed);
        let out = train_with_retry(factory, &data, &cfg).unwrap();
        assert_eq!(out.diagnostics.retries, 0);
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let recs = [EpochRecord {
            epoch: 0,
            lr: 1e-8,
            train_loss: 0.5,
            converged_flag: false,
        }];
        write_history_csv(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,converged_flag\n"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            peak_lr: 1e-9,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::full_scale_budget(30_000), (10_000, 2));
        assert_eq!(TrainConfig::full_scale_budget(200_000), (1_000, 20));
    }
}
