//! Hyperparameter search: a validation split, LIPO over the search box, and a
//! final model trained on all training data with the best configuration.

mod lipo;

pub use lipo::{
    lipo_minimize, lipo_minimize_with, Dimension, HyperBox, LipoOptions, LipoResult, Scale, StepKind, TrialRecord,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::training::{rmse, train_with_retry, TrainConfig, TrainOutcome};

pub const PEAK_LR: &str = "peak_lr";
pub const HIDDEN_DIM: &str = "hidden_dim";
pub const LAMBDA_ALPHA: &str = "lambda_alpha";
pub const LAMBDA_BETA: &str = "lambda_beta";
pub const D_BETA: &str = "d_beta";

impl HyperBox {
    /// Default search space; the task-parameter dimensions are left out for
    /// context-sensitive models.
    pub fn default_for(kind: ModelKind, num_tasks: usize) -> Self {
        let mut dims = vec![
            Dimension::log10(PEAK_LR, 1e-4, 1.5),
            Dimension::integer(HIDDEN_DIM, 50.0, 500.0),
            Dimension::log10(LAMBDA_ALPHA, 1e-15, 1e-5),
        ];
        if kind.has_task_parameters() {
            dims.push(Dimension::log10(LAMBDA_BETA, 1e-15, 1e-3));
            dims.push(Dimension::integer(D_BETA, 1.0, num_tasks.clamp(1, 25) as f64));
        }
        Self { dims }
    }

    /// Caps the hidden-size dimension.
    pub fn with_hidden_cap(mut self, cap: usize) -> Self {
        if let Some(k) = self.index_of(HIDDEN_DIM) {
            let d = &mut self.dims[k];
            d.max = d.max.min(cap as f64);
            d.min = d.min.min(d.max);
        }
        self
    }

    /// Collapses every dimension to the given configuration.
    pub fn point(cfg: &HyperConfig, kind: ModelKind) -> Self {
        let fixed = |name: &str, v: f64| Dimension::linear(name, v, v);
        let mut dims = vec![
            fixed(PEAK_LR, cfg.peak_lr),
            fixed(HIDDEN_DIM, cfg.hidden_dim as f64),
            fixed(LAMBDA_ALPHA, cfg.lambda_alpha),
        ];
        if kind.has_task_parameters() {
            dims.push(fixed(LAMBDA_BETA, cfg.lambda_beta));
            dims.push(fixed(D_BETA, cfg.d_beta as f64));
        }
        Self { dims }
    }
}

/// The searched hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub peak_lr: f64,
    pub hidden_dim: usize,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub d_beta: usize,
}

impl HyperConfig {
    /// Reads named coordinates of `point`; names absent from the box keep
    /// the values of `self`.
    pub fn with_point(mut self, bounds: &HyperBox, point: &[f64]) -> Self {
        for (d, &v) in bounds.dims.iter().zip(point) {
            match d.name.as_str() {
                PEAK_LR => self.peak_lr = v,
                HIDDEN_DIM => self.hidden_dim = v.round() as usize,
                LAMBDA_ALPHA => self.lambda_alpha = v,
                LAMBDA_BETA => self.lambda_beta = v,
                D_BETA => self.d_beta = v.round() as usize,
                _ => {}
            }
        }
        self
    }

    pub fn apply_to(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            lambda_alpha: self.lambda_alpha,
            lambda_beta: self.lambda_beta,
            ..base.clone()
        }
    }

    pub fn model_spec(&self, kind: ModelKind, data: &MultiTaskDataset, blocks: usize) -> ModelSpec {
        ModelSpec {
            kind,
            x_dim: data.x_dim(),
            num_tasks: data.num_tasks(),
            d_beta: self.d_beta,
            hidden_dim: self.hidden_dim,
            num_residual_blocks: blocks,
        }
    }
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.01,
            hidden_dim: 128,
            lambda_alpha: 1e-8,
            lambda_beta: 1e-6,
            d_beta: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoSettings {
    pub iterations: usize,
    pub validation_fraction: f64,
    pub num_residual_blocks: usize,
    /// Epochs, batches, momentum and schedule knobs shared by every trial.
    pub train: TrainConfig,
    /// Values used for dimensions the box does not contain.
    pub defaults: HyperConfig,
    pub seed: u64,
}

impl Default for HpoSettings {
    fn default() -> Self {
        Self {
            iterations: 25,
            validation_fraction: 0.2,
            num_residual_blocks: 2,
            train: TrainConfig::default(),
            defaults: HyperConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HpoOutcome {
    pub best: HyperConfig,
    pub best_validation_rmse: f64,
    pub trials: Vec<TrialRecord>,
    pub final_model: TrainOutcome,
}

/// Trains one configuration with divergence retry and returns the outcome.
pub fn train_config(
    kind: ModelKind,
    cfg: &HyperConfig,
    data: &MultiTaskDataset,
    settings: &HpoSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    let spec = cfg.model_spec(kind, data, settings.num_residual_blocks);
    let mut train_cfg = cfg.apply_to(&settings.train);
    train_cfg.seed = seed;
    train_with_retry(|s| spec.build(s), data, &train_cfg)
}

/// Searches `bounds` on a stratified split of `data`, then retrains the best
/// configuration on all of `data`.
pub fn hpo_search(
    data: &MultiTaskDataset,
    kind: ModelKind,
    bounds: &HyperBox,
    settings: &HpoSettings,
) -> Result<HpoOutcome> {
    let (fit_part, val_part) = split(data, 1.0 - settings.validation_fraction, settings.seed)?;
    let mut hard_error: Option<Error> = None;
    let objective = |point: &[f64]| {
        if hard_error.is_some() {
            return f64::NAN;
        }
        let cfg = settings.defaults.with_point(bounds, point);
        match train_config(kind, &cfg, &fit_part, settings, settings.seed).and_then(|out| rmse(&out.model, &val_part)) {
            Ok(v) => v,
            Err(Error::RetriesExhausted { .. }) => f64::NAN,
            Err(e) => {
                hard_error = Some(e);
                f64::NAN
            }
        }
    };
    let result = lipo_minimize(objective, bounds, settings.iterations, settings.seed);
    if let Some(e) = hard_error {
        return Err(e);
    }
    let result = result?;
    let best = settings.defaults.with_point(bounds, &result.best_point);
    let final_model = train_config(kind, &best, data, settings, settings.seed)?;
    Ok(HpoOutcome {
        best,
        best_validation_rmse: result.best_value,
        trials: result.trials,
        final_model,
    })
}

/// `trial, <dimension names>, value, diverged, step, k_hat`.
pub fn write_trials_csv(bounds: &HyperBox, trials: &[TrialRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trial".to_string()];
    header.extend(bounds.names().into_iter().map(String::from));
    header.extend(["value", "diverged", "step", "k_hat"].map(String::from));
    w.write_record(&header)?;
    for t in trials {
        let mut row = vec![t.trial.to_string()];
        row.extend(t.point.iter().map(|v| v.to_string()));
        row.push(t.value.to_string());
        row.push(t.diverged.to_string());
        row.push(serde_json::to_value(t.step)?.as_str().unwrap_or_default().to_string());
        row.push(t.k_hat.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_best_config_json(best: &HyperConfig, validation_rmse: f64, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        #[serde(flatten)]
        config: &'a HyperConfig,
        validation_rmse: f64,
    }
    let doc = Doc {
        config: best,
        validation_rmse,
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
