//! Experiment harness: configuration, drivers for every experiment type, and
//! the files each run writes.

mod runs;

pub use runs::{
    fit_lme, fit_model, holdout_grid, run, run_base, run_base_models, run_construct_verify, run_datasize,
    run_dbeta_sweep, run_holdout, run_likelihood_scan, run_repeat, scan_frequency_task, summarize_holdout, FittedModel,
    HoldoutCell, ScanCurve, ScanReport,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_frequency, gen_sine_line, load_csv, CsvSchema, MultiTaskDataset};
use crate::error::{Error, Result};
use crate::hpo::{Dimension, HyperBox, HyperConfig, TrialRecord};
use crate::model::ModelKind;
use crate::training::{TrainConfig, TrainDiagnostics};

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Frequency {
        num_tasks: usize,
        n_train: usize,
        n_test: usize,
        sigma: f64,
    },
    SineLine {
        num_tasks: usize,
        n_train: usize,
        n_test: usize,
        sigma: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        schema: PathBuf,
    },
}

/// Raw (unscaled) train and test data.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: MultiTaskDataset,
    pub test: MultiTaskDataset,
    /// Task frequencies of a generated frequency dataset.
    pub omega: Option<Vec<f64>>,
}

impl DatasetSpec {
    pub fn frequency_desk() -> Self {
        DatasetSpec::Frequency {
            num_tasks: 100,
            n_train: 12_000,
            n_test: 10_000,
            sigma: 0.1,
        }
    }

    pub fn sine_line_desk() -> Self {
        DatasetSpec::SineLine {
            num_tasks: 50,
            n_train: 3_000,
            n_test: 5_000,
            sigma: 0.3,
        }
    }

    /// Full-size variant of a generated dataset; CSV sources are unchanged.
    pub fn full_scale(&self) -> Self {
        match self {
            DatasetSpec::Frequency { sigma, .. } => DatasetSpec::Frequency {
                num_tasks: 250,
                n_train: 30_000,
                n_test: 25_000,
                sigma: *sigma,
            },
            DatasetSpec::SineLine { sigma, .. } => DatasetSpec::SineLine {
                num_tasks: 100,
                n_train: 6_000,
                n_test: 10_000,
                sigma: *sigma,
            },
            csv => csv.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Frequency { .. } => "frequency",
            DatasetSpec::SineLine { .. } => "sine-line",
            DatasetSpec::Csv { .. } => "csv",
        }
    }

    pub fn load(&self, seed: u64) -> Result<Splits> {
        match self {
            DatasetSpec::Frequency {
                num_tasks,
                n_train,
                n_test,
                sigma,
            } => {
                let (train, test, params) = gen_frequency(*num_tasks, *n_train, *n_test, *sigma, seed)?;
                Ok(Splits {
                    train,
                    test,
                    omega: Some(params.omega),
                })
            }
            DatasetSpec::SineLine {
                num_tasks,
                n_train,
                n_test,
                sigma,
            } => {
                let (train, test, _) = gen_sine_line(*num_tasks, *n_train, *n_test, *sigma, seed)?;
                Ok(Splits {
                    train,
                    test,
                    omega: None,
                })
            }
            DatasetSpec::Csv { train, test, schema } => {
                let schema = CsvSchema::from_json_file(schema)?;
                let train = load_csv(train, &schema)?;
                let test = load_csv(test, &schema)?.align_to_labels(train.task_labels())?;
                if test.feature_names() != train.feature_names() {
                    return Err(Error::InvalidArgument(
                        "train and test files expand to different feature columns".into(),
                    ));
                }
                Ok(Splits {
                    train,
                    test,
                    omega: None,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Base,
    Repeat,
    Datasize,
    DbetaSweep,
    Holdout,
    LikelihoodScan,
    ConstructVerify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Base => "base",
            ExperimentKind::Repeat => "repeat",
            ExperimentKind::Datasize => "datasize",
            ExperimentKind::DbetaSweep => "dbeta-sweep",
            ExperimentKind::Holdout => "holdout",
            ExperimentKind::LikelihoodScan => "likelihood-scan",
            ExperimentKind::ConstructVerify => "construct-verify",
        }
    }
}

/// How the hyperparameters of each model are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Use the configured values as they are.
    Fixed,
    /// LIPO search on a validation split, then retrain on all training data.
    Hpo,
}

/// Settings of the likelihood-scan experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSettings {
    /// Frequency of the new task.
    pub omega: f64,
    pub max_points: usize,
    pub grid_points: usize,
    pub d_beta: usize,
    pub include_prior: bool,
    /// Local maxima below this density (relative to the peak) are not modes.
    pub mode_threshold: f64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            omega: 1.5,
            max_points: 4,
            grid_points: 401,
            d_beta: 1,
            include_prior: true,
            mode_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub dataset: DatasetSpec,
    pub models: Vec<ModelKind>,
    /// Adds the linear mixed-effect baseline to base and datasize runs.
    pub include_lme: bool,
    pub search: SearchMode,
    pub hpo_iterations: usize,
    pub validation_fraction: f64,
    /// Hyperparameters for fixed runs, and values of dimensions missing from
    /// the search box.
    pub hyper: HyperConfig,
    /// Per-model replacements for `hyper`.
    pub model_hyper: BTreeMap<ModelKind, HyperConfig>,
    /// Replaces the default search box when set.
    pub search_box: Option<Vec<Dimension>>,
    pub hidden_cap: usize,
    pub num_residual_blocks: usize,
    pub train: TrainConfig,
    /// Total number of runs in a repeat experiment.
    pub repeats: usize,
    pub fractions: Vec<f64>,
    pub dims: Vec<usize>,
    pub holdout_dims: Vec<usize>,
    pub holdout_fractions: Vec<f64>,
    pub holdout_groups: usize,
    /// Number of group rotations to run; all groups when unset.
    pub holdout_folds: Option<usize>,
    pub holdout_refine_evaluations: usize,
    pub scan: ScanSettings,
    /// Added to every nonzero pyramid weight in construct-verify runs.
    pub perturbation: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for independent runs; 1 runs everything in order.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Base,
            dataset: DatasetSpec::frequency_desk(),
            models: ModelKind::ALL.to_vec(),
            include_lme: true,
            search: SearchMode::Fixed,
            hpo_iterations: 25,
            validation_fraction: 0.2,
            hyper: HyperConfig {
                peak_lr: 0.05,
                ..HyperConfig::default()
            },
            model_hyper: BTreeMap::new(),
            search_box: None,
            hidden_cap: 200,
            num_residual_blocks: 2,
            train: TrainConfig::default(),
            repeats: 5,
            fractions: vec![1.0, 0.5, 0.1],
            dims: vec![1, 2, 4, 8, 16],
            holdout_dims: vec![2, 4, 8],
            holdout_fractions: vec![0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            holdout_groups: 3,
            holdout_folds: None,
            holdout_refine_evaluations: 400,
            scan: ScanSettings::default(),
            perturbation: 0.0,
            output_dir: PathBuf::from("results"),
            seed: 0,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Full-size data, full epoch budget, a 25-iteration search per model
    /// and the unrestricted hidden size range.
    pub fn full_scale(mut self) -> Self {
        self.dataset = self.dataset.full_scale();
        let n = match &self.dataset {
            DatasetSpec::Frequency { n_train, .. } | DatasetSpec::SineLine { n_train, .. } => *n_train,
            DatasetSpec::Csv { .. } => 0,
        };
        if n > 0 {
            let (epochs, batches) = TrainConfig::full_scale_budget(n);
            self.train.max_epochs = epochs;
            self.train.batches_per_epoch = batches;
        }
        self.search = SearchMode::Hpo;
        self.hpo_iterations = 25;
        self.hidden_cap = 500;
        self
    }

    /// Hyperparameters for `kind` before any search.
    pub fn hyper_for(&self, kind: ModelKind) -> HyperConfig {
        self.model_hyper.get(&kind).copied().unwrap_or(self.hyper)
    }

    pub fn search_box_for(&self, kind: ModelKind, num_tasks: usize) -> Result<HyperBox> {
        match &self.search_box {
            Some(dims) => HyperBox::new(dims.clone()),
            None => Ok(HyperBox::default_for(kind, num_tasks).with_hidden_cap(self.hidden_cap)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("experiment config: {msg}")));
        self.train.validate()?;
        let needs_models = !matches!(
            self.experiment,
            ExperimentKind::ConstructVerify | ExperimentKind::Holdout | ExperimentKind::LikelihoodScan
        );
        if needs_models && self.models.is_empty() && !self.include_lme {
            return bad("no models selected".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.num_residual_blocks == 0 {
            return bad("at least one residual block is required".into());
        }
        for &f in self.fractions.iter().chain(&self.holdout_fractions) {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("fraction {f} outside (0, 1]"));
            }
        }
        if self.dims.iter().chain(&self.holdout_dims).any(|&d| d == 0) {
            return bad("task-parameter dimensions must be positive".into());
        }
        match self.experiment {
            ExperimentKind::Repeat if self.repeats == 0 => bad("repeats must be at least 1".into()),
            ExperimentKind::Datasize if self.fractions.is_empty() => bad("no fractions given".into()),
            ExperimentKind::DbetaSweep if self.dims.is_empty() => bad("no dimensions given".into()),
            ExperimentKind::DbetaSweep if !self.models.iter().any(|k| k.has_task_parameters()) => {
                bad("dimension sweeps need LC or LL models".into())
            }
            ExperimentKind::Holdout if self.holdout_groups < 2 => bad("hold-out needs at least 2 groups".into()),
            ExperimentKind::Holdout if self.holdout_dims.is_empty() || self.holdout_fractions.is_empty() => {
                bad("hold-out needs dimensions and fractions".into())
            }
            ExperimentKind::LikelihoodScan if !matches!(self.dataset, DatasetSpec::Frequency { .. }) => {
                bad("likelihood scans need a generated frequency dataset".into())
            }
            ExperimentKind::LikelihoodScan if !(1..=2).contains(&self.scan.d_beta) => {
                bad("likelihood scans support one or two task parameters".into())
            }
            ExperimentKind::LikelihoodScan if self.scan.grid_points < 3 => bad("scan grid too small".into()),
            _ => Ok(()),
        }
    }
}

/// What a normalized value was divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Population standard deviation of the training responses.
    ResponseStd,
    /// Test RMSE of the learned-context model trained on all tasks.
    LcBase,
}

/// One evaluated model in one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub setting: String,
    pub rmse: f64,
    pub normalizer_kind: Normalizer,
    pub normalizer: f64,
    pub normalized: f64,
    pub retries: usize,
}

impl ResultRow {
    pub fn new(experiment: ExperimentKind, model: &str, setting: String, rmse: f64, kind: Normalizer, by: f64) -> Self {
        Self {
            experiment: experiment.name().to_string(),
            model: model.to_string(),
            setting,
            rmse,
            normalizer_kind: kind,
            normalizer: by,
            normalized: rmse / by,
            retries: 0,
        }
    }

    pub fn with_retries(mut self, retries: usize) -> Self {
        self.retries = retries;
        self
    }
}

/// Aggregate statistic such as the min/max ratio of a repeat experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub model: String,
    pub setting: String,
    pub hyper: Option<HyperConfig>,
    pub train: Option<TrainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub model: String,
    pub setting: String,
    pub bounds: HyperBox,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub diagnostics: Vec<RunDiagnostics>,
    #[serde(skip)]
    pub trials: Vec<TrialLog>,
    /// Extra files (name, CSV text) such as scan curves.
    #[serde(skip)]
    pub attachments: Vec<(String, String)>,
    /// Set when the experiment checks pass/fail conditions.
    pub passed: Option<bool>,
    /// Failures of individual runs; the remaining results are still reported.
    pub errors: Vec<String>,
    pub wall_time_secs: f64,
}

impl ExperimentResult {
    pub fn row(&self, model: &str, setting: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.model == model && r.setting == setting)
    }

    pub fn statistic(&self, model: &str, statistic: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.model == model && s.statistic == statistic)
            .map(|s| s.value)
    }
}

fn write_trials(logs: &[TrialLog], path: &Path) -> Result<()> {
    let mut names: Vec<String> = Vec::new();
    for log in logs {
        for n in log.bounds.names() {
            if !names.iter().any(|m| m == n) {
                names.push(n.to_string());
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["model", "setting", "trial"].map(String::from).to_vec();
    header.extend(names.iter().cloned());
    header.extend(["value", "diverged", "step", "k_hat"].map(String::from));
    w.write_record(&header)?;
    for log in logs {
        for t in &log.trials {
            let mut row = vec![log.model.clone(), log.setting.clone(), t.trial.to_string()];
            for n in &names {
                row.push(match log.bounds.index_of(n) {
                    Some(k) => t.point[k].to_string(),
                    None => String::new(),
                });
            }
            row.push(t.value.to_string());
            row.push(t.diverged.to_string());
            row.push(serde_json::to_value(t.step)?.as_str().unwrap_or_default().to_string());
            row.push(t.k_hat.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `config.json`, `results.csv`, `diagnostics.json`, `trials.csv`
/// (when a search ran), `summary.csv` (when present) and attachments into
/// the configured output directory.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for row in &result.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    if !result.summary.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for row in &result.summary {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    #[derive(Serialize)]
    struct Diagnostics<'a> {
        experiment: &'static str,
        dataset: &'static str,
        seed: u64,
        #[serde(flatten)]
        result: &'a ExperimentResult,
    }
    let diag = Diagnostics {
        experiment: cfg.experiment.name(),
        dataset: cfg.dataset.name(),
        seed: cfg.seed,
        result,
    };
    std::fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
    if !result.trials.is_empty() {
        write_trials(&result.trials, &dir.join("trials.csv"))?;
    }
    for (name, text) in &result.attachments {
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}
