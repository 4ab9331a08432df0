//! A trained model together with its scaler and task labels, stored as JSON.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{MultiTaskDataset, Scaler};
use crate::error::{check_dim, Error, Result};
use crate::holdout::{
    fit_holdout_task, holdout_box, sample_covariance, HoldoutFit, HoldoutOptions, HoldoutPrior, TaskSample,
};
use crate::model::{ModelKind, MultiTaskModel, TaskParameterTable};
use crate::nn::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: MultiTaskModel,
    pub scaler: Scaler,
    pub task_labels: Vec<String>,
    pub feature_names: Vec<String>,
    /// Residual variance on scaled responses, used as the likelihood scale
    /// when fitting new tasks.
    pub residual_variance: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleDoc {
    kind: ModelKind,
    x_dim: usize,
    num_tasks: usize,
    net: ParamSet,
    task_parameters: Option<Vec<Vec<f64>>>,
    scaler: Scaler,
    task_labels: Vec<String>,
    feature_names: Vec<String>,
    #[serde(default)]
    residual_variance: Option<f64>,
}

impl ModelBundle {
    /// Bundles a model trained on `scaler`-transformed data with the labels of
    /// the untransformed dataset.
    pub fn new(model: MultiTaskModel, scaler: Scaler, data: &MultiTaskDataset) -> Result<Self> {
        check_dim("bundle task count", model.num_tasks(), data.num_tasks())?;
        check_dim("bundle features", model.x_dim(), scaler.x_dim())?;
        Ok(Self {
            model,
            scaler,
            task_labels: data.task_labels().to_vec(),
            feature_names: data.feature_names().to_vec(),
            residual_variance: None,
        })
    }

    pub fn with_residual_variance(mut self, variance: f64) -> Self {
        self.residual_variance = Some(variance);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BundleDoc {
            kind: self.model.kind(),
            x_dim: self.model.x_dim(),
            num_tasks: self.model.num_tasks(),
            net: self.model.net().clone(),
            task_parameters: self
                .model
                .tasks()
                .map(|t| t.values().rows().into_iter().map(|r| r.to_vec()).collect()),
            scaler: self.scaler.clone(),
            task_labels: self.task_labels.clone(),
            feature_names: self.feature_names.clone(),
            residual_variance: self.residual_variance,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BundleDoc = serde_json::from_str(text)?;
        let tasks = match doc.task_parameters {
            Some(rows) => {
                let d = rows.first().map_or(0, Vec::len);
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let values = Array2::from_shape_vec((rows.len(), d), flat)
                    .map_err(|e| Error::InvalidArgument(format!("task parameters: {e}")))?;
                Some(TaskParameterTable::from_array(values)?)
            }
            None => None,
        };
        let model = MultiTaskModel::from_parts(doc.kind, doc.x_dim, doc.num_tasks, doc.net, tasks)?;
        check_dim("task labels", doc.num_tasks, doc.task_labels.len())?;
        check_dim("scaler features", doc.x_dim, doc.scaler.x_dim())?;
        Ok(Self {
            model,
            scaler: doc.scaler,
            task_labels: doc.task_labels,
            feature_names: doc.feature_names,
            residual_variance: doc.residual_variance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn task_index(&self, label: &str) -> Option<usize> {
        self.task_labels.iter().position(|l| l == label)
    }

    fn scale_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("input columns", self.model.x_dim(), x.ncols())?;
        let mut out = x.to_owned();
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.scaler.x_mean[k], self.scaler.x_std[k]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    /// Predictions in original units for raw inputs.
    pub fn predict(&self, x: ArrayView2<f64>, tasks: &[usize]) -> Result<Array1<f64>> {
        let z = self.scale_rows(x)?;
        let pred = self.model.predict_batch(z.view(), tasks)?;
        Ok(self.scaler.unscale_y_all(&pred))
    }

    /// Predictions in original units with explicit task parameters.
    pub fn predict_with_beta(&self, x: ArrayView2<f64>, beta: &[f64]) -> Result<Array1<f64>> {
        let z = self.scale_rows(x)?;
        let pred = self.model.predict_with_beta(z.view(), beta)?;
        Ok(self.scaler.unscale_y_all(&pred))
    }

    /// RMSE in original units on an unscaled dataset.
    pub fn rmse(&self, data: &MultiTaskDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pred = self.predict(data.x().view(), data.tasks())?;
        let mse = (data.y() - &pred).mapv(|r| r * r).mean().ok_or(Error::EmptyDataset)?;
        Ok(mse.sqrt())
    }

    /// Task parameters for a new task from raw observations, with the
    /// stored task parameters as prior.
    pub fn fit_new_task(&self, x: ArrayView2<f64>, y: &[f64], opts: HoldoutOptions) -> Result<HoldoutFit> {
        let table = self
            .model
            .tasks()
            .ok_or_else(|| Error::InvalidArgument(format!("{} models have no task parameters", self.model.kind())))?;
        check_dim("new task responses", x.nrows(), y.len())?;
        let s2 = self
            .residual_variance
            .ok_or_else(|| Error::InvalidArgument("bundle has no residual variance".into()))?;
        let prior = HoldoutPrior::new(sample_covariance(table.values().view())?, s2)?;
        let sample = TaskSample::new(
            self.scale_rows(x)?,
            Array1::from_iter(y.iter().map(|&v| self.scaler.scale_y(v))),
        )?;
        let bounds = holdout_box(table.values().view())?;
        fit_holdout_task(&self.model, &sample, &prior, &bounds, opts)
    }
}
