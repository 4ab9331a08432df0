//! Multi-task architectures built on the shared residual network.
//!
//! * learned-context (LC): the network sees `[x; β_j]`, `β_j` trainable;
//! * context-sensitive (CS): the network sees `[x; c_j]`, `c_j` one-hot;
//! * last-layer (LL): the network `h(x)` has `d_β` outputs and the
//!   prediction is `β_jᵀ h(x)`.
//!
//! Task ids are zero-based.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{ForwardTrace, GradientSet, NetShape, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LearnedContext,
    ContextSensitive,
    LastLayer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::LearnedContext,
        ModelKind::ContextSensitive,
        ModelKind::LastLayer,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            ModelKind::LearnedContext => "LC",
            ModelKind::ContextSensitive => "CS",
            ModelKind::LastLayer => "LL",
        }
    }

    pub fn has_task_parameters(self) -> bool {
        self != ModelKind::ContextSensitive
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lc" | "learned-context" => Ok(ModelKind::LearnedContext),
            "cs" | "context-sensitive" => Ok(ModelKind::ContextSensitive),
            "ll" | "last-layer" => Ok(ModelKind::LastLayer),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

/// One trainable vector `β_j` per task, stored as an `m × d_β` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParameterTable {
    values: Array2<f64>,
}

impl TaskParameterTable {
    pub fn zeros(num_tasks: usize, dim: usize) -> Result<Self> {
        Self::from_array(Array2::zeros((num_tasks, dim)))
    }

    pub fn from_array(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "task parameter dimension must be at least 1".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn num_tasks(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, task: usize) -> Result<ArrayView1<'_, f64>> {
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask {
                task,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(self.values.row(task))
    }

    pub fn set(&mut self, task: usize, beta: &[f64]) -> Result<()> {
        check_dim("task parameter", self.dim(), beta.len())?;
        if task >= self.num_tasks() {
            return Err(Error::UnknownTask {
                task,
                num_tasks: self.num_tasks(),
            });
        }
        self.values.row_mut(task).assign(&ArrayView1::from(beta));
        Ok(())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    /// `Σ_j ‖β_j‖²`.
    pub fn l2_penalty(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Architecture and sizes needed to build a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub x_dim: usize,
    pub num_tasks: usize,
    /// Ignored for context-sensitive models.
    pub d_beta: usize,
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
}

impl ModelSpec {
    pub fn net_shape(&self) -> NetShape {
        let (input, output) = match self.kind {
            ModelKind::LearnedContext => (self.x_dim + self.d_beta, 1),
            ModelKind::ContextSensitive => (self.x_dim + self.num_tasks, 1),
            ModelKind::LastLayer => (self.x_dim, self.d_beta),
        };
        NetShape::new(input, self.hidden_dim, self.num_residual_blocks, output)
    }

    /// He-initialized shared weights, zero task parameters.
    pub fn build(&self, seed: u64) -> Result<MultiTaskModel> {
        if self.num_tasks == 0 || self.x_dim == 0 {
            return Err(Error::InvalidArgument(format!("invalid model spec {self:?}")));
        }
        let shape = self.net_shape();
        shape.validate()?;
        let net = ParamSet::init_he(shape, seed);
        let tasks = if self.kind.has_task_parameters() {
            Some(TaskParameterTable::zeros(self.num_tasks, self.d_beta)?)
        } else {
            None
        };
        MultiTaskModel::from_parts(self.kind, self.x_dim, self.num_tasks, net, tasks)
    }
}

/// Gradients of a scalar objective w.r.t. shared weights and task parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub net: GradientSet,
    /// `m × d_β`; rows of tasks absent from the batch are zero.
    pub tasks: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    kind: ModelKind,
    x_dim: usize,
    num_tasks: usize,
    net: ParamSet,
    tasks: Option<TaskParameterTable>,
}

impl MultiTaskModel {
    pub fn from_parts(
        kind: ModelKind,
        x_dim: usize,
        num_tasks: usize,
        net: ParamSet,
        tasks: Option<TaskParameterTable>,
    ) -> Result<Self> {
        let shape = *net.shape();
        match (kind, &tasks) {
            (ModelKind::LearnedContext, Some(t)) => {
                check_dim("task count", num_tasks, t.num_tasks())?;
                check_dim("LC input width", x_dim + t.dim(), shape.input_dim)?;
                check_dim("LC output width", 1, shape.output_dim)?;
            }
            (ModelKind::LastLayer, Some(t)) => {
                check_dim("task count", num_tasks, t.num_tasks())?;
                check_dim("LL input width", x_dim, shape.input_dim)?;
                check_dim("LL output width", t.dim(), shape.output_dim)?;
            }
            (ModelKind::ContextSensitive, None) => {
                check_dim("CS input width", x_dim + num_tasks, shape.input_dim)?;
                check_dim("CS output width", 1, shape.output_dim)?;
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{kind} model {} task parameters",
                    if tasks.is_some() { "cannot have" } else { "requires" }
                )))
            }
        }
        Ok(Self {
            kind,
            x_dim,
            num_tasks,
            net,
            tasks,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    /// Task parameter dimension, zero for context-sensitive models.
    pub fn d_beta(&self) -> usize {
        self.tasks.as_ref().map_or(0, TaskParameterTable::dim)
    }

    pub fn net(&self) -> &ParamSet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ParamSet {
        &mut self.net
    }

    pub fn tasks(&self) -> Option<&TaskParameterTable> {
        self.tasks.as_ref()
    }

    pub fn tasks_mut(&mut self) -> Option<&mut TaskParameterTable> {
        self.tasks.as_mut()
    }

    /// Shared plus task-specific scalar parameters.
    pub fn num_trainable(&self) -> usize {
        self.net.num_params() + self.tasks.as_ref().map_or(0, |t| t.values().len())
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task < self.num_tasks {
            Ok(())
        } else {
            Err(Error::UnknownTask {
                task,
                num_tasks: self.num_tasks,
            })
        }
    }

    fn task_table(&self) -> Result<&TaskParameterTable> {
        self.tasks
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} model has no task parameters", self.kind)))
    }

    /// Network input for one observation.
    pub fn augment_input(&self, x: &[f64], task: usize) -> Result<Vec<f64>> {
        check_dim("x", self.x_dim, x.len())?;
        self.check_task(task)?;
        let mut z = x.to_vec();
        match self.kind {
            ModelKind::LearnedContext => z.extend(self.task_table()?.get(task)?.iter()),
            ModelKind::ContextSensitive => z.extend((0..self.num_tasks).map(|k| if k == task { 1.0 } else { 0.0 })),
            ModelKind::LastLayer => {}
        }
        Ok(z)
    }

    /// Network inputs for a batch, one row per observation.
    pub fn input_batch(&self, x: ArrayView2<f64>, tasks: &[usize]) -> Result<Array2<f64>> {
        check_dim("x columns", self.x_dim, x.ncols())?;
        check_dim("task list", x.nrows(), tasks.len())?;
        for &t in tasks {
            self.check_task(t)?;
        }
        let width = self.net.shape().input_dim;
        let mut z = Array2::zeros((x.nrows(), width));
        z.slice_mut(s![.., ..self.x_dim]).assign(&x);
        match self.kind {
            ModelKind::LearnedContext => {
                let table = self.task_table()?;
                for (i, &t) in tasks.iter().enumerate() {
                    z.slice_mut(s![i, self.x_dim..]).assign(&table.values().row(t));
                }
            }
            ModelKind::ContextSensitive => {
                for (i, &t) in tasks.iter().enumerate() {
                    z[[i, self.x_dim + t]] = 1.0;
                }
            }
            ModelKind::LastLayer => {}
        }
        Ok(z)
    }

    fn outputs_to_predictions(&self, out: &Array2<f64>, tasks: &[usize]) -> Result<Array1<f64>> {
        match self.kind {
            ModelKind::LastLayer => {
                let table = self.task_table()?;
                Ok(Array1::from_shape_fn(out.nrows(), |i| {
                    out.row(i).dot(&table.values().row(tasks[i]))
                }))
            }
            _ => Ok(out.column(0).to_owned()),
        }
    }

    pub fn predict(&self, x: &[f64], task: usize) -> Result<f64> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.predict_batch(xv, &[task])?[0])
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>, tasks: &[usize]) -> Result<Array1<f64>> {
        let z = self.input_batch(x, tasks)?;
        let out = self.net.predict_batch(z.view())?;
        self.outputs_to_predictions(&out, tasks)
    }

    /// Predictions for every row of `x` with an explicit task parameter
    /// vector in place of a stored one (LC and LL only).
    pub fn predict_with_beta(&self, x: ArrayView2<f64>, beta: &[f64]) -> Result<Array1<f64>> {
        check_dim("x columns", self.x_dim, x.ncols())?;
        check_dim("task parameter", self.task_table()?.dim(), beta.len())?;
        let beta = ArrayView1::from(beta);
        match self.kind {
            ModelKind::LearnedContext => {
                let mut z = Array2::zeros((x.nrows(), self.x_dim + beta.len()));
                z.slice_mut(s![.., ..self.x_dim]).assign(&x);
                z.slice_mut(s![.., self.x_dim..]).assign(
                    &beta
                        .broadcast((x.nrows(), beta.len()))
                        .ok_or(Error::InvalidArgument("cannot broadcast task parameter".into()))?,
                );
                Ok(self.net.predict_batch(z.view())?.column(0).to_owned())
            }
            ModelKind::LastLayer => Ok(self.net.predict_batch(x)?.dot(&beta)),
            ModelKind::ContextSensitive => unreachable!("rejected by task_table"),
        }
    }

    fn forward(&self, x: ArrayView2<f64>, tasks: &[usize]) -> Result<(ForwardTrace, Array1<f64>)> {
        let z = self.input_batch(x, tasks)?;
        let trace = self.net.forward_batch(z.view())?;
        let pred = self.outputs_to_predictions(&trace.output, tasks)?;
        Ok((trace, pred))
    }

    /// Backpropagates per-sample derivatives `d_pred` of an objective w.r.t.
    /// the predictions of a batch.
    fn backward(&self, trace: &ForwardTrace, tasks: &[usize], d_pred: ArrayView1<f64>) -> Result<ModelGradients> {
        let n = tasks.len();
        match self.kind {
            ModelKind::LearnedContext => {
                let up = d_pred.to_owned().insert_axis(Axis(1));
                let net = self.net.backward_batch(trace, up.view())?;
                let table = self.task_table()?;
                let mut dt = Array2::zeros((self.num_tasks, table.dim()));
                for (i, &t) in tasks.iter().enumerate() {
                    let g = net.d_input.slice(s![i, self.x_dim..]);
                    let mut row = dt.row_mut(t);
                    row += &g;
                }
                Ok(ModelGradients { net, tasks: Some(dt) })
            }
            ModelKind::ContextSensitive => {
                let up = d_pred.to_owned().insert_axis(Axis(1));
                Ok(ModelGradients {
                    net: self.net.backward_batch(trace, up.view())?,
                    tasks: None,
                })
            }
            ModelKind::LastLayer => {
                let table = self.task_table()?;
                let d = table.dim();
                let mut up = Array2::zeros((n, d));
                let mut dt = Array2::zeros((self.num_tasks, d));
                for (i, &t) in tasks.iter().enumerate() {
                    let beta = table.values().row(t);
                    up.row_mut(i).assign(&(&beta * d_pred[i]));
                    let h = trace.output.row(i);
                    dt.row_mut(t).scaled_add(d_pred[i], &h);
                }
                Ok(ModelGradients {
                    net: self.net.backward_batch(trace, up.view())?,
                    tasks: Some(dt),
                })
            }
        }
    }

    /// Gradients of `upstream * prediction(x, task)`.
    pub fn model_gradients(&self, x: &[f64], task: usize, upstream: f64) -> Result<ModelGradients> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (trace, _) = self.forward(xv, &[task])?;
        self.backward(&trace, &[task], ArrayView1::from(&[upstream][..]))
    }

    /// Mean squared error over a batch and its gradients.
    pub fn mse_gradients(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        tasks: &[usize],
    ) -> Result<(f64, ModelGradients)> {
        check_dim("response length", x.nrows(), y.len())?;
        if y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (trace, pred) = self.forward(x, tasks)?;
        let resid = &pred - &y;
        let n = y.len() as f64;
        let mse = resid.dot(&resid) / n;
        let d_pred = resid.mapv(|r| 2.0 * r / n);
        Ok((mse, self.backward(&trace, tasks, d_pred.view())?))
    }
}
