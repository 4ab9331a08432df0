//! Synthetic multi-task generators.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MultiTaskDataset;
use crate::error::{Error, Result};

/// Frequencies of the sine-wave tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTaskParams {
    pub omega: Vec<f64>,
    pub sigma: f64,
}

/// Noise-free response of a frequency task: `0.5 sin(2π ω x) + 0.5`.
pub fn frequency_value(omega: f64, x: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * omega * x).sin() + 0.5
}

impl FrequencyTaskParams {
    pub fn value(&self, task: usize, x: f64) -> f64 {
        frequency_value(self.omega[task], x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum SineLineClass {
    Affine { slope: f64, intercept: f64 },
    Sine { amplitude: f64, phase: f64 },
}

impl SineLineClass {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            SineLineClass::Affine { slope, intercept } => slope * x + intercept,
            SineLineClass::Sine { amplitude, phase } => amplitude * (x + phase).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineLineTaskParams {
    pub tasks: Vec<SineLineClass>,
    pub sigma: f64,
}

/// Splits `total` points over `m` tasks as evenly as possible.
fn per_task_counts(total: usize, m: usize) -> Vec<usize> {
    (0..m).map(|j| total / m + usize::from(j < total % m)).collect()
}

fn sample<R, F>(rng: &mut R, counts: &[usize], x_range: (f64, f64), sigma: f64, f: F) -> Result<MultiTaskDataset>
where
    R: Rng,
    F: Fn(usize, f64) -> f64,
{
    let n: usize = counts.iter().sum();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut task = Vec::with_capacity(n);
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let x = rng.gen_range(x_range.0..x_range.1);
            let eps = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            xs.push(x);
            ys.push(f(j, x) + eps);
            task.push(j);
        }
    }
    MultiTaskDataset::new(
        Array2::from_shape_vec((n, 1), xs).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        Array1::from(ys),
        task,
        counts.len(),
    )
}

fn check_sizes(num_tasks: usize, n_train: usize, n_test: usize, sigma: f64) -> Result<()> {
    if num_tasks == 0 || n_train == 0 || n_test == 0 || sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "generator needs positive sizes and sigma >= 0 (tasks {num_tasks}, train {n_train}, test {n_test}, sigma {sigma})"
        )));
    }
    Ok(())
}

/// Sine waves of random frequency `ω ~ U(0.5, 4)` over `x ~ U(0, 1)`.
///
/// Points are spread evenly over the tasks; train and test share the task
/// frequencies and input distribution.
pub fn gen_frequency(
    num_tasks: usize,
    n_train: usize,
    n_test: usize,
    sigma: f64,
    seed: u64,
) -> Result<(MultiTaskDataset, MultiTaskDataset, FrequencyTaskParams)> {
    check_sizes(num_tasks, n_train, n_test, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Vec<f64> = (0..num_tasks).map(|_| rng.gen_range(0.5..4.0)).collect();
    let f = |j: usize, x: f64| frequency_value(omega[j], x);
    let train = sample(&mut rng, &per_task_counts(n_train, num_tasks), (0.0, 1.0), sigma, f)?;
    let test = sample(&mut rng, &per_task_counts(n_test, num_tasks), (0.0, 1.0), sigma, f)?;
    Ok((train, test, FrequencyTaskParams { omega, sigma }))
}

/// Half affine tasks `a x + b`, half sine tasks `c sin(x + d)`, over `x ~ U(-5, 5)`.
///
/// Even task ids are affine, odd ids are sines.
pub fn gen_sine_line(
    num_tasks: usize,
    n_train: usize,
    n_test: usize,
    sigma: f64,
    seed: u64,
) -> Result<(MultiTaskDataset, MultiTaskDataset, SineLineTaskParams)> {
    check_sizes(num_tasks, n_train, n_test, sigma)?;
    if !num_tasks.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "sine-and-line needs an even task count, got {num_tasks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<SineLineClass> = (0..num_tasks)
        .map(|j| {
            if j % 2 == 0 {
                SineLineClass::Affine {
                    slope: rng.gen_range(-3.0..3.0),
                    intercept: rng.gen_range(-3.0..3.0),
                }
            } else {
                SineLineClass::Sine {
                    amplitude: rng.gen_range(0.1..5.0),
                    phase: rng.gen_range(0.0..std::f64::consts::PI),
                }
            }
        })
        .collect();
    let f = |j: usize, x: f64| tasks[j].value(x);
    let train = sample(&mut rng, &per_task_counts(n_train, num_tasks), (-5.0, 5.0), sigma, f)?;
    let test = sample(&mut rng, &per_task_counts(n_test, num_tasks), (-5.0, 5.0), sigma, f)?;
    Ok((train, test, SineLineTaskParams { tasks, sigma }))
}
