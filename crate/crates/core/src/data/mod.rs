//! Multi-task datasets: containers, sampling, and splitting.

mod csv_io;
mod scaler;
mod synthetic;

pub use csv_io::{load_csv, write_csv, ColumnKind, CsvSchema, FeatureSpec};
pub use scaler::Scaler;
pub use synthetic::{
    frequency_value, gen_frequency, gen_sine_line, FrequencyTaskParams, SineLineClass, SineLineTaskParams,
};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// Observations `(task, x, y)` for `num_tasks` tasks.
///
/// Task ids are dense `0..num_tasks`; the original labels are kept in
/// `task_labels` for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    x: Array2<f64>,
    y: Array1<f64>,
    task: Vec<usize>,
    num_tasks: usize,
    task_labels: Vec<String>,
    feature_names: Vec<String>,
}

impl MultiTaskDataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, task: Vec<usize>, num_tasks: usize) -> Result<Self> {
        let labels = (0..num_tasks).map(|j| j.to_string()).collect();
        let names = (0..x.ncols()).map(|c| format!("x{c}")).collect();
        Self::with_labels(x, y, task, num_tasks, labels, names)
    }

    pub fn with_labels(
        x: Array2<f64>,
        y: Array1<f64>,
        task: Vec<usize>,
        num_tasks: usize,
        task_labels: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        check_dim("response length", x.nrows(), y.len())?;
        check_dim("task column length", x.nrows(), task.len())?;
        check_dim("task labels", num_tasks, task_labels.len())?;
        check_dim("feature names", x.ncols(), feature_names.len())?;
        if let Some(&bad) = task.iter().find(|&&t| t >= num_tasks) {
            return Err(Error::UnknownTask { task: bad, num_tasks });
        }
        Ok(Self {
            x,
            y,
            task,
            num_tasks,
            task_labels,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn tasks(&self) -> &[usize] {
        &self.task
    }

    pub fn task_labels(&self) -> &[String] {
        &self.task_labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn x_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Number of observations per task.
    pub fn task_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_tasks];
        for &t in &self.task {
            counts[t] += 1;
        }
        counts
    }

    /// Row indices grouped by task, in row order.
    pub fn rows_by_task(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.num_tasks];
        for (i, &t) in self.task.iter().enumerate() {
            rows[t].push(i);
        }
        rows
    }

    /// Population standard deviation of the response.
    pub fn response_std(&self) -> f64 {
        self.y.std(0.0)
    }

    /// Keeps the given rows (in the given order); the task set is unchanged.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            task: rows.iter().map(|&i| self.task[i]).collect(),
            num_tasks: self.num_tasks,
            task_labels: self.task_labels.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Keeps only the listed tasks, renumbered `0..tasks.len()` in list order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_tasks];
        for (new, &old) in tasks.iter().enumerate() {
            if old >= self.num_tasks {
                return Err(Error::UnknownTask {
                    task: old,
                    num_tasks: self.num_tasks,
                });
            }
            remap[old] = new;
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| remap[self.task[i]] != usize::MAX).collect();
        Ok(Self {
            x: self.x.select(Axis(0), &rows),
            y: self.y.select(Axis(0), &rows),
            task: rows.iter().map(|&i| remap[self.task[i]]).collect(),
            num_tasks: tasks.len(),
            task_labels: tasks.iter().map(|&t| self.task_labels[t].clone()).collect(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Concatenates two datasets over the same task set.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_dim("task count", self.num_tasks, other.num_tasks)?;
        check_dim("feature count", self.x_dim(), other.x_dim())?;
        let x = ndarray::concatenate(Axis(0), &[self.x.view(), other.x.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let y = ndarray::concatenate(Axis(0), &[self.y.view(), other.y.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut task = self.task.clone();
        task.extend_from_slice(&other.task);
        Ok(Self {
            x,
            y,
            task,
            num_tasks: self.num_tasks,
            task_labels: self.task_labels.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Renumbers tasks to follow `labels`; every label of `self` must occur
    /// in `labels`.
    pub fn align_to_labels(&self, labels: &[String]) -> Result<Self> {
        let remap = self
            .task_labels
            .iter()
            .map(|l| {
                labels
                    .iter()
                    .position(|r| r == l)
                    .ok_or_else(|| Error::InvalidArgument(format!("task `{l}` is not in the reference task set")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: self.x.clone(),
            y: self.y.clone(),
            task: self.task.iter().map(|&t| remap[t]).collect(),
            num_tasks: labels.len(),
            task_labels: labels.to_vec(),
            feature_names: self.feature_names.clone(),
        })
    }

    pub(crate) fn map_values(&self, x: Array2<f64>, y: Array1<f64>) -> Self {
        Self {
            x,
            y,
            task: self.task.clone(),
            num_tasks: self.num_tasks,
            task_labels: self.task_labels.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

fn check_fraction(fraction: f64, allow_one: bool) -> Result<()> {
    let ok = fraction > 0.0 && (fraction < 1.0 || (allow_one && fraction == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("fraction {fraction} out of range")))
    }
}

/// Keeps the same fraction of every task: `round(fraction * n_j)` rows
/// sampled without replacement, at least one per non-empty task.
pub fn subsample_balanced(data: &MultiTaskDataset, fraction: f64, seed: u64) -> Result<MultiTaskDataset> {
    check_fraction(fraction, true)?;
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for mut rows in data.rows_by_task() {
        if rows.is_empty() {
            continue;
        }
        let k = ((fraction * rows.len() as f64).round() as usize).max(1);
        rows.shuffle(&mut rng);
        rows.truncate(k);
        keep.extend(rows);
    }
    keep.sort_unstable();
    Ok(data.select_rows(&keep))
}

/// Per-task stratified split into `(a, b)` with about `fraction` of each
/// task in `a`. Every non-empty task keeps at least one row in `a`.
pub fn split(data: &MultiTaskDataset, fraction: f64, seed: u64) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    check_fraction(fraction, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part_a = Vec::new();
    let mut part_b = Vec::new();
    for mut rows in data.rows_by_task() {
        if rows.is_empty() {
            continue;
        }
        let k = ((fraction * rows.len() as f64).round() as usize).clamp(1, rows.len());
        rows.shuffle(&mut rng);
        part_a.extend_from_slice(&rows[..k]);
        part_b.extend_from_slice(&rows[k..]);
    }
    part_a.sort_unstable();
    part_b.sort_unstable();
    Ok((data.select_rows(&part_a), data.select_rows(&part_b)))
}

/// Randomly partitions task ids into `k` groups whose sizes differ by at most one.
pub fn task_groups(num_tasks: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > num_tasks {
        return Err(Error::InvalidArgument(format!(
            "cannot split {num_tasks} tasks into {k} groups"
        )));
    }
    let mut ids: Vec<usize> = (0..num_tasks).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        groups[i % k].push(id);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(counts: &[usize]) -> MultiTaskDataset {
        let n: usize = counts.iter().sum();
        let mut task = Vec::new();
        for (j, &c) in counts.iter().enumerate() {
            task.extend(std::iter::repeat_n(j, c));
        }
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let y = Array1::from_shape_fn(n, |i| 2.0 * i as f64);
        MultiTaskDataset::new(x, y, task, counts.len()).unwrap()
    }

    #[test]
    fn aligning_follows_reference_labels() {
        let data = toy(&[1, 2]);
        let labels: Vec<String> = vec!["x".into(), "1".into(), "0".into()];
        let aligned = data.align_to_labels(&labels).unwrap();
        assert_eq!(aligned.num_tasks(), 3);
        assert_eq!(aligned.tasks(), &[2, 1, 1]);
        assert!(data.align_to_labels(&labels[..2]).is_err());
    }

    #[test]
    fn rejects_out_of_range_task() {
        let x = Array2::zeros((2, 1));
        let y = Array1::zeros(2);
        assert!(MultiTaskDataset::new(x, y, vec![0, 3], 2).is_err());
    }

    #[test]
    fn counts_sum_to_total() {
        let d = toy(&[3, 5, 2]);
        assert_eq!(d.task_counts(), vec![3, 5, 2]);
        assert_eq!(d.task_counts().iter().sum::<usize>(), d.len());
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let d = toy(&[4, 6]);
        assert_eq!(subsample_balanced(&d, 1.0, 1).unwrap(), d);
    }

    #[test]
    fn subsample_half_of_ten() {
        let d = toy(&[10, 10, 10]);
        let s = subsample_balanced(&d, 0.5, 7).unwrap();
        assert_eq!(s.task_counts(), vec![5, 5, 5]);
        let again = subsample_balanced(&d, 0.5, 7).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn subsample_keeps_proportions_and_minimum() {
        let d = toy(&[40, 21, 3]);
        let half = subsample_balanced(&d, 0.5, 2).unwrap();
        assert_eq!(half.task_counts(), vec![20, 11, 2]);
        let tenth = subsample_balanced(&d, 0.1, 2).unwrap();
        assert_eq!(tenth.task_counts(), vec![4, 2, 1]);
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified() {
        let d = toy(&[10, 1, 7]);
        let (a, b) = split(&d, 0.8, 3).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        assert!(a.task_counts().iter().all(|&c| c > 0));
        assert_eq!(a.task_counts()[1], 1);
        let mut xs: Vec<f64> = a.x().iter().chain(b.x().iter()).copied().collect();
        xs.sort_by(f64::total_cmp);
        let mut orig: Vec<f64> = d.x().iter().copied().collect();
        orig.sort_by(f64::total_cmp);
        assert_eq!(xs, orig);
        assert_eq!(split(&d, 0.8, 3).unwrap(), (a, b));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = toy(&[2]);
        assert!(split(&d, 1.0, 0).is_err());
        assert!(split(&d, 0.0, 0).is_err());
    }

    #[test]
    fn task_groups_balanced_disjoint() {
        let groups = task_groups(100, 3, 5).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn select_tasks_renumbers() {
        let d = toy(&[2, 3, 4]);
        let s = d.select_tasks(&[2, 0]).unwrap();
        assert_eq!(s.num_tasks(), 2);
        assert_eq!(s.task_counts(), vec![4, 2]);
        assert_eq!(s.task_labels(), &["2".to_string(), "0".to_string()]);
    }
}
