use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::MultiTaskDataset;
use crate::error::{check_dim, Error, Result};

/// Standardizes features and response with statistics of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn nonzero(std: f64) -> f64 {
    if std > 0.0 && std.is_finite() {
        std
    } else {
        1.0
    }
}

impl Scaler {
    pub fn fit(train: &MultiTaskDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let x = train.x();
        let x_mean = x.mean_axis(Axis(0)).ok_or(Error::EmptyDataset)?;
        let x_std = x.std_axis(Axis(0), 0.0);
        Ok(Self {
            x_mean: x_mean.to_vec(),
            x_std: x_std.iter().map(|&s| nonzero(s)).collect(),
            y_mean: train.y().mean().ok_or(Error::EmptyDataset)?,
            y_std: nonzero(train.y().std(0.0)),
        })
    }

    /// Identity transform for `x_dim` features.
    pub fn identity(x_dim: usize) -> Self {
        Self {
            x_mean: vec![0.0; x_dim],
            x_std: vec![1.0; x_dim],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn apply(&self, data: &MultiTaskDataset) -> Result<MultiTaskDataset> {
        check_dim("scaler features", self.x_dim(), data.x_dim())?;
        let mut x = data.x().clone();
        for (mut col, (m, s)) in x.axis_iter_mut(Axis(1)).zip(self.x_mean.iter().zip(&self.x_std)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        let y = data.y().mapv(|v| self.scale_y(v));
        Ok(data.map_values(x, y))
    }

    pub fn invert(&self, data: &MultiTaskDataset) -> Result<MultiTaskDataset> {
        check_dim("scaler features", self.x_dim(), data.x_dim())?;
        let mut x = data.x().clone();
        for (mut col, (m, s)) in x.axis_iter_mut(Axis(1)).zip(self.x_mean.iter().zip(&self.x_std)) {
            col.mapv_inplace(|v| v * s + m);
        }
        let y = data.y().mapv(|v| self.unscale_y(v));
        Ok(data.map_values(x, y))
    }

    pub fn scale_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("scaler features", self.x_dim(), x.len())?;
        Ok(x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn scale_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn unscale_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    pub fn unscale_y_all(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| self.unscale_y(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_frequency;
    use ndarray::{array, Array2};

    #[test]
    fn apply_then_invert_is_identity() {
        let (train, test, _) = gen_frequency(5, 200, 100, 0.1, 3).unwrap();
        let s = Scaler::fit(&train).unwrap();
        let back = s.invert(&s.apply(&test).unwrap()).unwrap();
        for (a, b) in back.y().iter().zip(test.y()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in back.x().iter().zip(test.x()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scaled_training_target_is_standard() {
        let (train, _, _) = gen_frequency(5, 500, 10, 0.1, 8).unwrap();
        let s = Scaler::fit(&train).unwrap();
        let t = s.apply(&train).unwrap();
        assert!(t.y().mean().unwrap().abs() < 1e-9);
        assert!((t.y().std(0.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_column_uses_unit_std() {
        let d = MultiTaskDataset::new(Array2::from_elem((3, 1), 4.0), array![1.0, 2.0, 3.0], vec![0, 0, 0], 1).unwrap();
        let s = Scaler::fit(&d).unwrap();
        assert_eq!(s.x_std, vec![1.0]);
    }

    #[test]
    fn scaled_test_rows_do_not_depend_on_other_test_rows() {
        let (train, test, _) = gen_frequency(4, 100, 100, 0.1, 1).unwrap();
        let (_, other, _) = gen_frequency(4, 100, 100, 0.1, 2).unwrap();
        let s = Scaler::fit(&train).unwrap();
        let alone = s.apply(&test).unwrap();
        let mixed = s.apply(&test.concat(&other).unwrap()).unwrap();
        for i in 0..test.len() {
            assert_eq!(alone.y()[i], mixed.y()[i]);
            assert_eq!(alone.x()[[i, 0]], mixed.x()[[i, 0]]);
        }
    }
}
