use ndarray::{Array1, Array2, Zip};

use crate::error::{check_dim, Result};
use crate::model::{ModelGradients, MultiTaskModel};

/// Heavy-ball velocity buffers for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    tasks: Option<Array2<f64>>,
}

impl MomentumState {
    pub fn zeros_like(model: &MultiTaskModel) -> Self {
        let layers = model.net().layers();
        Self {
            weights: layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            tasks: model.tasks().map(|t| Array2::zeros(t.values().raw_dim())),
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        if let Some(t) = &self.tasks {
            out.extend(t.iter().copied());
        }
        out
    }
}

fn heavy_ball<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
) {
    Zip::from(param).and(velocity).and(grad).for_each(|p, v, &g| {
        *v = momentum * *v + g;
        *p -= lr * *v;
    });
}

/// `v ← μ v + g; θ ← θ − lr v` for shared and task parameters.
pub fn sgd_step(
    model: &mut MultiTaskModel,
    grads: &ModelGradients,
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let layers = model.net().layers();
    check_dim("gradient layers", layers.len(), grads.net.layers.len())?;
    check_dim("velocity layers", layers.len(), state.weights.len())?;
    for (l, g) in layers.iter().zip(&grads.net.layers) {
        check_dim("gradient weight entries", l.weight.len(), g.weight.len())?;
        check_dim("gradient bias entries", l.bias.len(), g.bias.len())?;
    }
    match (model.tasks(), &grads.tasks, &state.tasks) {
        (Some(t), Some(g), Some(v)) => {
            check_dim("task gradient entries", t.values().len(), g.len())?;
            check_dim("task velocity entries", t.values().len(), v.len())?;
        }
        (None, None, None) => {}
        _ => {
            return Err(crate::Error::InvalidArgument(
                "task gradients do not match the model".into(),
            ))
        }
    }

    let net_layers = model.net_mut().layers_mut();
    for (k, layer) in net_layers.iter_mut().enumerate() {
        let g = &grads.net.layers[k];
        heavy_ball(&mut layer.weight, &mut state.weights[k], &g.weight, lr, momentum);
        heavy_ball(&mut layer.bias, &mut state.biases[k], &g.bias, lr, momentum);
    }
    if let (Some(t), Some(g), Some(v)) = (model.tasks_mut(), &grads.tasks, state.tasks.as_mut()) {
        heavy_ball(t.values_mut(), v, g, lr, momentum);
    }
    Ok(())
}
