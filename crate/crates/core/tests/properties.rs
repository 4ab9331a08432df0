use lcnn::data::{MultiTaskDataset, Scaler};
use lcnn::holdout::HoldoutPrior;
use lcnn::lme::lme_fit;
use lcnn::model::{ModelKind, ModelSpec, MultiTaskModel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(kind: ModelKind, d_beta: usize, num_tasks: usize, seed: u64) -> MultiTaskModel {
    let mut m = ModelSpec {
        kind,
        x_dim: 1,
        num_tasks,
        d_beta,
        hidden_dim: 5,
        num_residual_blocks: 2,
    }
    .build(seed)
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if let Some(t) = m.tasks_mut() {
        t.values_mut().mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    }
    for l in m.net_mut().layers_mut() {
        l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // one task parameter: every task is a multiple of the same function
    #[test]
    fn single_parameter_last_layer_tasks_are_proportional(seed in 0u64..10_000, xs in prop::collection::vec(-2.0f64..2.0, 2..8)) {
        let m = random_model(ModelKind::LastLayer, 1, 3, seed);
        let betas: Vec<f64> = (0..3).map(|j| m.tasks().unwrap().get(j).unwrap()[0]).collect();
        prop_assume!(betas[0].abs() > 1e-3);
        for &x in &xs {
            let base = m.predict(&[x], 0).unwrap();
            for j in 1..3 {
                let p = m.predict(&[x], j).unwrap();
                prop_assert!((p - base * betas[j] / betas[0]).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn permuting_task_parameters_permutes_predictions(seed in 0u64..10_000, kind_ix in 0usize..2, x in -2.0f64..2.0) {
        let kind = [ModelKind::LearnedContext, ModelKind::LastLayer][kind_ix];
        let m = random_model(kind, 2, 4, seed);
        let perm = [2usize, 0, 3, 1];
        let mut p = m.clone();
        let table = m.tasks().unwrap().values().clone();
        for (j, &src) in perm.iter().enumerate() {
            p.tasks_mut().unwrap().set(j, &table.row(src).to_vec()).unwrap();
        }
        for (j, &src) in perm.iter().enumerate() {
            prop_assert_eq!(p.predict(&[x], j).unwrap(), m.predict(&[x], src).unwrap());
        }
    }

    #[test]
    fn scaler_round_trip(values in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30)) {
        let n = values.len();
        let x = Array2::from_shape_fn((n, 1), |(i, _)| values[i].0);
        let y = Array1::from_iter(values.iter().map(|v| v.1));
        let data = MultiTaskDataset::new(x, y, (0..n).map(|i| i % 2).collect(), 2).unwrap();
        let s = Scaler::fit(&data).unwrap();
        let back = s.invert(&s.apply(&data).unwrap()).unwrap();
        for (a, b) in back.y().iter().zip(data.y()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        for (a, b) in back.x().iter().zip(data.x()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn mixed_effect_fit_shifts_with_the_response(seed in 0u64..1000, shift in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let task: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen_range(0.0..1.0));
        let offsets = [0.7, -0.4, 0.1, -0.6];
        let y = Array1::from_shape_fn(n, |i| 1.5 * x[[i, 0]] + offsets[task[i]] + rng.gen_range(-0.2..0.2));
        let a = lme_fit(&MultiTaskDataset::new(x.clone(), y.clone(), task.clone(), 4).unwrap()).unwrap();
        let b = lme_fit(&MultiTaskDataset::new(x, y.mapv(|v| v + shift), task, 4).unwrap()).unwrap();
        prop_assert!((b.intercept - a.intercept - shift).abs() <= 1e-6);
        prop_assert!((b.slope[0] - a.slope[0]).abs() <= 1e-6);
        prop_assert!((b.sigma_beta2 - a.sigma_beta2).abs() <= 1e-6 * (1.0 + a.sigma_beta2));
    }

    #[test]
    fn prior_penalty_is_a_positive_quadratic(a in 0.1f64..3.0, c in 0.1f64..3.0, r in -0.9f64..0.9, b0 in -2.0f64..2.0, b1 in -2.0f64..2.0, t in -3.0f64..3.0) {
        let off = r * (a * c).sqrt();
        let prior = HoldoutPrior::new(ndarray::array![[a, off], [off, c]], 0.1).unwrap();
        prop_assert_eq!(prior.penalty(&[0.0, 0.0]), 0.0);
        let p = prior.penalty(&[b0, b1]);
        prop_assert!(p >= 0.0);
        let scaled = prior.penalty(&[t * b0, t * b1]);
        prop_assert!((scaled - t * t * p).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }
}
