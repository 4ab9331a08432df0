//! Adaptive-k LIPO with alternating local quadratic refinement.
//!
//! Work happens in box-normalized coordinates `[0, 1]^d` (log dimensions in
//! log space). Global steps sample uniform candidates and keep the one with
//! the smallest Lipschitz lower bound `max_i f_i − k̂‖x − x_i‖`, provided that
//! bound does not exceed the incumbent; local steps minimize a quadratic
//! surrogate fitted to the trials nearest the incumbent inside a trust region.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub scale: Scale,
    #[serde(default)]
    pub integer: bool,
}

impl Dimension {
    pub fn linear(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            scale: Scale::Linear,
            integer: false,
        }
    }

    pub fn log10(name: &str, min: f64, max: f64) -> Self {
        Self {
            scale: Scale::Log10,
            ..Self::linear(name, min, max)
        }
    }

    pub fn integer(name: &str, min: f64, max: f64) -> Self {
        Self {
            integer: true,
            ..Self::linear(name, min, max)
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.min == self.max
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("dimension `{}`: {msg}", self.name)));
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return bad("bounds must be finite with min <= max");
        }
        if self.scale == Scale::Log10 && self.min <= 0.0 {
            return bad("log-scaled bounds must be positive");
        }
        if self.integer && (self.min.fract() != 0.0 || self.max.fract() != 0.0) {
            return bad("integer dimension needs integer bounds");
        }
        Ok(())
    }

    fn transform(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => v,
            Scale::Log10 => v.log10(),
        }
    }

    fn to_unit(&self, v: f64) -> f64 {
        let (lo, hi) = (self.transform(self.min), self.transform(self.max));
        ((self.transform(v) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    fn value_at_unit(&self, u: f64) -> f64 {
        let (lo, hi) = (self.transform(self.min), self.transform(self.max));
        let t = lo + u.clamp(0.0, 1.0) * (hi - lo);
        let v = match self.scale {
            Scale::Linear => t,
            Scale::Log10 => 10f64.powf(t),
        };
        let v = v.clamp(self.min, self.max);
        if self.integer {
            v.round().clamp(self.min, self.max)
        } else {
            v
        }
    }
}

/// Named search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBox {
    pub dims: Vec<Dimension>,
}

impl HyperBox {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("search box has no dimensions".into()));
        }
        for d in &dims {
            d.validate()?;
        }
        Ok(Self { dims })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.dims.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && self
                .dims
                .iter()
                .zip(point)
                .all(|(d, &v)| v >= d.min && v <= d.max && (!d.integer || v.fract() == 0.0))
    }

    fn active(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| !self.dims[k].is_fixed()).collect()
    }

    fn point_from_unit(&self, active: &[usize], u: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = self.dims.iter().map(|d| d.min).collect();
        for (&k, &v) in active.iter().zip(u) {
            p[k] = self.dims[k].value_at_unit(v);
        }
        p
    }

    fn unit_from_point(&self, active: &[usize], p: &[f64]) -> Vec<f64> {
        active.iter().map(|&k| self.dims[k].to_unit(p[k])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Initial,
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub point: Vec<f64>,
    /// Raw objective value; not finite when `diverged`.
    pub value: f64,
    pub diverged: bool,
    pub step: StepKind,
    /// Lipschitz constant estimate after this trial.
    pub k_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipoResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipoOptions {
    /// Grid ratio for the Lipschitz estimate, `k̂ = (1 + α)^i`; divided by the dimension.
    pub alpha: f64,
    pub sampling_trials: usize,
    /// Uniform points drawn before the alternating phase (at least 1).
    pub initial_points: usize,
    pub initial_trust_radius: f64,
}

impl Default for LipoOptions {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            sampling_trials: 5000,
            initial_points: 2,
            initial_trust_radius: 0.2,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Smallest `(1 + α)^i` not below the largest observed slope.
fn lipschitz_estimate(us: &[Vec<f64>], ys: &[f64], alpha: f64) -> f64 {
    let mut k_inf: f64 = 0.0;
    for i in 0..us.len() {
        for j in 0..i {
            let d = distance(&us[i], &us[j]);
            if d > 1e-12 {
                k_inf = k_inf.max((ys[i] - ys[j]).abs() / d);
            }
        }
    }
    if k_inf == 0.0 {
        return 0.0;
    }
    (1.0 + alpha).powi((k_inf.ln() / (1.0 + alpha).ln()).ceil() as i32)
}

/// Objective values with diverged trials replaced by ten times the worst finite value.
fn penalized(values: &[f64]) -> Vec<f64> {
    let worst = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let penalty = if worst.is_finite() {
        if worst > 0.0 {
            worst * 10.0
        } else {
            worst + 9.0 * worst.abs().max(1.0)
        }
    } else {
        1.0
    };
    values
        .iter()
        .map(|&v| if v.is_finite() { v } else { penalty })
        .collect()
}

fn uniform_point<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen::<f64>()).collect()
}

/// Quadratic surrogate centred at `center`: value, gradient and Hessian.
struct Quadratic {
    c: f64,
    g: DVector<f64>,
    h: DMatrix<f64>,
}

impl Quadratic {
    fn eval(&self, s: &DVector<f64>) -> f64 {
        self.c + self.g.dot(s) + 0.5 * s.dot(&(&self.h * s))
    }
}

/// Least-squares quadratic through `(s_i, y_i)` (offsets from the centre).
/// Uses the full Hessian when enough points exist, else a diagonal one.
fn fit_quadratic(offsets: &[DVector<f64>], ys: &[f64], d: usize) -> Option<Quadratic> {
    let full = 1 + d + d * (d + 1) / 2;
    let diag = 1 + 2 * d;
    let use_full = offsets.len() >= full;
    if !use_full && offsets.len() < diag {
        return None;
    }
    let p = if use_full { full } else { diag };
    let design = DMatrix::from_fn(offsets.len(), p, |i, c| {
        let s = &offsets[i];
        if c == 0 {
            return 1.0;
        }
        if c <= d {
            return s[c - 1];
        }
        let mut idx = d + 1;
        for a in 0..d {
            let b_range = if use_full { a..d } else { a..a + 1 };
            for b in b_range {
                if idx == c {
                    return if a == b { 0.5 * s[a] * s[a] } else { s[a] * s[b] };
                }
                idx += 1;
            }
        }
        unreachable!()
    });
    let coef = design
        .svd(true, true)
        .solve(&DVector::from_column_slice(ys), 1e-12)
        .ok()?;
    let mut h = DMatrix::zeros(d, d);
    let mut idx = d + 1;
    for a in 0..d {
        let b_range = if use_full { a..d } else { a..a + 1 };
        for b in b_range {
            h[(a, b)] = coef[idx];
            h[(b, a)] = coef[idx];
            idx += 1;
        }
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return None;
    }
    Some(Quadratic {
        c: coef[0],
        g: coef.rows(1, d).into_owned(),
        h,
    })
}

/// Minimizes `f` over `bounds` with `iterations` evaluations.
///
/// `f` may return a non-finite value to flag a failed evaluation; such trials
/// are recorded as diverged and treated as ten times the worst finite value.
pub fn lipo_minimize<F>(mut f: F, bounds: &HyperBox, iterations: usize, seed: u64) -> Result<LipoResult>
where
    F: FnMut(&[f64]) -> f64,
{
    lipo_minimize_with(&mut f, bounds, iterations, seed, LipoOptions::default())
}

pub fn lipo_minimize_with<F>(
    f: &mut F,
    bounds: &HyperBox,
    iterations: usize,
    seed: u64,
    opts: LipoOptions,
) -> Result<LipoResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if iterations == 0 {
        return Err(Error::InvalidArgument("LIPO needs at least one iteration".into()));
    }
    let active = bounds.active();
    let d = active.len();
    let alpha = opts.alpha / d.max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    let mut trials = Vec::new();
    let mut radius = opts.initial_trust_radius;
    let mut last_local_best: Option<f64> = None;

    let budget = if d == 0 { 1 } else { iterations };
    for t in 0..budget {
        let ys = penalized(&raw);
        let best = (0..ys.len()).min_by(|&a, &b| ys[a].total_cmp(&ys[b]));
        let initial = t < opts.initial_points.max(1);
        let (step, u) = if d == 0 {
            (StepKind::Initial, vec![])
        } else if t == 0 {
            (StepKind::Initial, vec![0.5; d])
        } else if initial {
            (StepKind::Initial, uniform_point(&mut rng, d))
        } else if (t - opts.initial_points.max(1)) % 2 == 1 {
            let b = best.expect("trials exist after the initial phase");
            // shrink or grow the trust region based on the last local step
            if let Some(prev) = last_local_best {
                radius = if ys[b] < prev {
                    (radius * 2.0).min(0.5)
                } else {
                    (radius * 0.5).max(1e-6)
                };
            }
            last_local_best = Some(ys[b]);
            (StepKind::Local, local_step(&us, &ys, b, radius, d, &mut rng))
        } else {
            let k = lipschitz_estimate(&us, &ys, alpha);
            (
                StepKind::Global,
                global_step(&us, &ys, best, k, d, opts.sampling_trials, &mut rng),
            )
        };
        let point = bounds.point_from_unit(&active, &u);
        // snap to the realized point so integer rounding is reflected
        let u = bounds.unit_from_point(&active, &point);
        let value = f(&point);
        let diverged = !value.is_finite();
        us.push(u);
        raw.push(value);
        let k_hat = lipschitz_estimate(&us, &penalized(&raw), alpha);
        trials.push(TrialRecord {
            trial: t,
            point,
            value,
            diverged,
            step,
            k_hat,
        });
    }

    let best = trials
        .iter()
        .filter(|r| !r.diverged)
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or(Error::AllTrialsDiverged(trials.len()))?;
    Ok(LipoResult {
        best_point: best.point.clone(),
        best_value: best.value,
        best_trial: best.trial,
        trials,
    })
}

fn global_step<R: Rng>(
    us: &[Vec<f64>],
    ys: &[f64],
    best: Option<usize>,
    k: f64,
    d: usize,
    sampling_trials: usize,
    rng: &mut R,
) -> Vec<f64> {
    let Some(best) = best else {
        return uniform_point(rng, d);
    };
    if k == 0.0 {
        return uniform_point(rng, d);
    }
    let incumbent = ys[best];
    let mut chosen: Option<(f64, Vec<f64>)> = None;
    for _ in 0..sampling_trials {
        let x = uniform_point(rng, d);
        let bound = us
            .iter()
            .zip(ys)
            .map(|(u, &y)| y - k * distance(&x, u))
            .fold(f64::NEG_INFINITY, f64::max);
        if bound <= incumbent && chosen.as_ref().is_none_or(|(b, _)| bound < *b) {
            chosen = Some((bound, x));
        }
    }
    chosen.map_or_else(|| uniform_point(rng, d), |(_, x)| x)
}

fn local_step<R: Rng>(us: &[Vec<f64>], ys: &[f64], best: usize, radius: f64, d: usize, rng: &mut R) -> Vec<f64> {
    let center = &us[best];
    let clamp_box = |s: &DVector<f64>| -> Vec<f64> { (0..d).map(|k| (center[k] + s[k]).clamp(0.0, 1.0)).collect() };
    let is_new = |x: &[f64]| us.iter().all(|u| distance(u, x) > 1e-9);

    // surrogate data: nearest trials, at least enough for a diagonal fit,
    // otherwise only those inside twice the trust radius
    let mut order: Vec<usize> = (0..us.len()).collect();
    order.sort_by(|&a, &b| distance(&us[a], center).total_cmp(&distance(&us[b], center)));
    let full = 1 + d + d * (d + 1) / 2;
    let minimal = 1 + 2 * d;
    let inside = order
        .iter()
        .take_while(|&&i| distance(&us[i], center) <= 2.0 * radius)
        .count();
    order.truncate(inside.clamp(minimal, (2 * full).max(minimal)));
    let offsets: Vec<DVector<f64>> = order
        .iter()
        .map(|&i| DVector::from_fn(d, |k, _| us[i][k] - center[k]))
        .collect();
    let vals: Vec<f64> = order.iter().map(|&i| ys[i]).collect();

    if let Some(q) = fit_quadratic(&offsets, &vals, d) {
        let mut candidates: Vec<DVector<f64>> = Vec::new();
        if let Some(chol) = q.h.clone().cholesky() {
            let mut s = -chol.solve(&q.g);
            let norm = s.norm();
            if norm > radius {
                s *= radius / norm;
            }
            candidates.push(s);
        }
        for _ in 0..2000 {
            candidates.push(DVector::from_fn(d, |_, _| rng.gen_range(-radius..=radius)));
        }
        let best_candidate = candidates
            .into_iter()
            .map(|s| {
                let x = clamp_box(&s);
                let s = DVector::from_fn(d, |k, _| x[k] - center[k]);
                (q.eval(&s), x)
            })
            .filter(|(_, x)| is_new(x))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, x)) = best_candidate {
            return x;
        }
    }
    // not enough points for a surrogate: random perturbation of the incumbent
    for _ in 0..100 {
        let s = DVector::from_fn(d, |_, _| rng.gen_range(-radius..=radius));
        let x = clamp_box(&s);
        if is_new(&x) {
            return x;
        }
    }
    uniform_point(rng, d)
}
