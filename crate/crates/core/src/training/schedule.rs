//! Two-stage learning-rate schedule: linear warm-up, then halving whenever the
//! recent epoch losses stop trending downward.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::TrainConfig;

/// p-value of the likelihood-ratio test of a linear trend against a constant
/// in `window` (losses indexed by epoch).
///
/// Returns 1 for a constant window and 0 for an exactly linear one.
pub fn convergence_test(window: &[f64]) -> f64 {
    let n = window.len();
    if n < 3 {
        return 0.0;
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let y_mean = window.iter().sum::<f64>() / nf;
    let (mut sty, mut stt, mut ss0) = (0.0, 0.0, 0.0);
    for (i, &y) in window.iter().enumerate() {
        let dt = i as f64 - t_mean;
        let dy = y - y_mean;
        sty += dt * dy;
        stt += dt * dt;
        ss0 += dy * dy;
    }
    let ss1 = (ss0 - sty * sty / stt).max(0.0);
    // relative guard: a perfect line leaves only rounding noise in ss1
    if ss0 == 0.0 {
        return 1.0;
    }
    if ss1 <= ss0 * 1e-14 {
        return 0.0;
    }
    let stat = nf * (ss0 / ss1).ln();
    // survival function of chi-square with one degree of freedom
    erfc((stat / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
    LossFloor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    /// Learning rate for the next epoch.
    pub lr: f64,
    /// The convergence test fired after this epoch.
    pub converged: bool,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone)]
pub struct ScheduleState {
    peak_lr: f64,
    lr_floor: f64,
    p_threshold: f64,
    min_loss: f64,
    max_epochs: usize,
    warmup_epochs: usize,
    window_size: usize,
    current_lr: f64,
    epoch: usize,
    window: VecDeque<f64>,
    since_change: usize,
    halvings: usize,
}

impl ScheduleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let warmup_epochs = (cfg.warmup_fraction * cfg.max_epochs as f64).round() as usize;
        let window_size = ((cfg.window_fraction * cfg.max_epochs as f64).round() as usize).max(3);
        Self {
            peak_lr: cfg.peak_lr,
            lr_floor: cfg.lr_floor,
            p_threshold: cfg.convergence_p_threshold,
            min_loss: cfg.min_loss,
            max_epochs: cfg.max_epochs,
            warmup_epochs,
            window_size,
            current_lr: if warmup_epochs == 0 { cfg.peak_lr } else { cfg.lr_floor },
            epoch: 0,
            window: VecDeque::with_capacity(window_size),
            since_change: 0,
            halvings: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.current_lr
    }

    /// Index of the epoch about to be trained.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        if self.epoch < self.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Plateau
        }
    }

    pub fn warmup_epochs(&self) -> usize {
        self.warmup_epochs
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    pub fn is_exhausted(&self) -> bool {
        self.epoch >= self.max_epochs
    }

    /// Records the mean loss of the epoch just trained and advances.
    pub fn step(&mut self, epoch_loss: f64) -> ScheduleStep {
        let trained = self.epoch;
        self.epoch += 1;
        let mut converged = false;
        let mut stop = None;

        if trained >= self.warmup_epochs {
            if self.window.len() == self.window_size {
                self.window.pop_front();
            }
            self.window.push_back(epoch_loss);
            self.since_change += 1;
            if self.since_change >= self.window_size {
                let w: Vec<f64> = self.window.iter().copied().collect();
                if convergence_test(&w) > self.p_threshold {
                    converged = true;
                    self.current_lr /= 2.0;
                    self.halvings += 1;
                    self.since_change = 0;
                    self.window.clear();
                    if self.current_lr < self.lr_floor {
                        stop = Some(StopReason::LrFloor);
                    }
                }
            }
        }
        if self.epoch < self.warmup_epochs {
            self.current_lr =
                self.lr_floor + (self.peak_lr - self.lr_floor) * self.epoch as f64 / self.warmup_epochs as f64;
        } else if self.epoch == self.warmup_epochs {
            self.current_lr = self.peak_lr;
        }
        if stop.is_none() && epoch_loss <= self.min_loss {
            stop = Some(StopReason::LossFloor);
        }
        if stop.is_none() && self.epoch >= self.max_epochs {
            stop = Some(StopReason::MaxEpochs);
        }
        ScheduleStep {
            lr: self.current_lr,
            converged,
            stop,
        }
    }
}
