use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain SGD settings and the plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    /// Divisor applied to the learning rate on a plateau.
    #[serde(default = "defaults::decay")]
    pub decay: f64,
    /// Epochs without validation improvement before decaying.
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::lr_min")]
    pub lr_min: f64,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
}

mod defaults {
    pub fn lr0() -> f64 {
        0.05
    }
    pub fn batch() -> usize {
        32
    }
    pub fn decay() -> f64 {
        3.0
    }
    pub fn patience() -> usize {
        5
    }
    pub fn lr_min() -> f64 {
        1e-4
    }
    pub fn max_epochs() -> usize {
        200
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: defaults::lr0(),
            batch: defaults::batch(),
            decay: defaults::decay(),
            patience: defaults::patience(),
            lr_min: defaults::lr_min(),
            max_epochs: defaults::max_epochs(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr0) {
            return Err(Error::config("optim.lr0", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("optim.batch", "must be positive"));
        }
        if !(self.decay.is_finite() && self.decay > 1.0) {
            return Err(Error::config("optim.decay", "must be greater than 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("optim.patience", "must be positive"));
        }
        if !positive(self.lr_min) {
            return Err(Error::config("optim.lr_min", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("optim.max_epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one schedule update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub lr: f64,
    pub stop: bool,
    pub decayed: bool,
}

/// Reduce-on-plateau schedule, stepped once per epoch.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    epoch: usize,
    config: OptimConfig,
}

impl PlateauSchedule {
    pub fn new(config: OptimConfig) -> Self {
        PlateauSchedule {
            lr: config.lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
            epoch: 0,
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Records the validation loss of the epoch that just finished.
    pub fn step(&mut self, val_loss: f64) -> ScheduleStep {
        self.epoch += 1;
        let mut decayed = false;
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr /= self.config.decay;
                self.bad_epochs = 0;
                decayed = true;
            }
        }
        ScheduleStep {
            lr: self.lr,
            stop: self.lr < self.config.lr_min || self.epoch >= self.config.max_epochs,
            decayed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_loss_never_decays() {
        let mut s = PlateauSchedule::new(OptimConfig::default());
        for e in 1..=200 {
            let step = s.step(1.0 / e as f64);
            assert_eq!(step.lr, 0.05);
            assert_eq!(step.stop, e == 200);
        }
    }

    #[test]
    fn constant_loss_decays_every_patience_window() {
        // simulated by hand: best set at epoch 1, then 5 bad epochs per decay
        let mut s = PlateauSchedule::new(OptimConfig::default());
        let mut decays = Vec::new();
        let mut lrs = vec![0.05];
        let stop_epoch = loop {
            let step = s.step(0.7);
            if step.decayed {
                decays.push(s.epoch());
                lrs.push(step.lr);
            }
            if step.stop {
                break s.epoch();
            }
        };
        assert_eq!(decays, vec![6, 11, 16, 21, 26, 31]);
        assert_eq!(stop_epoch, 31);
        let expected = [0.05, 0.05 / 3.0, 0.05 / 9.0];
        for (a, b) in lrs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(*lrs.last().unwrap() < 1e-4);
        assert!(lrs[lrs.len() - 2] >= 1e-4);
    }

    #[test]
    fn tiny_initial_lr_stops_at_once() {
        let mut s = PlateauSchedule::new(OptimConfig {
            lr0: 5e-5,
            ..OptimConfig::default()
        });
        assert!(s.step(1.0).stop);
    }
}
