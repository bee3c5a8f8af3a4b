use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointStore};
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.7,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerEvent {
    Improved,
    Plateau { epochs_since_improvement: usize },
    /// The learning rate was cut and parameters must be restored from `best`.
    Cut { lr: f64, best: Box<Checkpoint> },
}

impl SchedulerEvent {
    pub fn label(&self) -> &'static str {
        match self {
            SchedulerEvent::Improved => "improved",
            SchedulerEvent::Plateau { .. } => "plateau",
            SchedulerEvent::Cut { .. } => "cut+reload",
        }
    }
}

/// Cuts the learning rate by `factor` after `patience` consecutive epochs
/// without strict improvement, reloading the best checkpoint each time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    lr: f64,
    cuts: usize,
    best: f64,
    since: usize,
}

impl PlateauScheduler {
    pub fn new(base_lr: f64, config: PlateauConfig) -> Self {
        Self {
            config,
            lr: base_lr,
            cuts: 0,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// `base_lr · factor^cuts`, multiplied out one cut at a time.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn cuts(&self) -> usize {
        self.cuts
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss. `snapshot` is only called on
    /// improvement, to build the checkpoint that gets stored.
    pub fn step(
        &mut self,
        val_loss: f64,
        snapshot: impl FnOnce() -> Checkpoint,
        store: &mut dyn CheckpointStore,
    ) -> Result<SchedulerEvent, TrainError> {
        if val_loss < self.best {
            self.best = val_loss;
            self.since = 0;
            store.save_best(&snapshot())?;
            return Ok(SchedulerEvent::Improved);
        }
        self.since += 1;
        if self.since < self.config.patience {
            return Ok(SchedulerEvent::Plateau {
                epochs_since_improvement: self.since,
            });
        }
        let best = store.load_best()?.ok_or(TrainError::MissingCheckpoint)?;
        self.cuts += 1;
        self.lr *= self.config.factor;
        self.since = 0;
        Ok(SchedulerEvent::Cut {
            lr: self.lr(),
            best: Box::new(best),
        })
    }
}
