//! Training loop, evaluation and the persistence baseline.

pub mod checkpoint;
pub mod metrics;
pub mod optimizer;
pub mod scheduler;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointMeta, CheckpointStore, FileStore, MemoryStore};
pub use metrics::{Metrics, NodeMetrics};
pub use optimizer::{Adam, AdamConfig};
pub use scheduler::{PlateauConfig, PlateauScheduler, SchedulerEvent};

use crate::autodiff::Tape;
use crate::data::{batch_indices, WindowedDataset, WIND_SPEED};
use crate::error::TensorError;
use crate::model::{ModelError, Network};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged {
        epoch: usize,
        /// Best checkpoint saved before divergence, if any.
        best: Option<Box<Checkpoint>>,
    },
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("learning rate cut requested but no best checkpoint was saved")]
    MissingCheckpoint,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("training split has no samples")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Errors caused by parameters or losses blowing up to inf/NaN.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss
                | TrainError::NonFiniteGradient(_)
                | TrainError::Tensor(TensorError::NonFinite(_))
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_)))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    /// Seeds the batch shuffling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub event: String,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,lr,event";

    pub fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.lr, self.event
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// One Adam step on a single batch; returns the batch MSE before the update.
pub fn train_step(net: &mut Network, adam: &mut Adam, x: &Tensor, y: &Tensor) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let bound = net.bind(&tape, true)?;
    let pred = net.forward(&bound, tape.constant(x.clone()))?;
    let loss = pred.mse_loss(y)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|v| grads.take(*v)).collect();
    adam.step(net.params_mut(), &grads)?;
    Ok(value)
}

fn check_dataset(net: &Network, data: &WindowedDataset) -> Result<(), TrainError> {
    let c = net.config();
    let problems = [
        (c.window != data.window).then(|| format!("window {} vs {}", c.window, data.window)),
        (c.horizon != data.horizon).then(|| format!("horizon {} vs {}", c.horizon, data.horizon)),
        (c.num_nodes != data.num_nodes()).then(|| format!("{} nodes vs {}", c.num_nodes, data.num_nodes())),
        (c.target_nodes != data.target_nodes)
            .then(|| format!("target nodes {:?} vs {:?}", c.target_nodes, data.target_nodes)),
    ];
    let problems: Vec<String> = problems.into_iter().flatten().collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Mismatch(format!("model and data disagree: {}", problems.join(", "))))
    }
}

/// Network output for every sample in chronological order, normalized
/// units, row-major `[S, N_target]`.
pub fn predict_normalized(net: &Network, data: &WindowedDataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    check_dataset(net, data)?;
    let mut out = Vec::with_capacity(data.len() * data.target_nodes.len());
    for idx in batch_indices(data.len(), batch_size, None) {
        let (x, _) = data.batch(&idx);
        out.extend_from_slice(net.predict(&x)?.data());
    }
    Ok(out)
}

/// Mean squared error on normalized targets over the whole split.
pub fn normalized_mse(net: &Network, data: &WindowedDataset, batch_size: usize) -> Result<f64, TrainError> {
    let pred = predict_normalized(net, data, batch_size)?;
    let target: Vec<f64> = (0..data.len()).flat_map(|s| data.normalized_targets(s)).collect();
    let sum: f64 = pred.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn target_names(data: &WindowedDataset) -> Vec<String> {
    data.target_nodes.iter().map(|&j| data.node_order()[j].clone()).collect()
}

/// Predictions in m/s, row-major `[S, N_target]`.
pub fn predict_physical(net: &Network, data: &WindowedDataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let k = data.target_nodes.len();
    let pred = predict_normalized(net, data, batch_size)?;
    Ok(pred
        .iter()
        .enumerate()
        .map(|(i, &v)| data.scaler().invert(v, WIND_SPEED, data.target_nodes[i % k]))
        .collect())
}

/// Test metrics in physical units, plus the de-normalized predictions.
pub fn evaluate(net: &Network, data: &WindowedDataset) -> Result<(Metrics, Vec<f64>), TrainError> {
    let pred = predict_physical(net, data, 64)?;
    let actual: Vec<f64> = (0..data.len()).flat_map(|s| data.targets(s)).collect();
    let metrics = Metrics::compute(&pred, &actual, &target_names(data), data.horizon)?;
    Ok((metrics, pred))
}

/// Forecasts every target with its last observed value.
pub fn persistence_baseline(data: &WindowedDataset) -> Result<Metrics, TrainError> {
    let pred: Vec<f64> = (0..data.len()).flat_map(|s| data.last_observed(s)).collect();
    let actual: Vec<f64> = (0..data.len()).flat_map(|s| data.targets(s)).collect();
    Metrics::compute(&pred, &actual, &target_names(data), data.horizon)
}

fn snapshot(net: &Network, meta: &CheckpointMeta, epoch: usize, val_loss: f64) -> Checkpoint {
    let mut meta = meta.clone();
    meta.model = net.config().clone();
    meta.epoch = epoch;
    meta.val_loss = val_loss;
    Checkpoint {
        params: net.params().iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        meta,
    }
}

/// Runs the full recipe: shuffled mini-batches, per-epoch validation MSE,
/// plateau scheduling with best-checkpoint reload. On return `net` holds the
/// best checkpoint's parameters. Without a validation split the scheduler
/// tracks the epoch's mean training loss.
pub fn train(
    net: &mut Network,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    config: &TrainConfig,
    meta: &CheckpointMeta,
    store: &mut dyn CheckpointStore,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    check_dataset(net, train)?;
    if let Some(v) = val {
        check_dataset(net, v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.adam, net.params());
    let mut scheduler = PlateauScheduler::new(config.adam.lr, config.plateau);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = scheduler.lr();
        adam.lr = lr;
        let mut total = 0.0;
        for idx in batch_indices(train.len(), config.batch_size, Some(&mut rng)) {
            let (x, y) = train.batch(&idx);
            let loss = match train_step(net, &mut adam, &x, &y) {
                Err(e) if e.is_divergence() => f64::NAN,
                other => other?,
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    best: store.load_best()?.map(Box::new),
                });
            }
            total += loss * idx.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = match val.map(|v| normalized_mse(net, v, config.batch_size.max(64))) {
            Some(Err(e)) if e.is_divergence() => f64::NAN,
            Some(other) => other?,
            None => train_loss,
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                best: store.load_best()?.map(Box::new),
            });
        }
        let event = scheduler.step(val_loss, || snapshot(net, meta, epoch, val_loss), store)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            event: event.label().to_owned(),
        };
        if let SchedulerEvent::Cut { best, .. } = &event {
            net.load_params(&best.params)?;
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr} {}",
            entry.event
        );
        on_epoch(&entry);
        log.push(entry);
    }
    let best = store.load_best()?.ok_or(TrainError::MissingCheckpoint)?;
    net.load_params(&best.params)?;
    Ok(TrainOutcome {
        best,
        log,
        steps: adam.steps(),
    })
}
