//! Config-driven glue: load stations, split, scale, window, train, restore.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    assemble, load_station_csv, make_windows, split_by_fraction, split_by_years, DataError, MinMaxScaler, RawSeries,
    Splits, WindowedDataset,
};
use crate::model::{ModelError, Network};
use crate::train::{self, Checkpoint, CheckpointMeta, CheckpointStore, EpochLog, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Mismatch(String),
}

/// Windowed splits plus the scaler fitted on the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub scaler: MinMaxScaler,
    pub train: WindowedDataset,
    pub val: Option<WindowedDataset>,
    pub test: WindowedDataset,
}

/// Reads `<data.dir>/<station>.csv` for every station and aligns them.
pub fn load_raw(config: &RunConfig) -> Result<RawSeries, PipelineError> {
    let series = config
        .station_paths()
        .iter()
        .map(|p| load_station_csv(p, config.data.max_gap_hours))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(&series, &config.data.node_order)?)
}

pub fn split(config: &RunConfig, raw: &RawSeries) -> Result<Splits, PipelineError> {
    let d = &config.data;
    // validation and test windows may reach back into the preceding split
    let context = config.model.window + config.model.horizon - 1;
    Ok(match d.split.as_str() {
        "fraction" => split_by_fraction(raw, d.train_fraction, d.val_fraction, context)?,
        _ => split_by_years(raw, &d.train_years, &d.val_years, &d.test_years, context)?,
    })
}

/// Splits and windows `raw`. With `scaler` given (evaluating a checkpoint)
/// it is reused instead of refitting on the training split.
pub fn prepare(config: &RunConfig, raw: &RawSeries, scaler: Option<&MinMaxScaler>) -> Result<Prepared, PipelineError> {
    let model = config.model_config()?;
    let splits = split(config, raw)?;
    let scaler = match scaler {
        Some(s) if s.num_nodes != raw.num_nodes() => {
            return Err(PipelineError::Mismatch(format!(
                "checkpoint scaler covers {} nodes, data has {}",
                s.num_nodes,
                raw.num_nodes()
            )))
        }
        Some(s) => s.clone(),
        None => MinMaxScaler::fit(&splits.train.owned()),
    };
    let window = |part| make_windows(part, &scaler, model.window, model.horizon, &model.target_nodes);
    let train = window(&splits.train)?;
    let val = splits.val.as_ref().map(window).transpose()?;
    let test = window(&splits.test)?;
    Ok(Prepared {
        splits,
        scaler,
        train,
        val,
        test,
    })
}

pub fn checkpoint_meta(config: &RunConfig, scaler: &MinMaxScaler) -> Result<CheckpointMeta, PipelineError> {
    Ok(CheckpointMeta {
        model: config.model_config()?,
        scaler: Some(scaler.clone()),
        seed: config.seed,
        epoch: 0,
        val_loss: 0.0,
        node_order: config.data.node_order.clone(),
        run_config: config.to_flat(),
    })
}

/// Fresh network seeded from `config.seed`, trained on `prepared`.
pub fn train_from_config(
    config: &RunConfig,
    prepared: &Prepared,
    store: &mut dyn CheckpointStore,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Network, TrainOutcome), PipelineError> {
    let mut net = Network::new(config.model_config()?, config.seed)?;
    let meta = checkpoint_meta(config, &prepared.scaler)?;
    let outcome = train::train(
        &mut net,
        &prepared.train,
        prepared.val.as_ref(),
        &config.train_config(),
        &meta,
        store,
        on_epoch,
    )?;
    Ok((net, outcome))
}

/// Rebuilds the network stored in a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<Network, PipelineError> {
    let mut net = Network::new(ckpt.meta.model.clone(), ckpt.meta.seed)?;
    net.load_params(&ckpt.params)?;
    Ok(net)
}

/// The run config recorded in a checkpoint, with `overrides` applied on top.
pub fn checkpoint_config(ckpt: &Checkpoint, file: Option<&str>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut merged: Vec<String> = ckpt.meta.run_config.iter().map(|(k, v)| format!("{k}={v}")).collect();
    if let Some(text) = file {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError {
            problems: vec![format!("config file: {e}")],
        })?;
        let flat: BTreeMap<String, toml::Value> = crate::config::flatten(&table);
        merged.extend(flat.iter().map(|(k, v)| format!("{k}={v}")));
    }
    merged.extend(overrides.iter().cloned());
    RunConfig::load(None, &merged)
}
