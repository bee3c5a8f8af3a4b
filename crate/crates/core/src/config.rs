//! Run configuration: a TOML file viewed as flat dotted keys, with
//! `key=value` overrides applied on top of the defaults.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{default_branches, AdjacencyKind, BranchSpec, ModelConfig, Variant};
use crate::train::{AdamConfig, PlateauConfig, TrainConfig};

/// Horizons trained in the reference protocol; others are legal but warned.
pub const STANDARD_HORIZONS: [usize; 4] = [6, 12, 18, 24];

#[derive(Debug, Error)]
#[error("invalid configuration:\n  - {}", .problems.join("\n  - "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self {
            problems: vec![msg.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding one `<station>.csv` per entry of `node_order`.
    pub dir: String,
    pub node_order: Vec<String>,
    pub target_nodes: Vec<String>,
    pub max_gap_hours: usize,
    /// `years` or `fraction`.
    pub split: String,
    pub train_years: Vec<i32>,
    pub val_years: Vec<i32>,
    pub test_years: Vec<i32>,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub horizon: usize,
    pub window: usize,
    pub num_blocks: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub end_channels: Vec<usize>,
    pub embedding_width: usize,
    pub adjacency: String,
    /// `K:d` pairs used in every block, e.g. `2:1,3:2,6:3`. Empty picks the
    /// variant's default.
    pub branches: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub factor: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(Variant::MultiScale, 6);
        let adam = AdamConfig::default();
        let plateau = PlateauConfig::default();
        Self {
            seed: 0,
            output_dir: "runs".into(),
            data: DataSection {
                dir: "data".into(),
                node_order: ["aalborg", "aarhus", "esbjerg", "odense", "roskilde"].map(String::from).to_vec(),
                target_nodes: ["esbjerg", "odense", "roskilde"].map(String::from).to_vec(),
                max_gap_hours: 3,
                split: "years".into(),
                train_years: (2000..=2008).collect(),
                val_years: vec![2009],
                test_years: vec![2010],
                train_fraction: 0.7,
                val_fraction: 0.15,
            },
            model: ModelSection {
                variant: "multi_scale".into(),
                horizon: model.horizon,
                window: model.window,
                num_blocks: model.num_blocks,
                residual_channels: model.residual_channels,
                skip_channels: model.skip_channels,
                end_channels: model.end_channels,
                embedding_width: model.embedding_width,
                adjacency: "softmax".into(),
                branches: String::new(),
            },
            train: TrainSection {
                epochs: 50,
                batch_size: 64,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                epsilon: adam.epsilon,
                factor: plateau.factor,
                patience: plateau.patience,
            },
        }
    }
}

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

pub fn flatten(table: &toml::Table) -> BTreeMap<String, toml::Value> {
    let mut out = BTreeMap::new();
    flatten_into("", table, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, toml::Value>) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("flat keys never collide with leaves");
        }
        table.insert(leaf.to_owned(), value.clone());
    }
    root
}

/// Parses the right side of `--set key=value`: TOML syntax first, falling
/// back to a bare string so `model.variant=single_scale` works unquoted.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value), String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("override `{raw}` is not key=value"))?;
    let key = key.trim().to_owned();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((key, parsed))
}

fn kind(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

fn compatible(default: &toml::Value, given: &toml::Value) -> bool {
    matches!(
        (default, given),
        (toml::Value::Float(_), toml::Value::Integer(_))
    ) || kind(default) == kind(given)
}

fn years_disjoint(sets: [(&str, &[i32]); 3]) -> Vec<String> {
    let mut seen: BTreeMap<i32, &str> = BTreeMap::new();
    let mut problems = Vec::new();
    for (role, years) in sets {
        for y in years {
            if let Some(other) = seen.insert(*y, role) {
                problems.push(format!("data: year {y} appears in both {other}_years and {role}_years"));
            }
        }
    }
    problems
}

pub fn parse_branches(spec: &str) -> Result<Vec<BranchSpec>, String> {
    spec.split(',')
        .map(|pair| {
            let (k, d) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("branch `{pair}` is not K:d"))?;
            let k = k.trim().parse().map_err(|_| format!("bad kernel size in `{pair}`"))?;
            let d = d.trim().parse().map_err(|_| format!("bad dilation in `{pair}`"))?;
            Ok(BranchSpec::new(k, d))
        })
        .collect()
}

impl RunConfig {
    /// Defaults, then `file` (TOML text), then `overrides` in order. Every
    /// problem found is reported together.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let defaults = toml::Table::try_from(Self::default()).map_err(|e| ConfigError::one(e.to_string()))?;
        let mut flat = flatten(&defaults);
        let mut given: Vec<(String, toml::Value)> = Vec::new();
        let mut problems = Vec::new();
        if let Some(text) = file {
            match toml::from_str::<toml::Table>(text) {
                Ok(table) => given.extend(flatten(&table)),
                Err(e) => problems.push(format!("config file: {e}")),
            }
        }
        for raw in overrides {
            match parse_override(raw) {
                Ok(kv) => given.push(kv),
                Err(e) => problems.push(e),
            }
        }
        for (key, value) in given {
            match flat.get(&key) {
                None => problems.push(format!("unknown key `{key}`")),
                Some(default) if !compatible(default, &value) => problems.push(format!(
                    "`{key}` expects a {}, got a {}",
                    kind(default),
                    kind(&value)
                )),
                Some(_) => {
                    flat.insert(key, value);
                }
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError { problems });
        }
        let config: Self = toml::Value::Table(unflatten(&flat))
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::one(e.to_string()))?;
        let problems = config.problems();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Dotted key → rendered TOML value, stored in checkpoints.
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let table = toml::Table::try_from(self).expect("config serializes");
        flatten(&table).into_iter().map(|(k, v)| (k, v.to_string())).collect()
    }

    pub fn from_flat(flat: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let overrides: Vec<String> = flat.iter().map(|(k, v)| format!("{k}={v}")).collect();
        Self::load(None, &overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant, String> {
        self.model.variant.parse()
    }

    pub fn station_paths(&self) -> Vec<PathBuf> {
        self.data
            .node_order
            .iter()
            .map(|n| PathBuf::from(&self.data.dir).join(format!("{n}.csv")))
            .collect()
    }

    /// Positions of the target stations in `node_order`.
    pub fn target_indices(&self) -> Result<Vec<usize>, String> {
        self.data
            .target_nodes
            .iter()
            .map(|t| {
                self.data
                    .node_order
                    .iter()
                    .position(|n| n == t)
                    .ok_or_else(|| format!("data: target `{t}` is not in node_order"))
            })
            .collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let variant = self.variant().map_err(ConfigError::one)?;
        let adjacency: AdjacencyKind = m.adjacency.parse().map_err(ConfigError::one)?;
        let branch_specs = if m.branches.trim().is_empty() {
            default_branches(variant, m.num_blocks)
        } else {
            vec![parse_branches(&m.branches).map_err(ConfigError::one)?; m.num_blocks]
        };
        let config = ModelConfig {
            variant,
            num_blocks: m.num_blocks,
            residual_channels: m.residual_channels,
            skip_channels: m.skip_channels,
            end_channels: m.end_channels.clone(),
            branch_specs,
            embedding_width: m.embedding_width,
            adjacency,
            window: m.window,
            horizon: m.horizon,
            num_nodes: self.data.node_order.len(),
            num_features: crate::data::NUM_FEATURES,
            target_nodes: self.target_indices().map_err(ConfigError::one)?,
        };
        let problems: Vec<String> = config.problems().into_iter().map(|p| format!("model: {p}")).collect();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError { problems })
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            plateau: PlateauConfig {
                factor: t.factor,
                patience: t.patience,
            },
            seed: self.seed,
        }
    }

    /// Every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let d = &self.data;
        if d.node_order.is_empty() {
            p.push("data: node_order is empty".into());
        }
        if d.node_order.iter().collect::<HashSet<_>>().len() != d.node_order.len() {
            p.push("data: node_order has duplicates".into());
        }
        if d.target_nodes.is_empty() {
            p.push("data: target_nodes is empty".into());
        }
        if d.target_nodes.iter().collect::<HashSet<_>>().len() != d.target_nodes.len() {
            p.push("data: target_nodes has duplicates".into());
        }
        let targets_ok = match self.target_indices() {
            Ok(_) => true,
            Err(e) => {
                p.push(e);
                false
            }
        };
        match d.split.as_str() {
            "years" => {
                if d.train_years.is_empty() {
                    p.push("data: train_years is empty".into());
                }
                if d.test_years.is_empty() {
                    p.push("data: test_years is empty".into());
                }
                p.extend(years_disjoint([
                    ("train", &d.train_years),
                    ("val", &d.val_years),
                    ("test", &d.test_years),
                ]));
            }
            "fraction" => {
                let (a, b) = (d.train_fraction, d.val_fraction);
                if !(a > 0.0 && b >= 0.0 && a + b < 1.0) {
                    p.push(format!("data: train_fraction {a} and val_fraction {b} must be positive and sum below 1"));
                }
            }
            other => p.push(format!("data: split `{other}` must be `years` or `fraction`")),
        }
        let m = &self.model;
        let variant_ok = match self.variant() {
            Ok(_) => true,
            Err(e) => {
                p.push(format!("model: {e}"));
                false
            }
        };
        if let Err(e) = m.adjacency.parse::<AdjacencyKind>() {
            p.push(format!("model: {e}"));
        }
        if !m.branches.trim().is_empty() {
            if let Err(e) = parse_branches(&m.branches) {
                p.push(format!("model: {e}"));
            }
        }
        if variant_ok && targets_ok && p.is_empty() {
            if let Err(e) = self.model_config() {
                p.extend(e.problems);
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            p.push("train: epochs must be at least 1".into());
        }
        if t.batch_size == 0 {
            p.push("train: batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            p.push(format!("train: lr {} must be positive", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            p.push("train: beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(t.epsilon.is_finite() && t.epsilon > 0.0) {
            p.push("train: epsilon must be positive".into());
        }
        if !(t.factor > 0.0 && t.factor < 1.0) {
            p.push(format!("train: factor {} must lie in (0, 1)", t.factor));
        }
        if t.patience == 0 {
            p.push("train: patience must be at least 1".into());
        }
        p
    }

    /// Legal but unusual settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !STANDARD_HORIZONS.contains(&self.model.horizon) {
            w.push(format!(
                "horizon {} is outside the standard set {STANDARD_HORIZONS:?}",
                self.model.horizon
            ));
        }
        let no_val = match self.data.split.as_str() {
            "years" => self.data.val_years.is_empty(),
            _ => self.data.val_fraction == 0.0,
        };
        if no_val {
            w.push("no validation split; the scheduler will track training loss".into());
        }
        w
    }
}
