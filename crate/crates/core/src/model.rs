//! Spatio-temporal graph networks with single- or multi-scale TCN blocks.
//!
//! Data flow for an input `[B, D, N, W]`:
//!
//! ```text
//! x ─ 1×1 conv ─▶ h ─┬─ ST block 1 ─┬─ ... ─ ST block L
//!                    │    skip tap  │
//!                    ▼              ▼
//!                 Σ skips ─ ReLU ─ 1×1 ─ ReLU ─ 1×1 ─ flatten ─ dense ─▶ [B, N_target]
//! ```
//!
//! Each ST block computes `g = tanh(TCN_a(h)) ⊙ σ(TCN_b(h))`, taps
//! `skip = 1×1(g)`, and returns `GCN(g, Ã) + h`. Every block shares the one
//! adjacency built from the network's node embeddings. The two variants differ
//! only inside the TCN subunit: the single-scale variant has one dilated
//! branch per block, the multi-scale variant runs several `(K, d)` branches in
//! parallel and concatenates them before a 1×1 reduction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat_channels, Tape, Var};
use crate::error::TensorError;
use crate::graph::{self, AdjacencyMatrix, NodeEmbeddings};
use crate::params::{fan_in_uniform, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleScale,
    MultiScale,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_scale" => Ok(Variant::SingleScale),
            "multi_scale" => Ok(Variant::MultiScale),
            other => Err(format!("unknown variant `{other}` (expected single_scale or multi_scale)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyKind {
    /// `softmax_rows(E1·E2ᵀ)`.
    Softmax,
    /// `softmax_rows(E1·E2ᵀ) + α·I`.
    SoftmaxSelfLoop,
}

impl std::str::FromStr for AdjacencyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(AdjacencyKind::Softmax),
            "softmax_selfloop" => Ok(AdjacencyKind::SoftmaxSelfLoop),
            other => Err(format!("unknown adjacency `{other}` (expected softmax or softmax_selfloop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub kernel_size: usize,
    pub dilation: usize,
}

impl BranchSpec {
    pub const fn new(kernel_size: usize, dilation: usize) -> Self {
        Self { kernel_size, dilation }
    }

    /// How many steps back this branch reaches.
    pub fn reach(&self) -> usize {
        (self.kernel_size - 1) * self.dilation
    }
}

/// Default multi-scale branches, identical in every block.
pub const MULTI_SCALE_BRANCHES: [BranchSpec; 3] = [BranchSpec::new(2, 1), BranchSpec::new(3, 2), BranchSpec::new(6, 3)];

pub fn default_branches(variant: Variant, num_blocks: usize) -> Vec<Vec<BranchSpec>> {
    (0..num_blocks)
        .map(|i| match variant {
            Variant::MultiScale => MULTI_SCALE_BRANCHES.to_vec(),
            Variant::SingleScale => vec![BranchSpec::new(2, 1 << i)],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_blocks: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    /// Widths of the 1×1 convs in the output head.
    pub end_channels: Vec<usize>,
    /// Branches per block; `branch_specs.len() == num_blocks`.
    pub branch_specs: Vec<Vec<BranchSpec>>,
    pub embedding_width: usize,
    pub adjacency: AdjacencyKind,
    pub window: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub num_features: usize,
    /// Indices into the node axis of the nodes being forecast.
    pub target_nodes: Vec<usize>,
}

impl ModelConfig {
    /// Four blocks, 32 residual / 64 skip channels, head widths 128 → 64,
    /// window 48, 5 nodes with 4 features, three target nodes.
    pub fn new(variant: Variant, horizon: usize) -> Self {
        let num_blocks = 4;
        Self {
            variant,
            num_blocks,
            residual_channels: 32,
            skip_channels: 64,
            end_channels: vec![128, 64],
            branch_specs: default_branches(variant, num_blocks),
            embedding_width: 10,
            adjacency: AdjacencyKind::Softmax,
            window: 48,
            horizon,
            num_nodes: 5,
            num_features: 4,
            target_nodes: vec![2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }

    /// Every violated constraint, for exhaustive reporting.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = [
            ("num_blocks", self.num_blocks),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("embedding_width", self.embedding_width),
            ("window", self.window),
            ("horizon", self.horizon),
            ("num_nodes", self.num_nodes),
            ("num_features", self.num_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        if self.end_channels.is_empty() || self.end_channels.contains(&0) {
            p.push("end_channels must be a non-empty list of positive widths".into());
        }
        if self.branch_specs.len() != self.num_blocks {
            p.push(format!(
                "branch_specs lists {} blocks but num_blocks is {}",
                self.branch_specs.len(),
                self.num_blocks
            ));
        }
        for (i, branches) in self.branch_specs.iter().enumerate() {
            if let Err(e) = check_branch_count(self.variant, branches.len()) {
                p.push(format!("block {i}: {e}"));
            }
            if branches.iter().any(|b| b.kernel_size == 0 || b.dilation == 0) {
                p.push(format!("block {i}: kernel_size and dilation must be at least 1"));
            }
        }
        if self.target_nodes.is_empty() {
            p.push("at least one target node is required".into());
        }
        if let Some(&bad) = self.target_nodes.iter().find(|&&t| t >= self.num_nodes) {
            p.push(format!("target node index {bad} out of range for {} nodes", self.num_nodes));
        }
        p
    }

    pub fn num_targets(&self) -> usize {
        self.target_nodes.len()
    }
}

fn check_branch_count(variant: Variant, count: usize) -> Result<(), String> {
    match (variant, count) {
        (_, 0) => Err("TCN subunit needs at least one branch".into()),
        (Variant::SingleScale, n) if n != 1 => Err(format!("single_scale takes exactly 1 branch, got {n}")),
        (Variant::MultiScale, 1) => Err("multi_scale needs at least 2 branches".into()),
        _ => Ok(()),
    }
}

/// `1 + Σ_blocks max_branch (K-1)·d`: how many of the most recent input hours
/// can influence the last output step.
pub fn receptive_field(config: &ModelConfig) -> usize {
    1 + config
        .branch_specs
        .iter()
        .map(|branches| branches.iter().map(BranchSpec::reach).max().unwrap_or(0))
        .sum::<usize>()
}

/// Tape-bound parameters of one TCN subunit.
#[derive(Debug, Clone)]
pub struct TcnParams<'t> {
    pub branches: Vec<(Var<'t>, BranchSpec)>,
    pub reduce_weight: Var<'t>,
    pub reduce_bias: Var<'t>,
}

/// Runs every branch's dilated causal conv, concatenates along channels and
/// reduces back with a 1×1 conv.
pub fn tcn_subunit_forward<'t>(x: Var<'t>, params: &TcnParams<'t>, variant: Variant) -> Result<Var<'t>, ModelError> {
    check_branch_count(variant, params.branches.len()).map_err(ModelError::Config)?;
    let outs = params
        .branches
        .iter()
        .map(|(kernel, spec)| x.conv_time_dilated_causal(*kernel, spec.dilation))
        .collect::<Result<Vec<_>, _>>()?;
    let joined = concat_channels(&outs)?;
    Ok(joined.conv_1x1(params.reduce_weight, params.reduce_bias)?)
}

/// `tanh(TCN_a(x)) ⊙ sigmoid(TCN_b(x))`.
pub fn gated_tcn_forward<'t>(
    x: Var<'t>,
    filter: &TcnParams<'t>,
    gate: &TcnParams<'t>,
    variant: Variant,
) -> Result<Var<'t>, ModelError> {
    let a = tcn_subunit_forward(x, filter, variant)?.tanh();
    let b = tcn_subunit_forward(x, gate, variant)?.sigmoid();
    Ok(a.mul(b)?)
}

#[derive(Debug, Clone)]
pub struct BlockParams<'t> {
    pub filter: TcnParams<'t>,
    pub gate: TcnParams<'t>,
    pub gcn_weight: Var<'t>,
    pub gcn_bias: Var<'t>,
    pub skip_weight: Var<'t>,
    pub skip_bias: Var<'t>,
}

/// Returns `(GCN(g, adj) + x, skip_tap)` with `g` the gated TCN output.
pub fn st_block_forward<'t>(
    x: Var<'t>,
    params: &BlockParams<'t>,
    adj: Var<'t>,
    variant: Variant,
) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let g = gated_tcn_forward(x, &params.filter, &params.gate, variant)?;
    let skip = g.conv_1x1(params.skip_weight, params.skip_bias)?;
    let out = graph::gcn_forward(g, adj, params.gcn_weight, params.gcn_bias)?.add(x)?;
    Ok((out, skip))
}

#[derive(Debug, Clone, Copy)]
struct Conv1x1Ids {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct TcnIds {
    branches: Vec<(ParamId, BranchSpec)>,
    reduce: Conv1x1Ids,
}

#[derive(Debug, Clone)]
struct BlockIds {
    filter: TcnIds,
    gate: TcnIds,
    gcn: Conv1x1Ids,
    skip: Conv1x1Ids,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Conv1x1Ids,
    emb_source: ParamId,
    emb_target: ParamId,
    alpha: Option<ParamId>,
    blocks: Vec<BlockIds>,
    head: Vec<Conv1x1Ids>,
    dense_weight: ParamId,
    dense_bias: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv1x1(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv1x1Ids {
        let weight = fan_in_uniform(&[c_out, c_in], c_in, &mut self.rng);
        let bias = fan_in_uniform(&[c_out], c_in, &mut self.rng);
        Conv1x1Ids {
            weight: self.store.add(format!("{name}.weight"), weight),
            bias: self.store.add(format!("{name}.bias"), bias),
        }
    }

    fn tcn(&mut self, name: &str, channels: usize, branches: &[BranchSpec]) -> TcnIds {
        let branches = branches
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let fan_in = channels * spec.kernel_size;
                let k = fan_in_uniform(&[channels, channels, spec.kernel_size], fan_in, &mut self.rng);
                (self.store.add(format!("{name}.branch{i}.kernel"), k), *spec)
            })
            .collect::<Vec<_>>();
        let reduce = self.conv1x1(&format!("{name}.reduce"), channels * branches.len(), channels);
        TcnIds { branches, reduce }
    }
}

/// Parameters plus wiring of a full network.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// A [`Network`]'s parameters recorded on one tape.
#[derive(Debug)]
pub struct BoundNetwork<'t> {
    pub vars: Vec<Var<'t>>,
    pub input_weight: Var<'t>,
    pub input_bias: Var<'t>,
    pub embeddings: NodeEmbeddings<'t>,
    pub alpha: Option<Var<'t>>,
    pub blocks: Vec<BlockParams<'t>>,
    pub head: Vec<(Var<'t>, Var<'t>)>,
    pub dense_weight: Var<'t>,
    pub dense_bias: Var<'t>,
}

impl Network {
    /// Builds a freshly initialized network. Initialization draws from a
    /// ChaCha stream seeded with `seed` in parameter registration order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.residual_channels;
        let input = b.conv1x1("input", config.num_features, c);
        let (n, e) = (config.num_nodes, config.embedding_width);
        let emb_source = uniform(&[n, e], 0.5, &mut b.rng);
        let emb_source = b.store.add("adjacency.source_embedding", emb_source);
        let emb_target = uniform(&[n, e], 0.5, &mut b.rng);
        let emb_target = b.store.add("adjacency.target_embedding", emb_target);
        let alpha = (config.adjacency == AdjacencyKind::SoftmaxSelfLoop)
            .then(|| b.store.add("adjacency.alpha", Tensor::scalar(0.0)));
        let blocks = config
            .branch_specs
            .iter()
            .enumerate()
            .map(|(i, branches)| BlockIds {
                filter: b.tcn(&format!("block{i}.filter"), c, branches),
                gate: b.tcn(&format!("block{i}.gate"), c, branches),
                gcn: b.conv1x1(&format!("block{i}.gcn"), c, c),
                skip: b.conv1x1(&format!("block{i}.skip"), c, config.skip_channels),
            })
            .collect();
        let mut width = config.skip_channels;
        let head = config
            .end_channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let ids = b.conv1x1(&format!("head.conv{i}"), width, out);
                width = out;
                ids
            })
            .collect();
        let features = width * config.num_nodes * config.window;
        let t = config.num_targets();
        let dense_weight = fan_in_uniform(&[t, features], features, &mut b.rng);
        let dense_weight = b.store.add("head.dense.weight", dense_weight);
        let dense_bias = fan_in_uniform(&[t], features, &mut b.rng);
        let dense_bias = b.store.add("head.dense.bias", dense_bias);
        let layout = Layout {
            input,
            emb_source,
            emb_target,
            alpha,
            blocks,
            head,
            dense_weight,
            dense_bias,
        };
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_params(&mut self, entries: &[(String, Tensor)]) -> Result<(), ModelError> {
        if entries.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                entries.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| ModelError::Config(format!("unknown parameter `{name}`")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(ModelError::Config(format!("parameter `{name}` given twice")));
            }
            if self.params.get(id).shape() != value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundNetwork<'t>, ModelError> {
        let vars = self.params.bind(tape, trainable);
        let v = |id: ParamId| vars[id.index()];
        let tcn = |ids: &TcnIds| TcnParams {
            branches: ids.branches.iter().map(|(id, spec)| (v(*id), *spec)).collect(),
            reduce_weight: v(ids.reduce.weight),
            reduce_bias: v(ids.reduce.bias),
        };
        let l = &self.layout;
        let blocks = l
            .blocks
            .iter()
            .map(|b| BlockParams {
                filter: tcn(&b.filter),
                gate: tcn(&b.gate),
                gcn_weight: v(b.gcn.weight),
                gcn_bias: v(b.gcn.bias),
                skip_weight: v(b.skip.weight),
                skip_bias: v(b.skip.bias),
            })
            .collect();
        Ok(BoundNetwork {
            input_weight: v(l.input.weight),
            input_bias: v(l.input.bias),
            embeddings: NodeEmbeddings::new(v(l.emb_source), v(l.emb_target))?,
            alpha: l.alpha.map(v),
            blocks,
            head: l.head.iter().map(|c| (v(c.weight), v(c.bias))).collect(),
            dense_weight: v(l.dense_weight),
            dense_bias: v(l.dense_bias),
            vars,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.num_features || shape[2] != c.num_nodes || shape[3] != c.window {
            return Err(TensorError::shape(format!(
                "network expects [B, {}, {}, {}], got {shape:?}",
                c.num_features, c.num_nodes, c.window
            ))
            .into());
        }
        Ok(())
    }

    pub fn adjacency<'t>(&self, bound: &BoundNetwork<'t>) -> Result<Var<'t>, ModelError> {
        let adj = graph::adjacency_softmax(&bound.embeddings)?;
        Ok(match bound.alpha {
            Some(alpha) => graph::adjacency_selfloop(adj, alpha)?,
            None => adj,
        })
    }

    /// Output of the last head conv, `[B, end_channels.last, N, T]`. Accepts
    /// any time length, which is what causality probes need.
    pub fn forward_features<'t>(&self, bound: &BoundNetwork<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.num_features || shape[2] != c.num_nodes {
            return Err(TensorError::shape(format!(
                "network expects [B, {}, {}, W], got {shape:?}",
                c.num_features, c.num_nodes
            ))
            .into());
        }
        let adj = self.adjacency(bound)?;
        let mut h = x.conv_1x1(bound.input_weight, bound.input_bias)?;
        let mut skips: Option<Var<'t>> = None;
        for block in &bound.blocks {
            let (out, skip) = st_block_forward(h, block, adj, c.variant)?;
            h = out;
            skips = Some(match skips {
                Some(s) => s.add(skip)?,
                None => skip,
            });
        }
        let mut y = skips.expect("at least one block");
        for (w, b) in &bound.head {
            y = y.relu().conv_1x1(*w, *b)?;
        }
        Ok(y)
    }

    /// `[B, D, N, W] -> [B, N_target]`, normalized target-node wind speed.
    pub fn forward<'t>(&self, bound: &BoundNetwork<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        self.check_input(&x.shape())?;
        let features = self.forward_features(bound, x)?.flatten()?;
        Ok(features.dense(bound.dense_weight, bound.dense_bias)?)
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        Ok(self.forward(&bound, tape.constant(x.clone()))?.value())
    }

    pub fn learned_adjacency(&self, node_order: &[String]) -> Result<AdjacencyMatrix, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let values = self.adjacency(&bound)?.value();
        Ok(AdjacencyMatrix::new(values, node_order.to_vec())?)
    }
}
