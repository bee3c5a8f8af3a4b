//! Learnable adjacency matrices and the graph convolution used inside every
//! spatio-temporal block.
//!
//! Two constructions are available:
//!
//! * [`adjacency_softmax`]: `softmax_rows(E1 · E2ᵀ)` from two node embedding
//!   tables. Rows are positive and sum to one, and the matrix is generally
//!   asymmetric. This is what the default network uses.
//! * [`adjacency_selfloop`]: `A + α·I` with a learnable scalar `α`. It is not
//!   row-normalized and exists for ablations; it composes with the softmax
//!   form by passing the softmax output as `A`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to write adjacency to {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("failed to read adjacency from {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed adjacency csv: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Learnable `E1, E2 ∈ R^{N×C}` bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct NodeEmbeddings<'t> {
    pub source: Var<'t>,
    pub target: Var<'t>,
}

impl<'t> NodeEmbeddings<'t> {
    pub fn new(source: Var<'t>, target: Var<'t>) -> Result<Self, TensorError> {
        let (a, b) = (source.shape(), target.shape());
        if a.len() != 2 || a != b {
            return Err(TensorError::shape(format!("embeddings must share [N, C]: {a:?} vs {b:?}")));
        }
        Ok(Self { source, target })
    }

    pub fn num_nodes(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.source.shape()[1]
    }
}

/// `softmax_rows(E1 · E2ᵀ)`.
pub fn adjacency_softmax<'t>(emb: &NodeEmbeddings<'t>) -> Result<Var<'t>, TensorError> {
    emb.source.matmul(emb.target.transpose()?)?.softmax_rows()
}

/// `A + α·I`.
pub fn adjacency_selfloop<'t>(base: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>, TensorError> {
    base.add_scaled_identity(alpha)
}

/// Single-hop graph convolution: mixes nodes with `adj`, then applies the
/// channel transform `theta [C_out, C_in]` plus a per-channel `bias`.
pub fn gcn_forward<'t>(x: Var<'t>, adj: Var<'t>, theta: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
    x.node_mix(adj)?.conv_1x1(theta, bias)
}

/// A materialized adjacency matrix with its node labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub values: Tensor,
    pub node_order: Vec<String>,
}

impl AdjacencyMatrix {
    pub fn new(values: Tensor, node_order: Vec<String>) -> Result<Self, TensorError> {
        let n = node_order.len();
        if values.shape() != [n, n] {
            return Err(TensorError::shape(format!(
                "adjacency {:?} does not match {n} node names",
                values.shape()
            )));
        }
        Ok(Self { values, node_order })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_order.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.get(&[row, col])
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.num_nodes();
        &self.values.data()[row * n..(row + 1) * n]
    }

    /// CSV text: a `node,<name1>,...` header, then one row per source node.
    /// Values use shortest round-trip formatting, so parsing is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node");
        for name in &self.node_order {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in self.node_order.iter().enumerate() {
            out.push_str(name);
            for v in self.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| GraphError::Parse("empty file".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("node") {
            return Err(GraphError::Parse("header must start with `node`".into()));
        }
        let names: Vec<String> = cols.map(str::to_owned).collect();
        let n = names.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default();
            if names.get(i).map(String::as_str) != Some(label) {
                return Err(GraphError::Parse(format!("row {} is labeled `{label}`", i + 1)));
            }
            let row: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GraphError::Parse(format!("row {}: {e}", i + 1)))?;
            if row.len() != n {
                return Err(GraphError::Parse(format!("row {} has {} values, expected {n}", i + 1, row.len())));
            }
            data.extend(row);
        }
        if data.len() != n * n {
            return Err(GraphError::Parse(format!("expected {n} rows")));
        }
        Ok(Self::new(Tensor::new(vec![n, n], data)?, names)?)
    }
}

pub fn export_adjacency(adj: &AdjacencyMatrix, path: &Path) -> Result<(), GraphError> {
    fs::write(path, adj.to_csv()).map_err(|source| GraphError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_adjacency(path: &Path) -> Result<AdjacencyMatrix, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    AdjacencyMatrix::from_csv(&text)
}
