//! Two-level architecture space: attention DAGs over primitive ops
//! (intra-layer) and attention/convolution layer stacks (inter-layer).

mod backbone;
mod dag;
mod format;
mod sample;
mod shape;

pub use backbone::{
    autobert_zero_backbone, count_params, random_backbone, standard_backbone, BackboneSpec,
    LayerSpec, ParamCount, KERNEL_MENU, MAX_KERNEL,
};
pub use dag::{AttentionDag, DagNode, InputNode, NodeFailure, NodeRef};
pub use format::{from_json, from_value, to_json, to_value, FORMAT_VERSION};
pub use sample::{
    bandit_softmax, mutate_inter, mutate_intra, random_dag, IntraEdit, KernelDistributions, OpDistributions,
    GENERATION_BUDGET, MUTATION_RETRIES,
};
pub use shape::{infer_shapes, Dim, ShapeExpr};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BinaryOp, UnaryOp};

/// Default bound on the number of nodes in one attention path.
pub const MAX_PATH_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchSpaceError {
    #[error("malformed dag: {0}")]
    Structure(String),
    #[error("illegal graph at node {node}: {reason}")]
    IllegalGraph { node: usize, reason: String },
    #[error("declared input {0} is never used")]
    UnusedInput(InputNode),
    #[error("dag has {len} nodes, limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("dag declares {0} inputs, expected 2 to 4")]
    InputCount(usize),
    #[error("no valid dag found after {0} attempts")]
    GenerationExhausted(usize),
    #[error("kernel size {0} is not in the menu")]
    InvalidKernel(usize),
    #[error("backbone must have at least one layer")]
    EmptyBackbone,
    #[error("layer count {0} must be even")]
    OddLayerCount(usize),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<SearchSpaceError>,
    },
    #[error("invalid field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, SearchSpaceError>;

/// The ten primitive operations an attention DAG may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveOp {
    Neg,
    Transpose,
    Scale,
    Softmax,
    Logsigmoid,
    Softsign,
    Add,
    Matmul,
    Cosine,
    Euclidean,
}

pub const NUM_OPS: usize = 10;

impl PrimitiveOp {
    pub const ALL: [PrimitiveOp; NUM_OPS] = [
        PrimitiveOp::Neg,
        PrimitiveOp::Transpose,
        PrimitiveOp::Scale,
        PrimitiveOp::Softmax,
        PrimitiveOp::Logsigmoid,
        PrimitiveOp::Softsign,
        PrimitiveOp::Add,
        PrimitiveOp::Matmul,
        PrimitiveOp::Cosine,
        PrimitiveOp::Euclidean,
    ];

    /// Position of the op in [`PrimitiveOp::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn arity(self) -> usize {
        match self.kind() {
            OpKind::Unary(_) => 1,
            OpKind::Binary(_) => 2,
        }
    }

    pub fn kind(self) -> OpKind {
        match self {
            PrimitiveOp::Neg => OpKind::Unary(UnaryOp::Neg),
            PrimitiveOp::Transpose => OpKind::Unary(UnaryOp::Transpose),
            PrimitiveOp::Scale => OpKind::Unary(UnaryOp::Scale),
            PrimitiveOp::Softmax => OpKind::Unary(UnaryOp::Softmax),
            PrimitiveOp::Logsigmoid => OpKind::Unary(UnaryOp::LogSigmoid),
            PrimitiveOp::Softsign => OpKind::Unary(UnaryOp::Softsign),
            PrimitiveOp::Add => OpKind::Binary(BinaryOp::Add),
            PrimitiveOp::Matmul => OpKind::Binary(BinaryOp::Matmul),
            PrimitiveOp::Cosine => OpKind::Binary(BinaryOp::Cosine),
            PrimitiveOp::Euclidean => OpKind::Binary(BinaryOp::Euclidean),
        }
    }

    pub fn name(self) -> &'static str {
        match self.kind() {
            OpKind::Unary(u) => u.name(),
            OpKind::Binary(b) => b.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl std::fmt::Display for PrimitiveOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Unary(UnaryOp),
    Binary(BinaryOp),
}
