use std::fmt;

use super::{AttentionDag, NodeRef, OpKind, PrimitiveOp, Result, SearchSpaceError};

/// Symbolic dimension: sequence length `n` or head width `d_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    N,
    Dh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeExpr {
    Scalar,
    Matrix(Dim, Dim),
}

impl ShapeExpr {
    pub const INPUT: ShapeExpr = ShapeExpr::Matrix(Dim::N, Dim::Dh);

    /// Concrete shape for given `n` and `d_h`.
    pub fn concrete(self, n: usize, dh: usize) -> Vec<usize> {
        let size = |d: Dim| match d {
            Dim::N => n,
            Dim::Dh => dh,
        };
        match self {
            ShapeExpr::Scalar => vec![],
            ShapeExpr::Matrix(r, c) => vec![size(r), size(c)],
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dim::N => "n",
            Dim::Dh => "d_h",
        })
    }
}

impl fmt::Display for ShapeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeExpr::Scalar => f.write_str("scalar"),
            ShapeExpr::Matrix(r, c) => write!(f, "{r}×{c}"),
        }
    }
}

/// Output shape of `op` applied to `args`, or the reason it is illegal.
pub(crate) fn op_shape(op: PrimitiveOp, args: &[ShapeExpr]) -> std::result::Result<ShapeExpr, String> {
    use ShapeExpr::*;
    match op.kind() {
        OpKind::Unary(_) => {
            let x = args[0];
            match (op, x) {
                (PrimitiveOp::Transpose, Matrix(r, c)) => Ok(Matrix(c, r)),
                (PrimitiveOp::Transpose, Scalar) => Err("transpose needs a matrix".into()),
                _ => Ok(x),
            }
        }
        OpKind::Binary(_) => {
            let (a, b) = (args[0], args[1]);
            match op {
                PrimitiveOp::Add if a == b => Ok(a),
                PrimitiveOp::Add => Err(format!("add of {a} and {b}")),
                PrimitiveOp::Matmul => match (a, b) {
                    (Matrix(r, k1), Matrix(k2, c)) if k1 == k2 => Ok(Matrix(r, c)),
                    _ => Err(format!("matmul of {a} and {b}")),
                },
                _ => match (a, b) {
                    (Matrix(r, c1), Matrix(r2, c2)) if r == r2 && c1 == c2 => Ok(Matrix(r, r)),
                    _ => Err(format!("{op} needs two equal matrix shapes, got {a} and {b}")),
                },
            }
        }
    }
}

/// Symbolic shape of every node, provided each op is legal and the
/// output is `n×d_h`.
pub fn infer_shapes(dag: &AttentionDag) -> Result<Vec<ShapeExpr>> {
    let mut shapes: Vec<ShapeExpr> = Vec::with_capacity(dag.len());
    for (i, node) in dag.nodes().iter().enumerate() {
        let args: Vec<ShapeExpr> = node
            .args
            .iter()
            .map(|a| match *a {
                NodeRef::Input(_) => ShapeExpr::INPUT,
                NodeRef::Node(j) => shapes[j],
            })
            .collect();
        let s = op_shape(node.op, &args).map_err(|reason| SearchSpaceError::IllegalGraph { node: i, reason })?;
        shapes.push(s);
    }
    let out = *shapes.last().expect("dag has nodes");
    if out != ShapeExpr::INPUT {
        return Err(SearchSpaceError::IllegalGraph {
            node: dag.output(),
            reason: format!("output is {out}, expected n×d_h"),
        });
    }
    Ok(shapes)
}
