use std::fmt;

use serde::{Deserialize, Serialize};

use super::{infer_shapes, OpKind, PrimitiveOp, Result, SearchSpaceError};
use crate::tensor::{Tape, TensorError, Var};

/// The four attention inputs. Each is a per-head projection of the layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InputNode {
    Q,
    K,
    V,
    P,
}

impl InputNode {
    pub const ALL: [InputNode; 4] = [InputNode::Q, InputNode::K, InputNode::V, InputNode::P];

    pub fn name(self) -> &'static str {
        match self {
            InputNode::Q => "Q",
            InputNode::K => "K",
            InputNode::V => "V",
            InputNode::P => "P",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for InputNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An argument of a node: either a declared input or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Input(InputNode),
    Node(usize),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Input(i) => write!(f, "{i}"),
            NodeRef::Node(n) => write!(f, "#{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DagNode {
    pub op: PrimitiveOp,
    pub args: Vec<NodeRef>,
}

impl DagNode {
    pub fn unary(op: PrimitiveOp, x: NodeRef) -> Self {
        Self { op, args: vec![x] }
    }

    pub fn binary(op: PrimitiveOp, a: NodeRef, b: NodeRef) -> Self {
        Self { op, args: vec![a, b] }
    }
}

/// Topologically ordered attention computation. The last node is the output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttentionDag {
    inputs: Vec<InputNode>,
    nodes: Vec<DagNode>,
}

/// A concrete evaluation failed at `node`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFailure {
    pub node: usize,
    pub error: TensorError,
}

use NodeRef::{Input as In, Node as Nd};

impl AttentionDag {
    /// Checks structure only: arities, declared inputs and strictly backward refs.
    /// Inputs are stored in canonical Q, K, V, P order.
    pub fn new(mut inputs: Vec<InputNode>, nodes: Vec<DagNode>) -> Result<Self> {
        inputs.sort();
        if inputs.windows(2).any(|w| w[0] == w[1]) {
            return Err(SearchSpaceError::Structure("duplicate input".into()));
        }
        if inputs.is_empty() {
            return Err(SearchSpaceError::Structure("no inputs".into()));
        }
        if nodes.is_empty() {
            return Err(SearchSpaceError::Structure("no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.args.len() != node.op.arity() {
                return Err(SearchSpaceError::Structure(format!(
                    "node {i}: {} takes {} args, got {}",
                    node.op,
                    node.op.arity(),
                    node.args.len()
                )));
            }
            for arg in &node.args {
                match *arg {
                    In(x) if !inputs.contains(&x) => {
                        return Err(SearchSpaceError::Structure(format!(
                            "node {i}: input {x} is not declared"
                        )))
                    }
                    Nd(j) if j >= i => {
                        return Err(SearchSpaceError::Structure(format!(
                            "node {i}: reference to node {j} is not strictly earlier"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { inputs, nodes })
    }

    pub fn inputs(&self) -> &[InputNode] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn uses(&self, input: InputNode) -> bool {
        self.nodes.iter().flat_map(|n| &n.args).any(|a| *a == In(input))
    }

    /// Full legality check: 2–4 inputs, all used, length bound, shape inference.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if !(2..=4).contains(&self.inputs.len()) {
            return Err(SearchSpaceError::InputCount(self.inputs.len()));
        }
        if self.nodes.len() > max_len {
            return Err(SearchSpaceError::TooLong {
                len: self.nodes.len(),
                max: max_len,
            });
        }
        if let Some(&unused) = self.inputs.iter().find(|&&i| !self.uses(i)) {
            return Err(SearchSpaceError::UnusedInput(unused));
        }
        infer_shapes(self).map(|_| ())
    }

    pub fn is_valid(&self, max_len: usize) -> bool {
        self.validate(max_len).is_ok()
    }

    /// Records the dag's ops on `tape`, with `bind` supplying each declared input.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bind: &mut dyn FnMut(&mut Tape, InputNode) -> Var,
    ) -> std::result::Result<Var, NodeFailure> {
        let mut inputs: [Option<Var>; 4] = [None; 4];
        for &i in &self.inputs {
            inputs[i.index()] = Some(bind(tape, i));
        }
        let mut vars = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let resolve = |r: NodeRef| match r {
                In(i) => inputs[i.index()].expect("declared input bound"),
                Nd(j) => vars[j],
            };
            let out = match node.op.kind() {
                OpKind::Unary(u) => tape.unary(u, resolve(node.args[0])),
                OpKind::Binary(b) => tape.binary(b, resolve(node.args[0]), resolve(node.args[1])),
            };
            vars.push(out.map_err(|error| NodeFailure { node: idx, error })?);
        }
        Ok(*vars.last().expect("dag has nodes"))
    }

    /// Standard scaled dot-product attention, softmax(QKᵀ/√d_h)·V.
    pub fn standard() -> Self {
        use PrimitiveOp::*;
        Self::new(
            vec![InputNode::Q, InputNode::K, InputNode::V],
            vec![
                DagNode::unary(Scale, In(InputNode::Q)),
                DagNode::unary(Transpose, In(InputNode::K)),
                DagNode::binary(Matmul, Nd(0), Nd(1)),
                DagNode::unary(Softmax, Nd(2)),
                DagNode::binary(Matmul, Nd(3), In(InputNode::V)),
            ],
        )
        .expect("standard dag is well formed")
    }

    /// softmax(Q·log(1+exp(Kᵀ))/√d_h)·(K+Q), with log(1+eˣ) written as −logsigmoid(−x).
    pub fn autobert_l2() -> Self {
        use PrimitiveOp::*;
        Self::new(
            vec![InputNode::Q, InputNode::K],
            vec![
                DagNode::unary(Transpose, In(InputNode::K)),
                DagNode::unary(Neg, Nd(0)),
                DagNode::unary(Logsigmoid, Nd(1)),
                DagNode::unary(Neg, Nd(2)),
                DagNode::unary(Scale, In(InputNode::Q)),
                DagNode::binary(Matmul, Nd(4), Nd(3)),
                DagNode::unary(Softmax, Nd(5)),
                DagNode::binary(Add, In(InputNode::K), In(InputNode::Q)),
                DagNode::binary(Matmul, Nd(6), Nd(7)),
            ],
        )
        .expect("L2 dag is well formed")
    }

    /// softmax(Q(K/√d_h + V)ᵀ/√d_h)·V.
    pub fn autobert_l12() -> Self {
        use PrimitiveOp::*;
        Self::new(
            vec![InputNode::Q, InputNode::K, InputNode::V],
            vec![
                DagNode::unary(Scale, In(InputNode::K)),
                DagNode::binary(Add, Nd(0), In(InputNode::V)),
                DagNode::unary(Transpose, Nd(1)),
                DagNode::unary(Scale, In(InputNode::Q)),
                DagNode::binary(Matmul, Nd(3), Nd(2)),
                DagNode::unary(Softmax, Nd(4)),
                DagNode::binary(Matmul, Nd(5), In(InputNode::V)),
            ],
        )
        .expect("L12 dag is well formed")
    }
}

impl fmt::Display for AttentionDag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inputs: Vec<_> = self.inputs.iter().map(|i| i.name()).collect();
        write!(f, "[{}]", inputs.join(","))?;
        for (i, n) in self.nodes.iter().enumerate() {
            let args: Vec<_> = n.args.iter().map(|a| a.to_string()).collect();
            write!(f, " #{i}={}({})", n.op, args.join(","))?;
        }
        Ok(())
    }
}
