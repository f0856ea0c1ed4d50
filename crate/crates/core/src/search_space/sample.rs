use rand::seq::index;
use rand::Rng;

use super::shape::{infer_shapes, op_shape};
use super::{
    AttentionDag, BackboneSpec, DagNode, InputNode, LayerSpec, NodeRef, PrimitiveOp, Result,
    SearchSpaceError, ShapeExpr, KERNEL_MENU, NUM_OPS,
};

/// Whole-dag attempts before [`random_dag`] gives up.
pub const GENERATION_BUDGET: usize = 200;
/// Attempts [`mutate_intra`] makes before returning the parent.
pub const MUTATION_RETRIES: usize = 50;
const NODE_TRIES: usize = 50;

/// Softmax over finite scores; when any score is `+∞` those entries share
/// all the probability equally.
pub fn bandit_softmax(scores: &[f64]) -> Vec<f64> {
    let inf = scores.iter().filter(|s| **s == f64::INFINITY).count();
    if inf > 0 {
        return scores
            .iter()
            .map(|&s| if s == f64::INFINITY { 1.0 / inf as f64 } else { 0.0 })
            .collect();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Per-position scores over the ten primitive ops, turned into sampling
/// probabilities by [`bandit_softmax`]. Positions past the end are uniform.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpDistributions {
    scores: Vec<[f64; NUM_OPS]>,
}

impl OpDistributions {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn from_scores(scores: Vec<[f64; NUM_OPS]>) -> Self {
        Self { scores }
    }

    fn scores_at(&self, position: usize) -> [f64; NUM_OPS] {
        self.scores.get(position).copied().unwrap_or([0.0; NUM_OPS])
    }

    pub fn at(&self, position: usize) -> [f64; NUM_OPS] {
        bandit_softmax(&self.scores_at(position)).try_into().expect("NUM_OPS entries")
    }

    pub fn sample<R: Rng + ?Sized>(&self, position: usize, rng: &mut R) -> PrimitiveOp {
        PrimitiveOp::ALL[sample_index(&self.at(position), rng)]
    }

    /// Samples from the distribution restricted to ops where `allowed` holds;
    /// `None` if no op is allowed.
    pub fn sample_where<R: Rng + ?Sized>(
        &self,
        position: usize,
        allowed: impl Fn(PrimitiveOp) -> bool,
        rng: &mut R,
    ) -> Option<PrimitiveOp> {
        let scores = self.scores_at(position);
        let ops: Vec<PrimitiveOp> = PrimitiveOp::ALL.into_iter().filter(|&op| allowed(op)).collect();
        if ops.is_empty() {
            return None;
        }
        let sub: Vec<f64> = ops.iter().map(|op| scores[op.index()]).collect();
        Some(ops[sample_index(&bandit_softmax(&sub), rng)])
    }
}

/// Per-layer scores over [`KERNEL_MENU`], sampled like [`OpDistributions`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelDistributions {
    scores: Vec<[f64; KERNEL_MENU.len()]>,
}

impl KernelDistributions {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn from_scores(scores: Vec<[f64; KERNEL_MENU.len()]>) -> Self {
        Self { scores }
    }

    pub fn at(&self, layer: usize) -> [f64; KERNEL_MENU.len()] {
        let scores = self.scores.get(layer).copied().unwrap_or([0.0; KERNEL_MENU.len()]);
        bandit_softmax(&scores).try_into().expect("menu entries")
    }

    pub fn sample<R: Rng + ?Sized>(&self, layer: usize, rng: &mut R) -> usize {
        KERNEL_MENU[sample_index(&self.at(layer), rng)]
    }
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

fn shape_of(r: NodeRef, shapes: &[ShapeExpr]) -> ShapeExpr {
    match r {
        NodeRef::Input(_) => ShapeExpr::INPUT,
        NodeRef::Node(j) => shapes[j],
    }
}

fn random_ref<R: Rng + ?Sized>(inputs: &[InputNode], position: usize, rng: &mut R) -> NodeRef {
    let i = rng.random_range(0..inputs.len() + position);
    if i < inputs.len() {
        NodeRef::Input(inputs[i])
    } else {
        NodeRef::Node(i - inputs.len())
    }
}

fn random_args<R: Rng + ?Sized>(op: PrimitiveOp, inputs: &[InputNode], position: usize, rng: &mut R) -> Vec<NodeRef> {
    (0..op.arity()).map(|_| random_ref(inputs, position, rng)).collect()
}

/// Uniformly sampled legal dag with 2–4 inputs and at most `max_len` nodes.
pub fn random_dag<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> Result<AttentionDag> {
    if max_len == 0 {
        return Err(SearchSpaceError::Structure("max_len must be at least 1".into()));
    }
    'attempt: for _ in 0..GENERATION_BUDGET {
        let k = rng.random_range(2..=4);
        let mut inputs: Vec<InputNode> = index::sample(rng, 4, k).into_iter().map(|i| InputNode::ALL[i]).collect();
        inputs.sort();
        let len = rng.random_range(1..=max_len);
        let mut nodes = Vec::with_capacity(len);
        let mut shapes = Vec::with_capacity(len);
        for i in 0..len {
            let mut placed = false;
            for _ in 0..NODE_TRIES {
                let op = PrimitiveOp::ALL[rng.random_range(0..NUM_OPS)];
                let args = random_args(op, &inputs, i, rng);
                let arg_shapes: Vec<ShapeExpr> = args.iter().map(|a| shape_of(*a, &shapes)).collect();
                if let Ok(s) = op_shape(op, &arg_shapes) {
                    nodes.push(DagNode { op, args });
                    shapes.push(s);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        let dag = AttentionDag::new(inputs, nodes)?;
        if dag.is_valid(max_len) {
            return Ok(dag);
        }
    }
    Err(SearchSpaceError::GenerationExhausted(GENERATION_BUDGET))
}

/// The single structural edit applied by [`mutate_intra`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraEdit {
    ReplaceOp { position: usize },
    InsertNode { position: usize },
    DeleteNode { position: usize },
    AddInput(InputNode),
    RemoveInput(InputNode),
}

fn remap(nodes: &mut [DagNode], from: usize, f: impl Fn(NodeRef) -> NodeRef) {
    for node in &mut nodes[from..] {
        for a in &mut node.args {
            *a = f(*a);
        }
    }
}

/// Draws an op for `position` from `dists`, rejecting ops whose node (with
/// `kept` args reused and the rest drawn at random) is shape-illegal given the
/// shapes of the preceding nodes.
fn sample_legal_node<R: Rng + ?Sized>(
    dists: &OpDistributions,
    position: usize,
    inputs: &[InputNode],
    shapes: &[ShapeExpr],
    exclude: Option<PrimitiveOp>,
    kept: Option<&[NodeRef]>,
    rng: &mut R,
) -> Option<(PrimitiveOp, Vec<NodeRef>)> {
    let mut rejected = [false; NUM_OPS];
    if let Some(op) = exclude {
        rejected[op.index()] = true;
    }
    loop {
        let op = dists.sample_where(position, |op| !rejected[op.index()], rng)?;
        let mut args: Vec<NodeRef> = kept.unwrap_or(&[]).iter().copied().take(op.arity()).collect();
        while args.len() < op.arity() {
            args.push(random_ref(inputs, position, rng));
        }
        let arg_shapes: Vec<ShapeExpr> = args.iter().map(|a| shape_of(*a, shapes)).collect();
        if op_shape(op, &arg_shapes).is_ok() {
            return Some((op, args));
        }
        rejected[op.index()] = true;
    }
}

fn try_edit<R: Rng + ?Sized>(parent: &AttentionDag, dists: &OpDistributions, rng: &mut R) -> Option<(AttentionDag, IntraEdit)> {
    let mut inputs = parent.inputs().to_vec();
    let mut nodes = parent.nodes().to_vec();
    let shapes = infer_shapes(parent).ok()?;
    let len = nodes.len();
    let edit = match rng.random_range(0..4) {
        0 => {
            let p = rng.random_range(0..len);
            let kept = std::mem::take(&mut nodes[p].args);
            let current = parent.nodes()[p].op;
            let (op, args) = sample_legal_node(dists, p, &inputs, &shapes, Some(current), Some(&kept), rng)?;
            nodes[p] = DagNode { op, args };
            IntraEdit::ReplaceOp { position: p }
        }
        1 => {
            let p = rng.random_range(0..=len);
            let (op, args) = sample_legal_node(dists, p, &inputs, &shapes, None, None, rng)?;
            remap(&mut nodes, p, |r| match r {
                NodeRef::Node(j) if j >= p => NodeRef::Node(j + 1),
                other => other,
            });
            nodes.insert(p, DagNode { op, args });
            if p < len {
                let q = rng.random_range(p + 1..=len);
                let slot = rng.random_range(0..nodes[q].args.len());
                nodes[q].args[slot] = NodeRef::Node(p);
            }
            IntraEdit::InsertNode { position: p }
        }
        2 => {
            if len < 2 {
                return None;
            }
            let p = rng.random_range(0..len);
            let replacement = nodes[p].args[0];
            nodes.remove(p);
            remap(&mut nodes, p, |r| match r {
                NodeRef::Node(j) if j == p => replacement,
                NodeRef::Node(j) if j > p => NodeRef::Node(j - 1),
                other => other,
            });
            IntraEdit::DeleteNode { position: p }
        }
        _ => {
            let mut options = Vec::new();
            for x in [InputNode::V, InputNode::P] {
                if inputs.contains(&x) && inputs.len() > 2 {
                    options.push(IntraEdit::RemoveInput(x));
                } else if !inputs.contains(&x) && inputs.len() < 4 {
                    options.push(IntraEdit::AddInput(x));
                }
            }
            if options.is_empty() {
                return None;
            }
            let edit = options[rng.random_range(0..options.len())];
            match edit {
                IntraEdit::RemoveInput(x) => {
                    inputs.retain(|&i| i != x);
                    let sub = NodeRef::Input(inputs[rng.random_range(0..inputs.len())]);
                    remap(&mut nodes, 0, |r| if r == NodeRef::Input(x) { sub } else { r });
                }
                IntraEdit::AddInput(x) => {
                    inputs.push(x);
                    let q = rng.random_range(0..len);
                    let slot = rng.random_range(0..nodes[q].args.len());
                    nodes[q].args[slot] = NodeRef::Input(x);
                }
                _ => unreachable!(),
            }
            edit
        }
    };
    let child = AttentionDag::new(inputs, nodes).ok()?;
    Some((child, edit))
}

/// Applies one edit drawn from {replace op, insert node, delete node, toggle V/P},
/// sampling new ops from the per-position distributions. Falls back to the
/// parent (with `None`) when no valid child is found within the retry budget.
pub fn mutate_intra<R: Rng + ?Sized>(
    parent: &AttentionDag,
    dists: &OpDistributions,
    max_len: usize,
    rng: &mut R,
) -> (AttentionDag, Option<IntraEdit>) {
    for _ in 0..MUTATION_RETRIES {
        if let Some((child, edit)) = try_edit(parent, dists, rng) {
            if child != *parent && child.is_valid(max_len) {
                return (child, Some(edit));
            }
        }
    }
    (parent.clone(), None)
}

/// Changes one uniformly chosen layer: a conv layer either becomes attention
/// (fresh random dag or a copy of another layer's dag) or redraws its kernel;
/// an attention layer becomes conv half of the time unless it is the last one.
pub fn mutate_inter<R: Rng + ?Sized>(
    parent: &BackboneSpec,
    kernel_dists: &KernelDistributions,
    max_len: usize,
    rng: &mut R,
) -> Result<BackboneSpec> {
    let mut layers = parent.layers.clone();
    let l = rng.random_range(0..layers.len());
    match &layers[l] {
        LayerSpec::Conv(_) => {
            if rng.random_bool(0.5) {
                let donors: Vec<&AttentionDag> = parent.attention_layers().map(|(_, d)| d).collect();
                let dag = if !donors.is_empty() && rng.random_bool(0.5) {
                    donors[rng.random_range(0..donors.len())].clone()
                } else {
                    random_dag(rng, max_len)?
                };
                layers[l] = LayerSpec::Attention(dag);
            } else {
                layers[l] = LayerSpec::Conv(kernel_dists.sample(l, rng));
            }
        }
        LayerSpec::Attention(_) => {
            let others = parent.attention_layers().count() > 1;
            if rng.random_bool(0.5) && others {
                layers[l] = LayerSpec::Conv(kernel_dists.sample(l, rng));
            }
        }
    }
    BackboneSpec::new(layers)
}
