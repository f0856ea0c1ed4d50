#![allow(dead_code)]

use opnas_core::search_space::{AttentionDag, DagNode, InputNode, NodeRef, PrimitiveOp};
use opnas_core::tensor::{BinaryOp, Tape, Tensor, UnaryOp, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Reduces a non-scalar output to a scalar whose partials differ per entry.
fn probe(tape: &mut Tape, y: Var) -> Var {
    if tape.value(y).numel() == 1 {
        return y;
    }
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n).map(|i| 0.3 * (((i * 7) % 11) as f64 - 5.0) / 5.0).collect();
    let c = tape.constant(Tensor::new(shape, c).unwrap());
    let z = tape.binary(BinaryOp::Add, y, c).unwrap();
    let s = tape.unary(UnaryOp::Softsign, z).unwrap();
    tape.sum(s).unwrap()
}

fn loss_at(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let y = f(&mut tape, &vars);
    let l = probe(&mut tape, y);
    tape.value(l).item()
}

/// Largest relative error between autodiff and central differences over
/// every coordinate of every input.
pub fn gradcheck(inputs: &[Tensor], f: &Build) -> f64 {
    const H: f64 = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars);
    let l = probe(&mut tape, y);
    let grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (loss_at(&plus, f) - loss_at(&minus, f)) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>),
}

fn unary_case(op: UnaryOp) -> impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
    move |r| {
        let x = uniform(&[4, 3], r);
        (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| t.unary(op, v[0]).unwrap()))
    }
}

fn pairwise(op: BinaryOp, r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
    let a = uniform(&[4, 3], r);
    let b = uniform(&[4, 3], r);
    (vec![a, b], Box::new(move |t: &mut Tape, v: &[Var]| t.binary(op, v[0], v[1]).unwrap()))
}

/// One entry per differentiable op kind: the ten primitives plus linear,
/// depthwise conv, GLU, layer norm and the masked loss.
pub fn gradient_cases() -> Vec<Case> {
    vec![
        Case { name: "neg", make: |r| unary_case(UnaryOp::Neg)(r) },
        Case { name: "transpose", make: |r| unary_case(UnaryOp::Transpose)(r) },
        Case { name: "scale", make: |r| unary_case(UnaryOp::Scale)(r) },
        Case { name: "softmax", make: |r| unary_case(UnaryOp::Softmax)(r) },
        Case { name: "logsigmoid", make: |r| unary_case(UnaryOp::LogSigmoid)(r) },
        Case { name: "softsign", make: |r| unary_case(UnaryOp::Softsign)(r) },
        Case { name: "add", make: |r| pairwise(BinaryOp::Add, r) },
        Case {
            name: "matmul",
            make: |r| {
                let a = uniform(&[4, 3], r);
                let b = uniform(&[3, 5], r);
                (vec![a, b], Box::new(|t: &mut Tape, v: &[Var]| t.binary(BinaryOp::Matmul, v[0], v[1]).unwrap()))
            },
        },
        Case { name: "cosine", make: |r| pairwise(BinaryOp::Cosine, r) },
        Case { name: "euclidean", make: |r| pairwise(BinaryOp::Euclidean, r) },
        Case {
            name: "linear",
            make: |r| {
                let x = uniform(&[4, 3], r);
                let w = uniform(&[3, 2], r);
                (vec![x, w], Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1]).unwrap()))
            },
        },
        Case {
            name: "depthwise_conv1d",
            make: |r| {
                let x = uniform(&[6, 3], r);
                let k = uniform(&[3, 3], r);
                (vec![x, k], Box::new(|t: &mut Tape, v: &[Var]| t.depthwise_conv1d(v[0], v[1]).unwrap()))
            },
        },
        Case {
            name: "glu",
            make: |r| {
                let x = uniform(&[3, 4], r);
                (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.glu(v[0]).unwrap()))
            },
        },
        Case {
            name: "layer_norm",
            make: |r| {
                let x = uniform(&[3, 4], r);
                let g = uniform(&[4], r);
                let b = uniform(&[4], r);
                (vec![x, g, b], Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2]).unwrap()))
            },
        },
        Case {
            name: "masked_cross_entropy",
            make: |r| {
                let logits = uniform(&[5, 6], r);
                let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
                let mut mask: Vec<bool> = (0..5).map(|_| r.random_bool(0.5)).collect();
                mask[0] = true;
                (
                    vec![logits],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.masked_cross_entropy(v[0], &targets, &mask).unwrap()),
                )
            },
        },
    ]
}

/// Worst relative error per case over `instances` random draws.
pub fn gradient_report(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    gradient_cases()
        .into_iter()
        .map(|case| {
            let worst = (0..instances)
                .map(|_| {
                    let (inputs, f) = (case.make)(&mut r);
                    gradcheck(&inputs, f.as_ref())
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}

/// Every dag of one to `max_nodes` nodes over the declared inputs {Q, K}.
pub fn enumerate_qk_dags(max_nodes: usize) -> Vec<AttentionDag> {
    fn extend(prefix: &mut Vec<DagNode>, max: usize, out: &mut Vec<AttentionDag>) {
        if !prefix.is_empty() {
            out.push(AttentionDag::new(vec![InputNode::Q, InputNode::K], prefix.clone()).unwrap());
        }
        if prefix.len() == max {
            return;
        }
        let mut refs = vec![NodeRef::Input(InputNode::Q), NodeRef::Input(InputNode::K)];
        refs.extend((0..prefix.len()).map(NodeRef::Node));
        for op in PrimitiveOp::ALL {
            if op.arity() == 1 {
                for &a in &refs {
                    prefix.push(DagNode::unary(op, a));
                    extend(prefix, max, out);
                    prefix.pop();
                }
            } else {
                for &a in &refs {
                    for &b in &refs {
                        prefix.push(DagNode::binary(op, a, b));
                        extend(prefix, max, out);
                        prefix.pop();
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), max_nodes, &mut out);
    out
}

/// Concrete-shape verdict: `Ok(())` when every node executes on random n×d_h
/// inputs and the output is n×d_h, otherwise the first failing node.
pub fn concrete_verdict(dag: &AttentionDag, n: usize, dh: usize, rng: &mut ChaCha8Rng) -> Result<(), usize> {
    let mut tape = Tape::new();
    let q = uniform(&[n, dh], rng);
    let k = uniform(&[n, dh], rng);
    let out = dag.apply(&mut tape, &mut |t, i| match i {
        InputNode::Q => t.leaf(q.clone(), false),
        _ => t.leaf(k.clone(), false),
    });
    match out {
        Err(f) => Err(f.node),
        Ok(v) if tape.value(v).shape() == [n, dh] => Ok(()),
        Ok(_) => Err(dag.output()),
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = t.dims2().unwrap();
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

pub fn mat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = b[0].len();
    a.iter()
        .map(|r| (0..m).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn map(a: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    rows(b)
        .iter()
        .zip(a)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Evaluates `dag` on the engine with the given bindings.
pub fn run_dag(dag: &AttentionDag, bind: &[(InputNode, Tensor)]) -> Tensor {
    let mut tape = Tape::new();
    let v = dag
        .apply(&mut tape, &mut |t, i| {
            let x = bind.iter().find(|(j, _)| *j == i).expect("input bound").1.clone();
            t.leaf(x, false)
        })
        .unwrap();
    tape.value(v).clone()
}

/// softmax(QKᵀ/√d)·V by explicit loops.
pub fn standard_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = q.len();
    let d = q[0].len() as f64;
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..q[i].len()).map(|c| q[i][c] * k[j][c]).sum::<f64>() / d.sqrt())
            .collect();
        let w = &softmax_rows(&[logits])[0];
        for j in 0..n {
            for c in 0..v[0].len() {
                out[i][c] += w[j] * v[j][c];
            }
        }
    }
    out
}

/// softmax(Q·log(1+exp(Kᵀ))/√d)·(K+Q).
pub fn l2_attention(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let softplus_kt = map(&transpose(k), |x| (1.0 + x.exp()).ln());
    let logits = map(&matmul(q, &softplus_kt), |x| x / d.sqrt());
    matmul(&softmax_rows(&logits), &add(k, q))
}

/// softmax(Q(K/√d+V)ᵀ/√d)·V.
pub fn l12_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let inner = add(&map(k, |x| x / d.sqrt()), v);
    let logits = map(&matmul(q, &transpose(&inner)), |x| x / d.sqrt());
    matmul(&softmax_rows(&logits), v)
}

/// Mean cosine over unordered pairs, zero rows contributing 0.
pub fn cosine_oracle(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let dot: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
                let ni = x[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj = x[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                total += if ni == 0.0 || nj == 0.0 { 0.0 } else { dot / (ni * nj) };
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// Closed form ‖X − 1x̄ᵀ‖² = ‖X‖² − n‖x̄‖², divided by ‖X‖².
pub fn residual_oracle(x: &[Vec<f64>]) -> f64 {
    let n = x.len() as f64;
    let total: f64 = x.iter().flatten().map(|v| v * v).sum();
    let mean_sq: f64 = (0..x[0].len())
        .map(|c| (x.iter().map(|r| r[c]).sum::<f64>() / n).powi(2))
        .sum();
    ((total - n * mean_sq) / total).sqrt()
}
