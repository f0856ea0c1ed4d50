// Raw slice kernels shared by the tape's forward and backward passes.

/// Storage layout of a matrix operand of `gemm`.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Stored row-major with the logical shape.
    Plain,
    /// Stored row-major as the transpose of the logical shape.
    Transposed,
}

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match la {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Swaps the last two axes of a tensor with `batch` leading matrices of `rows×cols`.
pub(crate) fn transpose_last2(data: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = rows * cols;
    for b in 0..batch {
        let src = &data[b * block..(b + 1) * block];
        let dst = &mut out[b * block..(b + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Vector-Jacobian product of a row softmax given its output `y`.
pub(crate) fn softmax_rows_backward(y: &[f64], gy: &[f64], width: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y.chunks(width).zip(gy.chunks(width)).zip(gx.chunks_mut(width)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

/// `log(1 / (1 + exp(-x)))` evaluated without overflow.
pub(crate) fn logsigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-pairwise cosine similarity of two `n×d` matrices; zero rows give 0.
pub(crate) fn cosine_pairwise(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let na: Vec<f64> = a.chunks(d).map(norm).collect();
    let nb: Vec<f64> = b.chunks(d).map(norm).collect();
    let mut out = vec![0.0; n * n];
    gemm(n, d, n, a, Layout::Plain, b, Layout::Transposed, 0.0, &mut out);
    for i in 0..n {
        for j in 0..n {
            let denom = na[i] * nb[j];
            out[i * n + j] = if denom > 0.0 {
                (out[i * n + j] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Row-pairwise euclidean distance of two `n×d` matrices.
pub(crate) fn euclidean_pairwise(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &b[j * d..(j + 1) * d];
            out[i * n + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    out
}

/// Same-length depthwise convolution of `x` (`n×d`) with per-channel weights
/// `w` (`k×d`, already normalized), zero-padded by `(k-1)/2` on both ends.
pub(crate) fn depthwise_conv(x: &[f64], w: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let row = &mut out[t * d..(t + 1) * d];
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= n {
                continue;
            }
            let xs = &x[(src - pad) * d..(src - pad + 1) * d];
            let ws = &w[j * d..(j + 1) * d];
            for ((o, xv), wv) in row.iter_mut().zip(xs).zip(ws) {
                *o += wv * xv;
            }
        }
    }
    out
}

/// Column-wise softmax of a `k×d` matrix (normalizes each channel's taps).
pub(crate) fn softmax_cols(w: &[f64], k: usize, d: usize) -> Vec<f64> {
    let transposed = transpose_last2(w, 1, k, d);
    let soft = softmax_rows(&transposed, k);
    transpose_last2(&soft, 1, d, k)
}
