//! Token-uniformity diagnostics over final-layer representations.

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{encode, Model, ModelError};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("matrix has zero Frobenius norm")]
    ZeroMatrix,
    #[error("models do not share one configuration")]
    ConfigMismatch,
    #[error("no sequences to evaluate")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = x.dims2().map_err(|_| MetricsError::NotMatrix(x.shape().to_vec()))?;
    if n < 2 {
        return Err(MetricsError::TooFewRows(n));
    }
    Ok((n, d))
}

/// Mean of `cos(xᵢ, xⱼ)` over all `i < j`; pairs with a zero row count as 0.
pub fn mean_pairwise_cosine(x: &Tensor) -> Result<f64> {
    let (n, d) = rows(x)?;
    let data = x.data();
    let norms: Vec<f64> = (0..n).map(|i| kernels::norm(&data[i * d..(i + 1) * d])).collect();
    if norms.contains(&0.0) {
        debug!("zero rows present; their pairs contribute 0 similarity");
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                sum += kernels::dot(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]) / (norms[i] * norms[j]);
            }
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `‖X − 1·x̄ᵀ‖_F / ‖X‖_F` with `x̄` the column mean of `X`.
pub fn relative_residual_norm(x: &Tensor) -> Result<f64> {
    let (n, d) = rows(x)?;
    let total = x.frobenius_norm();
    if total == 0.0 {
        return Err(MetricsError::ZeroMatrix);
    }
    let data = x.data();
    let mut mean = vec![0.0; d];
    for r in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let residual: f64 = data
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
        .sum();
    Ok(residual.sqrt() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityRow {
    pub model: String,
    pub cosine: f64,
    pub residual: f64,
}

/// Runs every model over the same sequences and averages both metrics of the
/// final-layer representation over sequences.
pub fn uniformity_report(models: &[(String, &Model)], seqs: &[Vec<usize>]) -> Result<Vec<UniformityRow>> {
    if seqs.is_empty() {
        return Err(MetricsError::NoData);
    }
    if let Some((_, first)) = models.first() {
        if models.iter().any(|(_, m)| m.config() != first.config()) {
            return Err(MetricsError::ConfigMismatch);
        }
    }
    let mut out = Vec::with_capacity(models.len());
    for (name, model) in models {
        let reps = encode(model, seqs)?;
        let mut cosine = 0.0;
        let mut residual = 0.0;
        for r in &reps {
            cosine += mean_pairwise_cosine(r)?;
            residual += relative_residual_norm(r)?;
        }
        out.push(UniformityRow {
            model: name.clone(),
            cosine: cosine / reps.len() as f64,
            residual: residual / reps.len() as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((mean_pairwise_cosine(&x).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_residual_norm(&x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_and_zero_mean() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_pairwise_cosine(&x).unwrap(), 0.0);
        let y = Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert!((relative_residual_norm(&y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(mean_pairwise_cosine(&one), Err(MetricsError::TooFewRows(1))));
        assert!(matches!(relative_residual_norm(&Tensor::zeros(&[3, 2])), Err(MetricsError::ZeroMatrix)));
    }
}
