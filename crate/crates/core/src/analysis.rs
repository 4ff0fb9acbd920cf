//! Representation diagnostics: linear CKA and class similarity matrices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::losses::cosine_rows;
use crate::math::sqrt;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Features with aligned labels and a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub source: String,
}

impl FeatureDump {
    pub fn new(features: Matrix, labels: Vec<usize>, source: String) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::contract(
                "FeatureDump::new",
                format!("{} rows for {} labels", features.rows(), labels.len()),
            ));
        }
        if !features.is_finite() {
            return Err(Error::contract("FeatureDump::new", "non-finite feature"));
        }
        Ok(Self { features, labels, source })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

fn center_columns(x: &Matrix) -> Matrix {
    let (m, p) = x.shape();
    let mut means = vec![0.0; p];
    for r in x.iter_rows() {
        means.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    means.iter_mut().for_each(|a| *a /= m as f64);
    let mut out = x.clone();
    for i in 0..m {
        out.row_mut(i).iter_mut().zip(&means).for_each(|(v, mu)| *v -= mu);
    }
    out
}

fn frobenius_sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two representations of the
/// same `M` examples:
/// `|Yc^T Xc|_F^2 / (|Xc^T Xc|_F * |Yc^T Yc|_F)`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    const OP: &str = "linear_cka";
    if x.rows() != y.rows() {
        return Err(Error::contract(OP, format!("{} rows vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 3 {
        return Err(Error::contract(OP, format!("need at least 3 rows, got {}", x.rows())));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    if frobenius_sq(&xc) == 0.0 || frobenius_sq(&yc) == 0.0 {
        return Err(Error::degenerate(OP, "zero-variance input (all rows identical)"));
    }
    let xt = xc.transpose();
    let yt = yc.transpose();
    let cross = frobenius_sq(&yt.matmul(&xc)?);
    let xx = sqrt(frobenius_sq(&xt.matmul(&xc)?));
    let yy = sqrt(frobenius_sq(&yt.matmul(&yc)?));
    Ok(cross / (xx * yy))
}

/// Per-class mean feature vectors, `(N, D)`.
pub fn class_means(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (r, &l) in features.iter_rows().zip(labels) {
        if l >= num_classes {
            return Err(Error::contract("class_means", format!("label {l} with {num_classes} classes")));
        }
        counts[l] += 1;
        sums.row_mut(l).iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract("similarity_matrix", format!("class {c} has no rows")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Cosine similarity between class-mean features, `(N, N)`.
pub fn similarity_matrix(dump: &FeatureDump, num_classes: usize) -> Result<Matrix> {
    let means = class_means(&dump.features, &dump.labels, num_classes)?;
    cosine_rows(&means, &means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cka_rejects_constant_input() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap();
        assert!(matches!(linear_cka(&x, &y), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn cka_rejects_row_mismatch() {
        let x = Matrix::zeros(4, 2);
        let y = Matrix::zeros(3, 2);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Contract { .. })));
    }

    #[test]
    fn similarity_orthogonal_and_duplicate_classes() {
        let f = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 2.0]]).unwrap();
        let dump = FeatureDump::new(f, vec![0, 1, 2], "t".into()).unwrap();
        let s = similarity_matrix(&dump, 3).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(1, 2) - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_requires_every_class() {
        let f = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let dump = FeatureDump::new(f, vec![0], "t".into()).unwrap();
        assert!(similarity_matrix(&dump, 2).is_err());
    }
}
