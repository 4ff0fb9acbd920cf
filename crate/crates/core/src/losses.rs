//! Loss terms for both distillation stages.
//!
//! Every loss returns its value together with the gradient with respect to
//! the *student-side* argument. Teacher-side arguments are constant targets:
//! no gradient is produced for them, so nothing can flow back into a frozen
//! model by construction.
//!
//! All batch losses average over the batch so their magnitude does not
//! depend on batch size.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, exp, log_softmax_scaled, norm};
use crate::tensor::{FeatureBatch, FeatureMap, LogitBatch, Matrix};
use crate::{Error, Result};

/// Softmax temperature. Strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: f64 = 2.0;

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!("temperature must be > 0, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

/// Which distribution sits in the first slot of `KL(P || Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlOrder {
    /// `KL(student || teacher)`.
    #[default]
    AsPrinted,
    /// `KL(teacher || student)`, the usual Hinton orientation.
    TeacherFirst,
}

/// Per-class text embeddings after projection. Row `c` belongs to class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchors {
    values: Matrix,
    class_names: Vec<String>,
}

impl ClassAnchors {
    pub fn new(values: Matrix, class_names: Vec<String>) -> Result<Self> {
        if values.rows() != class_names.len() {
            return Err(Error::contract(
                "ClassAnchors::new",
                format!("{} rows for {} class names", values.rows(), class_names.len()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::contract("ClassAnchors::new", "non-finite anchor entry"));
        }
        if let Some(c) = values.iter_rows().position(|r| norm(r) == 0.0) {
            return Err(Error::degenerate("ClassAnchors::new", format!("anchor row {c} has zero norm")));
        }
        Ok(Self { values, class_names })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }
}

/// A scalar loss and its gradient with respect to the student-side input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::contract(op, format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(op, "non-finite input"))
    }
}

/// Pairwise cosine similarity between rows of `a` and rows of `b`.
pub fn cosine_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    const OP: &str = "cosine_matrix";
    if a.cols() != b.cols() {
        return Err(Error::contract(OP, format!("feature dim {} vs anchor dim {}", a.cols(), b.cols())));
    }
    let a_norms = row_norms(OP, a, "feature")?;
    let b_norms = row_norms(OP, b, "anchor")?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for c in 0..b.rows() {
            out.set(i, c, dot(a.row(i), b.row(c)) / (a_norms[i] * b_norms[c]));
        }
    }
    Ok(out)
}

fn row_norms(op: &'static str, m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::degenerate(op, format!("{what} row {i} has zero or non-finite norm")))
            }
        })
        .collect()
}

/// Cosine similarity of each feature row against each class anchor, `(B, N)`.
pub fn cosine_matrix(features: &FeatureBatch, anchors: &ClassAnchors) -> Result<Matrix> {
    cosine_rows(features, anchors.values())
}

/// Back-propagate `grad_cos` (shape of `cosine_rows(a, b)`) to both inputs.
///
/// `d cos(a_i, b_c) / d a_i = (b_c / |b_c| - cos_ic * a_i / |a_i|) / |a_i|`.
pub fn cosine_rows_backward(a: &Matrix, b: &Matrix, cos: &Matrix, grad_cos: &Matrix) -> (Matrix, Matrix) {
    let a_norms: Vec<f64> = a.iter_rows().map(norm).collect();
    let b_norms: Vec<f64> = b.iter_rows().map(norm).collect();
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for c in 0..b.rows() {
            let g = grad_cos.get(i, c);
            if g == 0.0 {
                continue;
            }
            let cs = cos.get(i, c);
            let (na, nb) = (a_norms[i], b_norms[c]);
            let (ar, br) = (a.row(i), b.row(c));
            for (d, o) in ga.row_mut(i).iter_mut().enumerate() {
                *o += g * (br[d] / nb - cs * ar[d] / na) / na;
            }
            for (d, o) in gb.row_mut(c).iter_mut().enumerate() {
                *o += g * (ar[d] / na - cs * br[d] / nb) / nb;
            }
        }
    }
    (ga, gb)
}

/// `T^2 * mean_i KL(.)` between row-wise tempered softmaxes of `student`
/// and `teacher`, with the gradient for `student`.
fn tempered_kl(
    op: &'static str,
    student: &Matrix,
    teacher: &Matrix,
    temperature: Temperature,
    order: KlOrder,
) -> Result<LossGrad<Matrix>> {
    check_same(op, student.shape(), teacher.shape())?;
    check_finite(op, student)?;
    check_finite(op, teacher)?;
    let t = temperature.value();
    let (rows, cols) = student.shape();
    let mut grad = Matrix::zeros(rows, cols);
    if rows == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut ls = vec![0.0; cols];
    let mut lt = vec![0.0; cols];
    let mut total = 0.0;
    let scale = t * t / rows as f64;
    for i in 0..rows {
        log_softmax_scaled(student.row(i), t, &mut ls);
        log_softmax_scaled(teacher.row(i), t, &mut lt);
        let g = grad.row_mut(i);
        match order {
            KlOrder::AsPrinted => {
                // KL(p || q) with p the student; d/dz_j = p_j (log p_j - log q_j - KL) / T
                let kl: f64 = ls.iter().zip(&lt).map(|(&a, &b)| exp(a) * (a - b)).sum();
                total += kl;
                for j in 0..cols {
                    g[j] = scale / t * exp(ls[j]) * (ls[j] - lt[j] - kl);
                }
            }
            KlOrder::TeacherFirst => {
                // KL(q || p); d/dz_j = (p_j - q_j) / T
                let kl: f64 = lt.iter().zip(&ls).map(|(&a, &b)| exp(a) * (a - b)).sum();
                total += kl;
                for j in 0..cols {
                    g[j] = scale / t * (exp(ls[j]) - exp(lt[j]));
                }
            }
        }
    }
    // KL is non-negative; clamp away rounding noise at identity.
    let value = (scale * total).max(0.0);
    Ok(LossGrad { value, grad })
}

/// Semantic alignment: tempered KL between the class-similarity profiles of
/// student and teacher image features against the text anchors.
pub fn sia_loss(
    cos_student: &Matrix,
    cos_teacher: &Matrix,
    temperature: Temperature,
    order: KlOrder,
) -> Result<LossGrad<Matrix>> {
    tempered_kl("sia_loss", cos_student, cos_teacher, temperature, order)
}

/// Classic temperature-scaled logit distillation.
pub fn logit_kd_loss(
    student: &LogitBatch,
    teacher: &LogitBatch,
    temperature: Temperature,
    order: KlOrder,
) -> Result<LossGrad<Matrix>> {
    tempered_kl("logit_kd_loss", student, teacher, temperature, order)
}

/// Mean absolute difference between student and teacher embeddings.
pub fn ira_loss(student: &FeatureBatch, teacher: &FeatureBatch) -> Result<LossGrad<Matrix>> {
    const OP: &str = "ira_loss";
    check_same(OP, student.shape(), teacher.shape())?;
    check_finite(OP, student)?;
    check_finite(OP, teacher)?;
    let n = (student.rows() * student.cols()).max(1) as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut sum = 0.0;
    for ((g, &s), &t) in grad.as_mut_slice().iter_mut().zip(student.as_slice()).zip(teacher.as_slice()) {
        let d = s - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossGrad { value: sum / n, grad })
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn cls_loss(logits: &LogitBatch, labels: &[usize]) -> Result<LossGrad<Matrix>> {
    const OP: &str = "cls_loss";
    let (rows, cols) = logits.shape();
    if labels.len() != rows {
        return Err(Error::contract(OP, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::contract(OP, format!("label {bad} out of range for {cols} classes")));
    }
    check_finite(OP, logits)?;
    let mut grad = Matrix::zeros(rows, cols);
    if rows == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut lp = vec![0.0; cols];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        log_softmax_scaled(logits.row(i), 1.0, &mut lp);
        total -= lp[y];
        let g = grad.row_mut(i);
        for j in 0..cols {
            g[j] = (exp(lp[j]) - if j == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    Ok(LossGrad { value: total / rows as f64, grad })
}

/// Spatial alignment: squared L2 over channels at each site, averaged over
/// the `H x W` grid and then over the batch. No division by channel count.
pub fn sra_loss(student: &FeatureMap, teacher: &FeatureMap) -> Result<LossGrad<FeatureMap>> {
    const OP: &str = "sra_loss";
    if student.dims() != teacher.dims() {
        return Err(Error::contract(OP, format!("shape {:?} vs {:?}", student.dims(), teacher.dims())));
    }
    if !student.is_finite() || !teacher.is_finite() {
        return Err(Error::contract(OP, "non-finite input"));
    }
    let [b, c, h, w] = student.dims();
    let denom = (b * h * w).max(1) as f64;
    let mut grad = FeatureMap::zeros(b, c, h, w);
    let mut sum = 0.0;
    for ((g, &s), &t) in grad.as_mut_slice().iter_mut().zip(student.as_slice()).zip(teacher.as_slice()) {
        let d = s - t;
        sum += d * d;
        *g = 2.0 * d / denom;
    }
    Ok(LossGrad { value: sum / denom, grad })
}

fn check_lambda(op: &'static str, lam: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lam) {
        Ok(())
    } else {
        Err(Error::contract(op, format!("lambda {lam} outside [0, 1]")))
    }
}

/// Coefficients of the stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Weights {
    pub cls: f64,
    pub sia: f64,
    pub ira: f64,
}

impl Stage1Weights {
    pub fn new(lam: f64) -> Result<Self> {
        check_lambda("stage1_total", lam)?;
        let half = (1.0 - lam) / 2.0;
        Ok(Self { cls: lam, sia: half, ira: half })
    }

    pub fn sum(&self) -> f64 {
        self.cls + self.sia + self.ira
    }
}

/// Coefficients of the stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub cls: f64,
    pub distill: f64,
}

impl Stage2Weights {
    pub fn new(lam: f64) -> Result<Self> {
        check_lambda("stage2_total", lam)?;
        Ok(Self { cls: lam, distill: 1.0 - lam })
    }

    pub fn sum(&self) -> f64 {
        self.cls + self.distill
    }
}

/// `lam * cls + (1 - lam)/2 * (sia + ira)`.
pub fn stage1_total(sia: f64, ira: f64, cls: f64, lam: f64) -> Result<f64> {
    let w = Stage1Weights::new(lam)?;
    Ok(w.cls * cls + w.sia * sia + w.ira * ira)
}

/// `lam * cls + (1 - lam) * distill`.
pub fn stage2_total(distill: f64, cls: f64, lam: f64) -> Result<f64> {
    let w = Stage2Weights::new(lam)?;
    Ok(w.cls * cls + w.distill * distill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn anchors(rows: &[&[f64]]) -> ClassAnchors {
        let names = (0..rows.len()).map(|i| i.to_string()).collect();
        ClassAnchors::new(m(rows), names).unwrap()
    }

    #[test]
    fn cosine_orthonormal_basis() {
        let c = cosine_matrix(&m(&[&[1.0, 0.0]]), &anchors(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let c = cosine_matrix(&m(&[&[2.0, 0.0]]), &anchors(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(c.as_slice(), &[1.0]);
    }

    #[test]
    fn cosine_diagonal_feature() {
        let c = cosine_matrix(&m(&[&[1.0, 1.0]]), &anchors(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        for v in c.as_slice() {
            assert!((v - 0.7071).abs() < 1e-4);
        }
    }

    #[test]
    fn cosine_rejects_zero_feature_row() {
        let err = cosine_matrix(&m(&[&[1.0, 0.0], &[0.0, 0.0]]), &anchors(&[&[1.0, 0.0]])).unwrap_err();
        match err {
            Error::Degenerate { detail, .. } => assert!(detail.contains("row 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn anchors_reject_zero_row() {
        let err = ClassAnchors::new(m(&[&[0.0, 0.0]]), alloc::vec!["a".into()]).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }

    #[test]
    fn sia_zero_at_identity() {
        let c = m(&[&[0.3, -0.2, 0.9], &[0.0, 0.5, 0.5]]);
        for order in [KlOrder::AsPrinted, KlOrder::TeacherFirst] {
            let l = sia_loss(&c, &c, Temperature::default(), order).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn sia_opposed_rows() {
        // p = softmax([1, 0]), q = softmax([0, 1]); KL = (p0 - p1) * ln(p0/p1) = tanh(1/2)
        let l = sia_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), Temperature::new(1.0).unwrap(), KlOrder::AsPrinted)
            .unwrap();
        assert!((l.value - 0.462_117).abs() < 1e-3, "{}", l.value);
    }

    #[test]
    fn sia_rejects_shape_mismatch() {
        let e = sia_loss(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0, 0.0]]), Temperature::default(), KlOrder::AsPrinted);
        assert!(matches!(e, Err(Error::Contract { .. })));
    }

    #[test]
    fn ira_hand_value() {
        let l = ira_loss(&m(&[&[1.0, 2.0]]), &m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(l.value, 1.5);
    }

    #[test]
    fn cls_saturated_and_uniform() {
        let l = cls_loss(&m(&[&[1e3, -1e3]]), &[0]).unwrap();
        assert!(l.value.abs() < 1e-12);
        let l = cls_loss(&m(&[&[0.0; 4]]), &[2]).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        let l = cls_loss(&m(&[&[2.0, 0.0]]), &[1]).unwrap();
        assert!((l.value - 2.1269).abs() < 1e-3);
    }

    #[test]
    fn cls_rejects_bad_label() {
        assert!(matches!(cls_loss(&m(&[&[0.0, 0.0]]), &[2]), Err(Error::Contract { .. })));
    }

    #[test]
    fn sra_hand_value() {
        let s = FeatureMap::from_vec([1, 2, 1, 1], alloc::vec![3.0, 4.0]).unwrap();
        let t = FeatureMap::zeros(1, 2, 1, 1);
        assert_eq!(sra_loss(&s, &t).unwrap().value, 25.0);
        assert_eq!(sra_loss(&s, &s).unwrap().value, 0.0);
    }

    #[test]
    fn sra_rejects_shape_mismatch() {
        let s = FeatureMap::zeros(1, 2, 2, 2);
        let t = FeatureMap::zeros(1, 2, 1, 1);
        assert!(sra_loss(&s, &t).is_err());
    }

    #[test]
    fn totals() {
        assert_eq!(stage1_total(7.0, 9.0, 0.5, 1.0).unwrap(), 0.5);
        assert_eq!(stage1_total(2.0, 4.0, 99.0, 0.0).unwrap(), 3.0);
        assert_eq!(stage1_total(2.0, 4.0, 6.0, 0.5).unwrap(), 4.5);
        assert_eq!(stage2_total(5.0, 0.2, 1.0).unwrap(), 0.2);
        assert_eq!(stage2_total(5.0, 0.2, 0.0).unwrap(), 5.0);
        assert_eq!(stage2_total(4.0, 8.0, 0.25).unwrap(), 5.0);
        assert!(stage1_total(1.0, 1.0, 1.0, 1.5).is_err());
        assert!(stage2_total(1.0, 1.0, -0.1).is_err());
    }
}
