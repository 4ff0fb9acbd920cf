//! Criterion-level suites shared by the core tests and the acceptance
//! target. Each panics with a descriptive message on the first failure.

use super::*;
use dait_core::losses::{
    cls_loss, cosine_rows, cosine_rows_backward, ira_loss, logit_kd_loss, sia_loss, sra_loss, stage1_total,
    stage2_total, Stage1Weights, Stage2Weights,
};
use dait_core::analysis::linear_cka;
use dait_core::rng::uniform;
use dait_core::{KlOrder, ScheduleParams, Temperature};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub const LOSS_CASES: usize = 60;
pub const LOSS_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
pub const SCHEDULE_CASES: u32 = 1000;

fn check(name: &str, case: usize, got: f64, want: f64) {
    let e = rel_err(got, want);
    assert!(e <= LOSS_TOL, "{name} case {case}: got {got}, oracle {want}, rel err {e:e}");
}

/// Every loss against its brute-force oracle on random small inputs, plus
/// exact zeros at identity.
pub fn loss_oracles() {
    let mut r = rng(0x1055);
    for case in 0..LOSS_CASES {
        let b = 1 + case % 4;
        let n = 2 + case % 5;
        let d = 1 + case % 8;
        let t = Temperature::new(uniform(&mut r, 0.5, 4.0)).unwrap();

        let s = random_matrix(&mut r, b, n);
        let q = random_matrix(&mut r, b, n);
        let want = tempered_kl(&s, &q, t.value());
        check("sia_loss", case, sia_loss(&s, &q, t, KlOrder::AsPrinted).unwrap().value, want);
        check("logit_kd_loss", case, logit_kd_loss(&s, &q, t, KlOrder::AsPrinted).unwrap().value, want);
        let swapped = tempered_kl(&q, &s, t.value());
        check("sia_loss teacher_first", case, sia_loss(&s, &q, t, KlOrder::TeacherFirst).unwrap().value, swapped);

        let zs = random_matrix(&mut r, b, d);
        let zv = random_matrix(&mut r, b, d);
        check("ira_loss", case, ira_loss(&zs, &zv).unwrap().value, mean_abs_diff(&zs, &zv));

        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + case) % n).collect();
        check("cls_loss", case, cls_loss(&s, &labels).unwrap().value, cross_entropy(&s, &labels));

        let hw = 1 + case % 3;
        let ms = random_map(&mut r, [b, d, hw, hw + case % 2]);
        let mt = random_map(&mut r, [b, d, hw, hw + case % 2]);
        check("sra_loss", case, sra_loss(&ms, &mt).unwrap().value, spatial_sq_l2(&ms, &mt));

        let f = random_matrix(&mut r, b, d);
        let a = random_matrix(&mut r, n, d);
        let got = cosine_rows(&f, &a).unwrap();
        let want = cosine_table(&f, &a);
        for i in 0..b {
            for c in 0..n {
                assert!((got.get(i, c) - want[i][c]).abs() <= LOSS_TOL, "cosine case {case} ({i},{c})");
            }
        }

        for order in [KlOrder::AsPrinted, KlOrder::TeacherFirst] {
            assert_eq!(sia_loss(&s, &s, t, order).unwrap().value, 0.0, "sia identity case {case}");
            assert_eq!(logit_kd_loss(&q, &q, t, order).unwrap().value, 0.0, "kd identity case {case}");
        }
        assert_eq!(ira_loss(&zs, &zs).unwrap().value, 0.0, "ira identity case {case}");
        assert_eq!(sra_loss(&ms, &ms).unwrap().value, 0.0, "sra identity case {case}");
    }
}

fn assert_grad(name: &str, case: usize, analytic: &[f64], numeric: &[f64]) {
    let e = vector_rel_err(analytic, numeric);
    assert!(e <= FD_TOL, "{name} case {case}: gradient rel err {e:e}");
}

fn matrix_from(rows: usize, cols: usize, v: &[f64]) -> dait_core::Matrix {
    dait_core::Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
}

/// Analytic student-side gradients of every loss against central
/// differences. Loss results carry no teacher-side gradient at all; the
/// teacher input still moves the value.
pub fn gradients() {
    let mut r = rng(0x6ead);
    for case in 0..40 {
        let b = 1 + case % 4;
        let n = 2 + case % 4;
        let d = 1 + case % 8;
        let t = Temperature::new(uniform(&mut r, 0.5, 3.0)).unwrap();

        let s = random_matrix(&mut r, b, n);
        let q = random_matrix(&mut r, b, n);
        for order in [KlOrder::AsPrinted, KlOrder::TeacherFirst] {
            let g = sia_loss(&s, &q, t, order).unwrap().grad;
            let num = numeric_grad(s.as_slice(), FD_STEP, &mut |x| {
                sia_loss(&matrix_from(b, n, x), &q, t, order).unwrap().value
            });
            assert_grad("sia_loss", case, g.as_slice(), &num);
            let g = logit_kd_loss(&s, &q, t, order).unwrap().grad;
            let num = numeric_grad(s.as_slice(), FD_STEP, &mut |x| {
                logit_kd_loss(&matrix_from(b, n, x), &q, t, order).unwrap().value
            });
            assert_grad("logit_kd_loss", case, g.as_slice(), &num);
        }

        let labels: Vec<usize> = (0..b).map(|i| (i + case) % n).collect();
        let g = cls_loss(&s, &labels).unwrap().grad;
        let num = numeric_grad(s.as_slice(), FD_STEP, &mut |x| cls_loss(&matrix_from(b, n, x), &labels).unwrap().value);
        assert_grad("cls_loss", case, g.as_slice(), &num);

        let zs = random_matrix(&mut r, b, d);
        let zv = random_matrix(&mut r, b, d);
        let g = ira_loss(&zs, &zv).unwrap().grad;
        let num = numeric_grad(zs.as_slice(), FD_STEP, &mut |x| ira_loss(&matrix_from(b, d, x), &zv).unwrap().value);
        assert_grad("ira_loss", case, g.as_slice(), &num);

        let hw = 1 + case % 3;
        let dims = [b, d, hw, hw];
        let ms = random_map(&mut r, dims);
        let mt = random_map(&mut r, dims);
        let g = sra_loss(&ms, &mt).unwrap().grad;
        let num = numeric_grad(ms.as_slice(), FD_STEP, &mut |x| {
            sra_loss(&dait_core::FeatureMap::from_vec(dims, x.to_vec()).unwrap(), &mt).unwrap().value
        });
        assert_grad("sra_loss", case, g.as_slice(), &num);

        // Semantic alignment through the cosine layer, as used in training.
        let f = random_matrix(&mut r, b, d.max(2));
        let anchors = random_matrix(&mut r, n, d.max(2));
        let cos_t = random_matrix(&mut r, b, n);
        let through = |x: &[f64]| {
            let cs = cosine_rows(&matrix_from(b, d.max(2), x), &anchors).unwrap();
            sia_loss(&cs, &cos_t, t, KlOrder::AsPrinted).unwrap().value
        };
        let cs = cosine_rows(&f, &anchors).unwrap();
        let gcos = sia_loss(&cs, &cos_t, t, KlOrder::AsPrinted).unwrap().grad;
        let (gf, _) = cosine_rows_backward(&f, &anchors, &cs, &gcos);
        let num = numeric_grad(f.as_slice(), FD_STEP, &mut |x| through(x));
        assert_grad("sia through cosine", case, gf.as_slice(), &num);

        // Teacher side: the value depends on it, but no gradient is produced
        // for it and the student gradient keeps the student's shape.
        let mut q2 = q.clone();
        q2.as_mut_slice()[0] += 0.5;
        let a = sia_loss(&s, &q, t, KlOrder::AsPrinted).unwrap();
        let c = sia_loss(&s, &q2, t, KlOrder::AsPrinted).unwrap();
        assert_ne!(a.value, c.value, "teacher input must affect the value");
        assert_eq!(a.grad.shape(), s.shape());
        let mut mt2 = mt.clone();
        mt2.as_mut_slice()[0] += 0.5;
        assert_ne!(sra_loss(&ms, &mt).unwrap().value, sra_loss(&ms, &mt2).unwrap().value);
        assert_eq!(sra_loss(&ms, &mt).unwrap().grad.dims(), ms.dims());
    }
}

/// Clamping, monotonicity, constancy at `k = 0` and the epoch-0 anchor.
pub fn schedule() {
    let mut runner = TestRunner::new(Config { cases: SCHEDULE_CASES, failure_persistence: None, ..Config::default() });
    let strategy = (-1.0f64..1.0, -2.0f64..3.0, 0usize..500, 0.0f64..0.5, 0.5f64..1.0);
    runner
        .run(&strategy, |(k, b, e, lo, hi)| {
            let clamped = ScheduleParams::with_clamp(k, b, lo, hi).unwrap();
            let l = clamped.lambda_at(e);
            prop_assert!(lo <= l && l <= hi);

            let unit = ScheduleParams::new(k.abs(), b);
            let (l0, l1) = (unit.lambda_at(e), unit.lambda_at(e + 1));
            prop_assert!(l1 >= l0, "non-monotone: {l0} -> {l1}");
            prop_assert!((0.0..=1.0).contains(&l0));

            let flat = ScheduleParams::new(0.0, b);
            prop_assert_eq!(flat.lambda_at(e), flat.lambda_at(0));

            let anchor_b = b.rem_euclid(1.0);
            prop_assert_eq!(ScheduleParams::new(k, anchor_b).lambda_at(0), anchor_b);
            Ok(())
        })
        .unwrap_or_else(|e| panic!("schedule property failed: {e}"));
}

/// Coefficients of both objectives sum to one on a 100-point grid, and the
/// totals equal the weighted sums.
pub fn weight_conservation() {
    for i in 0..100 {
        let lam = i as f64 / 99.0;
        let w1 = Stage1Weights::new(lam).unwrap();
        let w2 = Stage2Weights::new(lam).unwrap();
        assert!((w1.sum() - 1.0).abs() <= 1e-12, "stage1 weights sum {} at {lam}", w1.sum());
        assert!((w2.sum() - 1.0).abs() <= 1e-12, "stage2 weights sum {} at {lam}", w2.sum());
        assert!((stage1_total(1.0, 1.0, 1.0, lam).unwrap() - 1.0).abs() <= 1e-12);
        assert!((stage2_total(1.0, 1.0, lam).unwrap() - 1.0).abs() <= 1e-12);
    }
}

/// Random orthogonal matrix via Gram-Schmidt on Gaussian rows.
fn orthogonal(r: &mut SeededRng, n: usize) -> Matrix {
    let g = random_matrix(r, n, n);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / norm).collect());
    }
    let refs: Vec<&[f64]> = q.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&refs).unwrap()
}

/// Linear CKA: self-similarity, invariance to rotation and isotropic
/// scaling, and agreement with the Gram-matrix HSIC oracle.
pub fn cka() {
    let mut r = rng(21);
    for case in 0..20 {
        let x = random_matrix(&mut r, 12, 5);
        let own = linear_cka(&x, &x).unwrap();
        assert!((own - 1.0).abs() <= 1e-6, "self-similarity case {case}: {own}");
        let rot = orthogonal(&mut r, 5);
        let alpha = uniform(&mut r, 0.1, 10.0);
        let y = x.matmul(&rot).unwrap().scale(alpha);
        let inv = linear_cka(&x, &y).unwrap();
        assert!((inv - 1.0).abs() <= 1e-6, "invariance case {case}: {inv}");
    }
    let mut r = rng(22);
    for case in 0..20 {
        let mut int = |cols: usize| {
            let data = (0..5 * cols).map(|_| uniform(&mut r, -5.0, 5.0).round()).collect();
            Matrix::from_vec(5, cols, data).unwrap()
        };
        let (x, y) = (int(2), int(3));
        let (got, want) = (linear_cka(&x, &y).unwrap(), cka_via_hsic(&x, &y));
        assert!((got - want).abs() <= 1e-8, "hsic case {case}: {got} vs {want}");
        let (x, y) = (random_matrix(&mut r, 6, 3), random_matrix(&mut r, 6, 4));
        let (got, want) = (linear_cka(&x, &y).unwrap(), cka_via_hsic(&x, &y));
        assert!((got - want).abs() <= 1e-8, "hsic gaussian case {case}: {got} vs {want}");
    }
}
