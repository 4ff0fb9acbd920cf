mod oracles;

use dait_core::losses::{cls_loss, cosine_rows, ira_loss, logit_kd_loss, sia_loss, sra_loss, stage1_total, stage2_total};
use dait_core::{FeatureMap, KlOrder, Matrix, Temperature};
use oracles::criteria;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

#[test]
fn losses_match_brute_force_oracles() {
    criteria::loss_oracles();
}

#[test]
fn gradients_match_central_differences() {
    criteria::gradients();
}

#[test]
fn opposed_similarity_rows() {
    let t1 = Temperature::new(1.0).unwrap();
    let v = sia_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), t1, KlOrder::AsPrinted).unwrap().value;
    let oracle = oracles::tempered_kl(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), 1.0);
    assert!((v - oracle).abs() < 1e-12);
    assert!((v - 0.4621).abs() < 1e-3, "{v}");

    let t2 = Temperature::new(2.0).unwrap();
    let v2 = sia_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]]), t2, KlOrder::AsPrinted).unwrap().value;
    let inner = oracles::tempered_kl(&m(&[&[0.5, 0.0]]), &m(&[&[0.0, 0.5]]), 1.0);
    assert!((v2 - 4.0 * inner).abs() < 1e-12);
}

#[test]
fn hand_values() {
    assert_eq!(ira_loss(&m(&[&[1.0, 2.0]]), &m(&[&[0.0, 0.0]])).unwrap().value, 1.5);
    assert!(cls_loss(&m(&[&[1e3, -1e3]]), &[0]).unwrap().value < 1e-12);
    assert!((cls_loss(&m(&[&[0.3; 4]]), &[2]).unwrap().value - 4f64.ln()).abs() < 1e-12);
    assert!((cls_loss(&m(&[&[2.0, 0.0]]), &[1]).unwrap().value - 2.1269).abs() < 1e-3);
    let s = FeatureMap::from_vec([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
    let t = FeatureMap::zeros(1, 2, 1, 1);
    assert_eq!(sra_loss(&s, &t).unwrap().value, 25.0);
    let c = cosine_rows(&m(&[&[1.0, 1.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert!((c.get(0, 0) - 0.7071).abs() < 1e-4 && (c.get(0, 1) - 0.7071).abs() < 1e-4);
}

#[test]
fn default_temperature_is_two() {
    assert_eq!(Temperature::default().value(), 2.0);
    assert!(Temperature::new(0.0).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let t = Temperature::default();
    let a = m(&[&[1.0, 0.0]]);
    let b = m(&[&[1.0, 0.0, 0.0]]);
    assert!(sia_loss(&a, &b, t, KlOrder::AsPrinted).is_err());
    assert!(logit_kd_loss(&a, &b, t, KlOrder::AsPrinted).is_err());
    assert!(ira_loss(&a, &b).is_err());
    assert!(sra_loss(&FeatureMap::zeros(1, 2, 2, 2), &FeatureMap::zeros(1, 3, 2, 2)).is_err());
}

#[test]
fn objective_hand_values() {
    assert_eq!(stage1_total(7.0, 9.0, 0.5, 1.0).unwrap(), 0.5);
    assert_eq!(stage1_total(2.0, 4.0, 99.0, 0.0).unwrap(), 3.0);
    assert_eq!(stage1_total(2.0, 4.0, 6.0, 0.5).unwrap(), 4.5);
    assert_eq!(stage2_total(5.0, 0.2, 1.0).unwrap(), 0.2);
    assert_eq!(stage2_total(5.0, 0.2, 0.0).unwrap(), 5.0);
    assert_eq!(stage2_total(4.0, 8.0, 0.25).unwrap(), 5.0);
    assert!(stage1_total(1.0, 1.0, 1.0, 1.5).is_err());
    assert!(stage2_total(1.0, 1.0, -0.1).is_err());
}

#[test]
fn losses_are_non_negative() {
    let mut r = oracles::rng(3);
    let t = Temperature::default();
    for _ in 0..50 {
        let a = oracles::random_matrix(&mut r, 3, 4);
        let b = oracles::random_matrix(&mut r, 3, 4);
        for order in [KlOrder::AsPrinted, KlOrder::TeacherFirst] {
            assert!(sia_loss(&a, &b, t, order).unwrap().value >= 0.0);
        }
        assert!(cls_loss(&a, &[0, 1, 3]).unwrap().value >= 0.0);
    }
}
