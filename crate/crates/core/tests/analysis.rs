mod oracles;

use dait_core::analysis::{linear_cka, similarity_matrix, FeatureDump};
use dait_core::{Error, Matrix};
use oracles::{cosine, random_matrix, rng};

#[test]
fn cka_suite() {
    oracles::criteria::cka();
}

#[test]
fn cka_is_symmetric_and_bounded() {
    let mut r = rng(23);
    for _ in 0..50 {
        let x = random_matrix(&mut r, 8, 3);
        let y = random_matrix(&mut r, 8, 6);
        let a = linear_cka(&x, &y).unwrap();
        assert!((a - linear_cka(&y, &x).unwrap()).abs() < 1e-10);
        assert!((-1e-8..=1.0 + 1e-8).contains(&a));
    }
    let flat = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
    assert!(matches!(linear_cka(&flat, &random_matrix(&mut r, 4, 2)), Err(Error::Degenerate { .. })));
}

#[test]
fn similarity_matrix_hand_built() {
    let rows: [&[f64]; 5] = [&[1.0, 0.0, 2.0], &[3.0, 0.0, 0.0], &[0.0, 1.0, 1.0], &[0.0, 3.0, 1.0], &[2.0, 2.0, 0.0]];
    let labels = vec![0, 0, 1, 1, 2];
    let dump = FeatureDump::new(Matrix::from_rows(&rows).unwrap(), labels, "hand".into()).unwrap();
    let s = similarity_matrix(&dump, 3).unwrap();
    let means = [[2.0, 0.0, 1.0], [0.0, 2.0, 1.0], [2.0, 2.0, 0.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((s.get(i, j) - cosine(&means[i], &means[j])).abs() < 1e-6);
            assert_eq!(s.get(i, j), s.get(j, i));
        }
        assert!((s.get(i, i) - 1.0).abs() < 1e-6);
    }
    assert!((s.get(0, 1) - 0.2).abs() < 1e-12);
}
