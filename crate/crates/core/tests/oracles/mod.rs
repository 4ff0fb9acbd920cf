//! Brute-force scalar reference implementations used by the loss, gradient
//! and analysis suites. Written loop-by-loop on plain vectors so they share
//! no code with the library.

#![allow(dead_code)]

pub mod criteria;

use dait_core::rng::{normal, seeded, SeededRng};
use dait_core::{FeatureMap, Matrix};

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_map(rng: &mut SeededRng, dims: [usize; 4]) -> FeatureMap {
    let data = (0..dims.iter().product()).map(|_| normal(rng)).collect();
    FeatureMap::from_vec(dims, data).unwrap()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| (v / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `T^2 * mean_i KL(P_i || Q_i)` with `P = softmax(first / T)`.
pub fn tempered_kl(first: &Matrix, second: &Matrix, t: f64) -> f64 {
    let (a, b) = (to_rows(first), to_rows(second));
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(&b) {
        let p = softmax(ra, t);
        let q = softmax(rb, t);
        for k in 0..p.len() {
            total += p[k] * (p[k] / q[k]).ln();
        }
    }
    t * t * total / a.len() as f64
}

pub fn mean_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    let (ra, rb) = (to_rows(a), to_rows(b));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..ra.len() {
        for j in 0..ra[i].len() {
            total += (ra[i][j] - rb[i][j]).abs();
            count += 1;
        }
    }
    total / count as f64
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let rows = to_rows(logits);
    let mut total = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        total -= (r[y].exp() / z).ln();
    }
    total / rows.len() as f64
}

pub fn spatial_sq_l2(s: &FeatureMap, t: &FeatureMap) -> f64 {
    let [b, c, h, w] = s.dims();
    let mut total = 0.0;
    for bi in 0..b {
        let mut per_sample = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut site = 0.0;
                for ch in 0..c {
                    let d = s.get(bi, ch, y, x) - t.get(bi, ch, y, x);
                    site += d * d;
                }
                per_sample += site;
            }
        }
        total += per_sample / (h * w) as f64;
    }
    total / b as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn cosine_table(f: &Matrix, a: &Matrix) -> Vec<Vec<f64>> {
    let (rf, ra) = (to_rows(f), to_rows(a));
    rf.iter().map(|x| ra.iter().map(|y| cosine(x, y)).collect()).collect()
}

fn gram(m: &Matrix) -> Vec<Vec<f64>> {
    let r = to_rows(m);
    let n = r.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = r[i].iter().zip(&r[j]).map(|(a, b)| a * b).sum();
        }
    }
    k
}

/// `trace(K H L H)` with the centering matrix `H = I - 11^T / n`.
fn hsic(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    let h = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
    let mul = |a: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize, usize) -> f64| {
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..n).map(|t| a(i, t) * b(t, j)).sum();
            }
        }
        out
    };
    let kh = mul(&|i, j| k[i][j], &h);
    let lh = mul(&|i, j| l[i][j], &h);
    (0..n).map(|i| (0..n).map(|j| kh[i][j] * lh[j][i]).sum::<f64>()).sum()
}

pub fn cka_via_hsic(x: &Matrix, y: &Matrix) -> f64 {
    let (k, l) = (gram(x), gram(y));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn vector_rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
