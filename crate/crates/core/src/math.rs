//! `no_std` float helpers backed by `libm`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Numerically stable log-softmax of `row / temperature`, written into `out`.
pub fn log_softmax_scaled(row: &[f64], temperature: f64, out: &mut [f64]) {
    debug_assert_eq!(row.len(), out.len());
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v / temperature - max;
        sum += exp(*o);
    }
    let lse = ln(sum);
    for o in out.iter_mut() {
        *o -= lse;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}
