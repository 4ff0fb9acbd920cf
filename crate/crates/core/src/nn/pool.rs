use crate::tensor::{FeatureMap, Matrix};

/// Mean over the spatial grid: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &FeatureMap) -> Matrix {
    let [b, c, h, w] = x.dims();
    let plane = h * w;
    let mut out = Matrix::zeros(b, c);
    for n in 0..b {
        let s = x.sample(n);
        for ch in 0..c {
            let sum: f64 = s[ch * plane..(ch + 1) * plane].iter().sum();
            out.set(n, ch, sum / plane as f64);
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Matrix, dims: [usize; 4]) -> FeatureMap {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = FeatureMap::zeros(b, c, h, w);
    for n in 0..b {
        let s = out.sample_mut(n);
        for ch in 0..c {
            let g = grad.get(n, ch) / plane as f64;
            s[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = g);
        }
    }
    out
}

#[inline]
fn bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to an `out_h x out_w` grid (bins as in the
/// usual `floor(i*L/O) .. ceil((i+1)*L/O)` convention).
pub fn adaptive_avg_pool(x: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let [b, c, h, w] = x.dims();
    if (out_h, out_w) == (h, w) {
        return x.clone();
    }
    let mut y = FeatureMap::zeros(b, c, out_h, out_w);
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = bin(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1) = bin(ox, out_w, w);
                    let mut sum = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            sum += x.get(n, ch, iy, ix);
                        }
                    }
                    let idx = y.index(n, ch, oy, ox);
                    y.as_mut_slice()[idx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward(grad: &FeatureMap, input_dims: [usize; 4]) -> FeatureMap {
    let [b, c, h, w] = input_dims;
    let [_, _, out_h, out_w] = grad.dims();
    if (out_h, out_w) == (h, w) {
        return grad.clone();
    }
    let mut gx = FeatureMap::zeros(b, c, h, w);
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = bin(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1) = bin(ox, out_w, w);
                    let g = grad.get(n, ch, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = gx.index(n, ch, iy, ix);
                            gx.as_mut_slice()[idx] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}
