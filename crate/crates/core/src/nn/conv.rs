use alloc::vec::Vec;

use super::{Param, Parameters};
use crate::rng::{normal, SeededRng};
use crate::tensor::FeatureMap;

/// Square-kernel 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    /// `out x in x k x k`
    pub weight: Param,
    pub bias: Param,
}

/// Output positions `o` along one axis whose input index `o*stride + tap - pad`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if len + pad > tap { (len + pad - tap).div_ceil(stride).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = crate::math::sqrt(2.0 / fan_in.max(1) as f64);
        let w: Vec<f64> = (0..out_channels * fan_in).map(|_| normal(rng) * std).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            padding,
            weight: Param::new(w),
            bias: Param::new(alloc::vec![0.0; out_channels]),
        }
    }

    /// 1x1 convolution that copies input channels to the same output
    /// channels (zero-padded or truncated when widths differ).
    pub fn identity_1x1(in_channels: usize, out_channels: usize) -> Self {
        let mut w = alloc::vec![0.0; out_channels * in_channels];
        for c in 0..in_channels.min(out_channels) {
            w[c * in_channels + c] = 1.0;
        }
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            weight: Param::new(w),
            bias: Param::new(alloc::vec![0.0; out_channels]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let [batch, _, h, w] = x.dims();
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut y = FeatureMap::zeros(batch, self.out_channels, oh, ow);
        let in_plane = h * w;
        let out_plane = oh * ow;
        for b in 0..batch {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            for oc in 0..self.out_channels {
                let out = &mut ys[oc * out_plane..(oc + 1) * out_plane];
                out.iter_mut().for_each(|v| *v = self.bias.value[oc]);
                for ic in 0..self.in_channels {
                    let inp = &xs[ic * in_plane..(ic + 1) * in_plane];
                    let wbase = (oc * self.in_channels + ic) * k * k;
                    for kh in 0..k {
                        let (y_lo, y_hi) = valid_range(h, oh, s, kh, p);
                        for kw in 0..k {
                            let wv = self.weight.value[wbase + kh * k + kw];
                            let (x_lo, x_hi) = valid_range(w, ow, s, kw, p);
                            for oy in y_lo..y_hi {
                                let iy = oy * s + kh - p;
                                let in_row = &inp[iy * w..(iy + 1) * w];
                                let out_row = &mut out[oy * ow..(oy + 1) * ow];
                                for ox in x_lo..x_hi {
                                    out_row[ox] += wv * in_row[ox * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
        let [batch, _, h, w] = x.dims();
        let [_, _, oh, ow] = grad_out.dims();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut gx = FeatureMap::zeros(batch, self.in_channels, h, w);
        let in_plane = h * w;
        let out_plane = oh * ow;
        for b in 0..batch {
            let xs = x.sample(b);
            let gs = grad_out.sample(b);
            let gxs = gx.sample_mut(b);
            for oc in 0..self.out_channels {
                let g = &gs[oc * out_plane..(oc + 1) * out_plane];
                self.bias.grad[oc] += g.iter().sum::<f64>();
                for ic in 0..self.in_channels {
                    let inp = &xs[ic * in_plane..(ic + 1) * in_plane];
                    let gin = &mut gxs[ic * in_plane..(ic + 1) * in_plane];
                    let wbase = (oc * self.in_channels + ic) * k * k;
                    for kh in 0..k {
                        let (y_lo, y_hi) = valid_range(h, oh, s, kh, p);
                        for kw in 0..k {
                            let widx = wbase + kh * k + kw;
                            let wv = self.weight.value[widx];
                            let (x_lo, x_hi) = valid_range(w, ow, s, kw, p);
                            let mut gw = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + kh - p;
                                let g_row = &g[oy * ow..(oy + 1) * ow];
                                let in_row = &inp[iy * w..(iy + 1) * w];
                                let gin_row = &mut gin[iy * w..(iy + 1) * w];
                                for ox in x_lo..x_hi {
                                    let ix = ox * s + kw - p;
                                    gw += g_row[ox] * in_row[ix];
                                    gin_row[ix] += wv * g_row[ox];
                                }
                            }
                            self.weight.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Parameters for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
