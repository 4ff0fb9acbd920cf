//! Minimal PNG charts: line plots for training curves and heatmaps for
//! similarity matrices. No text rendering; series colours are fixed and
//! listed in [`PALETTE`].

use std::path::Path;

use dait_core::Matrix;
use image::{Rgb, RgbImage};

use crate::error::{DaitError, Result};

/// Series colours in order: blue, orange, green, red, purple, brown.
pub const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 32;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plot each series against its index on shared axes. Non-finite points are
/// skipped.
pub fn line_chart(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    line(&mut img, (MARGIN as i64, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    let px = |i: usize| MARGIN as f64 + (W - 2 * MARGIN) as f64 * i as f64 / (len.max(2) - 1) as f64;
    let py = |v: f64| (H - MARGIN) as f64 - (H - 2 * MARGIN) as f64 * (v - lo) / (hi - lo);
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (px(i).round() as i64, py(v).round() as i64);
            line(&mut img, prev.unwrap_or(p), p, color);
            prev = Some(p);
        }
    }
    img.save(path).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))
}

/// Heatmap of a matrix, blue (min) to red (max), one square cell per entry.
pub fn heatmap(path: &Path, m: &Matrix) -> Result<()> {
    let cell = (360 / m.rows().max(m.cols()).max(1)).max(4) as u32;
    let mut img = RgbImage::new(cell * m.cols().max(1) as u32, cell * m.rows().max(1) as u32);
    let (lo, hi) = m.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (i, row) in m.iter_rows().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            let color = Rgb([(255.0 * t) as u8, (64.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| DaitError::Ingest(format!("{}: {e}", path.display())))
}
