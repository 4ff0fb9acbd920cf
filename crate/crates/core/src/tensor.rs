//! Dense row-major buffers for the two array shapes the method trades in:
//! pooled embeddings / logits (`B x D`) and feature maps (`B x C x H x W`).

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Pooled embeddings, one row per sample.
pub type FeatureBatch = Matrix;
/// Pre-softmax class scores, one row per sample.
pub type LogitBatch = Matrix;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::from_vec",
                alloc::format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::contract("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * alpha).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::contract(
                "Matrix::matmul",
                alloc::format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Stack selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Dense `B x C x H x W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width, data: vec![0.0; batch * channels * height * width] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let [batch, channels, height, width] = dims;
        if data.len() != batch * channels * height * width {
            return Err(Error::contract(
                "FeatureMap::from_vec",
                alloc::format!("{} values for shape {dims:?}", data.len()),
            ));
        }
        Ok(Self { batch, channels, height, width, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Elements in one sample (`C*H*W`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch of the given samples, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &b in idx {
            data.extend_from_slice(self.sample(b));
        }
        Self { batch: idx.len(), channels: self.channels, height: self.height, width: self.width, data }
    }

    /// Flatten each sample into a row.
    pub fn flatten(&self) -> Matrix {
        Matrix { rows: self.batch, cols: self.sample_len(), data: self.data.clone() }
    }

    /// Stack single-sample maps of identical shape.
    pub fn stack(samples: &[&[f64]], channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = channels * height * width;
        let mut data = Vec::with_capacity(samples.len() * n);
        for s in samples {
            if s.len() != n {
                return Err(Error::contract("FeatureMap::stack", "sample size mismatch"));
            }
            data.extend_from_slice(s);
        }
        Ok(Self { batch: samples.len(), channels, height, width, data })
    }
}
