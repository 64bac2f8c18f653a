//! Feature maps, cosine similarity, resolution alignment and coordinate
//! mapping.
//!
//! Feature maps are stored channel-major (`D x rows x cols`, row-major inside
//! each channel plane), matching the tensor interchange layout in [`crate::npy`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image pixels per high-resolution grid cell along each axis.
pub const HIGH_STRIDE: usize = 4;
/// Image pixels per low-resolution grid cell along each axis.
pub const LOW_STRIDE: usize = 16;
/// Per-axis size ratio between a matched high and low feature map.
pub const LEVEL_RATIO: usize = LOW_STRIDE / HIGH_STRIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    High,
    Low,
}

impl Level {
    pub fn default_stride(self) -> usize {
        match self {
            Level::High => HIGH_STRIDE,
            Level::Low => LOW_STRIDE,
        }
    }
}

/// Integer cell position on a feature grid (the high grid unless stated).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub row: usize,
    pub col: usize,
}

impl GridPoint {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn distance_sq(&self, row: f64, col: f64) -> f64 {
        let dr = self.row as f64 - row;
        let dc = self.col as f64 - col;
        dr * dr + dc * dc
    }
}

/// Pixel position in image space. `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x: u32,
    pub y: u32,
}

impl ImagePoint {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    /// Builds a point from signed input (CLI, JSON), rejecting negatives.
    pub fn try_from_signed(x: i64, y: i64) -> Result<Self> {
        if x < 0 || y < 0 {
            return Err(Error::InvalidArgument(format!(
                "image coordinates must be non-negative, got ({x}, {y})"
            )));
        }
        let conv = |v: i64| {
            u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("coordinate {v} too large")))
        };
        Ok(Self::new(conv(x)?, conv(y)?))
    }
}

/// Maps an image pixel to the grid cell that covers it, clamped to the grid.
pub fn image_to_grid(p: ImagePoint, stride: usize, rows: usize, cols: usize) -> GridPoint {
    let stride = stride.max(1);
    let row = (p.y as usize / stride).min(rows.saturating_sub(1));
    let col = (p.x as usize / stride).min(cols.saturating_sub(1));
    GridPoint { row, col }
}

/// Center of a grid cell in image pixel coordinates, as `(y, x)`.
pub fn grid_to_image(row: f64, col: f64, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((row + 0.5) * s, (col + 0.5) * s)
}

/// A `D`-channel feature grid at one resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    rows: usize,
    cols: usize,
    level: Level,
    stride: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, rows: usize, cols: usize, level: Level, data: Vec<f32>) -> Result<Self> {
        Self::with_stride(channels, rows, cols, level, level.default_stride(), data)
    }

    pub fn with_stride(
        channels: usize,
        rows: usize,
        cols: usize,
        level: Level,
        stride: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || rows == 0 || cols == 0 || stride == 0 {
            return Err(Error::InvalidFeatureMap(format!(
                "dimensions must be positive (D={channels}, rows={rows}, cols={cols}, stride={stride})"
            )));
        }
        let expected = channels * rows * cols;
        if data.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureMap(format!("non-finite value at flat index {i}")));
        }
        let plane = rows * cols;
        let mut norms = vec![0.0f64; plane];
        for channel in data.chunks_exact(plane) {
            for (acc, &v) in norms.iter_mut().zip(channel) {
                *acc += v as f64 * v as f64;
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        Ok(Self {
            channels,
            rows,
            cols,
            level,
            stride,
            data,
            norms,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.rows, self.cols]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn contains(&self, p: GridPoint) -> bool {
        p.row < self.rows && p.col < self.cols
    }

    pub fn check_point(&self, p: GridPoint) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                row: p.row as i64,
                col: p.col as i64,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn vector_at(&self, p: GridPoint) -> Vec<f32> {
        let idx = p.row * self.cols + p.col;
        let n = self.rows * self.cols;
        (0..self.channels).map(|c| self.data[c * n + idx]).collect()
    }

    /// Euclidean norm of the feature vector at `p`.
    pub fn norm_at(&self, p: GridPoint) -> f64 {
        self.norms[p.row * self.cols + p.col]
    }
}

/// Cosine similarity of every cell to one origin cell, clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub origin: GridPoint,
}

impl SimilarityMap {
    pub fn get(&self, p: GridPoint) -> f32 {
        self.values[p.row * self.cols + p.col]
    }
}

/// Cosine similarity map between every cell of `f` and the cell at `p`.
///
/// Zero-norm vectors (on either side) have similarity 0.
pub fn cosine_similarity_map(f: &FeatureMap, p: GridPoint) -> Result<SimilarityMap> {
    f.check_point(p)?;
    let values = raw_cosine(f, p)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(SimilarityMap {
        rows: f.rows,
        cols: f.cols,
        values,
        origin: p,
    })
}

fn raw_cosine(f: &FeatureMap, p: GridPoint) -> Vec<f64> {
    let plane = f.rows * f.cols;
    let query = f.vector_at(p);
    let query_norm = f.norm_at(p);
    let mut dots = vec![0.0f64; plane];
    for (channel, &q) in f.data.chunks_exact(plane).zip(&query) {
        if q == 0.0 {
            continue;
        }
        let q = q as f64;
        for (acc, &v) in dots.iter_mut().zip(channel) {
            *acc += v as f64 * q;
        }
    }
    dots.iter()
        .zip(&f.norms)
        .map(|(&dot, &norm)| {
            let denom = norm * query_norm;
            if denom > 0.0 {
                dot / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-channel bilinear resize with half-pixel centers and edge clamping.
///
/// The result keeps the source level but takes the stride of the target grid.
pub fn upsample_bilinear(f: &FeatureMap, rows: usize, cols: usize) -> Result<FeatureMap> {
    if rows < f.rows || cols < f.cols {
        return Err(Error::DimensionMismatch(format!(
            "upsample target {rows}x{cols} is smaller than source {}x{}",
            f.rows, f.cols
        )));
    }
    if rows == f.rows && cols == f.cols {
        return Ok(f.clone());
    }

    let row_taps = bilinear_taps(f.rows, rows);
    let col_taps = bilinear_taps(f.cols, cols);
    let src_plane = f.rows * f.cols;
    let mut data = Vec::with_capacity(f.channels * rows * cols);
    for channel in f.data.chunks_exact(src_plane) {
        for &(r0, r1, fr) in &row_taps {
            let top = &channel[r0 * f.cols..(r0 + 1) * f.cols];
            let bottom = &channel[r1 * f.cols..(r1 + 1) * f.cols];
            for &(c0, c1, fc) in &col_taps {
                let t = top[c0] as f64 * (1.0 - fc) + top[c1] as f64 * fc;
                let b = bottom[c0] as f64 * (1.0 - fc) + bottom[c1] as f64 * fc;
                data.push((t * (1.0 - fr) + b * fr) as f32);
            }
        }
    }
    let stride = (f.stride * f.rows / rows).max(1);
    FeatureMap::with_stride(f.channels, rows, cols, f.level, stride, data)
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// A matched high/low feature pair, with the low map resampled to the high grid.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    high: FeatureMap,
    low: FeatureMap,
    low_up: FeatureMap,
}

impl FeaturePair {
    pub fn new(high: FeatureMap, low: FeatureMap) -> Result<Self> {
        if high.level != Level::High || low.level != Level::Low {
            return Err(Error::DimensionMismatch(format!(
                "expected (high, low) levels, got ({:?}, {:?})",
                high.level, low.level
            )));
        }
        if high.rows != low.rows * LEVEL_RATIO || high.cols != low.cols * LEVEL_RATIO {
            return Err(Error::DimensionMismatch(format!(
                "high map {}x{} must be exactly {LEVEL_RATIO}x the low map {}x{}",
                high.rows, high.cols, low.rows, low.cols
            )));
        }
        let low_up = upsample_bilinear(&low, high.rows, high.cols)?;
        Ok(Self { high, low, low_up })
    }

    pub fn high(&self) -> &FeatureMap {
        &self.high
    }

    pub fn low(&self) -> &FeatureMap {
        &self.low
    }

    /// The low map resampled onto the high grid.
    pub fn low_upsampled(&self) -> &FeatureMap {
        &self.low_up
    }

    pub fn rows(&self) -> usize {
        self.high.rows
    }

    pub fn cols(&self) -> usize {
        self.high.cols
    }

    pub fn stride(&self) -> usize {
        self.high.stride
    }

    /// Image size `(rows, cols)` implied by the high grid.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.high.rows * self.high.stride, self.high.cols * self.high.stride)
    }
}
