//! Hierarchical similarity gating.
//!
//! From a single prompt, the high- and low-resolution cosine similarity maps
//! are clamped to `[0, 1]` and multiplied. The gated map is binarized at
//! `tau = mean + population std` (strictly above), split into 8-connected
//! regions, and each region contributes its similarity-weighted centroid as a
//! reliable same-type point. When nothing clears the threshold the prompt
//! itself is returned, so a call always yields at least one point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity_map, FeaturePair, GridPoint, SimilarityMap};

/// Which similarity maps feed the gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingVariant {
    /// `max(0, S_high) * max(0, S_low)`.
    #[default]
    Product,
    HighOnly,
    LowOnly,
}

impl GatingVariant {
    pub const ALL: [GatingVariant; 3] = [Self::Product, Self::HighOnly, Self::LowOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Product => "product",
            Self::HighOnly => "high_only",
            Self::LowOnly => "low_only",
        }
    }
}

impl fmt::Display for GatingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "product" => Ok(Self::Product),
            "high_only" | "high" => Ok(Self::HighOnly),
            "low_only" | "low" => Ok(Self::LowOnly),
            _ => Err(Error::InvalidArgument(format!("unknown gating variant `{s}`"))),
        }
    }
}

/// Gated similarity values in `[0, 1]` on the high grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub source: GridPoint,
}

impl GatedMap {
    pub fn get(&self, p: GridPoint) -> f32 {
        self.values[p.row * self.cols + p.col]
    }
}

pub fn gate(high: &SimilarityMap, low_up: &SimilarityMap) -> Result<GatedMap> {
    if high.rows != low_up.rows || high.cols != low_up.cols {
        return Err(Error::DimensionMismatch(format!(
            "similarity maps are {}x{} and {}x{}",
            high.rows, high.cols, low_up.rows, low_up.cols
        )));
    }
    let values = high
        .values
        .iter()
        .zip(&low_up.values)
        .map(|(&h, &l)| h.max(0.0) * l.max(0.0))
        .collect();
    Ok(GatedMap {
        rows: high.rows,
        cols: high.cols,
        values,
        source: high.origin,
    })
}

fn clamp_single(s: SimilarityMap) -> GatedMap {
    GatedMap {
        rows: s.rows,
        cols: s.cols,
        values: s.values.into_iter().map(|v| v.max(0.0)).collect(),
        source: s.origin,
    }
}

/// Gated map of prompt `p` under `variant`, computing only the maps it needs.
pub fn gated_map(p: GridPoint, features: &FeaturePair, variant: GatingVariant) -> Result<GatedMap> {
    match variant {
        GatingVariant::Product => {
            let high = cosine_similarity_map(features.high(), p)?;
            let low = cosine_similarity_map(features.low_upsampled(), p)?;
            gate(&high, &low)
        }
        GatingVariant::HighOnly => Ok(clamp_single(cosine_similarity_map(features.high(), p)?)),
        GatingVariant::LowOnly => Ok(clamp_single(cosine_similarity_map(features.low_upsampled(), p)?)),
    }
}

/// `mean + population standard deviation` of the gated values.
pub fn nonparametric_threshold(g: &GatedMap) -> f64 {
    let n = g.values.len();
    if n == 0 {
        return 0.0;
    }
    let (lo, hi) = g
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        return lo as f64;
    }
    let mean = g.values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = g
        .values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    mean + var.sqrt()
}

/// A discovered same-type location with sub-cell precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliablePoint {
    pub row: f64,
    pub col: f64,
    /// Mean gated similarity over the point's connected region.
    pub score: f64,
    pub discovered_at: usize,
    pub component_size: usize,
}

impl ReliablePoint {
    pub fn distance_sq(&self, other: &ReliablePoint) -> f64 {
        let dr = self.row - other.row;
        let dc = self.col - other.col;
        dr * dr + dc * dc
    }

    /// Nearest grid cell, for re-use as a prompt.
    pub fn grid_point(&self, rows: usize, cols: usize) -> GridPoint {
        let snap = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n.saturating_sub(1));
        GridPoint::new(snap(self.row, rows), snap(self.col, cols))
    }
}

/// Reliable points in discovery order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliableSet {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<ReliablePoint>,
}

impl ReliableSet {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ReliablePoint> {
        self.points.iter()
    }
}

/// 8-connected component labels of `mask`, numbered from 1 in raster order of
/// each component's first cell. Returns the labels and the component count.
pub fn label_components(mask: &[bool], rows: usize, cols: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; rows * cols];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            for n in neighbors8(idx, rows, cols) {
                if mask[n] && labels[n] == 0 {
                    labels[n] = next;
                    stack.push(n);
                }
            }
        }
    }
    (labels, next)
}

/// Cells of the 8-connected region of `mask` containing `start` (empty when
/// `start` is not set).
pub fn flood_fill(mask: &[bool], rows: usize, cols: usize, start: usize) -> Vec<usize> {
    if !mask[start] {
        return Vec::new();
    }
    let mut seen = vec![false; mask.len()];
    let mut out = vec![start];
    seen[start] = true;
    let mut i = 0;
    while i < out.len() {
        for n in neighbors8(out[i], rows, cols) {
            if mask[n] && !seen[n] {
                seen[n] = true;
                out.push(n);
            }
        }
        i += 1;
    }
    out
}

fn neighbors8(idx: usize, rows: usize, cols: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((idx / cols) as isize, (idx % cols) as isize);
    (-1isize..=1)
        .flat_map(move |dr| (-1isize..=1).map(move |dc| (r + dr, c + dc)))
        .filter(move |&(nr, nc)| {
            (nr, nc) != (r, c) && nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols
        })
        .map(move |(nr, nc)| nr as usize * cols + nc as usize)
}

pub fn extract_reliable_points(g: &GatedMap, tau: f64, iteration: usize) -> ReliableSet {
    let mask: Vec<bool> = g.values.iter().map(|&v| v as f64 > tau).collect();
    let (labels, count) = label_components(&mask, g.rows, g.cols);

    if count == 0 {
        return ReliableSet {
            rows: g.rows,
            cols: g.cols,
            points: vec![ReliablePoint {
                row: g.source.row as f64,
                col: g.source.col as f64,
                score: g.get(g.source) as f64,
                discovered_at: iteration,
                component_size: 1,
            }],
        };
    }

    #[derive(Default, Clone, Copy)]
    struct Acc {
        weight: f64,
        row: f64,
        col: f64,
        cells: usize,
    }
    let mut acc = vec![Acc::default(); count as usize];
    for (idx, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let w = g.values[idx] as f64;
        let a = &mut acc[label as usize - 1];
        a.weight += w;
        a.row += w * (idx / g.cols) as f64;
        a.col += w * (idx % g.cols) as f64;
        a.cells += 1;
    }

    let points = acc
        .into_iter()
        .map(|a| ReliablePoint {
            row: a.row / a.weight,
            col: a.col / a.weight,
            score: (a.weight / a.cells as f64).clamp(0.0, 1.0),
            discovered_at: iteration,
            component_size: a.cells,
        })
        .collect();
    ReliableSet {
        rows: g.rows,
        cols: g.cols,
        points,
    }
}

/// One gating pass from prompt `p`: gate, threshold, and extract centroids.
pub fn hsg(p: GridPoint, features: &FeaturePair, variant: GatingVariant, iteration: usize) -> Result<ReliableSet> {
    let g = gated_map(p, features, variant)?;
    let tau = nonparametric_threshold(&g);
    Ok(extract_reliable_points(&g, tau, iteration))
}
