//! Reliable points to instance masks.
//!
//! Masks come from a [`DecoderAdapter`]. The built-in [`ReferenceDecoder`]
//! reuses the gating machinery: it binarizes the point's own gated map at
//! `mean + std`, keeps the 8-connected region holding the point, and scales
//! it up to image resolution by nearest neighbour. External promptable
//! decoders plug in through the same trait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsg::{flood_fill, gated_map, nonparametric_threshold, GatingVariant, ReliablePoint, ReliableSet};
use crate::labels::LabelMap;
use crate::tensor::{grid_to_image, FeaturePair, GridPoint, ImagePoint};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// A non-empty binary mask stored as a bounding box plus bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    image_rows: usize,
    image_cols: usize,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
    area: usize,
}

impl BinaryMask {
    /// Builds a mask from foreground pixels given as `(row, col)`.
    pub fn from_pixels(
        image_rows: usize,
        image_cols: usize,
        pixels: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let pixels: Vec<(usize, usize)> = pixels.into_iter().collect();
        if pixels.is_empty() {
            return Err(Error::InvalidArgument("mask has no foreground pixels".into()));
        }
        if let Some(&(r, c)) = pixels.iter().find(|&&(r, c)| r >= image_rows || c >= image_cols) {
            return Err(Error::OutOfBounds {
                row: r as i64,
                col: c as i64,
                rows: image_rows,
                cols: image_cols,
            });
        }
        let top = pixels.iter().map(|p| p.0).min().unwrap();
        let bottom = pixels.iter().map(|p| p.0).max().unwrap();
        let left = pixels.iter().map(|p| p.1).min().unwrap();
        let right = pixels.iter().map(|p| p.1).max().unwrap();
        let (height, width) = (bottom - top + 1, right - left + 1);
        let mut bits = vec![false; height * width];
        for (r, c) in pixels {
            bits[(r - top) * width + (c - left)] = true;
        }
        let area = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            image_rows,
            image_cols,
            top,
            left,
            height,
            width,
            bits,
            area,
        })
    }

    /// Builds a mask from a dense row-major image-sized grid.
    pub fn from_dense(image_rows: usize, image_cols: usize, dense: &[bool]) -> Result<Self> {
        if dense.len() != image_rows * image_cols {
            return Err(Error::DimensionMismatch(format!(
                "dense mask has {} pixels, image is {image_rows}x{image_cols}",
                dense.len()
            )));
        }
        Self::from_pixels(
            image_rows,
            image_cols,
            dense
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| (i / image_cols, i % image_cols)),
        )
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_rows, self.image_cols)
    }

    /// `(top, left, height, width)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.height, self.width)
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && col >= self.left
            && row < self.top + self.height
            && col < self.left + self.width
            && self.bits[(row - self.top) * self.width + (col - self.left)]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (self.top + i / self.width, self.left + i % self.width))
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = (self.top + self.height).min(other.top + other.height);
        let right = (self.left + self.width).min(other.left + other.width);
        if top >= bottom || left >= right {
            return 0;
        }
        let mut n = 0;
        for r in top..bottom {
            let a = &self.bits[(r - self.top) * self.width..];
            let b = &other.bits[(r - other.top) * other.width..];
            for c in left..right {
                if a[c - self.left] && b[c - other.left] {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// What a decoder returns for one point prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// Turns a point prompt on the adapter's image into a mask.
///
/// The returned mask must contain the queried point; otherwise the caller
/// treats the result as a decode failure.
pub trait DecoderAdapter: Send + Sync {
    fn decode(&self, point: ImagePoint) -> Result<Decoded>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub mask: BinaryMask,
    pub confidence: f64,
    pub source: GridPoint,
    pub cell_type: u32,
}

impl InstanceMask {
    pub fn iou(&self, other: &InstanceMask) -> f64 {
        self.mask.iou(&other.mask)
    }
}

/// Masks surviving suppression, in their original relative order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<InstanceMask>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Decodes one reliable point against the features themselves.
pub fn reference_decode(point: &ReliablePoint, features: &FeaturePair, gating: GatingVariant) -> Result<Decoded> {
    let (rows, cols) = (features.rows(), features.cols());
    let seed = point.grid_point(rows, cols);
    let g = gated_map(seed, features, gating)?;
    let tau = nonparametric_threshold(&g);
    let above: Vec<bool> = g.values.iter().map(|&v| v as f64 > tau).collect();
    let seed_idx = seed.row * cols + seed.col;
    let mut cells = flood_fill(&above, rows, cols, seed_idx);
    if cells.is_empty() {
        cells.push(seed_idx);
    }
    let confidence = (cells.iter().map(|&i| g.values[i] as f64).sum::<f64>() / cells.len() as f64).clamp(0.0, 1.0);

    let stride = features.stride();
    let (image_rows, image_cols) = features.image_dims();
    let pixels = cells.iter().flat_map(|&i| {
        let (r, c) = (i / cols, i % cols);
        (r * stride..(r + 1) * stride).flat_map(move |pr| (c * stride..(c + 1) * stride).map(move |pc| (pr, pc)))
    });
    let mask = BinaryMask::from_pixels(image_rows, image_cols, pixels)?;
    Ok(Decoded { mask, confidence })
}

/// [`DecoderAdapter`] over [`reference_decode`].
pub struct ReferenceDecoder<'a> {
    features: &'a FeaturePair,
    gating: GatingVariant,
}

impl<'a> ReferenceDecoder<'a> {
    pub fn new(features: &'a FeaturePair, gating: GatingVariant) -> Self {
        Self { features, gating }
    }
}

impl DecoderAdapter for ReferenceDecoder<'_> {
    fn decode(&self, point: ImagePoint) -> Result<Decoded> {
        let stride = self.features.stride();
        let r = ReliablePoint {
            row: (point.y as usize / stride) as f64,
            col: (point.x as usize / stride) as f64,
            score: 0.0,
            discovered_at: 0,
            component_size: 1,
        };
        reference_decode(&r, self.features, self.gating)
    }
}

/// Image pixel a grid-space reliable point prompts at.
pub fn prompt_pixel(point: &ReliablePoint, stride: usize, image_rows: usize, image_cols: usize) -> ImagePoint {
    let (y, x) = grid_to_image(point.row, point.col, stride);
    let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n.saturating_sub(1)) as u32;
    ImagePoint::new(clamp(x, image_cols), clamp(y, image_rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeFailure {
    pub index: usize,
    pub point: ImagePoint,
    pub reason: String,
}

/// Decodes every point of `reliable`; points whose mask is missing or does not
/// contain the prompt pixel are reported as failures.
pub fn decode_points(
    decoder: &dyn DecoderAdapter,
    reliable: &ReliableSet,
    stride: usize,
    image_dims: (usize, usize),
    cell_type: u32,
) -> (Vec<InstanceMask>, Vec<DecodeFailure>) {
    let mut masks = Vec::with_capacity(reliable.len());
    let mut failures = Vec::new();
    for (index, point) in reliable.points.iter().enumerate() {
        let pixel = prompt_pixel(point, stride, image_dims.0, image_dims.1);
        match decoder.decode(pixel) {
            Ok(d) if d.mask.image_dims() != image_dims => failures.push(DecodeFailure {
                index,
                point: pixel,
                reason: format!("mask is {:?}, image is {image_dims:?}", d.mask.image_dims()),
            }),
            Ok(d) if !d.mask.contains(pixel.y as usize, pixel.x as usize) => failures.push(DecodeFailure {
                index,
                point: pixel,
                reason: "mask does not contain the prompt".into(),
            }),
            Ok(d) => masks.push(InstanceMask {
                mask: d.mask,
                confidence: d.confidence.clamp(0.0, 1.0),
                source: point.grid_point(reliable.rows, reliable.cols),
                cell_type,
            }),
            Err(e) => failures.push(DecodeFailure {
                index,
                point: pixel,
                reason: e.to_string(),
            }),
        }
    }
    (masks, failures)
}

/// Indices (ascending) of the masks that survive greedy suppression.
///
/// Masks are visited by descending confidence, earlier index first on ties;
/// a mask is dropped when its IoU with any kept mask is strictly above
/// `iou_threshold`.
pub fn nms_indices(masks: &[InstanceMask], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[b].confidence.total_cmp(&masks[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| masks[k].iou(&masks[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

pub fn nms(masks: Vec<InstanceMask>, iou_threshold: f64) -> MaskSet {
    let keep = nms_indices(&masks, iou_threshold);
    let mut flags = vec![false; masks.len()];
    for k in keep {
        flags[k] = true;
    }
    MaskSet {
        masks: masks.into_iter().zip(flags).filter(|(_, k)| *k).map(|(m, _)| m).collect(),
    }
}

/// Rasterizes kept masks into labels `1..=K` in kept order. Contested pixels
/// go to the more confident mask (the lower label on ties).
pub fn assemble_label_map(masks: &MaskSet, image_rows: usize, image_cols: usize) -> Result<LabelMap> {
    let mut labels = vec![0u32; image_rows * image_cols];
    let mut owner_conf = vec![f64::NEG_INFINITY; image_rows * image_cols];
    let mut types = BTreeMap::new();
    for (i, m) in masks.masks.iter().enumerate() {
        if m.mask.image_dims() != (image_rows, image_cols) {
            return Err(Error::DimensionMismatch(format!(
                "mask {i} is {:?}, label map is {image_rows}x{image_cols}",
                m.mask.image_dims()
            )));
        }
        let label = i as u32 + 1;
        types.insert(label, m.cell_type);
        for (r, c) in m.mask.pixels() {
            let idx = r * image_cols + c;
            if labels[idx] == 0 || m.confidence > owner_conf[idx] {
                labels[idx] = label;
                owner_conf[idx] = m.confidence;
            }
        }
    }
    let map = LabelMap::new(image_rows, image_cols, labels)?;
    // Fully overridden masks leave unused labels in `types`; that is harmless.
    map.with_types(types)
}
