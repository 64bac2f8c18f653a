//! Segmentation metrics and ground-truth click simulation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::prompt_pixel;
use crate::error::{Error, Result};
use crate::hsg::ReliableSet;
use crate::labels::LabelMap;
use crate::tensor::ImagePoint;

/// Pixel-level Dice over binary foregrounds.
pub fn dice(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    gt.check_same_dims(pred)?;
    let (mut g, mut p, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in gt.labels().iter().zip(pred.labels()) {
        g += (a != 0) as usize;
        p += (b != 0) as usize;
        both += (a != 0 && b != 0) as usize;
    }
    Ok(match (g, p) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (g + p) as f64,
    })
}

/// How AJI matching treats predictions that were already matched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AjiMatching {
    /// A prediction is matched to at most one ground-truth instance.
    #[default]
    Exclusive,
    /// Several ground-truth instances may share the same best prediction.
    Reusable,
}

impl FromStr for AjiMatching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exclusive" => Ok(Self::Exclusive),
            "reusable" => Ok(Self::Reusable),
            _ => Err(Error::InvalidArgument(format!("unknown AJI matching `{s}`"))),
        }
    }
}

impl fmt::Display for AjiMatching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exclusive => "exclusive",
            Self::Reusable => "reusable",
        })
    }
}

pub fn aji(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    aji_with(gt, pred, AjiMatching::Exclusive)
}

/// Aggregated Jaccard Index.
///
/// Ground-truth instances are visited in ascending label order; each is
/// paired with the overlapping prediction of highest IoU (lowest label on
/// ties). Intersections go to the numerator, unions to the denominator, and
/// every prediction never paired adds its area to the denominator. A
/// ground-truth instance without any overlapping candidate adds its own area.
pub fn aji_with(gt: &LabelMap, pred: &LabelMap, matching: AjiMatching) -> Result<f64> {
    gt.check_same_dims(pred)?;
    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut overlaps: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
        }
        if g != 0 && p != 0 {
            *overlaps.entry(g).or_default().entry(p).or_default() += 1;
        }
    }
    if gt_area.is_empty() && pred_area.is_empty() {
        return Ok(1.0);
    }

    let mut used: HashMap<u32, bool> = pred_area.keys().map(|&k| (k, false)).collect();
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    for (&g, &ga) in &gt_area {
        // (intersection, union, label) of the best candidate so far.
        let mut best: Option<(u64, u64, u32)> = None;
        if let Some(row) = overlaps.get(&g) {
            for (&p, &inter) in row {
                if matching == AjiMatching::Exclusive && used[&p] {
                    continue;
                }
                let union = ga + pred_area[&p] - inter;
                // IoU comparison by cross-multiplication keeps it exact.
                let better = match best {
                    None => true,
                    Some((bi, bu, _)) => inter * bu > bi * union,
                };
                if better {
                    best = Some((inter, union, p));
                }
            }
        }
        match best {
            Some((inter, union, p)) => {
                inter_sum += inter;
                union_sum += union;
                used.insert(p, true);
            }
            None => union_sum += ga,
        }
    }
    union_sum += pred_area
        .iter()
        .filter(|(p, _)| !used[p])
        .map(|(_, &a)| a)
        .sum::<u64>();
    Ok(if union_sum == 0 {
        0.0
    } else {
        inter_sum as f64 / union_sum as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub true_positives: usize,
    pub points: usize,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Point precision and recall of `reliable` against instances of `target_type`.
///
/// A point counts once per instance: the first point landing inside a
/// target-type instance is a hit, later points in the same instance and
/// points elsewhere are misses.
pub fn point_precision_recall(
    reliable: &ReliableSet,
    gt: &LabelMap,
    target_type: u32,
    stride: usize,
) -> Result<PointScore> {
    let targets: Vec<u32> = gt
        .instance_ids()
        .into_iter()
        .filter(|&id| gt.type_of(id) == Some(target_type))
        .collect();
    if targets.is_empty() {
        return Err(Error::UnknownCellType(target_type));
    }
    let mut claimed: HashMap<u32, bool> = HashMap::new();
    let mut tp = 0;
    for p in &reliable.points {
        let px = prompt_pixel(p, stride, gt.rows(), gt.cols());
        let label = gt.get(px.y as usize, px.x as usize);
        if label != 0 && gt.type_of(label) == Some(target_type) && !claimed.contains_key(&label) {
            claimed.insert(label, true);
            tp += 1;
        }
    }
    let precision = if reliable.is_empty() {
        1.0
    } else {
        tp as f64 / reliable.len() as f64
    };
    Ok(PointScore {
        true_positives: tp,
        points: reliable.len(),
        instances: targets.len(),
        precision,
        recall: tp as f64 / targets.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickMode {
    /// One click per ground-truth instance.
    PerInstance,
    /// One click per cell type, on a seeded random instance of that type.
    #[default]
    PerType,
}

impl FromStr for ClickMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_instance" | "instance" => Ok(Self::PerInstance),
            "per_type" | "type" => Ok(Self::PerType),
            _ => Err(Error::InvalidArgument(format!("unknown click mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedClick {
    pub point: ImagePoint,
    pub cell_type: u32,
    /// Ground-truth instance the click was derived from.
    pub label: u32,
}

struct InstanceStats {
    count: u64,
    row_sum: u64,
    col_sum: u64,
}

/// Click at an instance's pixel centroid, snapped to the nearest pixel of the
/// instance when the rounded centroid falls outside it.
fn centroid_click(gt: &LabelMap, label: u32, stats: &InstanceStats) -> ImagePoint {
    let cr = stats.row_sum as f64 / stats.count as f64;
    let cc = stats.col_sum as f64 / stats.count as f64;
    let (r, c) = (cr.round() as usize, cc.round() as usize);
    if r < gt.rows() && c < gt.cols() && gt.get(r, c) == label {
        return ImagePoint::new(c as u32, r as u32);
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (idx, &l) in gt.labels().iter().enumerate() {
        if l != label {
            continue;
        }
        let (pr, pc) = (idx / gt.cols(), idx % gt.cols());
        let d = (pr as f64 - cr).powi(2) + (pc as f64 - cc).powi(2);
        // Raster order visits smaller (row, col) first, so strict < keeps ties.
        if best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, pr, pc));
        }
    }
    let (_, r, c) = best.expect("instance has pixels");
    ImagePoint::new(c as u32, r as u32)
}

pub fn simulate_clicks(gt: &LabelMap, mode: ClickMode, seed: u64) -> Result<Vec<SimulatedClick>> {
    let mut stats: BTreeMap<u32, InstanceStats> = BTreeMap::new();
    for (idx, &l) in gt.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let s = stats.entry(l).or_insert(InstanceStats {
            count: 0,
            row_sum: 0,
            col_sum: 0,
        });
        s.count += 1;
        s.row_sum += (idx / gt.cols()) as u64;
        s.col_sum += (idx % gt.cols()) as u64;
    }
    if stats.is_empty() {
        return Err(Error::InvalidArgument("ground truth has no instances to click".into()));
    }
    let click = |label: u32| -> Result<SimulatedClick> {
        let cell_type = gt.type_of(label).ok_or(Error::UnknownCellType(label))?;
        Ok(SimulatedClick {
            point: centroid_click(gt, label, &stats[&label]),
            cell_type,
            label,
        })
    };
    match mode {
        ClickMode::PerInstance => stats.keys().map(|&l| click(l)).collect(),
        ClickMode::PerType => {
            let mut by_type: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for &l in stats.keys() {
                let t = gt.type_of(l).ok_or(Error::UnknownCellType(l))?;
                by_type.entry(t).or_default().push(l);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            by_type
                .values()
                .map(|labels| click(labels[rng.random_range(0..labels.len())]))
                .collect()
        }
    }
}

/// Scores for one evaluated image (or a mean over several).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aji: f64,
    pub dice: f64,
    pub point_precision: f64,
    pub point_recall: f64,
    pub clicks_used: usize,
    /// Precision of the reliable set after each chain iteration, pooled over
    /// all clicks.
    pub per_iteration_precision: Vec<f64>,
}
