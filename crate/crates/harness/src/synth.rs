//! Synthetic feature fields with a known cell layout.
//!
//! Cells are discs on the high grid, grouped into per-type tissue regions.
//! The high level carries sharp per-cell prototypes whose types share a common
//! component, plus background patches that resemble a foreign type. The low
//! level carries well separated type prototypes, blurred and pooled so that
//! neighbouring cells bleed into each other. Both levels drift smoothly across
//! the field so that far-apart cells of one type are less alike than near ones.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use cop_core::labels::{write_type_sidecar, LabelMap};
use cop_core::npy::{feature_paths, write_tensor_file};
use cop_core::tensor::{FeatureMap, FeaturePair, Level, HIGH_STRIDE, LEVEL_RATIO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// High-grid size; both must be multiples of 4.
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cells: usize,
    pub types: usize,
    pub channels: usize,
    /// Cell radius range in high-grid cells.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minimum empty margin between two cell discs.
    pub min_gap: f64,
    /// Angular separation of low-level type prototypes, as a fraction of a
    /// right angle.
    pub type_margin: f64,
    /// Cosine between high-level prototypes of different types.
    pub high_type_overlap: f64,
    /// Fraction of background given high-level features resembling a type.
    pub confound: f64,
    /// Cosine between a confound patch and the type it imitates.
    pub confound_similarity: f64,
    /// Minimum distance from a confound patch to any cell of the imitated type.
    pub confound_clearance: f64,
    /// Gaussian blur sigma applied to the low level, in high-grid cells.
    pub low_blur: f64,
    /// Weight of background relative to cells in the low level.
    pub low_background: f64,
    /// Per-element noise, relative to unit-norm feature vectors.
    pub noise: f64,
    /// Strength of the spatial prototype drift.
    pub drift: f64,
    /// Drift strength of the low level.
    pub low_drift: f64,
    /// Correlation length of the drift, in high-grid cells.
    pub drift_scale: f64,
    pub regions_per_type: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid_rows: 128,
            grid_cols: 128,
            cells: 60,
            types: 3,
            channels: 64,
            radius_min: 3.0,
            radius_max: 4.5,
            min_gap: 2.0,
            type_margin: 0.9,
            high_type_overlap: 0.3,
            confound: 0.4,
            confound_similarity: 0.9,
            confound_clearance: 8.0,
            low_blur: 2.0,
            low_background: 0.2,
            noise: 0.05,
            drift: 2.5,
            low_drift: 0.5,
            drift_scale: 32.0,
            regions_per_type: 2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::InvalidSpec(msg));
        if self.types == 0 || self.cells < self.types {
            return bad(format!("need cells >= types >= 1, got {} cells and {} types", self.cells, self.types));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.grid_rows % LEVEL_RATIO != 0 || self.grid_cols % LEVEL_RATIO != 0
        {
            return bad(format!(
                "grid {}x{} must be non-empty multiples of {LEVEL_RATIO}",
                self.grid_rows, self.grid_cols
            ));
        }
        if self.channels < 2 * self.types + 4 {
            return bad(format!("{} channels cannot hold {} types", self.channels, self.types));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("bad radius range {}..{}", self.radius_min, self.radius_max));
        }
        if !(self.type_margin > 0.0 && self.type_margin <= 1.0) {
            return bad(format!("type_margin must be in (0, 1], got {}", self.type_margin));
        }
        if !(0.0..1.0).contains(&self.confound) {
            return bad(format!("confound must be in [0, 1), got {}", self.confound));
        }
        for (name, v) in [
            ("high_type_overlap", self.high_type_overlap),
            ("confound_similarity", self.confound_similarity),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("min_gap", self.min_gap),
            ("confound_clearance", self.confound_clearance),
            ("low_blur", self.low_blur),
            ("low_background", self.low_background),
            ("noise", self.noise),
            ("drift", self.drift),
            ("low_drift", self.low_drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.drift_scale.is_nan() || self.drift_scale <= 0.0 || self.regions_per_type == 0 {
            return bad("drift_scale and regions_per_type must be positive".into());
        }
        Ok(())
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_rows * HIGH_STRIDE, self.grid_cols * HIGH_STRIDE)
    }
}

/// One cell disc in high-grid coordinates (cell `(r, c)` has its centre at
/// `(r + 0.5, c + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: u32,
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub cell_type: u32,
}

impl CellRecord {
    /// Whether an image pixel lies inside the disc.
    pub fn contains_pixel(&self, y: usize, x: usize) -> bool {
        let r = (y as f64 + 0.5) / HIGH_STRIDE as f64;
        let c = (x as f64 + 0.5) / HIGH_STRIDE as f64;
        (r - self.row).powi(2) + (c - self.col).powi(2) <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub image_rows: usize,
    pub image_cols: usize,
    pub cells: Vec<CellRecord>,
    /// Background grid cells carrying confound features.
    pub confound_cells: usize,
    pub background_cells: usize,
}

impl Manifest {
    /// Label of the cell containing an image pixel, 0 for background.
    pub fn label_at(&self, y: usize, x: usize) -> u32 {
        self.cells
            .iter()
            .find(|c| c.contains_pixel(y, x))
            .map_or(0, |c| c.label)
    }
}

pub struct Scene {
    pub features: FeaturePair,
    pub gt: LabelMap,
    pub manifest: Manifest,
}

/// Random Fourier approximation of a smooth vector-valued field.
struct DriftField {
    directions: Vec<Vec<f64>>,
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

const DRIFT_TERMS: usize = 24;

impl DriftField {
    /// A field whose values stay inside the span of `subspace`.
    fn new(rng: &mut ChaCha8Rng, subspace: &[Vec<f64>], scale: f64) -> Self {
        let freq = Normal::new(0.0, 1.0 / scale).expect("positive scale");
        let channels = subspace[0].len();
        let mut directions = Vec::with_capacity(DRIFT_TERMS);
        let mut freqs = Vec::with_capacity(DRIFT_TERMS);
        let mut phases = Vec::with_capacity(DRIFT_TERMS);
        for _ in 0..DRIFT_TERMS {
            let mut dir = vec![0.0; channels];
            for e in subspace {
                let g: f64 = StandardNormal.sample(rng);
                dir.iter_mut().zip(e).for_each(|(x, y)| *x += g * y);
            }
            directions.push(unit(dir));
            freqs.push((freq.sample(rng), freq.sample(rng)));
            phases.push(rng.random_range(0.0..2.0 * PI));
        }
        Self {
            directions,
            freqs,
            phases,
        }
    }

    /// Adds `strength * field(row, col)` to `out`.
    fn add_to(&self, out: &mut [f64], row: f64, col: f64, strength: f64) {
        if strength == 0.0 {
            return;
        }
        let norm = (2.0 / DRIFT_TERMS as f64).sqrt() * strength;
        for ((dir, &(fr, fc)), &phase) in self.directions.iter().zip(&self.freqs).zip(&self.phases) {
            let a = norm * (fr * row + fc * col + phase).cos();
            for (o, d) in out.iter_mut().zip(dir) {
                *o += a * d;
            }
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// `k` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Prototypes with pairwise cosine `overlap`: a shared direction plus one
/// private direction each.
fn prototypes(basis: &[Vec<f64>], types: usize, overlap: f64) -> Vec<Vec<f64>> {
    let alpha = (overlap / (1.0 - overlap)).sqrt();
    let common = &basis[types];
    (0..types)
        .map(|t| unit(basis[t].iter().zip(common).map(|(e, c)| e + alpha * c).collect()))
        .collect()
}

/// How strongly background vectors point away from the type prototypes.
const BACKGROUND_REPULSION: f64 = 0.5;

/// Type prototype at a grid position after drift.
struct TypeField {
    base: Vec<Vec<f64>>,
    drift: Vec<DriftField>,
    strength: f64,
}

impl TypeField {
    fn at(&self, t: usize, row: f64, col: f64) -> Vec<f64> {
        let mut v = self.base[t].clone();
        self.drift[t].add_to(&mut v, row, col, self.strength);
        unit(v)
    }
}

/// Radial weight of a cell's own prototype: flat core, linear falloff to the rim.
fn profile(rho: f64) -> f64 {
    const CORE: f64 = 0.5;
    if rho <= CORE {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        (1.0 - rho) / (1.0 - CORE)
    }
}

fn place_cells(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<CellRecord>> {
    const ATTEMPTS_PER_CELL: usize = 4000;
    let regions: Vec<(f64, f64, u32)> = (0..spec.types)
        .flat_map(|t| (0..spec.regions_per_type).map(move |_| t as u32))
        .map(|t| {
            (
                rng.random_range(0.0..spec.grid_rows as f64),
                rng.random_range(0.0..spec.grid_cols as f64),
                t,
            )
        })
        .collect();
    let region_type = |row: f64, col: f64| {
        regions
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - row).powi(2) + (a.1 - col).powi(2);
                let db = (b.0 - row).powi(2) + (b.1 - col).powi(2);
                da.total_cmp(&db)
            })
            .map(|r| r.2)
            .unwrap_or(0)
    };

    let mut cells: Vec<CellRecord> = Vec::with_capacity(spec.cells);
    let mut attempts = 0;
    while cells.len() < spec.cells {
        attempts += 1;
        if attempts > ATTEMPTS_PER_CELL * spec.cells {
            return Err(HarnessError::InfeasiblePacking {
                placed: cells.len(),
                requested: spec.cells,
            });
        }
        let radius = if spec.radius_max > spec.radius_min {
            rng.random_range(spec.radius_min..spec.radius_max)
        } else {
            spec.radius_min
        };
        let margin = radius + 1.0;
        if 2.0 * margin >= spec.grid_rows as f64 || 2.0 * margin >= spec.grid_cols as f64 {
            return Err(HarnessError::InfeasiblePacking {
                placed: 0,
                requested: spec.cells,
            });
        }
        let row = rng.random_range(margin..spec.grid_rows as f64 - margin);
        let col = rng.random_range(margin..spec.grid_cols as f64 - margin);
        let clear = cells.iter().all(|c| {
            let need = c.radius + radius + spec.min_gap;
            (c.row - row).powi(2) + (c.col - col).powi(2) >= need * need
        });
        if clear {
            cells.push(CellRecord {
                label: cells.len() as u32 + 1,
                row,
                col,
                radius,
                cell_type: region_type(row, col),
            });
        }
    }

    // Every type keeps at least one cell: hand it the cell nearest one of its
    // region centres.
    for t in 0..spec.types as u32 {
        if cells.iter().any(|c| c.cell_type == t) {
            continue;
        }
        let (rr, rc, _) = *regions.iter().find(|r| r.2 == t).expect("each type has regions");
        let mut counts = BTreeMap::new();
        for c in &cells {
            *counts.entry(c.cell_type).or_insert(0usize) += 1;
        }
        let pick = cells
            .iter_mut()
            .filter(|c| counts[&c.cell_type] > 1)
            .min_by(|a, b| {
                let da = (a.row - rr).powi(2) + (a.col - rc).powi(2);
                let db = (b.row - rr).powi(2) + (b.col - rc).powi(2);
                da.total_cmp(&db)
            })
            .expect("cells >= types");
        pick.cell_type = t;
    }
    Ok(cells)
}

/// Nearest cell to a point, as (index, normalised radial distance).
fn nearest_cell(cells: &[CellRecord], row: f64, col: f64) -> Option<(usize, f64)> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| (i, ((c.row - row).powi(2) + (c.col - col).powi(2)).sqrt() / c.radius))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols, d, types) = (spec.grid_rows, spec.grid_cols, spec.channels, spec.types);

    let cells = place_cells(spec, &mut rng)?;

    // Basis per level: one private direction per type, a shared direction, a
    // background direction, and the rest split into per-type drift subspaces
    // so that drift never makes two types more alike.
    let high_basis = orthonormal(&mut rng, d, d);
    let low_basis = orthonormal(&mut rng, d, d);
    let per_type = (d - types - 2) / types;
    let drift_space = |basis: &[Vec<f64>], t: usize| {
        let start = types + 2 + t * per_type;
        basis[start..start + per_type].to_vec()
    };
    let low_overlap = (spec.type_margin * PI / 2.0).cos().max(0.0);
    let high = TypeField {
        base: prototypes(&high_basis, types, spec.high_type_overlap),
        drift: (0..types)
            .map(|t| DriftField::new(&mut rng, &drift_space(&high_basis, t), spec.drift_scale))
            .collect(),
        strength: spec.drift,
    };
    let low = TypeField {
        base: prototypes(&low_basis, types, low_overlap.min(0.999)),
        drift: (0..types)
            .map(|t| DriftField::new(&mut rng, &drift_space(&low_basis, t), spec.drift_scale))
            .collect(),
        strength: spec.low_drift,
    };
    let background = |basis: &[Vec<f64>], protos: &[Vec<f64>]| {
        let mut b = basis[types + 1].clone();
        for p in protos {
            b.iter_mut().zip(p).for_each(|(x, y)| *x -= BACKGROUND_REPULSION * y);
        }
        unit(b)
    };
    let high_bg = background(&high_basis, &high.base);
    let low_bg = background(&low_basis, &low.base);

    // Per grid cell: which disc it belongs to and with what weight.
    let n = rows * cols;
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut free = vec![true; n];
    for r in 0..rows {
        for c in 0..cols {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            if let Some((i, rho)) = nearest_cell(&cells, pr, pc) {
                if rho < 1.0 {
                    owner[r * cols + c] = Some((i, profile(rho)));
                }
                let gap = rho * cells[i].radius - cells[i].radius;
                free[r * cols + c] = gap >= spec.min_gap;
            }
        }
    }
    let background_cells = owner.iter().filter(|o| o.is_none()).count();

    // Confound patches: discs of background imitating a type with no cell of
    // its own close by.
    let mut confound: Vec<Option<usize>> = vec![None; n];
    let target = (spec.confound * background_cells as f64).round() as usize;
    let mut covered = 0;
    let mut tries = 0;
    while covered < target && tries < 20_000 {
        tries += 1;
        let cr = rng.random_range(0.0..rows as f64);
        let cc = rng.random_range(0.0..cols as f64);
        let radius: f64 = rng.random_range(2.0..6.0);
        let eligible: Vec<usize> = (0..types)
            .filter(|&t| {
                cells.iter().filter(|c| c.cell_type as usize == t).all(|c| {
                    let d = ((c.row - cr).powi(2) + (c.col - cc).powi(2)).sqrt();
                    d - c.radius - radius >= spec.confound_clearance
                })
            })
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let t = eligible[rng.random_range(0..eligible.len())];
        let (r0, r1) = ((cr - radius).floor().max(0.0) as usize, ((cr + radius).ceil() as usize).min(rows));
        let (c0, c1) = ((cc - radius).floor().max(0.0) as usize, ((cc + radius).ceil() as usize).min(cols));
        for r in r0..r1 {
            for c in c0..c1 {
                let idx = r * cols + c;
                let inside = (r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2) <= radius * radius;
                if inside && free[idx] && confound[idx].is_none() && covered < target {
                    confound[idx] = Some(t);
                    covered += 1;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise / (d as f64).sqrt()).expect("finite noise");
    let conf_mix = (1.0 - spec.confound_similarity.powi(2)).sqrt();

    // High level, channel-major.
    let mut high_data = vec![0f32; d * n];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut v = match confound[idx] {
                Some(t) => high
                    .at(t, pr, pc)
                    .iter()
                    .zip(&high_bg)
                    .map(|(p, b)| spec.confound_similarity * p + conf_mix * b)
                    .collect(),
                None => high_bg.clone(),
            };
            if let Some((i, w)) = owner[idx] {
                let proto = high.at(cells[i].cell_type as usize, pr, pc);
                v.iter_mut().zip(&proto).for_each(|(x, p)| *x = w * p + (1.0 - w) * *x);
            }
            for (ch, x) in v.iter().enumerate() {
                high_data[ch * n + idx] = (x + noise.sample(&mut rng)) as f32;
            }
        }
    }

    // Low level: type indicator field at high resolution, blurred, then
    // average-pooled down by the level ratio.
    let mut fine = vec![0f64; d * n];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let v = match owner[idx] {
                Some((i, _)) => low.at(cells[i].cell_type as usize, pr, pc),
                None => low_bg.iter().map(|x| x * spec.low_background).collect(),
            };
            for (ch, x) in v.iter().enumerate() {
                fine[ch * n + idx] = *x;
            }
        }
    }
    gaussian_blur(&mut fine, d, rows, cols, spec.low_blur);
    let (lrows, lcols) = (rows / LEVEL_RATIO, cols / LEVEL_RATIO);
    let ln = lrows * lcols;
    let mut low_data = vec![0f32; d * ln];
    let pool = (LEVEL_RATIO * LEVEL_RATIO) as f64;
    for ch in 0..d {
        let plane = &fine[ch * n..(ch + 1) * n];
        for lr in 0..lrows {
            for lc in 0..lcols {
                let mut s = 0.0;
                for r in lr * LEVEL_RATIO..(lr + 1) * LEVEL_RATIO {
                    for c in lc * LEVEL_RATIO..(lc + 1) * LEVEL_RATIO {
                        s += plane[r * cols + c];
                    }
                }
                low_data[ch * ln + lr * lcols + lc] = (s / pool + noise.sample(&mut rng)) as f32;
            }
        }
    }

    let high_map = FeatureMap::new(d, rows, cols, Level::High, high_data)?;
    let low_map = FeatureMap::new(d, lrows, lcols, Level::Low, low_data)?;
    let features = FeaturePair::new(high_map, low_map)?;

    let (image_rows, image_cols) = spec.image_dims();
    let manifest = Manifest {
        spec: spec.clone(),
        image_rows,
        image_cols,
        cells,
        confound_cells: covered,
        background_cells,
    };
    let gt = rasterize(&manifest)?;
    Ok(Scene {
        features,
        gt,
        manifest,
    })
}

/// Ground-truth label map at image resolution.
pub fn rasterize(manifest: &Manifest) -> Result<LabelMap> {
    let (rows, cols) = (manifest.image_rows, manifest.image_cols);
    let mut gt = LabelMap::zeros(rows, cols);
    let s = HIGH_STRIDE as f64;
    for cell in &manifest.cells {
        let y0 = ((cell.row - cell.radius) * s).floor().max(0.0) as usize;
        let y1 = (((cell.row + cell.radius) * s).ceil() as usize).min(rows);
        let x0 = ((cell.col - cell.radius) * s).floor().max(0.0) as usize;
        let x1 = (((cell.col + cell.radius) * s).ceil() as usize).min(cols);
        for y in y0..y1 {
            for x in x0..x1 {
                if cell.contains_pixel(y, x) {
                    gt.set(y, x, cell.label);
                }
            }
        }
    }
    let types = manifest.cells.iter().map(|c| (c.label, c.cell_type)).collect();
    Ok(gt.with_types(types)?)
}

/// Separable Gaussian blur of each channel plane, edges clamped.
fn gaussian_blur(data: &mut [f64], channels: usize, rows: usize, cols: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let n = rows * cols;
    let mut tmp = vec![0f64; n];
    for ch in 0..channels {
        let plane = &mut data[ch * n..(ch + 1) * n];
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let cc = (c as isize + k as isize - radius).clamp(0, cols as isize - 1) as usize;
                    s += w * plane[r * cols + cc];
                }
                tmp[r * cols + c] = s;
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let rr = (r as isize + k as isize - radius).clamp(0, rows as isize - 1) as usize;
                    s += w * tmp[rr * cols + c];
                }
                plane[r * cols + c] = s;
            }
        }
    }
}

/// Paths written by [`write_scene`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenePaths {
    pub high: PathBuf,
    pub low: PathBuf,
    pub gt: PathBuf,
    pub types: PathBuf,
    pub manifest: PathBuf,
}

pub fn scene_paths(dir: impl AsRef<Path>, stem: &str) -> ScenePaths {
    let dir = dir.as_ref();
    let (high, low) = feature_paths(dir, stem);
    ScenePaths {
        high,
        low,
        gt: dir.join(format!("{stem}.gt.png")),
        types: dir.join(format!("{stem}.types.json")),
        manifest: dir.join(format!("{stem}.manifest.json")),
    }
}

pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>, stem: &str) -> Result<ScenePaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let paths = scene_paths(dir, stem);
    write_tensor_file(scene.features.high(), &paths.high)?;
    write_tensor_file(scene.features.low(), &paths.low)?;
    scene.gt.write(&paths.gt)?;
    write_type_sidecar(&paths.types, scene.gt.types().expect("synthetic ground truth is typed"))?;
    let json = serde_json::to_string_pretty(&scene.manifest).expect("manifest serializes");
    std::fs::write(&paths.manifest, json).map_err(|e| HarnessError::io(&paths.manifest, e))?;
    Ok(paths)
}

/// Scene `index` of a suite: the base spec with a derived seed.
pub fn suite_spec(base: &SceneSpec, index: usize) -> SceneSpec {
    SceneSpec {
        seed: base.seed.wrapping_add(index as u64),
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            grid_rows: 64,
            grid_cols: 64,
            cells: 12,
            channels: 32,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.features.high().data(), b.features.high().data());
        assert_eq!(a.features.low().data(), b.features.low().data());
        assert_eq!(a.gt, b.gt);
        let c = generate(&SceneSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.features.high().data(), c.features.high().data());
    }

    #[test]
    fn layout_matches_manifest() {
        let s = generate(&small()).unwrap();
        let m = &s.manifest;
        assert_eq!(m.cells.len(), 12);
        assert_eq!(s.gt.instance_ids().len(), 12);
        assert_eq!(s.gt.present_types(), vec![0, 1, 2]);
        for (i, a) in m.cells.iter().enumerate() {
            for b in &m.cells[i + 1..] {
                let d = ((a.row - b.row).powi(2) + (a.col - b.col).powi(2)).sqrt();
                assert!(d >= a.radius + b.radius + m.spec.min_gap - 1e-9);
            }
            let (y, x) = ((a.row * 4.0) as usize, (a.col * 4.0) as usize);
            assert_eq!(s.gt.get(y, x), a.label);
            assert_eq!(m.label_at(y, x), a.label);
        }
        let target = (m.spec.confound * m.background_cells as f64).round() as usize;
        assert!(m.confound_cells <= target);
        assert!(m.confound_cells as f64 >= 0.5 * target as f64);
    }

    #[test]
    fn infeasible_packing_is_an_error() {
        let spec = SceneSpec {
            grid_rows: 16,
            grid_cols: 16,
            cells: 40,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(HarnessError::InfeasiblePacking { .. })));
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SceneSpec { types: 0, ..small() },
            SceneSpec { cells: 2, types: 3, ..small() },
            SceneSpec { confound: 1.0, ..small() },
            SceneSpec { type_margin: 0.0, ..small() },
            SceneSpec { grid_rows: 30, ..small() },
        ] {
            assert!(matches!(generate(&spec), Err(HarnessError::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn write_scene_round_trips() {
        let s = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write_scene(&s, dir.path(), "scene").unwrap();
        let high = cop_core::npy::read_tensor_file(&p.high, Level::High).unwrap();
        assert_eq!(high.data(), s.features.high().data());
        let gt = LabelMap::read(&p.gt).unwrap();
        assert_eq!(gt.labels(), s.gt.labels());
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p.manifest).unwrap()).unwrap();
        assert_eq!(m, s.manifest);
    }
}
