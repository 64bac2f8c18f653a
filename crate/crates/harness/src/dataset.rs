//! Scene loading: synthetic suites, directories of interchange files, or an
//! explicit file set.

use std::path::{Path, PathBuf};

use cop_core::labels::{read_type_sidecar, LabelMap};
use cop_core::npy::read_tensor_file;
use cop_core::tensor::{FeaturePair, Level};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synth::{generate, suite_spec, Manifest, SceneSpec};

/// On-disk inputs of one scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub high: PathBuf,
    pub low: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

pub struct SceneData {
    pub name: String,
    pub features: FeaturePair,
    pub gt: Option<LabelMap>,
    pub files: Option<SceneFiles>,
    pub manifest: Option<Manifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `scenes` generated scenes; scene `i` uses seed `spec.seed + i`.
    Synthetic {
        #[serde(default = "default_scene_count")]
        scenes: usize,
        #[serde(default)]
        spec: SceneSpec,
    },
    /// Every `<stem>.fh.npy` with a sibling `<stem>.fl.npy`; ground truth from
    /// `<stem>.gt.png` or `<stem>.gt.npy`, types from `<stem>.types.json`.
    Directory { path: PathBuf },
    Files(SceneFiles),
}

fn default_scene_count() -> usize {
    100
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic {
            scenes: default_scene_count(),
            spec: SceneSpec::default(),
        }
    }
}

pub fn synthetic_suite(base: &SceneSpec, count: usize) -> Result<Vec<SceneData>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = suite_spec(base, i);
            let scene = generate(&spec)?;
            Ok(SceneData {
                name: format!("synth-{:04}", spec.seed),
                features: scene.features,
                gt: Some(scene.gt),
                files: None,
                manifest: Some(scene.manifest),
            })
        })
        .collect()
}

pub fn load(spec: &DatasetSpec) -> Result<Vec<SceneData>> {
    match spec {
        DatasetSpec::Synthetic { scenes, spec } => synthetic_suite(spec, *scenes),
        DatasetSpec::Directory { path } => scan_directory(path)?.into_iter().map(load_files).collect(),
        DatasetSpec::Files(files) => Ok(vec![load_files(files.clone())?]),
    }
}

/// Scene file sets found in `dir`, sorted by stem.
pub fn scan_directory(dir: &Path) -> Result<Vec<SceneFiles>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| HarnessError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".fh.npy") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(HarnessError::input(dir, "no `<stem>.fh.npy` files found"));
    }
    stems
        .iter()
        .map(|stem| {
            let existing = |suffixes: &[&str]| {
                suffixes
                    .iter()
                    .map(|s| dir.join(format!("{stem}{s}")))
                    .find(|p| p.is_file())
            };
            let low = dir.join(format!("{stem}.fl.npy"));
            if !low.is_file() {
                return Err(HarnessError::input(&low, "missing low-level features for this stem"));
            }
            Ok(SceneFiles {
                high: dir.join(format!("{stem}.fh.npy")),
                low,
                gt: existing(&[".gt.png", ".gt.npy"]),
                types: existing(&[".types.json"]),
                image: existing(&[".png", ".jpg", ".jpeg", ".tif", ".tiff"]),
            })
        })
        .collect()
}

fn with_path(path: &Path) -> impl Fn(cop_core::Error) -> HarnessError + '_ {
    move |e| HarnessError::input(path, e.to_string())
}

fn load_files(files: SceneFiles) -> Result<SceneData> {
    let high = read_tensor_file(&files.high, Level::High).map_err(with_path(&files.high))?;
    let low = read_tensor_file(&files.low, Level::Low).map_err(with_path(&files.low))?;
    let features = FeaturePair::new(high, low).map_err(with_path(&files.high))?;
    let gt = match &files.gt {
        Some(path) => {
            let mut gt = LabelMap::read(path).map_err(with_path(path))?;
            if let Some(types) = &files.types {
                let table = read_type_sidecar(types).map_err(with_path(types))?;
                gt = gt.with_types(table).map_err(with_path(types))?;
            }
            if (gt.rows(), gt.cols()) != features.image_dims() {
                return Err(HarnessError::input(
                    path,
                    format!(
                        "ground truth is {}x{} but the features imply {:?}",
                        gt.rows(),
                        gt.cols(),
                        features.image_dims()
                    ),
                ));
            }
            Some(gt)
        }
        None => None,
    };
    let name = files
        .high
        .file_name()
        .map(|n| n.to_string_lossy().trim_end_matches(".fh.npy").to_string())
        .unwrap_or_default();
    Ok(SceneData {
        name,
        features,
        gt,
        files: Some(files),
        manifest: None,
    })
}
