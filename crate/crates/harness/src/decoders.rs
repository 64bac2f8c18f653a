//! Decoder selection for evaluation runs.

use std::path::{Path, PathBuf};
use std::process::Command;

use cop_core::decode::{BinaryMask, Decoded, DecoderAdapter, ReferenceDecoder};
use cop_core::hsg::GatingVariant;
use cop_core::labels::LabelMap;
use cop_core::npy;
use cop_core::tensor::ImagePoint;
use cop_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    /// Component of the gated similarity map around the point.
    Reference {
        #[serde(default)]
        gating: GatingVariant,
    },
    /// Returns the ground-truth instance under the point. For wiring checks.
    GroundTruth,
    /// Runs an external program once per point.
    ///
    /// Argument placeholders: `{x}`, `{y}`, `{fh}`, `{fl}`, `{image}`, `{out}`.
    /// The program writes an `f4` mask of shape `(H, W)` to `{out}` (non-zero
    /// is foreground) and may print a confidence in `[0, 1]` on stdout.
    Command { program: String, args: Vec<String> },
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self::Reference {
            gating: GatingVariant::Product,
        }
    }
}

impl DecoderSpec {
    pub fn build<'a>(&self, scene: &'a SceneData) -> crate::Result<Box<dyn DecoderAdapter + 'a>> {
        Ok(match self {
            Self::Reference { gating } => Box::new(ReferenceDecoder::new(&scene.features, *gating)),
            Self::GroundTruth => {
                let gt = scene.gt.as_ref().ok_or_else(|| {
                    crate::HarnessError::Decoder(format!("scene `{}` has no ground truth", scene.name))
                })?;
                Box::new(GroundTruthDecoder { gt })
            }
            Self::Command { program, args } => {
                let files = scene.files.as_ref().ok_or_else(|| {
                    crate::HarnessError::Decoder(format!(
                        "scene `{}` is in memory; command decoders need on-disk features",
                        scene.name
                    ))
                })?;
                Box::new(CommandDecoder {
                    program: program.clone(),
                    args: args.clone(),
                    fh: files.high.clone(),
                    fl: files.low.clone(),
                    image: files.image.clone(),
                    image_dims: scene.features.image_dims(),
                })
            }
        })
    }
}

pub struct GroundTruthDecoder<'a> {
    pub gt: &'a LabelMap,
}

impl DecoderAdapter for GroundTruthDecoder<'_> {
    fn decode(&self, point: ImagePoint) -> cop_core::Result<Decoded> {
        let (y, x) = (point.y as usize, point.x as usize);
        if y >= self.gt.rows() || x >= self.gt.cols() {
            return Err(CoreError::OutOfBounds {
                row: y as i64,
                col: x as i64,
                rows: self.gt.rows(),
                cols: self.gt.cols(),
            });
        }
        let label = self.gt.get(y, x);
        if label == 0 {
            return Err(CoreError::DecodeFailed {
                x: point.x,
                y: point.y,
                reason: "background".into(),
            });
        }
        let cols = self.gt.cols();
        let pixels = self
            .gt
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| (i / cols, i % cols));
        Ok(Decoded {
            mask: BinaryMask::from_pixels(self.gt.rows(), cols, pixels)?,
            confidence: 1.0,
        })
    }
}

pub struct CommandDecoder {
    program: String,
    args: Vec<String>,
    fh: PathBuf,
    fl: PathBuf,
    image: Option<PathBuf>,
    image_dims: (usize, usize),
}

impl CommandDecoder {
    fn fail(point: ImagePoint, reason: impl Into<String>) -> CoreError {
        CoreError::DecodeFailed {
            x: point.x,
            y: point.y,
            reason: reason.into(),
        }
    }

    fn expand(&self, arg: &str, point: ImagePoint, out: &Path) -> String {
        let path = |p: &Path| p.display().to_string();
        arg.replace("{x}", &point.x.to_string())
            .replace("{y}", &point.y.to_string())
            .replace("{fh}", &path(&self.fh))
            .replace("{fl}", &path(&self.fl))
            .replace("{image}", &self.image.as_deref().map(path).unwrap_or_default())
            .replace("{out}", &path(out))
    }
}

impl DecoderAdapter for CommandDecoder {
    fn decode(&self, point: ImagePoint) -> cop_core::Result<Decoded> {
        let dir = tempfile::tempdir().map_err(|e| Self::fail(point, e.to_string()))?;
        let out = dir.path().join("mask.npy");
        let args: Vec<String> = self.args.iter().map(|a| self.expand(a, point, &out)).collect();
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| Self::fail(point, format!("cannot run `{}`: {e}", self.program)))?;
        if !output.status.success() {
            return Err(Self::fail(
                point,
                format!(
                    "`{}` exited with {}: {}",
                    self.program,
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
            ));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let confidence = match stdout.split_whitespace().next() {
            Some(tok) => tok
                .parse::<f64>()
                .map_err(|_| Self::fail(point, format!("confidence `{tok}` is not a number")))?,
            None => 1.0,
        };
        let mask = LabelMap::from_array(npy::read_array(&out)?)?;
        if (mask.rows(), mask.cols()) != self.image_dims {
            return Err(Self::fail(
                point,
                format!("mask is {}x{}, image is {:?}", mask.rows(), mask.cols(), self.image_dims),
            ));
        }
        let dense: Vec<bool> = mask.labels().iter().map(|&l| l != 0).collect();
        Ok(Decoded {
            mask: BinaryMask::from_dense(mask.rows(), mask.cols(), &dense)?,
            confidence,
        })
    }
}
