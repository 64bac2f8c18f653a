//! Hook for an external feature encoder.
//!
//! The encoder is user territory: a command that reads an image and writes the
//! two interchange files. Placeholders `{image}`, `{fh}` and `{fl}` in the
//! arguments are replaced by the paths.

use std::path::{Path, PathBuf};
use std::process::Command;

use cop_core::npy::read_tensor_file;
use cop_core::tensor::{FeaturePair, Level};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl ExtractCommand {
    /// Parses a shell-like command line split on whitespace. No quoting.
    pub fn parse(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| HarnessError::Config("empty extract command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    /// Runs the encoder on `image`, writing `<stem>.fh.npy` and `<stem>.fl.npy`
    /// into `out_dir`, and loads the result.
    pub fn run(&self, image: &Path, out_dir: &Path, stem: &str) -> Result<(FeaturePair, PathBuf, PathBuf)> {
        let fh = out_dir.join(format!("{stem}.fh.npy"));
        let fl = out_dir.join(format!("{stem}.fl.npy"));
        let show = |p: &Path| p.display().to_string();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{image}", &show(image))
                    .replace("{fh}", &show(&fh))
                    .replace("{fl}", &show(&fl))
            })
            .collect();
        tracing::info!(program = %self.program, image = %image.display(), "extracting features");
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| HarnessError::input(image, format!("cannot run `{}`: {e}", self.program)))?;
        if !output.status.success() {
            return Err(HarnessError::input(
                image,
                format!(
                    "`{}` exited with {}: {}",
                    self.program,
                    output.status,
                    String::from_utf8_lossy(&output.stderr).trim()
                ),
            ));
        }
        for p in [&fh, &fl] {
            if !p.is_file() {
                return Err(HarnessError::input(p, "extract command did not write this file"));
            }
        }
        let high = read_tensor_file(&fh, Level::High).map_err(|e| HarnessError::input(&fh, e.to_string()))?;
        let low = read_tensor_file(&fl, Level::Low).map_err(|e| HarnessError::input(&fl, e.to_string()))?;
        let pair = FeaturePair::new(high, low).map_err(|e| HarnessError::input(&fh, e.to_string()))?;
        Ok((pair, fh, fl))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_splits_on_whitespace() {
        let c = ExtractCommand::parse("  enc --in {image}  --out {fh} {fl}").unwrap();
        assert_eq!(c.program, "enc");
        assert_eq!(c.args, ["--in", "{image}", "--out", "{fh}", "{fl}"]);
        assert!(ExtractCommand::parse("   ").is_err());
    }

    #[test]
    fn failing_command_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExtractCommand::parse("false").unwrap();
        let err = c.run(Path::new("img.png"), dir.path(), "s").unwrap_err();
        assert!(err.to_string().contains("exited"), "{err}");
    }

    #[test]
    fn missing_outputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExtractCommand::parse("true").unwrap();
        let err = c.run(Path::new("img.png"), dir.path(), "s").unwrap_err();
        assert!(err.to_string().contains("did not write"), "{err}");
    }
}
