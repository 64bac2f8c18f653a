//! Integer instance label maps and their on-disk forms.
//!
//! Label maps are stored as 16-bit single-channel PNGs or as `f4` interchange
//! arrays of shape `(H, W)` / `(1, H, W)`. Cell types live in an optional JSON
//! sidecar mapping label id to type id: `{"1": 0, "2": 2}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::npy;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<u32>,
    types: Option<BTreeMap<u32, u32>>,
}

impl LabelMap {
    pub fn new(rows: usize, cols: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "label map {rows}x{cols} needs {} labels, got {}",
                rows * cols,
                labels.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            labels,
            types: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            labels: vec![0; rows * cols],
            types: None,
        }
    }

    /// Attaches a label → cell type table. Every non-zero label must be typed.
    pub fn with_types(mut self, types: BTreeMap<u32, u32>) -> Result<Self> {
        if let Some(missing) = self.instance_ids().into_iter().find(|id| !types.contains_key(id)) {
            return Err(Error::InvalidArgument(format!("label {missing} has no cell type")));
        }
        self.types = Some(types);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        self.labels[row * self.cols + col] = label;
    }

    pub fn types(&self) -> Option<&BTreeMap<u32, u32>> {
        self.types.as_ref()
    }

    /// Cell type of an instance. Untyped maps put every instance in type 0.
    pub fn type_of(&self, label: u32) -> Option<u32> {
        match &self.types {
            Some(t) => t.get(&label).copied(),
            None if label != 0 => Some(0),
            None => None,
        }
    }

    /// Distinct non-zero labels in ascending order.
    pub fn instance_ids(&self) -> Vec<u32> {
        self.labels
            .iter()
            .filter(|&&l| l != 0)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Cell types that own at least one instance present in the map.
    pub fn present_types(&self) -> Vec<u32> {
        self.instance_ids()
            .into_iter()
            .filter_map(|id| self.type_of(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn check_same_dims(&self, other: &LabelMap) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "label maps are {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        if let Some(&l) = self.labels.iter().find(|&&l| l > u16::MAX as u32) {
            return Err(Error::InvalidArgument(format!("label {l} does not fit in 16 bits")));
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut out), self.cols as u32, self.rows as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut writer = enc.write_header().map_err(png_err)?;
            let bytes: Vec<u8> = self.labels.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
            writer.write_image_data(&bytes).map_err(png_err)?;
        }
        Ok(out)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        Self::decode_png(decoder)
    }

    fn decode_png<R: std::io::BufRead + std::io::Seek>(decoder: png::Decoder<R>) -> Result<Self> {
        let mut reader = decoder.read_info().map_err(png_err)?;
        let info = reader.info();
        let (cols, rows) = (info.width as usize, info.height as usize);
        if info.color_type != png::ColorType::Grayscale {
            return Err(Error::Format {
                field: "color_type",
                message: format!("label PNGs must be single-channel, got {:?}", info.color_type),
            });
        }
        let depth = info.bit_depth;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(rows * cols * 2)];
        let frame = reader.next_frame(&mut buf).map_err(png_err)?;
        let buf = &buf[..frame.buffer_size()];
        let labels = match depth {
            png::BitDepth::Sixteen => buf
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect(),
            png::BitDepth::Eight => buf.iter().map(|&b| b as u32).collect(),
            other => {
                return Err(Error::Format {
                    field: "bit_depth",
                    message: format!("unsupported label PNG depth {other:?}"),
                })
            }
        };
        Self::new(rows, cols, labels)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(png::Decoder::new(BufReader::new(file)))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_npy_bytes(&self) -> Vec<u8> {
        let data: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        npy::encode(&[self.rows, self.cols], &data)
    }

    pub fn from_array(array: npy::NpyArray) -> Result<Self> {
        let (rows, cols) = match array.shape.as_slice() {
            &[h, w] | &[1, h, w] => (h, w),
            other => {
                return Err(Error::Format {
                    field: "shape",
                    message: format!("label maps need shape (H, W) or (1, H, W), got {other:?}"),
                })
            }
        };
        let labels = array
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::Format {
                        field: "payload",
                        message: format!("label value {v} is not a non-negative integer"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, labels)
    }

    /// Reads a label map from `.png` or `.npy`, chosen by extension.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("npy") => Self::from_array(npy::read_array(path)?),
            _ => Self::read_png(path),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("npy") => std::fs::write(path, self.to_npy_bytes()).map_err(|e| Error::io(path, e)),
            _ => self.write_png(path),
        }
    }
}

pub fn parse_type_sidecar(json: &str) -> Result<BTreeMap<u32, u32>> {
    let raw: BTreeMap<String, u32> = serde_json::from_str(json).map_err(|e| Error::Format {
        field: "types",
        message: e.to_string(),
    })?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim().parse::<u32>().map(|k| (k, v)).map_err(|_| Error::Format {
                field: "types",
                message: format!("label id `{k}` is not an integer"),
            })
        })
        .collect()
}

pub fn type_sidecar_json(types: &BTreeMap<u32, u32>) -> String {
    let raw: BTreeMap<String, u32> = types.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    serde_json::to_string_pretty(&raw).expect("string map serializes")
}

pub fn read_type_sidecar(path: impl AsRef<Path>) -> Result<BTreeMap<u32, u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_type_sidecar(&text)
}

pub fn write_type_sidecar(path: impl AsRef<Path>, types: &BTreeMap<u32, u32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, type_sidecar_json(types).as_bytes()).map_err(|e| Error::io(path, e))
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format {
        field: "png",
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabelMap {
        LabelMap::new(2, 3, vec![0, 1, 1, 700, 0, 2]).unwrap()
    }

    #[test]
    fn png_and_npy_round_trip() {
        let m = sample();
        assert_eq!(LabelMap::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m);
        assert_eq!(LabelMap::from_array(npy::decode(&m.to_npy_bytes()).unwrap()).unwrap(), m);

        let dir = tempfile::tempdir().unwrap();
        for name in ["gt.png", "gt.npy"] {
            let p = dir.path().join(name);
            m.write(&p).unwrap();
            assert_eq!(LabelMap::read(&p).unwrap(), m);
        }
    }

    #[test]
    fn types_and_instances() {
        let m = sample();
        assert_eq!(m.instance_ids(), vec![1, 2, 700]);
        assert_eq!(m.type_of(2), Some(0));
        assert_eq!(m.present_types(), vec![0]);
        let typed = m
            .clone()
            .with_types(BTreeMap::from([(1, 0), (2, 3), (700, 3)]))
            .unwrap();
        assert_eq!(typed.present_types(), vec![0, 3]);
        assert!(m.with_types(BTreeMap::from([(1, 0)])).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let t = BTreeMap::from([(1, 0), (12, 2)]);
        assert_eq!(parse_type_sidecar(&type_sidecar_json(&t)).unwrap(), t);
        assert!(parse_type_sidecar("{\"x\": 1}").is_err());
    }

    #[test]
    fn rejects_fractional_labels() {
        let arr = npy::NpyArray {
            shape: vec![1, 2],
            data: vec![1.0, 0.5],
        };
        assert!(LabelMap::from_array(arr).is_err());
    }
}
