//! Tensor interchange files (`.npy` version 1.0, little-endian `f4`, C order).
//!
//! Encoders outside this crate write one pair of files per image:
//! `<stem>.fh.npy` (high level, shape `(D, H/4, W/4)`) and `<stem>.fl.npy`
//! (low level, shape `(D, H/16, W/16)`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Level};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

/// Shape plus row-major payload of a decoded `f4` array.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = PREAMBLE + header.len() + 1;
    let padded = unpadded.div_ceil(ALIGN) * ALIGN;
    header.extend(std::iter::repeat_n(' ', padded - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(padded + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < PREAMBLE || &bytes[..6] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            message: "missing \\x93NUMPY signature".into(),
        });
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {}.{}", bytes[6], bytes[7]),
        });
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE + header_len;
    let header = bytes
        .get(PREAMBLE..payload_start)
        .ok_or_else(|| Error::Format {
            field: "header_len",
            message: format!("header length {header_len} runs past end of file"),
        })?;
    let header = std::str::from_utf8(header).map_err(|_| Error::Format {
        field: "header",
        message: "header is not ASCII".into(),
    })?;

    let descr = dict_value(header, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    if descr != "<f4" {
        return Err(Error::UnsupportedDtype(descr.to_string()));
    }
    match dict_value(header, "fortran_order")? {
        "False" => {}
        other => {
            return Err(Error::Format {
                field: "fortran_order",
                message: format!("only C order is supported, got {other}"),
            })
        }
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;

    let payload = &bytes[payload_start..];
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            field: "shape",
            message: format!("{shape:?} overflows"),
        })?;
    if expected.checked_mul(4) != Some(payload.len()) {
        return Err(Error::PayloadSize {
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NpyArray { shape, data })
}

/// Returns the raw text of `key`'s value inside the header dict literal.
fn dict_value<'a>(header: &'a str, key: &'static str) -> Result<&'a str> {
    let missing = || Error::Format {
        field: key,
        message: "key not found in header".into(),
    };
    let at = header
        .find(&format!("'{key}'"))
        .or_else(|| header.find(&format!("\"{key}\"")))
        .ok_or_else(missing)?;
    let rest = &header[at + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':').ok_or_else(missing)?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| Error::Format {
        field: key,
        message: "unterminated value".into(),
    })?;
    Ok(rest[..end].trim())
}

fn parse_shape(raw: &str) -> Result<Vec<usize>> {
    let inner = raw
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format {
            field: "shape",
            message: format!("expected a tuple, got {raw}"),
        })?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>().map_err(|_| Error::Format {
                field: "shape",
                message: format!("bad dimension `{s}`"),
            })
        })
        .collect()
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_array(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(shape, data)).map_err(|e| Error::io(path, e))
}

pub fn feature_map_from_array(array: NpyArray, level: Level) -> Result<FeatureMap> {
    match array.shape.as_slice() {
        &[d, h, w] => FeatureMap::new(d, h, w, level, array.data),
        other => Err(Error::Format {
            field: "shape",
            message: format!("feature maps need a 3-D shape (D, h, w), got {other:?}"),
        }),
    }
}

pub fn read_tensor_file(path: impl AsRef<Path>, level: Level) -> Result<FeatureMap> {
    feature_map_from_array(read_array(path)?, level)
}

pub fn write_tensor_file(f: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_array(path, &f.shape(), f.data())
}

/// `(<stem>.fh.npy, <stem>.fl.npy)` next to each other in `dir`.
pub fn feature_paths(dir: impl AsRef<Path>, stem: &str) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join(format!("{stem}.fh.npy")), dir.join(format!("{stem}.fl.npy")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_aligned() {
        let bytes = encode(&[2, 3, 3], &[0.5; 18]);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((PREAMBLE + header_len) % ALIGN, 0);
        assert_eq!(bytes[PREAMBLE + header_len - 1], b'\n');
        assert_eq!(bytes.len(), PREAMBLE + header_len + 18 * 4);
        let text = std::str::from_utf8(&bytes[PREAMBLE..PREAMBLE + header_len]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 3), }"));
    }

    #[test]
    fn short_payload_is_rejected() {
        let mut bytes = encode(&[2, 3, 3], &[1.0; 18]);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode(&bytes),
            Err(Error::PayloadSize { expected: 18, actual: 17 })
        ));
    }

    #[test]
    fn big_endian_is_rejected() {
        let header = "{'descr': '>f4', 'fortran_order': False, 'shape': (1, 1, 1), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        let mut h = header.to_string();
        let pad = (PREAMBLE + h.len() + 1).div_ceil(ALIGN) * ALIGN - (PREAMBLE + h.len() + 1);
        h.extend(std::iter::repeat_n(' ', pad));
        h.push('\n');
        bytes.extend_from_slice(&(h.len() as u16).to_le_bytes());
        bytes.extend_from_slice(h.as_bytes());
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDtype(d)) if d == ">f4"));
    }

    #[test]
    fn overflowing_shape_is_rejected() {
        let mut bytes = encode(&[1, 1, 1], &[1.0]);
        let at = bytes.windows(9).position(|w| w == b"(1, 1, 1)").unwrap();
        let huge = b"(4294967296, 4294967296, 9)";
        let mut patched = bytes[..at].to_vec();
        patched.extend_from_slice(huge);
        patched.extend_from_slice(&bytes[at + 9..]);
        // Keep the declared header length in step with the edit.
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize + huge.len() - 9;
        patched[8..10].copy_from_slice(&(header_len as u16).to_le_bytes());
        bytes = patched;
        assert!(matches!(decode(&bytes), Err(Error::Format { field: "shape", .. })));
    }

    #[test]
    fn bad_magic_and_fortran_order() {
        assert!(matches!(decode(b"NOTNUMPY.."), Err(Error::Format { field: "magic", .. })));
        let mut bytes = encode(&[1], &[1.0]);
        let at = bytes.windows(5).position(|w| w == b"False").unwrap();
        bytes[at..at + 5].copy_from_slice(b"True ");
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format { field: "fortran_order", .. })
        ));
    }

    #[test]
    fn parses_numpy_written_headers() {
        // Byte layout produced by numpy.save for a float32 array of shape (2, 2).
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }";
        let mut h = header.to_string();
        let pad = 128 - PREAMBLE - h.len() - 1;
        h.extend(std::iter::repeat_n(' ', pad));
        h.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(h.len() as u16).to_le_bytes());
        bytes.extend_from_slice(h.as_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let a = decode(&bytes).unwrap();
        assert_eq!(a.shape, vec![2, 2]);
        assert_eq!(a.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMap::new(2, 3, 4, Level::Low, (0..24).map(|i| i as f32 / 7.0).collect()).unwrap();
        let (_, fl) = feature_paths(dir.path(), "img");
        write_tensor_file(&f, &fl).unwrap();
        assert_eq!(read_tensor_file(&fl, Level::Low).unwrap(), f);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x7f7f_ffff))
                .collect();
            let back = decode(&encode(&shape, &data)).unwrap();
            prop_assert_eq!(back.shape, shape);
            prop_assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
