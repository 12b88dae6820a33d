//! NPY container reading and writing.
//!
//! Supports format versions 1.0 and 2.0, C-order payloads, and the dtypes
//! `u1`, `f4` and `f8` (either byte order for floats). The header is a Python
//! dict literal padded with spaces and a trailing newline so that the payload
//! starts on a 64-byte boundary.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Volume;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an NPY file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported NPY format version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed NPY header: {0}")]
    MalformedHeader(String),
    #[error("fortran-order payloads are not supported")]
    FortranOrder,
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("expected a rank-3 (slices, height, width) array, got shape {0:?}")]
    BadRank(Vec<usize>),
    #[error("payload holds {actual} bytes, shape and dtype require {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("refusing to write an empty volume")]
    EmptyVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32 { big_endian: bool },
    F64 { big_endian: bool },
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self, NpyError> {
        let unsupported = || NpyError::UnsupportedDtype(descr.to_string());
        let (order, code) = match descr.chars().next() {
            Some('<' | '>' | '|' | '=') => descr.split_at(1),
            _ => ("", descr),
        };
        let big_endian = order == ">";
        match code {
            "u1" | "B" => Ok(Dtype::U8),
            "f4" if order != "|" => Ok(Dtype::F32 { big_endian }),
            "f8" if order != "|" => Ok(Dtype::F64 { big_endian }),
            _ => Err(unsupported()),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 { .. } => 4,
            Dtype::F64 { .. } => 8,
        }
    }

    fn is_float(self) -> bool {
        !matches!(self, Dtype::U8)
    }
}

/// Decoded array with values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parse the `{'descr': ..., 'fortran_order': ..., 'shape': (...), }` literal.
fn parse_header(text: &str) -> Result<HeaderDict, NpyError> {
    let bad = |m: &str| NpyError::MalformedHeader(m.to_string());
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict literal"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad("expected quoted key"))?;
        let end = rest[1..].find(quote).ok_or_else(|| bad("unterminated key"))? + 1;
        let key = &rest[1..end];
        rest = rest[end + 1..].trim_start().strip_prefix(':').ok_or_else(|| bad("expected ':'"))?.trim_start();
        match key {
            "descr" => {
                let q = rest.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad("descr must be a string"))?;
                let e = rest[1..].find(q).ok_or_else(|| bad("unterminated descr"))? + 1;
                descr = Some(rest[1..e].to_string());
                rest = &rest[e + 1..];
            }
            "fortran_order" => {
                if let Some(r) = rest.strip_prefix("True") {
                    fortran = Some(true);
                    rest = r;
                } else if let Some(r) = rest.strip_prefix("False") {
                    fortran = Some(false);
                    rest = r;
                } else {
                    return Err(bad("fortran_order must be True or False"));
                }
            }
            "shape" => {
                let r = rest.strip_prefix('(').ok_or_else(|| bad("shape must be a tuple"))?;
                let e = r.find(')').ok_or_else(|| bad("unterminated shape tuple"))?;
                let dims = r[..e]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("shape entries must be integers"))?;
                shape = Some(dims);
                rest = &r[e + 1..];
            }
            other => return Err(NpyError::MalformedHeader(format!("unexpected key {other:?}"))),
        }
        rest = rest.trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
        } else if !rest.is_empty() {
            return Err(bad("expected ',' between entries"));
        }
    }
    Ok(HeaderDict {
        descr: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

/// Decode an NPY byte buffer of any rank.
pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, start) = match major {
        1 => {
            let b = bytes.get(8..10).ok_or_else(|| NpyError::MalformedHeader("truncated length".into()))?;
            (u16::from_le_bytes([b[0], b[1]]) as usize, 10)
        }
        2 => {
            let b = bytes.get(8..12).ok_or_else(|| NpyError::MalformedHeader("truncated length".into()))?;
            (u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize, 12)
        }
        _ => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let header = bytes
        .get(start..start + header_len)
        .ok_or_else(|| NpyError::MalformedHeader("header extends past end of file".into()))?;
    let text = std::str::from_utf8(header).map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    let dict = parse_header(text)?;
    if dict.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let dtype = Dtype::parse(&dict.descr)?;
    let count: usize = dict.shape.iter().product();
    let payload = &bytes[start + header_len..];
    let expected = count * dtype.size();
    if payload.len() != expected {
        return Err(NpyError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::U8 => payload.iter().map(|&b| b as Scalar).collect(),
        Dtype::F32 { big_endian } => payload
            .chunks_exact(4)
            .map(|c| {
                let a = [c[0], c[1], c[2], c[3]];
                (if big_endian { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }) as Scalar
            })
            .collect(),
        Dtype::F64 { big_endian } => payload
            .chunks_exact(8)
            .map(|c| {
                let a: [u8; 8] = c.try_into().expect("chunk of 8");
                if big_endian {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                }
            })
            .collect(),
    };
    Ok(NpyArray {
        dtype,
        shape: dict.shape,
        data,
    })
}

/// Rescale to [0,1]. Float data already inside [0,1] is kept verbatim;
/// anything else is min-max normalised over the whole volume (a constant
/// volume maps to zeros).
pub fn normalize_intensities(data: &mut [Scalar], is_float: bool) {
    let (lo, hi) = data
        .iter()
        .fold((Scalar::INFINITY, Scalar::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if is_float && lo >= 0.0 && hi <= 1.0 {
        return;
    }
    let range = hi - lo;
    for x in data.iter_mut() {
        *x = if range > 0.0 { (*x - lo) / range } else { 0.0 };
    }
}

/// Decode a `(slices, height, width)` volume with intensities in [0,1].
pub fn decode_volume(bytes: &[u8]) -> Result<Tensor, NpyError> {
    let mut arr = parse_npy(bytes)?;
    if arr.shape.len() != 3 {
        return Err(NpyError::BadRank(arr.shape));
    }
    normalize_intensities(&mut arr.data, arr.dtype.is_float());
    Ok(Tensor::new(arr.shape, arr.data).expect("payload length checked"))
}

/// Read an exam; the exam id is the file stem and the label is unknown (0)
/// until joined with a label manifest.
pub fn read_npy(path: &Path) -> Result<Volume, NpyError> {
    let bytes = fs::read(path)?;
    let slices = decode_volume(&bytes)?;
    let exam_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let plane = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| super::DEFAULT_PLANE.to_string());
    Ok(Volume {
        exam_id,
        slices,
        label: 0,
        plane,
    })
}

/// Serialise a tensor as little-endian float32 NPY.
pub fn encode_npy_f32(t: &Tensor) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    let (version, prefix) = if header.len() + 1 + 10 <= u16::MAX as usize { (1u8, 10) } else { (2u8, 12) };
    let total = (prefix + header.len() + 1).div_ceil(ALIGN) * ALIGN;
    header.push_str(&" ".repeat(total - prefix - header.len() - 1));
    header.push('\n');

    let mut out = Vec::with_capacity(total + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[version, 0]);
    if version == 1 {
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(header.as_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn write_npy(volume: &Volume, path: &Path) -> Result<(), NpyError> {
    if volume.slices.numel() == 0 || volume.num_slices() == 0 {
        return Err(NpyError::EmptyVolume);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_npy_f32(&volume.slices))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(version: u8, header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[version, 0]);
        if version == 1 {
            out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn uint8_volume_scales_to_unit_range() {
        let h = "{'descr': '|u1', 'fortran_order': False, 'shape': (1, 2, 2), }\n";
        let bytes = raw(1, h, &[0, 255, 128, 64]);
        let v = decode_volume(&bytes).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2]);
        let d = v.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 128.0 / 255.0).abs() < 1e-12);
        assert!((d[3] - 64.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn version_two_header() {
        let h = "{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1, 2)}";
        let mut payload = 0.25f64.to_le_bytes().to_vec();
        payload.extend_from_slice(&0.5f64.to_le_bytes());
        let v = decode_volume(&raw(2, h, &payload)).unwrap();
        assert_eq!(v.data(), &[0.25, 0.5]);
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| i as f64 / 60.0);
        let bytes = encode_npy_f32(&t);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        assert_eq!(bytes.len(), 10 + hlen + 4 * 60);
    }

    #[test]
    fn distinct_errors_for_malformed_input() {
        let ok_header = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 2), }\n";
        assert!(matches!(parse_npy(b"\x93NUMPX\x01\x00"), Err(NpyError::BadMagic)));
        assert!(matches!(
            parse_npy(&raw(3, ok_header, &[0; 8])),
            Err(NpyError::UnsupportedVersion(3, 0))
        ));
        let fortran = "{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1, 2), }\n";
        assert!(matches!(parse_npy(&raw(1, fortran, &[0; 8])), Err(NpyError::FortranOrder)));
        let int16 = "{'descr': '<i2', 'fortran_order': False, 'shape': (1, 1, 2), }\n";
        assert!(matches!(parse_npy(&raw(1, int16, &[0; 4])), Err(NpyError::UnsupportedDtype(_))));
        let rank2 = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 2), }\n";
        assert!(matches!(decode_volume(&raw(1, rank2, &[0; 8])), Err(NpyError::BadRank(_))));
        assert!(matches!(
            parse_npy(&raw(1, ok_header, &[0; 7])),
            Err(NpyError::PayloadLength { expected: 8, actual: 7 })
        ));
        assert!(matches!(parse_npy(&raw(1, "not a dict", &[])), Err(NpyError::MalformedHeader(_))));
    }

    #[test]
    fn float_outside_unit_range_is_min_max_normalised() {
        let mut d = vec![-2.0, 0.0, 2.0];
        normalize_intensities(&mut d, true);
        assert_eq!(d, vec![0.0, 0.5, 1.0]);
        let mut flat = vec![3.0; 4];
        normalize_intensities(&mut flat, true);
        assert_eq!(flat, vec![0.0; 4]);
    }

    #[test]
    fn empty_volume_rejected() {
        let v = Volume {
            exam_id: "x".into(),
            slices: Tensor::zeros(&[0, 4, 4]),
            label: 0,
            plane: "sagittal".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_npy(&v, &dir.path().join("x.npy")), Err(NpyError::EmptyVolume)));
    }
}
