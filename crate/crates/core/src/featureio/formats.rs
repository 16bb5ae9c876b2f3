//! Feature file encodings.
//!
//! * NPY v1.0, `float32` or `float64`, 2-D.
//! * Raw: ASCII header `SFTMN1 <rows> <cols>\n` followed by little-endian
//!   `float32` values in row-major order.
//!
//! Either way the stored array is `rows × cols`; the caller's
//! [`FeatureLayout`] says which axis is time.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use ndarray_npy::{ReadNpyExt, WriteNpyExt};

use super::FeatureLayout;
use crate::error::{Error, Result};
use crate::graph::Mat;

const RAW_MAGIC: &str = "SFTMN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Npy,
    Raw,
}

impl FeatureFormat {
    pub const ALL: [FeatureFormat; 2] = [FeatureFormat::Npy, FeatureFormat::Raw];

    pub fn extension(self) -> &'static str {
        match self {
            FeatureFormat::Npy => "npy",
            FeatureFormat::Raw => "sftmn",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?;
        Self::ALL.into_iter().find(|f| f.extension() == ext)
    }
}

pub fn encode_raw(values: &Mat) -> Vec<u8> {
    let (rows, cols) = values.dim();
    let mut out = format!("{RAW_MAGIC} {rows} {cols}\n").into_bytes();
    out.reserve(rows * cols * 4);
    for v in values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Mat> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::validation("raw feature file has no header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::validation("raw feature header is not ASCII"))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(RAW_MAGIC) {
        return Err(Error::validation(format!("raw feature header must start with {RAW_MAGIC}")));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::validation(format!("malformed raw feature header `{header}`")))
    };
    let (rows, cols) = (dim()?, dim()?);
    let payload = &bytes[newline + 1..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::validation(format!(
            "raw payload holds {} bytes, header promises {rows} × {cols} float32",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Mat::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn decode_npy(bytes: &[u8]) -> Result<Mat> {
    match Array2::<f32>::read_npy(bytes) {
        Ok(a) => Ok(a.mapv(f64::from)),
        Err(_) => Array2::<f64>::read_npy(bytes)
            .map_err(|e| Error::validation(format!("not a 2-D float32/float64 NPY array: {e}"))),
    }
}

/// Reads a feature file and returns it as `D × T`.
pub fn read_features(path: &Path, layout: FeatureLayout) -> Result<Mat> {
    let format = FeatureFormat::from_path(path)
        .ok_or_else(|| Error::config(format!("unrecognised feature file {}", path.display())))?;
    let bytes = fs::read(path)?;
    let stored = match format {
        FeatureFormat::Npy => decode_npy(&bytes)?,
        FeatureFormat::Raw => decode_raw(&bytes)?,
    };
    Ok(match layout {
        FeatureLayout::DxT => stored,
        FeatureLayout::TxD => stored.reversed_axes().as_standard_layout().to_owned(),
    })
}

/// Writes `values` (`D × T`) as stored `D × T`.
pub fn write_features(path: &Path, values: &Mat, format: FeatureFormat) -> Result<()> {
    match format {
        FeatureFormat::Raw => fs::write(path, encode_raw(values))?,
        FeatureFormat::Npy => {
            let file = fs::File::create(path)?;
            values
                .mapv(|v| v as f32)
                .write_npy(std::io::BufWriter::new(file))
                .map_err(|e| Error::validation(format!("writing {}: {e}", path.display())))?;
        }
    }
    Ok(())
}
