//! Checkpoint container.
//!
//! ```text
//! sftmn-ckpt-1\n
//! <header length in bytes>\n
//! <TOML header: version, [config], [[stages]], [[tensors]]>
//! <tensor payload: little-endian f64, tensors in header order, row-major>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::StageSpec;
use crate::error::{Error, Result};
use crate::graph::{Mat, ParamStore};
use crate::slowfast::{SfTmn, SfTmnConfig};

pub const CHECKPOINT_VERSION: &str = "sftmn-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageEntry {
    path: String,
    #[serde(flatten)]
    spec: StageSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    config: SfTmnConfig,
    stages: Vec<StageEntry>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &SfTmn) -> Vec<u8> {
    let mut stages: Vec<StageEntry> = model
        .slow()
        .stages()
        .iter()
        .map(|s| StageEntry {
            path: "slow".into(),
            spec: s.spec().clone(),
        })
        .collect();
    if let Some(fast) = model.fast() {
        stages.extend(fast.stages().iter().map(|s| StageEntry {
            path: "fast".into(),
            spec: s.spec().clone(),
        }));
    }
    let params = model.params();
    let header = Header {
        version: CHECKPOINT_VERSION.into(),
        config: model.config().clone(),
        stages,
        tensors: params
            .iter()
            .map(|(_, name, v)| TensorEntry {
                name: name.into(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).expect("checkpoint header serialises");
    let mut out = format!("{CHECKPOINT_VERSION}\n{}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.reserve(params.num_scalars() * 8);
    for (_, _, v) in params.iter() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn take_line<'a>(bytes: &mut &'a [u8]) -> Result<&'a str> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated preamble".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Checkpoint("preamble is not UTF-8".into()))?;
    *bytes = &bytes[nl + 1..];
    Ok(line)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<SfTmn> {
    let magic = take_line(&mut bytes)?;
    if magic != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version `{magic}`, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len: usize = take_line(&mut bytes)?
        .parse()
        .map_err(|_| Error::Checkpoint("bad header length".into()))?;
    if bytes.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[..len]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("header version `{}`", header.version)));
    }
    header.config.validate()?;
    let expected = header.config.stage_specs();
    let slow: Vec<&StageSpec> = header.stages.iter().filter(|s| s.path == "slow").map(|s| &s.spec).collect();
    if slow.len() != expected.len() || slow.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(Error::Checkpoint("stage list disagrees with the embedded config".into()));
    }

    let mut payload = &bytes[len..];
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        if payload.len() < n * 8 {
            return Err(Error::Checkpoint(format!("payload ends inside tensor `{}`", t.name)));
        }
        let data: Vec<f64> = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        payload = &payload[n * 8..];
        params.add(t.name.clone(), Mat::from_shape_vec((t.rows, t.cols), data).expect("sized"));
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    SfTmn::from_parts(header.config, params)
}

pub fn save_checkpoint(model: &SfTmn, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SfTmn> {
    from_bytes(&fs::read(path)?)
}
