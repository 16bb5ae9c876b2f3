//! Datasets in the usual action-segmentation layout:
//!
//! ```text
//! <root>/mapping.txt            "index name" per line
//! <root>/features/<id>.npy      or <id>.sftmn (raw, see [`formats`])
//! <root>/groundTruth/<id>.txt   one class name per frame
//! <root>/splits/<name>.bundle   one "<id>" or "<id>.txt" per line
//! ```

pub mod formats;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

pub use formats::FeatureFormat;
pub use synth::{generate_synthetic, SyntheticSpec};

/// Class index ↔ name table. Indices are exactly `0..C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassMapping {
    /// Mapping where class `i` is `names[i]`.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("class mapping is empty"));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::validation(format!("class {i} has an empty name")));
            }
            if let Some(prev) = index.insert(n.clone(), i) {
                return Err(Error::validation(format!(
                    "class name `{n}` used by both {prev} and {i}"
                )));
            }
        }
        Ok(ClassMapping { names, index })
    }

    /// Builds from `(index, name)` pairs in any order; rejects gaps and duplicates.
    pub fn from_entries(entries: Vec<(usize, String)>) -> Result<Self> {
        let n = entries.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for (i, name) in entries {
            if i >= n {
                return Err(Error::validation(format!(
                    "class index {i} leaves a gap (only {n} classes listed)"
                )));
            }
            if slots[i].is_some() {
                return Err(Error::validation(format!("class index {i} listed twice")));
            }
            slots[i] = Some(name);
        }
        Self::new(slots.into_iter().map(|s| s.expect("every slot filled")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `mapping.txt` contents.
    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {n}\n"))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let (idx, name) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| parse_err("expected `index name`"))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(&format!("`{idx}` is not a class index")))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(parse_err("missing class name"));
            }
            entries.push((idx, name.to_string()));
        }
        Self::from_entries(entries)
    }
}

pub fn parse_mapping(path: &Path) -> Result<ClassMapping> {
    let text = fs::read_to_string(path)?;
    ClassMapping::parse(&text, path)
}

/// Per-video features, `D × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Mat,
    frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(values: Mat, frame_rate_hz: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::validation(format!(
                "feature array {:?} must have D ≥ 1 and T ≥ 1",
                values.dim()
            )));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::validation("frame rate must be positive"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at flat index {pos}"
            )));
        }
        Ok(FeatureSequence {
            values,
            frame_rate_hz,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSequence {
    labels: Vec<usize>,
    mapping: Arc<ClassMapping>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, mapping: Arc<ClassMapping>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= mapping.len()) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {} classes",
                mapping.len()
            )));
        }
        Ok(LabelSequence { labels, mapping })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mapping(&self) -> &Arc<ClassMapping> {
        &self.mapping
    }

    /// Parses one class name per line; `path` is only used in diagnostics.
    pub fn parse(text: &str, mapping: Arc<ClassMapping>, path: &Path) -> Result<Self> {
        let labels = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let name = line.trim();
                mapping.index_of(name).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("unknown class `{name}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(labels, mapping)
    }

    /// One class name per line.
    pub fn to_text(&self) -> String {
        self.labels
            .iter()
            .map(|&l| format!("{}\n", self.mapping.names[l]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, features: FeatureSequence, labels: LabelSequence) -> Result<Self> {
        let id = id.into();
        if features.frames() != labels.len() {
            return Err(Error::validation(format!(
                "video `{id}`: {} feature frames but {} labels",
                features.frames(),
                labels.len()
            )));
        }
        Ok(VideoSample {
            id,
            features,
            labels,
        })
    }
}

/// Orientation of feature arrays stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayout {
    #[serde(rename = "DxT")]
    DxT,
    #[serde(rename = "TxD")]
    TxD,
}

impl fmt::Display for FeatureLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureLayout::DxT => "DxT",
            FeatureLayout::TxD => "TxD",
        })
    }
}

impl FromStr for FeatureLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DxT" | "dxt" => Ok(FeatureLayout::DxT),
            "TxD" | "txd" => Ok(FeatureLayout::TxD),
            other => Err(Error::config(format!("unknown feature layout `{other}`"))),
        }
    }
}

pub fn read_labels(path: &Path, mapping: Arc<ClassMapping>) -> Result<LabelSequence> {
    LabelSequence::parse(&fs::read_to_string(path)?, mapping, path)
}

/// Reads a split file: one video id per line, `.txt` suffix optional.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.strip_suffix(".txt").unwrap_or(l).to_string())
        .collect())
}

fn feature_path(root: &Path, id: &str) -> Option<PathBuf> {
    FeatureFormat::ALL
        .iter()
        .map(|f| root.join("features").join(format!("{id}.{}", f.extension())))
        .find(|p| p.is_file())
}

fn load_video(
    root: &Path,
    id: &str,
    mapping: &Arc<ClassMapping>,
    layout: FeatureLayout,
) -> Result<VideoSample> {
    let load_err = |msg: String| Error::Load {
        video: id.to_string(),
        msg,
    };
    let fpath = feature_path(root, id)
        .ok_or_else(|| load_err(format!("no feature file under {}", root.join("features").display())))?;
    let stored = formats::read_features(&fpath, layout).map_err(|e| load_err(e.to_string()))?;

    let gpath = root.join("groundTruth").join(format!("{id}.txt"));
    let text = fs::read_to_string(&gpath).map_err(|e| load_err(format!("{}: {e}", gpath.display())))?;
    let labels = LabelSequence::parse(&text, mapping.clone(), &gpath)?.labels;

    if stored.ncols() != labels.len() {
        let hint = if stored.nrows() == labels.len() {
            format!(" (the transposed layout would match; check the {layout} setting)")
        } else {
            String::new()
        };
        return Err(Error::validation(format!(
            "video `{id}`: {} feature frames but {} label lines{hint}",
            stored.ncols(),
            labels.len()
        )));
    }
    let features = FeatureSequence::new(stored, 1.0).map_err(|e| load_err(e.to_string()))?;
    let labels = LabelSequence::new(labels, mapping.clone())?;
    VideoSample::new(id, features, labels)
}

/// Loads every video listed in `split_file`, in split order.
pub fn load_dataset(
    root: &Path,
    split_file: &Path,
    mapping: &ClassMapping,
    layout: FeatureLayout,
) -> Result<Vec<VideoSample>> {
    let ids = read_split(split_file)?;
    if ids.is_empty() {
        return Err(Error::validation(format!("split {} lists no videos", split_file.display())));
    }
    let mapping = Arc::new(mapping.clone());
    let samples = ids
        .par_iter()
        .map(|id| load_video(root, id, &mapping, layout))
        .collect::<Result<Vec<_>>>()?;
    let dim = samples[0].features.dim();
    if let Some(bad) = samples.iter().find(|s| s.features.dim() != dim) {
        return Err(Error::validation(format!(
            "video `{}` has {}-dimensional features, `{}` has {dim}",
            bad.id,
            bad.features.dim(),
            samples[0].id
        )));
    }
    Ok(samples)
}

/// Writes `samples` in the on-disk layout with a split named `split`.
/// Features are stored as `D × T`.
pub fn write_dataset(
    root: &Path,
    samples: &[VideoSample],
    mapping: &ClassMapping,
    split: &str,
    format: FeatureFormat,
) -> Result<()> {
    fs::create_dir_all(root.join("features"))?;
    fs::create_dir_all(root.join("groundTruth"))?;
    fs::create_dir_all(root.join("splits"))?;
    fs::write(root.join("mapping.txt"), mapping.to_text())?;
    let mut bundle = String::new();
    for s in samples {
        let fpath = root.join("features").join(format!("{}.{}", s.id, format.extension()));
        formats::write_features(&fpath, s.features.values(), format)?;
        fs::write(root.join("groundTruth").join(format!("{}.txt", s.id)), s.labels.to_text())?;
        bundle.push_str(&s.id);
        bundle.push_str(".txt\n");
    }
    fs::write(root.join("splits").join(format!("{split}.bundle")), bundle)?;
    Ok(())
}
