//! Frame-level and segmental evaluation.
//!
//! Frame metrics (accuracy, macro precision/recall/Jaccard) are computed per
//! video. Segmental metrics work on run-length encoded label sequences: the
//! edit score is a normalised Levenshtein similarity over segment classes and
//! `F1@k` counts a predicted segment as correct when it overlaps an unused
//! ground-truth segment of the same class with IoU at least `k`.
//! All scores are percentages.

mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{EvaluationReport, ScoreSummary, VideoScores};

/// Overlap thresholds reported by default.
pub const OVERLAPS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    /// First frame, inclusive.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// Maximal constant runs of a label sequence, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    /// Checks the tiling invariants before wrapping `segments`.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::validation(format!(
                    "segment {i} [{}, {}) does not continue the tiling at {cursor}",
                    s.start, s.end
                )));
            }
            if i > 0 && segments[i - 1].class == s.class {
                return Err(Error::validation(format!(
                    "segments {} and {i} share class {}",
                    i - 1,
                    s.class
                )));
            }
            cursor = s.end;
        }
        Ok(SegmentList { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Number of frames covered.
    pub fn frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().map(|s| s.class)
    }

    /// Per-frame labels.
    pub fn expand(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.class).take(s.len()))
            .collect()
    }
}

pub fn labels_to_segments(labels: &[usize]) -> Result<SegmentList> {
    if labels.is_empty() {
        return Err(Error::validation("cannot segment an empty label sequence"));
    }
    let mut segments = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            segments.push(Segment {
                class: labels[start],
                start,
                end: t,
            });
            start = t;
        }
    }
    Ok(SegmentList { segments })
}

/// Which classes enter the per-video macro average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSet {
    /// Classes present in the ground truth or the prediction.
    #[default]
    GtOrPred,
    /// Classes present in the ground truth only.
    GtOnly,
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassSet::GtOrPred => "gt-or-pred",
            ClassSet::GtOnly => "gt-only",
        })
    }
}

impl FromStr for ClassSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-or-pred" => Ok(ClassSet::GtOrPred),
            "gt-only" => Ok(ClassSet::GtOnly),
            _ => Err(Error::config(format!("unknown class set `{s}` (gt-or-pred or gt-only)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

pub fn frame_scores(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<FrameScores> {
    frame_scores_with(pred, gt, num_classes, ClassSet::default())
}

pub fn frame_scores_with(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    classes: ClassSet,
) -> Result<FrameScores> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::validation("cannot score an empty sequence"));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= num_classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut precision, mut recall, mut jaccard, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..num_classes {
        let included = match classes {
            ClassSet::GtOrPred => gt_count[c] + pred_count[c] > 0,
            ClassSet::GtOnly => gt_count[c] > 0,
        };
        if !included {
            continue;
        }
        n += 1;
        precision += ratio(tp[c], pred_count[c]);
        recall += ratio(tp[c], gt_count[c]);
        jaccard += ratio(tp[c], gt_count[c] + pred_count[c] - tp[c]);
    }
    let correct: usize = tp.iter().sum();
    let n = n as f64;
    Ok(FrameScores {
        accuracy: 100.0 * correct as f64 / gt.len() as f64,
        precision: 100.0 * precision / n,
        recall: 100.0 * recall / n,
        jaccard: 100.0 * jaccard / n,
    })
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(1 − lev / max(|pred|, |gt|)) · 100` over segment class strings.
pub fn edit_score(pred: &SegmentList, gt: &SegmentList) -> f64 {
    let p: Vec<usize> = pred.classes().collect();
    let g: Vec<usize> = gt.classes().collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    let dist = levenshtein(&p, &g) as f64;
    ((1.0 - dist / longest as f64) * 100.0).max(0.0)
}

/// Segmental F1 at IoU threshold `k` (a fraction, e.g. `0.5`).
pub fn f1_at_overlap(pred: &SegmentList, gt: &SegmentList, k: f64) -> f64 {
    let mut used = vec![false; gt.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    for p in pred.segments() {
        let best = gt
            .segments()
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == p.class)
            .map(|(i, g)| (i, p.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, (i, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((i, iou)),
            });
        match best {
            Some((i, iou)) if iou >= k && !used[i] => {
                used[i] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = gt.len() - tp;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1_avg(f1_10: f64, f1_25: f64, f1_50: f64) -> f64 {
    (f1_10 + f1_25 + f1_50) / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentalScores {
    pub edit: f64,
    #[serde(rename = "f1@10")]
    pub f1_10: f64,
    #[serde(rename = "f1@25")]
    pub f1_25: f64,
    #[serde(rename = "f1@50")]
    pub f1_50: f64,
    pub f1_avg: f64,
}

impl SegmentalScores {
    /// F1 for one of the standard thresholds (10, 25 or 50 percent).
    pub fn f1_at(&self, percent: u32) -> Option<f64> {
        match percent {
            10 => Some(self.f1_10),
            25 => Some(self.f1_25),
            50 => Some(self.f1_50),
            _ => None,
        }
    }
}

pub fn segmental_scores(pred: &SegmentList, gt: &SegmentList) -> SegmentalScores {
    let [a, b, c] = OVERLAPS.map(|k| f1_at_overlap(pred, gt, k));
    SegmentalScores {
        edit: edit_score(pred, gt),
        f1_10: a,
        f1_25: b,
        f1_50: c,
        f1_avg: f1_avg(a, b, c),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("cannot aggregate zero values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAggregate {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
}

/// Video-weighted mean ± std of every frame metric.
pub fn aggregate(per_video: &[FrameScores]) -> Result<FrameAggregate> {
    let col = |f: fn(&FrameScores) -> f64| MeanStd::of(&per_video.iter().map(f).collect::<Vec<_>>());
    Ok(FrameAggregate {
        accuracy: col(|s| s.accuracy)?,
        precision: col(|s| s.precision)?,
        recall: col(|s| s.recall)?,
        jaccard: col(|s| s.jaccard)?,
    })
}
