use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{FrameScores, MeanStd, SegmentalScores};
use crate::error::Result;

/// One evaluated video: frame and segmental scores side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    #[serde(flatten)]
    pub frame: FrameScores,
    #[serde(flatten)]
    pub segmental: SegmentalScores,
}

impl VideoScores {
    /// Values in report column order.
    pub fn values(&self) -> [f64; 9] {
        let (f, s) = (&self.frame, &self.segmental);
        [
            f.accuracy,
            f.precision,
            f.recall,
            f.jaccard,
            s.edit,
            s.f1_10,
            s.f1_25,
            s.f1_50,
            s.f1_avg,
        ]
    }
}

/// Mean ± std of every report column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
    pub edit: MeanStd,
    #[serde(rename = "f1@10")]
    pub f1_10: MeanStd,
    #[serde(rename = "f1@25")]
    pub f1_25: MeanStd,
    #[serde(rename = "f1@50")]
    pub f1_50: MeanStd,
    pub f1_avg: MeanStd,
}

impl ScoreSummary {
    pub fn of(videos: &[VideoScores]) -> Result<Self> {
        let col = |i: usize| MeanStd::of(&videos.iter().map(|v| v.values()[i]).collect::<Vec<_>>());
        Ok(ScoreSummary {
            accuracy: col(0)?,
            precision: col(1)?,
            recall: col(2)?,
            jaccard: col(3)?,
            edit: col(4)?,
            f1_10: col(5)?,
            f1_25: col(6)?,
            f1_50: col(7)?,
            f1_avg: col(8)?,
        })
    }

    pub fn values(&self) -> [MeanStd; 9] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.jaccard,
            self.edit,
            self.f1_10,
            self.f1_25,
            self.f1_50,
            self.f1_avg,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub videos: Vec<VideoScores>,
    pub aggregate: ScoreSummary,
}

impl EvaluationReport {
    pub const COLUMNS: [&'static str; 10] = [
        "video_id",
        "accuracy",
        "precision",
        "recall",
        "jaccard",
        "edit",
        "f1@10",
        "f1@25",
        "f1@50",
        "f1_avg",
    ];

    pub fn new(videos: Vec<VideoScores>) -> Result<Self> {
        let aggregate = ScoreSummary::of(&videos)?;
        Ok(EvaluationReport { videos, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Per-video rows followed by `aggregate_mean` and `aggregate_std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = Self::COLUMNS.join(",");
        out.push('\n');
        let mut row = |id: &str, values: &[f64]| {
            out.push_str(id);
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for v in &self.videos {
            row(&v.video_id, &v.values());
        }
        let agg = self.aggregate.values();
        row("aggregate_mean", &agg.map(|m| m.mean));
        row("aggregate_std", &agg.map(|m| m.std));
        out
    }

    /// Frame-metric table in the `mean ± std` style.
    pub fn frame_table(&self) -> String {
        let a = &self.aggregate;
        let cell = |m: MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        format!(
            "accuracy\tprecision\trecall\tjaccard\n{}\t{}\t{}\t{}\n",
            cell(a.accuracy),
            cell(a.precision),
            cell(a.recall),
            cell(a.jaccard)
        )
    }
}
