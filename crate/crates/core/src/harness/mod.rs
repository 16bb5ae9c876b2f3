//! Training, evaluation, prediction and checkpoint files.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::ForwardCtx;
use crate::error::{Error, Result};
use crate::featureio::{ClassMapping, FeatureSequence, LabelSequence, VideoSample};
use crate::graph::{Graph, Mat, ParamId};
use crate::metrics::{frame_scores_with, labels_to_segments, ClassSet, segmental_scores, EvaluationReport, VideoScores};
use crate::objective::LossConfig;
use crate::slowfast::{ForwardOptions, SfTmn, SfTmnConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};

/// Training hyper-parameters. `seed` drives the per-epoch shuffle and dropout;
/// parameter initialisation uses `model.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_videos: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Joint gradient L2 norm cap; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    pub model: SfTmnConfig,
}

impl TrainConfig {
    /// Adam, lr 1e-4, 200 epochs, one video per step.
    pub fn reference(model: SfTmnConfig) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 200,
            batch_videos: 1,
            seed: model.seed,
            optimizer: OptimizerKind::Adam,
            grad_clip: None,
            loss: LossConfig::default(),
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_videos == 0 {
            return Err(Error::config("batch_videos must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-video total loss.
    pub loss: f64,
    /// Frame accuracy over the epoch, in percent.
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serialises"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: PathBuf::from("<train log>"),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records, checkpoint: None })
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

pub struct Trained {
    pub model: SfTmn,
    pub log: TrainLog,
}

impl Trained {
    /// Writes `<dir>/model.ckpt` and `<dir>/train_log.jsonl`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&self.model, &ckpt)?;
        fs::write(dir.join("train_log.jsonl"), self.log.to_jsonl())?;
        self.log.checkpoint = Some(ckpt);
        Ok(())
    }
}

fn check_dataset(model: &SfTmnConfig, dataset: &[VideoSample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    for v in dataset {
        if v.features.dim() != model.input_dim {
            return Err(Error::shape(format!(
                "video `{}` has {}-dimensional features, model expects {}",
                v.id,
                v.features.dim(),
                model.input_dim
            )));
        }
        if v.labels.mapping().len() != model.num_classes {
            return Err(Error::validation(format!(
                "video `{}` uses {} classes, model predicts {}",
                v.id,
                v.labels.mapping().len(),
                model.num_classes
            )));
        }
    }
    Ok(())
}

/// Per-frame argmax; ties go to the lower class index.
pub fn argmax_columns(logits: &Mat) -> Vec<usize> {
    logits
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (c, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn accumulate(into: &mut BTreeMap<ParamId, Mat>, grads: BTreeMap<ParamId, Mat>) {
    for (id, g) in grads {
        match into.get_mut(&id) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(id, g);
            }
        }
    }
}

/// Fits a fresh model; see [`train_with`].
pub fn train(config: &TrainConfig, dataset: &[VideoSample]) -> Result<Trained> {
    train_with(config, dataset, |_| {})
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one.
///
/// Videos are visited in a fresh seeded permutation of the dataset order every
/// epoch. Gradients of `batch_videos` consecutive videos are averaged before
/// each optimizer step. The returned model is the final-epoch state.
pub fn train_with(
    config: &TrainConfig,
    dataset: &[VideoSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    config.validate()?;
    check_dataset(&config.model, dataset)?;
    let mut model = SfTmn::new(config.model.clone())?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5f3c_9d2e_a1b4_7c60);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut frames) = (0.0, 0usize, 0usize);
        let mut pending: BTreeMap<ParamId, Mat> = BTreeMap::new();
        let mut in_batch = 0usize;

        for (pos, &vi) in order.iter().enumerate() {
            let video = &dataset[vi];
            let labels = video.labels.labels();
            let mut g = Graph::new();
            let x = g.input(video.features.values().clone());
            let mut ctx = ForwardCtx {
                dropout: config.model.dropout,
                rng: Some(&mut dropout_rng),
            };
            let vars = model.forward(&mut g, x, &mut ctx, &ForwardOptions::default())?;
            let terms = vars
                .combined
                .iter()
                .map(|&c| g.stage_loss(c, labels, &config.loss))
                .collect::<Result<Vec<_>>>()?;
            let total = g.sum(&terms)?;
            let value = g.value(total)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    video: video.id.clone(),
                });
            }
            loss_sum += value;
            let last = *vars.combined.last().expect("at least one stage");
            let pred = argmax_columns(g.value(last));
            correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            frames += labels.len();

            accumulate(&mut pending, g.backward(total).into_params());
            in_batch += 1;
            if in_batch == config.batch_videos || pos + 1 == order.len() {
                let mut grads = std::mem::take(&mut pending);
                if in_batch > 1 {
                    let s = 1.0 / in_batch as f64;
                    grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * s));
                }
                if let Some(c) = config.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                optimizer.step(model.params_mut(), &grads);
                in_batch = 0;
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            train_acc: 100.0 * correct as f64 / frames as f64,
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(Trained { model, log })
}

/// Class indices for `x` (`D × T`) from the final combined output.
pub fn predict_labels(model: &SfTmn, x: &Mat) -> Result<Vec<usize>> {
    let dim = model.config().input_dim;
    if x.nrows() != dim {
        return Err(Error::shape(format!(
            "features are {}-dimensional, checkpoint expects {dim}",
            x.nrows()
        )));
    }
    Ok(argmax_columns(model.forward_values(x)?.final_logits()))
}

pub fn predict(model: &SfTmn, features: &FeatureSequence, mapping: Arc<ClassMapping>) -> Result<LabelSequence> {
    if mapping.len() != model.config().num_classes {
        return Err(Error::validation(format!(
            "mapping has {} classes, checkpoint predicts {}",
            mapping.len(),
            model.config().num_classes
        )));
    }
    LabelSequence::new(predict_labels(model, features.values())?, mapping)
}

/// Scores one video from its predicted and ground-truth labels.
pub fn score_video(
    id: &str,
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    classes: ClassSet,
) -> Result<VideoScores> {
    Ok(VideoScores {
        video_id: id.to_string(),
        frame: frame_scores_with(pred, gt, num_classes, classes)?,
        segmental: segmental_scores(&labels_to_segments(pred)?, &labels_to_segments(gt)?),
    })
}

/// Per-video predictions, in dataset order.
pub fn predict_dataset(model: &SfTmn, dataset: &[VideoSample]) -> Result<Vec<Vec<usize>>> {
    check_dataset(model.config(), dataset)?;
    dataset
        .par_iter()
        .map(|v| predict_labels(model, v.features.values()))
        .collect()
}

/// Per-video scores in dataset order plus their mean ± std.
pub fn evaluate(model: &SfTmn, dataset: &[VideoSample]) -> Result<EvaluationReport> {
    let preds = predict_dataset(model, dataset)?;
    let c = model.config().num_classes;
    let rows = dataset
        .par_iter()
        .zip(preds.par_iter())
        .map(|(v, p)| score_video(&v.id, p, v.labels.labels(), c, ClassSet::default()))
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::new(rows)
}
