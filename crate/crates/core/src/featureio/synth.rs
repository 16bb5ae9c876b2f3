use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassMapping, FeatureSequence, LabelSequence, VideoSample};
use crate::error::{Error, Result};
use crate::graph::Mat;

/// Recipe for a synthetic dataset: piecewise-constant labels, features are
/// per-class prototypes plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Segment durations are drawn uniformly from `[0.5, 1.5] ×` this.
    pub mean_segment: f64,
    /// Standard deviation of the per-entry feature noise.
    pub noise: f64,
    /// Norm of every class prototype.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 10,
            num_classes: 7,
            feature_dim: 16,
            min_len: 200,
            max_len: 400,
            mean_segment: 40.0,
            noise: 0.5,
            separation: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("min_len", self.min_len),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.min_len > self.max_len {
            return Err(Error::validation(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if !(self.mean_segment.is_finite() && self.mean_segment > 0.0) {
            return Err(Error::validation("mean_segment must be positive"));
        }
        if self.mean_segment > self.max_len as f64 {
            return Err(Error::validation(format!(
                "mean segment duration {} exceeds the longest video ({})",
                self.mean_segment, self.max_len
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::validation("noise must be >= 0"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::validation("separation must be positive"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class prototypes, `D × C`, each column of norm `separation`.
pub(crate) fn prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Mat {
    let mut protos = Mat::from_shape_fn((spec.feature_dim, spec.num_classes), |_| gaussian(rng));
    for mut col in protos.columns_mut() {
        let norm = col.dot(&col).sqrt().max(f64::MIN_POSITIVE);
        col.mapv_inplace(|v| ((v / norm) * spec.separation) as f32 as f64);
    }
    protos
}

/// Deterministic for a fixed seed. Feature values are exactly representable
/// as `float32`, so datasets survive a trip through the raw format bitwise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<VideoSample>, ClassMapping)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mapping = Arc::new(ClassMapping::new(
        (0..spec.num_classes).map(|c| format!("class_{c}")),
    )?);
    let protos = prototypes(spec, &mut rng);

    let videos = (0..spec.num_videos)
        .map(|v| {
            let frames = rng.gen_range(spec.min_len..=spec.max_len);
            let mut labels = Vec::with_capacity(frames);
            let mut class = rng.gen_range(0..spec.num_classes);
            while labels.len() < frames {
                let dur = (spec.mean_segment * rng.gen_range(0.5..1.5)).round().max(1.0) as usize;
                let n = dur.min(frames - labels.len());
                labels.extend(std::iter::repeat(class).take(n));
                if spec.num_classes > 1 {
                    let step = rng.gen_range(1..spec.num_classes);
                    class = (class + step) % spec.num_classes;
                }
            }
            let values = Mat::from_shape_fn((spec.feature_dim, frames), |(d, t)| {
                (protos[[d, labels[t]]] + spec.noise * gaussian(&mut rng)) as f32 as f64
            });
            let features = FeatureSequence::new(values, 1.0)?;
            let labels = LabelSequence::new(labels, mapping.clone())?;
            VideoSample::new(format!("synth_{v:03}"), features, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((videos, (*mapping).clone()))
}
