//! Two-pathway temporal model.
//!
//! The slow path runs a backbone on every frame. The fast path runs a second
//! backbone on features pooled over windows of `L` frames, and its outputs
//! are repeated back to frame resolution. At every stage the two are mixed by
//! a learned pair of scalars, `w1 · slow + w2 · upsampled fast`. Which path's
//! refinement stages read the mixed output is selected by [`Design`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    asformer_specs, build_backbone, tcn_specs, Backbone, ForwardCtx, StageKind, StageOutput,
    StageSpec, StageVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PoolingMode {
    Max,
    Average,
    PowerAverage { p: f64 },
}

impl PoolingMode {
    pub fn validate(&self) -> Result<()> {
        if let PoolingMode::PowerAverage { p } = self {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::config(format!("power-average exponent must be > 0, got {p}")));
            }
        }
        Ok(())
    }
}

/// Number of windows of length `len` covering `frames` frames.
pub fn segment_count(frames: usize, len: usize) -> usize {
    frames.div_ceil(len)
}

/// Pools `x` (`D × T`) over consecutive windows of `len` frames into
/// `D × ceil(T / len)`. The final window may be shorter and is pooled over its
/// actual extent.
pub fn segment_pool(x: &Mat, len: usize, mode: PoolingMode) -> Result<Mat> {
    Ok(segment_pool_with_argmax(x, len, mode)?.0)
}

/// Like [`segment_pool`]; for max pooling also returns the winning frame of
/// every output entry (row-major, first occurrence on ties).
pub(crate) fn segment_pool_with_argmax(x: &Mat, len: usize, mode: PoolingMode) -> Result<(Mat, Vec<usize>)> {
    if len < 1 {
        return Err(Error::config("segment length must be at least 1"));
    }
    mode.validate()?;
    let (rows, frames) = x.dim();
    let segs = segment_count(frames, len);
    let mut out = Mat::zeros((rows, segs));
    let mut argmax = Vec::new();
    if matches!(mode, PoolingMode::Max) {
        argmax.reserve(rows * segs);
    }
    for r in 0..rows {
        let row = x.row(r);
        for w in 0..segs {
            let lo = w * len;
            let hi = (lo + len).min(frames);
            let n = (hi - lo) as f64;
            out[[r, w]] = match mode {
                PoolingMode::Max => {
                    let mut best = lo;
                    for t in lo + 1..hi {
                        if row[t] > row[best] {
                            best = t;
                        }
                    }
                    argmax.push(best);
                    row[best]
                }
                PoolingMode::Average => (lo..hi).map(|t| row[t]).sum::<f64>() / n,
                PoolingMode::PowerAverage { p } => {
                    let m = (lo..hi).map(|t| row[t].abs().powf(p)).sum::<f64>() / n;
                    m.powf(1.0 / p)
                }
            };
        }
    }
    Ok((out, argmax))
}

pub(crate) fn segment_pool_backward(
    x: &Mat,
    pooled: &Mat,
    grad: &Mat,
    len: usize,
    mode: PoolingMode,
    argmax: &[usize],
) -> Mat {
    let (rows, frames) = x.dim();
    let segs = pooled.ncols();
    let mut dx = Mat::zeros((rows, frames));
    for r in 0..rows {
        for w in 0..segs {
            let g = grad[[r, w]];
            let lo = w * len;
            let hi = (lo + len).min(frames);
            let n = (hi - lo) as f64;
            match mode {
                PoolingMode::Max => dx[[r, argmax[r * segs + w]]] += g,
                PoolingMode::Average => {
                    for t in lo..hi {
                        dx[[r, t]] += g / n;
                    }
                }
                PoolingMode::PowerAverage { p } => {
                    let y = pooled[[r, w]];
                    if y == 0.0 {
                        continue;
                    }
                    let coef = g * y.powf(1.0 - p) / n;
                    for t in lo..hi {
                        let v = x[[r, t]];
                        if v != 0.0 {
                            dx[[r, t]] += coef * v.abs().powf(p - 1.0) * v.signum();
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Repeats each column of `y` (`D × S`) `len` times and truncates to `frames`.
pub fn upsample_repeat(y: &Mat, len: usize, frames: usize) -> Result<Mat> {
    if len < 1 || frames < 1 {
        return Err(Error::config("segment length and frame count must be positive"));
    }
    let segs = y.ncols();
    if segs != segment_count(frames, len) {
        return Err(Error::shape(format!(
            "{segs} segments cannot cover {frames} frames at length {len}"
        )));
    }
    Ok(Mat::from_shape_fn((y.nrows(), frames), |(r, t)| y[[r, t / len]]))
}

/// One stage's mixing scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { w1: 0.5, w2: 0.5 }
    }
}

/// `w1 · slow + w2 · fast`, elementwise.
pub fn fuse(slow: &Mat, fast: &Mat, w: FusionWeights) -> Result<Mat> {
    if slow.dim() != fast.dim() {
        return Err(Error::shape(format!(
            "cannot fuse {:?} with {:?}",
            slow.dim(),
            fast.dim()
        )));
    }
    if !(w.w1.is_finite() && w.w2.is_finite()) {
        return Err(Error::validation("fusion weights must be finite"));
    }
    Ok(slow * w.w1 + fast * w.w2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mstcn,
    Asformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Backbone alone, no fast path.
    Single,
    /// Slow and fast paths with per-stage fusion.
    Sftmn,
}

/// Which refinement stages read the combined output of the previous stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// Slow refinement reads the combined output; fast reads its own.
    #[default]
    A,
    /// Fast refinement reads the (pooled) combined output; slow reads its own.
    B,
    /// Neither path reads the combined output.
    C,
    /// Both paths read the combined output.
    D,
}

impl Design {
    pub const ALL: [Design; 4] = [Design::A, Design::B, Design::C, Design::D];

    pub fn slow_reads_combined(self) -> bool {
        matches!(self, Design::A | Design::D)
    }

    pub fn fast_reads_combined(self) -> bool {
        matches!(self, Design::B | Design::D)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
    Power,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $s:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $s),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($variant),)*
                    other => Err(Error::config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

str_enum!(BackboneKind { BackboneKind::Mstcn => "mstcn", BackboneKind::Asformer => "asformer" });
str_enum!(ModelKind { ModelKind::Single => "single", ModelKind::Sftmn => "sftmn" });
str_enum!(Design { Design::A => "a", Design::B => "b", Design::C => "c", Design::D => "d" });
str_enum!(PoolKind { PoolKind::Max => "max", PoolKind::Avg => "avg", PoolKind::Power => "power" });

/// Architecture description. Serialises to a flat key-value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfTmnConfig {
    pub model: ModelKind,
    pub backbone: BackboneKind,
    pub segment_length: usize,
    pub pooling: PoolKind,
    pub power_p: f64,
    pub design: Design,
    pub refinement_stages: usize,
    pub layers: usize,
    pub feature_maps: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl SfTmnConfig {
    /// Reference preset: MS-TCN backbone, one modelling plus three refinement
    /// stages, 10 layers, 64 maps, segment length 32, max pooling, design (a).
    pub fn reference(input_dim: usize, num_classes: usize) -> Self {
        SfTmnConfig {
            model: ModelKind::Sftmn,
            backbone: BackboneKind::Mstcn,
            segment_length: 32,
            pooling: PoolKind::Max,
            power_p: 2.0,
            design: Design::A,
            refinement_stages: 3,
            layers: 10,
            feature_maps: 64,
            num_classes,
            input_dim,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn pooling_mode(&self) -> PoolingMode {
        match self.pooling {
            PoolKind::Max => PoolingMode::Max,
            PoolKind::Avg => PoolingMode::Average,
            PoolKind::Power => PoolingMode::PowerAverage { p: self.power_p },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 1 {
            return Err(Error::config("segment_length must be at least 1"));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("feature_maps", self.feature_maps),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.pooling_mode().validate()
    }

    /// Stage chain shared by both paths.
    pub fn stage_specs(&self) -> Vec<StageSpec> {
        match self.backbone {
            BackboneKind::Mstcn => tcn_specs(
                self.refinement_stages + 1,
                self.layers,
                self.feature_maps,
                self.num_classes,
                self.input_dim,
            ),
            BackboneKind::Asformer => asformer_specs(
                self.refinement_stages,
                self.layers,
                self.feature_maps,
                self.num_classes,
                self.input_dim,
            ),
        }
    }

    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: SfTmnConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter handles of one fusion point.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FusionParams {
    fn new(store: &mut ParamStore, name: &str, init: FusionWeights) -> Self {
        FusionParams {
            w1: store.add(format!("{name}.w1"), Mat::from_elem((1, 1), init.w1)),
            w2: store.add(format!("{name}.w2"), Mat::from_elem((1, 1), init.w2)),
        }
    }

    pub fn weights(&self, store: &ParamStore) -> FusionWeights {
        FusionWeights {
            w1: store.get(self.w1)[[0, 0]],
            w2: store.get(self.w2)[[0, 0]],
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, slow: Var, fast_up: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let a = g.scale_by(slow, w1)?;
        let b = g.scale_by(fast_up, w2)?;
        g.add(a, b)
    }
}

/// Fusion points of stage `i`: class scores always, features for attention backbones.
#[derive(Clone, Copy, Debug)]
pub struct StageFusion {
    pub logits: FusionParams,
    pub features: Option<FusionParams>,
}

/// Probe hooks for paired forward passes.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the fast path's outputs at this stage with zeros.
    pub zero_fast_stage: Option<usize>,
}

/// Graph handles for a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `N + 1` combined class-score arrays, `C × T`.
    pub combined: Vec<Var>,
    pub slow: Vec<StageVars>,
    /// Fast-path outputs at segment resolution.
    pub fast: Vec<StageVars>,
    /// Input of every slow stage (frame features for stage 0).
    pub slow_inputs: Vec<Var>,
    pub fast_inputs: Vec<Var>,
}

/// Materialised result of [`SfTmn::forward_values`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub combined: Vec<Mat>,
    pub slow_per_stage: Vec<StageOutput>,
    pub fast_per_stage: Vec<StageOutput>,
    pub slow_inputs: Vec<Mat>,
}

impl StageOutputs {
    pub fn final_logits(&self) -> &Mat {
        self.combined.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug)]
pub struct SfTmn {
    config: SfTmnConfig,
    store: ParamStore,
    slow: Backbone,
    fast: Option<Backbone>,
    fusion: Vec<StageFusion>,
}

#[derive(Clone, Copy)]
struct Mixed {
    logits: Var,
    features: Option<Var>,
}

impl SfTmn {
    /// Builds a freshly initialised model (seeded by `config.seed`).
    pub fn new(config: SfTmnConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.stage_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let slow = build_backbone(&specs, "slow", &mut store, &mut rng)?;
        let (fast, fusion) = match config.model {
            ModelKind::Single => (None, Vec::new()),
            ModelKind::Sftmn => {
                let fast = build_backbone(&specs, "fast", &mut store, &mut rng)?;
                let fusion = (0..specs.len())
                    .map(|i| StageFusion {
                        logits: FusionParams::new(&mut store, &format!("fusion{i}.logits"), FusionWeights::default()),
                        features: (config.backbone == BackboneKind::Asformer).then(|| {
                            FusionParams::new(&mut store, &format!("fusion{i}.features"), FusionWeights::default())
                        }),
                    })
                    .collect();
                (Some(fast), fusion)
            }
        };
        Ok(SfTmn {
            config,
            store,
            slow,
            fast,
            fusion,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params`, which must
    /// match it name-for-name and shape-for-shape.
    pub fn from_parts(config: SfTmnConfig, params: ParamStore) -> Result<Self> {
        let mut model = SfTmn::new(config)?;
        if params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let value = params.get(src);
            if value.dim() != model.store.get(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    model.store.get(id).dim()
                )));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &SfTmnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn slow(&self) -> &Backbone {
        &self.slow
    }

    pub fn fast(&self) -> Option<&Backbone> {
        self.fast.as_ref()
    }

    pub fn fusion(&self) -> &[StageFusion] {
        &self.fusion
    }

    pub fn num_outputs(&self) -> usize {
        self.slow.len()
    }

    fn mix(&self, g: &mut Graph, i: usize, slow: StageVars, fast: StageVars, frames: usize) -> Result<Mixed> {
        let len = self.config.segment_length;
        let fusion = &self.fusion[i];
        let up = g.upsample(fast.logits, len, frames)?;
        let logits = fusion.logits.apply(g, &self.store, slow.logits, up)?;
        let features = match fusion.features {
            Some(fp) => {
                let up = g.upsample(fast.features, len, frames)?;
                Some(fp.apply(g, &self.store, slow.features, up)?)
            }
            None => None,
        };
        Ok(Mixed { logits, features })
    }

    /// Input to a refinement stage from class scores (and features for
    /// decoders), optionally pooled down to segment resolution.
    fn stage_input(
        &self,
        g: &mut Graph,
        kind: StageKind,
        logits: Var,
        features: Option<Var>,
        pooled: bool,
    ) -> Result<(Var, Option<Var>)> {
        let len = self.config.segment_length;
        let mode = self.config.pooling_mode();
        let mut probs = g.softmax(logits);
        if pooled {
            probs = g.segment_pool(probs, len, mode)?;
        }
        let cross = match kind {
            StageKind::AsformerDecoder => {
                let f = features.ok_or_else(|| Error::shape("decoder input lacks features"))?;
                Some(if pooled { g.segment_pool(f, len, mode)? } else { f })
            }
            _ => None,
        };
        Ok((probs, cross))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: &mut ForwardCtx,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let (dim, frames) = g.value(x).dim();
        if dim != self.config.input_dim {
            return Err(Error::shape(format!(
                "model expects {}-dimensional features, got {dim}",
                self.config.input_dim
            )));
        }
        if frames == 0 {
            return Err(Error::shape("empty sequence"));
        }
        let store = &self.store;
        let stages = self.slow.stages();
        let Some(fast_bb) = &self.fast else {
            let outs = self.slow.forward(g, store, x, ctx)?;
            return Ok(ForwardVars {
                combined: outs.iter().map(|o| o.logits).collect(),
                slow: outs,
                fast: Vec::new(),
                slow_inputs: vec![x],
                fast_inputs: Vec::new(),
            });
        };
        let len = self.config.segment_length;
        let design = self.config.design;
        let x_fast = g.segment_pool(x, len, self.config.pooling_mode())?;

        let mut vars = ForwardVars {
            combined: Vec::with_capacity(stages.len()),
            slow: Vec::with_capacity(stages.len()),
            fast: Vec::with_capacity(stages.len()),
            slow_inputs: vec![x],
            fast_inputs: vec![x_fast],
        };
        let mut mixed: Vec<Mixed> = Vec::with_capacity(stages.len());

        for (i, (slow_stage, fast_stage)) in stages.iter().zip(fast_bb.stages()).enumerate() {
            let kind = slow_stage.spec().kind;
            let (slow_out, fast_out) = if i == 0 {
                (
                    slow_stage.forward(g, store, x, None, ctx)?,
                    fast_stage.forward(g, store, x_fast, None, ctx)?,
                )
            } else {
                let prev_mix = mixed[i - 1];
                let prev_slow = vars.slow[i - 1];
                let prev_fast = vars.fast[i - 1];
                let (s_in, s_cross) = if design.slow_reads_combined() {
                    self.stage_input(g, kind, prev_mix.logits, prev_mix.features, false)?
                } else {
                    self.stage_input(g, kind, prev_slow.logits, Some(prev_slow.features), false)?
                };
                let (f_in, f_cross) = if design.fast_reads_combined() {
                    self.stage_input(g, kind, prev_mix.logits, prev_mix.features, true)?
                } else {
                    self.stage_input(g, kind, prev_fast.logits, Some(prev_fast.features), false)?
                };
                vars.slow_inputs.push(s_in);
                vars.fast_inputs.push(f_in);
                (
                    slow_stage.forward(g, store, s_in, s_cross, ctx)?,
                    fast_stage.forward(g, store, f_in, f_cross, ctx)?,
                )
            };
            let fast_out = if opts.zero_fast_stage == Some(i) {
                StageVars {
                    features: g.scale(fast_out.features, 0.0),
                    logits: g.scale(fast_out.logits, 0.0),
                }
            } else {
                fast_out
            };
            let m = self.mix(g, i, slow_out, fast_out, frames)?;
            vars.combined.push(m.logits);
            vars.slow.push(slow_out);
            vars.fast.push(fast_out);
            mixed.push(m);
        }
        Ok(vars)
    }

    /// Frozen-model forward pass on `x` (`D × T`).
    pub fn forward_values(&self, x: &Mat) -> Result<StageOutputs> {
        self.forward_values_with(x, &ForwardOptions::default())
    }

    pub fn forward_values_with(&self, x: &Mat, opts: &ForwardOptions) -> Result<StageOutputs> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let vars = self.forward(&mut g, xv, &mut ForwardCtx::eval(), opts)?;
        let mat = |v: Var| g.value(v).clone();
        let out = |s: &StageVars| StageOutput {
            features: mat(s.features),
            logits: mat(s.logits),
        };
        Ok(StageOutputs {
            combined: vars.combined.iter().map(|&v| mat(v)).collect(),
            slow_per_stage: vars.slow.iter().map(out).collect(),
            fast_per_stage: vars.fast.iter().map(out).collect(),
            slow_inputs: vars.slow_inputs.iter().map(|&v| mat(v)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        let x = array![[1.0, 3.0, 2.0, 5.0]];
        assert_eq!(segment_pool(&x, 2, PoolingMode::Max).unwrap(), array![[3.0, 5.0]]);
        let x = array![[1.0, 3.0, 2.0]];
        assert_eq!(segment_pool(&x, 2, PoolingMode::Max).unwrap(), array![[3.0, 2.0]]);
        let x = array![[2.0, 4.0], [6.0, 0.0]];
        assert_eq!(segment_pool(&x, 2, PoolingMode::Average).unwrap(), array![[3.0], [3.0]]);
        let x = array![[3.0, 4.0]];
        let p = segment_pool(&x, 2, PoolingMode::PowerAverage { p: 2.0 }).unwrap();
        assert!((p[[0, 0]] - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(segment_pool(&x, 0, PoolingMode::Max).is_err());
        assert!(segment_pool(&x, 2, PoolingMode::PowerAverage { p: 0.0 }).is_err());
    }

    #[test]
    fn upsample_examples() {
        let y = array![[3.0, 5.0]];
        assert_eq!(upsample_repeat(&y, 2, 4).unwrap(), array![[3.0, 3.0, 5.0, 5.0]]);
        assert_eq!(upsample_repeat(&y, 2, 3).unwrap(), array![[3.0, 3.0, 5.0]]);
        assert!(upsample_repeat(&y, 2, 5).is_err());
        assert!(upsample_repeat(&y, 2, 2).is_err());
    }

    #[test]
    fn fuse_examples() {
        let a = array![[2.0]];
        let b = array![[4.0]];
        assert_eq!(fuse(&a, &b, FusionWeights { w1: 0.5, w2: 0.5 }).unwrap(), array![[3.0]]);
        let s = array![[1.5, -2.0], [0.25, 7.0]];
        let f = array![[9.0, 9.0], [9.0, 9.0]];
        assert_eq!(fuse(&s, &f, FusionWeights { w1: 1.0, w2: 0.0 }).unwrap(), s);
        assert!(fuse(&s, &a, FusionWeights::default()).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = SfTmnConfig::reference(2048, 7);
        let text = cfg.to_kv();
        assert!(text.contains("segment_length = 32"));
        assert!(text.contains("design = \"a\""));
        assert_eq!(SfTmnConfig::from_kv(&text).unwrap(), cfg);
        assert!(SfTmnConfig::from_kv("backbone = \"mstcn\"").is_err());
    }

    #[test]
    fn reference_preset_output_count() {
        let cfg = SfTmnConfig {
            layers: 3,
            feature_maps: 8,
            input_dim: 32,
            ..SfTmnConfig::reference(32, 7)
        };
        let model = SfTmn::new(cfg).unwrap();
        let x = Mat::from_shape_fn((32, 100), |(r, t)| ((r * 7 + t) % 11) as f64 / 11.0);
        let out = model.forward_values(&x).unwrap();
        assert_eq!(out.combined.len(), 4);
        assert!(out.combined.iter().all(|c| c.dim() == (7, 100)));
        assert_eq!(out.fast_per_stage[0].logits.ncols(), 4);
    }

    #[test]
    fn single_model_has_no_fast_path() {
        let cfg = SfTmnConfig {
            model: ModelKind::Single,
            layers: 2,
            feature_maps: 4,
            ..SfTmnConfig::reference(6, 3)
        };
        let model = SfTmn::new(cfg).unwrap();
        assert!(model.fast().is_none());
        let out = model.forward_values(&Mat::ones((6, 9))).unwrap();
        assert_eq!(out.combined.len(), 4);
        assert_eq!(out.combined[3], out.slow_per_stage[3].logits);
    }

    #[test]
    fn fusion_weights_start_symmetric() {
        let model = SfTmn::new(SfTmnConfig {
            layers: 1,
            feature_maps: 2,
            ..SfTmnConfig::reference(3, 2)
        })
        .unwrap();
        for f in model.fusion() {
            assert_eq!(f.logits.weights(model.params()), FusionWeights { w1: 0.5, w2: 0.5 });
        }
    }

    fn matrix() -> impl Strategy<Value = Mat> {
        (1usize..4, 1usize..40).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |v| Mat::from_shape_vec((r, c), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pool_width_and_membership(x in matrix(), len in 1usize..12) {
            let pooled = segment_pool(&x, len, PoolingMode::Max).unwrap();
            prop_assert_eq!(pooled.ncols(), x.ncols().div_ceil(len));
            for r in 0..x.nrows() {
                for w in 0..pooled.ncols() {
                    let hi = ((w + 1) * len).min(x.ncols());
                    prop_assert!((w * len..hi).any(|t| x[[r, t]] == pooled[[r, w]]));
                }
            }
            let up = upsample_repeat(&pooled, len, x.ncols()).unwrap();
            prop_assert_eq!(up.dim(), x.dim());
        }

        #[test]
        fn fuse_is_linear(x in matrix(), a in -3.0f64..3.0, w1 in -2.0f64..2.0, w2 in -2.0f64..2.0) {
            let y = x.mapv(|v| v * 0.5 - 1.0);
            let w = FusionWeights { w1, w2 };
            let lhs = fuse(&(&x * a), &(&y * a), w).unwrap();
            let rhs = fuse(&x, &y, w).unwrap() * a;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + r.abs()));
            }
        }
    }
}
