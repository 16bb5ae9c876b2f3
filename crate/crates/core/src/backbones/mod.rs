//! Single-path temporal backbones: dilated temporal-convolution stages and
//! attention encoder/decoder stages, all behind [`Stage`].
//!
//! A stage maps an input sequence (`in × T`) to per-frame features
//! (`feature_maps × T`) and class scores (`C × T`). Stages are chained by
//! [`Backbone`]: convolution refinement stages read the previous stage's
//! softmax probabilities, decoders read those probabilities plus the previous
//! stage's features as attention values.

mod asformer;
mod tcn;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};

pub use asformer::AttentionBlock;
pub use tcn::DilatedResidualBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    TcnStage,
    AsformerEncoder,
    AsformerDecoder,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::TcnStage => "tcn-stage",
            StageKind::AsformerEncoder => "asformer-encoder",
            StageKind::AsformerDecoder => "asformer-decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub num_layers: usize,
    pub feature_maps: usize,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("feature_maps", self.feature_maps),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{} stage: {name} must be positive", self.kind.as_str())));
            }
        }
        if self.num_layers > 24 {
            return Err(Error::config(format!(
                "{} layers gives a dilation beyond any realistic sequence",
                self.num_layers
            )));
        }
        Ok(())
    }

    /// Dilation of layer `l`.
    pub fn dilation(layer: usize) -> usize {
        1 << layer
    }

    /// Frames on each side of `t` that can influence output `t` of a
    /// convolution stage with kernel 3.
    pub fn receptive_radius(&self) -> usize {
        (0..self.num_layers).map(Self::dilation).sum()
    }
}

/// Per-forward settings: dropout is active only when an RNG is supplied.
pub struct ForwardCtx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_shape_fn(g.value(x).dim(), |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                g.mask(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Weight and bias of a 1-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    /// Fan-in uniform initialisation scaled by `gain`.
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = gain / ((cin * kernel) as f64).sqrt();
        let w = Mat::from_shape_fn((cout, cin * kernel), |_| rng.gen_range(-bound..bound));
        let b = Mat::from_shape_fn((cout, 1), |_| rng.gen_range(-bound..bound));
        Conv {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), b),
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.kernel, self.dilation)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Residual(DilatedResidualBlock),
    Attention(AttentionBlock),
}

/// Graph handles for one stage's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub features: Var,
    pub logits: Var,
}

/// Materialised stage output.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub features: Mat,
    pub logits: Mat,
}

/// One temporal stage: input projection, a stack of layers, class head.
#[derive(Clone, Debug)]
pub struct Stage {
    spec: StageSpec,
    name: String,
    conv_in: Conv,
    layers: Vec<Layer>,
    conv_out: Conv,
}

impl Stage {
    /// `alpha` weights the attention branch (decoders decay it with depth).
    pub fn new(
        spec: StageSpec,
        name: &str,
        alpha: f64,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let maps = spec.feature_maps;
        let conv_in = Conv::new(store, &format!("{name}.conv_in"), spec.input_dim, maps, 1, 1, 1.0, rng);
        let layers = (0..spec.num_layers)
            .map(|l| {
                let dilation = StageSpec::dilation(l);
                let lname = format!("{name}.layer{l}");
                Ok(match spec.kind {
                    StageKind::TcnStage => {
                        Layer::Residual(DilatedResidualBlock::new(store, &lname, maps, dilation, rng)?)
                    }
                    StageKind::AsformerEncoder | StageKind::AsformerDecoder => {
                        Layer::Attention(AttentionBlock::new(store, &lname, maps, dilation, alpha, rng)?)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv::new(
            store,
            &format!("{name}.conv_out"),
            maps,
            spec.num_classes,
            1,
            1,
            1.0,
            rng,
        );
        Ok(Stage {
            spec,
            name: name.to_string(),
            conv_in,
            layers,
            conv_out,
        })
    }

    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Every parameter owned by this stage, in construction order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.conv_in.params().to_vec();
        for layer in &self.layers {
            match layer {
                Layer::Residual(b) => out.extend(b.params()),
                Layer::Attention(b) => out.extend(b.params()),
            }
        }
        out.extend(self.conv_out.params());
        out
    }

    /// `input` is `input_dim × T`; decoders additionally take `cross`
    /// (`feature_maps × T`) as the attention value source.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        cross: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<StageVars> {
        let (rows, frames) = g.value(input).dim();
        if rows != self.spec.input_dim {
            return Err(Error::shape(format!(
                "stage {} expects {} input channels, got {rows}",
                self.name, self.spec.input_dim
            )));
        }
        let cross = match (self.spec.kind, cross) {
            (StageKind::AsformerDecoder, Some(c)) => {
                if g.value(c).dim() != (self.spec.feature_maps, frames) {
                    return Err(Error::shape(format!(
                        "decoder {} expects cross features {:?}, got {:?}",
                        self.name,
                        (self.spec.feature_maps, frames),
                        g.value(c).dim()
                    )));
                }
                Some(c)
            }
            (StageKind::AsformerDecoder, None) => {
                return Err(Error::shape(format!("decoder {} needs encoder features", self.name)))
            }
            _ => None,
        };
        let mut f = self.conv_in.forward(g, store, input)?;
        for layer in &self.layers {
            f = match layer {
                Layer::Residual(b) => b.forward(g, store, f, ctx)?,
                Layer::Attention(b) => b.forward(g, store, f, cross, ctx)?,
            };
        }
        let logits = self.conv_out.forward(g, store, f)?;
        Ok(StageVars { features: f, logits })
    }
}

/// A chain of stages forming a single-path model.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
}

/// Checks that consecutive stage specs fit together.
pub fn validate_chain(specs: &[StageSpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::config("a backbone needs at least one stage"))?;
    if first.kind == StageKind::AsformerDecoder {
        return Err(Error::config("the first stage cannot be a decoder"));
    }
    for spec in specs {
        spec.validate()?;
    }
    for (i, pair) in specs.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        match next.kind {
            StageKind::AsformerEncoder => {
                return Err(Error::config(format!("stage {} : an encoder can only come first", i + 1)))
            }
            StageKind::TcnStage if prev.kind != StageKind::TcnStage => {
                return Err(Error::config(format!(
                    "stage {}: convolution stages cannot refine attention stages",
                    i + 1
                )))
            }
            StageKind::AsformerDecoder if prev.kind == StageKind::TcnStage => {
                return Err(Error::config(format!(
                    "stage {}: a decoder must follow an encoder or decoder",
                    i + 1
                )))
            }
            _ => {}
        }
        if next.input_dim != prev.num_classes {
            return Err(Error::config(format!(
                "stage {} consumes {} channels but stage {} emits {} class probabilities",
                i + 1,
                next.input_dim,
                i,
                prev.num_classes
            )));
        }
        if next.kind == StageKind::AsformerDecoder && next.feature_maps != prev.feature_maps {
            return Err(Error::config(format!(
                "decoder {} has {} feature maps, previous stage {}",
                i + 1,
                next.feature_maps,
                prev.feature_maps
            )));
        }
        if next.num_classes != prev.num_classes {
            return Err(Error::config(format!(
                "stage {} predicts {} classes, stage {} predicts {}",
                i + 1,
                next.num_classes,
                i,
                prev.num_classes
            )));
        }
    }
    Ok(())
}

/// Attention-branch weight of the `index`-th decoder (0-based).
pub fn decoder_alpha(index: usize) -> f64 {
    (-3.0 * index as f64).exp()
}

/// Builds a parameterised stack. Parameter names are prefixed with `prefix`.
pub fn build_backbone(
    specs: &[StageSpec],
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone> {
    validate_chain(specs)?;
    let mut decoders = 0;
    let stages = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let alpha = if spec.kind == StageKind::AsformerDecoder {
                decoders += 1;
                decoder_alpha(decoders - 1)
            } else {
                1.0
            };
            Stage::new(spec.clone(), &format!("{prefix}.stage{i}"), alpha, store, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Backbone { stages })
}

/// Graph input a refinement stage reads from the previous output, plus the
/// cross-attention source for decoders.
pub(crate) fn refinement_input(
    g: &mut Graph,
    kind: StageKind,
    prev: StageVars,
) -> (Var, Option<Var>) {
    let probs = g.softmax(prev.logits);
    match kind {
        StageKind::AsformerDecoder => (probs, Some(prev.features)),
        _ => (probs, None),
    }
}

impl Backbone {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].spec.input_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<StageVars>> {
        let mut outs: Vec<StageVars> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = match outs.last() {
                None => stage.forward(g, store, x, None, ctx)?,
                Some(prev) => {
                    let (input, cross) = refinement_input(g, stage.spec.kind, *prev);
                    stage.forward(g, store, input, cross, ctx)?
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }

    /// Forward pass on a frozen model; returns logits per stage.
    pub fn predict(&self, store: &ParamStore, x: &Mat) -> Result<Vec<StageOutput>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let outs = self.forward(&mut g, store, xv, &mut ForwardCtx::eval())?;
        Ok(outs.into_iter().map(|o| materialise(&g, o)).collect())
    }
}

fn expect_kind(stage: &Stage, kind: StageKind) -> Result<()> {
    if stage.spec.kind != kind {
        return Err(Error::config(format!(
            "stage {} is a {}, not a {}",
            stage.name,
            stage.spec.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

fn materialise(g: &Graph, vars: StageVars) -> StageOutput {
    StageOutput {
        features: g.value(vars.features).clone(),
        logits: g.value(vars.logits).clone(),
    }
}

/// Runs an encoder stage on `x` (`D × T`).
pub fn asformer_encoder_forward(stage: &Stage, store: &ParamStore, x: &Mat) -> Result<StageOutput> {
    expect_kind(stage, StageKind::AsformerEncoder)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = stage.forward(&mut g, store, xv, None, &mut ForwardCtx::eval())?;
    Ok(materialise(&g, out))
}

/// Runs a decoder stage: queries come from the softmax of `prior.logits`,
/// attention values from `encoder_features`.
pub fn asformer_decoder_forward(
    stage: &Stage,
    store: &ParamStore,
    prior: &StageOutput,
    encoder_features: &Mat,
) -> Result<StageOutput> {
    expect_kind(stage, StageKind::AsformerDecoder)?;
    if prior.logits.ncols() != encoder_features.ncols() {
        return Err(Error::shape(format!(
            "prior spans {} frames, encoder features {}",
            prior.logits.ncols(),
            encoder_features.ncols()
        )));
    }
    let mut g = Graph::new();
    let logits = g.input(prior.logits.clone());
    let probs = g.softmax(logits);
    let cross = g.input(encoder_features.clone());
    let out = stage.forward(&mut g, store, probs, Some(cross), &mut ForwardCtx::eval())?;
    Ok(materialise(&g, out))
}

/// Stage specs for a convolution backbone with `stages` stages.
pub fn tcn_specs(stages: usize, layers: usize, maps: usize, classes: usize, input_dim: usize) -> Vec<StageSpec> {
    (0..stages)
        .map(|i| StageSpec {
            kind: StageKind::TcnStage,
            num_layers: layers,
            feature_maps: maps,
            num_classes: classes,
            input_dim: if i == 0 { input_dim } else { classes },
        })
        .collect()
}

/// Stage specs for one encoder followed by `decoders` decoders.
pub fn asformer_specs(
    decoders: usize,
    layers: usize,
    maps: usize,
    classes: usize,
    input_dim: usize,
) -> Vec<StageSpec> {
    std::iter::once(StageSpec {
        kind: StageKind::AsformerEncoder,
        num_layers: layers,
        feature_maps: maps,
        num_classes: classes,
        input_dim,
    })
    .chain((0..decoders).map(|_| StageSpec {
        kind: StageKind::AsformerDecoder,
        num_layers: layers,
        feature_maps: maps,
        num_classes: classes,
        input_dim: classes,
    }))
    .collect()
}
