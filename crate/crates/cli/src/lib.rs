//! `sftmn` command-line front end.

pub mod ribbon;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sftmn_core::featureio::{
    formats, generate_synthetic, load_dataset, parse_mapping, read_labels, write_dataset,
};
use sftmn_core::harness::{self, load_checkpoint};
use sftmn_core::{
    BackboneKind, ClassMapping, ClassSet, Design, EvaluationReport, FeatureFormat, FeatureLayout,
    FeatureSequence, LabelSequence, ModelKind, OptimizerKind, PoolKind, SfTmnConfig,
    SyntheticSpec, TrainConfig, VideoSample,
};

use ribbon::{render_ribbon, RibbonFormat, RibbonSpec};

/// Exit status for bad flags or missing input files.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for failures after the inputs were accepted.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(&m.replace('\n', " ")),
        }
    }
}

impl From<sftmn_core::Error> for CliError {
    fn from(e: sftmn_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sftmn", version, about = "Slow/fast temporal modeling for action segmentation")]
pub struct Cli {
    /// Suppress per-epoch progress on stderr
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset in the on-disk layout
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and log
    Train(TrainArgs),
    /// Score a checkpoint (or stored predictions) against ground truth
    Eval(EvalArgs),
    /// Write per-frame class names predicted by a checkpoint
    Predict(PredictArgs),
    /// Render colour-coded label ribbons
    Ribbon(RibbonArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Dataset directory holding features/, groundTruth/, splits/ and mapping.txt
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Split file, or a split name under <dataset-root>/splits
    #[arg(long)]
    pub split: Option<String>,
    /// Class mapping file [default: <dataset-root>/mapping.txt]
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Axis order of stored feature arrays
    #[arg(long, default_value = "DxT")]
    pub feature_layout: FeatureLayout,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub videos: usize,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub min_len: usize,
    #[arg(long, default_value_t = 400)]
    pub max_len: usize,
    #[arg(long, default_value_t = 40.0)]
    pub mean_segment: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Feature file encoding: npy or raw
    #[arg(long, default_value = "npy")]
    pub format: String,
    /// Name of the split file written under splits/
    #[arg(long, default_value = "all")]
    pub split_name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Training config file; flags given on the command line take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mstcn or asformer [default: mstcn]
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// single (backbone only) or sftmn [default: sftmn]
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Slow/fast wiring: a, b, c or d [default: a]
    #[arg(long)]
    pub design: Option<Design>,
    /// Frames pooled into one fast-path step [default: 32]
    #[arg(long)]
    pub segment_length: Option<usize>,
    /// Fast-path pooling: max, avg or power [default: max]
    #[arg(long)]
    pub pool: Option<PoolKind>,
    /// Exponent for power pooling [default: 2]
    #[arg(long)]
    pub power_p: Option<f64>,
    /// Total MS-TCN stages per path (one modelling stage plus refinements)
    #[arg(long, conflicts_with = "decoders")]
    pub stages: Option<usize>,
    /// ASFormer decoders per path (one refinement stage each)
    #[arg(long)]
    pub decoders: Option<usize>,
    /// Dilated layers per stage [default: 10]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Channels per stage [default: 64]
    #[arg(long)]
    pub feature_maps: Option<usize>,
    /// Dropout rate during training [default: 0]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Smoothing loss weight [default: 0.15]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Smoothing loss truncation [default: 4]
    #[arg(long)]
    pub tau: Option<f64>,
    /// adam or sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Videos per optimiser step [default: 1]
    #[arg(long)]
    pub batch_videos: Option<usize>,
    /// Clip the global gradient norm to this value [default: off]
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Seeds both initialisation and the epoch shuffle
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of stored predictions (<id>.txt, one class name per line)
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Classes averaged into precision, recall and Jaccard: gt-or-pred or gt-only
    #[arg(long, default_value_t = ClassSet::GtOrPred)]
    pub class_set: ClassSet,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single feature file (.npy or .sftmn) instead of a dataset split
    #[arg(long, conflicts_with_all = ["dataset_root", "split"])]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RibbonArgs {
    /// Row as NAME=LABEL_FILE; repeat for more rows, drawn top to bottom
    #[arg(long = "row", value_name = "NAME=FILE")]
    pub rows: Vec<String>,
    /// Adds prediction and ground-truth rows for this video id
    #[arg(long, requires_all = ["predictions", "dataset_root"])]
    pub video: Option<String>,
    /// Directory holding the predicted <id>.txt files
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Dataset directory; its groundTruth/ supplies the reference row
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Class mapping [default: <dataset-root>/mapping.txt]
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// svg, ppm or csv
    #[arg(long, default_value = "svg")]
    pub format: RibbonFormat,
    /// Band width in pixels
    #[arg(long, default_value_t = 800)]
    pub width: usize,
    /// Output file stem
    #[arg(long, default_value = "ribbon")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn existing_file(path: &Path, what: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

struct Dataset {
    samples: Vec<VideoSample>,
    mapping: Arc<ClassMapping>,
}

fn resolve_split(root: &Path, split: &str) -> CliResult<PathBuf> {
    let direct = PathBuf::from(split);
    let candidates = [
        direct.clone(),
        root.join("splits").join(split),
        root.join("splits").join(format!("{split}.bundle")),
    ];
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Usage(format!("split {split} not found (also looked under {})", root.join("splits").display())))
}

fn mapping_path(root: Option<&Path>, explicit: Option<&Path>) -> CliResult<PathBuf> {
    match (explicit, root) {
        (Some(p), _) => existing_file(p, "mapping file"),
        (None, Some(r)) => existing_file(&r.join("mapping.txt"), "mapping file"),
        (None, None) => Err(CliError::Usage("--mapping or --dataset-root is required".into())),
    }
}

fn open_dataset(args: &DatasetArgs) -> CliResult<Dataset> {
    let root = require(args.dataset_root.clone(), "--dataset-root")?;
    if !root.is_dir() {
        return Err(CliError::Usage(format!("dataset root {} is not a directory", root.display())));
    }
    let split = resolve_split(&root, &require(args.split.clone(), "--split")?)?;
    let mapping = parse_mapping(&mapping_path(Some(&root), args.mapping.as_deref())?)?;
    let samples = load_dataset(&root, &split, &mapping, args.feature_layout)?;
    Ok(Dataset {
        samples,
        mapping: Arc::new(mapping),
    })
}

fn note(quiet: bool, msg: impl fmt::Display) {
    if !quiet {
        eprintln!("{msg}");
    }
}

pub fn synth(args: &SynthArgs, quiet: bool) -> CliResult {
    let format = match args.format.as_str() {
        "npy" => FeatureFormat::Npy,
        "raw" => FeatureFormat::Raw,
        other => return Err(CliError::Usage(format!("unknown feature format `{other}` (npy or raw)"))),
    };
    let spec = SyntheticSpec {
        num_videos: args.videos,
        num_classes: args.classes,
        feature_dim: args.dim,
        min_len: args.min_len,
        max_len: args.max_len,
        mean_segment: args.mean_segment,
        noise: args.noise,
        separation: args.separation,
        seed: args.seed,
    };
    let (samples, mapping) = generate_synthetic(&spec)?;
    write_dataset(&args.out, &samples, &mapping, &args.split_name, format)?;
    fs::write(args.out.join("synth.toml"), toml::to_string(&spec).expect("spec serialises"))?;
    note(
        quiet,
        format_args!("wrote {} videos, {} classes, to {}", samples.len(), mapping.len(), args.out.display()),
    );
    Ok(())
}

fn train_config(args: &TrainArgs, input_dim: usize, classes: usize) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_kv(&fs::read_to_string(existing_file(p, "config file")?)?)?,
        None => TrainConfig::reference(SfTmnConfig::reference(input_dim, classes)),
    };
    let m = &mut cfg.model;
    if let Some(v) = args.backbone {
        m.backbone = v;
        if args.config.is_none() && args.stages.is_none() && args.decoders.is_none() {
            // one modelling stage plus three refinement stages for either backbone
            m.refinement_stages = 3;
        }
    }
    if let Some(v) = args.model {
        m.model = v;
    }
    if let Some(v) = args.design {
        m.design = v;
    }
    if let Some(v) = args.segment_length {
        m.segment_length = v;
    }
    if let Some(v) = args.pool {
        m.pooling = v;
    }
    if let Some(v) = args.power_p {
        m.power_p = v;
    }
    if let Some(v) = args.stages {
        if m.backbone != BackboneKind::Mstcn {
            return Err(CliError::Usage("--stages applies to the mstcn backbone; use --decoders".into()));
        }
        if v == 0 {
            return Err(CliError::Usage("--stages must be at least 1".into()));
        }
        m.refinement_stages = v - 1;
    }
    if let Some(v) = args.decoders {
        if m.backbone != BackboneKind::Asformer {
            return Err(CliError::Usage("--decoders applies to the asformer backbone; use --stages".into()));
        }
        m.refinement_stages = v;
    }
    if let Some(v) = args.layers {
        m.layers = v;
    }
    if let Some(v) = args.feature_maps {
        m.feature_maps = v;
    }
    if let Some(v) = args.dropout {
        m.dropout = v;
    }
    if let Some(v) = args.seed {
        m.seed = v;
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = args.tau {
        cfg.loss.tau = v;
    }
    if let Some(v) = args.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = args.batch_videos {
        cfg.batch_videos = v;
    }
    if args.grad_clip.is_some() {
        cfg.grad_clip = args.grad_clip;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.model.input_dim != input_dim || cfg.model.num_classes != classes {
        return Err(CliError::Runtime(format!(
            "config expects {}-dimensional features and {} classes, dataset has {input_dim} and {classes}",
            cfg.model.input_dim, cfg.model.num_classes
        )));
    }
    Ok(cfg)
}

pub fn train(args: &TrainArgs, quiet: bool) -> CliResult {
    if let Some(p) = &args.config {
        existing_file(p, "config file")?;
    }
    let data = open_dataset(&args.data)?;
    let dim = data.samples[0].features.dim();
    let cfg = train_config(args, dim, data.mapping.len())?;
    let started = Instant::now();
    note(
        quiet,
        format_args!(
            "training {} {} (design {}, L={}, {} pooling) on {} videos, epoch order seed {}",
            cfg.model.model, cfg.model.backbone, cfg.model.design, cfg.model.segment_length, cfg.model.pooling,
            data.samples.len(), cfg.seed
        ),
    );
    let epochs = cfg.epochs;
    let mut trained = harness::train_with(&cfg, &data.samples, |r| {
        note(quiet, format_args!("epoch {:>4}/{epochs}  loss {:.6}  train_acc {:.2}", r.epoch, r.loss, r.train_acc));
    })?;
    trained.save(&args.out)?;
    fs::write(args.out.join("train_config.toml"), cfg.to_kv())?;
    note(quiet, format_args!("elapsed {:.1}s", started.elapsed().as_secs_f64()));
    if let Some(last) = trained.log.final_record() {
        println!(
            "epoch {}: loss {:.6}, train accuracy {:.2}%, checkpoint {}",
            last.epoch,
            last.loss,
            last.train_acc,
            args.out.join("model.ckpt").display()
        );
    }
    Ok(())
}

fn write_report(report: &EvaluationReport, out: &Path) -> CliResult {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    print!("{}", report.frame_table());
    let a = &report.aggregate;
    println!(
        "edit {:.2} ± {:.2}  f1@10 {:.2}  f1@25 {:.2}  f1@50 {:.2}  f1_avg {:.2}",
        a.edit.mean, a.edit.std, a.f1_10.mean, a.f1_25.mean, a.f1_50.mean, a.f1_avg.mean
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult {
    if let Some(p) = &args.checkpoint {
        existing_file(p, "checkpoint")?;
    }
    if let Some(p) = &args.predictions {
        if !p.is_dir() {
            return Err(CliError::Usage(format!("predictions directory {} does not exist", p.display())));
        }
    }
    let data = open_dataset(&args.data)?;
    let classes = data.mapping.len();
    let report = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), _) => {
            let model = load_checkpoint(ckpt)?;
            let preds = harness::predict_dataset(&model, &data.samples)?;
            let dir = args.out.join("predictions");
            fs::create_dir_all(&dir)?;
            let mut rows = Vec::with_capacity(preds.len());
            for (v, p) in data.samples.iter().zip(preds) {
                let seq = LabelSequence::new(p, data.mapping.clone())?;
                fs::write(dir.join(format!("{}.txt", v.id)), seq.to_text())?;
                rows.push(harness::score_video(&v.id, seq.labels(), v.labels.labels(), classes, args.class_set)?);
            }
            EvaluationReport::new(rows)?
        }
        (None, Some(dir)) => {
            let mut rows = Vec::with_capacity(data.samples.len());
            for v in &data.samples {
                let path = dir.join(format!("{}.txt", v.id));
                let pred = read_labels(&existing_file(&path, "prediction file")?, data.mapping.clone())?;
                rows.push(harness::score_video(&v.id, pred.labels(), v.labels.labels(), classes, args.class_set)?);
            }
            EvaluationReport::new(rows)?
        }
        (None, None) => return Err(CliError::Usage("--checkpoint or --predictions is required".into())),
    };
    write_report(&report, &args.out)
}

pub fn predict(args: &PredictArgs) -> CliResult {
    existing_file(&args.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    let mut written = 0;
    if let Some(path) = &args.features {
        existing_file(path, "feature file")?;
        let mapping = Arc::new(parse_mapping(&mapping_path(None, args.data.mapping.as_deref())?)?);
        let values = formats::read_features(path, args.data.feature_layout)?;
        let seq = harness::predict(&model, &FeatureSequence::new(values, 1.0)?, mapping)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
        fs::write(args.out.join(format!("{stem}.txt")), seq.to_text())?;
        written += 1;
    } else {
        let data = open_dataset(&args.data)?;
        for (v, p) in data.samples.iter().zip(harness::predict_dataset(&model, &data.samples)?) {
            let seq = LabelSequence::new(p, data.mapping.clone())?;
            fs::write(args.out.join(format!("{}.txt", v.id)), seq.to_text())?;
            written += 1;
        }
    }
    println!("wrote {written} prediction file(s) to {}", args.out.display());
    Ok(())
}

pub fn ribbon(args: &RibbonArgs) -> CliResult {
    let mapping = Arc::new(parse_mapping(&mapping_path(args.dataset_root.as_deref(), args.mapping.as_deref())?)?);
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    for row in &args.rows {
        let (name, file) = row
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--row expects NAME=FILE, got `{row}`")))?;
        sources.push((name.to_string(), existing_file(Path::new(file), "label file")?));
    }
    if let (Some(id), Some(pred), Some(root)) = (&args.video, &args.predictions, &args.dataset_root) {
        let file = format!("{id}.txt");
        sources.push(("prediction".into(), existing_file(&pred.join(&file), "prediction file")?));
        sources.push(("ground truth".into(), existing_file(&root.join("groundTruth").join(&file), "ground-truth file")?));
    }
    if sources.is_empty() {
        return Err(CliError::Usage("give at least one --row or --video".into()));
    }
    let rows = sources
        .into_iter()
        .map(|(name, path)| Ok((name, read_labels(&path, mapping.clone())?)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut spec = RibbonSpec::new(rows, args.format);
    spec.width = args.width;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("{}.{}", args.name, args.format.extension()));
    render_ribbon(&spec, &path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.quiet),
        Command::Train(a) => train(a, cli.quiet),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ribbon(a) => ribbon(a),
    }
}

/// Parses `argv` and runs it. Returns the process exit status.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("sftmn: {}", line.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sftmn: {e}");
            e.exit_code()
        }
    }
}
