//! `weldsign` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use weldsign::cost::{analyze_with, compare_to_reference, published_reference, CostOptions};
use weldsign::graph::{build_grnet_with, build_named, GrnetWidths, GynetConfig, GynetVariant, GRNET_INPUT, GYNET_INPUT};
use weldsign::imageops::{load_image, save_image};
use weldsign::metrics::{evaluate, DetectionRecord, GroundTruthBox, DEFAULT_MATCH_IOU};
use weldsign::pipeline::{classify_orientation, recognize, run_pipeline, Classifier, Detector, PipelineConfig};
use weldsign::synth::{
    gen_scene_dataset, pipeline_scene, read_jsonl, read_orientation_dataset, write_jsonl, write_orientation_dataset,
    write_scene_dataset, ImageSet,
};
use weldsign::train::{init_weights, train_with, TrainConfig};
use weldsign::WeightStore;

#[derive(Parser)]
#[command(name = "weldsign", version, about = "Weld-radiograph sign recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and FLOP report for a built-in model.
    Analyze(AnalyzeArgs),
    /// Train the orientation classifier.
    TrainCls(TrainArgs),
    /// Orientation class of one image.
    Classify(ClassifyArgs),
    /// Sign detections for one image.
    Recognize(RecognizeArgs),
    /// Classify, turn upright, then detect.
    Pipeline(PipelineArgs),
    /// Generate synthetic datasets, scenes or weight files.
    Synth(SynthArgs),
    /// Detection metrics for a detections file against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckTarget {
    /// Published parameter, size and FLOP totals.
    Paper,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(weldsign::graph::MODEL_NAMES))]
    model: String,
    /// Square input side; defaults to the model's native size.
    #[arg(long)]
    input: Option<usize>,
    #[arg(long, conflicts_with = "table")]
    json: bool,
    #[arg(long)]
    table: bool,
    #[arg(long, value_enum)]
    check: Option<CheckTarget>,
    #[arg(long)]
    count_bn: bool,
    #[arg(long)]
    count_pool: bool,
    #[arg(long)]
    count_elementwise: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory: either `train/` and `val/` subdirectories, or a
    /// single split used with `--val`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    lr_step: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label_smoothing: Option<f32>,
    /// JSON `TrainConfig`; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Divide every stage width by this (4 gives the miniature).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    #[arg(long)]
    out: PathBuf,
    /// Training log path; defaults to `<out>.log.json`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Side the tiles are resized to before classification.
    #[arg(long, default_value_t = GRNET_INPUT)]
    input: usize,
    #[arg(long, default_value_t = GYNET_INPUT)]
    tile: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    Baseline,
    Sib,
    Cwb,
}

impl From<Variant> for GynetVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Full => GynetVariant::Full,
            Variant::Baseline => GynetVariant::Baseline,
            Variant::Sib => GynetVariant::SpatialOnly,
            Variant::Cwb => GynetVariant::ChannelOnly,
        }
    }
}

#[derive(Args)]
struct DetectOptions {
    /// JSON `PipelineConfig`; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    conf: Option<f32>,
    #[arg(long)]
    iou: Option<f32>,
    #[arg(long, value_enum, default_value = "full")]
    variant: Variant,
    /// Write JSON here instead of stdout (only after every stage succeeded).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    opts: DetectOptions,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    cls_weights: PathBuf,
    #[arg(long)]
    det_weights: PathBuf,
    #[arg(long)]
    cls_input: Option<usize>,
    /// Accepted for symmetry with other commands; output is always JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    opts: DetectOptions,
}

#[derive(Args)]
struct SynthArgs {
    #[command(subcommand)]
    what: SynthCommand,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Orientation dataset with `train/` and `val/` splits.
    Orientation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 400)]
        val: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = GRNET_INPUT)]
        size: usize,
    },
    /// Detection scenes with ground-truth boxes.
    Scenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// One pipeline input: signs plus the orientation mark, turned clockwise
    /// by `label` quarter turns.
    Scene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = GYNET_INPUT)]
        size: usize,
    },
    /// Randomly initialised weights for a built-in model.
    Weights {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(weldsign::graph::MODEL_NAMES))]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Classifier only: divide every stage width by this.
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Ground truth, JSON lines of `{"image", "box", "class_id"}`.
    #[arg(long)]
    gt: PathBuf,
    /// Detections, JSON lines of `{"image", "class_id", "score", "box"}`.
    #[arg(long)]
    dets: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
    iou: f32,
}

/// Failures sorted by exit code.
enum Failure {
    Data(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult = Result<(), Failure>;

fn print_json(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_weights(path: &Path) -> anyhow::Result<WeightStore> {
    WeightStore::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<weldsign::Tensor> {
    load_image(path).with_context(|| format!("loading image {}", path.display()))
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult {
    let (graph, native) = build_named(&a.model).ok_or_else(|| anyhow!("unknown model {}", a.model))?;
    let side = a.input.unwrap_or(native);
    let opts = CostOptions {
        count_bn: a.count_bn,
        count_pool: a.count_pool,
        count_elementwise: a.count_elementwise,
    };
    let report = analyze_with(&graph, &[side, side, 3], opts).context("analyzing graph")?;
    let comparison = match a.check {
        Some(CheckTarget::Paper) => Some(
            published_reference(&a.model)
                .map(|r| compare_to_reference(&report, &r))
                .ok_or_else(|| anyhow!("no published totals for {}", a.model))?,
        ),
        None => None,
    };
    if a.json {
        let mut v = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
        if let Some(c) = &comparison {
            v["check"] = serde_json::to_value(c).map_err(anyhow::Error::from)?;
        }
        print_json(&v, None)?;
    } else {
        if a.table {
            print!("{}", report.to_table());
        } else {
            let t = &report.totals;
            println!("model   {}", report.model);
            println!("input   {:?}", report.input);
            println!("params  {}", t.params);
            println!("size    {:.3} MB", t.size_mb());
            println!("flops   {} (MAC)", t.flops);
            println!("madds   {}", t.madds);
        }
        if let Some(c) = &comparison {
            println!("check against {}:", c.reference);
            for r in &c.rows {
                println!(
                    "  {:<7?} expected {:>14.4e}  actual {:>14.4e}  rel.err {:>7.4}  {}",
                    r.metric,
                    r.expected,
                    r.actual,
                    r.relative_error,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
        }
    }
    match comparison {
        Some(c) if !c.pass => Err(Failure::Check(format!("{} does not match {}", a.model, c.reference))),
        _ => Ok(()),
    }
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.lr_step {
        cfg.lr_step_epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.label_smoothing {
        cfg.label_smoothing = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = train_config(&a)?;
    if a.width_divisor == 0 || 64 % a.width_divisor != 0 {
        return Err(Failure::Data(anyhow!("width divisor must divide 64")));
    }
    let (train_dir, val_dir) = match &a.val {
        Some(v) => (a.data.clone(), v.clone()),
        None => (a.data.join("train"), a.data.join("val")),
    };
    let read = |d: &Path| read_orientation_dataset(d).with_context(|| format!("reading dataset {}", d.display()));
    let train_set = read(&train_dir)?;
    let val_set = read(&val_dir)?;
    if train_set.size != val_set.size {
        return Err(Failure::Data(anyhow!(
            "train images are {}² but validation images are {}²",
            train_set.size,
            val_set.size
        )));
    }
    let graph = build_grnet_with(GrnetWidths::scaled(a.width_divisor));
    let quiet = a.quiet;
    let outcome = train_with(&graph, &train_set, &val_set, &cfg, None, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.4}  loss {:.4}  train {:.4}  val {:.4}  ({:.1}s)",
                e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_accuracy, e.seconds
            );
        }
    })
    .context("training")?;
    outcome.weights.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.json");
        PathBuf::from(p)
    });
    let mut log = serde_json::to_value(&outcome.log).map_err(anyhow::Error::from)?;
    log["input_size"] = train_set.size.into();
    log["width_divisor"] = a.width_divisor.into();
    print_json(&log, Some(&log_path))?;
    println!(
        "best val accuracy {:.4} at epoch {}; final {:.4}",
        outcome.log.best_val_accuracy, outcome.log.best_epoch, outcome.log.final_val_accuracy
    );
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> CliResult {
    let cls = Classifier::new(load_weights(&a.weights)?, a.input).context("classifier weights")?;
    let img = load(&a.image)?;
    let o = classify_orientation(&img, &cls, a.tile).context("classifying")?;
    print_json(&o, None)?;
    Ok(())
}

fn pipeline_config(o: &DetectOptions) -> anyhow::Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &o.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = o.conf {
        cfg.conf_threshold = v;
    }
    if let Some(v) = o.iou {
        cfg.nms_iou = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn detector(path: &Path, o: &DetectOptions, cfg: &PipelineConfig) -> anyhow::Result<Detector> {
    let gcfg = GynetConfig {
        classes: cfg.class_names.len(),
        anchors_per_head: cfg.anchors_13.len(),
        ..GynetConfig::variant(o.variant.into())
    };
    Detector::new(load_weights(path)?, &gcfg, cfg.detector_input).context("detector weights")
}

fn cmd_recognize(a: RecognizeArgs) -> CliResult {
    let cfg = pipeline_config(&a.opts)?;
    let det = detector(&a.weights, &a.opts, &cfg)?;
    let img = load(&a.image)?;
    let rec = recognize(&img, &det, &cfg).context("recognizing")?;
    print_json(&rec, a.opts.out.as_deref())?;
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> CliResult {
    let mut cfg = pipeline_config(&a.opts)?;
    if let Some(v) = a.cls_input {
        cfg.classifier_input = v;
    }
    let cls = Classifier::new(load_weights(&a.cls_weights)?, cfg.classifier_input).context("classifier weights")?;
    let det = detector(&a.det_weights, &a.opts, &cfg)?;
    let img = load(&a.image)?;
    let name = a.image.display().to_string();
    let result = run_pipeline(&name, &img, &cls, &det, &cfg).context("pipeline")?;
    print_json(&result, a.opts.out.as_deref())?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    match a.what {
        SynthCommand::Orientation {
            out,
            train,
            val,
            seed,
            size,
        } => {
            if size == 0 || train == 0 || val == 0 {
                return Err(Failure::Data(anyhow!("sizes and counts must be positive")));
            }
            // Validation indices start after the training ones, so the
            // splits never share an image.
            write_orientation_dataset(out.join("train"), &ImageSet::orientation(seed, 0..train, size))
                .context("writing train split")?;
            write_orientation_dataset(out.join("val"), &ImageSet::orientation(seed, train..train + val, size))
                .context("writing val split")?;
        }
        SynthCommand::Scenes { out, n, seed } => {
            write_scene_dataset(&out, &gen_scene_dataset(n, seed)).context("writing scenes")?;
        }
        SynthCommand::Scene {
            out,
            label,
            index,
            seed,
            size,
        } => {
            if label >= 4 {
                return Err(Failure::Data(anyhow!("label must be 0..=3")));
            }
            let s = pipeline_scene(seed, index, label, size);
            save_image(&out, &s.image).with_context(|| format!("writing {}", out.display()))?;
            let mut gt = out.clone().into_os_string();
            gt.push(".gt.jsonl");
            write_jsonl(PathBuf::from(gt), &s.boxes).context("writing boxes")?;
        }
        SynthCommand::Weights {
            model,
            out,
            seed,
            width_divisor,
        } => {
            let (graph, side) = if model == "grnet" {
                if width_divisor == 0 || 64 % width_divisor != 0 {
                    return Err(Failure::Data(anyhow!("width divisor must divide 64")));
                }
                (build_grnet_with(GrnetWidths::scaled(width_divisor)), GRNET_INPUT)
            } else {
                build_named(&model).ok_or_else(|| anyhow!("unknown model {model}"))?
            };
            let w = init_weights(&graph, &[side, side, 3], seed).context("initialising weights")?;
            w.save(&out).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let gts: Vec<GroundTruthBox> = read_jsonl(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let dets: Vec<DetectionRecord> = read_jsonl(&a.dets).with_context(|| format!("reading {}", a.dets.display()))?;
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Failure::Data(anyhow!("IoU threshold must lie in [0, 1]")));
    }
    let report = evaluate(&dets, &gts, a.iou).context("evaluating")?;
    print_json(&report, None)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::TrainCls(a) => cmd_train(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Recognize(a) => cmd_recognize(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
