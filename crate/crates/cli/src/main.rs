use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mcf::bench::{bench, run_detection, BenchEntry};
use mcf::cascade::{train_multistage, Calibration, CascadeModel, TrainConfig, TrainImage};
use mcf::conv::{Backbone, DEFAULT_WIDTHS};
use mcf::detector::{detections_csv, Detection, DetectorConfig, StageStats, CSV_HEADER};
use mcf::eval::{evaluate, load_annotations, parse_detections, GroundTruth};
use mcf::features::FeatureKind;
use mcf::image::ImageBuffer;
use mcf::synth::synth_dataset;
use mcf::McfError;

#[derive(Parser)]
#[command(name = "mcf", version, about = "Multi-layer channel feature cascade detector")]
struct Cli {
    /// TOML file with `[train]` and `[detect]` tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a cascade from annotated images.
    Train(TrainArgs),
    /// Run the detector over images.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Compare models and early-pruning settings on an annotated set.
    Bench(BenchArgs),
    /// Generate a synthetic pedestrian dataset.
    Synth(SynthArgs),
    /// Summarize a model file.
    InspectModel(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

/// `off` or an overlap in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
struct Theta(Option<f64>);

fn parse_theta(s: &str) -> Result<Theta, String> {
    if s.eq_ignore_ascii_case("off") || s.eq_ignore_ascii_case("inf") {
        return Ok(Theta(None));
    }
    let v: f64 = s.parse().map_err(|_| format!("expected a number or `off`, got {s:?}"))?;
    if !(v > 0.0 && v <= 1.0) {
        return Err(format!("theta {v} outside (0, 1]"));
    }
    Ok(Theta(Some(v)))
}

fn parse_shrink(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("shrink must be 1, 2 or 4, got {s:?}")),
    }
}

fn parse_calibration(s: &str) -> Result<Calibration, String> {
    if s == "min-positive" {
        return Ok(Calibration::default());
    }
    if let Some(q) = s.strip_prefix("quantile:") {
        let q: f64 = q.parse().map_err(|_| format!("bad quantile in {s:?}"))?;
        return Ok(Calibration::Quantile { q, margin: 1e-6 });
    }
    Err(format!("expected `min-positive` or `quantile:<q>`, got {s:?}"))
}

#[derive(Args)]
struct TrainArgs {
    /// Annotation CSV; image paths are relative to its directory.
    #[arg(long)]
    annotations: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Backbone weights. Without it, seeded random weights are written next
    /// to the model as `<out>.mcfw`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    stages: Option<usize>,
    /// Total weak-classifier budget.
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_shrink)]
    shrink: Option<usize>,
    /// `min-positive` or `quantile:<q>`.
    #[arg(long, value_parser = parse_calibration)]
    calibration: Option<Calibration>,
    /// Conv block widths for generated weights.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Ignore ground-truth boxes shorter than this.
    #[arg(long)]
    min_height: Option<f64>,
}

#[derive(Args, Clone)]
struct DetectorFlags {
    /// Early-NMS overlap after stage 1, or `off`.
    #[arg(long, value_parser = parse_theta)]
    theta: Option<Theta>,
    /// Window step in pyramid-level pixels.
    #[arg(long)]
    stride: Option<usize>,
    /// Must match the model's shrink when given.
    #[arg(long, value_parser = parse_shrink)]
    shrink: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct DetectArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Backbone weights the model was trained with.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Images to scan.
    images: Vec<PathBuf>,
    /// Annotation CSV whose images are scanned, in addition to positional ones.
    #[arg(long)]
    list: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorFlags,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Writes per-stage statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    min_height: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct BenchArgs {
    /// One or more models; the first is the speed baseline.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    /// Early-pruning settings to sweep, e.g. `off,0.8`.
    #[arg(long, value_delimiter = ',', value_parser = parse_theta, default_value = "off")]
    theta: Vec<Theta>,
    #[arg(long)]
    stride: Option<usize>,
    /// Threads for timing runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also report a run with this many threads.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    min_height: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0.3)]
    difficulty: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainConfig>,
    detect: Option<DetectTable>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectTable {
    stride: Option<usize>,
    theta: Option<String>,
    final_nms: Option<f64>,
    score_floor: Option<f64>,
    scales_per_octave: Option<usize>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| McfError::Config(format!("{}: {e}", path.display())).into())
}

fn detector_config(table: Option<&DetectTable>, flags: &DetectorFlags) -> Result<DetectorConfig> {
    let mut c = DetectorConfig::default();
    if let Some(t) = table {
        c.stride = t.stride.unwrap_or(c.stride);
        c.final_nms = t.final_nms.unwrap_or(c.final_nms);
        c.score_floor = t.score_floor.unwrap_or(c.score_floor);
        c.scales_per_octave = t.scales_per_octave.unwrap_or(c.scales_per_octave);
        if let Some(theta) = &t.theta {
            c.theta = parse_theta(theta).map_err(McfError::Config)?.0;
        }
    }
    c.stride = flags.stride.unwrap_or(c.stride);
    if let Some(Theta(t)) = flags.theta {
        c.theta = t;
    }
    Ok(c)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_gt(path: &Path, min_height: Option<f64>) -> Result<(GroundTruth, PathBuf)> {
    let mut gt = load_annotations(path)?;
    if let Some(h) = min_height {
        gt.ignore_below(h);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing = gt.check_images(&base)?;
    if !missing.is_empty() {
        return Err(McfError::Data(format!(
            "{} annotated images are missing, first {}",
            missing.len(),
            missing[0]
        ))
        .into());
    }
    Ok((gt, base))
}

fn load_backbone(weights: Option<&Path>, model: &CascadeModel) -> Result<Option<Backbone>> {
    let Some(binding) = &model.backbone else {
        return Ok(None);
    };
    let Some(path) = weights else {
        return Err(McfError::Config(format!(
            "a {}-stage model needs --weights",
            model.n_stages()
        ))
        .into());
    };
    let bb = Backbone::load(path)?.with_exports(binding.exports.clone())?;
    binding.check(&bb)?;
    Ok(Some(bb))
}

fn cmd_train(args: TrainArgs, file: &ConfigFile) -> Result<()> {
    let mut config = file.train.clone().unwrap_or_else(|| match args.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    });
    if let Some(v) = args.stages {
        config.n_stages = v;
    }
    if let Some(v) = args.trees {
        config.n_all = v;
    }
    if let Some(v) = args.depth {
        config.tree_depth = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.shrink {
        config.shrink = v;
    }
    if let Some(v) = args.calibration {
        config.calibration = v;
    }
    config.validate()?;
    if config.n_stages < 2 {
        bail!(McfError::Config("--stages must be at least 2".into()));
    }

    let backbone = match &args.weights {
        Some(p) => Backbone::load(p)?,
        None => {
            let widths = args.widths.clone().unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
            let bb = Backbone::default_random(&widths, config.seed)?;
            let path = args.out.with_extension("mcfw");
            bb.save(&path)?;
            log::info!("wrote random backbone weights to {}", path.display());
            bb
        }
    };
    let backbone = backbone.with_last_exports(config.n_stages - 1)?;

    let (gt, base) = load_gt(&args.annotations, args.min_height)?;
    let images: Vec<TrainImage> = gt
        .images
        .iter()
        .map(|ann| {
            Ok(TrainImage {
                image: ImageBuffer::load(base.join(&ann.path))?,
                boxes: ann.boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let (model, report) = train_multistage(&images, &backbone, &config)?;
    model.save(&args.out)?;
    eprintln!(
        "trained {} stages, {} trees, {} positives, {} negatives -> {}",
        model.n_stages(),
        model.n_trees(),
        report.n_positives,
        report.n_negatives,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectRecord<'a> {
    image_path: &'a str,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
    stage_reached: usize,
}

fn stats_table(stats: &StageStats) -> String {
    let mut s = String::from("stage  entering  rejected  pruned  ratio   seconds\n");
    for (i, st) in stats.stages.iter().enumerate() {
        s.push_str(&format!(
            "{:>5}  {:>8}  {:>8}  {:>6}  {:.4}  {:.4}\n",
            i + 1,
            st.entering,
            st.rejected,
            st.pruned,
            st.rejection_ratio(),
            st.seconds
        ));
    }
    s.push_str(&format!("detections after NMS: {}\n", stats.detections));
    s
}

fn cmd_detect(args: DetectArgs, file: &ConfigFile) -> Result<()> {
    let model = CascadeModel::load(&args.model)?;
    if let Some(s) = args.detector.shrink {
        if s != model.shrink {
            bail!(McfError::Config(format!(
                "--shrink {s} differs from the model's shrink {}",
                model.shrink
            )));
        }
    }
    let config = detector_config(file.detect.as_ref(), &args.detector)?;
    config.validate(model.shrink)?;
    let backbone = load_backbone(args.weights.as_deref(), &model)?;

    let mut paths: Vec<(String, PathBuf)> = args
        .images
        .iter()
        .map(|p| (p.display().to_string(), p.clone()))
        .collect();
    if let Some(list) = &args.list {
        let (gt, base) = load_gt(list, None)?;
        paths.extend(gt.images.iter().map(|a| (a.path.clone(), base.join(&a.path))));
    }
    if paths.is_empty() {
        bail!(McfError::Config("no images given".into()));
    }
    let images: Vec<(String, ImageBuffer)> = paths
        .iter()
        .map(|(name, p)| Ok((name.clone(), ImageBuffer::load(p)?)))
        .collect::<Result<_>>()?;
    let threads = if args.detector.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        args.detector.threads
    };
    let run = run_detection(&images, &model, backbone.as_ref(), &config, threads)?;
    let total = run.total_stats();

    let text = match args.format {
        Format::Csv => {
            let mut s = format!("{CSV_HEADER}\n");
            for (name, _) in &images {
                s.push_str(&detections_csv(name, &run.detections[name]));
            }
            s
        }
        Format::Json => {
            let records: Vec<DetectRecord> = images
                .iter()
                .flat_map(|(name, _)| {
                    run.detections[name].iter().map(move |d: &Detection| DetectRecord {
                        image_path: name,
                        x: d.bbox.x,
                        y: d.bbox.y,
                        w: d.bbox.w,
                        h: d.bbox.h,
                        score: d.score,
                        stage_reached: d.stage_reached,
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&serde_json::json!({
                "detections": records,
                "stats": total,
            }))?;
            s.push('\n');
            s
        }
    };
    emit(args.out.as_deref(), &text)?;
    eprint!("{}", stats_table(&total));
    if let Some(p) = &args.stats {
        let per_image: BTreeMap<&str, &StageStats> =
            images.iter().map(|(n, _)| n.as_str()).zip(&run.stats).collect();
        let json = serde_json::json!({ "total": total, "per_image": per_image });
        fs::write(p, serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut gt = load_annotations(&args.gt)?;
    if let Some(h) = args.min_height {
        gt.ignore_below(h);
    }
    let text = fs::read_to_string(&args.detections)
        .with_context(|| format!("reading {}", args.detections.display()))?;
    let dets = parse_detections(&text)?;
    let curve = evaluate(&gt, &dets, args.iou)?;
    let out = match args.format {
        Format::Csv => {
            let mut s = format!("# MR-2 {:.6}\n# MR-4 {:.6}\nfppi,miss_rate\n", curve.mr_log_avg_2, curve.mr_log_avg_4);
            for (f, m) in &curve.points {
                s.push_str(&format!("{f},{m}\n"));
            }
            s
        }
        Format::Json => serde_json::to_string_pretty(&curve)? + "\n",
    };
    emit(args.out.as_deref(), &out)?;
    eprintln!("MR-2 {:.4}  MR-4 {:.4}", curve.mr_log_avg_2, curve.mr_log_avg_4);
    Ok(())
}

fn cmd_bench(args: BenchArgs, file: &ConfigFile) -> Result<()> {
    let (gt, base) = load_gt(&args.gt, args.min_height)?;
    let images: Vec<(String, ImageBuffer)> = gt
        .images
        .iter()
        .map(|a| Ok((a.path.clone(), ImageBuffer::load(base.join(&a.path))?)))
        .collect::<Result<_>>()?;
    let models: Vec<(String, CascadeModel)> = args
        .model
        .iter()
        .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), CascadeModel::load(p)?)))
        .collect::<Result<_>>()?;
    let backbones: Vec<Option<Backbone>> = models
        .iter()
        .map(|(_, m)| load_backbone(args.weights.as_deref(), m))
        .collect::<Result<_>>()?;
    let flags = DetectorFlags {
        theta: None,
        stride: args.stride,
        shrink: None,
        threads: args.threads,
    };
    let base_config = detector_config(file.detect.as_ref(), &flags)?;
    let mut entries = Vec::new();
    for ((name, model), bb) in models.iter().zip(&backbones) {
        for theta in &args.theta {
            let label = match theta.0 {
                None => name.clone(),
                Some(t) => format!("{name} theta={t}"),
            };
            entries.push(BenchEntry {
                name: label,
                model,
                backbone: bb.as_ref(),
                detector: DetectorConfig {
                    theta: theta.0,
                    ..base_config
                },
            });
        }
    }
    let mut reports = vec![bench(&entries, &images, &gt, args.threads)?.0];
    if let Some(n) = args.parallel {
        reports.push(bench(&entries, &images, &gt, n)?.0);
    }
    let text = match args.format {
        Format::Csv => reports
            .iter()
            .map(|r| format!("# {} images, {} thread(s)\n{}", r.images, r.threads, r.to_table()))
            .collect::<Vec<_>>()
            .join("\n"),
        Format::Json => serde_json::to_string_pretty(&reports)? + "\n",
    };
    emit(args.out.as_deref(), &text)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let data = synth_dataset(args.seed, args.train, args.test, args.difficulty)?;
    data.write(&args.out)?;
    eprintln!(
        "wrote {} train and {} test images to {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    layer: usize,
    trees: usize,
    features: BTreeMap<&'static str, usize>,
    rejecting_thresholds: usize,
    min_threshold: Option<f64>,
    max_threshold: Option<f64>,
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = CascadeModel::load(&args.model)?;
    let stages: Vec<StageSummary> = model
        .stages
        .iter()
        .map(|s| {
            let mut features = BTreeMap::new();
            for f in s.trees.iter().flat_map(|t| t.features()) {
                let k = match f.kind {
                    FeatureKind::Zero => "zero",
                    FeatureKind::One => "one",
                    FeatureKind::High => "high",
                };
                *features.entry(k).or_insert(0) += 1;
            }
            let finite: Vec<f64> = s.reject_thresholds.iter().copied().filter(|t| t.is_finite()).collect();
            StageSummary {
                layer: s.layer_index,
                trees: s.trees.len(),
                features,
                rejecting_thresholds: finite.len(),
                min_threshold: finite.iter().copied().reduce(f64::min),
                max_threshold: finite.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    let text = match args.format {
        Format::Json => {
            serde_json::to_string_pretty(&serde_json::json!({
                "plan": model.plan,
                "shrink": model.shrink,
                "backbone": model.backbone,
                "metadata": {
                    "seed": model.metadata.seed,
                    "tree_depth": model.metadata.tree_depth,
                    "bootstrap_rounds": model.metadata.bootstrap_rounds,
                    "calibration": model.metadata.calibration,
                    "n_positives": model.metadata.n_positives,
                    "n_negatives": model.metadata.n_negatives,
                },
                "stages": stages,
            }))? + "\n"
        }
        Format::Csv => {
            let mut s = format!(
                "plan: n_all {} stages {} k {:?}\nshrink: {}\n",
                model.plan.n_all, model.plan.n_stages, model.plan.k, model.shrink
            );
            if let Some(b) = &model.backbone {
                s.push_str(&format!("backbone: {} exports {:?}\n", b.hash, b.exports));
            }
            s.push_str(&format!(
                "trained: seed {} depth {} {} positives {} negatives\n",
                model.metadata.seed, model.metadata.tree_depth, model.metadata.n_positives, model.metadata.n_negatives
            ));
            s.push_str("layer,trees,zero,one,high,finite_thresholds\n");
            for st in &stages {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    st.layer,
                    st.trees,
                    st.features.get("zero").unwrap_or(&0),
                    st.features.get("one").unwrap_or(&0),
                    st.features.get("high").unwrap_or(&0),
                    st.rejecting_thresholds
                ));
            }
            s
        }
    };
    emit(None, &text)
}

fn run(cli: Cli) -> Result<()> {
    let file = read_config(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Detect(a) => cmd_detect(a, &file),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a, &file),
        Command::Synth(a) => cmd_synth(a),
        Command::InspectModel(a) => cmd_inspect(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<McfError>() {
        Some(e) => e.exit_code() as u8,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
