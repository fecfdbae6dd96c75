use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::Serialize;

use mstf_core::dataset::{
    convert_coco_vid, interpolate_tracks, load_video_samples, read_frame, stats, synthesize, tile_and_downsample,
    tile_frames, SplitSpec, SynthPreset, SynthSpec, ValidationMode, VideoAnnotationSet,
};
use mstf_core::detector::{infer_videos, ClipDataset, Detector, Optimizer, Trainer};
use mstf_core::evaluation::{evaluate, load_predictions, save_predictions, AreaMode};
use mstf_core::experiment::{run_benchmark, Arm, BenchData};
use mstf_core::mstf::{Checkpoint, SplitRatio};
use mstf_core::numerics::Tensor;

use crate::config::{snapshot_path, write_snapshot, FileConfig};
use crate::{usage, Cli, CmdResult, Command, Failure};

pub fn run(cli: Cli) -> CmdResult {
    let mut file = FileConfig::load(cli.global.config.as_deref())?;
    if let Some(t) = cli.global.threads {
        file.threads = t;
    }
    file.strict |= cli.global.strict;
    if file.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(file.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a, file),
        Command::Stats(a) => stats_cmd(a, file),
        Command::Validate(a) => validate(a, file),
        Command::Convert(a) => convert(a, file),
        Command::Tile(a) => tile(a, file),
        Command::Interpolate(a) => interpolate(a, file),
        Command::Train(a) => train(a, file),
        Command::Infer(a) => infer(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Bench(a) => bench(a, file),
    }
}

fn mode(file: &FileConfig) -> ValidationMode {
    ValidationMode::from_strict(file.strict)
}

/// Load annotations, reporting lenient-mode violations as warnings.
fn load_set(path: &Path, file: &FileConfig) -> Result<VideoAnnotationSet, Failure> {
    let (set, diags) = VideoAnnotationSet::load(path, mode(file))?;
    for d in &diags {
        log::warn!("{}: {d}", path.display());
    }
    if !diags.is_empty() {
        eprintln!(
            "warning: {} invariant violation(s) in {} (use -v to list, --strict to reject)",
            diags.len(),
            path.display()
        );
    }
    Ok(set)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_preset(s: &str) -> Result<SynthPreset, String> {
    s.parse().map_err(|e: mstf_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitRatio, String> {
    s.parse().map_err(|e: mstf_core::Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Preset: mixed, es-only, static or bench. Defaults to the config's
    /// `[synth]` section, else mixed.
    #[arg(long, value_parser = parse_preset)]
    pub spec: Option<SynthPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<u32>,
    /// Square frame side.
    #[arg(long)]
    pub size: Option<u32>,
}

fn synth(a: SynthArgs, mut file: FileConfig) -> CmdResult {
    let mut spec = match a.spec {
        Some(p) => SynthSpec::preset(p),
        None => file.synth.clone().unwrap_or_default(),
    };
    if let Some(v) = a.videos {
        spec.videos = v;
    }
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(s) = a.size {
        spec.width = s;
        spec.height = s;
    }
    if let Some(s) = a.seed {
        file.seed = s;
    }
    file.synth = Some(spec.clone());
    let out = synthesize(&spec, file.seed).map_err(|e| match e {
        mstf_core::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    out.write_to(&a.out)?;
    write_snapshot(&snapshot_path(&a.out, true), "synth", &a, &file)?;
    println!(
        "{}: {} videos, {} frames, {} objects in {} tracks",
        a.out.display(),
        out.manifest.videos,
        out.manifest.frames,
        out.manifest.objects,
        out.manifest.tracks
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsFormat {
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: StatsFormat,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn stats_cmd(a: StatsArgs, file: FileConfig) -> CmdResult {
    let set = load_set(&a.annotations, &file)?;
    let report = stats(&set, &file.eval.buckets);
    let text = match a.format {
        StatsFormat::Json => serde_json::to_string_pretty(&report).context("serialising stats")? + "\n",
        StatsFormat::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            String::from_utf8(buf).context("CSV output")?
        }
    };
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            write_snapshot(&snapshot_path(p, false), "stats", &a, &file)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Split file to check for disjointness and unknown videos.
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

fn validate(a: ValidateArgs, _file: FileConfig) -> CmdResult {
    let (set, mut diags) = VideoAnnotationSet::load(&a.annotations, ValidationMode::Lenient)?;
    if let Some(p) = &a.splits {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let splits: SplitSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        diags.extend(splits.validate(Some(&set)));
    }
    if diags.is_empty() {
        println!(
            "{}: valid ({} videos, {} frames, {} annotations)",
            a.annotations.display(),
            set.videos.len(),
            set.images.len(),
            set.annotations.len()
        );
        return Ok(());
    }
    for d in &diags {
        println!("{d}");
    }
    Err(Failure::Runtime(anyhow!("{}: {} problem(s) found", a.annotations.display(), diags.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    CocoVid,
    Native,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "coco-vid")]
    pub from: SourceFormat,
    /// Category mapping `source=target`, repeatable.
    #[arg(long = "map")]
    pub category_map: Vec<String>,
    /// Split file; with `--split`, keep only that split's videos.
    #[arg(long, requires = "split")]
    pub splits: Option<PathBuf>,
    #[arg(long, requires = "splits")]
    pub split: Option<String>,
}

fn convert(a: ConvertArgs, file: FileConfig) -> CmdResult {
    let mut map = BTreeMap::new();
    for m in &a.category_map {
        let (k, v) = m
            .split_once('=')
            .ok_or_else(|| usage(format!("--map {m:?} is not of the form source=target")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let mut set = match a.from {
        SourceFormat::CocoVid => {
            let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let (set, diags) = convert_coco_vid(&text, &map)?;
            if !diags.is_empty() {
                if file.strict {
                    return Err(mstf_core::Error::Validation(diags).into());
                }
                for d in &diags {
                    eprintln!("warning: {d}");
                }
            }
            set
        }
        SourceFormat::Native => load_set(&a.input, &file)?,
    };
    if let (Some(p), Some(name)) = (&a.splits, &a.split) {
        set = SplitSpec::load(p)?.subset(&set, name)?;
    }
    set.save(&a.out)?;
    write_snapshot(&snapshot_path(&a.out, false), "convert", &a, &file)?;
    println!("{}: {} videos, {} annotations", a.out.display(), set.videos.len(), set.annotations.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TileArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output annotation file.
    #[arg(long)]
    pub out: PathBuf,
    /// Source frames root; with `--out-frames`, the crops are written too.
    #[arg(long, requires = "out_frames")]
    pub frames: Option<PathBuf>,
    #[arg(long, requires = "frames")]
    pub out_frames: Option<PathBuf>,
    #[arg(long)]
    pub crop: Option<u32>,
    #[arg(long)]
    pub output_size: Option<u32>,
}

fn tile(a: TileArgs, mut file: FileConfig) -> CmdResult {
    if let Some(c) = a.crop {
        file.tile.crop = c;
    }
    if let Some(o) = a.output_size {
        file.tile.output = o;
    }
    if file.tile.crop == 0 || file.tile.output == 0 {
        return Err(usage("tile crop and output sizes must be positive"));
    }
    let set = load_set(&a.annotations, &file)?;
    let out = tile_and_downsample(&set, &file.tile)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    out.set.save(&a.out)?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let prov = a.out.with_file_name(format!("{stem}.provenance.json"));
    let doc = serde_json::json!({ "provenance": out.provenance, "windows": out.windows });
    write_text(&prov, &serde_json::to_string_pretty(&doc).context("serialising provenance")?)?;
    if let (Some(src), Some(dst)) = (&a.frames, &a.out_frames) {
        tile_frames(&set, src, &out, &file.tile, dst)?;
    }
    write_snapshot(&snapshot_path(&a.out, false), "tile", &a, &file)?;
    println!(
        "{}: {} derived videos, {} of {} boxes kept",
        a.out.display(),
        out.set.videos.len(),
        out.set.annotations.len(),
        set.annotations.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest keyframe spacing that is filled.
    #[arg(long)]
    pub max_gap: Option<u32>,
    /// Keep fractional corners instead of rounding to whole pixels.
    #[arg(long)]
    pub no_round: bool,
}

fn interpolate(a: InterpolateArgs, mut file: FileConfig) -> CmdResult {
    if let Some(g) = a.max_gap {
        file.interpolate.max_gap = g;
    }
    if a.no_round {
        file.interpolate.round = false;
    }
    let set = load_set(&a.annotations, &file)?;
    let (dense, warnings) = interpolate_tracks(&set, &file.interpolate)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    dense.save(&a.out)?;
    write_snapshot(&snapshot_path(&a.out, false), "interpolate", &a, &file)?;
    println!(
        "{}: {} -> {} annotations",
        a.out.display(),
        set.annotations.len(),
        dense.annotations.len()
    );
    Ok(())
}

/// Annotation file and frames root of a dataset directory.
#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Dataset directory holding `annotations.json` and `frames/`.
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation file overriding `<data>/annotations.json`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Split file; with `--split`, use only that split's videos.
    #[arg(long, requires = "split")]
    pub splits: Option<PathBuf>,
    #[arg(long, requires = "splits")]
    pub split: Option<String>,
}

impl DataArgs {
    fn load(&self, file: &FileConfig, input_size: usize) -> Result<(VideoAnnotationSet, PathBuf), Failure> {
        let path = self.annotations.clone().unwrap_or_else(|| self.data.join("annotations.json"));
        let mut set = load_set(&path, file)?;
        if let (Some(p), Some(name)) = (&self.splits, &self.split) {
            set = SplitSpec::load(p)?.subset(&set, name)?;
        }
        if let Some(v) = set
            .videos
            .iter()
            .find(|v| v.width as usize != input_size || v.height as usize != input_size)
        {
            return Err(usage(format!(
                "video {} is {}x{} but the detector input is {input_size}x{input_size}; set detector.input_size or tile the data",
                v.id, v.width, v.height
            )));
        }
        Ok((set, self.data.join("frames")))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory for checkpoint, metrics and report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// First epoch with the fusion neck active.
    #[arg(long)]
    pub fusion_epoch: Option<usize>,
    /// Static:motion channel split; `1:0` trains the static baseline.
    #[arg(long, value_parser = parse_split)]
    pub split_ratio: Option<SplitRatio>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Continue from this checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in total (the schedule is unchanged).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

fn train(a: TrainArgs, mut file: FileConfig) -> CmdResult {
    let mut trainer = match &a.resume {
        Some(p) => {
            let overridden = a.fusion_epoch.is_some()
                || a.split_ratio.is_some()
                || a.input_size.is_some()
                || a.seed.is_some()
                || a.epochs.is_some()
                || a.lr.is_some()
                || a.optimizer.is_some();
            if overridden {
                return Err(usage(
                    "--resume continues with the checkpoint's configuration; drop the model and schedule flags",
                ));
            }
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            file.detector = t.model.config().clone();
            file.train = t.config().clone();
            t
        }
        None => {
            let d = &mut file.detector;
            if let Some(n) = a.fusion_epoch {
                d.fusion_start_epoch = n;
            }
            if let Some(r) = a.split_ratio {
                d.mstf.lookup.split_ratio = r;
            }
            if let Some(s) = a.input_size {
                d.input_size = s;
            }
            let t = &mut file.train;
            if let Some(s) = a.seed {
                t.seed = s;
            }
            if let Some(e) = a.epochs {
                t.epochs = e;
            }
            if let Some(lr) = a.lr {
                t.lr = lr;
            }
            if let Some(o) = a.optimizer {
                t.optimizer = match o {
                    OptimizerArg::Sgd => Optimizer::Sgd,
                    OptimizerArg::Adam => Optimizer::Adam,
                };
            }
            file.detector.validate()?;
            file.train.validate(&file.detector)?;
            Trainer::new(Detector::new(file.detector.clone(), file.train.seed)?, file.train.clone())?
        }
    };
    let (set, frames) = a.data.load(&file, file.detector.input_size)?;
    let videos = set
        .videos
        .iter()
        .map(|v| load_video_samples(&set, &frames, v.id))
        .collect::<mstf_core::Result<Vec<_>>>()?;
    let data = ClipDataset::from_videos(videos, file.train.clip_len);
    if data.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "no video has {} consecutive frames for a training clip",
            file.train.clip_len
        )));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_snapshot(&snapshot_path(&a.out, true), "train", &a, &file)?;
    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let ckpt = a.out.join("checkpoint.mstf");
    let report = trainer
        .run(&data, Some(&ckpt), Some(&mut metrics), a.stop_after)
        .map_err(|e| match e {
            mstf_core::Error::Diverged { .. } => Failure::Runtime(anyhow!(
                "{e}; the last good checkpoint is kept at {}",
                ckpt.display()
            )),
            other => other.into(),
        })?;
    write_text(
        &a.out.join("report.json"),
        &serde_json::to_string_pretty(&report).context("serialising the report")?,
    )?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  cls {:.4}  box {:.4}  fused {}  {:.1}s",
            e.epoch, e.loss, e.classification, e.box_iou, e.fused, e.seconds
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Prediction file (JSON array).
    #[arg(long)]
    pub out: PathBuf,
    /// Start every video from a fresh flow state.
    #[arg(long, default_value = "true", value_parser = parse_bool, action = clap::ArgAction::Set)]
    pub reset_per_video: bool,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub max_detections: Option<usize>,
}

/// Frames of one video in index order.
fn video_frames(set: &VideoAnnotationSet, root: &Path, video: u32) -> mstf_core::Result<Vec<(u32, Tensor<f32>)>> {
    let mut images: Vec<_> = set.images.iter().filter(|i| i.video_id == video).collect();
    images.sort_by_key(|i| i.frame_index);
    images
        .into_iter()
        .map(|im| Ok((im.frame_index, read_frame(&root.join(&im.file_name))?)))
        .collect()
}

fn infer(a: InferArgs, mut file: FileConfig) -> CmdResult {
    let model = Detector::<f32>::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    file.detector = model.config().clone();
    let d = &mut file.decode;
    if let Some(v) = a.score_threshold {
        d.score_threshold = v;
    }
    if let Some(v) = a.iou_threshold {
        d.iou_threshold = v;
    }
    if let Some(v) = a.max_detections {
        d.max_detections = v;
    }
    file.decode.validate()?;
    let (set, frames) = a.data.load(&file, model.config().input_size)?;
    let ids: Vec<u32> = set.videos.iter().map(|v| v.id).collect();
    let (preds, latency) = infer_videos(
        &model,
        &ids,
        |v| video_frames(&set, &frames, v),
        &file.decode,
        a.reset_per_video,
    )?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_predictions(&a.out, &preds)?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let lat_path = a.out.with_file_name(format!("{stem}.latency.json"));
    write_text(&lat_path, &serde_json::to_string_pretty(&latency).context("serialising latency")?)?;
    write_snapshot(&snapshot_path(&a.out, false), "infer", &a, &file)?;
    println!(
        "{}: {} detections over {} frames; latency mean {:.2} ms, median {:.2} ms, p95 {:.2} ms",
        a.out.display(),
        preds.len(),
        latency.frames,
        latency.mean_ms,
        latency.median_ms,
        latency.p95_ms
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaModeArg {
    Coco,
    HardFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalFormat {
    Table,
    Json,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Result file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub area_mode: Option<AreaModeArg>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value = "table")]
    pub format: EvalFormat,
}

fn eval(a: EvalArgs, mut file: FileConfig) -> CmdResult {
    if let Some(m) = a.area_mode {
        file.eval.area_mode = match m {
            AreaModeArg::Coco => AreaMode::Coco,
            AreaModeArg::HardFilter => AreaMode::HardFilter,
        };
    }
    file.eval.buckets.validate()?;
    let set = load_set(&a.annotations, &file)?;
    let preds = load_predictions(&a.predictions)?;
    let result = evaluate(&preds, &set, &file.eval)?;
    let json = result.to_json()?;
    if let Some(p) = &a.out {
        write_text(p, &json)?;
        write_snapshot(&snapshot_path(p, false), "eval", &a, &file)?;
    }
    let mut stdout = io::stdout().lock();
    match a.format {
        EvalFormat::Table => write!(stdout, "{}", result.table()),
        EvalFormat::Json => writeln!(stdout, "{json}"),
    }
    .context("writing to stdout")?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Directory for the summary and snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Use only the first N configured seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
}

fn bench(a: BenchArgs, mut file: FileConfig) -> CmdResult {
    let mut cfg = file.bench.clone().unwrap_or_default();
    if let Some(n) = a.seeds {
        cfg.seeds.truncate(n);
    }
    if cfg.seeds.is_empty() {
        return Err(usage("the benchmark needs at least one seed"));
    }
    cfg.detector.validate()?;
    file.bench = Some(cfg.clone());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_snapshot(&snapshot_path(&a.out, true), "bench", &a, &file)?;
    let data = BenchData::generate(&cfg)?;
    let n = cfg.detector.fusion_start_epoch;
    let split = cfg.detector.mstf.lookup.split_ratio;
    let arms = [
        Arm::new("static", SplitRatio::new(1, 0), n),
        Arm::new("mstf", split, n),
        Arm::new("mstf-from-scratch", split, 0),
    ];
    let summaries = run_benchmark(&cfg, &data, &arms, |r| {
        println!("{:<18} seed {:>3}  AP {:6.2}  AP_es {:6.2}  {:.0}s", r.arm, r.seed, r.ap, r.ap_es, r.seconds)
    })?;
    for s in &summaries {
        println!(
            "{:<18} median AP {:6.2}  median AP_es {:6.2}  std AP {:.3}",
            s.arm, s.median_ap, s.median_ap_es, s.std_ap
        );
    }
    write_text(
        &a.out.join("summary.json"),
        &serde_json::to_string_pretty(&summaries).context("serialising the summary")?,
    )?;
    Ok(())
}
