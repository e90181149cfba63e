//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 when an input cannot be read or parsed, 3 when
//! inputs load but violate a processing contract. Failures are reported on
//! stderr as one JSON object; stdout only carries results.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, DatasetConfig};
use crate::grounding::MergeRule;
use crate::panoptic::{CutConfig, HaltReason, ObjectMask};
use crate::pipeline::{
    discover, ground_and_render, grounding_field, plan_windows, resized_dims, Discovery, Frame, GroundingInput,
    PipelineConfig, SegmentationSummary,
};
use crate::refine::BoolGrid;
use crate::spectral::DEFAULT_SEED;
use crate::tensor_io::{
    load_feature_map, load_feature_map_with_grid, load_image, load_label_map, load_matrix, save_label_map,
    save_overlay, FeatureMap, RgbImage, DISCOVERY_PATCH_SIZE, GROUNDING_PATCH_SIZE,
};

/// Environment variable overriding the solver seed.
pub const SEED_ENV: &str = "PANCUT_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DISCOVERY_FILE: &str = "discovery.json";

#[derive(Debug, Parser)]
#[command(name = "pancut", version, about = "Open-vocabulary segmentation by iterated normalized cuts")]
pub struct Cli {
    /// Worker threads for per-image work; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Where to write the run manifest instead of the command's default location.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Discover object masks from discovery features.
    Discover(DiscoverArgs),
    /// Label discovered masks with text queries.
    Ground(GroundArgs),
    /// Discover and ground in one pass.
    Segment(SegmentArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Blend a label map over its image.
    Overlay(OverlayArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    On,
    Off,
}

/// Patch grid `HxW`, for rank-2 feature tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Grid { rows: parse(r)?, cols: parse(c)? })
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

fn parse_merge(s: &str) -> std::result::Result<MergeRule, String> {
    match s {
        "max" => Ok(MergeRule::Max),
        "mean" => Ok(MergeRule::Mean),
        other => Err(format!("unknown merge rule `{other}`, expected max or mean")),
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DiscoveryOpts {
    /// Discovery feature tensor, or a directory of `<image>.npy` tensors.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = DISCOVERY_PATCH_SIZE)]
    pub patch_size: usize,
    /// Patch grid for rank-2 `(H*W, C)` tensors.
    #[arg(long)]
    pub grid: Option<Grid>,
    /// RGB image (PNG or PPM), or a directory of them matched by name. Sets
    /// the output size and feeds the CRF.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 5)]
    pub min_nodes: usize,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub crf: Toggle,
    /// Solver seed; falls back to the PANCUT_SEED variable, then a fixed default.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TextOpts {
    /// `[queries, dim]` text embedding matrix in dataset query order.
    #[arg(long)]
    pub texts: PathBuf,
    /// Dataset config JSON, or the name of a bundled one.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value = "max", value_parser = parse_merge)]
    pub merge: MergeRule,
    #[arg(long, default_value_t = GROUNDING_PATCH_SIZE)]
    pub grounding_patch_size: usize,
    /// Patch grid for a rank-2 full-frame grounding tensor.
    #[arg(long)]
    pub grounding_grid: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub discovery: DiscoveryOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GroundArgs {
    /// Output directory of a `discover` run.
    #[arg(long)]
    pub masks: PathBuf,
    /// Grounding features: one tensor, a directory of per-window tensors, or
    /// a directory holding `<image>.npy` or `<image>/` per image.
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub text: TextOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub discovery: DiscoveryOpts,
    /// Grounding features, laid out as for `ground --features`.
    #[arg(long)]
    pub grounding: PathBuf,
    #[command(flatten)]
    pub text: TextOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OverlayArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    #[arg(long = "from")]
    pub from: PathBuf,
    /// Output location replacing the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub image: String,
    pub seconds: f64,
}

/// Everything needed to repeat a run. Timings are informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub config: Option<PipelineConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub timings: Vec<ImageTiming>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

impl Failure {
    /// Machine-readable stderr line.
    pub fn to_json(&self) -> serde_json::Value {
        let image = match &self.error {
            Error::Image { image, .. } => Some(image.clone()),
            _ => None,
        };
        serde_json::json!({
            "error": self.error.kind(),
            "message": self.error.root().to_string(),
            "image": image,
            "exit_code": self.code,
        })
    }
}

trait Phase<T> {
    fn input(self) -> std::result::Result<T, Failure>;
    fn contract(self) -> std::result::Result<T, Failure>;
}

impl<T> Phase<T> for Result<T> {
    fn input(self) -> std::result::Result<T, Failure> {
        self.map_err(|error| Failure { code: EXIT_INPUT, error })
    }

    /// I/O failures stay input failures whatever the phase.
    fn contract(self) -> std::result::Result<T, Failure> {
        self.map_err(|error| {
            let code = if matches!(error.root(), Error::Io { .. }) { EXIT_INPUT } else { EXIT_CONTRACT };
            Failure { code, error }
        })
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses arguments, runs, reports and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}

pub fn execute(cli: &Cli) -> Outcome<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure { code: EXIT_INPUT, error: Error::Config("--jobs must be at least 1".into()) });
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure { code: EXIT_CONTRACT, error: Error::Config(format!("thread pool: {e}")) })?;
    pool.install(|| dispatch(cli.command.clone(), cli.manifest.as_deref()))
}

fn dispatch(command: Command, manifest: Option<&Path>) -> Outcome<()> {
    match command {
        Command::Rerun(args) => {
            let recorded = RunManifest::load(&args.from).input()?;
            let mut command = recorded.command;
            if let Some(out) = args.out {
                match &mut command {
                    Command::Discover(a) => a.out = out,
                    Command::Ground(a) => a.out = out,
                    Command::Segment(a) => a.out = out,
                    Command::Overlay(a) => a.out = out,
                    Command::Eval(_) | Command::Rerun(_) => {}
                }
            }
            if matches!(command, Command::Rerun(_)) {
                return Err(Error::Config("a manifest cannot record another rerun".into())).contract();
            }
            dispatch(command, manifest)
        }
        Command::Discover(args) => run_discover(args, manifest),
        Command::Ground(args) => run_ground(args, manifest),
        Command::Segment(args) => run_segment(args, manifest),
        Command::Eval(args) => run_eval(args, manifest),
        Command::Overlay(args) => run_overlay(args, manifest),
    }
}

fn resolve_seed(explicit: Option<u64>) -> Outcome<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))
            .input(),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn pipeline_config(opts: &DiscoveryOpts, seed: u64, merge: MergeRule) -> PipelineConfig {
    let mut cut = CutConfig { max_iters: opts.max_iters, min_nodes: opts.min_nodes, ..Default::default() };
    cut.solver.seed = seed;
    PipelineConfig { cut, use_crf: opts.crf == Toggle::On, merge, ..Default::default() }
}

fn not_found(path: &Path, what: &str) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.is_file()
        && path.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// `(name, tensor path)` per image: one file, or every `.npy` in a directory.
fn feature_jobs(features: &Path) -> Result<Vec<(String, PathBuf)>> {
    if features.is_file() {
        return Ok(vec![(stem(features), features.to_path_buf())]);
    }
    if !features.is_dir() {
        return Err(not_found(features, "feature tensor"));
    }
    let files = sorted_entries(features, |p| has_ext(p, &["npy"]))?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no .npy tensors", features.display())));
    }
    Ok(files.into_iter().map(|p| (stem(&p), p)).collect())
}

fn companion_image(image: Option<&Path>, name: &str, batch: bool) -> Result<Option<PathBuf>> {
    let Some(path) = image else { return Ok(None) };
    if path.is_file() && !batch {
        return Ok(Some(path.to_path_buf()));
    }
    if path.is_dir() {
        for ext in ["png", "ppm"] {
            let candidate = path.join(format!("{name}.{ext}"));
            if candidate.is_file() {
                return Ok(Some(candidate));
            }
        }
        return Err(not_found(&path.join(name), "image"));
    }
    if path.is_file() {
        return Err(Error::Config("a single --image cannot serve a directory of feature tensors".into()));
    }
    Err(not_found(path, "image"))
}

#[derive(Debug, Clone)]
enum GroundingSource {
    Full(PathBuf),
    Crops(PathBuf),
}

fn grounding_source(path: &Path, name: &str, batch: bool) -> Result<GroundingSource> {
    if path.is_file() {
        if batch {
            return Err(Error::Config("a single grounding tensor cannot serve several images".into()));
        }
        return Ok(GroundingSource::Full(path.to_path_buf()));
    }
    if !path.is_dir() {
        return Err(not_found(path, "grounding features"));
    }
    let file = path.join(format!("{name}.npy"));
    if file.is_file() {
        return Ok(GroundingSource::Full(file));
    }
    let dir = path.join(name);
    if dir.is_dir() {
        return Ok(GroundingSource::Crops(dir));
    }
    if !batch {
        return Ok(GroundingSource::Crops(path.to_path_buf()));
    }
    Err(not_found(&file, "grounding features"))
}

fn load_grounding(source: &GroundingSource, opts: &TextOpts) -> Result<GroundingInput> {
    let tag = "grounding";
    match source {
        GroundingSource::Full(p) => Ok(GroundingInput::FullFrame(load_feature_map_with_grid(
            p,
            opts.grounding_patch_size,
            tag,
            opts.grounding_grid.map(|g| (g.rows, g.cols)),
        )?)),
        GroundingSource::Crops(dir) => {
            let files = sorted_entries(dir, |p| has_ext(p, &["npy"]))?;
            if files.is_empty() {
                return Err(Error::Data(format!("{}: no per-window tensors", dir.display())));
            }
            let crops = files
                .iter()
                .map(|p| load_feature_map(p, opts.grounding_patch_size, tag))
                .collect::<Result<Vec<_>>>()?;
            Ok(GroundingInput::PerCrop(crops))
        }
    }
}

/// Loaded dataset and text queries.
struct Queries {
    dataset: DatasetConfig,
    texts: crate::tensor_io::TextEmbeddingSet,
}

fn load_queries(opts: &TextOpts) -> Result<Queries> {
    let dataset = DatasetConfig::load(&opts.dataset)?;
    let matrix = load_matrix(&opts.texts)?;
    let texts = dataset.text_embeddings(matrix.cols, matrix.data)?;
    Ok(Queries { dataset, texts })
}

struct DiscoveryInputs {
    features: FeatureMap,
    image: Option<RgbImage>,
}

fn load_discovery_inputs(opts: &DiscoveryOpts, features: &Path, image: Option<&Path>) -> Result<DiscoveryInputs> {
    let features =
        load_feature_map_with_grid(features, opts.patch_size, "discovery", opts.grid.map(|g| (g.rows, g.cols)))?;
    let image = image.map(load_image).transpose()?;
    Ok(DiscoveryInputs { features, image })
}

fn frame_of(inputs: &DiscoveryInputs) -> Frame<'_> {
    match &inputs.image {
        Some(img) => Frame::from_image(img),
        None => Frame::blank(
            inputs.features.height() * inputs.features.patch_size(),
            inputs.features.width() * inputs.features.patch_size(),
        ),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(
    default_path: PathBuf,
    override_path: Option<&Path>,
    command: Command,
    config: Option<PipelineConfig>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    timings: Vec<ImageTiming>,
) -> Outcome<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command,
        config,
        seed,
        inputs,
        timings,
    };
    let path = override_path.map_or(default_path, Path::to_path_buf);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent).input()?;
    }
    write_json(&path, &manifest).input()
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("results serialize"));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: u32,
    pub discovery_order: usize,
    pub area: usize,
    pub file: String,
}

/// Sidecar of one discovered image, enough to ground it later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRecord {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub halt: HaltReason,
    pub eigenvalues: Vec<f64>,
    pub objects: Vec<MaskRecord>,
}

fn save_mask(mask: &BoolGrid, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let pixels = mask.as_slice().iter().map(|&on| if on { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("mask buffer matches its shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_mask(path: &Path) -> Result<BoolGrid> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = img.dimensions();
    BoolGrid::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v > 127).collect())
}

fn write_discovery(dir: &Path, name: &str, frame: (usize, usize), found: &Discovery) -> Result<DiscoveryRecord> {
    create_dir(dir)?;
    for stale in sorted_entries(dir, |p| {
        has_ext(p, &["png"]) && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("object_"))
    })? {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let mut objects = Vec::with_capacity(found.objects.len());
    for obj in &found.objects {
        let file = format!("object_{:03}.png", obj.id);
        save_mask(&obj.pixel_mask, &dir.join(&file))?;
        objects.push(MaskRecord { id: obj.id, discovery_order: obj.discovery_order, area: obj.pixel_mask.count(), file });
    }
    let record = DiscoveryRecord {
        image: name.to_string(),
        height: frame.0,
        width: frame.1,
        iterations: found.iterations,
        halt: found.halt,
        eigenvalues: found.eigenvalues.clone(),
        objects,
    };
    write_json(&dir.join(DISCOVERY_FILE), &record)?;
    Ok(record)
}

fn read_discovery(dir: &Path) -> Result<(DiscoveryRecord, Discovery)> {
    let path = dir.join(DISCOVERY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: DiscoveryRecord =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut objects = Vec::with_capacity(record.objects.len());
    for m in &record.objects {
        let mask = load_mask(&dir.join(&m.file))?;
        if mask.shape() != (record.height, record.width) {
            return Err(Error::Shape(format!(
                "{}: mask is {:?}, expected {}x{}",
                m.file,
                mask.shape(),
                record.height,
                record.width
            )));
        }
        objects.push(ObjectMask { id: m.id, discovery_order: m.discovery_order, patch_mask: mask.clone(), pixel_mask: mask });
    }
    let found = Discovery {
        objects,
        iterations: record.iterations,
        halt: record.halt,
        eigenvalues: record.eigenvalues.clone(),
    };
    Ok((record, found))
}

/// Runs `work` for every job in parallel; results keep job order and the first
/// failure in that order wins.
fn per_image<J: Sync, R: Send>(jobs: &[J], work: impl Fn(&J) -> Outcome<R> + Sync + Send) -> Outcome<Vec<(R, f64)>> {
    jobs.par_iter()
        .map(|j| {
            let start = Instant::now();
            work(j).map(|r| (r, start.elapsed().as_secs_f64()))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn tag<T>(r: Outcome<T>, name: &str) -> Outcome<T> {
    r.map_err(|f| Failure { code: f.code, error: f.error.for_image(name) })
}

fn run_discover(mut args: DiscoverArgs, manifest: Option<&Path>) -> Outcome<()> {
    let seed = resolve_seed(args.discovery.seed)?;
    args.discovery.seed = Some(seed);
    let cfg = pipeline_config(&args.discovery, seed, MergeRule::default());
    cfg.cut.validate().contract()?;
    let jobs = feature_jobs(&args.discovery.features).input()?;
    let batch = jobs.len() > 1;
    let results = per_image(&jobs, |(name, path)| {
        tag(
            (|| {
                let image = companion_image(args.discovery.image.as_deref(), name, batch).input()?;
                let inputs = load_discovery_inputs(&args.discovery, path, image.as_deref()).input()?;
                let frame = frame_of(&inputs);
                let found = discover(&inputs.features, frame, &cfg).contract()?;
                write_discovery(&args.out.join(name), name, (frame.height, frame.width), &found).input()
            })(),
            name,
        )
    })?;
    let timings = timings(&jobs, &results);
    let records: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    let inputs = jobs.iter().map(|(_, p)| p.clone()).collect();
    write_manifest(args.out.join(MANIFEST_FILE), manifest, Command::Discover(args), Some(cfg), Some(seed), inputs, timings)?;
    print_json(&records);
    Ok(())
}

fn timings<R>(jobs: &[(String, PathBuf)], results: &[(R, f64)]) -> Vec<ImageTiming> {
    jobs.iter().zip(results).map(|((name, _), (_, s))| ImageTiming { image: name.clone(), seconds: *s }).collect()
}

fn write_segmentation(out: &Path, name: &str, result: &crate::pipeline::SegmentationResult) -> Result<()> {
    create_dir(out)?;
    save_label_map(&result.labels, out.join(format!("{name}.png")))?;
    write_json(&out.join(format!("{name}.json")), &result.summary)
}

fn ground_one(
    name: &str,
    found: &Discovery,
    frame: (usize, usize),
    source: &GroundingSource,
    queries: &Queries,
    opts: &TextOpts,
) -> Outcome<crate::pipeline::SegmentationResult> {
    let grounding = load_grounding(source, opts).input()?;
    let (rh, rw) = resized_dims(frame.0, frame.1);
    let field = grounding_field(&grounding, &queries.texts, &plan_windows(rh, rw)).contract()?.resized(frame.0, frame.1);
    ground_and_render(name, found, &field, &queries.texts, &queries.dataset.class_mapping(), opts.merge).contract()
}

fn run_ground(args: GroundArgs, manifest: Option<&Path>) -> Outcome<()> {
    let queries = load_queries(&args.text).input()?;
    if !args.masks.is_dir() {
        return Err(not_found(&args.masks, "mask directory")).input();
    }
    let dirs = sorted_entries(&args.masks, |p| p.join(DISCOVERY_FILE).is_file()).input()?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no discovery results", args.masks.display()))).input();
    }
    let jobs: Vec<(String, PathBuf)> =
        dirs.into_iter().map(|d| (d.file_name().unwrap_or_default().to_string_lossy().into_owned(), d)).collect();
    let batch = jobs.len() > 1;
    let results = per_image(&jobs, |(name, dir)| {
        tag(
            (|| {
                let (record, found) = read_discovery(dir).input()?;
                let source = grounding_source(&args.features, name, batch).input()?;
                let result = ground_one(name, &found, (record.height, record.width), &source, &queries, &args.text)?;
                write_segmentation(&args.out, name, &result).input()?;
                Ok(result.summary)
            })(),
            name,
        )
    })?;
    let timings = timings(&jobs, &results);
    let summaries: Vec<SegmentationSummary> = results.into_iter().map(|(s, _)| s).collect();
    let inputs = jobs.iter().map(|(_, p)| p.clone()).collect();
    let config = PipelineConfig { merge: args.text.merge, ..Default::default() };
    write_manifest(args.out.join(MANIFEST_FILE), manifest, Command::Ground(args), Some(config), None, inputs, timings)?;
    print_json(&summaries);
    Ok(())
}

fn run_segment(mut args: SegmentArgs, manifest: Option<&Path>) -> Outcome<()> {
    let seed = resolve_seed(args.discovery.seed)?;
    args.discovery.seed = Some(seed);
    let cfg = pipeline_config(&args.discovery, seed, args.text.merge);
    cfg.cut.validate().contract()?;
    let queries = load_queries(&args.text).input()?;
    let jobs = feature_jobs(&args.discovery.features).input()?;
    let batch = jobs.len() > 1;
    let results = per_image(&jobs, |(name, path)| {
        tag(
            (|| {
                let image = companion_image(args.discovery.image.as_deref(), name, batch).input()?;
                let source = grounding_source(&args.grounding, name, batch).input()?;
                let inputs = load_discovery_inputs(&args.discovery, path, image.as_deref()).input()?;
                let frame = frame_of(&inputs);
                let found = discover(&inputs.features, frame, &cfg).contract()?;
                let result = ground_one(name, &found, (frame.height, frame.width), &source, &queries, &args.text)?;
                write_segmentation(&args.out, name, &result).input()?;
                Ok(result.summary)
            })(),
            name,
        )
    })?;
    let timings = timings(&jobs, &results);
    let summaries: Vec<SegmentationSummary> = results.into_iter().map(|(s, _)| s).collect();
    let inputs = jobs.iter().map(|(_, p)| p.clone()).collect();
    write_manifest(args.out.join(MANIFEST_FILE), manifest, Command::Segment(args), Some(cfg), Some(seed), inputs, timings)?;
    print_json(&summaries);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: crate::eval::MiouReport,
}

fn run_eval(args: EvalArgs, manifest: Option<&Path>) -> Outcome<()> {
    let dataset = DatasetConfig::load(&args.dataset).input()?;
    if !args.gt.is_dir() {
        return Err(not_found(&args.gt, "ground-truth directory")).input();
    }
    let gts = sorted_entries(&args.gt, |p| has_ext(p, &["png"])).input()?;
    if gts.is_empty() {
        return Err(Error::EmptyEval(format!("{}: no ground-truth label maps", args.gt.display()))).contract();
    }
    let jobs: Vec<(String, PathBuf)> = gts.into_iter().map(|p| (stem(&p), p)).collect();
    let results = per_image(&jobs, |(name, gt_path)| {
        tag(
            (|| {
                let pred_path = args.pred.join(format!("{name}.png"));
                if !pred_path.is_file() {
                    return Err(not_found(&pred_path, "prediction")).input();
                }
                let gt = load_label_map(gt_path).input()?;
                let pred = load_label_map(&pred_path).input()?;
                let mut conf = ConfusionMatrix::new(dataset.num_classes());
                conf.accumulate(&pred, &gt).contract()?;
                Ok(conf)
            })(),
            name,
        )
    })?;
    let mut total = ConfusionMatrix::new(dataset.num_classes());
    for (conf, _) in &results {
        total.merge(conf).contract()?;
    }
    let mut metrics = total.miou().contract()?;
    metrics.class_names = dataset.classes.clone();
    let report = EvalReport { dataset: dataset.name.clone(), images: jobs.len(), metrics };
    let timings = timings(&jobs, &results);
    let inputs = jobs.iter().map(|(_, p)| p.clone()).collect();
    let default = args.pred.join("eval.manifest.json");
    write_manifest(default, manifest, Command::Eval(args), None, None, inputs, timings)?;
    print_json(&report);
    Ok(())
}

fn run_overlay(args: OverlayArgs, manifest: Option<&Path>) -> Outcome<()> {
    let start = Instant::now();
    let image = load_image(&args.image).input()?;
    let labels = load_label_map(&args.pred).input()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent).input()?;
    }
    save_overlay(&image, &labels, &args.out).contract()?;
    let mut default = args.out.clone().into_os_string();
    default.push(".manifest.json");
    let timings = vec![ImageTiming { image: stem(&args.image), seconds: start.elapsed().as_secs_f64() }];
    let inputs = vec![args.image.clone(), args.pred.clone()];
    write_manifest(PathBuf::from(default), manifest, Command::Overlay(args.clone()), None, None, inputs, timings)?;
    print_json(&serde_json::json!({ "overlay": args.out }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!("4x6".parse::<Grid>().unwrap(), Grid { rows: 4, cols: 6 });
        assert_eq!("7X2".parse::<Grid>().unwrap().to_string(), "7x2");
        assert!("46".parse::<Grid>().is_err());
        assert!("ax2".parse::<Grid>().is_err());
    }

    #[test]
    fn commands_round_trip_through_json() {
        let cli = Cli::try_parse_from([
            "pancut", "segment", "--features", "f.npy", "--grounding", "g.npy", "--texts", "t.npy", "--dataset",
            "voc21", "--out", "o", "--crf", "off", "--merge", "mean",
        ])
        .unwrap();
        let text = serde_json::to_string(&cli.command).unwrap();
        let back: Command = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cli.command);
        let Command::Segment(seg) = back else { panic!("wrong subcommand") };
        assert_eq!((seg.discovery.max_iters, seg.discovery.min_nodes), (16, 5));
        assert_eq!((seg.discovery.crf, seg.text.merge), (Toggle::Off, MergeRule::Mean));
    }

    #[test]
    fn failures_map_to_exit_codes() {
        let io: Result<()> = Err(not_found(Path::new("x"), "thing"));
        assert_eq!(io.contract().unwrap_err().code, EXIT_INPUT);
        let shape: Result<()> = Err(Error::Shape("bad".into()).for_image("a"));
        let f = shape.contract().unwrap_err();
        assert_eq!(f.code, EXIT_CONTRACT);
        let json = f.to_json();
        assert_eq!(json["error"], "ShapeError");
        assert_eq!(json["image"], "a");
    }
}
