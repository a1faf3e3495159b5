//! `memseg` command line.

use crate::api::{self, AppState};
use crate::wire::{FieldError, GuidanceRequest, StateResponse};
use clap::{Args, Parser, Subcommand};
use memseg_core::config::PipelineConfig;
use memseg_core::data::io::{load_raw_mask, load_volume, save_mask_pngs, save_raw, save_raw_mask, VolumeFormat};
use memseg_core::data::metrics::dsc;
use memseg_core::data::{BinaryVolume, InteractionType, Volume};
use memseg_core::engine::{Models, Session};
use memseg_core::evaluation::{emit_report, largest_area_slice, run_benchmark, SelectionPolicy};
use memseg_core::interaction_sim::simulate;
use memseg_core::memory_net::MemoryNet;
use memseg_core::training::pipeline::{self, Dataset};
use memseg_core::training::synthetic::{generate_synthetic_volume, synthetic_set, SyntheticVolumeSpec, TargetKind};
use memseg_core::{Error as CoreError, Models32};
use ndarray::s;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Environment variable naming the checkpoint directory.
pub const WEIGHTS_ENV: &str = "MEMSEG_WEIGHTS_DIR";

#[derive(Debug, Parser)]
#[command(name = "memseg", version, about = "Interactive volumetric segmentation with a quality-aware memory network")]
pub struct Cli {
    /// Pipeline configuration file (TOML); replaces the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for training, simulation and benchmarking.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bundled configuration preset.
    #[arg(long, global = true, value_parser = ["desk", "paper"], default_value = "desk")]
    pub preset: String,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic volumes and their ground truth as raw files.
    GenerateData(GenerateArgs),
    /// Train interaction networks.
    TrainInteraction(TrainInteractionArgs),
    /// Train the memory network (quality head left untrained).
    TrainMemory(TrainArgs),
    /// Train the quality head of an existing memory network.
    TrainQuality(TrainQualityArgs),
    /// Multi-round benchmark with simulated users.
    Benchmark(BenchmarkArgs),
    /// Segment one volume from simulated or file-provided guidance.
    Segment(SegmentArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = ["train", "test"], default_value = "train")]
    pub split: String,
    /// Number of volumes; defaults to the configured split size.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory written by `generate-data`; synthetic volumes are generated
    /// in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TrainInteractionArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Interaction type, or `all`.
    #[arg(long, default_value = "all")]
    pub interaction: String,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Checkpoint directory; falls back to $MEMSEG_WEIGHTS_DIR, then ./weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainQualityArgs {
    #[command(flatten)]
    pub weights: WeightsArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub weights: WeightsArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Report directory.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// quality, random, oracle or all.
    #[arg(long, default_value = "quality")]
    pub policy: String,
    /// Interaction type, or `all`.
    #[arg(long, default_value = "all")]
    pub interaction: String,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Evaluate only the first N held-out volumes.
    #[arg(long)]
    pub volumes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub weights: WeightsArgs,
    /// Volume file (.nii, .nii.gz, or raw with JSON sidecar).
    #[arg(long, conflicts_with = "synthetic")]
    pub volume: Option<PathBuf>,
    /// Generate the volume from the configured synthetic spec with this seed.
    #[arg(long)]
    pub synthetic: Option<u64>,
    /// Target shape of the synthetic volume.
    #[arg(long, value_parser = ["disk", "ellipse", "blob"])]
    pub target: Option<String>,
    /// Intensity window `lo,hi` mapped to [0, 1] after loading.
    #[arg(long, value_delimiter = ',', num_args = 2, value_name = "LO,HI")]
    pub window: Option<Vec<f64>>,
    /// Guidance geometry as JSON (same body as the HTTP guidance endpoint).
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    /// Simulated interaction type when no guidance file is given.
    #[arg(long, default_value = "bounding_box")]
    pub interaction: String,
    /// Ground-truth mask (raw) for simulated guidance and scoring.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// First guided slice; defaults to the largest ground-truth slice.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Simulated rounds, each on the suggested slice after the first.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    /// Output directory for mask.raw, its sidecar and state.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PNG per slice.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub weights: WeightsArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Failure with its exit code: 2 for bad arguments, 1 otherwise.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: msg.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = if matches!(e, CoreError::Argument(_)) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::preset(&cli.preset)?,
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn weights_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weights"))
}

pub fn load_models(arg: &Option<PathBuf>) -> CliResult<Arc<Models32>> {
    Ok(Arc::new(Models::load_dir(&weights_dir(arg))?))
}

fn parse_kinds(s: &str) -> CliResult<Vec<InteractionType>> {
    if s == "all" {
        return Ok(InteractionType::ALL.to_vec());
    }
    Ok(vec![s.parse::<InteractionType>()?])
}

fn parse_policies(s: &str) -> CliResult<Vec<SelectionPolicy>> {
    if s == "all" {
        return Ok(SelectionPolicy::ALL.to_vec());
    }
    Ok(vec![s.parse::<SelectionPolicy>()?])
}

fn parse_target(s: &str) -> TargetKind {
    match s {
        "ellipse" => TargetKind::Ellipse,
        "blob" => TargetKind::Blob,
        _ => TargetKind::Disk,
    }
}

fn gt_path(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    volume.with_file_name(format!("{stem}_gt.raw"))
}

/// Volumes of a `generate-data` directory, in file-name order.
pub fn load_dataset(dir: &Path) -> CliResult<Dataset<f32>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name.ends_with(".raw") && !name.ends_with("_gt.raw")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no volumes in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| Ok((load_volume(p, VolumeFormat::Raw)?, load_raw_mask(&gt_path(p))?)))
        .collect()
}

fn dataset(cfg: &PipelineConfig, data: &DataArgs, split: &str) -> CliResult<Dataset<f32>> {
    match &data.data {
        Some(dir) => load_dataset(dir),
        None if split == "train" => Ok(pipeline::training_volumes(cfg)?),
        None => Ok(pipeline::test_volumes(cfg)?),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenerateData(a) => generate(&cfg, a),
        Command::TrainInteraction(a) => train_interaction(&cfg, a),
        Command::TrainMemory(a) => train_memory(&cfg, a),
        Command::TrainQuality(a) => train_quality(&cfg, a),
        Command::Benchmark(a) => benchmark(&cfg, a),
        Command::Segment(a) => segment(&cfg, a),
        Command::Serve(a) => serve(&cfg, a),
    }
}

fn generate(cfg: &PipelineConfig, a: &GenerateArgs) -> CliResult<()> {
    let (n, seed) = if a.split == "train" {
        (cfg.data.train_volumes, cfg.data.train_seed)
    } else {
        (cfg.data.test_volumes, cfg.data.test_seed)
    };
    let set = synthetic_set(&cfg.data.spec, a.count.unwrap_or(n), seed)?;
    for (v, gt) in &set {
        let p = a.out.join(format!("{}.raw", v.identifier()));
        save_raw(v, &p)?;
        save_raw_mask(gt, v.spacing(), &format!("{}_gt", v.identifier()), &gt_path(&p))?;
    }
    println!("wrote {} volumes to {}", set.len(), a.out.display());
    Ok(())
}

fn train_interaction(cfg: &PipelineConfig, a: &TrainInteractionArgs) -> CliResult<()> {
    let kinds = parse_kinds(&a.interaction)?;
    let vols = dataset(cfg, &a.train.data, "train")?;
    std::fs::create_dir_all(&a.train.out).map_err(|e| CoreError::io(&a.train.out, e))?;
    for kind in kinds {
        let (net, curve) = pipeline::train_interaction(cfg, kind, &vols)?;
        net.save(&Models::<f32>::interaction_path(&a.train.out, kind))?;
        write_text(&a.train.out.join(format!("loss_interaction_{}.csv", kind.as_str())), &curve.to_csv())?;
        println!("{kind}: final loss {:.5}", curve.last().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn train_memory(cfg: &PipelineConfig, a: &TrainArgs) -> CliResult<()> {
    let vols = dataset(cfg, &a.data, "train")?;
    std::fs::create_dir_all(&a.out).map_err(|e| CoreError::io(&a.out, e))?;
    let (net, curve) = pipeline::train_memory(cfg, &vols)?;
    net.save(&Models::<f32>::memory_path(&a.out))?;
    write_text(&a.out.join("loss_memory.csv"), &curve.to_csv())?;
    println!("memory: final loss {:.5}", curve.last().unwrap_or(f64::NAN));
    Ok(())
}

fn train_quality(cfg: &PipelineConfig, a: &TrainQualityArgs) -> CliResult<()> {
    let dir = weights_dir(&a.weights.weights);
    let path = Models::<f32>::memory_path(&dir);
    let mut net = MemoryNet::<f32>::load(&path)?;
    let vols = dataset(cfg, &a.data, "train")?;
    let curve = pipeline::train_quality(cfg, &mut net, &vols)?;
    net.save(&path)?;
    write_text(&dir.join("loss_quality.csv"), &curve.to_csv())?;
    println!("quality: final loss {:.5}", curve.last().unwrap_or(f64::NAN));
    Ok(())
}

fn benchmark(cfg: &PipelineConfig, a: &BenchmarkArgs) -> CliResult<()> {
    let kinds = parse_kinds(&a.interaction)?;
    let policies = parse_policies(&a.policy)?;
    let models = load_models(&a.weights.weights)?;
    let mut vols = dataset(cfg, &a.data, "test")?;
    if let Some(n) = a.volumes {
        vols.truncate(n);
    }
    let mut bcfg = cfg.benchmark_config();
    if let Some(r) = a.rounds {
        bcfg.rounds = r;
    }
    let mut reports = Vec::new();
    for &kind in &kinds {
        for &policy in &policies {
            let r = run_benchmark(&models, &vols, kind, policy, &bcfg)?;
            let means: Vec<String> = r.mean_by_round().iter().map(|m| format!("{m:.4}")).collect();
            println!("{kind:>15} {:>8}: {}", policy.as_str(), means.join(" "));
            reports.push(r);
        }
    }
    let files = emit_report(&reports, &a.out)?;
    println!("report: {} {} {}", files.csv.display(), files.json.display(), files.svg.display());
    Ok(())
}

fn segment(cfg: &PipelineConfig, a: &SegmentArgs) -> CliResult<()> {
    let models = load_models(&a.weights.weights)?;
    let (mut volume, mut gt): (Volume<f32>, Option<BinaryVolume>) = match (&a.volume, a.synthetic) {
        (Some(p), _) => (load_volume(p, VolumeFormat::from_path(p))?, None),
        (None, Some(seed)) => {
            let spec = SyntheticVolumeSpec {
                seed,
                target: a.target.as_deref().map_or(cfg.data.spec.target, parse_target),
                ..cfg.data.spec.clone()
            };
            let (v, g) = generate_synthetic_volume(&spec)?;
            (v.cast(), Some(g))
        }
        (None, None) => return Err(CliError::usage("give --volume or --synthetic")),
    };
    if let Some(w) = &a.window {
        volume = volume.normalize_intensity(w[0], w[1])?;
    }
    if let Some(p) = &a.gt {
        gt = Some(load_raw_mask(p)?);
    }
    let (h, w, c) = volume.dim();
    let spacing = volume.spacing();
    let id = volume.identifier().to_string();
    let mut sess = Session::new(volume, models, cfg.engine.clone())?;
    if let Some(p) = &a.guidance {
        let bytes = std::fs::read(p).map_err(|e| CoreError::io(p, e))?;
        let req = GuidanceRequest::from_json(&bytes)?;
        sess.refine_round(&req.to_guidance(h, w, c)?)?;
    } else {
        let gt = gt
            .as_ref()
            .ok_or_else(|| CliError::usage("simulated guidance needs ground truth (--gt or --synthetic)"))?;
        let kind: InteractionType = a.interaction.parse()?;
        let mut k = a.slice.unwrap_or_else(|| largest_area_slice(gt));
        for t in 0..a.rounds.max(1) {
            let gt_k = gt.slice(s![.., .., k]).to_owned();
            let sim = cfg.simulator.with_seed(cfg.simulator.seed.wrapping_add(t as u64));
            let guidance = simulate(kind, &gt_k, &sim)?.with_slice_index(k);
            sess.refine_round(&guidance)?;
            match sess.suggest_next_slice() {
                Some(next) => k = next,
                None => break,
            }
        }
    }
    let mask = sess.state().binary_volume();
    std::fs::create_dir_all(&a.out).map_err(|e| CoreError::io(&a.out, e))?;
    save_raw_mask(&mask, spacing, &format!("{id}_mask"), &a.out.join("mask.raw"))?;
    let state = StateResponse::from_session(&sess);
    write_text(&a.out.join("state.json"), &(serde_json::to_string_pretty(&state).expect("state serializes") + "\n"))?;
    if a.png {
        save_mask_pngs(&mask, &a.out.join("masks"))?;
    }
    let score = match &gt {
        Some(g) => format!(", DSC {:.4}", dsc(&mask, g)?),
        None => String::new(),
    };
    println!("round {}: mask written to {}{score}", state.round, a.out.join("mask.raw").display());
    Ok(())
}

fn serve(cfg: &PipelineConfig, a: &ServeArgs) -> CliResult<()> {
    let models = load_models(&a.weights.weights)?;
    let app = AppState::new(models, cfg.engine.clone(), cfg.data.spec.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let (listener, addr) = api::bind(&format!("{}:{}", a.host, a.port)).await?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        api::serve(listener, app).await
    })?;
    Ok(())
}
