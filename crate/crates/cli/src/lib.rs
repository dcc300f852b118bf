//! Command-line driver for the semfuse pipeline.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use semfuse::eval::{EvalReport, NnMode};
use semfuse::fusion::Mesh;
use semfuse::ingest::MaskEncoding;
use semfuse::synth::{self, SceneSpec};

pub use config::{ConfigError, FeatureSource, PipelineConfig};
use pipeline::{Run, MESH_FILE, REPORT_FILE, SEMANTIC_MESH_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] semfuse::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Pipeline(e) if e.is_data_error() => EXIT_DATA,
            CliError::Pipeline(_) => EXIT_USAGE,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "semfuse", version, about = "Semantic RGB-D reconstruction pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse depth frames into a TSDF and write the extracted mesh.
    Reconstruct(PipelineArgs),
    /// Correct per-keyframe labels with the sparse semantic map.
    Propagate {
        #[command(flatten)]
        args: PipelineArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Process at most this many keyframes, then checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Label the reconstructed mesh by multi-view voting and evaluate it.
    Semantic(PipelineArgs),
    /// Compare a predicted mesh against labeled ground-truth samples.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = 41)]
        num_classes: usize,
        #[arg(long)]
        brute_force_oracles: bool,
        /// Directory for report.json and manifest.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic scene into a dataset directory.
    Synth {
        /// Scene description (JSON); defaults to the built-in preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::ThreeObjects)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        flip_probability: Option<f64>,
        #[arg(long, value_enum, default_value_t = Encoding::Png)]
        mask_encoding: Encoding,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    ThreeObjects,
    PlaneWall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoding {
    Png,
    Rle,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long)]
    pub keyframe_stride: Option<usize>,
    #[arg(long)]
    pub t_iou: Option<f64>,
    #[arg(long)]
    pub t_p1: Option<f64>,
    #[arg(long)]
    pub t_p2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub brute_force_oracles: bool,
    /// Skip semantic-map correction.
    #[arg(long)]
    pub no_propagation: bool,
}

impl PipelineArgs {
    /// Loads the config file, applies flag overrides and validates.
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(v) = self.voxel_size {
            cfg.tsdf.voxel_size = v;
        }
        if let Some(s) = self.keyframe_stride {
            cfg.sequence.keyframe_stride = s;
        }
        if let Some(t) = self.t_iou {
            cfg.semmap.thresholds.t_iou = t;
        }
        if let Some(t) = self.t_p1 {
            cfg.semmap.thresholds.t_p1 = t;
        }
        if let Some(t) = self.t_p2 {
            cfg.semmap.thresholds.t_p2 = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.brute_force_oracles {
            cfg.eval.nn_mode = NnMode::BruteForce;
        }
        if self.no_propagation {
            cfg.propagation = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn cmd_reconstruct(cfg: &PipelineConfig) -> Result<Mesh, CliError> {
    let seq = pipeline::open_sequence(cfg)?;
    let mut run = Run::new(&cfg.out, "reconstruct", cfg.hash());
    run.log(format!("{} frames", seq.len()));
    let mesh = pipeline::reconstruct(cfg, &seq)?;
    run.log(format!("mesh {} vertices {} triangles", mesh.vertices.len(), mesh.triangles.len()));
    pipeline::write_mesh(&mut run, MESH_FILE, &mesh)?;
    run.finish()?;
    Ok(mesh)
}

pub fn cmd_propagate(
    cfg: &PipelineConfig,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<pipeline::Progress, CliError> {
    pipeline::open_sequence(cfg)?;
    let mut run = Run::new(&cfg.out, "propagate", cfg.hash());
    let progress = pipeline::propagate(cfg, &mut run, resume, stop_after)?;
    run.finish()?;
    Ok(progress)
}

pub fn cmd_semantic(cfg: &PipelineConfig) -> Result<pipeline::SemanticResult, CliError> {
    pipeline::open_sequence(cfg)?;
    let mut run = Run::new(&cfg.out, "semantic", cfg.hash());
    let result = pipeline::semantic(cfg, &mut run)?;
    pipeline::write_mesh(&mut run, SEMANTIC_MESH_FILE, &result.mesh)?;
    if let Some(report) = &result.report {
        run.write(REPORT_FILE, (report.to_json() + "\n").as_bytes())?;
        for line in report.table().lines() {
            run.log(line.to_string());
        }
    }
    run.finish()?;
    Ok(result)
}

pub fn cmd_eval(
    pred: &std::path::Path,
    gt: &std::path::Path,
    num_classes: usize,
    mode: NnMode,
    out: Option<&std::path::Path>,
) -> Result<EvalReport, CliError> {
    if num_classes < 2 {
        return Err(ConfigError {
            field: "num_classes".into(),
            reason: "must be at least 2".into(),
        }
        .into());
    }
    let pred_mesh = Mesh::read_ply(pred)?;
    let gt_mesh = Mesh::read_ply(gt)?;
    let report = EvalReport::evaluate(&pred_mesh, &gt_mesh, num_classes, None, mode)?;
    if let Some(out) = out {
        let mut run = Run::new(out, "eval", String::new());
        run.write(REPORT_FILE, (report.to_json() + "\n").as_bytes())?;
        run.finish()?;
    }
    Ok(report)
}

pub fn cmd_synth(spec: &SceneSpec, out: &std::path::Path, encoding: MaskEncoding) -> Result<synth::SynthSummary, CliError> {
    spec.validate()?;
    let json = serde_json::to_string(spec).map_err(|e| CliError::Internal(e.to_string()))?;
    let hash = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(json.as_bytes()));
    let summary = synth::write_dataset(spec, out, encoding)?;
    let mut run = Run::new(out, "synth", hash);
    run.log(format!(
        "{} frames, {} detections ({} flipped), {} gt samples",
        summary.frames, summary.detections, summary.flipped, summary.gt_samples
    ));
    for entry in walk(out).map_err(|e| CliError::Internal(e.to_string()))? {
        run.record(entry);
    }
    run.finish()?;
    Ok(summary)
}

/// Relative paths of all files under `root`, sorted.
fn walk(root: &std::path::Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(rel) = path.strip_prefix(root) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != pipeline::MANIFEST_FILE && rel != pipeline::LOG_FILE {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_spec(path: Option<&std::path::Path>, preset: Preset) -> Result<SceneSpec, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| semfuse::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Pipeline(semfuse::Error::Json {
                    path: p.to_path_buf(),
                    source: e,
                })
            })
        }
        None => Ok(match preset {
            Preset::ThreeObjects => SceneSpec::three_objects(),
            Preset::PlaneWall => SceneSpec::plane_wall(),
        }),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Reconstruct(args) => {
            let cfg = args.resolve()?;
            with_threads(cfg.threads, || cmd_reconstruct(&cfg))??;
        }
        Command::Propagate {
            args,
            resume,
            stop_after,
        } => {
            let cfg = args.resolve()?;
            let p = with_threads(cfg.threads, || cmd_propagate(&cfg, resume, stop_after))??;
            println!("processed {} of {} keyframes", p.next, p.total);
        }
        Command::Semantic(args) => {
            let cfg = args.resolve()?;
            let r = with_threads(cfg.threads, || cmd_semantic(&cfg))??;
            if let Some(report) = r.report {
                print!("{}", report.table());
            }
        }
        Command::Eval {
            pred,
            gt,
            num_classes,
            brute_force_oracles,
            out,
        } => {
            let mode = if brute_force_oracles { NnMode::BruteForce } else { NnMode::KdTree };
            let report = cmd_eval(&pred, &gt, num_classes, mode, out.as_deref())?;
            print!("{}", report.table());
        }
        Command::Synth {
            spec,
            preset,
            out,
            seed,
            flip_probability,
            mask_encoding,
            threads,
        } => {
            let mut scene = load_spec(spec.as_deref(), preset)?;
            if let Some(s) = seed {
                scene.seed = s;
            }
            if let Some(p) = flip_probability {
                scene.noise.flip_probability = p;
            }
            let encoding = match mask_encoding {
                Encoding::Png => MaskEncoding::Png,
                Encoding::Rle => MaskEncoding::Rle,
            };
            let s = with_threads(threads.unwrap_or(0), || cmd_synth(&scene, &out, encoding))??;
            println!("wrote {} frames to {}", s.frames, out.display());
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli)));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => EXIT_INTERNAL,
    }
}
