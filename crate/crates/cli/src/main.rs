mod config_args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anchorsync::anchor::{
    anchor_conditions, edit_anchors, invert_anchors, sample_anchors, PairState, StepEvent,
};
use anchorsync::fixtures::{Fixture, FixtureKind};
use anchorsync::io::{self, FrameSink, FrameSource};
use anchorsync::metrics::{Embedder, ExternalEmbedder, MetricParams, MetricsReport, ToyEmbedder};
use anchorsync::pipeline::{
    run_interpolation, run_pipeline, FrameReader, PipelineConfig, PipelineObserver,
};
use anchorsync::vision::{canny, optical_flow, warp, FlowField, GrayImage};
use anchorsync::{Error, LatentGrid, Result};
use clap::{Parser, Subcommand};

use config_args::ConfigArgs;

const RESOLVED: &str = "config.resolved";
const ANCHOR_LIST: &str = "anchors.txt";
const ORIGINALS: &str = "originals.anch";
const INVERTED: &str = "inverted.anch";
const CACHE: &str = "features.asfc";
const EDITED: &str = "edited.anch";

#[derive(Parser)]
#[command(
    name = "anchorsync",
    version,
    about = "Anchor-based long-video editing"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log per-step fusion statistics and segment timings.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edge maps of every frame, written as gray frames.
    Canny {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Optical flow between consecutive frames, written as latents.
    Flow {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Warps frame i+1 back onto frame i along flow i.
    Warp {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Flow latents written by `flow`.
        #[arg(long)]
        flow: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
    },
    /// Samples anchors and inverts them into a working directory.
    Invert {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Working directory shared by the staged commands.
        #[arg(long)]
        work: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Edits the inverted anchors of a working directory.
    EditAnchors {
        /// Working directory shared by the staged commands.
        #[arg(long)]
        work: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fills every segment between the edited anchors.
    Interpolate {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Working directory shared by the staged commands.
        #[arg(long)]
        work: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full run from source frames to edited frames.
    Pipeline {
        /// Directory of numbered PPM frames.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Consistency and quality report of an edited sequence.
    Metrics {
        /// Source frames directory.
        #[arg(long)]
        original: PathBuf,
        /// Edited frames directory.
        #[arg(long)]
        edited: PathBuf,
        /// Per-frame embeddings of the edited frames ("ASEM" file).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Prompt embedding as comma-separated values.
        #[arg(long)]
        prompt: Option<String>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Writes a seeded synthetic video.
    Fixtures {
        /// static, shapes or mixing.
        #[arg(long, default_value = "shapes")]
        kind: String,
        #[arg(long, default_value_t = 25)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        output: PathBuf,
    },
}

struct LogObserver {
    verbose: bool,
}

impl PipelineObserver for LogObserver {
    fn wants_anchor_steps(&self) -> bool {
        self.verbose
    }

    fn anchor_step(&mut self, event: &StepEvent<'_>) {
        log::info!("{}", event.log_line());
    }

    fn segment_done(&mut self, segment: usize, frames: usize, elapsed: Duration) {
        log::info!(
            "segment {segment}: {frames} frames in {:.2}s",
            elapsed.as_secs_f64()
        );
    }
}

fn write_resolved(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED), cfg.to_text())?;
    Ok(())
}

/// Defaults, then an earlier run's resolved config, then `--config`, then flags.
fn resolve(config: &ConfigArgs, base: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(dir) = base {
        let path = dir.join(RESOLVED);
        if path.exists() {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
    }
    config.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn with_source_size(mut cfg: PipelineConfig, src: &FrameSource) -> PipelineConfig {
    if !src.is_empty() {
        cfg.width = src.width();
        cfg.height = src.height();
    }
    cfg
}

fn require(path: PathBuf, what: &str, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::contract(format!(
            "missing {what} {}; {hint}",
            path.display()
        )))
    }
}

fn read_anchor_list(work: &Path) -> Result<Vec<usize>> {
    let path = require(work.join(ANCHOR_LIST), "anchor list", "run `invert` first")?;
    fs::read_to_string(&path)?
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::format(&path, format!("bad anchor index {s:?}")))
        })
        .collect()
}

fn parse_prompt(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad prompt value {s:?}")))
        })
        .collect()
}

fn cmd_canny(input: &Path, output: &Path, config: &ConfigArgs) -> Result<()> {
    let src = FrameSource::open(input)?;
    let cfg = with_source_size(resolve(config, None)?, &src);
    let params = cfg.canny();
    let mut sink = FrameSink::create(output)?;
    for i in 0..src.len() {
        let edges = canny(&GrayImage::from_frame(&src.read(i)?), &params)?;
        sink.push(&edges.to_latent())?;
    }
    sink.finish()?;
    write_resolved(output, &cfg)
}

fn cmd_flow(input: &Path, output: &Path, config: &ConfigArgs) -> Result<()> {
    let src = FrameSource::open(input)?;
    let cfg = with_source_size(resolve(config, None)?, &src);
    if src.len() < 2 {
        return Err(Error::contract("flow needs at least two frames"));
    }
    let params = cfg.flow();
    let mut flows = Vec::with_capacity(src.len() - 1);
    let mut prev = GrayImage::from_frame(&src.read(0)?);
    for i in 1..src.len() {
        let next = GrayImage::from_frame(&src.read(i)?);
        flows.push(optical_flow(&prev, &next, &params)?.to_latent());
        prev = next;
    }
    io::write_latents(output, &flows)?;
    if let Some(dir) = output.parent() {
        fs::write(dir.join(RESOLVED), cfg.to_text())?;
    }
    Ok(())
}

fn cmd_warp(input: &Path, flow: &Path, output: &Path) -> Result<()> {
    let src = FrameSource::open(input)?;
    let flows = io::read_latents(flow)?;
    if flows.len() + 1 != src.len() {
        return Err(Error::contract(format!(
            "{} flows for {} frames",
            flows.len(),
            src.len()
        )));
    }
    let mut sink = FrameSink::create(output)?;
    for (i, f) in flows.iter().enumerate() {
        let (warped, _) = warp(&src.read(i + 1)?, &FlowField::from_latent(f)?)?;
        sink.push(&warped)?;
    }
    sink.finish()
}

fn cmd_invert(input: &Path, work: &Path, config: &ConfigArgs, verbose: bool) -> Result<()> {
    let src = FrameSource::open(input)?;
    let cfg = with_source_size(resolve(config, None)?, &src);
    let anchors = sample_anchors(src.len(), cfg.k)?;
    let originals = anchors
        .indices()
        .iter()
        .map(|&i| src.read(i))
        .collect::<Result<Vec<_>>>()?;
    let model = cfg.anchor_model(&originals)?;
    let conds = anchor_conditions(cfg.inv_text.as_deref(), cfg.joint, &originals);
    let mut log_step = |e: &StepEvent<'_>| log::info!("{}", e.log_line());
    let (state, cache) = invert_anchors(
        &originals,
        &conds,
        &cfg.schedule()?,
        model.as_ref(),
        &cfg.stage_options(),
        verbose.then_some(&mut log_step as _),
    )?;

    fs::create_dir_all(work)?;
    let list: Vec<String> = anchors.indices().iter().map(usize::to_string).collect();
    fs::write(work.join(ANCHOR_LIST), list.join("\n") + "\n")?;
    io::write_latents(&work.join(ORIGINALS), &originals)?;
    let flat: Vec<LatentGrid> = state
        .pairs()
        .iter()
        .flat_map(|p| p.iter().cloned())
        .collect();
    io::write_latents(&work.join(INVERTED), &flat)?;
    io::write_feature_cache(&work.join(CACHE), &cache)?;
    write_resolved(work, &cfg)
}

fn cmd_edit(work: &Path, config: &ConfigArgs, verbose: bool) -> Result<()> {
    let cache_path = require(work.join(CACHE), "feature cache", "run `invert` first")?;
    let inverted_path = require(
        work.join(INVERTED),
        "inverted anchors",
        "run `invert` first",
    )?;
    let originals_path = require(work.join(ORIGINALS), "source anchors", "run `invert` first")?;
    let cfg = resolve(config, Some(work))?;
    let originals = io::read_latents(&originals_path)?;
    let flat = io::read_latents(&inverted_path)?;
    if flat.len() % 2 != 0 {
        return Err(Error::format(&inverted_path, "odd number of pair latents"));
    }
    let state = PairState::from_pairs(
        flat.chunks(2)
            .map(|c| [c[0].clone(), c[1].clone()])
            .collect(),
    )?;
    let cache = io::read_feature_cache(&cache_path)?;
    let model = cfg.anchor_model(&originals)?;
    let conds = anchor_conditions(cfg.edit_text.as_deref(), cfg.joint, &originals);
    let mut log_step = |e: &StepEvent<'_>| log::info!("{}", e.log_line());
    let edited = edit_anchors(
        &state,
        &cache,
        &conds,
        &cfg.guidance()?,
        &cfg.injection()?,
        &cfg.schedule()?,
        model.as_ref(),
        &cfg.stage_options(),
        verbose.then_some(&mut log_step as _),
    )?;
    io::write_latents(&work.join(EDITED), &edited)?;
    write_resolved(work, &cfg)
}

fn cmd_interpolate(
    input: &Path,
    work: &Path,
    output: &Path,
    config: &ConfigArgs,
    verbose: bool,
) -> Result<()> {
    let edited_path = require(
        work.join(EDITED),
        "edited anchors",
        "run `edit-anchors` first",
    )?;
    let src = FrameSource::open(input)?;
    let cfg = with_source_size(resolve(config, Some(work))?, &src);
    let indices = read_anchor_list(work)?;
    let edited = io::read_latents(&edited_path)?;
    let mut sink = FrameSink::create(output)?;
    run_interpolation(
        &src,
        &indices,
        &edited,
        &cfg,
        &mut sink,
        &mut LogObserver { verbose },
    )?;
    sink.finish()?;
    write_resolved(output, &cfg)
}

fn cmd_pipeline(input: &Path, output: &Path, config: &ConfigArgs, verbose: bool) -> Result<()> {
    let src = FrameSource::open(input)?;
    let cfg = with_source_size(resolve(config, None)?, &src);
    let mut sink = FrameSink::create(output)?;
    let summary = run_pipeline(&src, &cfg, &mut sink, &mut LogObserver { verbose })?;
    sink.finish()?;
    write_resolved(output, &cfg)?;
    log::info!(
        "{} frames, {} anchors; anchors {:.2}s, interpolation {:.2}s",
        summary.frames,
        summary.anchors.len(),
        summary.anchor_time.as_secs_f64(),
        summary.interp_time.as_secs_f64()
    );
    Ok(())
}

fn cmd_metrics(
    original: &Path,
    edited: &Path,
    embeddings: Option<&Path>,
    prompt: Option<&str>,
    report: Option<&Path>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = resolve(config, None)?;
    let orig = io::load_frames(original)?;
    let edit = io::load_frames(edited)?;
    let embedder: Box<dyn Embedder> = match embeddings {
        Some(path) => Box::new(ExternalEmbedder::new(io::read_embeddings(path)?)?),
        None => Box::new(ToyEmbedder),
    };
    let prompt = prompt.map(parse_prompt).transpose()?;
    let params = MetricParams {
        canny: cfg.canny(),
        flow: cfg.flow(),
    };
    let result =
        MetricsReport::compute(&orig, &edit, embedder.as_ref(), &params, prompt.as_deref())?;
    let json = result.to_json();
    match report {
        Some(path) => {
            fs::write(path, json + "\n")?;
            if let Some(dir) = path.parent() {
                fs::write(dir.join(RESOLVED), cfg.to_text())?;
            }
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_fixtures(
    kind: &str,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
    output: &Path,
) -> Result<()> {
    let fixture = Fixture::new(kind.parse::<FixtureKind>()?, frames, width, height, seed)?;
    let mut sink = FrameSink::create(output)?;
    for i in 0..fixture.len() {
        sink.push(&FrameReader::read(&fixture, i)?)?;
    }
    sink.finish()
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose > 0;
    match &cli.command {
        Command::Canny {
            input,
            output,
            config,
        } => cmd_canny(input, output, config),
        Command::Flow {
            input,
            output,
            config,
        } => cmd_flow(input, output, config),
        Command::Warp {
            input,
            flow,
            output,
        } => cmd_warp(input, flow, output),
        Command::Invert {
            input,
            work,
            config,
        } => cmd_invert(input, work, config, verbose),
        Command::EditAnchors { work, config } => cmd_edit(work, config, verbose),
        Command::Interpolate {
            input,
            work,
            output,
            config,
        } => cmd_interpolate(input, work, output, config, verbose),
        Command::Pipeline {
            input,
            output,
            config,
        } => cmd_pipeline(input, output, config, verbose),
        Command::Metrics {
            original,
            edited,
            embeddings,
            prompt,
            report,
            config,
        } => cmd_metrics(
            original,
            edited,
            embeddings.as_deref(),
            prompt.as_deref(),
            report.as_deref(),
            config,
        ),
        Command::Fixtures {
            kind,
            frames,
            width,
            height,
            seed,
            output,
        } => cmd_fixtures(kind, *frames, *width, *height, *seed, output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose > 0 { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
