//! `fishgrade` command-line tool.
//!
//! Exit codes: 0 success, 1 slide-fatal error or failed `evaluate` gate,
//! 2 usage error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fishgrade_core::evaluation::{evaluate_slide, MetricsReport, SlidePrediction};
use fishgrade_core::image::{downscale, read_image, write_png16, ChannelMap, MultiChannelImage};
use fishgrade_core::overlay::{encode_png, render_overlay, Layer};
use fishgrade_core::pipeline::{run_pipeline, run_stages, segment_tiled, sort_row_major, to_full_scale, PipelineConfig, SegmentationSource};
use fishgrade_core::report::SlideReport;
use fishgrade_core::segmentation::ProbDistMaps;
use fishgrade_core::simulator::{simulate_slide, GroundTruth, SimConfig};
use fishgrade_core::StarPolygon;
use serde_json::json;
use tracing::info;

#[derive(Parser, Debug)]
#[command(name = "fishgrade", version, about = "HER2 FISH grading engine")]
struct Cli {
    /// Pipeline configuration JSON. A top-level "simulator" object configures `simulate`.
    #[arg(long, global = true, env = "FISHGRADE_CONFIG")]
    config: Option<PathBuf>,
    /// Caps the worker pool; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic slide and its ground truth.
    Simulate(SimulateArgs),
    /// Segment nuclei and write their polygons.
    Segment(SegmentArgs),
    /// Detect FISH signals inside each nucleus.
    Detect(StageArgs),
    /// Classify each nucleus and grade it from its signal counts.
    Classify(StageArgs),
    /// Re-grade an existing report under new scoring thresholds.
    Score(ScoreArgs),
    /// Run the whole pipeline on a slide.
    Run(RunArgs),
    /// Compare a report against ground truth.
    Evaluate(EvaluateArgs),
    /// Start the review service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Slide image (PNG or TIFF, 8 or 16 bit, 3 channels).
    #[arg(long)]
    input: PathBuf,
    /// Order of HER2, CEP17 and DAPI among the image channels.
    #[arg(long, default_value = "RGB")]
    channels: ChannelMap,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    truth: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Drop noise and smears from the configured simulator.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Polygons JSON at full resolution, numbered row-major.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Polygons from `segment`; segments the slide when absent.
    #[arg(long)]
    nuclei: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Report JSON from `run`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ratio_threshold: Option<f64>,
    #[arg(long)]
    high_amp_copies: Option<f64>,
    #[arg(long)]
    min_evaluable: Option<usize>,
    #[arg(long)]
    include_discrepant: Option<bool>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    out: PathBuf,
    /// Ground truth; adds a metrics section to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Writes an annotated PNG.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LayerArg::All)]
    layer: LayerArg,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LayerArg {
    Nuclei,
    Signals,
    All,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_nucleus_precision: Option<f64>,
    #[arg(long)]
    min_nucleus_recall: Option<f64>,
    /// Gate on the mean signal AP.
    #[arg(long)]
    min_map: Option<f64>,
    /// Fail unless the predicted status equals the true one.
    #[arg(long)]
    require_status_agreement: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Persist sessions here so they survive restarts.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "FISHGRADE_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

fn main() -> ExitCode {
    // clap exits 0 for --help and 2 for usage errors
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain, skipping causes whose text an outer message already shows.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a)?,
        Command::Segment(a) => segment(cli, a)?,
        Command::Detect(a) => detect(cli, a)?,
        Command::Classify(a) => classify(cli, a)?,
        Command::Score(a) => score(cli, a)?,
        Command::Run(a) => run(cli, a)?,
        Command::Evaluate(a) => return evaluate(cli, a),
        Command::Serve(a) => serve(cli, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn simulator_config(cli: &Cli) -> Result<SimConfig> {
    let Some(p) = &cli.config else { return Ok(SimConfig::default()) };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?;
    match v.get_mut("simulator") {
        Some(s) => Ok(serde_json::from_value(s.take()).context("config simulator section")?),
        None => Ok(SimConfig::default()),
    }
}

fn load_image(a: &InputArgs) -> Result<MultiChannelImage> {
    Ok(read_image(&a.input, a.channels)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v)?)
}

fn load_report(path: &Path) -> Result<SlideReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SlideReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut cfg = simulator_config(cli)?;
    if a.noiseless {
        cfg = SimConfig { noise_sigma: 0.0, artifact_density: 0.0, ..cfg };
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let (img, gt) = simulate_slide(&cfg, seed)?;
    write_png16(&img, &a.out, ChannelMap::default())?;
    write_text(&a.truth, &gt.to_json()?)?;
    info!(nuclei = gt.nuclei.len(), status = ?gt.status.status, "simulated");
    Ok(())
}

fn segment_slide(image: &MultiChannelImage, cfg: &PipelineConfig) -> Result<Vec<StarPolygon>> {
    let external = match &cfg.predictors.segmentation {
        SegmentationSource::Reference => None,
        SegmentationSource::External { prob, dist } => Some(ProbDistMaps::read(prob, dist)?),
    };
    let working = downscale(image, cfg.downscale)?;
    let mut polys: Vec<StarPolygon> =
        segment_tiled(&working, cfg, external.as_ref())?.iter().map(|p| to_full_scale(p, cfg.downscale)).collect();
    sort_row_major(&mut polys);
    Ok(polys)
}

fn segment(cli: &Cli, a: &SegmentArgs) -> Result<()> {
    let cfg = pipeline_config(cli)?;
    let polys = segment_slide(&load_image(&a.input)?, &cfg)?;
    info!(nuclei = polys.len(), "segmented");
    write_json(&a.out, &polys)
}

/// Per-nucleus stages on supplied or freshly segmented polygons.
fn staged_report(cli: &Cli, a: &StageArgs) -> Result<SlideReport> {
    let cfg = pipeline_config(cli)?;
    let image = load_image(&a.input)?;
    let polys = match &a.nuclei {
        Some(p) => read_json(p)?,
        None => segment_slide(&image, &cfg)?,
    };
    Ok(run_stages(&image, polys, &cfg, None, &|_| {})?)
}

fn detect(cli: &Cli, a: &StageArgs) -> Result<()> {
    let report = staged_report(cli, a)?;
    let out: Vec<_> = report
        .nuclei
        .iter()
        .map(|n| json!({ "id": n.id, "crop_offset": n.crop_offset, "signals": n.signals, "error": n.error }))
        .collect();
    write_json(&a.out, &out)
}

fn classify(cli: &Cli, a: &StageArgs) -> Result<()> {
    let report = staged_report(cli, a)?;
    let out: Vec<_> = report
        .nuclei
        .iter()
        .map(|n| {
            json!({
                "id": n.id,
                "classifier": {
                    "source": n.classifier.source,
                    "class": n.classifier.class,
                    "rationale": n.classifier.rationale,
                    "probabilities": n.classifier.probabilities,
                },
                "detector_class": n.detector_class,
                "second_opinion": n.second_opinion,
                "her2_copies": n.score.her2_copies,
                "cep17_copies": n.score.cep17_copies,
                "error": n.error,
            })
        })
        .collect();
    write_json(&a.out, &out)
}

fn status_line(r: &SlideReport) -> String {
    json!({
        "status": r.status.status,
        "evaluable_count": r.status.evaluable_count,
        "mean_ratio": r.status.mean_ratio,
        "mean_her2_copies": r.status.mean_her2_copies,
    })
    .to_string()
}

fn score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let mut report = load_report(&a.report)?;
    let mut scoring = match &cli.config {
        Some(_) => pipeline_config(cli)?.scoring,
        None => report.config.scoring.clone(),
    };
    if let Some(v) = a.ratio_threshold {
        scoring.ratio_threshold = v;
    }
    if let Some(v) = a.high_amp_copies {
        scoring.high_amp_mean_her2_copies = v;
    }
    if let Some(v) = a.min_evaluable {
        scoring.min_evaluable_nuclei = v;
    }
    if let Some(v) = a.include_discrepant {
        scoring.include_discrepant = v;
    }
    report.regrade(scoring)?;
    write_text(&a.out, &report.to_json()?)?;
    println!("{}", status_line(&report));
    Ok(())
}

fn run(cli: &Cli, a: &RunArgs) -> Result<()> {
    let cfg = pipeline_config(cli)?;
    let image = load_image(&a.input)?;
    let gt: Option<GroundTruth> = match &a.truth {
        Some(p) => Some(GroundTruth::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    let report = run_pipeline(&image, &cfg, gt.as_ref())?;
    write_text(&a.out, &report.to_json()?)?;
    if let Some(path) = &a.overlay {
        let layer = match a.layer {
            LayerArg::Nuclei => Layer::Nuclei,
            LayerArg::Signals => Layer::Signals,
            LayerArg::All => Layer::All,
        };
        let (img, _) = render_overlay(&image, &report, layer);
        std::fs::write(path, encode_png(&img)?).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", status_line(&report));
    Ok(())
}

fn gate(name: &str, value: Option<f64>, min: Option<f64>, failures: &mut Vec<String>) {
    if let Some(min) = min {
        match value {
            Some(v) if v >= min => {}
            Some(v) => failures.push(format!("{name} {v:.4} < {min}")),
            None => failures.push(format!("{name} undefined, gate {min}")),
        }
    }
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<ExitCode> {
    let report = load_report(&a.report)?;
    let gt = GroundTruth::from_json(&std::fs::read_to_string(&a.truth).with_context(|| format!("reading {}", a.truth.display()))?)?;
    let eval_cfg = match &cli.config {
        Some(_) => pipeline_config(cli)?.evaluation,
        None => report.config.evaluation.clone(),
    };
    let pred = SlidePrediction {
        polygons: report.nuclei.iter().map(|n| n.polygon.clone()).collect(),
        signals: report.nuclei.iter().flat_map(|n| n.signals.iter().cloned()).collect(),
        status: report.status.status,
    };
    let metrics: MetricsReport = evaluate_slide(&pred, &gt, &eval_cfg);
    write_json(&a.out, &metrics)?;

    let mut failures = Vec::new();
    gate("nucleus precision", metrics.nuclei.precision, a.min_nucleus_precision, &mut failures);
    gate("nucleus recall", metrics.nuclei.recall, a.min_nucleus_recall, &mut failures);
    gate("mAP", metrics.map, a.min_map, &mut failures);
    if a.require_status_agreement && !metrics.status_agrees {
        failures.push(format!("status {:?} != truth {:?}", metrics.predicted_status, metrics.true_status));
    }
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!("gate failed: {f}");
    }
    Ok(ExitCode::FAILURE)
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let cfg = fishgrade_service::ServiceConfig {
        data_dir: a.data_dir.clone(),
        token: a.token.clone(),
        defaults: pipeline_config(cli)?,
        ..Default::default()
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(fishgrade_service::serve(a.addr, cfg))?;
    bail!("server stopped")
}
