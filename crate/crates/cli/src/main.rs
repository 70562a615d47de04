use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use groundpref_core::dataset::read_jsonl;
use groundpref_core::eval::{eval_grounding_merge, eval_rec, parse_thresholds, ThresholdTable};
use groundpref_core::grounded_text::Convention;
use groundpref_core::pipeline::{Pipeline, PipelineConfig, ProviderKind, Stage};
use groundpref_core::synthetic::{synthetic_coco, SyntheticSpec};
use groundpref_core::{GroundingSample, RecSample};

#[derive(Parser)]
#[command(
    name = "groundpref",
    version,
    about = "Build grounded-description preference pairs and evaluate grounding"
)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (JSON); unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the deterministic annotation-backed mock provider.
    #[arg(long, global = true)]
    mock: bool,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Directory for the persistent provider response cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Parent directory of run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// COCO-style annotation file.
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and filter annotations.
    Ingest,
    /// Sample region queries.
    BuildRegions,
    /// Collect one candidate per prompt template and sample.
    Generate,
    /// Parse and score candidates.
    Score,
    /// Refine winners and emit preference pairs.
    Pair,
    /// Summarize the run.
    Report,
    /// Run every stage, resuming past completed ones.
    Run {
        /// Re-execute stages that already completed.
        #[arg(long)]
        force: bool,
    },
    /// Referring-expression accuracy per IoU threshold.
    EvalRec(EvalArgs),
    /// Phrase-grounding recall per IoU threshold (merged boxes).
    EvalGround(EvalArgs),
    /// Write a synthetic annotation file.
    Synth {
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL file of samples.
    #[arg(long)]
    samples: PathBuf,

    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9")]
    thresholds: String,

    /// Coordinate convention of the model outputs: pixel, norm999 or unit.
    #[arg(long, default_value = "norm999")]
    convention: String,

    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_convention(s: &str) -> anyhow::Result<Convention> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .with_context(|| format!("unknown convention {s:?} (expected pixel, norm999 or unit)"))
}

fn load_config(g: &Global) -> anyhow::Result<PipelineConfig> {
    let mut config = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if g.mock {
        config.provider.kind = ProviderKind::Mock;
    }
    if let Some(w) = g.workers {
        config.workers = w;
    }
    if let Some(d) = &g.cache_dir {
        config.cache_dir = Some(d.clone());
    }
    if let Some(d) = &g.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(a) = &g.annotations {
        config.dataset.annotations = Some(a.clone());
    }
    Ok(config)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    emit(&serde_json::to_string_pretty(v)?)
}

fn finish_eval(table: &ThresholdTable, json: Option<&Path>) -> anyhow::Result<()> {
    emit(&table.to_string())?;
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(table)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let stage = match &cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::BuildRegions => Some(Stage::BuildRegions),
        Command::Generate => Some(Stage::Generate),
        Command::Score => Some(Stage::Score),
        Command::Pair => Some(Stage::Pair),
        _ => None,
    };
    if let Some(stage) = stage {
        let pipeline = Pipeline::open(load_config(&cli.global)?)?;
        eprintln!("run directory: {}", pipeline.run_dir().display());
        return print_json(&pipeline.run_stage(stage)?);
    }

    match cli.command {
        Command::Report => {
            let pipeline = Pipeline::open(load_config(&cli.global)?)?;
            print_json(&pipeline.report()?)
        }
        Command::Run { force } => {
            let pipeline = Pipeline::open(load_config(&cli.global)?)?.force(force);
            eprintln!("run directory: {}", pipeline.run_dir().display());
            let report = pipeline.run_all()?;
            print_json(&report)?;
            if !report.audit.ok {
                bail!("audit failed: {}", report.audit.problems.join("; "));
            }
            Ok(())
        }
        Command::EvalRec(a) => {
            let samples: Vec<RecSample> = read_jsonl(&a.samples)?;
            let table = eval_rec(
                &samples,
                &parse_thresholds(&a.thresholds)?,
                parse_convention(&a.convention)?,
            )?;
            finish_eval(&table, a.json.as_deref())
        }
        Command::EvalGround(a) => {
            let samples: Vec<GroundingSample> = read_jsonl(&a.samples)?;
            let table = eval_grounding_merge(
                &samples,
                &parse_thresholds(&a.thresholds)?,
                parse_convention(&a.convention)?,
            )?;
            finish_eval(&table, a.json.as_deref())
        }
        Command::Synth { images, out } => {
            let spec = SyntheticSpec {
                images,
                ..Default::default()
            };
            let doc = synthetic_coco(&spec, cli.global.seed.unwrap_or(0));
            fs::write(&out, serde_json::to_string(&doc)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {images} images to {}", out.display());
            Ok(())
        }
        _ => unreachable!("stage commands handled above"),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        // core errors already embed their cause in the message
        let mut msg = e.to_string();
        for cause in e.chain().skip(1) {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg.push_str(": ");
                msg.push_str(&c);
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
