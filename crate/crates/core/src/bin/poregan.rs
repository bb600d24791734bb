use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poregan::cgan::Arch;
use poregan::config::PipelineConfig;
use poregan::pipeline::{Pipeline, Stage, StageOutcome};
use poregan::Result;

#[derive(Parser)]
#[command(name = "poregan", version, about = "Conditioned pore-image synthesis pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the desk-scale preset as the base configuration.
    #[arg(long, global = true)]
    toy: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// original | modelA | modelB
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Put corpus, manifests, checkpoints and reports under this directory.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    PrepSynth,
    PrepRev,
    PrepExtract,
    PrepBalance,
    SegTrain,
    /// Segment one image into a binary mask PNG.
    SegApply {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    SegEval,
    GanTrain,
    /// Generate images at a target porosity and depth.
    GanGenerate {
        #[arg(long)]
        phi: f64,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Without masks: real vs generated comparison. With masks: stats per mask.
    MorphAnalyze {
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    PetroScore,
    PetroSelect,
    PetroReport,
    /// Run one stage by name, or every stage in order.
    Run { stage: Option<String> },
    /// Validate the configuration and print it with defaults applied.
    Config,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if cli.toy => PipelineConfig::toy(),
        None => PipelineConfig::default(),
    };
    if cli.toy {
        cfg.gan.toy = true;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = &cli.arch {
        cfg.gan.arch = Arch::parse(a)?;
    }
    if let Some(w) = &cli.work {
        cfg.paths.corpus = w.join("corpus");
        cfg.paths.manifests = w.join("manifests");
        cfg.paths.checkpoints = w.join("checkpoints");
        cfg.paths.reports = w.join("reports");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Vec<StageOutcome>> {
    match std::env::var("POREGAN_DEVICE").as_deref() {
        Ok("cpu") | Err(_) => {}
        Ok(other) => log::warn!("POREGAN_DEVICE={other} is not available in this build; using cpu"),
    }
    let cfg = build_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.dump());
        return Ok(vec![]);
    }
    let reports = cfg.paths.reports.clone();
    let p = Pipeline::new(cfg)?;
    let one = |s: Stage| p.run(s).map(|o| vec![o]);
    match &cli.command {
        Command::PrepSynth => one(Stage::PrepSynth),
        Command::PrepRev => one(Stage::PrepRev),
        Command::PrepExtract => one(Stage::PrepExtract),
        Command::PrepBalance => one(Stage::PrepBalance),
        Command::SegTrain => one(Stage::SegTrain),
        Command::SegApply { input, output } => Ok(vec![p.seg_apply(input, output)?]),
        Command::SegEval => one(Stage::SegEval),
        Command::GanTrain => one(Stage::GanTrain),
        Command::GanGenerate { phi, depth, n, out } => {
            let dir = out.clone().unwrap_or_else(|| reports.join("generated"));
            Ok(vec![p.gan_generate(*phi, *depth, *n, p.config.seed, &dir)?])
        }
        Command::MorphAnalyze { masks, out } if !masks.is_empty() => {
            Ok(vec![p.morph_masks(masks, out.as_ref().unwrap_or(&reports))?])
        }
        Command::MorphAnalyze { .. } => one(Stage::MorphAnalyze),
        Command::PetroScore => one(Stage::PetroScore),
        Command::PetroSelect => one(Stage::PetroSelect),
        Command::PetroReport => one(Stage::PetroReport),
        Command::Run { stage: Some(s) } => one(Stage::parse(s)?),
        Command::Run { stage: None } => p.run_all(),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcomes) => {
            for o in outcomes {
                println!("{}", serde_json::to_string(&o).unwrap_or_default());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

