//! Runs every stage of the toy pipeline in a work directory and prints the
//! stage summaries. Takes tens of minutes on one CPU.
//!
//! `cargo run --release --example pipeline -- [work_dir]`

use std::path::PathBuf;

use poregan::config::PipelineConfig;
use poregan::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pipeline_work".into()));
    let mut cfg = PipelineConfig::toy();
    cfg.paths.corpus = work.join("corpus");
    cfg.paths.manifests = work.join("manifests");
    cfg.paths.checkpoints = work.join("checkpoints");
    cfg.paths.reports = work.join("reports");
    let pipeline = Pipeline::new(cfg)?;
    println!("config hash {}", pipeline.config.hash());
    for outcome in pipeline.run_all()? {
        println!("{}: {}", outcome.stage, outcome.summary);
    }
    println!("reports in {}", work.join("reports").display());
    Ok(())
}
