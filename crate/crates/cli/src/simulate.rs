//! `simulate`: run the configured pipelines over the synthetic world
//! and write one byte-exact trace directory per method.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use segloop::experiment::{config_digest, run_experiment};
use segloop::stabilize::PipelineMethod;
use segloop::trace::{method_dir, write_trace, TraceManifest};
use segloop::Error;

#[derive(clap::Args)]
pub struct Args {
    /// Experiment config JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory; traces land in one subdirectory per method.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the configured run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured methods (comma-separated).
    #[arg(long, value_name = "LIST")]
    methods: Option<String>,
}

pub fn run(args: &Args) -> Result<()> {
    let mut cfg = crate::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(spec) = &args.methods {
        cfg.run.methods = spec
            .split(',')
            .map(|m| {
                PipelineMethod::from_str(m)
                    .map_err(|e| Error::InvalidConfig(e.to_string()).into())
            })
            .collect::<Result<Vec<_>>>()?;
    }
    cfg.validate()?;

    let digest = format!("{:016x}", config_digest(&cfg)?);
    let exp = run_experiment(&cfg)?;
    let [gh, gw] = exp.world.config().grid;
    let [ih, iw] = exp.world.config().image;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for method in &cfg.run.methods {
        let name = method.as_str();
        let start = exp
            .records
            .iter()
            .position(|r| r.method == name)
            .unwrap_or(exp.records.len());
        let end = start
            + exp.records[start..]
                .iter()
                .take_while(|r| r.method == name)
                .count();
        let records = &exp.records[start..end];
        let manifest =
            TraceManifest::describe(records, (gh, gw), (ih, iw), cfg.run.seed, digest.clone())?;
        let dir = method_dir(&args.out, name);
        write_trace(records, &manifest, &dir)?;
        println!("{name}: {} records -> {}", records.len(), dir.display());
    }
    println!("runs: {}, lost objects: {}", exp.runs.len(), exp.losses());
    println!("seed: {}", cfg.run.seed);
    println!("config digest: {digest}");
    Ok(())
}
