//! `metrics`: validate a trace directory, recompute the metric panel
//! for every record, and write one CSV row per decoder call.

use std::path::PathBuf;

use anyhow::{Context, Result};
use segloop::experiment::{config_digest, panel_table, PanelRow};
use segloop::metrics::MetricConfig;
use segloop::synth::build_world;
use segloop::trace::{read_trace, validate_trace};
use segloop::Error;
use serde::Serialize;

#[derive(clap::Args)]
pub struct Args {
    /// Trace directory to expand.
    #[arg(long, value_name = "DIR")]
    trace: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Experiment config JSON; attaches the synthetic world so the
    /// causal (ccd) and feature-correlation (sca) columns fill in. The
    /// config digest must match the trace manifest.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

/// Fixed panel CSV schema; optional metrics serialize as empty cells.
#[derive(Serialize)]
struct Row<'a> {
    method: &'a str,
    slice: usize,
    object: usize,
    iteration: usize,
    confidence: f64,
    iou: Option<f64>,
    cama_dice: f64,
    cama_iou: f64,
    aad: f64,
    tcs: f64,
    pde: f64,
    dlr_clamped: f64,
    log_dlr: f64,
    ccd: Option<f64>,
    pics: f64,
    attention_entropy_raw: f64,
    attention_entropy_normalized: f64,
    sca: Option<f64>,
    gt_based: bool,
}

impl<'a> Row<'a> {
    fn from_panel(row: &'a PanelRow) -> Row<'a> {
        let p = &row.panel;
        Row {
            method: &row.method,
            slice: row.slice,
            object: row.object,
            iteration: row.iteration,
            confidence: row.confidence,
            iou: row.iou,
            cama_dice: p.cama_dice,
            cama_iou: p.cama_iou,
            aad: p.aad,
            tcs: p.tcs,
            pde: p.pde,
            dlr_clamped: p.dlr_clamped,
            log_dlr: p.log_dlr,
            ccd: p.ccd,
            pics: p.pics,
            attention_entropy_raw: p.attention_entropy_raw,
            attention_entropy_normalized: p.attention_entropy_normalized,
            sca: p.sca,
            gt_based: p.gt_based,
        }
    }
}

pub fn run(args: &Args) -> Result<()> {
    let findings = validate_trace(&args.trace);
    if !findings.is_empty() {
        for finding in &findings {
            eprintln!("{finding}");
        }
        return Err(Error::TraceValidation(format!(
            "{} finding(s) in {}",
            findings.len(),
            args.trace.display()
        ))
        .into());
    }

    let (records, manifest) = read_trace(&args.trace)?;
    let world = match &args.config {
        Some(path) => {
            let cfg = crate::load_config(path)?;
            let digest = format!("{:016x}", config_digest(&cfg)?);
            if digest != manifest.config_digest {
                return Err(Error::InvalidConfig(format!(
                    "config digest {digest} does not match trace digest {}",
                    manifest.config_digest
                ))
                .into());
            }
            Some(build_world(cfg.world)?)
        }
        None => None,
    };

    let [ih, iw] = manifest.image;
    let rows = panel_table(&records, world.as_ref(), (ih, iw), &MetricConfig::default())?;

    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for row in &rows {
        writer.serialize(Row::from_panel(row))?;
    }
    writer.flush().with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
