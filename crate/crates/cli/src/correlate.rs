//! `correlate`: per-metric Pearson and Spearman correlation against the
//! per-call IoU column, at call level and at group level. Degenerate
//! (constant or too-small) inputs are flagged in a note column rather
//! than failing the run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use segloop::metrics::MetricPanel;
use segloop::stats::correlations;
use segloop::Error;
use serde::Serialize;

use crate::table::{key_columns, parse_pair_keys, Table};

#[derive(clap::Args)]
pub struct Args {
    /// Metric panel CSV with a per-call iou column.
    #[arg(value_name = "PANEL")]
    panel: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Comma-separated grouping keys for the group-level pass.
    #[arg(long, default_value = "object", value_name = "KEYS")]
    pair_on: String,
}

#[derive(Serialize)]
struct CorrelationRow<'a> {
    metric: &'a str,
    n_calls: usize,
    pearson_call: Option<f64>,
    spearman_call: Option<f64>,
    n_groups: usize,
    pearson_group: Option<f64>,
    spearman_group: Option<f64>,
    note: String,
}

/// Correlations with degeneracy folded into a note instead of an error.
fn guarded(xs: &[f64], ys: &[f64], level: &str) -> Result<(Option<f64>, Option<f64>, Vec<String>)> {
    if xs.len() < 3 {
        return Ok((None, None, vec![format!("insufficient data at {level} level")]));
    }
    let pair = correlations(xs, ys)?;
    let mut notes = Vec::new();
    if pair.pearson.is_none() {
        notes.push(format!("constant input at {level} level"));
    }
    Ok((pair.pearson, pair.spearman, notes))
}

pub fn run(args: &Args) -> Result<()> {
    let table = Table::load(&args.panel)?;
    let iou_col = table
        .column("iou")
        .ok_or_else(|| Error::InvalidInput("panel lacks a per-call iou column".into()))?;
    let keys = parse_pair_keys(&args.pair_on)?;
    let key_cols = key_columns(&table, &keys, "panel")?;

    let mut metric_cols: Vec<(&'static str, usize)> = Vec::new();
    for name in std::iter::once("confidence").chain(MetricPanel::metric_names()) {
        if let Some(col) = table.column(name) {
            metric_cols.push((name, col));
        }
    }
    if metric_cols.is_empty() {
        return Err(Error::InvalidInput("panel holds no known metric columns".into()).into());
    }

    let mut rows = Vec::new();
    for (metric, col) in metric_cols {
        let mut calls_x = Vec::new();
        let mut calls_y = Vec::new();
        let mut groups: BTreeMap<(usize, usize, usize), (f64, f64, usize)> = BTreeMap::new();
        for row in 0..table.len() {
            let (x, y) = match (table.float(row, col)?, table.float(row, iou_col)?) {
                (Some(x), Some(y)) => (x, y),
                _ => continue,
            };
            calls_x.push(x);
            calls_y.push(y);
            let mut key = [0usize; 3];
            for (slot, &kc) in key_cols.iter().enumerate() {
                key[slot] = table.index(row, kc)?;
            }
            let entry = groups.entry((key[0], key[1], key[2])).or_insert((0.0, 0.0, 0));
            entry.0 += x;
            entry.1 += y;
            entry.2 += 1;
        }

        let group_x: Vec<f64> = groups.values().map(|(sx, _, n)| sx / *n as f64).collect();
        let group_y: Vec<f64> = groups.values().map(|(_, sy, n)| sy / *n as f64).collect();

        let (pearson_call, spearman_call, mut notes) = guarded(&calls_x, &calls_y, "call")?;
        let (pearson_group, spearman_group, group_notes) = guarded(&group_x, &group_y, "group")?;
        notes.extend(group_notes);

        rows.push(CorrelationRow {
            metric,
            n_calls: calls_x.len(),
            pearson_call,
            spearman_call,
            n_groups: group_x.len(),
            pearson_group,
            spearman_group,
            note: notes.join("; "),
        });
    }

    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush().with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} metric correlations to {}", rows.len(), args.out.display());
    Ok(())
}
