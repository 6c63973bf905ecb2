//! `compare`: paired permutation tests between two metric panels, with
//! optional gap-closed columns against a third (oracle) panel.
//!
//! Rows are grouped by the pairing keys on each side and the group
//! means are paired across sides; a metric contributes one output row
//! covering every key shared by all sides.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use segloop::metrics::MetricPanel;
use segloop::stats::{gap_closed, paired_permutation_test, PairedSample, PermutationMode};
use segloop::Error;
use serde::Serialize;

use crate::table::{key_columns, parse_pair_keys, Table};

#[derive(clap::Args)]
pub struct Args {
    /// Metric panel CSV for the baseline side.
    #[arg(value_name = "A")]
    a: PathBuf,
    /// Metric panel CSV for the treatment side.
    #[arg(value_name = "B")]
    b: PathBuf,
    /// Optional oracle panel CSV; adds mean_oracle and gap_closed_pct.
    #[arg(value_name = "ORACLE")]
    oracle: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Comma-separated pairing keys (object, slice, iteration).
    #[arg(long, default_value = "object", value_name = "KEYS")]
    pair_on: String,
    /// Monte Carlo draws when more than 20 pairs rule out enumeration.
    #[arg(long, default_value_t = 2000)]
    permutations: usize,
    /// Seed for the Monte Carlo sign flips.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct Comparison<'a> {
    metric: &'a str,
    n_pairs: usize,
    mean_a: f64,
    std_a: Option<f64>,
    mean_b: f64,
    std_b: Option<f64>,
    delta: f64,
    p_value: f64,
    mode: &'static str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap_closed_pct: Option<Option<f64>>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Value columns worth comparing, in reporting order.
fn candidate_metrics() -> Vec<&'static str> {
    let mut names = vec!["iou", "confidence"];
    names.extend(MetricPanel::metric_names());
    names
}

pub fn run(args: &Args) -> Result<()> {
    let table_a = Table::load(&args.a)?;
    let table_b = Table::load(&args.b)?;
    let table_c = args.oracle.as_deref().map(Table::load).transpose()?;

    let keys = parse_pair_keys(&args.pair_on)?;
    let cols_a = key_columns(&table_a, &keys, "side A")?;
    let cols_b = key_columns(&table_b, &keys, "side B")?;
    let cols_c = table_c
        .as_ref()
        .map(|t| key_columns(t, &keys, "oracle side"))
        .transpose()?;

    let mut rows = Vec::new();
    for metric in candidate_metrics() {
        let (col_a, col_b) = match (table_a.column(metric), table_b.column(metric)) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        let col_c = match (&table_c, table_c.as_ref().map(|t| t.column(metric))) {
            (Some(_), Some(None)) => continue,
            (Some(_), Some(Some(c))) => Some(c),
            _ => None,
        };

        let means_a = table_a.group_means(&cols_a, col_a)?;
        let means_b = table_b.group_means(&cols_b, col_b)?;
        let means_c: Option<BTreeMap<_, _>> = match (&table_c, col_c) {
            (Some(t), Some(col)) => Some(t.group_means(cols_c.as_ref().unwrap(), col)?),
            _ => None,
        };

        let mut pairs = Vec::new();
        let mut oracle_values = Vec::new();
        for (key, &va) in &means_a {
            let vb = match means_b.get(key) {
                Some(&v) => v,
                None => continue,
            };
            if let Some(mc) = &means_c {
                match mc.get(key) {
                    Some(&vc) => oracle_values.push(vc),
                    None => continue,
                }
            }
            pairs.push(PairedSample {
                key: *key,
                value_a: va,
                value_b: vb,
            });
        }
        if pairs.is_empty() {
            continue;
        }

        let result = paired_permutation_test(&pairs, args.permutations, args.seed)?;
        let a_values: Vec<f64> = pairs.iter().map(|p| p.value_a).collect();
        let b_values: Vec<f64> = pairs.iter().map(|p| p.value_b).collect();
        let mean_a = mean(&a_values);
        let mean_b = mean(&b_values);

        let (mean_oracle, gap) = match &means_c {
            Some(_) => {
                let mean_c = mean(&oracle_values);
                let gap = match gap_closed(mean_a, mean_b, mean_c) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedGap { value }) => {
                        eprintln!("{metric}: gap undefined, baseline and oracle means coincide at {value}");
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                (Some(mean_c), Some(gap))
            }
            None => (None, None),
        };

        rows.push(Comparison {
            metric,
            n_pairs: result.n_pairs,
            mean_a,
            std_a: sample_std(&a_values),
            mean_b,
            std_b: sample_std(&b_values),
            delta: -result.mean_diff,
            p_value: result.p_value,
            mode: match result.mode {
                PermutationMode::Exact { .. } => "exact",
                PermutationMode::MonteCarlo { .. } => "monte-carlo",
            },
            seed: result.seed,
            mean_oracle,
            gap_closed_pct: gap,
        });
    }

    if rows.is_empty() {
        return Err(Error::EmptyComparison.into());
    }

    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush().with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} metric comparisons to {}", rows.len(), args.out.display());
    Ok(())
}
