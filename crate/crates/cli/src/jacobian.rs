//! `jacobian`: finite-difference probe of a method's one-step loop map
//! along a trajectory, reporting the raw spectral radius, the proximal
//! contraction bound, the regularized radius, and the error ratios the
//! trajectory actually realized.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use segloop::dynamics::{
    estimate_jacobian, simulate_trajectory, spectral_radius, PromptVector, DEFAULT_FD_STEP,
};
use segloop::grid::Prompt;
use segloop::metrics::MetricConfig;
use segloop::stabilize::{MethodLoop, PipelineMethod};
use segloop::synth::build_world;
use segloop::Error;
use serde::Serialize;

#[derive(clap::Args)]
pub struct Args {
    /// Experiment config JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Method whose loop map is probed, on the first object.
    #[arg(long, default_value = "iterative", value_name = "METHOD")]
    methods: String,
}

/// Trajectory start: the anchor nudged diagonally so error ratios have
/// something to contract.
const PROBE_OFFSET: f64 = 2.0;

#[derive(Serialize)]
struct JacobianRow {
    slice: usize,
    rho: f64,
    bound: f64,
    rho_regularized: f64,
    error_ratio: Option<f64>,
}

fn shifted(p: &Prompt, d: f64) -> Result<Prompt> {
    let (cx, cy) = p.centroid;
    let (x1, y1, x2, y2) = p.bbox;
    Ok(Prompt::new(
        (cx + d, cy + d),
        (x1 + d, y1 + d, x2 + d, y2 + d),
        p.image_diag,
    )?)
}

pub fn run(args: &Args) -> Result<()> {
    let cfg = crate::load_config(&args.config)?;
    let method = PipelineMethod::from_str(args.methods.trim())?;
    if cfg.run.iterations < 2 {
        return Err(Error::InvalidConfig(
            "jacobian report needs run.iterations of at least 2".into(),
        )
        .into());
    }
    let steps = cfg.run.iterations - 1;

    let stabilizer = cfg.stabilizer.clone();
    let world = build_world(cfg.world)?;
    let [ih, iw] = world.config().image;
    let object = 0;
    let anchor = world.gt_prompt(0, object)?;

    let map = MethodLoop {
        world: &world,
        object,
        method,
        cfg: stabilizer.clone(),
        metric_cfg: MetricConfig::default(),
        anchor: anchor.clone(),
    };
    let raw_map = MethodLoop {
        method: PipelineMethod::Iterative,
        ..map.clone()
    };

    let start = PromptVector::from_prompt(&shifted(&anchor, PROBE_OFFSET)?, iw, ih);
    let anchor_vec = PromptVector::from_prompt(&anchor, iw, ih);
    let p_stars = (0..=steps)
        .map(|t| Ok(PromptVector::from_prompt(&world.gt_prompt(t, object)?, iw, ih)))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = simulate_trajectory(&map, &start, &p_stars, steps, None, &anchor_vec)?;
    if let Some(failed) = trajectory.failed_at {
        eprintln!("trajectory failed at step {failed}; reporting the slices before it");
    }

    let prox = stabilizer.proximal();
    let mut rows = Vec::new();
    for (t, point) in trajectory.prompts.iter().enumerate() {
        if t >= steps || trajectory.failed_at.is_some_and(|f| t >= f) {
            break;
        }
        let raw = estimate_jacobian(&raw_map, t, point, DEFAULT_FD_STEP)?;
        let rho = spectral_radius(&raw.matrix)?;
        let (regularized, bound) = segloop::dynamics::regularized_jacobian(&raw.matrix, &prox)?;
        let rho_regularized = match method {
            PipelineMethod::Stabilized => {
                let own = estimate_jacobian(&map, t, point, DEFAULT_FD_STEP)?;
                spectral_radius(&own.matrix)?
            }
            _ => spectral_radius(&regularized)?,
        };
        let error_ratio = match (trajectory.errors.get(t), trajectory.errors.get(t + 1)) {
            (Some(&e0), Some(&e1)) if e0 > 1e-12 => Some(e1 / e0),
            _ => None,
        };
        rows.push(JacobianRow {
            slice: t,
            rho,
            bound,
            rho_regularized,
            error_ratio,
        });
    }

    let mut writer = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush().with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} slice reports for the {method} map to {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}
