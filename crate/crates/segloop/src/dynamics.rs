//! Prompt-space dynamics: the feedback loop viewed as a map on R^6,
//! finite-difference Jacobians, spectral radii, the proximal update, and
//! trajectory simulation.
//!
//! Prompts are normalized so every coordinate is O(1): x-coordinates are
//! divided by image width, y-coordinates by image height. Step sizes and
//! error norms below are stated in this normalized frame.

use nalgebra::{Complex, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Prompt;

/// Eigenvalue solve tolerance and iteration cap. 6x6 matrices converge
/// long before the cap; the cap guards degenerate inputs.
const EIG_TOL: f64 = 1e-13;
const EIG_MAX_ITER: usize = 10_000;

/// Default central-difference step in normalized coordinates.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// A prompt as a point in R^6: (cx/W, cy/H, x1/W, y1/H, x2/W, y2/H).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptVector(pub [f64; 6]);

impl PromptVector {
    pub fn from_prompt(p: &Prompt, image_w: usize, image_h: usize) -> PromptVector {
        let w = image_w as f64;
        let h = image_h as f64;
        PromptVector([
            p.centroid.0 / w,
            p.centroid.1 / h,
            p.bbox.0 / w,
            p.bbox.1 / h,
            p.bbox.2 / w,
            p.bbox.3 / h,
        ])
    }

    /// De-normalizes back to pixels. Box corners are re-ordered, so the
    /// result is a valid prompt even after an arbitrary map was applied.
    pub fn to_prompt(&self, image_w: usize, image_h: usize) -> Result<Prompt> {
        let w = image_w as f64;
        let h = image_h as f64;
        let v = &self.0;
        let (x1, x2) = ((v[2] * w).min(v[4] * w), (v[2] * w).max(v[4] * w));
        let (y1, y2) = ((v[3] * h).min(v[5] * h), (v[3] * h).max(v[5] * h));
        Prompt::new((v[0] * w, v[1] * h), (x1, y1, x2, y2), w.hypot(h))
    }

    pub fn dist(&self, other: &PromptVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One step of the closed feedback loop: prompt in, next prompt out.
/// Implementations must be deterministic for a fixed world and seed.
pub trait LoopMap {
    fn apply(&self, t: usize, p: &PromptVector) -> Result<PromptVector>;
}

/// Proximal regularization weights: pull toward the anchor (lambda_a)
/// and toward the previous prompt (lambda_s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProximalConfig {
    pub lambda_a: f64,
    pub lambda_s: f64,
}

impl Default for ProximalConfig {
    fn default() -> Self {
        ProximalConfig {
            lambda_a: 0.4,
            lambda_s: 0.3,
        }
    }
}

impl ProximalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_a.is_finite() || !self.lambda_s.is_finite() || self.lambda_a < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "proximal weights must be finite and non-negative, got lambda_a = {}, lambda_s = {}",
                self.lambda_a, self.lambda_s
            )));
        }
        Ok(())
    }
}

/// Closed-form solution of the proximally regularized prompt update:
/// `(p_hat + lambda_a * p_0 + lambda_s * p_prev) / (1 + lambda_a + lambda_s)`,
/// componentwise. Box ordering is repaired after blending.
pub fn proximal_update(
    p_hat: &PromptVector,
    p_0: &PromptVector,
    p_prev: &PromptVector,
    cfg: &ProximalConfig,
) -> PromptVector {
    let denom = 1.0 + cfg.lambda_a + cfg.lambda_s;
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = (p_hat.0[i] + cfg.lambda_a * p_0.0[i] + cfg.lambda_s * p_prev.0[i]) / denom;
    }
    if out[2] > out[4] {
        out.swap(2, 4);
    }
    if out[3] > out[5] {
        out.swap(3, 5);
    }
    PromptVector(out)
}

/// Finite-difference Jacobian of a loop map at a point.
#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub matrix: Matrix6<f64>,
    pub step: f64,
    pub slice: usize,
}

/// Central differences with step `h` per coordinate: column j holds
/// `(phi(p + h e_j) - phi(p - h e_j)) / 2h`. Exact for affine maps.
pub fn estimate_jacobian(map: &dyn LoopMap, t: usize, p: &PromptVector, h: f64) -> Result<JacobianEstimate> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("fd step must be positive, got {h}")));
    }
    let mut matrix = Matrix6::zeros();
    for j in 0..6 {
        let mut hi = *p;
        let mut lo = *p;
        hi.0[j] += h;
        lo.0[j] -= h;
        let up = map.apply(t, &hi).map_err(|e| Error::JacobianEval {
            coordinate: j,
            source: Box::new(e),
        })?;
        let down = map.apply(t, &lo).map_err(|e| Error::JacobianEval {
            coordinate: j,
            source: Box::new(e),
        })?;
        for i in 0..6 {
            matrix[(i, j)] = (up.0[i] - down.0[i]) / (2.0 * h);
        }
    }
    Ok(JacobianEstimate { matrix, step: h, slice: t })
}

/// Maximum eigenvalue modulus, via a real Schur decomposition.
pub fn spectral_radius(m: &Matrix6<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("spectral radius of a non-finite matrix".into()));
    }
    let schur = nalgebra::linalg::Schur::try_new(*m, EIG_TOL, EIG_MAX_ITER).ok_or_else(|| {
        Error::NumericalFailure(format!(
            "Schur decomposition did not converge within {EIG_MAX_ITER} iterations"
        ))
    })?;
    let eig: Vector6<Complex<f64>> = schur.complex_eigenvalues();
    Ok(eig.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// The Jacobian of the proximally wrapped loop together with its radius
/// bound: `J_reg = (J + lambda_s I) / (1 + lambda_a + lambda_s)` and
/// `bound = (rho(J) + lambda_s) / (1 + lambda_a + lambda_s)`. The bound
/// is re-checked against the regularized matrix before returning.
pub fn regularized_jacobian(j: &Matrix6<f64>, cfg: &ProximalConfig) -> Result<(Matrix6<f64>, f64)> {
    cfg.validate()?;
    let denom = 1.0 + cfg.lambda_a + cfg.lambda_s;
    let reg = (j + Matrix6::identity() * cfg.lambda_s) / denom;
    let bound = (spectral_radius(j)? + cfg.lambda_s) / denom;
    let rho_reg = spectral_radius(&reg)?;
    if rho_reg > bound + 1e-8 {
        return Err(Error::NumericalFailure(format!(
            "regularized radius {rho_reg} exceeds its bound {bound}"
        )));
    }
    Ok((reg, bound))
}

/// A simulated prompt trajectory with per-step errors against the
/// optimal prompt series. `failed_at` marks the step at which the loop
/// map failed, if it did; errors and prompts are truncated there.
#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub errors: Vec<f64>,
    pub prompts: Vec<PromptVector>,
    pub failed_at: Option<usize>,
}

/// Iterates the loop (proximally wrapped when `stabilizer` is given)
/// for `steps` steps and records `e_t = ||p_t - p_star[t]||` in the
/// normalized frame. `p_stars` must supply steps + 1 reference prompts.
pub fn simulate_trajectory(
    map: &dyn LoopMap,
    p_start: &PromptVector,
    p_stars: &[PromptVector],
    steps: usize,
    stabilizer: Option<&ProximalConfig>,
    anchor: &PromptVector,
) -> Result<TrajectoryResult> {
    if steps == 0 {
        return Err(Error::InvalidInput("trajectory needs at least one step".into()));
    }
    if p_stars.len() < steps + 1 {
        return Err(Error::InvalidInput(format!(
            "need {} reference prompts for {} steps, got {}",
            steps + 1,
            steps,
            p_stars.len()
        )));
    }
    if let Some(cfg) = stabilizer {
        cfg.validate()?;
    }
    let mut prompts = Vec::with_capacity(steps + 1);
    let mut errors = Vec::with_capacity(steps + 1);
    let mut current = *p_start;
    prompts.push(current);
    errors.push(current.dist(&p_stars[0]));
    for t in 0..steps {
        let next = match map.apply(t, &current) {
            Ok(p) => p,
            Err(_) => {
                return Ok(TrajectoryResult {
                    errors,
                    prompts,
                    failed_at: Some(t),
                })
            }
        };
        let next = match stabilizer {
            Some(cfg) => proximal_update(&next, anchor, &current, cfg),
            None => next,
        };
        if !next.is_finite() {
            return Ok(TrajectoryResult {
                errors,
                prompts,
                failed_at: Some(t),
            });
        }
        current = next;
        prompts.push(current);
        errors.push(current.dist(&p_stars[t + 1]));
    }
    Ok(TrajectoryResult {
        errors,
        prompts,
        failed_at: None,
    })
}
