//! Closed-loop pipelines and the drift stabilizer.
//!
//! Three ways to run a prompt loop over a world:
//!
//! * `Iterative` re-prompts from the default candidate's moments: the
//!   raw feedback loop, drift and all.
//! * `Stabilized` adds four components: attention-guided extraction,
//!   a proximal blend toward the anchor and the previous prompt,
//!   multi-criteria candidate scoring, and a soft keep/lost gate with
//!   anchor-based recovery.
//! * `Oracle` re-prompts from ground truth every iteration: the upper
//!   reference.
//!
//! Every iteration appends one trace record regardless of method, so
//! downstream comparisons pair records by (slice, object, iteration).

use serde::{Deserialize, Serialize};

use crate::dynamics::{proximal_update, LoopMap, PromptVector, ProximalConfig};
use crate::error::{Error, Result};
use crate::grid::{
    downsample_mask, mask_moments, soft_iou, upsample_attention, AttentionGrid, EpsilonPolicy,
    MaskGrid, Prompt,
};
use crate::metrics::{attention_entropy, dlr, metric_panel, MetricConfig, MetricPanel};
use crate::synth::{DecodeResult, World};
use crate::trace::TraceRecord;

/// Stabilizer knobs. The defaults are the reference operating point;
/// `attention_extraction` switches component 1 off so the proximal
/// term can be studied alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizerConfig {
    /// Pull toward the anchor prompt.
    pub lambda_a: f64,
    /// Pull toward the previous prompt.
    pub lambda_s: f64,
    /// Relative attention-mass threshold for the extracted box.
    pub extract_tau: f64,
    /// Scoring weight: candidate confidence.
    pub alpha: f64,
    /// Scoring weight: continuity with the last kept mask.
    pub beta: f64,
    /// Scoring weight (penalty): attention uncertainty.
    pub gamma: f64,
    /// Scoring weight (penalty): divergence from the anchor centroid.
    pub delta: f64,
    /// Scoring weight (penalty): attention leakage outside the mask.
    pub eta: f64,
    /// Keep gate: confidence above this keeps the object.
    pub tau_s: f64,
    /// Keep gate: drift below this keeps the object.
    pub tau_d: f64,
    /// Keep gate: temporal consistency above this keeps the object.
    pub tau_c: f64,
    /// Consecutive losses before the object is declared gone.
    pub k_max: usize,
    pub attention_extraction: bool,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            lambda_a: 0.4,
            lambda_s: 0.3,
            extract_tau: 0.15,
            alpha: 0.35,
            beta: 0.25,
            gamma: 0.15,
            delta: 0.15,
            eta: 0.10,
            tau_s: 0.30,
            tau_d: 0.20,
            tau_c: 0.70,
            k_max: 3,
            attention_extraction: true,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.extract_tau > 0.0 && self.extract_tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "extract_tau must lie in (0, 1), got {}",
                self.extract_tau
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "scoring weight {name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [("tau_s", self.tau_s), ("tau_d", self.tau_d), ("tau_c", self.tau_c)] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("threshold {name} must be finite")));
            }
        }
        if self.k_max == 0 {
            return Err(Error::InvalidConfig("k_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn proximal(&self) -> ProximalConfig {
        ProximalConfig {
            lambda_a: self.lambda_a,
            lambda_s: self.lambda_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMethod {
    Iterative,
    Stabilized,
    Oracle,
}

impl PipelineMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMethod::Iterative => "iterative",
            PipelineMethod::Stabilized => "stabilized",
            PipelineMethod::Oracle => "oracle",
        }
    }

    pub const ALL: [PipelineMethod; 3] = [
        PipelineMethod::Iterative,
        PipelineMethod::Stabilized,
        PipelineMethod::Oracle,
    ];
}

impl std::fmt::Display for PipelineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PipelineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iterative" => Ok(PipelineMethod::Iterative),
            "stabilized" => Ok(PipelineMethod::Stabilized),
            "oracle" => Ok(PipelineMethod::Oracle),
            other => Err(Error::InvalidInput(format!(
                "unknown method {other:?} (expected iterative, stabilized, or oracle)"
            ))),
        }
    }
}

/// Mutable per-object loop state. The anchor is set once and never
/// rewritten; everything else evolves with the iterations.
#[derive(Debug, Clone)]
pub struct ObjectState {
    pub anchor: Prompt,
    pub prompt: Prompt,
    pub lost_counter: usize,
    pub alive: bool,
    /// Mask/attention of the last kept iteration, at grid resolution;
    /// continuity scoring compares against these.
    pub last_mask: Option<MaskGrid>,
    pub last_attention: Option<AttentionGrid>,
}

impl ObjectState {
    pub fn new(anchor: Prompt) -> ObjectState {
        ObjectState {
            prompt: anchor.clone(),
            anchor,
            lost_counter: 0,
            alive: true,
            last_mask: None,
            last_attention: None,
        }
    }
}

/// Prompt read-out that trusts attention more than the raw mask: the
/// weights are the upsampled attention times the mask, the centroid is
/// their mean, and the box covers cells holding more than `tau` of the
/// peak weight. Falls back to plain mask moments when attention and
/// mask do not overlap at all.
pub fn attention_guided_extract(
    attention: &AttentionGrid,
    mask: &MaskGrid,
    tau: f64,
    eps: &EpsilonPolicy,
) -> Result<Prompt> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("extract tau must lie in (0, 1), got {tau}")));
    }
    let mass = mask.total_mass();
    if mass <= eps.eps {
        return Err(Error::EmptyMask { mass });
    }
    let (h, w) = (mask.height(), mask.width());
    let up = upsample_attention(attention, h, w)?;
    let weights: Vec<f64> = up
        .values()
        .iter()
        .zip(mask.values())
        .map(|(a, m)| a * m)
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= eps.eps {
        return mask_moments(mask, eps);
    }

    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut peak = 0.0f64;
    for (i, &v) in weights.iter().enumerate() {
        let x = (i % w) as f64;
        let y = (i / w) as f64;
        cx += x * v;
        cy += y * v;
        peak = peak.max(v);
    }
    cx /= total;
    cy /= total;

    let cut = tau * peak;
    let mut x1 = usize::MAX;
    let mut y1 = usize::MAX;
    let mut x2 = 0usize;
    let mut y2 = 0usize;
    for (i, &v) in weights.iter().enumerate() {
        if v > cut {
            let x = i % w;
            let y = i / w;
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x);
            y2 = y2.max(y);
        }
    }
    Prompt::new(
        (cx, cy),
        (x1 as f64, y1 as f64, x2 as f64, y2 as f64),
        (h as f64).hypot(w as f64),
    )
}

/// Picks the candidate maximizing
/// `alpha*conf + beta*cont - gamma*unc - delta*div - eta*leak`.
/// Ties go to the lowest index; a candidate with an empty mask is
/// never chosen. Returns the default index if every candidate is
/// empty.
pub fn score_candidates(
    decode: &DecodeResult,
    prev_mask: Option<&MaskGrid>,
    anchor: &Prompt,
    cfg: &StabilizerConfig,
    metric_cfg: &MetricConfig,
) -> Result<usize> {
    if decode.candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to score".into()));
    }
    let eps = &metric_cfg.eps;
    let (gh, gw) = (decode.attention.height(), decode.attention.width());
    // Uncertainty is a property of the shared attention map, identical
    // for all candidates; it shifts scores without reordering them.
    let (_, unc) = attention_entropy(&decode.attention, eps)?;

    let mut best: Option<(usize, f64)> = None;
    for (k, candidate) in decode.candidates.iter().enumerate() {
        let moments = match mask_moments(candidate, eps) {
            Ok(m) => m,
            Err(Error::EmptyMask { .. }) => continue,
            Err(e) => return Err(e),
        };
        let grid_mask = downsample_mask(candidate, gh, gw)?;
        let cont = match prev_mask {
            Some(prev) => soft_iou(&grid_mask, prev, eps)?,
            None => 0.0,
        };
        let (dlr_clamped, _) = dlr(&decode.attention, &grid_mask, &metric_cfg.dlr, eps)?;
        let leak = dlr_clamped / (1.0 + dlr_clamped);
        let dx = moments.centroid.0 - anchor.centroid.0;
        let dy = moments.centroid.1 - anchor.centroid.1;
        let div = (dx * dx + dy * dy).sqrt() / anchor.image_diag;
        let conf = decode.confidences[k];
        let score = cfg.alpha * conf + cfg.beta * cont
            - cfg.gamma * unc
            - cfg.delta * div
            - cfg.eta * leak;
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    Ok(best.map_or(decode.default_index, |(k, _)| k))
}

/// Keep/lost gate: an iteration is kept when the confidence is high,
/// or the drift (aad) low, or the temporal consistency (tcs) high.
/// A lost iteration bumps the counter; `k_max` consecutive losses kill
/// the object, and a kept one resets the counter. A dead object stays
/// dead.
pub fn soft_keep(
    state: &mut ObjectState,
    panel: &MetricPanel,
    confidence: f64,
    cfg: &StabilizerConfig,
) -> bool {
    if !state.alive {
        return false;
    }
    let keep = confidence > cfg.tau_s || panel.aad < cfg.tau_d || panel.tcs > cfg.tau_c;
    if keep {
        state.lost_counter = 0;
    } else {
        state.lost_counter += 1;
        if state.lost_counter >= cfg.k_max {
            state.alive = false;
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The object died (stabilized gate) or its ground truth left the
    /// frame (oracle) at this iteration; the trace ends there.
    Lost { at_iteration: usize },
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
}

/// Runs one object through one method for `iterations` steps, slice t
/// at iteration t. The anchor defaults to the slice-0 GT prompt;
/// `anchor_override` replaces it for the feedback methods (the oracle
/// is pinned to ground truth and ignores it).
pub fn run_pipeline(
    world: &World,
    object: usize,
    method: PipelineMethod,
    cfg: &StabilizerConfig,
    metric_cfg: &MetricConfig,
    iterations: usize,
    anchor_override: Option<&Prompt>,
) -> Result<PipelineRun> {
    cfg.validate()?;
    metric_cfg.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidInput("pipeline needs at least one iteration".into()));
    }
    if iterations > world.slices() {
        return Err(Error::InvalidInput(format!(
            "{iterations} iterations exceed the world's {} slices",
            world.slices()
        )));
    }

    let [h, w] = world.config().image;
    let eps = &metric_cfg.eps;
    let proximal = cfg.proximal();
    let anchor = match (method, anchor_override) {
        (PipelineMethod::Oracle, _) | (_, None) => world.gt_prompt(0, object)?,
        (_, Some(p)) => p.clone(),
    };
    let mut state = ObjectState::new(anchor);
    let mut records: Vec<TraceRecord> = Vec::with_capacity(iterations);
    let mut status = RunStatus::Completed;

    for t in 0..iterations {
        let prompt = match method {
            PipelineMethod::Oracle => match world.gt_prompt(t, object) {
                Ok(p) => p,
                Err(Error::ObjectAbsent { .. }) => {
                    status = RunStatus::Lost { at_iteration: t };
                    break;
                }
                Err(e) => return Err(e),
            },
            _ => state.prompt.clone(),
        };

        let decode = world.decode(t, &prompt)?;
        let chosen = match method {
            PipelineMethod::Stabilized => {
                score_candidates(&decode, state.last_mask.as_ref(), &state.anchor, cfg, metric_cfg)?
            }
            _ => decode.default_index,
        };
        let mask_pred = downsample_mask(&decode.candidates[chosen], world.config().grid[0], world.config().grid[1])?;
        let confidence = decode.confidences[chosen];
        let mask_gt = world.gt_mask_grid(t, object).ok();
        let iou = match &mask_gt {
            Some(gt) => Some(soft_iou(&mask_pred, gt, eps)?),
            None => None,
        };
        records.push(TraceRecord {
            method: method.to_string(),
            slice: t,
            object,
            iteration: t,
            prompt: prompt.clone(),
            attention: decode.attention.clone(),
            mask_pred,
            mask_gt,
            confidence,
            iou,
        });

        match method {
            PipelineMethod::Oracle => {}
            PipelineMethod::Iterative => {
                // Re-prompt from the default candidate; hold the prompt
                // when the mask vanished.
                match mask_moments(&decode.candidates[decode.default_index], eps) {
                    Ok(p) => state.prompt = p,
                    Err(Error::EmptyMask { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            PipelineMethod::Stabilized => {
                let default_mask = &decode.candidates[decode.default_index];
                let extracted = if cfg.attention_extraction {
                    attention_guided_extract(&decode.attention, default_mask, cfg.extract_tau, eps)
                } else {
                    mask_moments(default_mask, eps)
                };
                let p_hat = match extracted {
                    Ok(p) => p,
                    Err(Error::EmptyMask { .. }) => prompt.clone(),
                    Err(e) => return Err(e),
                };
                let blended = proximal_update(
                    &PromptVector::from_prompt(&p_hat, w, h),
                    &PromptVector::from_prompt(&state.anchor, w, h),
                    &PromptVector::from_prompt(&prompt, w, h),
                    &proximal,
                )
                .to_prompt(w, h)?;

                let record = records.last().expect("record just pushed");
                let prev = if t == 0 { None } else { records.get(records.len() - 2) };
                let panel = metric_panel(
                    record,
                    prev,
                    &records[0],
                    record.mask_gt.as_ref(),
                    None,
                    None,
                    (h, w),
                    metric_cfg,
                )?;
                if soft_keep(&mut state, &panel, confidence, cfg) {
                    state.prompt = blended;
                    let kept = records.last().expect("record just pushed");
                    state.last_mask = Some(kept.mask_pred.clone());
                    state.last_attention = Some(kept.attention.clone());
                } else if state.alive {
                    // Recovery: restart next iteration from the anchor.
                    state.prompt = state.anchor.clone();
                } else {
                    status = RunStatus::Lost { at_iteration: t };
                    break;
                }
            }
        }
    }

    Ok(PipelineRun { records, status })
}

/// One iteration of a method as a map on prompt vectors, for
/// finite-difference probing along a trajectory. Slice indices past
/// the world's last slice saturate, so long probes stay valid.
#[derive(Debug, Clone)]
pub struct MethodLoop<'a> {
    pub world: &'a World,
    pub object: usize,
    pub method: PipelineMethod,
    pub cfg: StabilizerConfig,
    pub metric_cfg: MetricConfig,
    pub anchor: Prompt,
}

impl LoopMap for MethodLoop<'_> {
    fn apply(&self, t: usize, p: &PromptVector) -> Result<PromptVector> {
        let [h, w] = self.world.config().image;
        let slice = t.min(self.world.slices() - 1);
        match self.method {
            PipelineMethod::Oracle => {
                let gt = self.world.gt_prompt(slice, self.object)?;
                Ok(PromptVector::from_prompt(&gt, w, h))
            }
            PipelineMethod::Iterative => {
                let prompt = p.to_prompt(w, h)?;
                let out = self.world.decode(slice, &prompt)?;
                let next =
                    mask_moments(&out.candidates[out.default_index], &self.metric_cfg.eps)?;
                Ok(PromptVector::from_prompt(&next, w, h))
            }
            PipelineMethod::Stabilized => {
                let prompt = p.to_prompt(w, h)?;
                let out = self.world.decode(slice, &prompt)?;
                let default_mask = &out.candidates[out.default_index];
                let p_hat = if self.cfg.attention_extraction {
                    attention_guided_extract(
                        &out.attention,
                        default_mask,
                        self.cfg.extract_tau,
                        &self.metric_cfg.eps,
                    )?
                } else {
                    mask_moments(default_mask, &self.metric_cfg.eps)?
                };
                Ok(proximal_update(
                    &PromptVector::from_prompt(&p_hat, w, h),
                    &PromptVector::from_prompt(&self.anchor, w, h),
                    p,
                    &self.cfg.proximal(),
                ))
            }
        }
    }
}
