//! Synthetic worlds with a closed-form decoder.
//!
//! A world holds drifting elliptical objects and distractor blobs on an
//! image lattice. Its decoder stands in for a promptable segmenter: it
//! returns token-resolution attention, candidate masks at image
//! resolution, confidences, and a feature grid that the ablation probe
//! can neutralize. Every output is a pure function of (config, slice,
//! prompt), so traces reproduce bit-for-bit.
//!
//! The functional forms, all documented here so tests can write
//! independent oracles against them:
//!
//! * Object features: each object or distractor contributes a Gaussian
//!   bump `exp(-dx²/(2·sx²) - dy²/(2·sy²))` with per-axis widths
//!   `WIDTH_FACTOR · radius`; distractor bumps are scaled by
//!   `min(pull, 1)`. The feature value Z is the sum of bumps.
//! * Attention: a Gaussian kernel of the same width centered at
//!   `c_att = c* + 2g·(c_p − c*) + Σ_i pull_i·(c_i − c_p)·w_i + noise`,
//!   multiplied by Z (unless feature coupling is off) and normalized.
//!   Here c* is the nearest object's center, w_i =
//!   `exp(-‖c_i − c_p‖²/(2·max(radius_i)²))`, and the noise is
//!   isotropic Gaussian with `noise_sigma` pixels per axis.
//! * Mask field: kernel times Z evaluated at pixel centers, clipped to
//!   [0, 1]. Candidate k keeps field values at or above the absolute
//!   threshold `0.75k/(K−1)` (a single candidate uses threshold 0).
//! * The width choice makes the product of the two equal-width
//!   Gaussians cross 0.5 exactly on the object ellipse, and the factor
//!   2 on the gain makes the mask-field centroid respond to the prompt
//!   centroid with slope exactly `gain`.
//! * Confidences: `(1 − k/(2K)) · exp(-‖c_p − c*‖²/(2·(2·r̄)²))` with
//!   r̄ the target's mean radius, so they decay with prompt distance
//!   and are strictly decreasing in k.
//! * Drift: object centers move along
//!   `(a·sin(2πt/τ), a·(1 − cos(2πt/τ)))`.

use nalgebra::{Matrix6, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{LoopMap, PromptVector};
use crate::error::{Error, Result};
use crate::grid::{
    downsample_mask, normalize_attention, AttentionGrid, EpsilonPolicy, MaskGrid, Prompt,
};
use crate::metrics::{DecoderOracle, OracleDecode};

/// Width of every Gaussian bump relative to the object radius, chosen
/// as 1/sqrt(ln 2) so the attention-times-feature product falls to 0.5
/// exactly at the ellipse boundary.
pub const WIDTH_FACTOR: f64 = 1.201_122_408_786_449_8;

/// The kernel center moves twice as far as the prompt so that the
/// product field's centroid moves with slope exactly `gain`.
const KERNEL_GAIN_FACTOR: f64 = 2.0;

/// Feature bumps are evaluated only within this many widths of their
/// center; beyond it the values are below 1.3e-14 of the peak.
const SUPPORT_WIDTHS: f64 = 8.0;

/// The attention kernel gets a much wider evaluation window. A prompt
/// pushed far past an object must still see a finite, moving tail at
/// the frame edge, the way a softmax never goes exactly flat; cutting
/// the kernel at the feature window would snap runaway loops to a
/// degenerate uniform map that scores perfect temporal consistency.
/// 35 widths stays comfortably above f64 underflow (exp(-612)).
const KERNEL_SUPPORT_WIDTHS: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSpec {
    /// Pixels of peak displacement along the drift path.
    pub amplitude: f64,
    /// Iterations per drift cycle.
    pub period: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec { amplitude: 0.0, period: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Center (x, y) in pixels at slice 0.
    pub center: [f64; 2],
    /// Per-axis radii (rx, ry) in pixels.
    pub radii: [f64; 2],
    #[serde(default)]
    pub drift: DriftSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Pull strength toward this blob exerted on the attention center;
    /// also scales its feature bump (capped at 1).
    pub pull: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(default = "default_slices")]
    pub slices: usize,
    /// Image (height, width) in pixels.
    #[serde(default = "default_image")]
    pub image: [usize; 2],
    /// Token grid (height, width).
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
    /// Designed slope of the extracted centroid with respect to the
    /// prompt centroid.
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Isotropic noise on the attention center, in pixels.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_candidate_count")]
    pub candidate_count: usize,
    /// When false the decoder ignores the feature grid entirely, which
    /// makes token ablation a no-op.
    #[serde(default = "default_feature_coupling")]
    pub feature_coupling: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_slices() -> usize {
    10
}
fn default_image() -> [usize; 2] {
    [256, 256]
}
fn default_grid() -> [usize; 2] {
    [64, 64]
}
fn default_gain() -> f64 {
    1.2
}
fn default_noise_sigma() -> f64 {
    0.5
}
fn default_candidate_count() -> usize {
    3
}
fn default_feature_coupling() -> bool {
    true
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::InvalidConfig("world needs at least one slice".into()));
        }
        let [h, w] = self.image;
        let [hf, wf] = self.grid;
        if h == 0 || w == 0 || hf == 0 || wf == 0 {
            return Err(Error::InvalidConfig("image and grid dimensions must be positive".into()));
        }
        if hf > h || wf > w {
            return Err(Error::InvalidConfig(format!(
                "token grid {hf}x{wf} exceeds image {h}x{w}"
            )));
        }
        if self.objects.is_empty() {
            return Err(Error::InvalidConfig("world needs at least one object".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.center.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("object {i} center is not finite")));
            }
            if !o.radii.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "object {i} radii must be positive, got {:?}",
                    o.radii
                )));
            }
            if !(o.drift.amplitude.is_finite() && o.drift.amplitude >= 0.0) {
                return Err(Error::InvalidConfig(format!("object {i} drift amplitude invalid")));
            }
            if !(o.drift.period.is_finite() && o.drift.period > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "object {i} drift period must be positive"
                )));
            }
        }
        for (i, d) in self.distractors.iter().enumerate() {
            if !d.center.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("distractor {i} center is not finite")));
            }
            if !d.radii.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidConfig(format!("distractor {i} radii must be positive")));
            }
            if !(d.pull.is_finite() && d.pull >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "distractor {i} pull must be non-negative"
                )));
            }
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(Error::InvalidConfig(format!("gain must be non-negative, got {}", self.gain)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be non-negative".into()));
        }
        if self.candidate_count == 0 {
            return Err(Error::InvalidConfig("need at least one candidate".into()));
        }
        Ok(())
    }
}

/// One decoder call's outputs.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Normalized attention at token resolution.
    pub attention: AttentionGrid,
    /// Candidate masks at image resolution, soft-valued.
    pub candidates: Vec<MaskGrid>,
    pub confidences: Vec<f64>,
    /// Token features the decoder consumed (ablation target), row-major
    /// at grid resolution.
    pub feature_grid: Vec<f64>,
    /// Highest-confidence candidate.
    pub default_index: usize,
    /// Whether the prompt centroid had to be clamped into the image.
    pub clamped: bool,
}

/// An immutable world; all methods are read-only and deterministic.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    image_diag: f64,
    /// Per-slice feature field at image resolution.
    features_image: Vec<Vec<f64>>,
    /// Per-slice feature field at token resolution.
    features_grid: Vec<Vec<f64>>,
    /// Per-slice mean of the token features (the ablation filler).
    feature_means: Vec<f64>,
}

pub fn build_world(cfg: WorldConfig) -> Result<World> {
    World::new(cfg)
}

/// Center of token/pixel `i` along an axis of `n` cells spanning
/// `extent` pixels, in pixel coordinates.
fn cell_center(i: usize, n: usize, extent: usize) -> f64 {
    (i as f64 + 0.5) * extent as f64 / n as f64 - 0.5
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Adds `amplitude * bump` into `field`, visiting only cells within
/// SUPPORT_WIDTHS of the center. `n_y`/`n_x` are the field dimensions,
/// `extent_y`/`extent_x` the image extent those cells span.
#[allow(clippy::too_many_arguments)]
fn add_bump(
    field: &mut [f64],
    n_y: usize,
    n_x: usize,
    extent_y: usize,
    extent_x: usize,
    center: (f64, f64),
    sigma: (f64, f64),
    amplitude: f64,
    support: f64,
) {
    if amplitude == 0.0 {
        return;
    }
    let (cx, cy) = center;
    let (sx, sy) = sigma;
    let scale_x = n_x as f64 / extent_x as f64;
    let scale_y = n_y as f64 / extent_y as f64;
    // Invert cell_center to bound the index window.
    let to_ix = |px: f64| (px + 0.5) * scale_x - 0.5;
    let to_iy = |py: f64| (py + 0.5) * scale_y - 0.5;
    let x_lo = (to_ix(cx - support * sx).floor().max(0.0)) as usize;
    let x_hi = (to_ix(cx + support * sx).ceil().min((n_x - 1) as f64)) as usize;
    let y_lo = (to_iy(cy - support * sy).floor().max(0.0)) as usize;
    let y_hi = (to_iy(cy + support * sy).ceil().min((n_y - 1) as f64)) as usize;
    if to_ix(cx + support * sx) < 0.0 || to_iy(cy + support * sy) < 0.0 {
        return;
    }
    for iy in y_lo..=y_hi {
        let py = cell_center(iy, n_y, extent_y);
        let dy = (py - cy) / sy;
        for ix in x_lo..=x_hi {
            let px = cell_center(ix, n_x, extent_x);
            let dx = (px - cx) / sx;
            field[iy * n_x + ix] += amplitude * (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<World> {
        cfg.validate()?;
        let [h, w] = cfg.image;
        let [hf, wf] = cfg.grid;
        let image_diag = (h as f64).hypot(w as f64);

        let mut features_image = Vec::with_capacity(cfg.slices);
        let mut features_grid = Vec::with_capacity(cfg.slices);
        let mut feature_means = Vec::with_capacity(cfg.slices);
        for t in 0..cfg.slices {
            let mut img = vec![0.0; h * w];
            let mut grid = vec![0.0; hf * wf];
            for o in &cfg.objects {
                let c = object_center_at(o, t);
                let sigma = (WIDTH_FACTOR * o.radii[0], WIDTH_FACTOR * o.radii[1]);
                add_bump(&mut img, h, w, h, w, c, sigma, 1.0, SUPPORT_WIDTHS);
                add_bump(&mut grid, hf, wf, h, w, c, sigma, 1.0, SUPPORT_WIDTHS);
            }
            for d in &cfg.distractors {
                let c = (d.center[0], d.center[1]);
                let sigma = (WIDTH_FACTOR * d.radii[0], WIDTH_FACTOR * d.radii[1]);
                let amp = d.pull.min(1.0);
                add_bump(&mut img, h, w, h, w, c, sigma, amp, SUPPORT_WIDTHS);
                add_bump(&mut grid, hf, wf, h, w, c, sigma, amp, SUPPORT_WIDTHS);
            }
            feature_means.push(grid.iter().sum::<f64>() / grid.len() as f64);
            features_image.push(img);
            features_grid.push(grid);
        }

        Ok(World {
            cfg,
            image_diag,
            features_image,
            features_grid,
            feature_means,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn slices(&self) -> usize {
        self.cfg.slices
    }

    pub fn object_count(&self) -> usize {
        self.cfg.objects.len()
    }

    pub fn image_diag(&self) -> f64 {
        self.image_diag
    }

    /// Feature values at the attention token centers for one slice,
    /// row-major. Prompt-independent, so correlation against any
    /// attention map from the same slice is well defined.
    pub fn feature_grid(&self, t: usize) -> Result<&[f64]> {
        self.check_slice(t)?;
        Ok(&self.features_grid[t])
    }

    fn check_slice(&self, t: usize) -> Result<()> {
        if t >= self.cfg.slices {
            return Err(Error::InvalidInput(format!(
                "slice {t} out of range (world has {})",
                self.cfg.slices
            )));
        }
        Ok(())
    }

    /// Analytic center of an object at slice `t` (drift path applied).
    pub fn object_center(&self, t: usize, object: usize) -> Result<(f64, f64)> {
        self.check_slice(t)?;
        let o = self
            .cfg
            .objects
            .get(object)
            .ok_or(Error::ObjectAbsent { object, slice: t })?;
        Ok(object_center_at(o, t))
    }

    /// Ground-truth binary mask at image resolution: pixels whose
    /// centers fall inside the (drifted) ellipse.
    pub fn gt_mask_image(&self, t: usize, object: usize) -> Result<MaskGrid> {
        self.check_slice(t)?;
        let o = self
            .cfg
            .objects
            .get(object)
            .ok_or(Error::ObjectAbsent { object, slice: t })?;
        let (cx, cy) = object_center_at(o, t);
        let [h, w] = self.cfg.image;
        let (rx, ry) = (o.radii[0], o.radii[1]);
        let mut values = vec![0.0; h * w];
        for y in 0..h {
            let dy = (y as f64 - cy) / ry;
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                if dx * dx + dy * dy <= 1.0 {
                    values[y * w + x] = 1.0;
                }
            }
        }
        MaskGrid::new(values, h, w)
    }

    /// Ground-truth mask area-downsampled to token resolution.
    pub fn gt_mask_grid(&self, t: usize, object: usize) -> Result<MaskGrid> {
        let full = self.gt_mask_image(t, object)?;
        downsample_mask(&full, self.cfg.grid[0], self.cfg.grid[1])
    }

    /// Ground-truth-derived prompt: centroid and tight box of the GT
    /// mask. An object whose ellipse covers no pixel center is absent.
    pub fn gt_prompt(&self, t: usize, object: usize) -> Result<Prompt> {
        let mask = self.gt_mask_image(t, object)?;
        let eps = EpsilonPolicy::default();
        crate::grid::mask_moments(&mask, &eps).map_err(|e| match e {
            Error::EmptyMask { .. } => Error::ObjectAbsent { object, slice: t },
            other => other,
        })
    }

    pub fn decode(&self, t: usize, prompt: &Prompt) -> Result<DecodeResult> {
        self.decode_inner(t, prompt, None)
    }

    /// Re-decodes with the listed tokens' features replaced by the
    /// slice's mean feature, returning the default candidate at image
    /// resolution.
    pub fn ablated_decode(&self, t: usize, prompt: &Prompt, ablated: &[usize]) -> Result<MaskGrid> {
        let tokens = self.cfg.grid[0] * self.cfg.grid[1];
        if let Some(&bad) = ablated.iter().find(|&&i| i >= tokens) {
            return Err(Error::InvalidInput(format!(
                "ablated token {bad} outside the {tokens}-token grid"
            )));
        }
        let out = self.decode_inner(t, prompt, Some(ablated))?;
        Ok(out.candidates.into_iter().nth(out.default_index).expect("default candidate exists"))
    }

    fn decode_inner(&self, t: usize, prompt: &Prompt, ablated: Option<&[usize]>) -> Result<DecodeResult> {
        self.check_slice(t)?;
        let [h, w] = self.cfg.image;
        let [hf, wf] = self.cfg.grid;

        // Prompts wandering off the frame are clamped, not rejected:
        // divergent loops must stay observable.
        let raw = prompt.centroid;
        let cx = raw.0.clamp(0.0, (w - 1) as f64);
        let cy = raw.1.clamp(0.0, (h - 1) as f64);
        let clamped = cx != raw.0 || cy != raw.1;

        // Target: nearest object center, ties to the lowest index.
        let mut target = 0usize;
        let mut best = f64::INFINITY;
        for (i, o) in self.cfg.objects.iter().enumerate() {
            let (ox, oy) = object_center_at(o, t);
            let d2 = (ox - cx) * (ox - cx) + (oy - cy) * (oy - cy);
            if d2 < best {
                best = d2;
                target = i;
            }
        }
        let target_spec = &self.cfg.objects[target];
        let (tx, ty) = object_center_at(target_spec, t);

        // Attention center: anchored at the target, pushed by the
        // prompt offset at twice the designed gain, pulled by
        // distractors, jittered by noise.
        let g_kernel = KERNEL_GAIN_FACTOR * self.cfg.gain;
        let mut ax = tx + g_kernel * (cx - tx);
        let mut ay = ty + g_kernel * (cy - ty);
        for d in &self.cfg.distractors {
            let dx = d.center[0] - cx;
            let dy = d.center[1] - cy;
            let width = d.radii[0].max(d.radii[1]);
            let wgt = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            ax += d.pull * dx * wgt;
            ay += d.pull * dy * wgt;
        }
        let mut rng = self.decode_rng(t, cx, cy);
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        ax += self.cfg.noise_sigma * n1;
        ay += self.cfg.noise_sigma * n2;

        let sigma = (
            WIDTH_FACTOR * target_spec.radii[0],
            WIDTH_FACTOR * target_spec.radii[1],
        );

        // Token features, with the ablation filler substituted first so
        // both the attention and the mask see the ablated features.
        let z_grid_slice = &self.features_grid[t];
        let mean_z = self.feature_means[t];
        let mut feature_grid = z_grid_slice.clone();
        if let Some(tokens) = ablated {
            for &i in tokens {
                feature_grid[i] = mean_z;
            }
        }

        // Attention: kernel times features at token centers.
        let mut att_raw = vec![0.0; hf * wf];
        add_bump(&mut att_raw, hf, wf, h, w, (ax, ay), sigma, 1.0, KERNEL_SUPPORT_WIDTHS);
        if self.cfg.feature_coupling {
            for (a, z) in att_raw.iter_mut().zip(&feature_grid) {
                *a *= z;
            }
        }
        let eps = EpsilonPolicy::default();
        let attention = normalize_attention(&AttentionGrid::new(att_raw, hf, wf)?, &eps)?;

        // Mask field at image resolution.
        let mut field = vec![0.0; h * w];
        add_bump(&mut field, h, w, h, w, (ax, ay), sigma, 1.0, KERNEL_SUPPORT_WIDTHS);
        if self.cfg.feature_coupling {
            let z_img = &self.features_image[t];
            match ablated {
                None => {
                    for (f, z) in field.iter_mut().zip(z_img) {
                        *f *= z;
                    }
                }
                Some(tokens) => {
                    let ablated_flags = {
                        let mut flags = vec![false; hf * wf];
                        for &i in tokens {
                            flags[i] = true;
                        }
                        flags
                    };
                    for y in 0..h {
                        let ty_ = y * hf / h;
                        for x in 0..w {
                            let tx_ = x * wf / w;
                            let i = y * w + x;
                            let z = if ablated_flags[ty_ * wf + tx_] { mean_z } else { z_img[i] };
                            field[i] *= z;
                        }
                    }
                }
            }
        }
        for f in &mut field {
            *f = f.clamp(0.0, 1.0);
        }

        // Candidates: soft values above K fixed thresholds.
        let k_count = self.cfg.candidate_count;
        let thresholds: Vec<f64> = if k_count == 1 {
            vec![0.0]
        } else {
            (0..k_count).map(|k| 0.75 * k as f64 / (k_count - 1) as f64).collect()
        };
        let mut candidates = Vec::with_capacity(k_count);
        for &theta in &thresholds {
            let values: Vec<f64> =
                field.iter().map(|&v| if v >= theta { v } else { 0.0 }).collect();
            candidates.push(MaskGrid::new(values, h, w)?);
        }

        // Confidences decay with prompt distance from the target.
        let r_bar = 0.5 * (target_spec.radii[0] + target_spec.radii[1]);
        let conf_sigma = 2.0 * r_bar;
        let d2 = (cx - tx) * (cx - tx) + (cy - ty) * (cy - ty);
        let proximity = (-d2 / (2.0 * conf_sigma * conf_sigma)).exp();
        let confidences: Vec<f64> = (0..k_count)
            .map(|k| (1.0 - k as f64 / (2.0 * k_count as f64)) * proximity)
            .collect();
        let default_index = confidences
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);

        Ok(DecodeResult {
            attention,
            candidates,
            confidences,
            feature_grid,
            default_index,
            clamped,
        })
    }

    /// Decode noise stream: a pure function of (seed, slice, clamped
    /// prompt centroid), so identical calls draw identical noise no
    /// matter the execution order.
    fn decode_rng(&self, t: usize, cx: f64, cy: f64) -> ChaCha8Rng {
        let mut state = splitmix64(self.cfg.seed ^ 0x5eed_ba5e_0fda_7a5e);
        state = splitmix64(state ^ t as u64);
        state = splitmix64(state ^ cx.to_bits());
        state = splitmix64(state ^ cy.to_bits());
        ChaCha8Rng::seed_from_u64(state)
    }
}

fn object_center_at(o: &ObjectSpec, t: usize) -> (f64, f64) {
    let a = o.drift.amplitude;
    if a == 0.0 {
        return (o.center[0], o.center[1]);
    }
    let phase = 2.0 * std::f64::consts::PI * t as f64 / o.drift.period;
    (
        o.center[0] + a * phase.sin(),
        o.center[1] + a * (1.0 - phase.cos()),
    )
}

/// A world slice as seen by the metric layer's ablation probe: masks
/// are reported at token resolution.
#[derive(Debug, Clone, Copy)]
pub struct SliceOracle<'a> {
    world: &'a World,
    slice: usize,
}

impl<'a> SliceOracle<'a> {
    pub fn new(world: &'a World, slice: usize) -> Result<Self> {
        world.check_slice(slice)?;
        Ok(SliceOracle { world, slice })
    }
}

impl DecoderOracle for SliceOracle<'_> {
    fn decode(&self, prompt: &Prompt) -> Result<OracleDecode> {
        let out = self.world.decode(self.slice, prompt)?;
        let [hf, wf] = self.world.cfg.grid;
        let mask = downsample_mask(&out.candidates[out.default_index], hf, wf)?;
        Ok(OracleDecode {
            attention: out.attention,
            mask,
            confidences: out.confidences,
        })
    }

    fn ablated_decode(&self, prompt: &Prompt, ablated_tokens: &[usize]) -> Result<MaskGrid> {
        let full = self.world.ablated_decode(self.slice, prompt, ablated_tokens)?;
        let [hf, wf] = self.world.cfg.grid;
        downsample_mask(&full, hf, wf)
    }
}

/// Exact affine dynamics fixture: Φ(t, p) = A·p + b for all t.
#[derive(Debug, Clone)]
pub struct LinearLoop {
    pub a: Matrix6<f64>,
    pub b: Vector6<f64>,
}

pub fn linear_loop(a: Matrix6<f64>, b: Vector6<f64>) -> Result<LinearLoop> {
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("linear loop needs finite coefficients".into()));
    }
    Ok(LinearLoop { a, b })
}

impl LinearLoop {
    /// Scalar gain toward/away from a fixed point: A = gain·I and
    /// b = (1 − gain)·p*, so p* is the loop's fixed point.
    pub fn isotropic(gain: f64, fixed_point: &PromptVector) -> LinearLoop {
        let p = Vector6::from_row_slice(&fixed_point.0);
        LinearLoop {
            a: Matrix6::identity() * gain,
            b: p * (1.0 - gain),
        }
    }
}

impl LoopMap for LinearLoop {
    fn apply(&self, _t: usize, p: &PromptVector) -> Result<PromptVector> {
        let v = self.a * Vector6::from_row_slice(&p.0) + self.b;
        let mut out = [0.0; 6];
        out.copy_from_slice(v.as_slice());
        Ok(PromptVector(out))
    }
}
