//! Grid primitives shared by every metric and pipeline: attention maps,
//! soft masks, prompts, and the numerical conventions they obey.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! ```text
//! storage      row-major, dense f64, height x width
//! pixel (x,y)  column x, row y; integer coordinates sit at cell centers
//! attention    normalized form: min -> 0, max -> 1, then divided by the
//!              sum, so the grid is a probability distribution
//! masks        soft occupancy in [0, 1]
//! bboxes       (x1, y1, x2, y2) with x1 <= x2, y1 <= y2, pixel units
//! ```
//!
//! A single epsilon policy (default 1e-8) guards denominators and
//! logarithms; nothing else in the crate invents its own floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used in every denominator and logarithm guard in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPolicy {
    pub eps: f64,
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        EpsilonPolicy { eps: 1e-8 }
    }
}

impl EpsilonPolicy {
    pub fn new(eps: f64) -> Result<Self> {
        if !eps.is_finite() || eps <= 0.0 || eps > 1e-4 {
            return Err(Error::InvalidInput(format!(
                "eps must lie in (0, 1e-4], got {eps:e}"
            )));
        }
        Ok(EpsilonPolicy { eps })
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    let expect = height
        .checked_mul(width)
        .ok_or_else(|| Error::InvalidInput("grid dimensions overflow".into()))?;
    if expect != len {
        return Err(Error::InvalidInput(format!(
            "value buffer holds {len} cells, dimensions say {height}x{width} = {expect}"
        )));
    }
    Ok(())
}

/// Dense attention map. `normalized` records whether the grid has passed
/// through [`normalize_attention`] (non-negative, sums to one).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    values: Vec<f64>,
    height: usize,
    width: usize,
    normalized: bool,
}

impl AttentionGrid {
    /// Wraps a raw (not yet normalized) attention buffer.
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "attention grid contains non-finite value {v}"
            )));
        }
        Ok(AttentionGrid {
            values,
            height,
            width,
            normalized: false,
        })
    }

    /// Rehydrates a grid from storage, trusting a recorded normalization
    /// flag. Storage is f32, so a normalized grid is only required to sum
    /// to one within 1e-3 here; callers that need the tight invariant
    /// re-divide via [`AttentionGrid::renormalized`].
    pub fn from_stored(values: Vec<f64>, height: usize, width: usize, normalized: bool) -> Result<Self> {
        let grid = AttentionGrid::new(values, height, width)?;
        if normalized {
            let mut sum = 0.0;
            for v in &grid.values {
                if *v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "stored normalized attention holds negative value {v}"
                    )));
                }
                sum += *v;
            }
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::InvalidInput(format!(
                    "stored normalized attention sums to {sum}, expected 1 within 1e-3"
                )));
            }
        }
        Ok(AttentionGrid {
            normalized,
            ..grid
        })
    }

    /// Exact re-division by the current sum. Used to absorb the f32
    /// quantization a trip through trace storage introduces.
    pub fn renormalized(&self) -> Result<AttentionGrid> {
        let sum: f64 = self.values.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cannot renormalize attention with non-positive sum {sum}"
            )));
        }
        let values = self.values.iter().map(|v| v / sum).collect();
        Ok(AttentionGrid {
            values,
            height: self.height,
            width: self.width,
            normalized: true,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Mass centroid in grid coordinates (x = column, y = row).
    pub fn mass_centroid(&self) -> Result<(f64, f64)> {
        let mass: f64 = self.values.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidInput(format!(
                "attention mass {mass} has no centroid"
            )));
        }
        let mut mx = 0.0;
        let mut my = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                mx += v * c as f64;
                my += v * r as f64;
            }
        }
        Ok((mx / mass, my / mass))
    }

    /// Circular shift by whole cells (positive dx shifts content right,
    /// positive dy shifts content down). Wraps around; mass is preserved
    /// exactly, so normalization flags survive.
    pub fn circular_shift(&self, dx: isize, dy: isize) -> AttentionGrid {
        let h = self.height as isize;
        let w = self.width as isize;
        let mut values = vec![0.0; self.values.len()];
        for r in 0..h {
            for c in 0..w {
                let nr = (r + dy).rem_euclid(h) as usize;
                let nc = (c + dx).rem_euclid(w) as usize;
                values[nr * self.width + nc] = self.values[(r * w + c) as usize];
            }
        }
        AttentionGrid {
            values,
            height: self.height,
            width: self.width,
            normalized: self.normalized,
        }
    }
}

/// Dense soft mask with occupancy values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl MaskGrid {
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "mask value {v} outside [0, 1]"
            )));
        }
        Ok(MaskGrid {
            values,
            height,
            width,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// A decoder prompt: centroid plus bounding box, both in pixels, together
/// with the diagonal of the image they live in (used for normalization).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prompt {
    pub centroid: (f64, f64),
    pub bbox: (f64, f64, f64, f64),
    pub image_diag: f64,
}

impl Prompt {
    pub fn new(centroid: (f64, f64), bbox: (f64, f64, f64, f64), image_diag: f64) -> Result<Self> {
        let fields = [centroid.0, centroid.1, bbox.0, bbox.1, bbox.2, bbox.3, image_diag];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("prompt holds non-finite field".into()));
        }
        if bbox.0 > bbox.2 || bbox.1 > bbox.3 {
            return Err(Error::InvalidInput(format!(
                "prompt bbox corners unordered: ({}, {}, {}, {})",
                bbox.0, bbox.1, bbox.2, bbox.3
            )));
        }
        if image_diag <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "image diagonal must be positive, got {image_diag}"
            )));
        }
        Ok(Prompt {
            centroid,
            bbox,
            image_diag,
        })
    }
}

/// Min-max normalization (min -> 0, max -> 1) followed by exact division
/// by the sum, so the result is a probability distribution over cells.
/// A constant grid (max - min below eps) becomes uniform.
pub fn normalize_attention(raw: &AttentionGrid, eps: &EpsilonPolicy) -> Result<AttentionGrid> {
    let values = raw.values();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(*v);
        max = max.max(*v);
    }
    let n = values.len();
    if max - min < eps.eps {
        return Ok(AttentionGrid {
            values: vec![1.0 / n as f64; n],
            height: raw.height,
            width: raw.width,
            normalized: true,
        });
    }
    let range = max - min;
    let shifted: Vec<f64> = values.iter().map(|v| (v - min) / range).collect();
    let sum: f64 = shifted.iter().sum();
    let values = shifted.iter().map(|v| v / sum).collect();
    Ok(AttentionGrid {
        values,
        height: raw.height,
        width: raw.width,
        normalized: true,
    })
}

/// Jensen-Shannon divergence in base-2 logs, so the result lives in
/// [0, 1]. Both inputs must be normalized and share dimensions. Terms
/// with zero probability contribute zero; the mixture denominator is
/// floored at the smallest positive double purely as an underflow guard,
/// which leaves every representable case untouched.
pub fn js_divergence(p: &AttentionGrid, q: &AttentionGrid, _eps: &EpsilonPolicy) -> Result<f64> {
    if !p.is_normalized() || !q.is_normalized() {
        return Err(Error::InvalidInput(
            "js_divergence requires normalized attention grids".into(),
        ));
    }
    if p.height() != q.height() || p.width() != q.width() {
        return Err(Error::InvalidInput(format!(
            "js_divergence dimension mismatch: {}x{} vs {}x{}",
            p.height(),
            p.width(),
            q.height(),
            q.width()
        )));
    }
    let mut acc = 0.0;
    for (&pv, &qv) in p.values().iter().zip(q.values()) {
        let r = (0.5 * (pv + qv)).max(f64::MIN_POSITIVE);
        if pv > 0.0 {
            acc += 0.5 * pv * (pv / r).log2();
        }
        if qv > 0.0 {
            acc += 0.5 * qv * (qv / r).log2();
        }
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// How [`downsample_mask_with`] assigns source cells to target cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Area-weighted mean occupancy of the source region (default).
    Area,
    /// Nearest source cell to the target cell center; kept as a knob for
    /// sensitivity checks.
    Nearest,
}

/// Area-weighted downsampling; see [`downsample_mask_with`].
pub fn downsample_mask(full: &MaskGrid, target_h: usize, target_w: usize) -> Result<MaskGrid> {
    downsample_mask_with(full, target_h, target_w, DownsampleMode::Area)
}

/// Reduces a mask to `target_h x target_w`. In area mode each target cell
/// is the area-weighted mean occupancy of its source region, which
/// preserves mean occupancy exactly for any size ratio. Target dimensions
/// must not exceed the source dimensions.
pub fn downsample_mask_with(
    full: &MaskGrid,
    target_h: usize,
    target_w: usize,
    mode: DownsampleMode,
) -> Result<MaskGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput("downsample target must be non-empty".into()));
    }
    if target_h > full.height() || target_w > full.width() {
        return Err(Error::InvalidInput(format!(
            "downsample target {}x{} exceeds source {}x{}",
            target_h,
            target_w,
            full.height(),
            full.width()
        )));
    }
    let sy = full.height() as f64 / target_h as f64;
    let sx = full.width() as f64 / target_w as f64;
    let mut values = Vec::with_capacity(target_h * target_w);
    match mode {
        DownsampleMode::Area => {
            for i in 0..target_h {
                let y0 = i as f64 * sy;
                let y1 = (i + 1) as f64 * sy;
                let r0 = y0.floor() as usize;
                let r1 = (y1.ceil() as usize).min(full.height());
                for j in 0..target_w {
                    let x0 = j as f64 * sx;
                    let x1 = (j + 1) as f64 * sx;
                    let c0 = x0.floor() as usize;
                    let c1 = (x1.ceil() as usize).min(full.width());
                    let mut acc = 0.0;
                    let mut area = 0.0;
                    for r in r0..r1 {
                        let oy = (y1.min((r + 1) as f64) - y0.max(r as f64)).max(0.0);
                        if oy == 0.0 {
                            continue;
                        }
                        for c in c0..c1 {
                            let ox = (x1.min((c + 1) as f64) - x0.max(c as f64)).max(0.0);
                            if ox == 0.0 {
                                continue;
                            }
                            let w = oy * ox;
                            acc += w * full.get(r, c);
                            area += w;
                        }
                    }
                    values.push((acc / area).clamp(0.0, 1.0));
                }
            }
        }
        DownsampleMode::Nearest => {
            for i in 0..target_h {
                let r = (((i as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(full.height() - 1);
                for j in 0..target_w {
                    let c = (((j as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(full.width() - 1);
                    values.push(full.get(r, c));
                }
            }
        }
    }
    MaskGrid::new(values, target_h, target_w)
}

/// Bilinear upsampling with the half-pixel (corner alignment off)
/// convention: target cell (i, j) samples the source at
/// `((j + 0.5) * w_src / w_dst - 0.5, (i + 0.5) * h_src / h_dst - 0.5)`,
/// clamped to the source extent. Target dimensions must be at least the
/// source dimensions.
pub fn upsample_attention(f: &AttentionGrid, target_h: usize, target_w: usize) -> Result<AttentionGrid> {
    if target_h < f.height() || target_w < f.width() {
        return Err(Error::InvalidInput(format!(
            "upsample target {}x{} underflows source {}x{}",
            target_h,
            target_w,
            f.height(),
            f.width()
        )));
    }
    let sy = f.height() as f64 / target_h as f64;
    let sx = f.width() as f64 / target_w as f64;
    let mut values = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (f.height() - 1) as f64);
        let r0 = y.floor() as usize;
        let r1 = (r0 + 1).min(f.height() - 1);
        let fy = y - r0 as f64;
        for j in 0..target_w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (f.width() - 1) as f64);
            let c0 = x.floor() as usize;
            let c1 = (c0 + 1).min(f.width() - 1);
            let fx = x - c0 as f64;
            let top = (1.0 - fx) * f.get(r0, c0) + fx * f.get(r0, c1);
            let bottom = (1.0 - fx) * f.get(r1, c0) + fx * f.get(r1, c1);
            values.push((1.0 - fy) * top + fy * bottom);
        }
    }
    AttentionGrid::new(values, target_h, target_w)
}

/// Intensity-weighted centroid plus the tight bounding box of the
/// binarized (> 0.5) support. Returns an empty-mask error when total mass
/// is at or below eps. When no cell clears the 0.5 binarization threshold
/// the box falls back to the tight box over all strictly positive cells,
/// so weak soft masks still yield a usable prompt. The prompt's diagonal
/// is taken from the mask's own dimensions.
pub fn mask_moments(m: &MaskGrid, eps: &EpsilonPolicy) -> Result<Prompt> {
    let mass = m.total_mass();
    if mass <= eps.eps {
        return Err(Error::EmptyMask { mass });
    }
    let mut mx = 0.0;
    let mut my = 0.0;
    let mut hard = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut soft = hard;
    let mut any_hard = false;
    for r in 0..m.height() {
        for c in 0..m.width() {
            let v = m.get(r, c);
            if v <= 0.0 {
                continue;
            }
            let (x, y) = (c as f64, r as f64);
            mx += v * x;
            my += v * y;
            soft = (soft.0.min(x), soft.1.min(y), soft.2.max(x), soft.3.max(y));
            if v > 0.5 {
                any_hard = true;
                hard = (hard.0.min(x), hard.1.min(y), hard.2.max(x), hard.3.max(y));
            }
        }
    }
    let bbox = if any_hard { hard } else { soft };
    let diag = (m.width() as f64).hypot(m.height() as f64);
    Prompt::new((mx / mass, my / mass), bbox, diag)
}

/// Soft intersection-over-union: sum of pointwise minima over sum of
/// pointwise maxima. Two empty masks score zero.
pub fn soft_iou(a: &MaskGrid, b: &MaskGrid, eps: &EpsilonPolicy) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidInput(format!(
            "soft_iou dimension mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&av, &bv) in a.values().iter().zip(b.values()) {
        inter += av.min(bv);
        union += av.max(bv);
    }
    Ok(inter / (union + eps.eps))
}

/// IoU of the masks binarized at `threshold` (strictly greater).
pub fn binary_iou(a: &MaskGrid, b: &MaskGrid, threshold: f64, eps: &EpsilonPolicy) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::InvalidInput(format!(
            "binary_iou dimension mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&av, &bv) in a.values().iter().zip(b.values()) {
        let ab = av > threshold;
        let bb = bv > threshold;
        if ab && bb {
            inter += 1;
        }
        if ab || bb {
            union += 1;
        }
    }
    Ok(inter as f64 / (union as f64 + eps.eps))
}
