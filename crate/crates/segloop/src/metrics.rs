//! The ten per-call decoder-coupling metrics and their assembly into a
//! [`MetricPanel`].
//!
//! Each metric reads the decoder's attention, its mask output, and the
//! prompts that produced them:
//!
//! * `cama` (dice/iou): spatial agreement between attention and target.
//! * `aad`: divergence from the centroid-aligned first-call attention.
//! * `tcs`: attention consistency between consecutive calls.
//! * `pde`: prompt displacement from the anchor (centroid + box terms).
//! * `dlr`: attention mass leaking outside the target, clamped and
//!   log-scaled variants.
//! * `ccd`: causal dependence measured by ablating top-attended tokens
//!   through a [`DecoderOracle`] and re-decoding.
//! * `pics`: composite product score.
//! * attention entropy, raw and normalized.
//! * `sca`: Spearman correlation between self- and cross-activation
//!   summaries, when the caller can supply them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{js_divergence, soft_iou, AttentionGrid, EpsilonPolicy, MaskGrid, Prompt};
use crate::stats::spearman;
use crate::trace::TraceRecord;

/// Clamp policy for the leakage ratio. The linear value fed into PICS is
/// clamped at `tau_clamp`; the log variant is taken on the raw ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlrPolicy {
    pub tau_clamp: f64,
}

impl Default for DlrPolicy {
    fn default() -> Self {
        DlrPolicy { tau_clamp: 1e4 }
    }
}

impl DlrPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.tau_clamp.is_finite() || self.tau_clamp <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "dlr clamp must be positive and finite, got {}",
                self.tau_clamp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub eps: EpsilonPolicy,
    pub dlr: DlrPolicy,
    /// Weight of the box-agreement term in prompt displacement.
    pub lambda_b: f64,
    /// Fraction of image tokens ablated for causal dependence.
    pub ccd_top_frac: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            eps: EpsilonPolicy::default(),
            dlr: DlrPolicy::default(),
            lambda_b: 1.0,
            ccd_top_frac: 0.05,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        EpsilonPolicy::new(self.eps.eps)?;
        self.dlr.validate()?;
        if !self.lambda_b.is_finite() || self.lambda_b < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "box weight must be non-negative, got {}",
                self.lambda_b
            )));
        }
        if !(self.ccd_top_frac > 0.0 && self.ccd_top_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ablation fraction must lie in (0, 1), got {}",
                self.ccd_top_frac
            )));
        }
        Ok(())
    }
}

/// One decoder call as seen by the ablation probe.
#[derive(Debug, Clone)]
pub struct OracleDecode {
    pub attention: AttentionGrid,
    pub mask: MaskGrid,
    pub confidences: Vec<f64>,
}

/// Re-decodable view of a decoder, used by `ccd` to ablate the
/// top-attended image tokens and decode again. Implementations must be
/// deterministic for a fixed world state and seed.
pub trait DecoderOracle {
    fn decode(&self, prompt: &Prompt) -> Result<OracleDecode>;

    /// Decodes with the listed image tokens (row-major grid indices)
    /// replaced by featureless filler.
    fn ablated_decode(&self, prompt: &Prompt, ablated_tokens: &[usize]) -> Result<MaskGrid>;
}

/// The ten coupling metrics for a single decoder call. Optional fields
/// stay missing when their inputs are unavailable; they are never filled
/// with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPanel {
    pub cama_dice: f64,
    pub cama_iou: f64,
    pub aad: f64,
    pub tcs: f64,
    pub pde: f64,
    pub dlr_clamped: f64,
    pub log_dlr: f64,
    pub ccd: Option<f64>,
    pub pics: f64,
    pub attention_entropy_raw: f64,
    pub attention_entropy_normalized: f64,
    pub sca: Option<f64>,
    /// Whether the target mask was ground truth (true) or the decoder's
    /// own prediction (false).
    pub gt_based: bool,
}

impl MetricPanel {
    /// Stable (name, value) listing used by writers and aggregation.
    pub fn named_values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("cama_dice", Some(self.cama_dice)),
            ("cama_iou", Some(self.cama_iou)),
            ("aad", Some(self.aad)),
            ("tcs", Some(self.tcs)),
            ("pde", Some(self.pde)),
            ("dlr_clamped", Some(self.dlr_clamped)),
            ("log_dlr", Some(self.log_dlr)),
            ("ccd", self.ccd),
            ("pics", Some(self.pics)),
            ("attention_entropy_raw", Some(self.attention_entropy_raw)),
            ("attention_entropy_normalized", Some(self.attention_entropy_normalized)),
            ("sca", self.sca),
        ]
    }

    /// Metric names in the order `named_values` reports them.
    pub fn metric_names() -> [&'static str; 12] {
        [
            "cama_dice",
            "cama_iou",
            "aad",
            "tcs",
            "pde",
            "dlr_clamped",
            "log_dlr",
            "ccd",
            "pics",
            "attention_entropy_raw",
            "attention_entropy_normalized",
            "sca",
        ]
    }
}

fn require_normalized(f: &AttentionGrid, role: &str) -> Result<()> {
    if !f.is_normalized() {
        return Err(Error::InvalidInput(format!(
            "{role} attention grid is not normalized; renormalize before computing metrics"
        )));
    }
    Ok(())
}

fn require_matching_dims(f: &AttentionGrid, g: &MaskGrid) -> Result<()> {
    if f.height() != g.height() || f.width() != g.width() {
        return Err(Error::InvalidInput(format!(
            "attention {}x{} and mask {}x{} dimensions differ",
            f.height(),
            f.width(),
            g.height(),
            g.width()
        )));
    }
    Ok(())
}

/// Attention-mask agreement: soft dice and soft IoU between the
/// attention distribution and the target mask.
pub fn cama(f: &AttentionGrid, g: &MaskGrid, eps: &EpsilonPolicy) -> Result<(f64, f64)> {
    require_normalized(f, "cama")?;
    require_matching_dims(f, g)?;
    let mut fg = 0.0;
    let mut sf = 0.0;
    for (a, b) in f.values().iter().zip(g.values()) {
        fg += a * b;
        sf += a;
    }
    let sg = g.total_mass();
    let dice = (2.0 * fg / (sf + sg + eps.eps)).clamp(0.0, 1.0);
    let iou = (fg / (sf + sg - fg + eps.eps)).clamp(0.0, 1.0);
    Ok((dice, iou))
}

/// Returns the anchor attention shifted (circularly, whole cells) so its
/// mass centroid coincides with the anchor prompt's centroid expressed
/// in grid coordinates. Image dimensions are (height, width) in pixels.
pub fn align_anchor(
    anchor_attention: &AttentionGrid,
    anchor_prompt: &Prompt,
    image: (usize, usize),
) -> Result<AttentionGrid> {
    require_normalized(anchor_attention, "anchor")?;
    let (image_h, image_w) = image;
    if image_h == 0 || image_w == 0 {
        return Err(Error::InvalidInput("image dimensions must be positive".into()));
    }
    let (cx, cy) = anchor_prompt.centroid;
    let gx = (cx + 0.5) * anchor_attention.width() as f64 / image_w as f64 - 0.5;
    let gy = (cy + 0.5) * anchor_attention.height() as f64 / image_h as f64 - 0.5;
    let (mx, my) = anchor_attention.mass_centroid()?;
    let dx = (gx - mx).round();
    let dy = (gy - my).round();
    if !dx.is_finite() || !dy.is_finite() {
        return Err(Error::NumericalFailure("anchor alignment shift is not finite".into()));
    }
    Ok(anchor_attention.circular_shift(dx as isize, dy as isize))
}

/// Attention anchor drift: divergence of the current attention from the
/// centroid-aligned first-call attention. Pass the output of
/// [`align_anchor`] as `anchor_aligned`.
pub fn aad(f_t: &AttentionGrid, anchor_aligned: &AttentionGrid, eps: &EpsilonPolicy) -> Result<f64> {
    js_divergence(f_t, anchor_aligned, eps)
}

/// Temporal consistency between consecutive calls; defined as 1.0 on the
/// first call, where the previous attention is the call itself.
pub fn tcs(f_t: &AttentionGrid, f_prev: Option<&AttentionGrid>, eps: &EpsilonPolicy) -> Result<f64> {
    match f_prev {
        None => Ok(1.0),
        Some(prev) => Ok(1.0 - js_divergence(f_t, prev, eps)?),
    }
}

/// Intersection-over-union of two axis-aligned boxes (x1, y1, x2, y2).
/// Bit-identical boxes score 1 even when degenerate; otherwise the eps
/// in the union keeps zero-area boxes at 0.
pub fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), eps: &EpsilonPolicy) -> f64 {
    if a == b {
        return 1.0;
    }
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    (inter / (union + eps.eps)).clamp(0.0, 1.0)
}

/// Prompt displacement error: squared centroid displacement normalized
/// by the image diagonal, plus a box-disagreement term.
pub fn pde(p_t: &Prompt, p_0: &Prompt, lambda_b: f64, eps: &EpsilonPolicy) -> Result<f64> {
    let rel = (p_t.image_diag - p_0.image_diag).abs() / p_0.image_diag;
    if rel > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "prompts normalized by different diagonals: {} vs {}",
            p_t.image_diag, p_0.image_diag
        )));
    }
    let dx = p_t.centroid.0 - p_0.centroid.0;
    let dy = p_t.centroid.1 - p_0.centroid.1;
    let centroid_term = (dx * dx + dy * dy) / (p_0.image_diag * p_0.image_diag);
    Ok(centroid_term + lambda_b * (1.0 - box_iou(p_t.bbox, p_0.bbox, eps)))
}

/// Distractor leakage ratio: attention mass outside the target over mass
/// inside. Returns the clamped linear ratio and the log of the raw one.
pub fn dlr(
    f: &AttentionGrid,
    g: &MaskGrid,
    policy: &DlrPolicy,
    eps: &EpsilonPolicy,
) -> Result<(f64, f64)> {
    require_normalized(f, "dlr")?;
    require_matching_dims(f, g)?;
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (a, b) in f.values().iter().zip(g.values()) {
        inside += a * b;
        outside += a * (1.0 - b);
    }
    let ratio = outside / (inside + eps.eps);
    Ok((ratio.min(policy.tau_clamp), (ratio + eps.eps).ln()))
}

/// Row-major indices of the top `ceil(top_frac * cells)` attention
/// values, ranked descending with ties broken by index.
pub fn top_attention_tokens(f: &AttentionGrid, top_frac: f64) -> Result<Vec<usize>> {
    if !(top_frac > 0.0 && top_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "token fraction must lie in (0, 1), got {top_frac}"
        )));
    }
    let n = f.len();
    let k = ((top_frac * n as f64).ceil() as usize).clamp(1, n);
    let values = f.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Causal coupling under token ablation: how much the decoded mask's
/// overlap with the target drops when the top-attended image tokens are
/// replaced by filler features. Never negative; oracle failures
/// propagate so the caller records the metric as missing.
pub fn ccd(
    oracle: &dyn DecoderOracle,
    prompt: &Prompt,
    f_final: &AttentionGrid,
    g: &MaskGrid,
    cfg: &MetricConfig,
) -> Result<f64> {
    require_normalized(f_final, "ccd")?;
    let tokens = top_attention_tokens(f_final, cfg.ccd_top_frac)?;
    let base = oracle.decode(prompt)?;
    let ablated = oracle.ablated_decode(prompt, &tokens)?;
    let iou_base = soft_iou(&base.mask, g, &cfg.eps)?;
    let iou_ablated = soft_iou(&ablated, g, &cfg.eps)?;
    Ok((iou_base - iou_ablated).max(0.0))
}

/// Composite coupling score: the product of agreement, consistency,
/// anchor closeness, and leakage headroom, clipped to [0, 1].
pub fn pics(cama_dice: f64, tcs: f64, aad: f64, dlr_clamped: f64, policy: &DlrPolicy) -> f64 {
    (cama_dice * tcs * (1.0 - aad) * (1.0 - dlr_clamped / policy.tau_clamp)).clamp(0.0, 1.0)
}

/// Shannon entropy of the attention distribution in nats, raw and
/// normalized by the log cell count. A 1x1 grid has zero entropy by
/// definition.
pub fn attention_entropy(f: &AttentionGrid, eps: &EpsilonPolicy) -> Result<(f64, f64)> {
    require_normalized(f, "entropy")?;
    let raw: f64 = -f.values().iter().map(|v| v * (v + eps.eps).ln()).sum::<f64>();
    let raw = raw.max(0.0);
    let n = f.len();
    let normalized = if n == 1 {
        0.0
    } else {
        (raw / (n as f64).ln()).clamp(0.0, 1.0)
    };
    Ok((raw, normalized))
}

/// Self-cross activation agreement: Spearman rank correlation between
/// the two summaries. `None` when either vector is constant.
pub fn sca(self_vec: &[f64], cross_vec: &[f64]) -> Result<Option<f64>> {
    spearman(self_vec, cross_vec)
}

/// Assembles the full panel for one decoder call.
///
/// `prev` is the preceding call of the same trajectory (None on the
/// first call), `anchor` the first call, `gt` the ground-truth mask at
/// attention resolution when available. `oracle` enables the ablation
/// probe and `sca_vectors` the rank-correlation metric; when absent the
/// corresponding fields stay missing. `image` is the (height, width) of
/// the image frame the prompts are expressed in.
#[allow(clippy::too_many_arguments)]
pub fn metric_panel(
    record: &TraceRecord,
    prev: Option<&TraceRecord>,
    anchor: &TraceRecord,
    gt: Option<&MaskGrid>,
    oracle: Option<&dyn DecoderOracle>,
    sca_vectors: Option<(&[f64], &[f64])>,
    image: (usize, usize),
    cfg: &MetricConfig,
) -> Result<MetricPanel> {
    cfg.validate()?;
    let f_t = &record.attention;
    require_normalized(f_t, "record")?;
    let g = gt.unwrap_or(&record.mask_pred);
    let gt_based = gt.is_some();

    let (cama_dice, cama_iou) = cama(f_t, g, &cfg.eps)?;

    // The anchor call is its own reference: drift and displacement are
    // zero there by definition, skipping the alignment shift.
    let is_anchor_call = record.method == anchor.method
        && record.object == anchor.object
        && record.iteration == anchor.iteration;
    let aad_value = if is_anchor_call {
        0.0
    } else {
        let aligned = align_anchor(&anchor.attention, &anchor.prompt, image)?;
        aad(f_t, &aligned, &cfg.eps)?
    };
    let pde_value = if is_anchor_call {
        0.0
    } else {
        pde(&record.prompt, &anchor.prompt, cfg.lambda_b, &cfg.eps)?
    };
    let tcs_value = tcs(f_t, prev.map(|r| &r.attention), &cfg.eps)?;

    let (dlr_clamped, log_dlr) = dlr(f_t, g, &cfg.dlr, &cfg.eps)?;
    let ccd_value = match oracle {
        Some(oracle) => Some(ccd(oracle, &record.prompt, f_t, g, cfg)?),
        None => None,
    };
    let (entropy_raw, entropy_normalized) = attention_entropy(f_t, &cfg.eps)?;
    let sca_value = match sca_vectors {
        Some((self_vec, cross_vec)) => sca(self_vec, cross_vec)?,
        None => None,
    };
    let pics_value = pics(cama_dice, tcs_value, aad_value, dlr_clamped, &cfg.dlr);

    Ok(MetricPanel {
        cama_dice,
        cama_iou,
        aad: aad_value,
        tcs: tcs_value,
        pde: pde_value,
        dlr_clamped,
        log_dlr,
        ccd: ccd_value,
        pics: pics_value,
        attention_entropy_raw: entropy_raw,
        attention_entropy_normalized: entropy_normalized,
        sca: sca_value,
        gt_based,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize_attention;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eps() -> EpsilonPolicy {
        EpsilonPolicy::default()
    }

    fn attention(values: &[f64], h: usize, w: usize) -> AttentionGrid {
        let raw = AttentionGrid::new(values.to_vec(), h, w).unwrap();
        normalize_attention(&raw, &eps()).unwrap()
    }

    /// Attention whose stored values are exactly the given distribution.
    fn attention_exact(values: &[f64], h: usize, w: usize) -> AttentionGrid {
        AttentionGrid::from_stored(values.to_vec(), h, w, true).unwrap()
    }

    fn mask(values: &[f64], h: usize, w: usize) -> MaskGrid {
        MaskGrid::new(values.to_vec(), h, w).unwrap()
    }

    fn prompt(cx: f64, cy: f64, bbox: (f64, f64, f64, f64), diag: f64) -> Prompt {
        Prompt::new((cx, cy), bbox, diag).unwrap()
    }

    fn record(att: AttentionGrid, mask_pred: MaskGrid, p: Prompt, iteration: usize) -> TraceRecord {
        TraceRecord {
            method: "iterative".into(),
            slice: iteration,
            object: 0,
            iteration,
            prompt: p,
            attention: att,
            mask_pred,
            mask_gt: None,
            confidence: 0.9,
            iou: None,
        }
    }

    #[test]
    fn cama_point_mass_on_single_pixel_target() {
        let f = attention_exact(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let g = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let (dice, iou) = cama(&f, &g, &eps()).unwrap();
        assert_abs_diff_eq!(dice, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(iou, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cama_empty_target_scores_zero() {
        let f = attention_exact(&[0.25; 4], 2, 2);
        let g = mask(&[0.0; 4], 2, 2);
        let (dice, iou) = cama(&f, &g, &eps()).unwrap();
        assert_abs_diff_eq!(dice, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(iou, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn cama_two_pixel_example_evaluates_directly() {
        let f = attention_exact(&[0.5, 0.5, 0.0, 0.0], 2, 2);
        let g = mask(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        let (dice, iou) = cama(&f, &g, &eps()).unwrap();
        assert_abs_diff_eq!(dice, 2.0 / 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(iou, 0.5, epsilon = 1e-7);
    }

    #[test]
    fn cama_rejects_dimension_mismatch() {
        let f = attention_exact(&[1.0], 1, 1);
        let g = mask(&[1.0, 0.0], 1, 2);
        assert!(cama(&f, &g, &eps()).is_err());
    }

    #[test]
    fn alignment_moves_mass_to_prompt_cell() {
        // Point mass at (row 0, col 0); prompt centroid maps to grid
        // cell (row 2, col 3) of an 8x8 grid over a 64x64 image.
        let mut v = vec![0.0; 64];
        v[0] = 1.0;
        let f0 = attention_exact(&v, 8, 8);
        let p0 = prompt(27.5, 19.5, (20.0, 12.0, 35.0, 27.0), 64.0 * std::f64::consts::SQRT_2);
        let aligned = align_anchor(&f0, &p0, (64, 64)).unwrap();
        assert_abs_diff_eq!(aligned.get(2, 3), 1.0, epsilon = 1e-12);
        assert!(aligned.is_normalized());
    }

    #[test]
    fn alignment_is_identity_when_centroids_coincide() {
        // Mass centered at cell (1, 1) of a 4x4 grid over a 16x16 image;
        // prompt centroid at the matching pixel (5.5, 5.5).
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let f0 = attention_exact(&v, 4, 4);
        let p0 = prompt(5.5, 5.5, (2.0, 2.0, 9.0, 9.0), 16.0 * std::f64::consts::SQRT_2);
        let aligned = align_anchor(&f0, &p0, (16, 16)).unwrap();
        assert_eq!(aligned.values(), f0.values());
    }

    #[test]
    fn aad_matches_divergence_oracle() {
        let f_t = attention_exact(&[1.0, 0.0], 1, 2);
        let f_0 = attention_exact(&[0.5, 0.5], 1, 2);
        assert_abs_diff_eq!(aad(&f_t, &f_0, &eps()).unwrap(), 0.311278124459133, epsilon = 1e-5);

        let same = aad(&f_t, &f_t, &eps()).unwrap();
        assert_abs_diff_eq!(same, 0.0, epsilon = 1e-12);

        let disjoint = attention_exact(&[0.0, 1.0], 1, 2);
        assert_abs_diff_eq!(aad(&f_t, &disjoint, &eps()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tcs_complements_divergence() {
        let f_t = attention_exact(&[1.0, 0.0], 1, 2);
        let f_p = attention_exact(&[0.5, 0.5], 1, 2);
        assert_abs_diff_eq!(tcs(&f_t, Some(&f_p), &eps()).unwrap(), 0.688721875540867, epsilon = 1e-5);
        assert_eq!(tcs(&f_t, None, &eps()).unwrap(), 1.0);
        assert_eq!(tcs(&f_t, Some(&f_t), &eps()).unwrap(), 1.0);
        let disjoint = attention_exact(&[0.0, 1.0], 1, 2);
        assert_abs_diff_eq!(tcs(&f_t, Some(&disjoint), &eps()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn box_iou_handles_identity_overlap_and_degeneracy() {
        let e = eps();
        assert_eq!(box_iou((1.0, 1.0, 1.0, 1.0), (1.0, 1.0, 1.0, 1.0), &e), 1.0);
        assert_eq!(box_iou((0.0, 0.0, 1.0, 1.0), (5.0, 5.0, 6.0, 6.0), &e), 0.0);
        let third = box_iou((0.0, 0.0, 2.0, 2.0), (1.0, 0.0, 3.0, 2.0), &e);
        assert_abs_diff_eq!(third, 1.0 / 3.0, epsilon = 1e-7);
        // Distinct zero-area boxes resolve to 0 through the eps guard.
        assert_eq!(box_iou((0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 1.0), &e), 0.0);
    }

    #[test]
    fn pde_examples_evaluate_directly() {
        let e = eps();
        let p0 = prompt(10.0, 10.0, (5.0, 5.0, 15.0, 15.0), 100.0);
        assert_abs_diff_eq!(pde(&p0, &p0, 1.0, &e).unwrap(), 0.0, epsilon = 1e-12);

        let moved = prompt(40.0, 50.0, (5.0, 5.0, 15.0, 15.0), 100.0);
        assert_abs_diff_eq!(pde(&moved, &p0, 1.0, &e).unwrap(), 0.25, epsilon = 1e-9);

        let disjoint_box = prompt(10.0, 10.0, (50.0, 50.0, 60.0, 60.0), 100.0);
        assert_abs_diff_eq!(pde(&disjoint_box, &p0, 1.0, &e).unwrap(), 1.0, epsilon = 1e-9);

        let other_diag = prompt(10.0, 10.0, (5.0, 5.0, 15.0, 15.0), 200.0);
        assert!(pde(&other_diag, &p0, 1.0, &e).is_err());
    }

    #[test]
    fn dlr_examples_cover_floor_clamp_and_ratio() {
        let e = eps();
        let policy = DlrPolicy::default();

        let f = attention_exact(&[0.5, 0.5, 0.0, 0.0], 2, 2);
        let g_inside = mask(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        let (clamped, log) = dlr(&f, &g_inside, &policy, &e).unwrap();
        assert_abs_diff_eq!(clamped, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(log, (1e-8f64).ln(), epsilon = 1e-2);

        let g_outside = mask(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        let (clamped, log) = dlr(&f, &g_outside, &policy, &e).unwrap();
        assert_eq!(clamped, 1e4);
        assert!(log > 18.0, "log of raw ratio past the clamp, got {log}");

        let g_partial = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        // in = 0.5, out = 0.5 -> ratio 1; rebuild for the 0.2/0.8 split.
        let f_split = attention_exact(&[0.2, 0.8, 0.0, 0.0], 2, 2);
        let (clamped, log) = dlr(&f_split, &g_partial, &policy, &e).unwrap();
        assert_abs_diff_eq!(clamped, 4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(log, 4.0f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn top_tokens_rank_descending_with_row_major_ties() {
        let f = attention_exact(&[0.25; 4], 2, 2);
        assert_eq!(top_attention_tokens(&f, 0.6).unwrap(), vec![0, 1, 2]);

        let f = attention_exact(&[0.1, 0.4, 0.4, 0.1], 2, 2);
        assert_eq!(top_attention_tokens(&f, 0.3).unwrap(), vec![1, 2]);

        let uniform = attention_exact(&[1.0 / 64.0; 64], 8, 8);
        // ceil(0.05 * 64) = 4 tokens.
        assert_eq!(top_attention_tokens(&uniform, 0.05).unwrap(), vec![0, 1, 2, 3]);

        assert!(top_attention_tokens(&f, 0.0).is_err());
        assert!(top_attention_tokens(&f, 1.0).is_err());
    }

    /// Oracle whose mask lives on a fixed token set; ablation deletes
    /// the ablated tokens from the mask.
    struct TokenOracle {
        att: AttentionGrid,
        mask: MaskGrid,
        respond_to_ablation: bool,
        fail: bool,
    }

    impl DecoderOracle for TokenOracle {
        fn decode(&self, _prompt: &Prompt) -> Result<OracleDecode> {
            Ok(OracleDecode {
                attention: self.att.clone(),
                mask: self.mask.clone(),
                confidences: vec![1.0],
            })
        }

        fn ablated_decode(&self, _prompt: &Prompt, ablated: &[usize]) -> Result<MaskGrid> {
            if self.fail {
                return Err(Error::Decoder("ablation pass unavailable".into()));
            }
            if !self.respond_to_ablation {
                return Ok(self.mask.clone());
            }
            let mut values = self.mask.values().to_vec();
            for &i in ablated {
                if i < values.len() {
                    values[i] = 0.0;
                }
            }
            MaskGrid::new(values, self.mask.height(), self.mask.width())
        }
    }

    #[test]
    fn ccd_is_zero_when_ablation_changes_nothing() {
        let att = attention_exact(&[0.7, 0.1, 0.1, 0.1], 2, 2);
        let g = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let oracle = TokenOracle {
            att: att.clone(),
            mask: g.clone(),
            respond_to_ablation: false,
            fail: false,
        };
        let p = prompt(0.5, 0.5, (0.0, 0.0, 1.0, 1.0), 2.0);
        let cfg = MetricConfig::default();
        let out = ccd(&oracle, &p, &att, &g, &cfg).unwrap();
        assert_abs_diff_eq!(out, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn ccd_recovers_full_overlap_when_ablation_erases_target() {
        // Attention piles on cell 0, whose ablation empties the mask.
        let att = attention_exact(&[0.97, 0.01, 0.01, 0.01], 2, 2);
        let g = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let oracle = TokenOracle {
            att: att.clone(),
            mask: g.clone(),
            respond_to_ablation: true,
            fail: false,
        };
        let p = prompt(0.5, 0.5, (0.0, 0.0, 1.0, 1.0), 2.0);
        let cfg = MetricConfig::default();
        let out = ccd(&oracle, &p, &att, &g, &cfg).unwrap();
        let base = soft_iou(&g, &g, &eps()).unwrap();
        assert_abs_diff_eq!(out, base, epsilon = 1e-9);
    }

    #[test]
    fn ccd_propagates_oracle_failure() {
        let att = attention_exact(&[0.97, 0.01, 0.01, 0.01], 2, 2);
        let g = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let oracle = TokenOracle {
            att: att.clone(),
            mask: g.clone(),
            respond_to_ablation: true,
            fail: true,
        };
        let p = prompt(0.5, 0.5, (0.0, 0.0, 1.0, 1.0), 2.0);
        let err = ccd(&oracle, &p, &att, &g, &MetricConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Decoder(_)));
    }

    #[test]
    fn pics_examples_evaluate_directly() {
        let policy = DlrPolicy::default();
        assert_eq!(pics(0.0, 0.9, 0.1, 5.0, &policy), 0.0);
        assert_eq!(pics(1.0, 1.0, 0.0, 0.0, &policy), 1.0);
        assert_abs_diff_eq!(pics(0.5, 0.8, 0.2, 5000.0, &policy), 0.16, epsilon = 1e-12);
    }

    #[test]
    fn entropy_spans_uniform_to_point_mass() {
        let e = eps();
        let uniform = attention_exact(&[1.0 / 16.0; 16], 4, 4);
        let (_, norm) = attention_entropy(&uniform, &e).unwrap();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);

        let mut v = vec![0.0; 16];
        v[3] = 1.0;
        let point = attention_exact(&v, 4, 4);
        let (raw, norm) = attention_entropy(&point, &e).unwrap();
        assert!(raw >= 0.0 && raw < 1e-6, "raw entropy {raw}");
        assert!(norm < 1e-6);

        let pair = attention_exact(&[0.5, 0.5], 1, 2);
        let (raw, norm) = attention_entropy(&pair, &e).unwrap();
        assert_abs_diff_eq!(raw, std::f64::consts::LN_2, epsilon = 1e-7);
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-7);

        let single = attention_exact(&[1.0], 1, 1);
        assert_eq!(attention_entropy(&single, &e).unwrap().1, 0.0);
    }

    #[test]
    fn sca_covers_inversion_monotone_and_ties() {
        assert_abs_diff_eq!(sca(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sca(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            sca(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().unwrap(),
            0.9486832980505138,
            epsilon = 1e-10
        );
        assert_eq!(sca(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(sca(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    fn panel_fixture() -> (TraceRecord, TraceRecord, TraceRecord, MaskGrid) {
        let diag = (64.0f64 * 64.0 + 64.0 * 64.0).sqrt();
        let anchor_att = attention(&(0..64).map(|i| ((i % 9) + 1) as f64).collect::<Vec<_>>(), 8, 8);
        let anchor_mask = mask(
            &(0..64).map(|i| if i / 8 < 3 && i % 8 < 3 { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
            8,
            8,
        );
        let anchor = record(anchor_att, anchor_mask, prompt(12.0, 12.0, (4.0, 4.0, 20.0, 20.0), diag), 0);

        let prev_att = attention(&(0..64).map(|i| ((i % 5) + 2) as f64).collect::<Vec<_>>(), 8, 8);
        let prev_mask = mask(
            &(0..64).map(|i| if i / 8 >= 2 && i / 8 < 5 && i % 8 >= 2 && i % 8 < 5 { 0.8 } else { 0.0 })
                .collect::<Vec<_>>(),
            8,
            8,
        );
        let prev = record(prev_att, prev_mask, prompt(20.0, 18.0, (10.0, 8.0, 30.0, 28.0), diag), 1);

        let rec_att = attention(&(0..64).map(|i| (i + 1) as f64).collect::<Vec<_>>(), 8, 8);
        let rec_mask = mask(
            &(0..64).map(|i| if i / 8 >= 3 && i % 8 >= 3 { 0.9 } else { 0.05 }).collect::<Vec<_>>(),
            8,
            8,
        );
        let rec = record(rec_att, rec_mask, prompt(30.0, 28.0, (16.0, 14.0, 44.0, 42.0), diag), 2);

        let gt = mask(
            &(0..64).map(|i| if i / 8 >= 4 && i % 8 >= 2 { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
            8,
            8,
        );
        (rec, prev, anchor, gt)
    }

    #[test]
    fn panel_of_record_against_itself_hits_identities() {
        let (rec, _, _, _) = panel_fixture();
        let cfg = MetricConfig::default();
        let panel = metric_panel(&rec, Some(&rec), &rec, None, None, None, (64, 64), &cfg).unwrap();
        assert!(panel.aad.abs() < 1e-9);
        assert!((panel.tcs - 1.0).abs() < 1e-9);
        assert!(panel.pde.abs() < 1e-9);
        assert!(!panel.gt_based);
        assert_eq!(panel.ccd, None);
        assert_eq!(panel.sca, None);
    }

    #[test]
    fn panel_without_gt_scores_against_prediction() {
        let (rec, prev, anchor, gt) = panel_fixture();
        let cfg = MetricConfig::default();
        let against_pred =
            metric_panel(&rec, Some(&prev), &anchor, None, None, None, (64, 64), &cfg).unwrap();
        assert!(!against_pred.gt_based);
        let explicit = metric_panel(
            &rec,
            Some(&prev),
            &anchor,
            Some(&rec.mask_pred.clone()),
            None,
            None,
            (64, 64),
            &cfg,
        )
        .unwrap();
        assert!(explicit.gt_based);
        assert_eq!(against_pred.cama_dice, explicit.cama_dice);
        assert_eq!(against_pred.dlr_clamped, explicit.dlr_clamped);

        let with_gt = metric_panel(&rec, Some(&prev), &anchor, Some(&gt), None, None, (64, 64), &cfg).unwrap();
        assert!(with_gt.gt_based);
        assert_ne!(with_gt.cama_dice, against_pred.cama_dice);
        // Target choice must not touch the attention-only metrics.
        assert_eq!(with_gt.aad, against_pred.aad);
        assert_eq!(with_gt.tcs, against_pred.tcs);
        assert_eq!(with_gt.pde, against_pred.pde);
        assert_eq!(with_gt.attention_entropy_raw, against_pred.attention_entropy_raw);
    }

    #[test]
    fn panel_matches_straight_line_recomputation() {
        let (rec, prev, anchor, gt) = panel_fixture();
        let cfg = MetricConfig::default();
        let panel =
            metric_panel(&rec, Some(&prev), &anchor, Some(&gt), None, None, (64, 64), &cfg).unwrap();

        let e = 1e-8;
        let f: &[f64] = rec.attention.values();
        let g: &[f64] = gt.values();

        // Agreement scores.
        let sf: f64 = f.iter().sum();
        let sg: f64 = g.iter().sum();
        let fg: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(panel.cama_dice, 2.0 * fg / (sf + sg + e), epsilon = 1e-12);
        assert_abs_diff_eq!(panel.cama_iou, fg / (sf + sg - fg + e), epsilon = 1e-12);

        // Base-2 divergence computed longhand.
        fn js_ref(p: &[f64], q: &[f64]) -> f64 {
            let mut total = 0.0;
            for (a, b) in p.iter().zip(q) {
                let r = (0.5 * (a + b)).max(f64::MIN_POSITIVE);
                if *a > 0.0 {
                    total += 0.5 * a * (a / r).log2();
                }
                if *b > 0.0 {
                    total += 0.5 * b * (b / r).log2();
                }
            }
            total.clamp(0.0, 1.0)
        }

        // Anchor alignment: shift the anchor attention so its mass
        // centroid lands on the anchor prompt's grid cell.
        let f0 = anchor.attention.values();
        let mass: f64 = f0.iter().sum();
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..8 {
            for c in 0..8 {
                mx += f0[r * 8 + c] * c as f64;
                my += f0[r * 8 + c] * r as f64;
            }
        }
        mx /= mass;
        my /= mass;
        let gx = (anchor.prompt.centroid.0 + 0.5) * 8.0 / 64.0 - 0.5;
        let gy = (anchor.prompt.centroid.1 + 0.5) * 8.0 / 64.0 - 0.5;
        let dx = (gx - mx).round() as isize;
        let dy = (gy - my).round() as isize;
        let mut aligned = vec![0.0; 64];
        for r in 0..8isize {
            for c in 0..8isize {
                let nr = (r + dy).rem_euclid(8) as usize;
                let nc = (c + dx).rem_euclid(8) as usize;
                aligned[nr * 8 + nc] = f0[(r * 8 + c) as usize];
            }
        }
        assert_abs_diff_eq!(panel.aad, js_ref(f, &aligned), epsilon = 1e-12);
        assert_abs_diff_eq!(panel.tcs, 1.0 - js_ref(f, prev.attention.values()), epsilon = 1e-12);

        // Prompt displacement.
        let (cx, cy) = rec.prompt.centroid;
        let (ax, ay) = anchor.prompt.centroid;
        let diag = rec.prompt.image_diag;
        let d2 = ((cx - ax).powi(2) + (cy - ay).powi(2)) / (diag * diag);
        let (ax1, ay1, ax2, ay2) = anchor.prompt.bbox;
        let (bx1, by1, bx2, by2) = rec.prompt.bbox;
        let ix = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let iy = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = ix * iy;
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        let biou = inter / (union + e);
        assert_abs_diff_eq!(panel.pde, d2 + 1.0 * (1.0 - biou), epsilon = 1e-12);

        // Leakage.
        let inside: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
        let outside: f64 = f.iter().zip(g).map(|(a, b)| a * (1.0 - b)).sum();
        let ratio = outside / (inside + e);
        assert_abs_diff_eq!(panel.dlr_clamped, ratio.min(1e4), epsilon = 1e-12);
        assert_abs_diff_eq!(panel.log_dlr, (ratio + e).ln(), epsilon = 1e-12);

        // Entropy.
        let raw: f64 = -f.iter().map(|v| v * (v + e).ln()).sum::<f64>();
        assert_abs_diff_eq!(panel.attention_entropy_raw, raw.max(0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(panel.attention_entropy_normalized, raw.max(0.0) / 64f64.ln(), epsilon = 1e-12);

        // Composite.
        let expected_pics =
            panel.cama_dice * panel.tcs * (1.0 - panel.aad) * (1.0 - panel.dlr_clamped / 1e4);
        assert_abs_diff_eq!(panel.pics, expected_pics.clamp(0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn panel_names_align_with_values() {
        let (rec, prev, anchor, gt) = panel_fixture();
        let cfg = MetricConfig::default();
        let panel = metric_panel(&rec, Some(&prev), &anchor, Some(&gt), None, None, (64, 64), &cfg).unwrap();
        let named = panel.named_values();
        assert_eq!(named.len(), MetricPanel::metric_names().len());
        for ((name, _), expected) in named.iter().zip(MetricPanel::metric_names()) {
            assert_eq!(*name, expected);
        }
        assert_eq!(named[3], ("tcs", Some(panel.tcs)));
        assert_eq!(named[7], ("ccd", None));
        assert_eq!(named[11], ("sca", None));
    }

    fn arb_distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|mut v| {
            let sum: f64 = v.iter().sum();
            if sum <= 0.0 {
                v = vec![1.0 / v.len() as f64; v.len()];
            } else {
                for x in &mut v {
                    *x /= sum;
                }
            }
            v
        })
    }

    proptest! {
        #[test]
        fn consistency_and_divergence_sum_to_one(
            p in arb_distribution(16),
            q in arb_distribution(16),
        ) {
            let f = AttentionGrid::from_stored(p, 4, 4, true).unwrap();
            let g = AttentionGrid::from_stored(q, 4, 4, true).unwrap();
            let js = js_divergence(&f, &g, &eps()).unwrap();
            let t = tcs(&f, Some(&g), &eps()).unwrap();
            prop_assert_eq!(t + js, 1.0);
        }

        #[test]
        fn drift_is_invariant_under_shared_permutation(
            p in arb_distribution(16),
            q in arb_distribution(16),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let f = AttentionGrid::from_stored(p.clone(), 4, 4, true).unwrap();
            let g = AttentionGrid::from_stored(q.clone(), 4, 4, true).unwrap();
            let before = aad(&f, &g, &eps()).unwrap();

            let mut order: Vec<usize> = (0..16).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = order.iter().map(|&i| p[i]).collect();
            let qq: Vec<f64> = order.iter().map(|&i| q[i]).collect();
            let fp = AttentionGrid::from_stored(pp, 4, 4, true).unwrap();
            let gp = AttentionGrid::from_stored(qq, 4, 4, true).unwrap();
            let after = aad(&fp, &gp, &eps()).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }

        #[test]
        fn leakage_of_complement_is_reciprocal(
            raw in prop::collection::vec(0.01f64..1.0, 16),
            split in 4usize..12,
        ) {
            // Mask with enough soft mass on each side of the split.
            let f_raw = AttentionGrid::new(raw, 4, 4).unwrap();
            let f = normalize_attention(&f_raw, &eps()).unwrap();
            let g_vals: Vec<f64> = (0..16).map(|i| if i < split { 1.0 } else { 0.0 }).collect();
            let g = MaskGrid::new(g_vals.clone(), 4, 4).unwrap();
            let comp = MaskGrid::new(g_vals.iter().map(|v| 1.0 - v).collect(), 4, 4).unwrap();

            let inside: f64 = f.values().iter().zip(&g_vals).map(|(a, b)| a * b).sum();
            prop_assume!(inside > 0.1 && 1.0 - inside > 0.1);

            let policy = DlrPolicy::default();
            let (d, _) = dlr(&f, &g, &policy, &eps()).unwrap();
            let (d_comp, _) = dlr(&f, &comp, &policy, &eps()).unwrap();
            prop_assert!((d * d_comp - 1.0).abs() < 1e-3, "d = {}, comp = {}", d, d_comp);
        }

        #[test]
        fn composite_never_exceeds_its_factors(
            dice in 0.0f64..1.0,
            t in 0.0f64..1.0,
            a in 0.0f64..1.0,
            leak in 0.0f64..1e4,
        ) {
            let p = pics(dice, t, a, leak, &DlrPolicy::default());
            prop_assert!(p <= dice.min(t) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn panel_invariants_hold_on_random_grids(
            att in arb_distribution(64),
            m in prop::collection::vec(0.0f64..1.0, 64),
            gt_vals in prop::collection::vec(0.0f64..1.0, 64),
        ) {
            let (rec0, prev, anchor, _) = panel_fixture();
            let rec = TraceRecord {
                attention: AttentionGrid::from_stored(att, 8, 8, true).unwrap(),
                mask_pred: MaskGrid::new(m, 8, 8).unwrap(),
                ..rec0
            };
            let gt = MaskGrid::new(gt_vals, 8, 8).unwrap();
            let cfg = MetricConfig::default();
            let panel = metric_panel(&rec, Some(&prev), &anchor, Some(&gt), None, None, (64, 64), &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&panel.cama_dice));
            prop_assert!((0.0..=1.0).contains(&panel.cama_iou));
            prop_assert!((0.0..=1.0).contains(&panel.aad));
            prop_assert!((0.0..=1.0).contains(&panel.tcs));
            prop_assert!(panel.pde >= 0.0);
            prop_assert!((0.0..=1e4).contains(&panel.dlr_clamped));
            prop_assert!((0.0..=1.0).contains(&panel.pics));
            prop_assert!(panel.pics <= panel.cama_dice.min(panel.tcs) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&panel.attention_entropy_normalized));
        }
    }
}
