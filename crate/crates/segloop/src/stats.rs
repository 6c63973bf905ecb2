//! Statistical protocol for method comparisons: paired permutation
//! tests, Pearson/Spearman correlations, grouped aggregation, and the
//! gap-closed percentage.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One paired observation: the same (slice, object, iteration) measured
/// under two methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedSample {
    pub key: (usize, usize, usize),
    pub value_a: f64,
    pub value_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationMode {
    /// All 2^n sign patterns enumerated.
    Exact { patterns: u64 },
    /// Monte Carlo sign flips with the add-one correction.
    MonteCarlo { draws: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// Observed mean of (value_a - value_b).
    pub mean_diff: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub mode: PermutationMode,
    pub seed: u64,
}

/// Pairs with at most this many entries are enumerated exactly.
const EXACT_LIMIT: usize = 20;

/// Two-sided paired permutation test on the mean difference. The null
/// distribution flips the sign of each pair independently. With n at
/// most 20 pairs all 2^n patterns are enumerated and p = c / 2^n;
/// otherwise `n_perm` Monte Carlo draws give p = (c + 1) / (N + 1), so p
/// is never zero. Differences are put in a canonical order first, which
/// makes the Monte Carlo result independent of how pairs were labeled.
pub fn paired_permutation_test(samples: &[PairedSample], n_perm: usize, seed: u64) -> Result<TestResult> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "paired permutation test needs at least 2 pairs, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.value_a.is_finite() || !s.value_b.is_finite()) {
        return Err(Error::InvalidInput("paired samples must be finite".into()));
    }
    let mut diffs: Vec<f64> = samples.iter().map(|s| s.value_a - s.value_b).collect();
    let n = diffs.len();
    diffs.sort_by(f64::total_cmp);
    let t_obs = diffs.iter().sum::<f64>() / n as f64;
    // Sums taken in different orders can differ in the last bits, and a
    // permutation test compares against an exact tie at the observed
    // statistic (the identity pattern). A slack far above rounding noise
    // but far below any real gap keeps tied patterns counted, which is
    // the conservative side.
    let slack = 1e-9 * diffs.iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let threshold = t_obs.abs() - slack;

    if n <= EXACT_LIMIT {
        let patterns: u64 = 1 << n;
        let mut c = 0u64;
        for mask in 0..patterns {
            let mut sum = 0.0;
            for (i, d) in diffs.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    sum -= d;
                } else {
                    sum += d;
                }
            }
            if (sum / n as f64).abs() >= threshold {
                c += 1;
            }
        }
        return Ok(TestResult {
            mean_diff: t_obs,
            p_value: c as f64 / patterns as f64,
            n_pairs: n,
            mode: PermutationMode::Exact { patterns },
            seed,
        });
    }

    if n_perm == 0 {
        return Err(Error::InvalidInput("need at least one permutation draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = 0usize;
    for _ in 0..n_perm {
        let mut sum = 0.0;
        for d in &diffs {
            if rng.random::<bool>() {
                sum -= d;
            } else {
                sum += d;
            }
        }
        if (sum / n as f64).abs() >= threshold {
            c += 1;
        }
    }
    Ok(TestResult {
        mean_diff: t_obs,
        p_value: (c + 1) as f64 / (n_perm + 1) as f64,
        n_pairs: n,
        mode: PermutationMode::MonteCarlo { draws: n_perm },
        seed,
    })
}

/// Ranks with ties replaced by the average rank of the tied run
/// (1-based, so a tie on the two smallest values yields 1.5, 1.5).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_paired_lengths(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least {min} points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("correlation inputs must be finite".into()));
    }
    Ok(())
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_paired_lengths(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_paired_lengths(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationPair {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
}

/// Both correlations at once, under the stricter n >= 3 precondition
/// used for reporting. Constant inputs yield `None` fields.
pub fn correlations(x: &[f64], y: &[f64]) -> Result<CorrelationPair> {
    check_paired_lengths(x, y, 3)?;
    Ok(CorrelationPair {
        pearson: pearson(x, y)?,
        spearman: spearman(x, y)?,
        n: x.len(),
    })
}

/// Keys a single metric value for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedValue {
    pub method: String,
    pub slice: usize,
    pub object: usize,
    pub iteration: usize,
    pub metric: String,
    /// Missing values are excluded per metric, never imputed.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupField {
    Method,
    Slice,
    Object,
    Iteration,
}

impl std::fmt::Display for GroupField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupField::Method => "method",
            GroupField::Slice => "slice",
            GroupField::Object => "object",
            GroupField::Iteration => "iteration",
        })
    }
}

impl std::str::FromStr for GroupField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "method" => Ok(GroupField::Method),
            "slice" => Ok(GroupField::Slice),
            "object" => Ok(GroupField::Object),
            "iteration" => Ok(GroupField::Iteration),
            other => Err(Error::InvalidInput(format!(
                "unknown group field '{other}' (expected method, slice, object, or iteration)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKeyPart {
    Text(String),
    Num(usize),
}

impl std::fmt::Display for GroupKeyPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupKeyPart::Text(s) => f.write_str(s),
            GroupKeyPart::Num(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    /// Formatted group key values, parallel to the requested group_by.
    pub group: Vec<String>,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1); missing when n = 1.
    pub std: Option<f64>,
    pub n: usize,
}

/// Mean and sample standard deviation per (group, metric), with missing
/// values dropped per metric. Rows come back in a deterministic order:
/// group keys first (numeric fields numerically), then metric name.
pub fn aggregate_metrics(values: &[KeyedValue], group_by: &[GroupField]) -> Vec<AggregateRow> {
    let mut buckets: BTreeMap<(Vec<GroupKeyPart>, String), Vec<f64>> = BTreeMap::new();
    for v in values {
        let value = match v.value {
            Some(x) => x,
            None => continue,
        };
        let key: Vec<GroupKeyPart> = group_by
            .iter()
            .map(|f| match f {
                GroupField::Method => GroupKeyPart::Text(v.method.clone()),
                GroupField::Slice => GroupKeyPart::Num(v.slice),
                GroupField::Object => GroupKeyPart::Num(v.object),
                GroupField::Iteration => GroupKeyPart::Num(v.iteration),
            })
            .collect();
        buckets.entry((key, v.metric.clone())).or_default().push(value);
    }
    buckets
        .into_iter()
        .map(|((key, metric), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                let ss = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                Some((ss / (n - 1) as f64).sqrt())
            } else {
                None
            };
            AggregateRow {
                group: key.iter().map(|p| p.to_string()).collect(),
                metric,
                mean,
                std,
                n,
            }
        })
        .collect()
}

/// Percentage of the baseline-to-oracle gap recovered by stabilization:
/// `(mean_stab - mean_a) / (mean_b - mean_a) * 100`. Undefined when the
/// baseline and oracle means coincide exactly.
pub fn gap_closed(mean_a: f64, mean_stab: f64, mean_b: f64) -> Result<f64> {
    if mean_b == mean_a {
        return Err(Error::UndefinedGap { value: mean_a });
    }
    Ok((mean_stab - mean_a) / (mean_b - mean_a) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn pairs(diffs: &[f64]) -> Vec<PairedSample> {
        diffs
            .iter()
            .enumerate()
            .map(|(i, d)| PairedSample {
                key: (0, i, 0),
                value_a: *d,
                value_b: 0.0,
            })
            .collect()
    }

    #[test]
    fn all_zero_diffs_give_p_one() {
        let out = paired_permutation_test(&pairs(&[0.0; 6]), 100, 1).unwrap();
        assert_eq!(out.p_value, 1.0);
        assert_eq!(out.mean_diff, 0.0);
    }

    #[test]
    fn five_equal_diffs_enumerate_to_exact_p() {
        let out = paired_permutation_test(&pairs(&[1.0; 5]), 2000, 1).unwrap();
        assert_eq!(out.mode, PermutationMode::Exact { patterns: 32 });
        assert_abs_diff_eq!(out.p_value, 0.0625, epsilon = 1e-15);
    }

    #[test]
    fn opposite_diffs_give_p_one() {
        let out = paired_permutation_test(&pairs(&[1.0, -1.0]), 100, 1).unwrap();
        assert_eq!(out.p_value, 1.0);
    }

    #[test]
    fn single_pair_is_rejected() {
        assert!(paired_permutation_test(&pairs(&[1.0]), 100, 1).is_err());
    }

    #[test]
    fn monte_carlo_mode_engages_past_twenty_pairs() {
        let diffs: Vec<f64> = (0..25).map(|i| 1.0 + 0.01 * i as f64).collect();
        let out = paired_permutation_test(&pairs(&diffs), 2000, 9).unwrap();
        assert_eq!(out.mode, PermutationMode::MonteCarlo { draws: 2000 });
        // Strongly one-sided diffs: p should sit near the 1/2001 floor.
        assert!(out.p_value < 0.01, "p = {}", out.p_value);
        assert!(out.p_value > 0.0);
    }

    #[test]
    fn exact_and_monte_carlo_agree_on_ten_pairs() {
        let diffs = [0.9, 1.3, -0.2, 0.7, 1.1, 0.4, -0.5, 0.8, 1.0, 0.3];
        let exact = paired_permutation_test(&pairs(&diffs), 0, 1).unwrap();
        assert!(matches!(exact.mode, PermutationMode::Exact { .. }));

        // Re-run the same diffs through the Monte Carlo path by padding
        // the sample with ten zero pairs (zeros never change any
        // permuted mean's magnitude ranking: every sum just divides by
        // 2n instead of n, on both the observed and permuted sides).
        let mut padded: Vec<f64> = diffs.to_vec();
        padded.extend([0.0; 11]);
        let mc = paired_permutation_test(&pairs(&padded), 2000, 5).unwrap();
        assert!(matches!(mc.mode, PermutationMode::MonteCarlo { .. }));
        let se = (exact.p_value * (1.0 - exact.p_value) / 2000.0).sqrt();
        assert!(
            (mc.p_value - exact.p_value).abs() <= 3.0 * se + 1e-3,
            "exact {} vs mc {}",
            exact.p_value,
            mc.p_value
        );
    }

    #[test]
    fn null_calibration_keeps_false_positive_rate_near_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let runs = 200;
        let mut hits = 0;
        for run in 0..runs {
            let samples: Vec<PairedSample> = (0..25)
                .map(|i| PairedSample {
                    key: (0, i, 0),
                    value_a: normal.sample(&mut rng),
                    value_b: normal.sample(&mut rng),
                })
                .collect();
            let out = paired_permutation_test(&samples, 500, 7000 + run).unwrap();
            if out.p_value < 0.05 {
                hits += 1;
            }
        }
        let fraction = hits as f64 / runs as f64;
        assert!(
            (0.025..=0.10).contains(&fraction),
            "false positive rate {fraction}"
        );
    }

    #[test]
    fn ranks_average_over_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn pearson_and_spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let out = correlations(&x, &y).unwrap();
        assert_abs_diff_eq!(out.pearson.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.spearman.unwrap(), 1.0, epsilon = 1e-12);

        let cube: Vec<f64> = x.iter().map(|v| -v * v * v).collect();
        let out = correlations(&x, &cube).unwrap();
        assert!(out.pearson.unwrap() > -1.0 && out.pearson.unwrap() < 0.0);
        assert_abs_diff_eq!(out.spearman.unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn tied_rank_fixture_matches_hand_computation() {
        let s = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().unwrap();
        assert_abs_diff_eq!(s, 0.9486832980505138, epsilon = 1e-12);
    }

    #[test]
    fn eight_point_fixture_matches_direct_formulas() {
        let x = [0.12, 0.55, 0.31, 0.87, 0.42, 0.68, 0.05, 0.93];
        let y = [0.3, 0.6, 0.2, 0.9, 0.55, 0.58, 0.11, 0.78];
        let out = correlations(&x, &y).unwrap();
        // Straight-line recomputation.
        let n = 8.0;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        assert_abs_diff_eq!(out.pearson.unwrap(), sxy / (sxx * syy).sqrt(), epsilon = 1e-9);
        let rx = average_ranks(&x);
        let ry = average_ranks(&y);
        let expected = pearson(&rx, &ry).unwrap().unwrap();
        assert_abs_diff_eq!(out.spearman.unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn constant_inputs_yield_missing_correlations() {
        let out = correlations(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.pearson, None);
        assert_eq!(out.spearman, None);
    }

    #[test]
    fn aggregation_handles_missing_and_single_values() {
        let mk = |method: &str, object: usize, metric: &str, value: Option<f64>| KeyedValue {
            method: method.into(),
            slice: 0,
            object,
            iteration: 0,
            metric: metric.into(),
            value,
        };
        let rows = aggregate_metrics(
            &[
                mk("a", 0, "tcs", Some(0.8)),
                mk("a", 1, "tcs", Some(0.6)),
                mk("a", 0, "ccd", None),
                mk("a", 1, "ccd", Some(0.5)),
                mk("b", 0, "tcs", Some(0.9)),
            ],
            &[GroupField::Method],
        );
        assert_eq!(rows.len(), 3);
        let tcs_a = rows.iter().find(|r| r.group == ["a"] && r.metric == "tcs").unwrap();
        assert_abs_diff_eq!(tcs_a.mean, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(tcs_a.std.unwrap(), (0.02f64 / 1.0).sqrt(), epsilon = 1e-12);
        assert_eq!(tcs_a.n, 2);
        let ccd_a = rows.iter().find(|r| r.group == ["a"] && r.metric == "ccd").unwrap();
        assert_eq!((ccd_a.n, ccd_a.std), (1, None));
        assert_abs_diff_eq!(ccd_a.mean, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn five_value_aggregate_matches_spreadsheet_arithmetic() {
        let vals = [0.2, 0.4, 0.6, 0.8, 1.0];
        let rows: Vec<KeyedValue> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| KeyedValue {
                method: "a".into(),
                slice: i,
                object: 0,
                iteration: i,
                metric: "pics".into(),
                value: Some(*v),
            })
            .collect();
        let out = aggregate_metrics(&rows, &[GroupField::Method]);
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out[0].mean, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].std.unwrap(), 0.1f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn gap_closed_reproduces_published_percentage() {
        let gap = gap_closed(0.847, 0.960, 0.995).unwrap();
        assert_abs_diff_eq!(gap, 76.35135135135135, epsilon = 1e-9);
        assert_eq!(format!("{gap:.1}"), "76.4");
        assert_eq!(gap_closed(0.5, 0.5, 0.9).unwrap(), 0.0);
        assert_eq!(gap_closed(0.5, 0.9, 0.9).unwrap(), 100.0);
        assert!(matches!(gap_closed(0.5, 0.7, 0.5), Err(Error::UndefinedGap { .. })));
    }

    proptest! {
        #[test]
        fn permutation_p_is_order_independent(
            mut diffs in prop::collection::vec(-2.0f64..2.0, 24),
            seed in 0u64..50,
        ) {
            let p1 = paired_permutation_test(&pairs(&diffs), 300, seed).unwrap().p_value;
            diffs.reverse();
            diffs.rotate_left(7);
            let p2 = paired_permutation_test(&pairs(&diffs), 300, seed).unwrap().p_value;
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn exact_p_survives_global_sign_flip(diffs in prop::collection::vec(-2.0f64..2.0, 9)) {
            let p1 = paired_permutation_test(&pairs(&diffs), 0, 1).unwrap().p_value;
            let flipped: Vec<f64> = diffs.iter().map(|d| -d).collect();
            let p2 = paired_permutation_test(&pairs(&flipped), 0, 1).unwrap().p_value;
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn gap_closed_is_affine_invariant(
            a in -1.0f64..1.0,
            stab in -1.0f64..1.0,
            b in -1.0f64..1.0,
            scale in prop::sample::select(vec![-3.0f64, -0.5, 0.25, 2.0]),
            shift in -5.0f64..5.0,
        ) {
            prop_assume!((b - a).abs() > 1e-6);
            let g1 = gap_closed(a, stab, b).unwrap();
            let g2 = gap_closed(scale * a + shift, scale * stab + shift, scale * b + shift).unwrap();
            prop_assert!((g1 - g2).abs() < 1e-6 * g1.abs().max(1.0));
        }

        #[test]
        fn spearman_is_invariant_under_monotone_maps(
            x in prop::collection::vec(-10.0f64..10.0, 8),
            y in prop::collection::vec(-10.0f64..10.0, 8),
        ) {
            let s1 = spearman(&x, &y).unwrap();
            let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let s2 = spearman(&fx, &y).unwrap();
            match (s1, s2) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
