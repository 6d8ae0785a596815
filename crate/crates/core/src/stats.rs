//! ROI summaries, Wilcoxon signed-rank testing with significance banding,
//! and group-comparison data export.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fit::FitResult;

/// A labelled region of interest over a source volume.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoiMask {
    pub label: String,
    /// Flat voxel indices into the source volume.
    pub indices: Vec<usize>,
    /// Group tag (e.g. vascular / non-vascular); empty when untagged.
    pub group: String,
}

impl RoiMask {
    pub fn validate(&self, total_voxels: usize) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.indices {
            if i >= total_voxels {
                return Err(Error::Input(format!(
                    "ROI '{}' index {} outside volume of {} voxels",
                    self.label, i, total_voxels
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Input(format!(
                    "ROI '{}' has duplicate index {}",
                    self.label, i
                )));
            }
        }
        Ok(())
    }
}

/// Mean/median/SD for one parameter over an ROI. SD is the population
/// standard deviation (divide by n).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub n_used: usize,
    pub n_missing: usize,
}

/// Per-parameter summaries over the ROI's member voxels. Voxels with a
/// missing parameter value are excluded and counted.
pub fn roi_summary(fit: &FitResult, mask: &RoiMask) -> Result<BTreeMap<String, ParamSummary>> {
    let positions = roi_row_positions(fit, mask)?;
    if positions.is_empty() {
        return Err(Error::Input(format!(
            "ROI '{}' selects no fitted voxels",
            mask.label
        )));
    }
    let mut out = BTreeMap::new();
    for name in fit.param_names() {
        let mut values: Vec<f64> = Vec::with_capacity(positions.len());
        let mut missing = 0usize;
        for &row in &positions {
            match fit.param_value(row, name) {
                Some(v) => values.push(v),
                None => missing += 1,
            }
        }
        if values.is_empty() {
            out.insert(
                name.to_string(),
                ParamSummary {
                    mean: f64::NAN,
                    median: f64::NAN,
                    sd: f64::NAN,
                    n_used: 0,
                    n_missing: missing,
                },
            );
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        out.insert(
            name.to_string(),
            ParamSummary {
                mean,
                median: median_of(&mut values),
                sd,
                n_used: positions.len() - missing,
                n_missing: missing,
            },
        );
    }
    Ok(out)
}

/// Maps ROI voxel indices to row positions in the fit result.
fn roi_row_positions(fit: &FitResult, mask: &RoiMask) -> Result<Vec<usize>> {
    let mut positions = Vec::new();
    for &vi in &mask.indices {
        if let Ok(row) = fit.voxel_indices.binary_search(&vi) {
            positions.push(row);
        }
    }
    Ok(positions)
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Sample size at or below which the exact 2^n enumeration is used.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WilcoxonResult {
    /// W = min(W+, W-).
    pub statistic: f64,
    /// Pairs remaining after dropping zero differences.
    pub n_effective: usize,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: WilcoxonMethod,
    /// One of "****", "***", "**", "*", "n.s.".
    pub band: &'static str,
}

/// Significance band for a two-sided p-value. Boundary values fall in the
/// less-significant band (p = 0.05 is "n.s.").
pub fn significance_band(p: f64) -> &'static str {
    if p < 0.0001 {
        "****"
    } else if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "n.s."
    }
}

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped (Wilcoxon's convention); ties receive average ranks. Exact
/// enumeration of all 2^n sign assignments for n <= 20, otherwise the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Input(format!(
            "paired samples must have equal nonzero length, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("no nonzero pairs".into()));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let (p, method) = if n <= WILCOXON_EXACT_LIMIT {
        (exact_two_sided_p(&ranks, w), WilcoxonMethod::Exact)
    } else {
        (
            normal_two_sided_p(&ranks, w),
            WilcoxonMethod::NormalApproximation,
        )
    };
    let p = p.min(1.0);
    Ok(WilcoxonResult {
        statistic: w,
        n_effective: n,
        p_value: p,
        method,
        band: significance_band(p),
    })
}

/// Ranks of |d| with average ranks for ties (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p: the probability, over all 2^n equally likely sign
/// assignments of the fixed ranks, that min(W+, W-) is at most the
/// observed statistic.
fn exact_two_sided_p(ranks: &[f64], w_observed: f64) -> f64 {
    let n = ranks.len();
    let total: f64 = ranks.iter().sum();
    let mut count = 0u64;
    // Rank sums are multiples of 0.5, so compare with a half-ulp slack.
    let tol = 1e-9;
    for mask in 0u64..(1u64 << n) {
        let mut w_plus = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask & (1 << i) != 0 {
                w_plus += r;
            }
        }
        if w_plus.min(total - w_plus) <= w_observed + tol {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

/// Normal approximation with tie correction and a 0.5 continuity
/// correction.
fn normal_two_sided_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / var.sqrt();
    let phi = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    2.0 * phi
}

// ---------------------------------------------------------------------------
// Group data export
// ---------------------------------------------------------------------------

/// One fitted subject with its ROI masks.
#[derive(Debug, Clone)]
pub struct SubjectFit {
    pub subject: String,
    pub fit: FitResult,
    pub masks: Vec<RoiMask>,
}

/// One exported row: the ROI median of one parameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupRow {
    pub subject: String,
    pub roi_label: String,
    pub group: String,
    pub parameter: String,
    pub value: f64,
}

/// Exports one row per (subject, ROI, parameter): the ROI median. The
/// `grouping` map overrides each ROI's group tag by label.
pub fn export_group_data(
    subjects: &[SubjectFit],
    grouping: &BTreeMap<String, String>,
) -> Result<Vec<GroupRow>> {
    let mut rows = Vec::new();
    for s in subjects {
        for mask in &s.masks {
            let summary = roi_summary(&s.fit, mask)?;
            let group = grouping
                .get(&mask.label)
                .cloned()
                .unwrap_or_else(|| mask.group.clone());
            for (parameter, ps) in &summary {
                rows.push(GroupRow {
                    subject: s.subject.clone(),
                    roi_label: mask.label.clone(),
                    group: group.clone(),
                    parameter: parameter.clone(),
                    value: ps.median,
                });
            }
        }
    }
    Ok(rows)
}

/// Writes group rows as CSV (RFC 4180 quoting, UTF-8). Values are written
/// with nine significant digits.
pub fn write_group_csv(rows: &[GroupRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject", "roi_label", "group", "parameter", "value"])?;
    for r in rows {
        w.write_record([
            r.subject.as_str(),
            r.roi_label.as_str(),
            r.group.as_str(),
            r.parameter.as_str(),
            &format!("{:.9}", SigDigits(r.value)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads group rows written by [`write_group_csv`].
pub fn read_group_csv(path: &Path) -> Result<Vec<GroupRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Formats with nine significant digits (round-trip precision contract of
/// the group CSV).
struct SigDigits(f64);

impl std::fmt::Display for SigDigits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.8e}", self.0)
    }
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(
            "pearson needs two equally sized samples of length >= 2".into(),
        ));
    }
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
        return Err(Error::Degenerate("constant sample in correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: distribution of W+ over sign assignments by
    /// dynamic programming on doubled ranks (integers), counting
    /// assignments with min(W+, W-) <= observed.
    fn enumeration_oracle_p(ranks: &[f64], w_observed: f64) -> f64 {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total: u64 = doubled.iter().sum();
        let mut counts: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
        counts.insert(0, 1);
        for &r in &doubled {
            let mut next = std::collections::HashMap::new();
            for (&s, &c) in &counts {
                *next.entry(s).or_insert(0) += c;
                *next.entry(s + r).or_insert(0) += c;
            }
            counts = next;
        }
        let w2 = (2.0 * w_observed).round() as u64;
        let hits: u64 = counts
            .iter()
            .filter(|(&s, _)| s.min(total - s) <= w2)
            .map(|(_, &c)| c)
            .sum();
        hits as f64 / 2f64.powi(ranks.len() as i32)
    }

    #[test]
    fn all_positive_five_pairs() {
        let x = [2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 1.5, 2.0, 2.5, 3.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.n_effective, 5);
        assert_relative_eq!(r.p_value, 0.0625, max_relative = 1e-12);
        assert_eq!(r.band, "n.s.");
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn exact_path_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let n = rng.gen_range(2..=10);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            // Mix of continuous and tied differences.
            let y: Vec<f64> = x
                .iter()
                .map(|v| {
                    if rng.gen_bool(0.3) {
                        v - rng.gen_range(-2i32..=2) as f64 * 0.5
                    } else {
                        v - rng.gen_range(-1.5..1.5)
                    }
                })
                .collect();
            let Ok(r) = wilcoxon_signed_rank(&x, &y) else {
                continue;
            };
            let diffs: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(a, b)| a - b)
                .filter(|d| *d != 0.0)
                .collect();
            let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
            let oracle = enumeration_oracle_p(&ranks, r.statistic);
            assert_eq!(r.p_value, oracle.min(1.0), "case {}", case);
        }
    }

    #[test]
    fn rank_sum_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..15);
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    if v == 0.0 {
                        0.1
                    } else {
                        v
                    }
                })
                .collect();
            let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
            let w_plus: f64 = diffs
                .iter()
                .zip(&ranks)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, r)| r)
                .sum();
            let w_minus: f64 = diffs
                .iter()
                .zip(&ranks)
                .filter(|(d, _)| **d < 0.0)
                .map(|(_, r)| r)
                .sum();
            let n_f = diffs.len() as f64;
            assert_relative_eq!(w_plus + w_minus, n_f * (n_f + 1.0) / 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_p_is_invariant_under_positive_affine_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.gen_range(3..=10);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let Ok(base) = wilcoxon_signed_rank(&x, &y) else {
                continue;
            };
            let a = rng.gen_range(0.1..5.0);
            let b = rng.gen_range(-3.0..3.0);
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let yt: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let t = wilcoxon_signed_rank(&xt, &yt).unwrap();
            assert_eq!(base.p_value, t.p_value);
            assert_eq!(base.n_effective, t.n_effective);
        }
    }

    #[test]
    fn band_boundaries_fall_in_less_significant_band() {
        assert_eq!(significance_band(0.05), "n.s.");
        assert_eq!(significance_band(0.049999), "*");
        assert_eq!(significance_band(0.01), "*");
        assert_eq!(significance_band(0.009999), "**");
        assert_eq!(significance_band(0.001), "**");
        assert_eq!(significance_band(0.0001), "***");
        assert_eq!(significance_band(0.00009), "****");
        assert_eq!(significance_band(0.2), "n.s.");
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 0.3).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApproximation);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 1.0, 2.0, 3.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.n_effective, 3);
    }

    #[test]
    fn pearson_oracle_cases() {
        let x = [1.0, 2.0, 3.0];
        let y = [3.0, 2.0, 1.0];
        assert_relative_eq!(pearson(&x, &y).unwrap(), -1.0, max_relative = 1e-12);
        assert_relative_eq!(pearson(&x, &x).unwrap(), 1.0, max_relative = 1e-12);
        assert!(pearson(&x, &[1.0, 1.0, 1.0]).is_err());
    }
}
