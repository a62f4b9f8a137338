//! Calibration and corpus-characterization tooling: the retrospective
//! threshold sweep, component correlations, the V1/V2 dispersion ablation,
//! category-by-bin cross tabs and score distribution summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::{Bin, Category, DifficultyRecord, ScorerVersion};
use crate::stats::{mean, pearson, percentile_sorted, population_std, sorted_copy};

pub const SWEEP_HEADER: &str = "threshold,path1_global_rate,n_total";
pub const DEFAULT_TARGET_RATE: f64 = 0.30;
pub const COLLAPSE_ABS_R: f64 = 0.6;
pub const MIN_CORRELATION_RECORDS: usize = 30;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub path1_global_rate: f64,
    pub n_total: usize,
}

/// Path-1 global rate at each candidate threshold: the share of recorded
/// combined-diff means strictly above it. This is a lower bound on the
/// total global rate since mask-area promotion is not simulated.
pub fn sweep_thresholds(cdm_values: &[f64], candidates: &[f64]) -> Result<Vec<SweepRow>> {
    if cdm_values.is_empty() {
        return Err(Error::Invalid("threshold sweep over zero values".into()));
    }
    let sorted = sorted_copy(cdm_values);
    let n = sorted.len();
    Ok(candidates
        .iter()
        .map(|&t| {
            let at_or_below = sorted.partition_point(|&v| v <= t);
            SweepRow {
                threshold: t,
                path1_global_rate: (n - at_or_below) as f64 / n as f64,
                n_total: n,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.threshold, r.path1_global_rate, r.n_total);
    }
    out
}

/// Candidate whose rate is closest to `target`; ties keep the lower
/// threshold.
pub fn calibrate(rows: &[SweepRow], target: f64) -> Option<SweepRow> {
    let mut sorted: Vec<SweepRow> = rows.to_vec();
    sorted.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut best: Option<SweepRow> = None;
    for r in sorted {
        let better = match best {
            None => true,
            Some(b) => (r.path1_global_rate - target).abs() < (b.path1_global_rate - target).abs(),
        };
        if better {
            best = Some(r);
        }
    }
    best
}

/// One signal stack's calibration outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackCalibration {
    pub stack: String,
    pub cdm_mean: f64,
    pub tau: f64,
}

/// Threshold shift next to combined-diff-mean shift between consecutive
/// stacks, one line per step.
pub fn inflation_report(stacks: &[StackCalibration]) -> String {
    let mut out = String::new();
    for pair in stacks.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let _ = writeln!(
            out,
            "{} -> {}: Δτ={:+.2}, Δcdm={:+.3}",
            a.stack,
            b.stack,
            b.tau - a.tau,
            b.cdm_mean - a.cdm_mean
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub components: Vec<String>,
    /// Symmetric, unit diagonal; `None` where a component has zero variance.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// True when every pair in the magnitude trio has |r| at or above
    /// [`COLLAPSE_ABS_R`].
    pub collapse: bool,
    pub struct_compact_r: Option<f64>,
}

impl CorrelationReport {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.components.iter().position(|c| c == a)?;
        let j = self.components.iter().position(|c| c == b)?;
        self.matrix[i][j]
    }
}

/// Per-triplet component vectors for the correlation analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentRow {
    pub s_struct: f64,
    pub s_perc: f64,
    pub s_loc: f64,
    pub s_instr: f64,
    pub s_compact: Option<f64>,
}

pub fn correlation_analysis(rows: &[ComponentRow]) -> Result<CorrelationReport> {
    if rows.len() < MIN_CORRELATION_RECORDS {
        return Err(Error::Invalid(format!(
            "correlation analysis needs at least {MIN_CORRELATION_RECORDS} records, got {}",
            rows.len()
        )));
    }
    let names = ["s_struct", "s_perc", "s_loc", "s_instr"];
    let cols: Vec<Vec<f64>> = vec![
        rows.iter().map(|r| r.s_struct).collect(),
        rows.iter().map(|r| r.s_perc).collect(),
        rows.iter().map(|r| r.s_loc).collect(),
        rows.iter().map(|r| r.s_instr).collect(),
    ];
    let mut matrix = vec![vec![None; 4]; 4];
    for i in 0..4 {
        matrix[i][i] = pearson(&cols[i], &cols[i]).map(|_| 1.0);
        for j in i + 1..4 {
            let r = pearson(&cols[i], &cols[j]);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    let collapse = [(0, 1), (0, 2), (1, 2)]
        .iter()
        .all(|&(i, j)| matrix[i][j].is_some_and(|r| r.abs() >= COLLAPSE_ABS_R));
    let struct_compact_r = if rows.iter().all(|r| r.s_compact.is_some()) {
        let compact: Vec<f64> = rows.iter().map(|r| r.s_compact.unwrap()).collect();
        pearson(&cols[0], &compact)
    } else {
        None
    };
    Ok(CorrelationReport {
        components: names.iter().map(|s| s.to_string()).collect(),
        matrix,
        collapse,
        struct_compact_r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub n: usize,
    pub sigma_v1: f64,
    pub sigma_v2: f64,
    /// `100 * (sigma_v2 / sigma_v1 - 1)`.
    pub widening_pct: f64,
    pub bins_v1: BTreeMap<Bin, usize>,
    pub bins_v2: BTreeMap<Bin, usize>,
}

fn bin_counts(records: &[DifficultyRecord]) -> BTreeMap<Bin, usize> {
    let mut m: BTreeMap<Bin, usize> = Bin::ALL.iter().map(|b| (*b, 0)).collect();
    for r in records {
        *m.entry(r.bin).or_default() += 1;
    }
    m
}

/// Compares score dispersion of the two scorers on the same triplets.
pub fn ablation_report(v1: &[DifficultyRecord], v2: &[DifficultyRecord]) -> Result<AblationReport> {
    if v1.iter().any(|r| r.scorer_version != ScorerVersion::V1)
        || v2.iter().any(|r| r.scorer_version != ScorerVersion::V2)
    {
        return Err(Error::Invalid(
            "ablation inputs have the wrong scorer versions".into(),
        ));
    }
    fn ids(rs: &[DifficultyRecord]) -> Vec<&str> {
        let mut v: Vec<&str> = rs.iter().map(|r| r.triplet_id.as_str()).collect();
        v.sort_unstable();
        v
    }
    if ids(v1) != ids(v2) {
        return Err(Error::Invalid(
            "ablation inputs cover different triplets".into(),
        ));
    }
    let s1: Vec<f64> = v1.iter().map(|r| r.score).collect();
    let s2: Vec<f64> = v2.iter().map(|r| r.score).collect();
    Ok(widening(&s1, &s2, bin_counts(v1), bin_counts(v2)))
}

/// Dispersion comparison over raw score vectors.
pub fn widening(
    v1: &[f64],
    v2: &[f64],
    bins_v1: BTreeMap<Bin, usize>,
    bins_v2: BTreeMap<Bin, usize>,
) -> AblationReport {
    let sigma_v1 = population_std(v1);
    let sigma_v2 = population_std(v2);
    let widening_pct = if sigma_v1 > 0.0 {
        100.0 * (sigma_v2 / sigma_v1 - 1.0)
    } else {
        0.0
    };
    AblationReport {
        n: v1.len(),
        sigma_v1,
        sigma_v2,
        widening_pct,
        bins_v1,
        bins_v2,
    }
}

/// Percentages per bin for each category; `None` for empty categories.
pub type Crosstab = BTreeMap<Category, Option<[f64; 3]>>;

pub fn crosstab(pairs: &[(Category, Bin)]) -> Crosstab {
    let mut counts: BTreeMap<Category, [usize; 3]> =
        Category::ALL.iter().map(|c| (*c, [0; 3])).collect();
    for (c, b) in pairs {
        let idx = Bin::ALL.iter().position(|x| x == b).expect("bin in ALL");
        counts.get_mut(c).expect("category in ALL")[idx] += 1;
    }
    counts
        .into_iter()
        .map(|(c, k)| {
            let total: usize = k.iter().sum();
            let row = (total > 0).then(|| k.map(|v| 100.0 * v as f64 / total as f64));
            (c, row)
        })
        .collect()
}

pub fn crosstab_csv(table: &Crosstab) -> String {
    let mut out = String::from("category,easy_pct,medium_pct,hard_pct\n");
    for (c, row) in table {
        match row {
            Some([e, m, h]) => {
                let _ = writeln!(out, "{c},{e:.1},{m:.1},{h:.1}");
            }
            None => {
                let _ = writeln!(out, "{c},---,---,---");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionStats {
    pub n: usize,
    pub mean: f64,
    pub sigma: f64,
    pub p33: f64,
    pub p66: f64,
    /// Counts over [`HISTOGRAM_BINS`] equal-width bins on [0, 1]; the last
    /// bin is closed.
    pub histogram: Vec<usize>,
}

pub fn distribution_stats(scores: &[f64]) -> Result<DistributionStats> {
    if scores.len() < 3 {
        return Err(Error::Invalid(format!(
            "distribution stats need at least 3 scores, got {}",
            scores.len()
        )));
    }
    let sorted = sorted_copy(scores);
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for &s in scores {
        let idx = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[idx] += 1;
    }
    Ok(DistributionStats {
        n: scores.len(),
        mean: mean(scores),
        sigma: population_std(scores),
        p33: percentile_sorted(&sorted, 1, 3),
        p66: percentile_sorted(&sorted, 2, 3),
        histogram,
    })
}

pub fn histogram_csv(stats: &DistributionStats) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let w = 1.0 / HISTOGRAM_BINS as f64;
    for (i, c) in stats.histogram.iter().enumerate() {
        let _ = writeln!(out, "{:.2},{:.2},{c}", i as f64 * w, (i + 1) as f64 * w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_examples() {
        let rows = sweep_thresholds(&[0.1, 0.5, 0.7, 0.9], &[0.62, 0.05, 0.9]).unwrap();
        assert_eq!(rows[0].path1_global_rate, 0.5);
        assert_eq!(rows[0].n_total, 4);
        assert_eq!(rows[1].path1_global_rate, 1.0);
        assert_eq!(rows[2].path1_global_rate, 0.0);
        assert!(sweep_thresholds(&[], &[0.5]).is_err());
        assert_eq!(
            sweep_csv(&rows[..1]),
            "threshold,path1_global_rate,n_total\n0.62,0.5,4\n"
        );
    }

    #[test]
    fn calibration_ties_go_low() {
        let rows = [
            SweepRow {
                threshold: 0.6,
                path1_global_rate: 0.25,
                n_total: 4,
            },
            SweepRow {
                threshold: 0.5,
                path1_global_rate: 0.35,
                n_total: 4,
            },
            SweepRow {
                threshold: 0.7,
                path1_global_rate: 0.1,
                n_total: 4,
            },
        ];
        assert_eq!(calibrate(&rows, 0.30).unwrap().threshold, 0.5);
    }

    #[test]
    fn inflation_report_on_calibration_table() {
        let stacks = [
            StackCalibration {
                stack: "lab+ssim".into(),
                cdm_mean: 0.429,
                tau: 0.52,
            },
            StackCalibration {
                stack: "lab+perceptual".into(),
                cdm_mean: 0.465,
                tau: 0.56,
            },
            StackCalibration {
                stack: "lab+perceptual+ssim".into(),
                cdm_mean: 0.530,
                tau: 0.62,
            },
        ];
        let text = inflation_report(&stacks);
        assert!(text.contains("Δτ=+0.04, Δcdm=+0.036"), "{text}");
        assert!(text.contains("Δτ=+0.06, Δcdm=+0.065"), "{text}");
    }

    #[test]
    fn crosstab_rows() {
        let t = crosstab(&[
            (Category::Geometric, Bin::Easy),
            (Category::Geometric, Bin::Medium),
            (Category::Geometric, Bin::Hard),
        ]);
        let row = t[&Category::Geometric].unwrap();
        assert!(row.iter().all(|v| (v - 100.0 / 3.0).abs() < 1e-12));
        assert!(t[&Category::TextEdit].is_none());
        assert!(crosstab_csv(&t).contains("text_edit,---,---,---"));
    }

    #[test]
    fn distribution_examples() {
        let s = distribution_stats(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.sigma - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.histogram[0], 1);
        assert_eq!(s.histogram[25], 1);
        assert_eq!(s.histogram[49], 1);
        assert_eq!(distribution_stats(&[0.3; 5]).unwrap().sigma, 0.0);
        assert!(distribution_stats(&[0.3; 2]).is_err());
    }

    #[test]
    fn correlation_extremes() {
        let rows: Vec<ComponentRow> = (0..40)
            .map(|i| {
                let s = i as f64 / 40.0;
                ComponentRow {
                    s_struct: s,
                    s_perc: s,
                    s_loc: 1.0 - s,
                    s_instr: 0.3,
                    s_compact: None,
                }
            })
            .collect();
        let r = correlation_analysis(&rows).unwrap();
        assert!((r.get("s_struct", "s_perc").unwrap() - 1.0).abs() < 1e-12);
        assert!((r.get("s_struct", "s_loc").unwrap() + 1.0).abs() < 1e-12);
        assert!(r.get("s_struct", "s_instr").is_none());
        assert!(r.collapse);
        assert!(correlation_analysis(&rows[..10]).is_err());
    }
}
