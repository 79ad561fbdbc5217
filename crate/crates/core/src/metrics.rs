//! Classification metrics and the chi-square independence test.
//!
//! Accuracy and macro-F1 are the evaluation currency of the whole pipeline
//! (model selection, soup acceptance, final reports). The chi-square test
//! backs the demographic analyses: counts may be fractional because buckets
//! are impression-weighted shares, which is accepted but flagged so reports
//! can disclose it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and gold label counts differ: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("empty label sequence")]
    Empty,
    #[error("label `{0}` is not in the declared class set")]
    UnknownLabel(String),
    #[error("duplicate class `{0}` in the declared class set")]
    DuplicateClass(String),
    #[error("invalid contingency table: {0}")]
    BadTable(String),
    #[error("degrees of freedom must be at least 1")]
    BadDegreesOfFreedom,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

// ---------------------------------------------------------------------------
// Accuracy / F1
// ---------------------------------------------------------------------------

/// Fraction of positions where prediction equals gold.
pub fn accuracy<L: PartialEq>(pred: &[L], gold: &[L]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class precision/recall/F1 with support (gold count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Accuracy, macro-F1, and the per-class breakdown.
///
/// A class with no predictions and no gold occurrences has all three scores
/// defined as 0 (rather than NaN), which drags the macro average down; that
/// convention is deliberate and is what `macro_f1` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, PerClass>,
}

fn class_index<L: PartialEq>(classes: &[L], label: &L) -> Option<usize> {
    classes.iter().position(|c| c == label)
}

/// Full classification report over a declared class set.
///
/// Every prediction and gold label must belong to `classes`; the macro-F1 is
/// the unweighted mean of per-class F1 over **all** declared classes.
pub fn classification_report<L>(pred: &[L], gold: &[L], classes: &[L]) -> Result<MetricReport>
where
    L: PartialEq + Clone + std::fmt::Display,
{
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    if classes.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(MetricsError::DuplicateClass(c.to_string()));
        }
    }
    let k = classes.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (p, g) in pred.iter().zip(gold) {
        let pi = class_index(classes, p)
            .ok_or_else(|| MetricsError::UnknownLabel(p.to_string()))?;
        let gi = class_index(classes, g)
            .ok_or_else(|| MetricsError::UnknownLabel(g.to_string()))?;
        support[gi] += 1;
        if pi == gi {
            tp[pi] += 1;
        } else {
            fp[pi] += 1;
            fn_[gi] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut f1_sum = 0.0;
    for (i, class) in classes.iter().enumerate() {
        let precision = if tp[i] + fp[i] == 0 {
            0.0
        } else {
            tp[i] as f64 / (tp[i] + fp[i]) as f64
        };
        let recall = if tp[i] + fn_[i] == 0 {
            0.0
        } else {
            tp[i] as f64 / (tp[i] + fn_[i]) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.insert(
            class.to_string(),
            PerClass {
                precision,
                recall,
                f1,
                support: support[i],
            },
        );
    }
    Ok(MetricReport {
        accuracy: accuracy(pred, gold)?,
        macro_f1: f1_sum / k as f64,
        per_class,
    })
}

/// Unweighted mean of per-class F1 over the declared class set.
pub fn macro_f1<L>(pred: &[L], gold: &[L], classes: &[L]) -> Result<f64>
where
    L: PartialEq + Clone + std::fmt::Display,
{
    Ok(classification_report(pred, gold, classes)?.macro_f1)
}

// ---------------------------------------------------------------------------
// Chi-square independence test
// ---------------------------------------------------------------------------

/// An r×c table of observed counts with named margins. Counts are f64 so
/// impression-weighted (fractional) tallies can be tested; the report flags
/// when that happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<f64>>,
}

impl ContingencyTable {
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        counts: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let table = ContingencyTable {
            row_labels,
            col_labels,
            counts,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        let r = self.row_labels.len();
        let c = self.col_labels.len();
        if r < 2 || c < 2 {
            return Err(MetricsError::BadTable(format!(
                "need at least 2 rows and 2 columns, got {r}x{c}"
            )));
        }
        if self.counts.len() != r {
            return Err(MetricsError::BadTable(format!(
                "{} count rows for {r} row labels",
                self.counts.len()
            )));
        }
        for row in &self.counts {
            if row.len() != c {
                return Err(MetricsError::BadTable(format!(
                    "{} count columns for {c} column labels",
                    row.len()
                )));
            }
            for &v in row {
                if !v.is_finite() {
                    return Err(MetricsError::NonFinite("contingency counts".into()));
                }
                if v < 0.0 {
                    return Err(MetricsError::BadTable(format!("negative count {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let c = self.col_labels.len();
        let mut sums = vec![0.0; c];
        for row in &self.counts {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }
}

/// Outcome of a chi-square independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub df: u64,
    pub p_value: f64,
    #[serde(rename = "significant_at_0.05")]
    pub significant_at_0_05: bool,
    /// True when any observed count was non-integral (e.g. impression-share
    /// weighting); the test still runs but consumers should disclose it.
    pub fractional_counts: bool,
}

/// Pearson chi-square test of independence.
///
/// Expected counts are `row_sum · col_sum / total`; the statistic is
/// `Σ (observed − expected)² / expected` with `(r−1)(c−1)` degrees of
/// freedom; no continuity correction is applied. Zero row or column
/// marginals are rejected (their expected counts would be zero).
pub fn chi_square(table: &ContingencyTable) -> Result<ChiSquareReport> {
    table.validate()?;
    let row_sums = table.row_sums();
    let col_sums = table.col_sums();
    let total = table.total();
    if total <= 0.0 {
        return Err(MetricsError::BadTable("table total is zero".into()));
    }
    if let Some(i) = row_sums.iter().position(|&s| s == 0.0) {
        return Err(MetricsError::BadTable(format!(
            "row `{}` has zero marginal",
            table.row_labels[i]
        )));
    }
    if let Some(j) = col_sums.iter().position(|&s| s == 0.0) {
        return Err(MetricsError::BadTable(format!(
            "column `{}` has zero marginal",
            table.col_labels[j]
        )));
    }
    let mut statistic = 0.0;
    let mut fractional = false;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &observed) in row.iter().enumerate() {
            if observed.fract() != 0.0 {
                fractional = true;
            }
            let expected = row_sums[i] * col_sums[j] / total;
            let diff = observed - expected;
            statistic += diff * diff / expected;
        }
    }
    let df = (table.row_labels.len() as u64 - 1) * (table.col_labels.len() as u64 - 1);
    let p_value = chi2_sf(statistic, df)?;
    Ok(ChiSquareReport {
        statistic,
        df,
        p_value,
        significant_at_0_05: p_value < 0.05,
        fractional_counts: fractional,
    })
}

/// Chi-square survival function: P(X ≥ x) for X ~ χ²(df), computed as the
/// regularized upper incomplete gamma Q(df/2, x/2). For df = 2 this reduces
/// to exp(−x/2). Values of x ≤ 0 return 1 by convention.
pub fn chi2_sf(x: f64, df: u64) -> Result<f64> {
    if df == 0 {
        return Err(MetricsError::BadDegreesOfFreedom);
    }
    if !x.is_finite() {
        return Err(MetricsError::NonFinite("chi2_sf statistic".into()));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(df as f64 / 2.0, x / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(counts: Vec<Vec<f64>>) -> ContingencyTable {
        let r = counts.len();
        let c = counts[0].len();
        ContingencyTable::new(
            (0..r).map(|i| format!("r{i}")).collect(),
            (0..c).map(|j| format!("c{j}")).collect(),
            counts,
        )
        .unwrap()
    }

    #[test]
    fn accuracy_and_macro_f1_two_class_example() {
        // gold [A, B], pred [A, A]: accuracy 1/2; F1(A) = 2/3 (precision 1/2,
        // recall 1), F1(B) = 0 (no predictions), macro = 1/3.
        let gold = vec!["A", "B"];
        let pred = vec!["A", "A"];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.5);
        let report = classification_report(&pred, &gold, &["A", "B"]).unwrap();
        assert!((report.per_class["A"].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.per_class["B"].f1, 0.0);
        assert!((report.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.per_class["A"].support, 1);
        assert_eq!(report.per_class["B"].support, 1);
    }

    #[test]
    fn unrepresented_class_scores_zero_not_nan() {
        // Class C never predicted and never gold: all zeros, macro over 3.
        let gold = vec!["A", "B"];
        let pred = vec!["A", "B"];
        let report = classification_report(&pred, &gold, &["A", "B", "C"]).unwrap();
        assert_eq!(report.per_class["C"].f1, 0.0);
        assert!((report.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_bad_inputs() {
        let a = vec!["A"];
        let ab = vec!["A", "B"];
        assert!(matches!(
            accuracy(&a, &ab),
            Err(MetricsError::LengthMismatch { .. })
        ));
        let empty: Vec<&str> = vec![];
        assert!(matches!(accuracy(&empty, &empty), Err(MetricsError::Empty)));
        assert!(matches!(
            macro_f1(&vec!["X"], &vec!["A"], &["A", "B"]),
            Err(MetricsError::UnknownLabel(_))
        ));
        assert!(matches!(
            macro_f1(&vec!["A"], &vec!["A"], &["A", "A"]),
            Err(MetricsError::DuplicateClass(_))
        ));
    }

    #[test]
    fn chi_square_two_by_two_matches_frozen_oracle() {
        // Statistic by hand: expected [[12,18],[28,42]] gives
        // 4/12 + 4/18 + 4/28 + 4/42 = 0.7936507936…, df 1.
        // p frozen from two independent 40-digit routes (regularized upper
        // incomplete gamma and direct tail quadrature), which agree exactly.
        let report = chi_square(&table(vec![vec![10.0, 20.0], vec![30.0, 40.0]])).unwrap();
        assert!((report.statistic - 0.7936507936507936).abs() < 1e-12);
        assert_eq!(report.df, 1);
        assert!((report.p_value - 0.3729984836134871).abs() < 1e-10);
        assert!(!report.significant_at_0_05);
        assert!(!report.fractional_counts);
    }

    #[test]
    fn chi_square_three_by_two_df_and_closed_form() {
        // Rows 20/30/30, equal column marginals: expected [[10,10],[15,15],
        // [15,15]], statistic 4·25/15 = 20/3, df (3−1)(2−1) = 2, where the
        // survival function is exactly exp(−x/2).
        let report = chi_square(&table(vec![
            vec![10.0, 10.0],
            vec![10.0, 20.0],
            vec![20.0, 10.0],
        ]))
        .unwrap();
        assert!((report.statistic - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.df, 2);
        assert!((report.p_value - (-10.0_f64 / 3.0).exp()).abs() < 1e-12);
        assert!((report.p_value - 0.03567399334725240).abs() < 1e-10);
        assert!(report.significant_at_0_05);
    }

    #[test]
    fn chi_square_independent_table_is_fixed_point() {
        // Rank-1 counts: observed == expected, statistic 0, p 1.
        let report = chi_square(&table(vec![vec![10.0, 20.0], vec![20.0, 40.0]])).unwrap();
        assert_eq!(report.statistic, 0.0);
        assert_eq!(report.p_value, 1.0);
        assert!(!report.significant_at_0_05);
    }

    #[test]
    fn chi_square_flags_fractional_counts() {
        let report = chi_square(&table(vec![vec![10.5, 20.0], vec![30.0, 40.0]])).unwrap();
        assert!(report.fractional_counts);
    }

    #[test]
    fn chi_square_rejects_degenerate_tables() {
        assert!(matches!(
            ContingencyTable::new(
                vec!["r0".into()],
                vec!["c0".into(), "c1".into()],
                vec![vec![1.0, 2.0]],
            ),
            Err(MetricsError::BadTable(_))
        ));
        assert!(matches!(
            chi_square(&table(vec![vec![0.0, 0.0], vec![3.0, 4.0]])),
            Err(MetricsError::BadTable(_))
        ));
        assert!(matches!(
            chi_square(&table(vec![vec![0.0, 1.0], vec![0.0, 4.0]])),
            Err(MetricsError::BadTable(_))
        ));
        assert!(matches!(
            ContingencyTable::new(
                vec!["r0".into(), "r1".into()],
                vec!["c0".into(), "c1".into()],
                vec![vec![-1.0, 2.0], vec![3.0, 4.0]],
            ),
            Err(MetricsError::BadTable(_))
        ));
    }

    #[test]
    fn chi2_sf_frozen_values() {
        // Frozen from 40-digit mpmath (gamma and quadrature routes agree).
        assert!((chi2_sf(12.5, 6).unwrap() - 0.05169997483584834).abs() < 1e-10);
        assert!((chi2_sf(1.7, 5).unwrap() - 0.8888997594927638).abs() < 1e-10);
        assert_eq!(chi2_sf(0.0, 3).unwrap(), 1.0);
        assert_eq!(chi2_sf(-1.0, 3).unwrap(), 1.0);
        assert!(matches!(chi2_sf(1.0, 0), Err(MetricsError::BadDegreesOfFreedom)));
    }

    #[test]
    fn chi2_sf_df2_matches_closed_form() {
        for i in 1..40 {
            let x = i as f64 * 0.5;
            let sf = chi2_sf(x, 2).unwrap();
            assert!(
                (sf - (-x / 2.0).exp()).abs() < 1e-10,
                "x={x}: {sf} vs {}",
                (-x / 2.0).exp()
            );
        }
    }

    proptest! {
        #[test]
        fn accuracy_is_a_fraction(labels in proptest::collection::vec(0usize..3, 1..50)) {
            let pred: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
            let acc = accuracy(&pred, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }

        #[test]
        fn macro_f1_bounded_and_perfect_on_identity(
            labels in proptest::collection::vec(0usize..3, 1..50)
        ) {
            let classes = [0usize, 1, 2];
            let f1 = macro_f1(&labels, &labels, &classes).unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
            // Identity predictions: every class present in gold has F1 = 1;
            // absent classes contribute 0, so macro = present/3.
            let present = classes.iter().filter(|c| labels.contains(c)).count();
            prop_assert!((f1 - present as f64 / 3.0).abs() < 1e-12);
        }

        #[test]
        fn chi2_sf_monotone_decreasing(df in 1u64..8, x in 0.1f64..30.0) {
            let a = chi2_sf(x, df).unwrap();
            let b = chi2_sf(x + 0.5, df).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a + 1e-12);
        }

        #[test]
        fn chi_square_statistic_non_negative(
            c00 in 1.0f64..50.0, c01 in 1.0f64..50.0,
            c10 in 1.0f64..50.0, c11 in 1.0f64..50.0,
        ) {
            let report = chi_square(&table(vec![
                vec![c00.round(), c01.round()],
                vec![c10.round(), c11.round()],
            ])).unwrap();
            prop_assert!(report.statistic >= 0.0);
            prop_assert!((0.0..=1.0).contains(&report.p_value));
        }
    }
}
