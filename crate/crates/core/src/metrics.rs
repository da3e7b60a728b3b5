//! Evaluation protocol: per-repetition records and cross-repetition metrics.
//!
//! A simulation run produces one [`RepetitionRecord`] per repetition, holding
//! the ground-truth summaries and, for each score engine, the estimated
//! average effect, the unit-level prediction error, and the evaluated policy
//! classes. [`summarize`] aggregates the records into a flat table of
//! `(method, policy_class, metric, value)` rows.

use serde::{Deserialize, Serialize};

use crate::data::{Method, TruthBlock};
use crate::error::{Error, Result};
use crate::policy;

/// Families of learned policies the protocol evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    /// Depth-limited tree trained on doubly robust scores.
    Tree,
    /// Depth-limited tree trained on unit-level effect predictions.
    ModifiedTree,
    /// Plug-in rule thresholding the effect predictions at zero.
    Plugin,
    /// Treat every unit (baseline).
    TreatAll,
}

impl PolicyClass {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyClass::Tree => "tree",
            PolicyClass::ModifiedTree => "modified_tree",
            PolicyClass::Plugin => "plugin",
            PolicyClass::TreatAll => "treat_all",
        }
    }
}

/// One policy class evaluated within one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyClassOutcome {
    pub class: PolicyClass,
    /// Advantage of the learned rule under the true effects.
    pub true_advantage: f64,
    /// Advantage estimated from doubly robust scores.
    pub est_dr: f64,
    pub est_dr_se: f64,
    /// Advantage estimated from effect predictions.
    pub est_cate: f64,
    pub est_cate_se: f64,
    /// Share of units the rule treats.
    pub treated_share: f64,
}

/// One score engine evaluated within one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// Estimated average effect (mean doubly robust score) and its SE.
    pub ate_hat: f64,
    pub ate_se: f64,
    /// Root mean squared error of the unit-level effect predictions.
    pub cate_rmse: f64,
    pub classes: Vec<PolicyClassOutcome>,
}

/// Everything recorded for one repetition of one data-generating cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub rep: usize,
    /// True average effect in this repetition's sample.
    pub ate_true: f64,
    /// First-best (plug-in oracle) advantage: `mean(|tau|)`.
    pub oracle_advantage: f64,
    /// Advantage of the best depth-limited tree fit directly on true effects.
    pub oracle_tree_advantage: f64,
    pub methods: Vec<MethodOutcome>,
}

/// A repetition that failed, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub message: String,
}

/// True advantage of an assignment, computed from the truth block.
pub fn true_policy_value(assignment: &[u8], truth: &TruthBlock, harmful: bool) -> f64 {
    policy::policy_value(assignment, &truth.tau, harmful)
}

/// Root mean squared error between unit-level predictions and targets.
///
/// # Errors
/// [`Error::InvalidArgument`] when lengths disagree or the input is empty.
pub fn cate_rmse(tau_true: &[f64], tau_hat: &[f64]) -> Result<f64> {
    rmse(tau_true, tau_hat)
}

/// Root mean squared error between two per-repetition series, e.g. estimated
/// versus true policy values.
///
/// # Errors
/// [`Error::InvalidArgument`] when lengths disagree or the input is empty.
pub fn rmse_across_reps(a: &[f64], b: &[f64]) -> Result<f64> {
    rmse(a, b)
}

fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid_argument(format!(
            "rmse needs two nonempty series of equal length, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    Ok((a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Share of the oracle advantage captured, averaged over repetitions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PctOfOracle {
    /// Mean over repetitions of `true_advantage / oracle_advantage`.
    pub mean_ratio: f64,
    /// Standard deviation of the per-repetition ratios.
    pub sd_ratio: f64,
    /// Repetitions dropped because their oracle advantage was zero.
    pub n_excluded: usize,
}

/// Computes the mean per-repetition ratio of achieved to oracle advantage,
/// excluding repetitions whose oracle advantage is exactly zero (the ratio is
/// undefined there); the number excluded is reported so callers can warn.
///
/// # Errors
/// [`Error::InvalidArgument`] on length mismatch or empty input;
/// [`Error::InvalidData`] when every repetition is excluded.
pub fn pct_of_oracle(true_advs: &[f64], oracle_advs: &[f64]) -> Result<PctOfOracle> {
    if true_advs.len() != oracle_advs.len() || true_advs.is_empty() {
        return Err(Error::invalid_argument(
            "advantage series must be nonempty and of equal length",
        ));
    }
    let ratios: Vec<f64> = true_advs
        .iter()
        .zip(oracle_advs)
        .filter(|(_, &o)| o != 0.0)
        .map(|(&t, &o)| t / o)
        .collect();
    let n_excluded = true_advs.len() - ratios.len();
    if ratios.is_empty() {
        return Err(Error::invalid_data(
            "every repetition had a zero oracle advantage; the ratio is undefined",
        ));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(PctOfOracle {
        mean_ratio: mean,
        sd_ratio: var.sqrt(),
        n_excluded,
    })
}

/// One aggregated metric value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    /// Score engine, or `"oracle"` for truth-only rows.
    pub method: String,
    /// Policy class, or `"-"` for method-level metrics.
    pub policy_class: String,
    pub metric: String,
    pub value: f64,
}

/// Aggregated metrics for one data-generating cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub n_reps: usize,
    pub n_failures: usize,
    /// Repetitions excluded from ratio metrics because the oracle advantage
    /// was zero.
    pub zero_oracle_excluded: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)).sqrt()
}

/// Aggregates per-repetition records into the metric table.
///
/// Emits oracle rows (mean advantages and the tree-to-plug-in ratios), per
/// method rows (average-effect RMSE and bias, effect-prediction RMSE), and
/// per (method, class) rows: mean true advantage, share of oracle captured,
/// RMSE against the oracle advantage, RMSE of each estimated advantage
/// against the true one, and mean treated share.
///
/// # Errors
/// [`Error::InvalidArgument`] when `records` is empty.
pub fn summarize(records: &[RepetitionRecord], failures: &[RepFailure]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid_argument(
            "cannot summarize zero successful repetitions",
        ));
    }
    let mut rows = Vec::new();
    let mut zero_excluded = 0usize;

    let oracle: Vec<f64> = records.iter().map(|r| r.oracle_advantage).collect();
    let oracle_tree: Vec<f64> = records.iter().map(|r| r.oracle_tree_advantage).collect();
    rows.push(MetricRow {
        method: "oracle".into(),
        policy_class: "plugin".into(),
        metric: "mean_advantage".into(),
        value: mean(&oracle),
    });
    rows.push(MetricRow {
        method: "oracle".into(),
        policy_class: "tree".into(),
        metric: "mean_advantage".into(),
        value: mean(&oracle_tree),
    });
    if mean(&oracle) != 0.0 {
        rows.push(MetricRow {
            method: "oracle".into(),
            policy_class: "tree".into(),
            metric: "ratio_of_means_vs_plugin".into(),
            value: mean(&oracle_tree) / mean(&oracle),
        });
    }
    if let Ok(p) = pct_of_oracle(&oracle_tree, &oracle) {
        zero_excluded = zero_excluded.max(p.n_excluded);
        rows.push(MetricRow {
            method: "oracle".into(),
            policy_class: "tree".into(),
            metric: "mean_of_ratios_vs_plugin".into(),
            value: p.mean_ratio,
        });
    }

    let methods: Vec<Method> = records[0].methods.iter().map(|m| m.method).collect();
    for (mi, &method) in methods.iter().enumerate() {
        let pull = |f: &dyn Fn(&MethodOutcome) -> f64| -> Vec<f64> {
            records.iter().map(|r| f(&r.methods[mi])).collect()
        };
        let ate_hat = pull(&|m| m.ate_hat);
        let ate_true: Vec<f64> = records.iter().map(|r| r.ate_true).collect();
        let cate_rmses = pull(&|m| m.cate_rmse);
        let name = method.name().to_string();
        rows.push(MetricRow {
            method: name.clone(),
            policy_class: "-".into(),
            metric: "ate_rmse".into(),
            value: rmse_across_reps(&ate_hat, &ate_true)?,
        });
        let biases: Vec<f64> = ate_hat
            .iter()
            .zip(&ate_true)
            .map(|(h, t)| h - t)
            .collect();
        rows.push(MetricRow {
            method: name.clone(),
            policy_class: "-".into(),
            metric: "ate_bias".into(),
            value: mean(&biases),
        });
        rows.push(MetricRow {
            method: name.clone(),
            policy_class: "-".into(),
            metric: "cate_rmse_mean".into(),
            value: mean(&cate_rmses),
        });
        rows.push(MetricRow {
            method: name.clone(),
            policy_class: "-".into(),
            metric: "cate_rmse_sd".into(),
            value: sd(&cate_rmses),
        });

        let classes: Vec<PolicyClass> = records[0].methods[mi]
            .classes
            .iter()
            .map(|c| c.class)
            .collect();
        for (ci, &class) in classes.iter().enumerate() {
            let pull_c = |f: &dyn Fn(&PolicyClassOutcome) -> f64| -> Vec<f64> {
                records
                    .iter()
                    .map(|r| f(&r.methods[mi].classes[ci]))
                    .collect()
            };
            let true_adv = pull_c(&|c| c.true_advantage);
            let est_dr = pull_c(&|c| c.est_dr);
            let est_cate = pull_c(&|c| c.est_cate);
            let shares = pull_c(&|c| c.treated_share);
            let cname = class.name().to_string();
            let mut push = |metric: &str, value: f64| {
                rows.push(MetricRow {
                    method: name.clone(),
                    policy_class: cname.clone(),
                    metric: metric.into(),
                    value,
                });
            };
            push("true_advantage_mean", mean(&true_adv));
            push("rmse_vs_oracle", rmse_across_reps(&true_adv, &oracle)?);
            push("value_rmse_dr", rmse_across_reps(&est_dr, &true_adv)?);
            push("value_rmse_cate", rmse_across_reps(&est_cate, &true_adv)?);
            push("treated_share_mean", mean(&shares));
            match pct_of_oracle(&true_adv, &oracle) {
                Ok(p) => {
                    zero_excluded = zero_excluded.max(p.n_excluded);
                    push("pct_of_oracle", p.mean_ratio);
                    push("pct_of_oracle_sd", p.sd_ratio);
                }
                Err(_) => {
                    // Every oracle advantage was zero; ratio rows are omitted.
                }
            }
        }
    }

    Ok(MetricsReport {
        rows,
        n_reps: records.len(),
        n_failures: failures.len(),
        zero_oracle_excluded: zero_excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_hand_examples() {
        assert_abs_diff_eq!(
            cate_rmse(&[0.0, 1.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            rmse_across_reps(&[1.0, 1.0], &[0.0, 2.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(cate_rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse_across_reps(&[], &[]).is_err());
    }

    #[test]
    fn pct_of_oracle_excludes_zero_denominators() {
        let p = pct_of_oracle(&[0.5, 0.3, 0.9], &[1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(p.mean_ratio, 0.7, epsilon = 1e-15);
        assert_eq!(p.n_excluded, 1);
        assert!(pct_of_oracle(&[0.5], &[0.0]).is_err());
        assert!(pct_of_oracle(&[0.5], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn true_policy_value_uses_the_truth_block() {
        let truth = TruthBlock {
            tau: vec![-0.4, 0.2],
            e: vec![0.2, 0.2],
            m0: None,
            m1: None,
        };
        // harmful: signed effects are (0.4, -0.2); pi = (1, 0) earns
        // (0.4 + 0.2) / 2 = 0.3.
        assert_abs_diff_eq!(
            true_policy_value(&[1, 0], &truth, true),
            0.3,
            epsilon = 1e-15
        );
    }

    fn record(rep: usize, scale: f64) -> RepetitionRecord {
        RepetitionRecord {
            rep,
            ate_true: -0.1 * scale,
            oracle_advantage: 0.1 * scale,
            oracle_tree_advantage: 0.08 * scale,
            methods: vec![MethodOutcome {
                method: Method::Ndr,
                ate_hat: -0.11 * scale,
                ate_se: 0.01,
                cate_rmse: 0.05 * scale,
                classes: vec![PolicyClassOutcome {
                    class: PolicyClass::Tree,
                    true_advantage: 0.06 * scale,
                    est_dr: 0.07 * scale,
                    est_dr_se: 0.01,
                    est_cate: 0.055 * scale,
                    est_cate_se: 0.01,
                    treated_share: 0.4,
                }],
            }],
        }
    }

    #[test]
    fn summarize_produces_the_expected_rows() {
        let records = vec![record(0, 1.0), record(1, 2.0)];
        let report = summarize(&records, &[]).unwrap();
        assert_eq!(report.n_reps, 2);
        assert_eq!(report.n_failures, 0);
        let get = |method: &str, class: &str, metric: &str| -> f64 {
            report
                .rows
                .iter()
                .find(|r| r.method == method && r.policy_class == class && r.metric == metric)
                .unwrap_or_else(|| panic!("missing row {method}/{class}/{metric}"))
                .value
        };
        // Oracle plug-in mean advantage: (0.1 + 0.2) / 2.
        assert_abs_diff_eq!(get("oracle", "plugin", "mean_advantage"), 0.15, epsilon = 1e-12);
        // Ratio of means: 0.12 / 0.15 = 0.8 (tree captures 80%).
        assert_abs_diff_eq!(
            get("oracle", "tree", "ratio_of_means_vs_plugin"),
            0.8,
            epsilon = 1e-12
        );
        // Per-rep ratios are both 0.8 here.
        assert_abs_diff_eq!(
            get("oracle", "tree", "mean_of_ratios_vs_plugin"),
            0.8,
            epsilon = 1e-12
        );
        // NDR tree: pct of oracle = mean(0.6, 0.6).
        assert_abs_diff_eq!(get("ndr", "tree", "pct_of_oracle"), 0.6, epsilon = 1e-12);
        // ATE rmse: errors are -0.01 and -0.02 -> sqrt(mean) .
        let expect = ((0.01f64.powi(2) + 0.02f64.powi(2)) / 2.0).sqrt();
        assert_abs_diff_eq!(get("ndr", "-", "ate_rmse"), expect, epsilon = 1e-12);
        // Value estimation rmse vs true advantage.
        let expect_dr = ((0.01f64.powi(2) + 0.02f64.powi(2)) / 2.0).sqrt();
        assert_abs_diff_eq!(get("ndr", "tree", "value_rmse_dr"), expect_dr, epsilon = 1e-12);
        assert!(summarize(&[], &[]).is_err());
    }
}
