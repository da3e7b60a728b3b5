//! Policy rules: exhaustive depth-limited tree search, plug-in rules, and
//! policy value estimators.
//!
//! A policy assigns each unit an action in `{0, 1}` from its covariates. Its
//! *advantage* is measured on the centered scale
//! `mean((2 pi_i - 1) * s_i)`, where `s` are per-unit scores oriented so that
//! larger favours treating (see [`crate::data::signed_scores`]). Under that
//! convention the unconstrained first-best rule scores `mean(|s|)`, so the
//! advantage of a rule is directly comparable to the best it could have done.
//!
//! The tree search is exact: for a given depth, candidate threshold set, and
//! feature set, [`fit_policy_tree`] returns a tree attaining the maximal
//! empirical value. Ties are broken deterministically toward the no-split
//! leaf, then the lowest feature index, then the lowest threshold.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{signed_scores, Dataset, ScoreSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// A node of a policy tree. Units with `x[feature] <= threshold` descend
/// left; others descend right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyNode {
    /// Terminal node assigning `action` (0 = control, 1 = treat).
    Leaf { action: u8 },
    /// Internal split on one covariate.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
}

impl PolicyNode {
    fn assign_row(&self, row: ArrayView1<'_, f64>) -> u8 {
        match self {
            PolicyNode::Leaf { action } => *action,
            PolicyNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.assign_row(row)
                } else {
                    right.assign_row(row)
                }
            }
        }
    }

    fn max_depth(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 0,
            PolicyNode::Split { left, right, .. } => 1 + left.max_depth().max(right.max_depth()),
        }
    }
}

/// A depth-limited policy tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    /// Depth limit the tree was fit with (the realized depth may be smaller).
    pub depth: usize,
    pub root: PolicyNode,
}

impl PolicyTree {
    /// Actions for every row of `x`.
    pub fn assign(&self, x: &Array2<f64>) -> Vec<u8> {
        x.rows()
            .into_iter()
            .map(|row| self.root.assign_row(row))
            .collect()
    }

    /// Action for a single unit.
    pub fn assign_row(&self, row: ArrayView1<'_, f64>) -> u8 {
        self.root.assign_row(row)
    }

    /// Realized depth of the fitted tree.
    pub fn realized_depth(&self) -> usize {
        self.root.max_depth()
    }
}

/// Which per-unit quantity an advantage estimate was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageEstimator {
    /// Doubly robust scores.
    Dr,
    /// Unit-level effect predictions.
    Cate,
    /// Ground-truth effects (only available on synthetic data).
    True,
}

impl AdvantageEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            AdvantageEstimator::Dr => "dr",
            AdvantageEstimator::Cate => "cate",
            AdvantageEstimator::True => "true",
        }
    }
}

/// A policy advantage with its sampling uncertainty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    /// `mean((2 pi_i - 1) * s_i)` over the evaluation units.
    pub value: f64,
    /// Standard error: sd of the per-unit contributions over `sqrt(n)`.
    pub se: f64,
    /// Provenance of the per-unit scores.
    pub estimator: AdvantageEstimator,
}

/// Mean centered policy value `mean((2 pi_i - 1) * s_i)` where the raw
/// `effects` are first oriented by the `harmful` convention.
pub fn policy_value(actions: &[u8], effects: &[f64], harmful: bool) -> f64 {
    debug_assert_eq!(actions.len(), effects.len());
    let signed = signed_scores(effects, harmful);
    let n = actions.len() as f64;
    actions
        .iter()
        .zip(&signed)
        .map(|(&a, &s)| (2.0 * f64::from(a) - 1.0) * s)
        .sum::<f64>()
        / n
}

/// Estimates the advantage of `actions` from per-unit `scores`, reporting the
/// centered value and its standard error.
///
/// # Errors
/// [`Error::InvalidArgument`] when lengths disagree or the input is empty.
pub fn advantage(
    actions: &[u8],
    scores: &[f64],
    harmful: bool,
    estimator: AdvantageEstimator,
) -> Result<AdvantageEstimate> {
    if actions.len() != scores.len() || actions.is_empty() {
        return Err(Error::invalid_argument(
            "assignment and scores must be nonempty and of equal length",
        ));
    }
    let signed = signed_scores(scores, harmful);
    let contributions: Vec<f64> = actions
        .iter()
        .zip(&signed)
        .map(|(&a, &s)| (2.0 * f64::from(a) - 1.0) * s)
        .collect();
    let n = contributions.len() as f64;
    let value = contributions.iter().sum::<f64>() / n;
    let var =
        contributions.iter().map(|c| (c - value).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(AdvantageEstimate {
        value,
        se: (var / n).sqrt(),
        estimator,
    })
}

/// The plug-in rule: treat exactly the units whose predicted effect is
/// strictly beneficial (negative when `harmful`, positive otherwise); units
/// with a zero prediction are left untreated.
pub fn plugin_policy(tau_hat: &[f64], harmful: bool) -> Vec<u8> {
    tau_hat
        .iter()
        .map(|&t| {
            let beneficial = if harmful { t < 0.0 } else { t > 0.0 };
            u8::from(beneficial)
        })
        .collect()
}

/// Exhaustive-search state shared across the recursion.
struct SearchCtx<'a> {
    x: &'a Array2<f64>,
    s: Vec<f64>,
    /// Per feature, row indices sorted ascending by value (stable).
    orders: Vec<Vec<u32>>,
    /// Features the tree may split on, ascending.
    feats: Vec<usize>,
    /// Cap on candidate thresholds per (node, feature); `None` = exact.
    budget: Option<usize>,
}

/// Result of solving one subproblem: the best attainable sum of
/// `(2 pi - 1) * s` over the member rows, and a tree achieving it.
fn solve(ctx: &SearchCtx<'_>, member: &[bool], n_member: usize, depth: usize) -> (f64, PolicyNode) {
    let total: f64 = member
        .iter()
        .zip(&ctx.s)
        .filter(|(m, _)| **m)
        .map(|(_, s)| *s)
        .sum();
    let leaf_action = u8::from(total > 0.0);
    let mut best = (total.abs(), PolicyNode::Leaf { action: leaf_action });
    if depth == 0 || n_member < 2 {
        return best;
    }

    for &f in &ctx.feats {
        let order = &ctx.orders[f];
        let col = ctx.x.column(f);

        // Member rows in ascending feature order.
        let sorted: Vec<u32> = order
            .iter()
            .copied()
            .filter(|&r| member[r as usize])
            .collect();

        // Boundary positions: last index of each distinct-value group except
        // the final group (a split there would leave the right child empty).
        let mut boundaries: Vec<usize> = Vec::new();
        for i in 0..sorted.len() - 1 {
            if col[sorted[i] as usize] < col[sorted[i + 1] as usize] {
                boundaries.push(i);
            }
        }
        if boundaries.is_empty() {
            continue;
        }

        if depth == 1 {
            // One prefix pass evaluates every boundary in O(n); each
            // candidate costs O(1), so the budget never thins this level.
            let mut run = 0.0;
            let mut next = 0usize;
            for (i, &r) in sorted.iter().enumerate() {
                run += ctx.s[r as usize];
                if next < boundaries.len() && boundaries[next] == i {
                    next += 1;
                    let value = run.abs() + (total - run).abs();
                    if value > best.0 {
                        best = (
                            value,
                            PolicyNode::Split {
                                feature: f,
                                threshold: col[r as usize],
                                left: Box::new(PolicyNode::Leaf {
                                    action: u8::from(run > 0.0),
                                }),
                                right: Box::new(PolicyNode::Leaf {
                                    action: u8::from(total - run > 0.0),
                                }),
                            },
                        );
                    }
                }
            }
        } else {
            // Recursive candidates each cost two child solves, so the budget
            // keeps an evenly spaced subset of the boundaries here.
            let selected: Vec<usize> = match ctx.budget {
                Some(b) if boundaries.len() > b => (0..b)
                    .map(|k| boundaries[k * boundaries.len() / b])
                    .collect(),
                _ => boundaries,
            };
            // Materialize child memberships incrementally while the boundary
            // sweeps right, solving each side recursively.
            let mut left_member = vec![false; member.len()];
            let mut right_member = member.to_vec();
            let mut moved = 0usize;
            for &b in &selected {
                while moved <= b {
                    let r = sorted[moved] as usize;
                    left_member[r] = true;
                    right_member[r] = false;
                    moved += 1;
                }
                let (lv, lnode) = solve(ctx, &left_member, moved, depth - 1);
                let (rv, rnode) = solve(ctx, &right_member, n_member - moved, depth - 1);
                let value = lv + rv;
                if value > best.0 {
                    best = (
                        value,
                        PolicyNode::Split {
                            feature: f,
                            threshold: col[sorted[b] as usize],
                            left: Box::new(lnode),
                            right: Box::new(rnode),
                        },
                    );
                }
            }
        }
    }
    best
}

/// Fits a depth-`depth` policy tree maximizing the empirical centered value
/// of the (sign-oriented) `scores`.
///
/// * `split_budget` caps the candidate thresholds per (node, feature) at
///   nodes that recurse, using an evenly spaced subset of the observed
///   boundaries; `None` searches every boundary. Terminal-depth splits are
///   always searched exhaustively because each candidate there costs O(1).
/// * `allowed` restricts the features the tree may split on; `None` allows
///   all columns.
///
/// The search is exhaustive given those candidate sets, so with
/// `split_budget = None` the returned value is the global optimum over
/// depth-`depth` trees with thresholds at observed values.
///
/// # Errors
/// [`Error::InvalidArgument`] for empty input, mismatched lengths, a depth
/// outside `1..=3`, a zero budget, or an out-of-range feature index.
pub fn fit_policy_tree(
    x: &Array2<f64>,
    scores: &[f64],
    depth: usize,
    harmful: bool,
    split_budget: Option<usize>,
    allowed: Option<&[usize]>,
) -> Result<PolicyTree> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || scores.len() != n {
        return Err(Error::invalid_argument(format!(
            "need one score per row: {n} rows, {} scores",
            scores.len()
        )));
    }
    if !(1..=3).contains(&depth) {
        return Err(Error::invalid_argument(format!(
            "tree depth must be 1, 2, or 3, got {depth} (the exhaustive search cost grows \
             combinatorially with depth)"
        )));
    }
    if split_budget == Some(0) {
        return Err(Error::invalid_argument("split budget must be positive"));
    }
    let feats: Vec<usize> = match allowed {
        Some(list) => {
            if list.is_empty() {
                return Err(Error::invalid_argument(
                    "allowed-feature list must not be empty",
                ));
            }
            let mut feats = list.to_vec();
            feats.sort_unstable();
            feats.dedup();
            if let Some(&bad) = feats.iter().find(|&&j| j >= p) {
                return Err(Error::invalid_argument(format!(
                    "allowed feature {bad} out of range for {p} columns"
                )));
            }
            feats
        }
        None => (0..p).collect(),
    };

    let s = signed_scores(scores, harmful);
    let orders: Vec<Vec<u32>> = (0..p)
        .map(|j| {
            let col = x.column(j);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                col[a as usize]
                    .partial_cmp(&col[b as usize])
                    .expect("covariates are finite")
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let ctx = SearchCtx {
        x,
        s,
        orders,
        feats,
        budget: split_budget,
    };
    let member = vec![true; n];
    let (_, root) = solve(&ctx, &member, n, depth);
    Ok(PolicyTree { depth, root })
}

/// Which training signal cross-validated trees are fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSignal {
    /// Doubly robust scores (the standard policy tree).
    Gamma,
    /// Unit-level effect predictions (the modified policy tree).
    TauHat,
}

impl TrainSignal {
    pub fn name(&self) -> &'static str {
        match self {
            TrainSignal::Gamma => "gamma",
            TrainSignal::TauHat => "tau_hat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(TrainSignal::Gamma),
            "tau_hat" | "tau" => Ok(TrainSignal::TauHat),
            other => Err(Error::invalid_argument(format!(
                "unknown training signal '{other}' (expected gamma or tau_hat)"
            ))),
        }
    }
}

/// Output of [`cross_validated_tree_value`].
#[derive(Debug, Clone)]
pub struct CvTreeValue {
    /// Fold-level mean of the doubly-robust-scored advantage.
    pub dr: AdvantageEstimate,
    /// Fold-level mean of the effect-prediction-scored advantage.
    pub cate: AdvantageEstimate,
    /// Pooled per-unit means (equal to the fold-level means when fold sizes
    /// are equal; reported alongside for transparency).
    pub pooled_dr: f64,
    pub pooled_cate: f64,
    /// Out-of-fold action for every unit.
    pub assignment: Vec<u8>,
    /// The tree fit on each fold's complement.
    pub fold_trees: Vec<PolicyTree>,
    /// Share of units the out-of-fold policy treats.
    pub treated_share: f64,
}

/// Cross-validated policy tree evaluation.
///
/// Partitions the data into `k` folds; for each fold fits a depth-`depth`
/// tree on the complement (trained on the chosen signal) and assigns the
/// held-out units. Every unit's action therefore comes from a tree that never
/// saw its scores. The out-of-fold assignment is evaluated twice — with the
/// doubly robust scores and with the effect predictions — and each fold-level
/// advantage is averaged across folds.
///
/// # Errors
/// Propagates fold-assignment and tree-fit failures.
#[allow(clippy::too_many_arguments)]
pub fn cross_validated_tree_value(
    ds: &Dataset,
    scores: &ScoreSet,
    train_on: TrainSignal,
    k: usize,
    depth: usize,
    split_budget: Option<usize>,
    allowed: Option<&[usize]>,
    stream: &mut RngStream,
) -> Result<CvTreeValue> {
    let n = ds.n();
    if scores.gamma.len() != n {
        return Err(Error::invalid_argument(format!(
            "score set has {} rows but the dataset has {n}",
            scores.gamma.len()
        )));
    }
    let folds = crate::data::assign_folds(n, k, stream.draw_seed())?;
    let signal: &[f64] = match train_on {
        TrainSignal::Gamma => &scores.gamma,
        TrainSignal::TauHat => &scores.tau_hat,
    };

    let mut assignment = vec![0u8; n];
    let mut fold_trees = Vec::with_capacity(k);
    let mut fold_dr = Vec::with_capacity(k);
    let mut fold_cate = Vec::with_capacity(k);
    for j in 0..k {
        let train_rows = folds.complement_rows(j);
        let hold_rows = folds.fold_rows(j);
        let x_train = ds.x().select(ndarray::Axis(0), &train_rows);
        let signal_train: Vec<f64> = train_rows.iter().map(|&i| signal[i]).collect();
        let tree = fit_policy_tree(
            &x_train,
            &signal_train,
            depth,
            ds.harmful,
            split_budget,
            allowed,
        )?;
        let mut dr_sum = 0.0;
        let mut cate_sum = 0.0;
        for &i in &hold_rows {
            let a = tree.assign_row(ds.x().row(i));
            assignment[i] = a;
            let sign = 2.0 * f64::from(a) - 1.0;
            let flip = if ds.harmful { -1.0 } else { 1.0 };
            dr_sum += sign * flip * scores.gamma[i];
            cate_sum += sign * flip * scores.tau_hat[i];
        }
        let m = hold_rows.len() as f64;
        fold_dr.push(dr_sum / m);
        fold_cate.push(cate_sum / m);
        fold_trees.push(tree);
    }

    let fold_mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len() as f64;
    let pooled_dr = advantage(&assignment, &scores.gamma, ds.harmful, AdvantageEstimator::Dr)?;
    let pooled_cate = advantage(
        &assignment,
        &scores.tau_hat,
        ds.harmful,
        AdvantageEstimator::Cate,
    )?;
    let treated_share =
        assignment.iter().map(|&a| f64::from(a)).sum::<f64>() / n as f64;

    Ok(CvTreeValue {
        dr: AdvantageEstimate {
            value: fold_mean(&fold_dr),
            se: pooled_dr.se,
            estimator: AdvantageEstimator::Dr,
        },
        cate: AdvantageEstimate {
            value: fold_mean(&fold_cate),
            se: pooled_cate.se,
            estimator: AdvantageEstimator::Cate,
        },
        pooled_dr: pooled_dr.value,
        pooled_cate: pooled_cate.value,
        assignment,
        fold_trees,
        treated_share,
    })
}
