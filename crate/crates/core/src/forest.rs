//! Random forests: plain regression forests for nuisance functions and
//! honest causal forests for treatment-effect estimation, plus a cross-fitted
//! variant that never scores a unit with a model that saw it.
//!
//! # Regression forests
//!
//! Standard CART trees with variance-reduction splits, grown on subsamples
//! drawn without replacement. Training-row predictions are out-of-bag (OOB):
//! they average only the trees whose subsample *excluded* the row, falling
//! back to the full forest for rows that appear in every subsample.
//!
//! # Honest causal forests
//!
//! Each tree's subsample is split into a *split half*, which chooses the tree
//! structure, and a disjoint *estimation half*, which provides the leaf
//! statistics. Splits maximize the between-child spread of the residual-based
//! effect estimate, and leaves store the estimation-half means of
//! `u = (W - e)(Y - f)` and `v = (W - e)^2`. A query's effect estimate
//! aggregates leaf means across trees and takes the ratio `sum(u) / sum(v)`,
//! which equals the forest-kernel-weighted residual-on-residual regression.
//!
//! All fits are deterministic functions of their input stream: trees derive
//! per-index child streams, so thread scheduling cannot change results.

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Method, ScoreSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Propensity clipping bounds applied everywhere a propensity enters a
/// denominator.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Clamps an estimated propensity away from 0 and 1.
pub fn clip_propensity(e: f64) -> f64 {
    e.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
}

/// Tuning parameters shared by regression and causal forests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestConfig {
    /// Number of trees (default 500; causal default 2000).
    pub n_trees: usize,
    /// Features considered per split. `None` uses `ceil(sqrt(p))` for
    /// regression trees and `ceil(p / 3) + 1` for causal trees.
    pub mtry: Option<usize>,
    /// Minimum rows per child; causal trees require this in *both* halves.
    pub min_leaf: usize,
    /// Fraction of rows subsampled (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Fraction of each causal subsample used for structure; the rest
    /// populates the leaves.
    pub honesty_fraction: f64,
    /// Optional depth cap (edges from the root).
    pub max_depth: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            mtry: None,
            min_leaf: 5,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            max_depth: None,
        }
    }
}

impl ForestConfig {
    /// Defaults for causal forests (more trees; everything else shared).
    pub fn causal_default() -> Self {
        ForestConfig {
            n_trees: 2000,
            ..ForestConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid_argument("forest needs at least one tree"));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid_argument("min_leaf must be positive"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "subsample fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return Err(Error::invalid_argument(format!(
                "honesty fraction must lie in (0, 1), got {}",
                self.honesty_fraction
            )));
        }
        Ok(())
    }

    fn mtry_regression(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p)
    }

    fn mtry_causal(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64 / 3.0).ceil() as usize + 1)
            .clamp(1, p)
    }

    fn subsample_count(&self, n: usize) -> usize {
        (((n as f64) * self.subsample_fraction).floor() as usize).clamp(1, n)
    }
}

/// Row indices sorted by each feature, computed once per fit.
fn presort_columns(x: &Array2<f64>) -> Vec<Vec<u32>> {
    let n = x.nrows();
    (0..x.ncols())
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
        .collect()
}

fn mask_words(n: usize) -> usize {
    n.div_ceil(64)
}

fn mask_set(mask: &mut [u64], i: usize) {
    mask[i >> 6] |= 1u64 << (i & 63);
}

fn mask_get(mask: &[u64], i: usize) -> bool {
    mask[i >> 6] >> (i & 63) & 1 == 1
}

/// Filters a presorted order down to the rows flagged in `mask`.
fn filter_order(order: &[u32], mask: &[u64]) -> Vec<u32> {
    order
        .iter()
        .copied()
        .filter(|&r| mask_get(mask, r as usize))
        .collect()
}

/// Stable in-place partition of `idx` by `pred`; returns the left count.
fn partition_stable(idx: &mut [u32], tmp: &mut Vec<u32>, pred: impl Fn(u32) -> bool) -> usize {
    tmp.clear();
    let mut write = 0usize;
    for k in 0..idx.len() {
        let r = idx[k];
        if pred(r) {
            idx[write] = r;
            write += 1;
        } else {
            tmp.push(r);
        }
    }
    idx[write..].copy_from_slice(tmp);
    write
}

// ---------------------------------------------------------------------------
// Regression forest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum RegNode {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone)]
struct RegTree {
    nodes: Vec<RegNode>,
    in_sample: Vec<u64>,
}

impl RegTree {
    fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                RegNode::Leaf { value } => return *value,
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

struct RegGrower<'a> {
    x: &'a Array2<f64>,
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    feat_idx: Vec<Vec<u32>>,
    tmp: Vec<u32>,
    nodes: Vec<RegNode>,
    stream: RngStream,
}

impl<'a> RegGrower<'a> {
    fn grow(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        let n_node = end - start;
        let rows = &self.feat_idx[0][start..end];
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for &r in rows {
            let v = self.y[r as usize];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n_node as f64;
        let base = sum * sum / n_node as f64;
        let sse = (sum2 - base).max(0.0);

        let depth_capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
        let make_leaf = |nodes: &mut Vec<RegNode>| {
            nodes.push(RegNode::Leaf { value: mean });
            (nodes.len() - 1) as u32
        };
        if n_node < 2 * self.cfg.min_leaf
            || depth_capped
            || sse <= 1e-12 * (sum2.abs() + 1e-12)
        {
            return make_leaf(&mut self.nodes);
        }

        let p = self.x.ncols();
        let mut feats = self.stream.sample_without_replacement(p, self.mtry);
        feats.sort_unstable();

        let mut best_gain = base;
        let mut best: Option<(usize, f64, usize)> = None; // (feature, threshold, n_left)
        for &f in &feats {
            let seg = &self.feat_idx[f][start..end];
            let mut run = 0.0;
            for k in 0..seg.len() - 1 {
                let r = seg[k] as usize;
                run += self.y[r];
                let cur = self.x[[r, f]];
                let nxt = self.x[[seg[k + 1] as usize, f]];
                if cur < nxt {
                    let n_l = k + 1;
                    let n_r = n_node - n_l;
                    if n_l < self.cfg.min_leaf || n_r < self.cfg.min_leaf {
                        continue;
                    }
                    let gain = run * run / n_l as f64
                        + (sum - run) * (sum - run) / n_r as f64;
                    if gain > best_gain {
                        best_gain = gain;
                        best = Some((f, cur, n_l));
                    }
                }
            }
        }

        let Some((f_star, thr, n_left)) = best else {
            return make_leaf(&mut self.nodes);
        };

        let x = self.x;
        for g in 0..p {
            let seg = &mut self.feat_idx[g][start..end];
            let moved = partition_stable(seg, &mut self.tmp, |r| x[[r as usize, f_star]] <= thr);
            debug_assert_eq!(moved, n_left);
        }

        let slot = self.nodes.len() as u32;
        self.nodes.push(RegNode::Leaf { value: mean }); // placeholder
        let left = self.grow(start, start + n_left, depth + 1);
        let right = self.grow(start + n_left, end, depth + 1);
        self.nodes[slot as usize] = RegNode::Split {
            feature: f_star as u32,
            threshold: thr,
            left,
            right,
        };
        slot
    }
}

fn grow_reg_tree(
    x: &Array2<f64>,
    y: &[f64],
    orders: &[Vec<u32>],
    cfg: &ForestConfig,
    mut stream: RngStream,
) -> RegTree {
    let n = x.nrows();
    let count = cfg.subsample_count(n);
    let sample = stream.sample_without_replacement(n, count);
    let mut in_sample = vec![0u64; mask_words(n)];
    for &r in &sample {
        mask_set(&mut in_sample, r);
    }
    let feat_idx: Vec<Vec<u32>> = orders.iter().map(|o| filter_order(o, &in_sample)).collect();
    let mut grower = RegGrower {
        x,
        y,
        cfg,
        mtry: cfg.mtry_regression(x.ncols()),
        feat_idx,
        tmp: Vec::with_capacity(count),
        nodes: Vec::new(),
        stream,
    };
    let root = grower.grow(0, count, 0);
    debug_assert_eq!(root, 0);
    RegTree {
        nodes: grower.nodes,
        in_sample,
    }
}

/// A fitted regression forest.
#[derive(Debug, Clone)]
pub struct RegressionForest {
    trees: Vec<RegTree>,
    oob: Vec<f64>,
    n_oob_fallbacks: usize,
}

impl RegressionForest {
    /// Out-of-bag predictions for the training rows, in training order.
    pub fn oob_predictions(&self) -> &[f64] {
        &self.oob
    }

    /// Training rows that appeared in every subsample and therefore received
    /// a full-forest prediction instead of an out-of-bag one.
    pub fn n_oob_fallbacks(&self) -> usize {
        self.n_oob_fallbacks
    }

    /// Number of trees.
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Predicts fresh rows with the full forest.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| self.predict_row(row))
            .collect()
    }

    /// Predicts one fresh row with the full forest.
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        sum / self.trees.len() as f64
    }

    /// Whether tree `t`'s subsample contained training row `i` (test support).
    pub fn tree_contains(&self, t: usize, i: usize) -> bool {
        mask_get(&self.trees[t].in_sample, i)
    }

    /// Prediction of a single tree for a row (test support).
    pub fn tree_predict(&self, t: usize, row: ArrayView1<'_, f64>) -> f64 {
        self.trees[t].predict_row(row)
    }
}

/// Fits a regression forest of `targets` on `x`.
///
/// # Errors
/// [`Error::InvalidArgument`] for invalid configuration or mismatched
/// lengths; [`Error::FitFailed`] when there are no rows.
pub fn fit_regression_forest(
    x: &Array2<f64>,
    targets: &[f64],
    cfg: &ForestConfig,
    stream: &RngStream,
) -> Result<RegressionForest> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::fit_failed("cannot fit a forest on zero rows"));
    }
    if targets.len() != n {
        return Err(Error::invalid_argument(format!(
            "{n} rows but {} targets",
            targets.len()
        )));
    }
    let orders = presort_columns(x);
    let trees: Vec<RegTree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| grow_reg_tree(x, targets, &orders, cfg, stream.derive(t as u64)))
        .collect();

    let mut oob = vec![0.0; n];
    let mut fallbacks = 0usize;
    for (i, out) in oob.iter_mut().enumerate() {
        let row = x.row(i);
        let mut sum = 0.0;
        let mut used = 0usize;
        for tree in &trees {
            if !mask_get(&tree.in_sample, i) {
                sum += tree.predict_row(row);
                used += 1;
            }
        }
        if used == 0 {
            fallbacks += 1;
            sum = trees.iter().map(|t| t.predict_row(row)).sum();
            used = trees.len();
        }
        *out = sum / used as f64;
    }

    Ok(RegressionForest {
        trees,
        oob,
        n_oob_fallbacks: fallbacks,
    })
}

// ---------------------------------------------------------------------------
// Nuisance functions
// ---------------------------------------------------------------------------

/// The fitted nuisance forests, kept for prediction on fresh points.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    /// Propensity forest (treatment on covariates).
    pub e: RegressionForest,
    /// Pooled outcome forest (outcome on covariates, both arms).
    pub f: RegressionForest,
    /// Control-arm outcome forest.
    pub m0: RegressionForest,
    /// Treated-arm outcome forest.
    pub m1: RegressionForest,
}

/// Nuisance estimates for every training row.
///
/// All values are out-of-bag wherever the row participated in the fit:
/// `e_hat` and `f_hat` always, `m0_hat` on control rows, `m1_hat` on treated
/// rows; cross-arm values are full-forest predictions on fresh points.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// Estimated propensity, clipped to [`PROPENSITY_CLIP`].
    pub e_hat: Vec<f64>,
    /// Estimated control-arm outcome mean.
    pub m0_hat: Vec<f64>,
    /// Estimated treated-arm outcome mean.
    pub m1_hat: Vec<f64>,
    /// `m0_hat` or `m1_hat` at the observed arm.
    pub m_obs_hat: Vec<f64>,
    /// Estimated pooled outcome mean `E[Y | X]`.
    pub f_hat: Vec<f64>,
    /// The underlying forests.
    pub models: NuisanceModels,
}

/// Fits all four nuisance forests.
///
/// # Errors
/// [`Error::FitFailed`] when a treatment arm is empty (a larger sample is
/// needed); configuration errors propagate from the forest fits.
pub fn fit_nuisances(ds: &Dataset, cfg: &ForestConfig, stream: &RngStream) -> Result<NuisanceFit> {
    let n = ds.n();
    let treated = ds.treated_rows();
    let control = ds.control_rows();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::fit_failed(format!(
            "a treatment arm is empty ({} treated, {} control); draw a larger sample",
            treated.len(),
            control.len()
        )));
    }

    let w_real: Vec<f64> = ds.w().iter().map(|&w| f64::from(w)).collect();
    let e_forest = fit_regression_forest(ds.x(), &w_real, cfg, &stream.derive(0))?;
    let f_forest = fit_regression_forest(ds.x(), ds.y(), cfg, &stream.derive(1))?;

    let x0 = ds.x().select(Axis(0), &control);
    let y0: Vec<f64> = control.iter().map(|&i| ds.y()[i]).collect();
    let m0_forest = fit_regression_forest(&x0, &y0, cfg, &stream.derive(2))?;

    let x1 = ds.x().select(Axis(0), &treated);
    let y1: Vec<f64> = treated.iter().map(|&i| ds.y()[i]).collect();
    let m1_forest = fit_regression_forest(&x1, &y1, cfg, &stream.derive(3))?;

    let e_hat: Vec<f64> = e_forest
        .oob_predictions()
        .iter()
        .map(|&e| clip_propensity(e))
        .collect();
    let f_hat = f_forest.oob_predictions().to_vec();

    // Arm models: out-of-bag inside the own arm, fresh prediction across.
    let mut m0_hat = vec![0.0; n];
    let mut m1_hat = vec![0.0; n];
    for (pos, &i) in control.iter().enumerate() {
        m0_hat[i] = m0_forest.oob_predictions()[pos];
        m1_hat[i] = m1_forest.predict_row(ds.x().row(i));
    }
    for (pos, &i) in treated.iter().enumerate() {
        m1_hat[i] = m1_forest.oob_predictions()[pos];
        m0_hat[i] = m0_forest.predict_row(ds.x().row(i));
    }
    let m_obs_hat: Vec<f64> = (0..n)
        .map(|i| if ds.w()[i] == 1 { m1_hat[i] } else { m0_hat[i] })
        .collect();

    Ok(NuisanceFit {
        e_hat,
        m0_hat,
        m1_hat,
        m_obs_hat,
        f_hat,
        models: NuisanceModels {
            e: e_forest,
            f: f_forest,
            m0: m0_forest,
            m1: m1_forest,
        },
    })
}

// ---------------------------------------------------------------------------
// Honest causal forest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum CausalNode {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        mean_u: f64,
        mean_v: f64,
    },
}

#[derive(Debug, Clone)]
struct CausalTree {
    nodes: Vec<CausalNode>,
    in_sample: Vec<u64>,
    split_rows: Vec<u32>,
    est_rows: Vec<u32>,
}

impl CausalTree {
    fn leaf_of(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                CausalNode::Leaf { .. } => return at,
                CausalNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn leaf_stats(&self, row: ArrayView1<'_, f64>) -> (f64, f64) {
        match &self.nodes[self.leaf_of(row)] {
            CausalNode::Leaf { mean_u, mean_v } => (*mean_u, *mean_v),
            CausalNode::Split { .. } => unreachable!("leaf_of returns leaves"),
        }
    }
}

struct CausalGrower<'a> {
    x: &'a Array2<f64>,
    u: &'a [f64],
    v: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    split_idx: Vec<Vec<u32>>,
    est_idx: Vec<Vec<u32>>,
    tmp: Vec<u32>,
    nodes: Vec<CausalNode>,
    stream: RngStream,
}

impl<'a> CausalGrower<'a> {
    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        ss: usize,
        se: usize,
        es: usize,
        ee: usize,
        depth: usize,
    ) -> u32 {
        let n_split = se - ss;
        let n_est = ee - es;

        let leaf = |nodes: &mut Vec<CausalNode>, est: &[u32], u: &[f64], v: &[f64]| {
            let mut su = 0.0;
            let mut sv = 0.0;
            for &r in est {
                su += u[r as usize];
                sv += v[r as usize];
            }
            let m = est.len() as f64;
            nodes.push(CausalNode::Leaf {
                mean_u: su / m,
                mean_v: sv / m,
            });
            (nodes.len() - 1) as u32
        };

        let depth_capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
        if n_split < 2 * self.cfg.min_leaf || n_est < 2 * self.cfg.min_leaf || depth_capped {
            let est_seg = &self.est_idx[0][es..ee];
            return leaf(&mut self.nodes, est_seg, self.u, self.v);
        }

        let mut sum_u = 0.0;
        let mut sum_v = 0.0;
        for &r in &self.split_idx[0][ss..se] {
            sum_u += self.u[r as usize];
            sum_v += self.v[r as usize];
        }

        let p = self.x.ncols();
        let mut feats = self.stream.sample_without_replacement(p, self.mtry);
        feats.sort_unstable();

        let mut best_score = 0.0f64;
        let mut best: Option<(usize, f64, usize, usize)> = None; // (f, thr, n_sl, n_el)
        for &f in &feats {
            let seg = &self.split_idx[f][ss..se];
            let est_seg = &self.est_idx[f][es..ee];
            let mut run_u = 0.0;
            let mut run_v = 0.0;
            let mut e_ptr = 0usize;
            for k in 0..seg.len() - 1 {
                let r = seg[k] as usize;
                run_u += self.u[r];
                run_v += self.v[r];
                let cur = self.x[[r, f]];
                let nxt = self.x[[seg[k + 1] as usize, f]];
                if cur < nxt {
                    while e_ptr < est_seg.len()
                        && self.x[[est_seg[e_ptr] as usize, f]] <= cur
                    {
                        e_ptr += 1;
                    }
                    let n_sl = k + 1;
                    let n_sr = n_split - n_sl;
                    let n_el = e_ptr;
                    let n_er = n_est - n_el;
                    if n_sl < self.cfg.min_leaf
                        || n_sr < self.cfg.min_leaf
                        || n_el < self.cfg.min_leaf
                        || n_er < self.cfg.min_leaf
                    {
                        continue;
                    }
                    let rest_v = sum_v - run_v;
                    if run_v <= 0.0 || rest_v <= 0.0 {
                        continue;
                    }
                    let tau_l = run_u / run_v;
                    let tau_r = (sum_u - run_u) / rest_v;
                    let score = (n_sl * n_sr) as f64 * (tau_l - tau_r) * (tau_l - tau_r);
                    if score > best_score {
                        best_score = score;
                        best = Some((f, cur, n_sl, n_el));
                    }
                }
            }
        }

        let Some((f_star, thr, n_sl, n_el)) = best else {
            let est_seg = &self.est_idx[0][es..ee];
            return leaf(&mut self.nodes, est_seg, self.u, self.v);
        };

        let x = self.x;
        for g in 0..p {
            let seg = &mut self.split_idx[g][ss..se];
            let moved = partition_stable(seg, &mut self.tmp, |r| x[[r as usize, f_star]] <= thr);
            debug_assert_eq!(moved, n_sl);
            let est_seg = &mut self.est_idx[g][es..ee];
            let moved_e =
                partition_stable(est_seg, &mut self.tmp, |r| x[[r as usize, f_star]] <= thr);
            debug_assert_eq!(moved_e, n_el);
        }

        let slot = self.nodes.len() as u32;
        self.nodes.push(CausalNode::Leaf {
            mean_u: 0.0,
            mean_v: 0.0,
        }); // placeholder
        let left = self.grow(ss, ss + n_sl, es, es + n_el, depth + 1);
        let right = self.grow(ss + n_sl, se, es + n_el, ee, depth + 1);
        self.nodes[slot as usize] = CausalNode::Split {
            feature: f_star as u32,
            threshold: thr,
            left,
            right,
        };
        slot
    }
}

fn grow_causal_tree(
    x: &Array2<f64>,
    u: &[f64],
    v: &[f64],
    orders: &[Vec<u32>],
    cfg: &ForestConfig,
    mut stream: RngStream,
) -> CausalTree {
    let n = x.nrows();
    let count = cfg.subsample_count(n);
    let sample = stream.sample_without_replacement(n, count);
    let n_split_half = (((count as f64) * cfg.honesty_fraction).round() as usize)
        .clamp(1, count - 1);
    let mut split_rows: Vec<u32> = sample[..n_split_half].iter().map(|&r| r as u32).collect();
    let mut est_rows: Vec<u32> = sample[n_split_half..].iter().map(|&r| r as u32).collect();
    split_rows.sort_unstable();
    est_rows.sort_unstable();

    let mut in_sample = vec![0u64; mask_words(n)];
    let mut split_mask = vec![0u64; mask_words(n)];
    let mut est_mask = vec![0u64; mask_words(n)];
    for &r in &split_rows {
        mask_set(&mut in_sample, r as usize);
        mask_set(&mut split_mask, r as usize);
    }
    for &r in &est_rows {
        mask_set(&mut in_sample, r as usize);
        mask_set(&mut est_mask, r as usize);
    }

    let split_idx: Vec<Vec<u32>> = orders.iter().map(|o| filter_order(o, &split_mask)).collect();
    let est_idx: Vec<Vec<u32>> = orders.iter().map(|o| filter_order(o, &est_mask)).collect();

    let mut grower = CausalGrower {
        x,
        u,
        v,
        cfg,
        mtry: cfg.mtry_causal(x.ncols()),
        split_idx,
        est_idx,
        tmp: Vec::with_capacity(count),
        nodes: Vec::new(),
        stream,
    };
    let root = grower.grow(0, split_rows.len(), 0, est_rows.len(), 0);
    debug_assert_eq!(root, 0);
    CausalTree {
        nodes: grower.nodes,
        in_sample,
        split_rows,
        est_rows,
    }
}

/// A fitted honest causal forest together with the centered residuals it was
/// grown on.
#[derive(Debug, Clone)]
pub struct CausalForestFit {
    trees: Vec<CausalTree>,
    /// Clipped propensities used for centering, in training order.
    pub e_hat: Vec<f64>,
    /// Pooled outcome predictions used for centering.
    pub f_hat: Vec<f64>,
    oob_tau: Vec<f64>,
    n_train: usize,
    /// Treatment residuals `W - e_hat` on the training rows.
    pub w_res: Vec<f64>,
    /// Outcome residuals `Y - f_hat` on the training rows.
    pub y_res: Vec<f64>,
}

impl CausalForestFit {
    /// Number of trees.
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Out-of-bag effect estimates for the training rows: each row is
    /// predicted only by trees whose subsample excluded it (full-forest
    /// fallback when no tree qualifies).
    pub fn training_cates(&self) -> &[f64] {
        &self.oob_tau
    }

    /// Effect estimates at fresh query points, using every tree.
    ///
    /// # Errors
    /// [`Error::FitFailed`] naming the first query whose aggregated leaf
    /// denominator is not positive.
    pub fn predict_cates(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .enumerate()
            .map(|(q, row)| {
                let mut num = 0.0;
                let mut den = 0.0;
                for tree in &self.trees {
                    let (mu, mv) = tree.leaf_stats(row);
                    num += mu;
                    den += mv;
                }
                if den <= 0.0 {
                    return Err(Error::fit_failed(format!(
                        "query row {q}: zero residual variance in every matched leaf; \
                         the forest cannot identify an effect there"
                    )));
                }
                Ok(num / den)
            })
            .collect()
    }

    /// The forest kernel: weights `alpha_i(x)` over the training rows such
    /// that the effect estimate at `x` equals
    /// `sum_i alpha_i u_i / sum_i alpha_i v_i` on the estimation halves.
    /// Weights sum to one. When `exclude_containing` is a training row, trees
    /// whose subsample contains that row are skipped (the out-of-bag kernel).
    ///
    /// # Errors
    /// [`Error::FitFailed`] when no tree is usable for the query.
    pub fn kernel_weights(
        &self,
        x_train: &Array2<f64>,
        row: ArrayView1<'_, f64>,
        exclude_containing: Option<usize>,
    ) -> Result<Vec<f64>> {
        let mut alpha = vec![0.0; self.n_train];
        let mut used = 0usize;
        for tree in &self.trees {
            if let Some(i) = exclude_containing {
                if mask_get(&tree.in_sample, i) {
                    continue;
                }
            }
            let target = tree.leaf_of(row);
            let members: Vec<u32> = tree
                .est_rows
                .iter()
                .copied()
                .filter(|&r| tree.leaf_of(x_train.row(r as usize)) == target)
                .collect();
            if members.is_empty() {
                continue;
            }
            let share = 1.0 / members.len() as f64;
            for &r in &members {
                alpha[r as usize] += share;
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::fit_failed(
                "no usable tree for this query; grow more trees or drop the exclusion",
            ));
        }
        for a in &mut alpha {
            *a /= used as f64;
        }
        Ok(alpha)
    }

    /// Split-half and estimation-half rows of tree `t` (test support).
    pub fn tree_halves(&self, t: usize) -> (&[u32], &[u32]) {
        (&self.trees[t].split_rows, &self.trees[t].est_rows)
    }

    /// Whether tree `t`'s subsample contained training row `i` (test support).
    pub fn tree_contains(&self, t: usize, i: usize) -> bool {
        mask_get(&self.trees[t].in_sample, i)
    }
}

/// Fits an honest causal forest on residualized data.
///
/// The forest regresses `Y - f_hat` on `W - e_hat` locally: splits maximize
/// the spread of the child-level effect estimates on the split half, and
/// leaves store estimation-half moments only.
///
/// # Errors
/// [`Error::InvalidArgument`] for invalid configuration;
/// [`Error::FitFailed`] when the sample is too small to honestly split or a
/// training row ends with a non-positive kernel denominator.
pub fn fit_causal_forest(
    ds: &Dataset,
    nuis: &NuisanceFit,
    cfg: &ForestConfig,
    stream: &RngStream,
) -> Result<CausalForestFit> {
    cfg.validate()?;
    let n = ds.n();
    if nuis.e_hat.len() != n || nuis.f_hat.len() != n {
        return Err(Error::invalid_argument(
            "nuisance fit does not match the dataset",
        ));
    }
    if cfg.subsample_count(n) < 2 {
        return Err(Error::fit_failed(
            "subsample too small to split honestly; increase n or the subsample fraction",
        ));
    }

    let e_hat: Vec<f64> = nuis.e_hat.iter().map(|&e| clip_propensity(e)).collect();
    let w_res: Vec<f64> = ds
        .w()
        .iter()
        .zip(&e_hat)
        .map(|(&w, &e)| f64::from(w) - e)
        .collect();
    let y_res: Vec<f64> = ds
        .y()
        .iter()
        .zip(&nuis.f_hat)
        .map(|(&y, &f)| y - f)
        .collect();
    let u: Vec<f64> = w_res.iter().zip(&y_res).map(|(w, y)| w * y).collect();
    let v: Vec<f64> = w_res.iter().map(|w| w * w).collect();

    let orders = presort_columns(ds.x());
    let trees: Vec<CausalTree> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| grow_causal_tree(ds.x(), &u, &v, &orders, cfg, stream.derive(t as u64)))
        .collect();

    let mut oob_tau = vec![0.0; n];
    for (i, out) in oob_tau.iter_mut().enumerate() {
        let row = ds.x().row(i);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut used = 0usize;
        for tree in &trees {
            if !mask_get(&tree.in_sample, i) {
                let (mu, mv) = tree.leaf_stats(row);
                num += mu;
                den += mv;
                used += 1;
            }
        }
        if used == 0 {
            for tree in &trees {
                let (mu, mv) = tree.leaf_stats(row);
                num += mu;
                den += mv;
            }
        }
        if den <= 0.0 {
            return Err(Error::fit_failed(format!(
                "training row {i}: zero residual variance in every matched leaf"
            )));
        }
        *out = num / den;
    }

    Ok(CausalForestFit {
        trees,
        e_hat,
        f_hat: nuis.f_hat.clone(),
        oob_tau,
        n_train: n,
        w_res,
        y_res,
    })
}

/// The doubly robust score built around an effect estimate:
/// `tau + (w - e) / (e (1 - e)) * (y - f - (w - e) tau)`.
fn residualized_score(tau: f64, e: f64, w: f64, y: f64, f: f64) -> f64 {
    tau + (w - e) / (e * (1.0 - e)) * (y - f - (w - e) * tau)
}

/// Doubly robust scores from a fitted causal forest on its own training data,
/// using out-of-bag effect estimates.
///
/// # Errors
/// [`Error::InvalidArgument`] when the fit, dataset, and nuisances disagree
/// in length.
pub fn cf_scores(fit: &CausalForestFit, ds: &Dataset, nuis: &NuisanceFit) -> Result<ScoreSet> {
    let n = ds.n();
    if fit.n_train != n || nuis.e_hat.len() != n {
        return Err(Error::invalid_argument(
            "causal forest, dataset, and nuisances must match",
        ));
    }
    let tau_hat = fit.training_cates().to_vec();
    let gamma: Vec<f64> = (0..n)
        .map(|i| {
            residualized_score(
                tau_hat[i],
                clip_propensity(nuis.e_hat[i]),
                f64::from(ds.w()[i]),
                ds.y()[i],
                nuis.f_hat[i],
            )
        })
        .collect();
    ScoreSet::new(Method::Cf, gamma, tau_hat)
}

/// Cross-fitted causal forest scores.
///
/// Repeats `t` times: split the sample into `k` folds; for each fold, fit the
/// nuisances and an honest causal forest on the complement, then predict the
/// held-out fold's propensities, outcome means, and effects as fresh points
/// and form the doubly robust scores. No unit is ever scored by a model that
/// trained on it within a repetition; the final per-unit score and effect are
/// averages over the `t` repetitions.
///
/// # Errors
/// Propagates fold and fit failures; [`Error::InvalidArgument`] for `t == 0`.
pub fn cftt(
    ds: &Dataset,
    nuisance_cfg: &ForestConfig,
    causal_cfg: &ForestConfig,
    k: usize,
    t: usize,
    stream: &RngStream,
) -> Result<ScoreSet> {
    if t == 0 {
        return Err(Error::invalid_argument(
            "need at least one cross-fitting repetition",
        ));
    }
    let n = ds.n();
    let mut gamma_acc = vec![0.0; n];
    let mut tau_acc = vec![0.0; n];
    for rep in 0..t {
        let mut s_rep = stream.derive(rep as u64);
        let folds = crate::data::assign_folds(n, k, s_rep.draw_seed())?;
        for j in 0..k {
            let train_rows = folds.complement_rows(j);
            let hold_rows = folds.fold_rows(j);
            let train = ds.subset(&train_rows);
            let s_fold = s_rep.derive(1 + j as u64);
            let nuis = fit_nuisances(&train, nuisance_cfg, &s_fold.derive(0))?;
            let cf = fit_causal_forest(&train, &nuis, causal_cfg, &s_fold.derive(1))?;

            let x_hold = ds.x().select(Axis(0), &hold_rows);
            let tau_hold = cf.predict_cates(&x_hold)?;
            for (pos, &i) in hold_rows.iter().enumerate() {
                let row = ds.x().row(i);
                let e = clip_propensity(nuis.models.e.predict_row(row));
                let f = nuis.models.f.predict_row(row);
                let tau = tau_hold[pos];
                gamma_acc[i] +=
                    residualized_score(tau, e, f64::from(ds.w()[i]), ds.y()[i], f);
                tau_acc[i] += tau;
            }
        }
    }
    let t_real = t as f64;
    let gamma: Vec<f64> = gamma_acc.into_iter().map(|g| g / t_real).collect();
    let tau_hat: Vec<f64> = tau_acc.into_iter().map(|v| v / t_real).collect();
    ScoreSet::new(Method::Cftt, gamma, tau_hat)
}
