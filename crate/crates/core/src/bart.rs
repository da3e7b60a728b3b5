//! Bayesian additive regression trees (BART).
//!
//! The model is a sum of `J` small regression trees with a regularizing
//! prior: each node at depth `d` splits with probability
//! `base * (1 + d)^(-power)`, leaf values are i.i.d. `N(0, sigma_mu^2)`, and
//! (for continuous outcomes) the noise variance has a scaled
//! inverse-chi-squared prior calibrated so that a chosen prior quantile `q`
//! matches the sample standard deviation. Binary outcomes use the latent
//! Gaussian (probit) augmentation: a latent `z_i ~ N(G(x_i), 1)` is truncated
//! to the half-line dictated by `y_i`, and the trees fit `z` with unit noise.
//!
//! Sampling is a Metropolis-within-Gibbs sweep: each tree in turn proposes a
//! grow, prune, or change move on its structure (accepted by the exact
//! marginal-likelihood ratio with the leaf values integrated out), then
//! redraws its leaf values from their conjugate normal posteriors; after the
//! sweep the chain redraws the noise variance (continuous) or the latent
//! variables (binary). Truncated normals use an exponential rejection
//! sampler that stays exact far into the tail, rather than inverting the
//! normal CDF.
//!
//! For treatment-effect estimation the crate uses a single-model design: one
//! BART fit of the outcome on `[x, w]` (optionally augmented with an
//! estimated propensity column), queried at `w = 1` and `w = 0` to form
//! conditional means, plus a probit BART fit of `w` on `x` for the
//! propensity. Those plug-in estimates feed the usual doubly robust score.

use ndarray::{concatenate, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::{Dataset, Method, OutcomeKind, ScoreSet};
use crate::drlearner::dr_scores_from;
use crate::error::{Error, Result};
use crate::forest::clip_propensity;
use crate::rng::RngStream;

/// Likelihood family of a BART fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BartKind {
    /// Latent-Gaussian model for 0/1 outcomes; predictions are probabilities.
    Probit,
    /// Gaussian model for continuous outcomes.
    Gaussian,
}

/// Tuning parameters of a BART fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BartConfig {
    /// Number of trees in the sum.
    pub n_trees: usize,
    /// Total MCMC iterations, including burn-in.
    pub n_draws: usize,
    /// Iterations discarded before accumulating the posterior.
    pub n_burn: usize,
    /// Leaf-shrinkage factor: larger `k` pulls leaf values harder to zero.
    pub k: f64,
    /// Depth-prior base: a node at depth `d` splits with probability
    /// `base * (1 + d)^(-power)`.
    pub base: f64,
    /// Depth-prior power.
    pub power: f64,
    /// Degrees of freedom of the noise-variance prior (continuous only).
    pub nu: f64,
    /// Prior quantile matched to the sample standard deviation.
    pub q: f64,
    /// Maximum number of candidate cutpoints per feature.
    pub max_cutpoints: usize,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig {
            n_trees: 200,
            n_draws: 2500,
            n_burn: 500,
            k: 2.0,
            base: 0.95,
            power: 2.0,
            nu: 3.0,
            q: 0.9,
            max_cutpoints: 100,
        }
    }
}

impl BartConfig {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid_argument("need at least one tree"));
        }
        if self.n_burn >= self.n_draws {
            return Err(Error::invalid_argument(format!(
                "burn-in ({}) must be shorter than the chain ({})",
                self.n_burn, self.n_draws
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::invalid_argument("k must be positive and finite"));
        }
        if !(self.base > 0.0 && self.base < 1.0) {
            return Err(Error::invalid_argument("base must lie in (0, 1)"));
        }
        if self.power.is_nan() || self.power <= 0.0 {
            return Err(Error::invalid_argument("power must be positive"));
        }
        if self.nu.is_nan() || self.nu <= 0.0 {
            return Err(Error::invalid_argument("nu must be positive"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::invalid_argument("q must lie in (0, 1)"));
        }
        if self.max_cutpoints == 0 {
            return Err(Error::invalid_argument("need at least one cutpoint"));
        }
        Ok(())
    }
}

/// Draws from `N(mean, 1)` truncated to `(lower, inf)`.
///
/// Near the bulk this rejects standard normals; deep in the tail it switches
/// to a shifted-exponential proposal whose acceptance probability
/// `exp(-(x - lambda)^2 / 2)` keeps the sampler exact for any cutoff.
fn draw_truncated_normal_above(stream: &mut RngStream, mean: f64, lower: f64) -> f64 {
    let alpha = lower - mean;
    if alpha <= 0.45 {
        loop {
            let x = stream.draw_normal();
            if x > alpha {
                return mean + x;
            }
        }
    }
    let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
    loop {
        let u = stream.draw_uniform();
        let x = alpha - (1.0 - u).ln() / lambda;
        let rho = (-0.5 * (x - lambda) * (x - lambda)).exp();
        if stream.draw_uniform() < rho {
            return mean + x;
        }
    }
}

/// Draws from `N(mean, 1)` truncated to `(-inf, upper)`.
fn draw_truncated_normal_below(stream: &mut RngStream, mean: f64, upper: f64) -> f64 {
    -draw_truncated_normal_above(stream, -mean, -upper)
}

/// Candidate cutpoints for one feature: the sorted unique training values
/// without the maximum (a split there would empty the right child), thinned
/// to at most `max_cuts` by even striding.
fn cutpoint_grid(col: ArrayView1<'_, f64>, max_cuts: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = col.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite covariates"));
    vals.dedup();
    if vals.len() < 2 {
        return Vec::new();
    }
    vals.pop();
    if vals.len() <= max_cuts {
        return vals;
    }
    let m = vals.len();
    (0..max_cuts).map(|i| vals[i * m / max_cuts]).collect()
}

#[derive(Debug, Clone, Copy)]
struct BNode {
    active: bool,
    left: i32,
    right: i32,
    feature: u32,
    cut: f64,
    mu: f64,
    depth: u32,
}

impl BNode {
    fn leaf_at(depth: u32) -> Self {
        BNode {
            active: true,
            left: -1,
            right: -1,
            feature: 0,
            cut: 0.0,
            mu: 0.0,
            depth,
        }
    }
}

#[derive(Debug, Clone)]
struct BTree {
    nodes: Vec<BNode>,
    free: Vec<u32>,
}

impl BTree {
    fn new_root() -> Self {
        BTree {
            nodes: vec![BNode::leaf_at(0)],
            free: Vec::new(),
        }
    }

    fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].left < 0
    }

    fn is_root_only(&self) -> bool {
        self.is_leaf(0)
    }

    fn leaf_ids(&self) -> Vec<u32> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].active && self.is_leaf(i))
            .map(|i| i as u32)
            .collect()
    }

    /// Internal nodes whose children are both leaves: the prune/change pool.
    fn singly_internal_ids(&self) -> Vec<u32> {
        (0..self.nodes.len())
            .filter(|&i| {
                let node = &self.nodes[i];
                node.active
                    && node.left >= 0
                    && self.is_leaf(node.left as usize)
                    && self.is_leaf(node.right as usize)
            })
            .map(|i| i as u32)
            .collect()
    }

    fn alloc(&mut self, node: BNode) -> u32 {
        if let Some(slot) = self.free.pop() {
            self.nodes[slot as usize] = node;
            slot
        } else {
            self.nodes.push(node);
            (self.nodes.len() - 1) as u32
        }
    }

    fn apply_grow(&mut self, leaf: u32, feature: u32, cut: f64) {
        let depth = self.nodes[leaf as usize].depth + 1;
        let left = self.alloc(BNode::leaf_at(depth));
        let right = self.alloc(BNode::leaf_at(depth));
        let node = &mut self.nodes[leaf as usize];
        node.left = left as i32;
        node.right = right as i32;
        node.feature = feature;
        node.cut = cut;
    }

    fn apply_prune(&mut self, id: u32) {
        let node = self.nodes[id as usize];
        self.nodes[node.left as usize].active = false;
        self.nodes[node.right as usize].active = false;
        self.free.push(node.left as u32);
        self.free.push(node.right as u32);
        let node = &mut self.nodes[id as usize];
        node.left = -1;
        node.right = -1;
    }

    fn leaf_index(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            if node.left < 0 {
                return at;
            }
            at = if row[node.feature as usize] <= node.cut {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    fn eval(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.nodes[self.leaf_index(row)].mu
    }
}

/// Log marginal likelihood of a leaf's residuals with the leaf value
/// integrated out, up to terms that cancel between competing structures over
/// the same rows.
fn log_marginal(n: f64, s: f64, sigma2: f64, sigma_mu2: f64) -> f64 {
    let denom = sigma2 + n * sigma_mu2;
    0.5 * (sigma2 / denom).ln() + sigma_mu2 * s * s / (2.0 * sigma2 * denom)
}

struct SamplerCtx<'a> {
    x_all: &'a Array2<f64>,
    grids: &'a [Vec<f64>],
    n_train: usize,
    sigma_mu2: f64,
    base: f64,
    power: f64,
}

impl SamplerCtx<'_> {
    fn alpha(&self, depth: f64) -> f64 {
        self.base * (1.0 + depth).powf(-self.power)
    }

    /// Log of the depth-prior ratio contributed by splitting a leaf at
    /// `depth` into two leaves.
    fn log_split_prior(&self, depth: f64) -> f64 {
        let a = self.alpha(depth);
        let a_child = self.alpha(depth + 1.0);
        a.ln() + 2.0 * (1.0 - a_child).ln() - (1.0 - a).ln()
    }

    /// Training rows per node id.
    fn assign(&self, tree: &BTree) -> Vec<Vec<u32>> {
        let mut per_leaf = vec![Vec::new(); tree.nodes.len()];
        for i in 0..self.n_train {
            per_leaf[tree.leaf_index(self.x_all.row(i))].push(i as u32);
        }
        per_leaf
    }

    /// Features that admit at least one cutpoint separating `rows`, with the
    /// grid offset and count of admissible cutpoints for each. A cutpoint is
    /// admissible when both children would be nonempty, so empty-child
    /// proposals cannot occur.
    fn available_features(&self, rows: &[u32]) -> Vec<(usize, usize, usize)> {
        (0..self.grids.len())
            .filter_map(|j| {
                let grid = &self.grids[j];
                if grid.is_empty() {
                    return None;
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &r in rows {
                    let v = self.x_all[[r as usize, j]];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let a = grid.partition_point(|&c| c < lo);
                let b = grid.partition_point(|&c| c < hi);
                (b > a).then_some((j, a, b - a))
            })
            .collect()
    }

    fn stats(&self, rows: &[u32], r: &[f64]) -> (f64, f64) {
        let mut s = 0.0;
        for &i in rows {
            s += r[i as usize];
        }
        (rows.len() as f64, s)
    }

    fn split_stats(
        &self,
        rows: &[u32],
        feature: usize,
        cut: f64,
        r: &[f64],
    ) -> (f64, f64, f64, f64) {
        let mut n_l = 0.0;
        let mut s_l = 0.0;
        let mut n_r = 0.0;
        let mut s_r = 0.0;
        for &i in rows {
            if self.x_all[[i as usize, feature]] <= cut {
                n_l += 1.0;
                s_l += r[i as usize];
            } else {
                n_r += 1.0;
                s_r += r[i as usize];
            }
        }
        (n_l, s_l, n_r, s_r)
    }
}

const P_GROW: f64 = 0.25;
const P_PRUNE: f64 = 0.25;

/// One Metropolis step on a tree's structure. Returns whether the proposal
/// was accepted.
fn structural_move(
    tree: &mut BTree,
    per_leaf: &[Vec<u32>],
    r: &[f64],
    sigma2: f64,
    ctx: &SamplerCtx<'_>,
    stream: &mut RngStream,
) -> bool {
    let sigma_mu2 = ctx.sigma_mu2;
    let lm = |n: f64, s: f64| log_marginal(n, s, sigma2, sigma_mu2);
    let root_only = tree.is_root_only();
    let kind = if root_only {
        0
    } else {
        let u = stream.draw_uniform();
        if u < P_GROW {
            0
        } else if u < P_GROW + P_PRUNE {
            1
        } else {
            2
        }
    };

    match kind {
        0 => {
            // Grow: split a uniformly chosen leaf on an admissible rule.
            let leaves = tree.leaf_ids();
            let b = leaves.len() as f64;
            let leaf = leaves[stream.draw_index(leaves.len())];
            let rows = &per_leaf[leaf as usize];
            let avail = ctx.available_features(rows);
            if avail.is_empty() {
                return false;
            }
            let p_adj = avail.len() as f64;
            let (feature, offset, count) = avail[stream.draw_index(avail.len())];
            let cut = ctx.grids[feature][offset + stream.draw_index(count)];
            let (n_l, s_l, n_r, s_r) = ctx.split_stats(rows, feature, cut, r);

            let mut cand = tree.clone();
            cand.apply_grow(leaf, feature as u32, cut);
            let w2_star = cand.singly_internal_ids().len() as f64;
            let p_grow_here = if root_only { 1.0 } else { P_GROW };

            let log_q = (P_PRUNE / w2_star).ln()
                - (p_grow_here / (b * p_adj * count as f64)).ln();
            let log_l = lm(n_l, s_l) + lm(n_r, s_r) - lm(n_l + n_r, s_l + s_r);
            let log_s = ctx.log_split_prior(f64::from(tree.nodes[leaf as usize].depth));
            if stream.draw_uniform().ln() < log_q + log_l + log_s {
                *tree = cand;
                true
            } else {
                false
            }
        }
        1 => {
            // Prune: collapse a uniformly chosen split with two leaf children.
            let pool = tree.singly_internal_ids();
            let w2 = pool.len() as f64;
            let node = pool[stream.draw_index(pool.len())];
            let (left, right) = {
                let nd = &tree.nodes[node as usize];
                (nd.left as usize, nd.right as usize)
            };
            let (n_l, s_l) = ctx.stats(&per_leaf[left], r);
            let (n_r, s_r) = ctx.stats(&per_leaf[right], r);
            let merged: Vec<u32> = per_leaf[left]
                .iter()
                .chain(&per_leaf[right])
                .copied()
                .collect();
            let avail = ctx.available_features(&merged);
            let p_adj = avail.len() as f64;
            let feature_old = tree.nodes[node as usize].feature as usize;
            let count_old = avail
                .iter()
                .find(|a| a.0 == feature_old)
                .map_or(1, |a| a.2) as f64;

            let mut cand = tree.clone();
            cand.apply_prune(node);
            let b_cand = cand.leaf_ids().len() as f64;
            let p_grow_back = if cand.is_root_only() { 1.0 } else { P_GROW };

            let log_q = (p_grow_back / (b_cand * p_adj * count_old)).ln()
                - (P_PRUNE / w2).ln();
            let log_l = lm(n_l + n_r, s_l + s_r) - lm(n_l, s_l) - lm(n_r, s_r);
            let log_s =
                -ctx.log_split_prior(f64::from(tree.nodes[node as usize].depth));
            if stream.draw_uniform().ln() < log_q + log_l + log_s {
                *tree = cand;
                true
            } else {
                false
            }
        }
        _ => {
            // Change: redraw the rule of a split with two leaf children.
            let pool = tree.singly_internal_ids();
            let node = pool[stream.draw_index(pool.len())];
            let (left, right) = {
                let nd = &tree.nodes[node as usize];
                (nd.left as usize, nd.right as usize)
            };
            let (n_l, s_l) = ctx.stats(&per_leaf[left], r);
            let (n_r, s_r) = ctx.stats(&per_leaf[right], r);
            let merged: Vec<u32> = per_leaf[left]
                .iter()
                .chain(&per_leaf[right])
                .copied()
                .collect();
            let avail = ctx.available_features(&merged);
            if avail.is_empty() {
                return false;
            }
            let (feature_new, offset, count_new) = avail[stream.draw_index(avail.len())];
            let cut_new = ctx.grids[feature_new][offset + stream.draw_index(count_new)];
            let feature_old = tree.nodes[node as usize].feature as usize;
            let count_old = avail
                .iter()
                .find(|a| a.0 == feature_old)
                .map_or(1, |a| a.2) as f64;
            let (n_l2, s_l2, n_r2, s_r2) = ctx.split_stats(&merged, feature_new, cut_new, r);
            if n_l2 == 0.0 || n_r2 == 0.0 {
                return false;
            }

            let log_q = (count_new as f64).ln() - count_old.ln();
            let log_l = lm(n_l2, s_l2) + lm(n_r2, s_r2) - lm(n_l, s_l) - lm(n_r, s_r);
            if stream.draw_uniform().ln() < log_q + log_l {
                let nd = &mut tree.nodes[node as usize];
                nd.feature = feature_new as u32;
                nd.cut = cut_new;
                true
            } else {
                false
            }
        }
    }
}

/// A fitted BART posterior, reduced to the posterior-mean predictions at the
/// query points supplied to [`fit_bart`].
#[derive(Debug, Clone)]
pub struct BartFit {
    /// Likelihood family used.
    pub kind: BartKind,
    /// Number of retained (post burn-in) draws.
    pub n_retained: usize,
    /// Posterior-mean prediction for each query matrix, in query order.
    /// Probit fits return probabilities; Gaussian fits return values on the
    /// original outcome scale.
    pub query_means: Vec<Vec<f64>>,
    /// Retained noise-standard-deviation draws on the original outcome scale
    /// (empty for probit fits).
    pub sigma_draws: Vec<f64>,
    /// Fraction of structural proposals accepted (chain diagnostic).
    pub acceptance_rate: f64,
}

/// Fits a BART model of `y` on `x` and returns posterior-mean predictions at
/// each matrix in `queries`.
///
/// # Errors
/// [`Error::InvalidArgument`] for invalid configuration, shape mismatches, or
/// non-0/1 outcomes under [`BartKind::Probit`]; [`Error::FitFailed`] when
/// there are no rows.
pub fn fit_bart(
    x: &Array2<f64>,
    y: &[f64],
    kind: BartKind,
    cfg: &BartConfig,
    queries: &[&Array2<f64>],
    stream: &RngStream,
) -> Result<BartFit> {
    cfg.validate()?;
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 {
        return Err(Error::fit_failed("cannot fit on zero rows"));
    }
    if y.len() != n {
        return Err(Error::invalid_argument(format!(
            "{n} rows but {} outcomes",
            y.len()
        )));
    }
    if kind == BartKind::Probit && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid_argument(
            "probit outcomes must be 0 or 1",
        ));
    }
    for (qi, q) in queries.iter().enumerate() {
        if q.ncols() != p {
            return Err(Error::invalid_argument(format!(
                "query matrix {qi} has {} columns, expected {p}",
                q.ncols()
            )));
        }
    }

    // Scale continuous outcomes to [-0.5, 0.5]; keep probit outcomes as is.
    let (offset, range, targets): (f64, f64, Vec<f64>) = match kind {
        BartKind::Gaussian => {
            let min = y.iter().copied().fold(f64::INFINITY, f64::min);
            let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            let t = if range > 0.0 {
                y.iter().map(|&v| (v - min) / range - 0.5).collect()
            } else {
                vec![0.0; n]
            };
            (min, range, t)
        }
        BartKind::Probit => (0.0, 1.0, y.to_vec()),
    };

    let n_trees = cfg.n_trees;
    let sigma_mu = match kind {
        BartKind::Gaussian => 0.5 / (cfg.k * (n_trees as f64).sqrt()),
        BartKind::Probit => 3.0 / (cfg.k * (n_trees as f64).sqrt()),
    };
    let sigma_mu2 = sigma_mu * sigma_mu;

    // Noise-variance prior: P(sigma^2 <= s_hat^2) = q under
    // sigma^2 = nu * lambda / chi^2_nu.
    let (lambda, mut sigma2) = match kind {
        BartKind::Gaussian => {
            let mean = targets.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let s_hat2 = var.max(1e-18);
            let chi_quantile = ChiSquared::new(cfg.nu)
                .map_err(|e| Error::invalid_argument(format!("nu: {e}")))?
                .inverse_cdf(1.0 - cfg.q);
            (chi_quantile * s_hat2 / cfg.nu, s_hat2)
        }
        BartKind::Probit => (0.0, 1.0),
    };

    let grids: Vec<Vec<f64>> = (0..p)
        .map(|j| cutpoint_grid(x.column(j), cfg.max_cutpoints))
        .collect();

    // Stack training and query rows so every tree update refreshes all
    // predictions incrementally.
    let mut views = vec![x.view()];
    for q in queries {
        views.push(q.view());
    }
    let x_all =
        concatenate(Axis(0), &views).map_err(|e| Error::invalid_data(e.to_string()))?;
    let n_all = x_all.nrows();
    let mut query_offsets = Vec::with_capacity(queries.len());
    {
        let mut at = n;
        for q in queries {
            query_offsets.push(at);
            at += q.nrows();
        }
    }

    let ctx = SamplerCtx {
        x_all: &x_all,
        grids: &grids,
        n_train: n,
        sigma_mu2,
        base: cfg.base,
        power: cfg.power,
    };

    let mut s = stream.derive(0);
    let mut trees: Vec<BTree> = (0..n_trees).map(|_| BTree::new_root()).collect();
    let mut fits: Vec<Vec<f64>> = vec![vec![0.0; n_all]; n_trees];
    let mut g_all = vec![0.0; n_all];

    // Residuals are relative to the latent target: z - G for probit,
    // scaled y - G for Gaussian.
    let mut resid = match kind {
        BartKind::Gaussian => targets.clone(),
        BartKind::Probit => targets
            .iter()
            .map(|&yv| {
                if yv == 1.0 {
                    draw_truncated_normal_above(&mut s, 0.0, 0.0)
                } else {
                    draw_truncated_normal_below(&mut s, 0.0, 0.0)
                }
            })
            .collect(),
    };

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut r = vec![0.0; n];
    let mut query_sums: Vec<Vec<f64>> = queries.iter().map(|q| vec![0.0; q.nrows()]).collect();
    let mut sigma_draws = Vec::new();
    let mut n_retained = 0usize;
    let mut accepted = 0usize;
    let mut proposed = 0usize;

    for it in 0..cfg.n_draws {
        for j in 0..n_trees {
            for i in 0..n {
                r[i] = resid[i] + fits[j][i];
            }
            let per_leaf = ctx.assign(&trees[j]);
            proposed += 1;
            if structural_move(&mut trees[j], &per_leaf, &r, sigma2, &ctx, &mut s) {
                accepted += 1;
            }

            // Conjugate redraw of every leaf value.
            let per_leaf = ctx.assign(&trees[j]);
            for leaf in trees[j].leaf_ids() {
                let (n_l, s_l) = ctx.stats(&per_leaf[leaf as usize], &r);
                let denom = sigma2 + n_l * sigma_mu2;
                let mean = s_l * sigma_mu2 / denom;
                let sd = (sigma2 * sigma_mu2 / denom).sqrt();
                trees[j].nodes[leaf as usize].mu = mean + sd * s.draw_normal();
            }

            for i in 0..n_all {
                let new = trees[j].eval(x_all.row(i));
                let delta = new - fits[j][i];
                if delta != 0.0 {
                    fits[j][i] = new;
                    g_all[i] += delta;
                    if i < n {
                        resid[i] -= delta;
                    }
                }
            }
        }

        match kind {
            BartKind::Gaussian => {
                let sse: f64 = resid.iter().map(|e| e * e).sum();
                let chi = s.draw_chi_squared(cfg.nu + n as f64)?;
                sigma2 = (cfg.nu * lambda + sse) / chi;
            }
            BartKind::Probit => {
                for i in 0..n {
                    let g = g_all[i];
                    let z = if targets[i] == 1.0 {
                        draw_truncated_normal_above(&mut s, g, 0.0)
                    } else {
                        draw_truncated_normal_below(&mut s, g, 0.0)
                    };
                    resid[i] = z - g;
                }
            }
        }

        if it >= cfg.n_burn {
            n_retained += 1;
            for (qi, sums) in query_sums.iter_mut().enumerate() {
                let off = query_offsets[qi];
                for (pos, sum) in sums.iter_mut().enumerate() {
                    let g = g_all[off + pos];
                    *sum += match kind {
                        BartKind::Probit => std_normal.cdf(g),
                        BartKind::Gaussian => {
                            if range > 0.0 {
                                (g + 0.5) * range + offset
                            } else {
                                g + offset
                            }
                        }
                    };
                }
            }
            if kind == BartKind::Gaussian {
                sigma_draws.push(sigma2.sqrt() * if range > 0.0 { range } else { 1.0 });
            }
        }
    }

    let query_means: Vec<Vec<f64>> = query_sums
        .into_iter()
        .map(|sums| sums.into_iter().map(|v| v / n_retained as f64).collect())
        .collect();

    Ok(BartFit {
        kind,
        n_retained,
        query_means,
        sigma_draws,
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
    })
}

/// Configuration of the BART-based scoring method.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BartMethodConfig {
    /// Chain settings for the outcome model.
    pub outcome: BartConfig,
    /// Chain settings for the propensity model.
    pub propensity: BartConfig,
    /// Append the estimated propensity as an extra outcome-model feature.
    pub include_propensity_feature: bool,
    /// Whether the doubly robust scores use the normalised weights.
    pub normalise: bool,
}

/// Doubly robust scores with BART plug-in nuisances.
///
/// Fits a probit BART of treatment on covariates for the propensity and a
/// single outcome BART on `[x, w]` (probit for binary outcomes, Gaussian for
/// continuous ones), queried at both treatment arms to form conditional-mean
/// and effect estimates for every training row.
///
/// # Errors
/// Propagates fit failures; [`Error::InvalidData`] when normalisation is
/// requested with an empty arm.
pub fn bart_scores(
    ds: &Dataset,
    cfg: &BartMethodConfig,
    stream: &RngStream,
) -> Result<ScoreSet> {
    let n = ds.n();
    let p = ds.p();
    let w_real: Vec<f64> = ds.w().iter().map(|&w| f64::from(w)).collect();

    let e_fit = fit_bart(
        ds.x(),
        &w_real,
        BartKind::Probit,
        &cfg.propensity,
        &[ds.x()],
        &stream.derive(0),
    )?;
    let e_hat: Vec<f64> = e_fit.query_means[0]
        .iter()
        .map(|&e| clip_propensity(e))
        .collect();

    let extra = if cfg.include_propensity_feature { 2 } else { 1 };
    let mut design = Array2::zeros((n, p + extra));
    let mut q1 = Array2::zeros((n, p + extra));
    let mut q0 = Array2::zeros((n, p + extra));
    for i in 0..n {
        for j in 0..p {
            design[[i, j]] = ds.x()[[i, j]];
            q1[[i, j]] = ds.x()[[i, j]];
            q0[[i, j]] = ds.x()[[i, j]];
        }
        design[[i, p]] = w_real[i];
        q1[[i, p]] = 1.0;
        q0[[i, p]] = 0.0;
        if cfg.include_propensity_feature {
            design[[i, p + 1]] = e_hat[i];
            q1[[i, p + 1]] = e_hat[i];
            q0[[i, p + 1]] = e_hat[i];
        }
    }

    let kind = match ds.outcome_kind {
        OutcomeKind::Binary => BartKind::Probit,
        OutcomeKind::Continuous => BartKind::Gaussian,
    };
    let y_fit = fit_bart(
        &design,
        ds.y(),
        kind,
        &cfg.outcome,
        &[&q1, &q0],
        &stream.derive(1),
    )?;
    let m1_hat = y_fit.query_means[0].clone();
    let m0_hat = y_fit.query_means[1].clone();
    let tau_hat: Vec<f64> = m1_hat.iter().zip(&m0_hat).map(|(a, b)| a - b).collect();
    let gamma = dr_scores_from(ds.y(), ds.w(), &e_hat, &m0_hat, &m1_hat, cfg.normalise)?;
    ScoreSet::new(Method::Bart, gamma, tau_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quick_cfg(n_trees: usize, n_draws: usize, n_burn: usize) -> BartConfig {
        BartConfig {
            n_trees,
            n_draws,
            n_burn,
            ..BartConfig::default()
        }
    }

    #[test]
    fn default_config_matches_the_documented_settings() {
        let cfg = BartConfig::default();
        assert_eq!(cfg.n_trees, 200);
        assert_eq!(cfg.n_draws, 2500);
        assert_eq!(cfg.n_burn, 500);
        assert_eq!(cfg.k, 2.0);
        assert_eq!(cfg.base, 0.95);
        assert_eq!(cfg.power, 2.0);
        assert_eq!(cfg.nu, 3.0);
        assert_eq!(cfg.q, 0.9);
        assert_eq!(cfg.max_cutpoints, 100);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let cfg = BartConfig {
            n_burn: BartConfig::default().n_draws,
            ..BartConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BartConfig {
            k: 0.0,
            ..BartConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BartConfig {
            base: 1.0,
            ..BartConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BartConfig {
            q: 1.0,
            ..BartConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truncated_normal_matches_tail_moments() {
        // E[X | X > a] = phi(a) / (1 - Phi(a)) for a standard normal.
        let mut s = RngStream::root(91);
        let n = 20_000;
        let mean_deep: f64 = (0..n)
            .map(|_| draw_truncated_normal_above(&mut s, 0.0, 2.0))
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean_deep - 2.3732).abs() < 0.05,
            "deep-tail mean {mean_deep}"
        );
        let mean_bulk: f64 = (0..n)
            .map(|_| draw_truncated_normal_above(&mut s, 0.0, -1.0))
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean_bulk - 0.2876).abs() < 0.02,
            "bulk-truncation mean {mean_bulk}"
        );
        // The lower-tail sampler mirrors the upper one.
        let mean_below: f64 = (0..n)
            .map(|_| draw_truncated_normal_below(&mut s, 0.0, -2.0))
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean_below + 2.3732).abs() < 0.05,
            "mirrored mean {mean_below}"
        );
        // Support constraints hold exactly.
        for _ in 0..200 {
            assert!(draw_truncated_normal_above(&mut s, 1.0, 3.0) > 3.0);
            assert!(draw_truncated_normal_below(&mut s, 1.0, -1.0) < -1.0);
        }
    }

    #[test]
    fn cutpoint_grids_thin_and_exclude_the_maximum() {
        let col = ndarray::Array1::from_vec(vec![3.0, 1.0, 2.0, 2.0, 1.0]);
        let grid = cutpoint_grid(col.view(), 100);
        assert_eq!(grid, vec![1.0, 2.0]); // max (3.0) excluded
        let constant = ndarray::Array1::from_vec(vec![5.0; 8]);
        assert!(cutpoint_grid(constant.view(), 100).is_empty());
        let many = ndarray::Array1::from_vec((0..500).map(f64::from).collect::<Vec<_>>());
        let grid = cutpoint_grid(many.view(), 100);
        assert_eq!(grid.len(), 100);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert!(grid.iter().all(|&c| c < 499.0));
    }

    #[test]
    fn probit_fit_saturates_on_all_ones() {
        let mut s = RngStream::root(17);
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |_| s.draw_normal());
        let y = vec![1.0; n];
        let fit = fit_bart(
            &x,
            &y,
            BartKind::Probit,
            &quick_cfg(20, 250, 50),
            &[&x],
            &RngStream::root(5),
        )
        .unwrap();
        let mean: f64 = fit.query_means[0].iter().sum::<f64>() / n as f64;
        assert!(mean > 0.9, "all-ones posterior mean {mean}");
        assert!(fit.query_means[0].iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn probit_fit_tracks_a_fair_coin() {
        let mut s = RngStream::root(29);
        let n = 500;
        let x = Array2::from_shape_fn((n, 2), |_| s.draw_normal());
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(s.draw_bernoulli(0.5).unwrap()))
            .collect();
        let fit = fit_bart(
            &x,
            &y,
            BartKind::Probit,
            &quick_cfg(20, 250, 50),
            &[&x],
            &RngStream::root(6),
        )
        .unwrap();
        let mean: f64 = fit.query_means[0].iter().sum::<f64>() / n as f64;
        assert!((0.4..=0.6).contains(&mean), "coin-flip posterior mean {mean}");
    }

    #[test]
    fn gaussian_fit_reproduces_a_constant_outcome() {
        let mut s = RngStream::root(31);
        let n = 200;
        let x = Array2::from_shape_fn((n, 2), |_| s.draw_normal());
        let y = vec![3.0; n];
        let fit = fit_bart(
            &x,
            &y,
            BartKind::Gaussian,
            &quick_cfg(10, 150, 30),
            &[&x],
            &RngStream::root(7),
        )
        .unwrap();
        for &v in &fit.query_means[0] {
            assert!((v - 3.0).abs() < 0.05, "constant fit drifted to {v}");
        }
    }

    #[test]
    fn gaussian_fit_learns_a_noiseless_step() {
        let mut s = RngStream::root(37);
        let n = 1000;
        let x = Array2::from_shape_fn((n, 2), |_| s.draw_normal());
        let y: Vec<f64> = (0..n).map(|i| f64::from(x[[i, 0]] > 0.0)).collect();
        let fit = fit_bart(
            &x,
            &y,
            BartKind::Gaussian,
            &quick_cfg(50, 500, 100),
            &[&x],
            &RngStream::root(8),
        )
        .unwrap();
        let rmse: f64 = (fit.query_means[0]
            .iter()
            .zip(&y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(rmse < 0.1, "noiseless step RMSE {rmse}");
        assert!(fit.acceptance_rate > 0.0 && fit.acceptance_rate < 1.0);
        assert!(fit.sigma_draws.len() == fit.n_retained);
    }

    #[test]
    fn constant_treatment_column_yields_exactly_zero_effects() {
        // If every training unit is treated, the treatment column has no
        // admissible cutpoint, so no tree can split on it and the two
        // counterfactual queries walk identical paths.
        let mut s = RngStream::root(41);
        let n = 150;
        let p = 2;
        let mut design = Array2::from_shape_fn((n, p + 1), |_| s.draw_normal());
        let mut q1 = design.clone();
        let mut q0 = design.clone();
        for i in 0..n {
            design[[i, p]] = 1.0;
            q1[[i, p]] = 1.0;
            q0[[i, p]] = 0.0;
        }
        let y: Vec<f64> = (0..n).map(|i| design[[i, 0]]).collect();
        let fit = fit_bart(
            &design,
            &y,
            BartKind::Gaussian,
            &quick_cfg(10, 150, 30),
            &[&q1, &q0],
            &RngStream::root(9),
        )
        .unwrap();
        for i in 0..n {
            assert_eq!(
                fit.query_means[0][i], fit.query_means[1][i],
                "counterfactual means must be bitwise equal at row {i}"
            );
        }
    }

    #[test]
    fn retention_counts_only_post_burn_draws() {
        let mut s = RngStream::root(43);
        let x = Array2::from_shape_fn((30, 1), |_| s.draw_normal());
        let y: Vec<f64> = (0..30).map(|_| s.draw_normal()).collect();
        let fit = fit_bart(
            &x,
            &y,
            BartKind::Gaussian,
            &quick_cfg(5, 120, 20),
            &[],
            &RngStream::root(10),
        )
        .unwrap();
        assert_eq!(fit.n_retained, 100);
        assert_eq!(fit.sigma_draws.len(), 100);
        assert!(fit.query_means.is_empty());
    }

    #[test]
    fn fits_are_deterministic_in_the_stream() {
        let mut s = RngStream::root(47);
        let x = Array2::from_shape_fn((80, 2), |_| s.draw_normal());
        let y: Vec<f64> = (0..80).map(|i| x[[i, 0]] + 0.1 * s.draw_normal()).collect();
        let cfg = quick_cfg(8, 100, 20);
        let a = fit_bart(&x, &y, BartKind::Gaussian, &cfg, &[&x], &RngStream::root(3)).unwrap();
        let b = fit_bart(&x, &y, BartKind::Gaussian, &cfg, &[&x], &RngStream::root(3)).unwrap();
        let c = fit_bart(&x, &y, BartKind::Gaussian, &cfg, &[&x], &RngStream::root(4)).unwrap();
        assert_eq!(a.query_means, b.query_means);
        assert_ne!(a.query_means, c.query_means);
    }

    #[test]
    fn probit_rejects_non_binary_outcomes() {
        let x = Array2::zeros((4, 1));
        let err = fit_bart(
            &x,
            &[0.0, 1.0, 0.5, 1.0],
            BartKind::Probit,
            &quick_cfg(2, 20, 5),
            &[],
            &RngStream::root(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn query_shapes_are_validated() {
        let mut s = RngStream::root(53);
        let x = Array2::from_shape_fn((20, 2), |_| s.draw_normal());
        let y = vec![0.0; 20];
        let bad = Array2::zeros((5, 3));
        let err = fit_bart(
            &x,
            &y,
            BartKind::Gaussian,
            &quick_cfg(2, 20, 5),
            &[&bad],
            &RngStream::root(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn bart_scores_recover_a_constant_effect_in_a_randomized_trial() {
        let mut s = RngStream::root(59);
        let n = 240;
        let x = Array2::from_shape_fn((n, 2), |_| s.draw_normal());
        let w: Vec<u8> = (0..n)
            .map(|_| u8::from(s.draw_bernoulli(0.5).unwrap()))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[[i, 0]] + f64::from(w[i]) + 0.2 * s.draw_normal())
            .collect();
        let ds = Dataset::new(x, w, y, None, OutcomeKind::Continuous, false).unwrap();
        let cfg = BartMethodConfig {
            outcome: quick_cfg(25, 250, 50),
            propensity: quick_cfg(10, 120, 20),
            include_propensity_feature: false,
            normalise: false,
        };
        let scores = bart_scores(&ds, &cfg, &RngStream::root(61)).unwrap();
        assert_eq!(scores.method, Method::Bart);
        assert_eq!(scores.gamma.len(), ds.n());
        assert_eq!(scores.tau_hat.len(), ds.n());
        assert!(
            (scores.ate - 1.0).abs() < 0.4,
            "score mean {} should be near the constant effect 1.0",
            scores.ate
        );
        let mean_tau: f64 =
            scores.tau_hat.iter().sum::<f64>() / scores.tau_hat.len() as f64;
        assert!(
            (mean_tau - 1.0).abs() < 0.5,
            "effect estimates average to {mean_tau}"
        );
        // Hand check of the score arithmetic on the first unit.
        let e0 = {
            let e_fit = fit_bart(
                ds.x(),
                &ds.w().iter().map(|&w| f64::from(w)).collect::<Vec<_>>(),
                BartKind::Probit,
                &cfg.propensity,
                &[ds.x()],
                &RngStream::root(61).derive(0),
            )
            .unwrap();
            clip_propensity(e_fit.query_means[0][0])
        };
        assert!(e0 > 0.0 && e0 < 1.0);
    }

    #[test]
    fn log_marginal_prefers_separated_children() {
        // Splitting well-separated responses should raise the marginal.
        let joint = log_marginal(20.0, 0.0, 1.0, 0.25);
        let split = log_marginal(10.0, 15.0, 1.0, 0.25) + log_marginal(10.0, -15.0, 1.0, 0.25);
        assert!(split > joint);
        // A pure-noise split pays the complexity penalty.
        let noise_joint = log_marginal(20.0, 1.0, 1.0, 0.25);
        let noise_split =
            log_marginal(10.0, 0.5, 1.0, 0.25) + log_marginal(10.0, 0.5, 1.0, 0.25);
        assert!(noise_split < noise_joint);
    }

    #[test]
    fn empty_leaf_formula_falls_back_to_the_prior() {
        // stats with n = 0 must give the prior: mean 0, variance sigma_mu^2.
        let sigma2 = 2.0;
        let sigma_mu2 = 0.3;
        let denom = sigma2 + 0.0 * sigma_mu2;
        let mean = 0.0 * sigma_mu2 / denom;
        let var = sigma2 * sigma_mu2 / denom;
        assert_abs_diff_eq!(mean, 0.0);
        assert_abs_diff_eq!(var, sigma_mu2, epsilon = 1e-15);
    }
}
