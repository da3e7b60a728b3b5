//! Dataset container, fold assignment, and shared score vocabulary.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Whether outcomes are Bernoulli or real valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    /// `y` takes values in `{0, 1}`.
    Binary,
    /// `y` is real valued.
    Continuous,
}

/// Ground truth attached to generated data: unit-level effects and
/// propensities, plus the two potential-outcome means when known.
#[derive(Debug, Clone)]
pub struct TruthBlock {
    /// Unit-level treatment effect `tau_i = m1_i - m0_i`.
    pub tau: Vec<f64>,
    /// True propensity `P(W = 1 | X = x_i)`.
    pub e: Vec<f64>,
    /// Expected outcome under control, when known.
    pub m0: Option<Vec<f64>>,
    /// Expected outcome under treatment, when known.
    pub m1: Option<Vec<f64>>,
}

impl TruthBlock {
    /// The first-best assignment rule: treat exactly the units whose true
    /// effect points in the beneficial direction (negative effects when
    /// `harmful`, positive otherwise). Units with a zero effect are left
    /// untreated.
    pub fn oracle_action(&self, harmful: bool) -> Vec<u8> {
        self.tau
            .iter()
            .map(|&t| {
                let beneficial = if harmful { t < 0.0 } else { t > 0.0 };
                u8::from(beneficial)
            })
            .collect()
    }
}

/// A treatment-outcome dataset.
///
/// Invariants are checked at construction: all columns share one length,
/// treatments are 0/1, and binary outcomes are 0/1.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Array2<f64>,
    w: Vec<u8>,
    y: Vec<f64>,
    /// Known generating quantities, present only for synthetic data.
    pub truth: Option<TruthBlock>,
    pub outcome_kind: OutcomeKind,
    /// Sign convention: when `true`, the outcome is adverse and a *negative*
    /// treatment effect means treatment helps.
    pub harmful: bool,
}

impl Dataset {
    /// Builds a dataset, validating every invariant.
    ///
    /// # Errors
    /// [`Error::InvalidData`] naming the first offending row when lengths
    /// disagree, a treatment is not 0/1, a value is non-finite, or a binary
    /// outcome is not 0/1.
    pub fn new(
        x: Array2<f64>,
        w: Vec<u8>,
        y: Vec<f64>,
        truth: Option<TruthBlock>,
        outcome_kind: OutcomeKind,
        harmful: bool,
    ) -> Result<Self> {
        let n = x.nrows();
        if w.len() != n || y.len() != n {
            return Err(Error::invalid_data(format!(
                "column lengths disagree: {n} covariate rows, {} treatments, {} outcomes",
                w.len(),
                y.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid_data("dataset has no rows"));
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            if let Some((j, _)) = row.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::invalid_data(format!(
                    "row {i}: covariate column {j} is not finite"
                )));
            }
        }
        if let Some(i) = w.iter().position(|&wi| wi > 1) {
            return Err(Error::invalid_data(format!(
                "row {i}: treatment must be 0 or 1, got {}",
                w[i]
            )));
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::invalid_data(format!(
                    "row {i}: outcome is not finite"
                )));
            }
            if outcome_kind == OutcomeKind::Binary && yi != 0.0 && yi != 1.0 {
                return Err(Error::invalid_data(format!(
                    "row {i}: binary outcome must be 0 or 1, got {yi}"
                )));
            }
        }
        if let Some(t) = &truth {
            let all_n = t.tau.len() == n
                && t.e.len() == n
                && t.m0.as_ref().is_none_or(|v| v.len() == n)
                && t.m1.as_ref().is_none_or(|v| v.len() == n);
            if !all_n {
                return Err(Error::invalid_data(
                    "truth block length does not match the dataset",
                ));
            }
        }
        Ok(Dataset {
            x,
            w,
            y,
            truth,
            outcome_kind,
            harmful,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Covariate matrix, rows are units.
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Treatment indicators.
    pub fn w(&self) -> &[u8] {
        &self.w
    }

    /// Outcomes.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row indices of treated units.
    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.w[i] == 1).collect()
    }

    /// Row indices of control units.
    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.w[i] == 0).collect()
    }

    /// Extracts the sub-dataset on `rows` (in the given order), carrying the
    /// truth block along when present.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select(ndarray::Axis(0), rows);
        let take = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let truth = self.truth.as_ref().map(|t| TruthBlock {
            tau: take(&t.tau),
            e: take(&t.e),
            m0: t.m0.as_deref().map(take),
            m1: t.m1.as_deref().map(take),
        });
        Dataset {
            x,
            w: rows.iter().map(|&i| self.w[i]).collect(),
            y: take(&self.y),
            truth,
            outcome_kind: self.outcome_kind,
            harmful: self.harmful,
        }
    }
}

/// A partition of `0..n` into `k` folds of near-equal size.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Fold index of each row.
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Number of folds.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Rows belonging to fold `j`, in ascending order.
    pub fn fold_rows(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == j)
            .collect()
    }

    /// Rows outside fold `j`, in ascending order.
    pub fn complement_rows(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != j)
            .collect()
    }
}

/// Randomly partitions `0..n` into `k` folds whose sizes differ by at most
/// one, by shuffling the indices (Fisher–Yates) and dealing them round-robin.
/// Deterministic given `(n, k, seed)`.
///
/// # Errors
/// [`Error::InvalidArgument`] when `k < 2` or `k > n`.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid_argument(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if k > n {
        return Err(Error::invalid_argument(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = RngStream::root(seed);
    stream.shuffle(&mut order);
    let mut fold_of = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of[row] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

/// Orients scores so that *larger is better for treating*: when the outcome
/// is adverse (`harmful`), a negative treatment effect is good, so scores are
/// negated; otherwise they pass through unchanged.
pub fn signed_scores(scores: &[f64], harmful: bool) -> Vec<f64> {
    if harmful {
        scores.iter().map(|s| -s).collect()
    } else {
        scores.to_vec()
    }
}

/// The score engine that produced a [`ScoreSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Nested doubly robust learner.
    Ndr,
    /// Honest causal forest scores on the full sample.
    Cf,
    /// Cross-fitted causal forest scores.
    Cftt,
    /// Bayesian additive regression trees.
    Bart,
}

impl Method {
    /// Stable lower-case name used in files and reports.
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ndr => "ndr",
            Method::Cf => "cf",
            Method::Cftt => "cftt",
            Method::Bart => "bart",
        }
    }

    /// Parses the stable name produced by [`Method::name`].
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "ndr" => Ok(Method::Ndr),
            "cf" => Ok(Method::Cf),
            "cftt" => Ok(Method::Cftt),
            "bart" => Ok(Method::Bart),
            other => Err(Error::invalid_argument(format!(
                "unknown method '{other}' (expected ndr, cf, cftt, or bart)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-unit doubly robust scores and effect predictions from one engine.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    /// Doubly robust score `gamma_i`; its mean estimates the average effect.
    pub gamma: Vec<f64>,
    /// Unit-level treatment effect prediction `tau_hat_i`.
    pub tau_hat: Vec<f64>,
    /// Engine that produced the scores.
    pub method: Method,
    /// Average treatment effect estimate: the mean of `gamma`.
    pub ate: f64,
    /// Standard error of the average: `sd(gamma) / sqrt(n)`.
    pub ate_se: f64,
}

impl ScoreSet {
    /// Assembles a score set, computing the average effect and its standard
    /// error from the scores.
    pub fn new(method: Method, gamma: Vec<f64>, tau_hat: Vec<f64>) -> Result<Self> {
        if gamma.len() != tau_hat.len() || gamma.is_empty() {
            return Err(Error::invalid_argument(
                "scores and effect predictions must be nonempty and equal length",
            ));
        }
        let n = gamma.len() as f64;
        let ate = gamma.iter().sum::<f64>() / n;
        let var = gamma.iter().map(|g| (g - ate).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let ate_se = (var / n).sqrt();
        Ok(ScoreSet {
            gamma,
            tau_hat,
            method,
            ate,
            ate_se,
        })
    }
}
