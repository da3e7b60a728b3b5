//! Best linear projection of doubly robust scores onto covariates.
//!
//! Regressing the per-unit scores on a chosen covariate subset (plus an
//! intercept) summarizes how the treatment effect varies: the coefficients
//! estimate the best linear approximation to the effect surface, and
//! heteroskedasticity-robust (HC1) standard errors give honest uncertainty
//! for that summary even though the scores are far from homoskedastic.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Coefficients of a best linear projection.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BlpResult {
    /// Term names: `"intercept"` followed by the covariate names.
    pub names: Vec<String>,
    /// Ordinary-least-squares coefficients.
    pub coef: Vec<f64>,
    /// HC1 heteroskedasticity-robust standard errors.
    pub se: Vec<f64>,
    /// `coef / se` (infinite when a residual-free fit makes `se` zero).
    pub t: Vec<f64>,
    /// Number of observations.
    pub n: usize,
}

/// Projects `gamma` onto `[1, x_sub]` by OLS with HC1 standard errors.
///
/// # Errors
/// * [`Error::InvalidArgument`] for shape mismatches or too few rows
///   (at least `ncols + 2` observations are required).
/// * [`Error::RankDeficient`] when the design is collinear; the message names
///   the dependent columns so the caller can drop them.
pub fn blp(gamma: &[f64], x_sub: &Array2<f64>, names: &[String]) -> Result<BlpResult> {
    let n = gamma.len();
    let p = x_sub.ncols();
    if x_sub.nrows() != n {
        return Err(Error::invalid_argument(format!(
            "scores have {n} rows but covariates have {}",
            x_sub.nrows()
        )));
    }
    if names.len() != p {
        return Err(Error::invalid_argument(format!(
            "{p} covariate columns but {} names",
            names.len()
        )));
    }
    let q = p + 1;
    if n < q + 1 {
        return Err(Error::invalid_argument(format!(
            "need at least {} observations for {q} regressors, got {n}",
            q + 1
        )));
    }

    let x = DMatrix::from_fn(n, q, |i, j| if j == 0 { 1.0 } else { x_sub[[i, j - 1]] });
    let y = DVector::from_row_slice(gamma);

    let term_names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(names.iter().cloned())
        .collect();

    // Rank check via column-pivoted QR: tiny trailing diagonal entries of R
    // identify columns that are linear combinations of earlier-pivoted ones.
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let lead = r[(0, 0)].abs();
    let tol = lead.max(f64::MIN_POSITIVE) * 1e-10 * n.max(q) as f64;
    let deficient: Vec<usize> = (0..q).filter(|&i| r[(i, i)].abs() <= tol).collect();
    if !deficient.is_empty() {
        // Recover which original columns the deficient pivots refer to.
        let mut order = DMatrix::<f64>::from_fn(1, q, |_, j| j as f64);
        qr.p().permute_columns(&mut order);
        let mut bad: Vec<String> = deficient
            .iter()
            .map(|&i| term_names[order[(0, i)] as usize].clone())
            .collect();
        bad.sort();
        return Err(Error::RankDeficient(format!(
            "columns [{}] are linearly dependent on the others; drop them and refit",
            bad.join(", ")
        )));
    }

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = xtx.clone().cholesky().ok_or_else(|| {
        Error::RankDeficient("normal equations are numerically singular".into())
    })?;
    let beta = chol.solve(&xty);
    let bread = chol.inverse();

    let residuals = &y - &x * &beta;
    let mut meat = DMatrix::<f64>::zeros(q, q);
    for i in 0..n {
        let u2 = residuals[i] * residuals[i];
        let xi = x.row(i);
        for a in 0..q {
            for b in 0..q {
                meat[(a, b)] += u2 * xi[a] * xi[b];
            }
        }
    }
    let scale = n as f64 / (n - q) as f64;
    let cov = &bread * meat * &bread * scale;

    let coef: Vec<f64> = beta.iter().copied().collect();
    let se: Vec<f64> = (0..q).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let t: Vec<f64> = coef
        .iter()
        .zip(&se)
        .map(|(c, s)| if *s > 0.0 { c / s } else { f64::INFINITY * c.signum() })
        .collect();

    Ok(BlpResult {
        names: term_names,
        coef,
        se,
        t,
        n,
    })
}
