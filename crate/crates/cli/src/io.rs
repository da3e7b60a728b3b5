//! File formats shared by the command-line tools.
//!
//! * `data.csv` — one row per unit: covariate columns (any names), a `w`
//!   treatment column (0/1), a `y` outcome column, and optional ground-truth
//!   columns `__tau`, `__e`, `__m0`, `__m1` written by the simulator.
//! * `scores.csv` — `row_id,method,gamma,tau_hat`, aligned with the data file.
//! * `policy.json` — a fitted policy tree plus its advantage estimates.
//! * `advantages.csv` — one row per policy class with both advantage
//!   estimates, their standard errors, and the treated share.
//! * `report.csv` / `report.json` — aggregated metrics for one cell.
//! * `reps.csv` — the per-repetition record behind the report.
//! * `blp.csv` — best-linear-projection coefficient table.
//!
//! Every float is written as `{:.16e}` (17 significant digits), which parses
//! back to the identical bit pattern, so files round-trip exactly and
//! re-running a pipeline reproduces byte-identical output.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use policyforge_core::data::{Dataset, Method, OutcomeKind, ScoreSet, TruthBlock};
use policyforge_core::metrics::{MetricsReport, RepFailure, RepetitionRecord};
use policyforge_core::policy::PolicyTree;

/// Full-precision float formatting used in every CSV this crate writes.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(field: &str, what: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .with_context(|| format!("row {row}: cannot parse {what} value '{field}'"))
}

/// A dataset together with its covariate column names, in file order.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub ds: Dataset,
    /// One name per covariate column of `ds.x()`, in column order.
    pub names: Vec<String>,
}

impl LoadedData {
    /// Maps covariate names to column indices, failing loudly on the first
    /// name that is not a column of the data file.
    pub fn columns_named(&self, wanted: &[String]) -> Result<Vec<usize>> {
        wanted
            .iter()
            .map(|name| {
                self.names.iter().position(|n| n == name).with_context(|| {
                    format!(
                        "covariate '{name}' is not a column of the data file \
                         (available: {})",
                        self.names.join(", ")
                    )
                })
            })
            .collect()
    }
}

const TRUTH_COLUMNS: [&str; 4] = ["__tau", "__e", "__m0", "__m1"];

/// Writes a dataset as CSV. Covariate columns come first (named `names`, or
/// `x1..xp` when `None`), then `w` and `y`, then any known truth columns.
/// Set `with_truth = false` to omit the truth columns even when present.
pub fn write_dataset(
    path: &Path,
    ds: &Dataset,
    names: Option<&[String]>,
    with_truth: bool,
) -> Result<()> {
    let p = ds.p();
    let default_names: Vec<String>;
    let names: &[String] = match names {
        Some(n) => {
            if n.len() != p {
                bail!("{} covariate names for {p} columns", n.len());
            }
            n
        }
        None => {
            default_names = (1..=p).map(|j| format!("x{j}")).collect();
            &default_names
        }
    };

    let truth = if with_truth { ds.truth.as_ref() } else { None };
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;

    let mut header: Vec<String> = names.to_vec();
    header.push("w".into());
    header.push("y".into());
    if let Some(t) = truth {
        header.push("__tau".into());
        header.push("__e".into());
        if t.m0.is_some() {
            header.push("__m0".into());
        }
        if t.m1.is_some() {
            header.push("__m1".into());
        }
    }
    w.write_record(&header)?;

    for i in 0..ds.n() {
        let mut rec: Vec<String> = (0..p).map(|j| fmt_float(ds.x()[[i, j]])).collect();
        rec.push(ds.w()[i].to_string());
        rec.push(fmt_float(ds.y()[i]));
        if let Some(t) = truth {
            rec.push(fmt_float(t.tau[i]));
            rec.push(fmt_float(t.e[i]));
            if let Some(m0) = &t.m0 {
                rec.push(fmt_float(m0[i]));
            }
            if let Some(m1) = &t.m1 {
                rec.push(fmt_float(m1[i]));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`] or assembled by hand.
///
/// Covariate columns are every column that is not `w`, `y`, or a recognized
/// `__`-prefixed truth column. The outcome kind is `outcome` when given,
/// otherwise inferred: binary exactly when every outcome is 0 or 1.
pub fn read_dataset(path: &Path, outcome: Option<OutcomeKind>, harmful: bool) -> Result<LoadedData> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header = rdr.headers()?.clone();

    let mut cov_cols: Vec<(usize, String)> = Vec::new();
    let mut w_col = None;
    let mut y_col = None;
    let mut truth_cols: [Option<usize>; 4] = [None; 4];
    for (j, name) in header.iter().enumerate() {
        match name {
            "w" => w_col = Some(j),
            "y" => y_col = Some(j),
            _ if name.starts_with("__") => {
                let slot = TRUTH_COLUMNS
                    .iter()
                    .position(|t| *t == name)
                    .with_context(|| {
                        format!(
                            "unknown reserved column '{name}' (reserved columns are {})",
                            TRUTH_COLUMNS.join(", ")
                        )
                    })?;
                truth_cols[slot] = Some(j);
            }
            _ => cov_cols.push((j, name.to_string())),
        }
    }
    let w_col = w_col.context("data file has no 'w' treatment column")?;
    let y_col = y_col.context("data file has no 'y' outcome column")?;
    if cov_cols.is_empty() {
        bail!("data file has no covariate columns");
    }
    {
        let mut seen = cov_cols.iter().map(|(_, n)| n).collect::<Vec<_>>();
        seen.sort();
        if let Some(pair) = seen.windows(2).find(|p| p[0] == p[1]) {
            bail!("duplicate covariate column '{}'", pair[0]);
        }
    }
    match (truth_cols[0], truth_cols[1]) {
        (Some(_), None) | (None, Some(_)) => {
            bail!("truth columns require both __tau and __e (only one is present)")
        }
        _ => {}
    }

    let mut x_rows: Vec<f64> = Vec::new();
    let mut w: Vec<u8> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut truth_vals: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("row {i}: malformed CSV record"))?;
        for (j, name) in &cov_cols {
            x_rows.push(parse_float(&rec[*j], name, i)?);
        }
        let w_val = parse_float(&rec[w_col], "w", i)?;
        if w_val != 0.0 && w_val != 1.0 {
            bail!("row {i}: treatment w must be 0 or 1, got {w_val}");
        }
        w.push(w_val as u8);
        y.push(parse_float(&rec[y_col], "y", i)?);
        for (slot, col) in truth_cols.iter().enumerate() {
            if let Some(j) = col {
                truth_vals[slot].push(parse_float(&rec[*j], TRUTH_COLUMNS[slot], i)?);
            }
        }
    }
    let n = w.len();
    if n == 0 {
        bail!("data file {} has no rows", path.display());
    }
    let p = cov_cols.len();
    let x = Array2::from_shape_vec((n, p), x_rows).expect("row-major covariate block");

    let truth = if truth_cols[0].is_some() {
        let [tau, e, m0, m1] = truth_vals;
        Some(TruthBlock {
            tau,
            e,
            m0: truth_cols[2].map(|_| m0),
            m1: truth_cols[3].map(|_| m1),
        })
    } else {
        None
    };

    let kind = outcome.unwrap_or_else(|| {
        if y.iter().all(|&v| v == 0.0 || v == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    });
    let ds = Dataset::new(x, w, y, truth, kind, harmful)
        .with_context(|| format!("{} is not a valid dataset", path.display()))?;
    Ok(LoadedData {
        ds,
        names: cov_cols.into_iter().map(|(_, n)| n).collect(),
    })
}

/// Writes per-unit scores aligned with the data file.
pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["row_id", "method", "gamma", "tau_hat"])?;
    for (i, (g, t)) in scores.gamma.iter().zip(&scores.tau_hat).enumerate() {
        w.write_record(&[
            i.to_string(),
            scores.method.name().to_string(),
            fmt_float(*g),
            fmt_float(*t),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a score file written by [`write_scores`], checking that rows are
/// `0..n` in order and, when `expect_n` is given, that the count matches the
/// data file it will be joined with.
pub fn read_scores(path: &Path, expect_n: Option<usize>) -> Result<ScoreSet> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut gamma = Vec::new();
    let mut tau_hat = Vec::new();
    let mut method: Option<Method> = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("row {i}: malformed CSV record"))?;
        let row_id: usize = rec[0]
            .trim()
            .parse()
            .with_context(|| format!("row {i}: bad row_id '{}'", &rec[0]))?;
        if row_id != i {
            bail!("score rows must be contiguous from 0: row {i} has row_id {row_id}");
        }
        let m = Method::parse(rec[1].trim())
            .with_context(|| format!("row {i}: bad method '{}'", &rec[1]))?;
        match method {
            None => method = Some(m),
            Some(prev) if prev != m => {
                bail!("score file mixes methods '{}' and '{}'", prev.name(), m.name())
            }
            _ => {}
        }
        gamma.push(parse_float(&rec[2], "gamma", i)?);
        tau_hat.push(parse_float(&rec[3], "tau_hat", i)?);
    }
    let method = method.context("score file has no rows")?;
    if let Some(n) = expect_n {
        if gamma.len() != n {
            bail!("score file has {} rows but the data file has {n}", gamma.len());
        }
    }
    Ok(ScoreSet::new(method, gamma, tau_hat)?)
}

/// A fitted policy with its evaluation, as serialized to `policy.json`.
///
/// `tree` splits reference covariates by column index into `feature_names`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDoc {
    /// Signal the tree was trained on: `gamma`, `tau_hat`, or `true_tau`.
    pub train_on: String,
    pub depth: usize,
    pub harmful: bool,
    pub feature_names: Vec<String>,
    /// Covariates the tree was allowed to split on (`None` means all).
    pub allowed_features: Option<Vec<String>>,
    /// Advantage of the policy estimated from doubly robust scores.
    pub advantage_dr: f64,
    pub advantage_dr_se: f64,
    /// Advantage estimated from unit-level effect predictions.
    pub advantage_cate: f64,
    pub advantage_cate_se: f64,
    pub treated_share: f64,
    pub tree: PolicyTree,
}

pub fn write_policy(path: &Path, doc: &PolicyDoc) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)?;
    std::fs::write(path, json + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyDoc> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a policy file", path.display()))
}

/// One row of `advantages.csv`: a policy class evaluated both ways.
#[derive(Debug, Clone)]
pub struct AdvantageRow {
    pub policy_class: String,
    pub a_dr: f64,
    pub se_dr: f64,
    pub a_cate: f64,
    pub se_cate: f64,
    pub treated_share: f64,
}

pub fn write_advantages(path: &Path, rows: &[AdvantageRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["policy_class", "a_dr", "se_dr", "a_cate", "se_cate", "treated_share"])?;
    for r in rows {
        w.write_record(&[
            r.policy_class.clone(),
            fmt_float(r.a_dr),
            fmt_float(r.se_dr),
            fmt_float(r.a_cate),
            fmt_float(r.se_cate),
            fmt_float(r.treated_share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the aggregated metric table. Metric rows come first; run-level
/// counters follow with method `_run` so one file carries the whole report.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["method", "policy_class", "metric", "value"])?;
    for row in &report.rows {
        w.write_record(&[
            row.method.clone(),
            row.policy_class.clone(),
            row.metric.clone(),
            fmt_float(row.value),
        ])?;
    }
    for (metric, value) in [
        ("n_reps", report.n_reps),
        ("n_failures", report.n_failures),
        ("zero_oracle_excluded", report.zero_oracle_excluded),
    ] {
        w.write_record(&[
            "_run".to_string(),
            "-".to_string(),
            metric.to_string(),
            value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Column order of `reps.csv`.
pub const REPS_HEADER: [&str; 16] = [
    "rep",
    "method",
    "policy_class",
    "true_advantage",
    "est_dr",
    "est_dr_se",
    "est_cate",
    "est_cate_se",
    "treated_share",
    "ate_true",
    "oracle_advantage",
    "oracle_tree_advantage",
    "ate_hat",
    "ate_se",
    "cate_rmse",
    "error",
];

/// Writes the per-repetition record in long form: one `_oracle` row per
/// repetition with the ground-truth summaries, one row per (method, policy
/// class), and one `_failed` row per failed repetition carrying the error
/// message. Fields that do not apply to a row are left empty.
pub fn write_reps(
    path: &Path,
    records: &[RepetitionRecord],
    failures: &[RepFailure],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(REPS_HEADER)?;
    let blank = String::new();
    for rec in records {
        let rep = rec.rep.to_string();
        let ate_true = fmt_float(rec.ate_true);
        let oracle = fmt_float(rec.oracle_advantage);
        let oracle_tree = fmt_float(rec.oracle_tree_advantage);
        w.write_record(&[
            rep.clone(),
            "_oracle".into(),
            "-".into(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
            ate_true.clone(),
            oracle.clone(),
            oracle_tree.clone(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
            blank.clone(),
        ])?;
        for m in &rec.methods {
            for c in &m.classes {
                w.write_record(&[
                    rep.clone(),
                    m.method.name().into(),
                    c.class.name().into(),
                    fmt_float(c.true_advantage),
                    fmt_float(c.est_dr),
                    fmt_float(c.est_dr_se),
                    fmt_float(c.est_cate),
                    fmt_float(c.est_cate_se),
                    fmt_float(c.treated_share),
                    ate_true.clone(),
                    oracle.clone(),
                    oracle_tree.clone(),
                    fmt_float(m.ate_hat),
                    fmt_float(m.ate_se),
                    fmt_float(m.cate_rmse),
                    blank.clone(),
                ])?;
            }
        }
    }
    for f in failures {
        let mut rec = vec![f.rep.to_string(), "_failed".into(), "-".into()];
        rec.extend(std::iter::repeat_n(blank.clone(), 12));
        rec.push(f.message.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a best-linear-projection coefficient table.
pub fn write_blp(path: &Path, res: &policyforge_core::blp::BlpResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["term", "estimate", "std_error", "t_value"])?;
    for i in 0..res.names.len() {
        w.write_record(&[
            res.names[i].clone(),
            fmt_float(res.coef[i]),
            fmt_float(res.se[i]),
            fmt_float(res.t[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
