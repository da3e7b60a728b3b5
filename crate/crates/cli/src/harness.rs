//! Simulation driver: repeated data generation, score estimation, policy
//! fitting, and evaluation.
//!
//! Each repetition derives its own random stream from the cell stream, so
//! results are a pure function of `(root_seed, cell index, repetition index,
//! method)`: adding or removing methods, running repetitions in parallel, or
//! re-running a study never changes any other number. A repetition that
//! fails — an error or a panic — is recorded with its message and the run
//! continues; the failure count lands in the report.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use policyforge_core::bart::bart_scores;
use policyforge_core::data::{Dataset, Method, ScoreSet, TruthBlock};
use policyforge_core::dgp::{generate, DgpSpec};
use policyforge_core::drlearner::ndr_learner;
use policyforge_core::forest::{cf_scores, cftt, fit_causal_forest, fit_nuisances};
use policyforge_core::metrics::{
    self, MethodOutcome, MetricsReport, PolicyClass, PolicyClassOutcome, RepFailure,
    RepetitionRecord,
};
use policyforge_core::policy::{
    advantage, cross_validated_tree_value, fit_policy_tree, policy_value, AdvantageEstimator,
    TrainSignal,
};
use policyforge_core::rng::RngStream;

use crate::config::{EstimatorSettings, RunConfig};
use crate::io;

/// Fixed stream label for each score engine, so a method's numbers do not
/// depend on which other methods run alongside it.
pub fn method_stream_id(m: Method) -> u64 {
    match m {
        Method::Ndr => 1,
        Method::Cf => 2,
        Method::Cftt => 3,
        Method::Bart => 4,
    }
}

/// Per-repetition stream label of the data draw.
const DATA_STREAM: u64 = 0;
/// Offset added to the method label for its cross-validation streams.
const CV_STREAM_OFFSET: u64 = 16;

/// Settings shared by every repetition of a run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub reps: usize,
    pub depth: usize,
    pub cv_k: usize,
    pub split_budget: Option<usize>,
    pub settings: EstimatorSettings,
}

impl RunOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        RunOptions {
            reps: cfg.reps,
            depth: cfg.depth,
            cv_k: cfg.cv_k,
            split_budget: cfg.split_budget,
            settings: cfg.settings(),
        }
    }
}

/// Computes one engine's scores on one dataset.
pub fn compute_scores(
    method: Method,
    ds: &Dataset,
    settings: &EstimatorSettings,
    stream: &RngStream,
) -> policyforge_core::Result<ScoreSet> {
    match method {
        Method::Ndr => ndr_learner(ds, &settings.ndr, &settings.nuisance, stream),
        Method::Cf => {
            let nuis = fit_nuisances(ds, &settings.nuisance, &stream.derive(0))?;
            let fit = fit_causal_forest(ds, &nuis, &settings.causal, &stream.derive(1))?;
            cf_scores(&fit, ds, &nuis)
        }
        Method::Cftt => cftt(
            ds,
            &settings.nuisance,
            &settings.causal,
            settings.cftt_k,
            settings.cftt_t,
            stream,
        ),
        Method::Bart => bart_scores(ds, &settings.bart, stream),
    }
}

/// Evaluates the three learned policy classes plus the treat-all baseline
/// for one score set.
///
/// The reported policy of each tree class is fit on the full sample; its
/// estimated advantages come from `cv_k`-fold cross-validation so that no
/// unit is evaluated by a tree that saw its scores. The plug-in rule and the
/// treat-all baseline are deterministic in the scores, so their advantages
/// are estimated directly.
pub fn evaluate_method(
    ds: &Dataset,
    truth: &TruthBlock,
    scores: &ScoreSet,
    opts: &RunOptions,
    rep_stream: &RngStream,
) -> policyforge_core::Result<MethodOutcome> {
    let x = ds.x();
    let n = ds.n();
    let harmful = ds.harmful;
    let cv_root = rep_stream.derive(CV_STREAM_OFFSET + method_stream_id(scores.method));

    let mut classes = Vec::with_capacity(4);
    for (class, signal) in [
        (PolicyClass::Tree, TrainSignal::Gamma),
        (PolicyClass::ModifiedTree, TrainSignal::TauHat),
    ] {
        let series: &[f64] = match signal {
            TrainSignal::Gamma => &scores.gamma,
            TrainSignal::TauHat => &scores.tau_hat,
        };
        let tree = fit_policy_tree(x, series, opts.depth, harmful, opts.split_budget, None)?;
        let assign = tree.assign(x);
        let mut cv_stream = cv_root.derive(match signal {
            TrainSignal::Gamma => 0,
            TrainSignal::TauHat => 1,
        });
        let cv = cross_validated_tree_value(
            ds,
            scores,
            signal,
            opts.cv_k,
            opts.depth,
            opts.split_budget,
            None,
            &mut cv_stream,
        )?;
        classes.push(PolicyClassOutcome {
            class,
            true_advantage: policy_value(&assign, &truth.tau, harmful),
            est_dr: cv.dr.value,
            est_dr_se: cv.dr.se,
            est_cate: cv.cate.value,
            est_cate_se: cv.cate.se,
            treated_share: share(&assign),
        });
    }

    let plugin = policyforge_core::policy::plugin_policy(&scores.tau_hat, harmful);
    let ones = vec![1u8; n];
    for (class, assign) in [(PolicyClass::Plugin, plugin), (PolicyClass::TreatAll, ones)] {
        let dr = advantage(&assign, &scores.gamma, harmful, AdvantageEstimator::Dr)?;
        let cate = advantage(&assign, &scores.tau_hat, harmful, AdvantageEstimator::Cate)?;
        classes.push(PolicyClassOutcome {
            class,
            true_advantage: policy_value(&assign, &truth.tau, harmful),
            est_dr: dr.value,
            est_dr_se: dr.se,
            est_cate: cate.value,
            est_cate_se: cate.se,
            treated_share: share(&assign),
        });
    }

    Ok(MethodOutcome {
        method: scores.method,
        ate_hat: scores.ate,
        ate_se: scores.ate_se,
        cate_rmse: metrics::cate_rmse(&truth.tau, &scores.tau_hat)?,
        classes,
    })
}

fn share(assign: &[u8]) -> f64 {
    assign.iter().map(|&a| f64::from(a)).sum::<f64>() / assign.len() as f64
}

/// Runs one repetition: draw data, compute the oracle quantities, then score
/// and evaluate each requested engine.
pub fn run_rep(
    spec: &DgpSpec,
    methods: &[Method],
    opts: &RunOptions,
    cell_stream: &RngStream,
    rep: usize,
) -> policyforge_core::Result<RepetitionRecord> {
    let rep_stream = cell_stream.derive(rep as u64);
    let ds = generate(spec, &rep_stream.derive(DATA_STREAM))?;
    let truth = ds.truth.clone().expect("generated data carries truth");

    let ate_true = truth.tau.iter().sum::<f64>() / truth.tau.len() as f64;
    let oracle_assign = truth.oracle_action(ds.harmful);
    let oracle_advantage = policy_value(&oracle_assign, &truth.tau, ds.harmful);
    let oracle_tree = fit_policy_tree(
        ds.x(),
        &truth.tau,
        opts.depth,
        ds.harmful,
        opts.split_budget,
        None,
    )?;
    let oracle_tree_advantage = policy_value(&oracle_tree.assign(ds.x()), &truth.tau, ds.harmful);

    let mut method_outcomes = Vec::with_capacity(methods.len());
    for &m in methods {
        let scores = compute_scores(m, &ds, &opts.settings, &rep_stream.derive(method_stream_id(m)))?;
        method_outcomes.push(evaluate_method(&ds, &truth, &scores, opts, &rep_stream)?);
    }

    Ok(RepetitionRecord {
        rep,
        ate_true,
        oracle_advantage,
        oracle_tree_advantage,
        methods: method_outcomes,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic with a non-string payload".to_string()
    }
}

/// Runs every repetition of one cell, in parallel, with crash isolation.
///
/// Returns the successful records (in repetition order) and the failures.
pub fn run_cell(
    spec: &DgpSpec,
    methods: &[Method],
    opts: &RunOptions,
    cell_stream: &RngStream,
    progress_label: Option<&str>,
) -> (Vec<RepetitionRecord>, Vec<RepFailure>) {
    let done = AtomicUsize::new(0);
    let outcomes: Vec<std::result::Result<RepetitionRecord, RepFailure>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| {
            let outcome = catch_unwind(AssertUnwindSafe(|| {
                run_rep(spec, methods, opts, cell_stream, rep)
            }));
            let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
            if let Some(label) = progress_label {
                eprintln!("[{label}] repetition {finished}/{}", opts.reps);
            }
            match outcome {
                Ok(Ok(record)) => Ok(record),
                Ok(Err(e)) => Err(RepFailure {
                    rep,
                    message: e.to_string(),
                }),
                Err(payload) => Err(RepFailure {
                    rep,
                    message: panic_message(payload),
                }),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    (records, failures)
}

/// Per-cell summary returned by [`run_simulation`].
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Top-level description written to `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub root_seed: u64,
    pub reps: usize,
    pub depth: usize,
    pub cv_k: usize,
    pub split_budget: Option<usize>,
    pub methods: Vec<String>,
    pub cells: Vec<CellSummary>,
}

/// Results of a full study, one report per cell.
#[derive(Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub reports: Vec<(String, Option<MetricsReport>)>,
}

/// Runs the whole configured study and writes, per cell,
/// `<output_dir>/<cell>/report.csv`, `report.json`, and `reps.csv`, plus a
/// top-level `run.json` manifest.
///
/// A cell whose repetitions all fail still gets its `reps.csv` (carrying the
/// error messages) but no report; the run continues with the next cell.
pub fn run_simulation(cfg: &RunConfig, quiet: bool) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    let opts = RunOptions::from_config(cfg);
    let root = RngStream::root(cfg.root_seed);

    let mut cells = Vec::with_capacity(cfg.cells.len());
    let mut reports = Vec::with_capacity(cfg.cells.len());
    for (ci, cell) in cfg.cells.iter().enumerate() {
        let label = cell.label();
        let spec = cell.to_spec()?;
        let cell_dir = cfg.output_dir.join(&label);
        std::fs::create_dir_all(&cell_dir)
            .with_context(|| format!("cannot create {}", cell_dir.display()))?;
        if !quiet {
            eprintln!(
                "cell {}/{} [{label}]: {} repetitions, methods [{}]",
                ci + 1,
                cfg.cells.len(),
                opts.reps,
                cfg.methods
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(", "),
            );
        }
        let progress = if quiet { None } else { Some(label.as_str()) };
        let (records, failures) =
            run_cell(&spec, &cfg.methods, &opts, &root.derive(ci as u64), progress);

        io::write_reps(&cell_dir.join("reps.csv"), &records, &failures)?;
        let report = if records.is_empty() {
            eprintln!(
                "[{label}] every repetition failed ({} failures); see reps.csv",
                failures.len()
            );
            None
        } else {
            let report = metrics::summarize(&records, &failures)?;
            io::write_report_csv(&cell_dir.join("report.csv"), &report)?;
            io::write_report_json(&cell_dir.join("report.json"), &report)?;
            Some(report)
        };

        cells.push(CellSummary {
            label: label.clone(),
            n_ok: records.len(),
            n_failed: failures.len(),
        });
        reports.push((label, report));
    }

    let manifest = RunManifest {
        root_seed: cfg.root_seed,
        reps: cfg.reps,
        depth: cfg.depth,
        cv_k: cfg.cv_k,
        split_budget: cfg.split_budget,
        methods: cfg.methods.iter().map(|m| m.name().to_string()).collect(),
        cells,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(cfg.output_dir.join("run.json"), manifest_json + "\n")?;
    Ok(RunOutput { manifest, reports })
}

/// Writes `run.json`-style output paths for a cell into `dir` from records
/// computed elsewhere (used by tests that drive [`run_cell`] directly).
pub fn write_cell_outputs(
    dir: &Path,
    records: &[RepetitionRecord],
    failures: &[RepFailure],
) -> Result<Option<MetricsReport>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    io::write_reps(&dir.join("reps.csv"), records, failures)?;
    if records.is_empty() {
        return Ok(None);
    }
    let report = metrics::summarize(records, failures)?;
    io::write_report_csv(&dir.join("report.csv"), &report)?;
    io::write_report_json(&dir.join("report.json"), &report)?;
    Ok(Some(report))
}
