//! `policyforge` — doubly robust policy learning from observational data.
//!
//! Subcommands:
//!
//! * `simulate` — draw a synthetic dataset with known truth columns.
//! * `fit` — estimate per-unit scores and effects with one engine.
//! * `policy` — fit a depth-limited policy tree from saved scores.
//! * `blp` — best linear projection of the scores onto covariates.
//! * `run` — a full simulation study from a TOML configuration.
//! * `analyze` — end-to-end analysis of one dataset: scores, policies on an
//!   optional covariate subset, and an advantage table.
//!
//! Progress goes to stderr; results go only to the requested files. Set
//! `POLICYFORGE_THREADS` to cap the worker pool (results are identical at
//! any thread count).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use policyforge_cli::config::{load_estimator_settings, load_run_config, parse_outcome};
use policyforge_cli::harness::{self, compute_scores};
use policyforge_cli::io::{self, AdvantageRow, LoadedData, PolicyDoc};
use policyforge_core::data::Method;
use policyforge_core::dgp::{generate, Confounding, DgpSpec, Prevalence};
use policyforge_core::policy::{
    advantage, fit_policy_tree, plugin_policy, AdvantageEstimator, PolicyTree, TrainSignal,
};
use policyforge_core::rng::RngStream;

#[derive(Parser)]
#[command(
    name = "policyforge",
    version,
    about = "Doubly robust score estimation, policy tree search, and simulation studies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic dataset from one generating cell.
    Simulate(SimulateArgs),
    /// Estimate doubly robust scores and unit-level effects.
    Fit(FitArgs),
    /// Fit a depth-limited policy tree from saved scores.
    Policy(PolicyArgs),
    /// Best linear projection of saved scores onto covariates.
    Blp(BlpArgs),
    /// Run a full simulation study from a TOML configuration.
    Run(RunArgs),
    /// Scores, policies, and an advantage table for one dataset.
    Analyze(AnalyzeArgs),
}

/// Options shared by every command that reads a data file.
#[derive(Args)]
struct DataArgs {
    /// Input data CSV (covariate columns, then `w` and `y`).
    #[arg(long)]
    data: PathBuf,
    /// Outcome kind: `binary` or `continuous`. Inferred from the outcome
    /// values when omitted.
    #[arg(long)]
    outcome: Option<String>,
    /// Treat the outcome as desirable: positive treatment effects are good.
    /// By default the outcome is adverse and negative effects are good.
    #[arg(long)]
    beneficial: bool,
}

impl DataArgs {
    fn load(&self) -> Result<LoadedData> {
        let kind = self
            .outcome
            .as_deref()
            .map(parse_outcome)
            .transpose()?;
        io::read_dataset(&self.data, kind, !self.beneficial)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Effect-heterogeneity setting: 1, 2, or 3.
    #[arg(long)]
    setting: u8,
    /// Outcome prevalence: `common` or `rare`.
    #[arg(long)]
    prevalence: String,
    /// Outcome kind: `binary` or `continuous`.
    #[arg(long)]
    outcome: String,
    /// Treatment assignment: `none` (randomized, P=0.2) or `mild`.
    #[arg(long)]
    confounding: String,
    /// Number of units.
    #[arg(long)]
    n: usize,
    /// Root seed for the draw.
    #[arg(long)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Omit the `__tau`/`__e`/`__m0`/`__m1` truth columns.
    #[arg(long)]
    no_truth: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Score engine: `ndr`, `cf`, `cftt`, or `bart`.
    #[arg(long)]
    method: String,
    /// Root seed for the fit.
    #[arg(long)]
    seed: u64,
    /// Output scores CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional estimator-settings TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PolicyArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Scores CSV produced by `fit`.
    #[arg(long)]
    scores: PathBuf,
    /// Training signal: `gamma` (doubly robust scores) or `tau_hat`.
    #[arg(long, default_value = "gamma")]
    train_on: String,
    /// Tree depth (1-3).
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Optional cap on split candidates at recursing nodes.
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated covariate names the tree may split on.
    #[arg(long)]
    covariates: Option<String>,
    /// Output policy JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BlpArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Scores CSV produced by `fit`.
    #[arg(long)]
    scores: PathBuf,
    /// Comma-separated covariate names to project onto (default: all).
    #[arg(long)]
    covariates: Option<String>,
    /// Output coefficient CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run-configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Suppress per-repetition progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Score engine: `ndr`, `cf`, `cftt`, or `bart`.
    #[arg(long)]
    method: String,
    /// Root seed for the fit.
    #[arg(long)]
    seed: u64,
    /// Directory for scores.csv, policy.json, modified_policy.json, and
    /// advantages.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Policy tree depth (1-3).
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Optional cap on split candidates at recursing nodes.
    #[arg(long)]
    budget: Option<usize>,
    /// Comma-separated covariate names the policies may use. Scores are
    /// always fit on every covariate; only the policies are restricted.
    #[arg(long)]
    policy_covariates: Option<String>,
    /// Optional estimator-settings TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("POLICYFORGE_THREADS") {
        let n: usize = raw
            .parse()
            .context("POLICYFORGE_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("POLICYFORGE_THREADS must be positive");
        }
        // Ignore the error if a pool already exists (e.g. under a test
        // harness); the variable is then advisory only.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn parse_name_list(raw: &str) -> Result<Vec<String>> {
    let names: Vec<String> = raw
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("the covariate list is empty");
    }
    Ok(names)
}

fn main() -> Result<()> {
    init_threads()?;
    match Cli::parse().cmd {
        Cmd::Simulate(args) => simulate(args),
        Cmd::Fit(args) => fit(args),
        Cmd::Policy(args) => policy(args),
        Cmd::Blp(args) => blp_cmd(args),
        Cmd::Run(args) => run(args),
        Cmd::Analyze(args) => analyze(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = DgpSpec::new(
        args.setting,
        Prevalence::parse(&args.prevalence)?,
        parse_outcome(&args.outcome)?,
        Confounding::parse(&args.confounding)?,
        args.n,
    )?;
    let ds = generate(&spec, &RngStream::root(args.seed))?;
    io::write_dataset(&args.out, &ds, None, !args.no_truth)?;
    let treated: usize = ds.w().iter().map(|&w| usize::from(w)).sum();
    let mean_y = ds.y().iter().sum::<f64>() / ds.n() as f64;
    eprintln!(
        "wrote {} ({} units, {} treated, mean outcome {mean_y:.4})",
        args.out.display(),
        ds.n(),
        treated,
    );
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let loaded = args.data.load()?;
    let method = Method::parse(&args.method)?;
    let settings = load_estimator_settings(args.config.as_deref())?;
    eprintln!(
        "fitting {} on {} units x {} covariates",
        method.name(),
        loaded.ds.n(),
        loaded.ds.p()
    );
    let scores = compute_scores(method, &loaded.ds, &settings, &RngStream::root(args.seed))?;
    io::write_scores(&args.out, &scores)?;
    eprintln!(
        "wrote {} (average effect {:+.5} +/- {:.5})",
        args.out.display(),
        scores.ate,
        scores.ate_se
    );
    Ok(())
}

/// Builds the policy document for one fitted tree: both advantage estimates
/// plus the treated share, evaluated in sample.
fn policy_doc(
    tree: PolicyTree,
    train_on: &str,
    loaded: &LoadedData,
    gamma: &[f64],
    tau_hat: &[f64],
    allowed_names: Option<&[String]>,
    depth: usize,
) -> Result<PolicyDoc> {
    let assign = tree.assign(loaded.ds.x());
    let harmful = loaded.ds.harmful;
    let dr = advantage(&assign, gamma, harmful, AdvantageEstimator::Dr)?;
    let cate = advantage(&assign, tau_hat, harmful, AdvantageEstimator::Cate)?;
    let share = assign.iter().map(|&a| f64::from(a)).sum::<f64>() / assign.len() as f64;
    Ok(PolicyDoc {
        train_on: train_on.to_string(),
        depth,
        harmful,
        feature_names: loaded.names.clone(),
        allowed_features: allowed_names.map(<[String]>::to_vec),
        advantage_dr: dr.value,
        advantage_dr_se: dr.se,
        advantage_cate: cate.value,
        advantage_cate_se: cate.se,
        treated_share: share,
        tree,
    })
}

fn policy(args: PolicyArgs) -> Result<()> {
    let loaded = args.data.load()?;
    let scores = io::read_scores(&args.scores, Some(loaded.ds.n()))?;
    let train_on = TrainSignal::parse(&args.train_on)?;
    let allowed_names = args
        .covariates
        .as_deref()
        .map(parse_name_list)
        .transpose()?;
    let allowed_idx = allowed_names
        .as_deref()
        .map(|names| loaded.columns_named(names))
        .transpose()?;

    let signal: &[f64] = match train_on {
        TrainSignal::Gamma => &scores.gamma,
        TrainSignal::TauHat => &scores.tau_hat,
    };
    let tree = fit_policy_tree(
        loaded.ds.x(),
        signal,
        args.depth,
        loaded.ds.harmful,
        args.budget,
        allowed_idx.as_deref(),
    )?;
    let doc = policy_doc(
        tree,
        train_on.name(),
        &loaded,
        &scores.gamma,
        &scores.tau_hat,
        allowed_names.as_deref(),
        args.depth,
    )?;
    io::write_policy(&args.out, &doc)?;
    eprintln!(
        "wrote {} (advantage {:+.5} +/- {:.5}, treats {:.1}% of units)",
        args.out.display(),
        doc.advantage_dr,
        doc.advantage_dr_se,
        100.0 * doc.treated_share
    );
    Ok(())
}

fn blp_cmd(args: BlpArgs) -> Result<()> {
    let loaded = args.data.load()?;
    let scores = io::read_scores(&args.scores, Some(loaded.ds.n()))?;
    let names = match args.covariates.as_deref() {
        Some(raw) => parse_name_list(raw)?,
        None => loaded.names.clone(),
    };
    let cols = loaded.columns_named(&names)?;
    let x_sub = loaded.ds.x().select(ndarray::Axis(1), &cols);
    let res = policyforge_core::blp::blp(&scores.gamma, &x_sub, &names)?;
    io::write_blp(&args.out, &res)?;
    eprintln!("wrote {} ({} terms, n = {})", args.out.display(), res.names.len(), res.n);
    for i in 0..res.names.len() {
        eprintln!(
            "  {:>12}  {:+.5}  (se {:.5}, t {:+.2})",
            res.names[i], res.coef[i], res.se[i], res.t[i]
        );
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let out = harness::run_simulation(&cfg, args.quiet)?;
    for cell in &out.manifest.cells {
        eprintln!(
            "[{}] {} ok, {} failed -> {}",
            cell.label,
            cell.n_ok,
            cell.n_failed,
            cfg.output_dir.join(&cell.label).display()
        );
    }
    eprintln!("wrote {}", cfg.output_dir.join("run.json").display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let loaded = args.data.load()?;
    let method = Method::parse(&args.method)?;
    let settings = load_estimator_settings(args.config.as_deref())?;
    let allowed_names = args
        .policy_covariates
        .as_deref()
        .map(parse_name_list)
        .transpose()?;
    // Resolve the restriction before the (possibly long) fit so a typo in a
    // covariate name fails fast.
    let allowed_idx = allowed_names
        .as_deref()
        .map(|names| loaded.columns_named(names))
        .transpose()?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;

    eprintln!(
        "fitting {} on {} units x {} covariates",
        method.name(),
        loaded.ds.n(),
        loaded.ds.p()
    );
    let scores = compute_scores(method, &loaded.ds, &settings, &RngStream::root(args.seed))?;
    io::write_scores(&args.out_dir.join("scores.csv"), &scores)?;
    eprintln!("average effect {:+.5} +/- {:.5}", scores.ate, scores.ate_se);

    let x = loaded.ds.x();
    let harmful = loaded.ds.harmful;
    let tree = fit_policy_tree(
        x,
        &scores.gamma,
        args.depth,
        harmful,
        args.budget,
        allowed_idx.as_deref(),
    )?;
    let modified = fit_policy_tree(
        x,
        &scores.tau_hat,
        args.depth,
        harmful,
        args.budget,
        allowed_idx.as_deref(),
    )?;

    let tree_doc = policy_doc(
        tree,
        TrainSignal::Gamma.name(),
        &loaded,
        &scores.gamma,
        &scores.tau_hat,
        allowed_names.as_deref(),
        args.depth,
    )?;
    let modified_doc = policy_doc(
        modified,
        TrainSignal::TauHat.name(),
        &loaded,
        &scores.gamma,
        &scores.tau_hat,
        allowed_names.as_deref(),
        args.depth,
    )?;
    io::write_policy(&args.out_dir.join("policy.json"), &tree_doc)?;
    io::write_policy(&args.out_dir.join("modified_policy.json"), &modified_doc)?;

    let mut rows = Vec::with_capacity(4);
    for (name, doc) in [("tree", &tree_doc), ("modified_tree", &modified_doc)] {
        rows.push(AdvantageRow {
            policy_class: name.to_string(),
            a_dr: doc.advantage_dr,
            se_dr: doc.advantage_dr_se,
            a_cate: doc.advantage_cate,
            se_cate: doc.advantage_cate_se,
            treated_share: doc.treated_share,
        });
    }
    let n = loaded.ds.n();
    for (name, assign) in [
        ("plugin", plugin_policy(&scores.tau_hat, harmful)),
        ("treat_all", vec![1u8; n]),
    ] {
        let dr = advantage(&assign, &scores.gamma, harmful, AdvantageEstimator::Dr)?;
        let cate = advantage(&assign, &scores.tau_hat, harmful, AdvantageEstimator::Cate)?;
        rows.push(AdvantageRow {
            policy_class: name.to_string(),
            a_dr: dr.value,
            se_dr: dr.se,
            a_cate: cate.value,
            se_cate: cate.se,
            treated_share: assign.iter().map(|&a| f64::from(a)).sum::<f64>() / n as f64,
        });
    }
    io::write_advantages(&args.out_dir.join("advantages.csv"), &rows)?;

    eprintln!("wrote {}", args.out_dir.join("scores.csv").display());
    eprintln!("wrote {}", args.out_dir.join("policy.json").display());
    eprintln!("wrote {}", args.out_dir.join("modified_policy.json").display());
    eprintln!("wrote {}", args.out_dir.join("advantages.csv").display());
    for row in &rows {
        eprintln!(
            "  {:>13}  A_dr {:+.5} (se {:.5})  A_cate {:+.5} (se {:.5})  treats {:.1}%",
            row.policy_class,
            row.a_dr,
            row.se_dr,
            row.a_cate,
            row.se_cate,
            100.0 * row.treated_share
        );
    }
    Ok(())
}
