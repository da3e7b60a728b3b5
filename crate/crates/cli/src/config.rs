//! TOML configuration for simulation runs and estimator settings.
//!
//! A run file looks like:
//!
//! ```toml
//! root_seed = 20260815
//! reps = 100
//! depth = 2
//! cv_k = 4
//! split_budget = 64          # optional: cap on recursing-node candidates
//! methods = ["ndr", "cf"]    # any of ndr, cf, cftt, bart (may be empty)
//! output_dir = "out"
//!
//! [[cells]]
//! setting = 3
//! prevalence = "rare"        # common | rare
//! outcome = "binary"         # binary | continuous
//! confounding = "mild"       # none | mild
//! n = 5000
//!
//! [forests]                  # optional estimator tuning, defaults shown
//! nuisance_trees = 500
//! causal_trees = 2000
//! min_leaf = 5
//!
//! [ndr]
//! n_parts = 4
//! normalise = true
//!
//! [cftt]
//! k = 4
//! t = 4
//!
//! [bart]
//! n_trees = 200
//! n_draws = 2500
//! n_burn = 500
//! ```
//!
//! The same `[forests]`/`[ndr]`/`[cftt]`/`[bart]` sections form the optional
//! estimator file accepted by `fit` and `analyze`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use policyforge_core::bart::BartMethodConfig;
use policyforge_core::data::{Method, OutcomeKind};
use policyforge_core::dgp::{Confounding, DgpSpec, Prevalence};
use policyforge_core::drlearner::NdrConfig;
use policyforge_core::forest::ForestConfig;

/// One cell of the simulation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub setting: u8,
    pub prevalence: String,
    pub outcome: String,
    pub confounding: String,
    pub n: usize,
}

pub fn parse_outcome(s: &str) -> Result<OutcomeKind> {
    match s {
        "binary" => Ok(OutcomeKind::Binary),
        "continuous" => Ok(OutcomeKind::Continuous),
        other => bail!("unknown outcome kind '{other}' (expected binary or continuous)"),
    }
}

impl CellConfig {
    pub fn to_spec(&self) -> Result<DgpSpec> {
        Ok(DgpSpec::new(
            self.setting,
            Prevalence::parse(&self.prevalence)?,
            parse_outcome(&self.outcome)?,
            Confounding::parse(&self.confounding)?,
            self.n,
        )?)
    }

    /// Stable directory name for this cell's outputs.
    pub fn label(&self) -> String {
        format!(
            "s{}-{}-{}-{}-n{}",
            self.setting, self.prevalence, self.outcome, self.confounding, self.n
        )
    }
}

/// `[forests]`: overrides for the two random-forest configurations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestSection {
    pub nuisance_trees: Option<usize>,
    pub causal_trees: Option<usize>,
    pub min_leaf: Option<usize>,
    pub mtry: Option<usize>,
    pub subsample_fraction: Option<f64>,
    pub honesty_fraction: Option<f64>,
    pub max_depth: Option<usize>,
}

/// `[ndr]`: overrides for the nested doubly robust learner.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NdrSection {
    pub n_parts: Option<usize>,
    pub normalise: Option<bool>,
    pub second_stage_trees: Option<usize>,
}

/// `[cftt]`: overrides for the cross-fitted causal forest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfttSection {
    pub k: Option<usize>,
    pub t: Option<usize>,
}

/// `[bart]`: overrides applied to both BART chains.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BartSection {
    pub n_trees: Option<usize>,
    pub n_draws: Option<usize>,
    pub n_burn: Option<usize>,
    pub k: Option<f64>,
    pub include_propensity_feature: Option<bool>,
    pub normalise: Option<bool>,
}

/// Resolved estimator settings shared by every command that fits models.
#[derive(Debug, Clone)]
pub struct EstimatorSettings {
    /// Regression forests for the propensity and outcome nuisances.
    pub nuisance: ForestConfig,
    /// The honest causal forest.
    pub causal: ForestConfig,
    pub ndr: NdrConfig,
    /// Cross-fitted causal forest: folds per pass and number of passes.
    pub cftt_k: usize,
    pub cftt_t: usize,
    pub bart: BartMethodConfig,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            nuisance: ForestConfig::default(),
            causal: ForestConfig::causal_default(),
            ndr: NdrConfig::default(),
            cftt_k: 4,
            cftt_t: 4,
            bart: BartMethodConfig::default(),
        }
    }
}

fn apply_forest(base: &mut ForestConfig, trees: Option<usize>, sec: &ForestSection) {
    if let Some(t) = trees {
        base.n_trees = t;
    }
    if let Some(m) = sec.min_leaf {
        base.min_leaf = m;
    }
    if sec.mtry.is_some() {
        base.mtry = sec.mtry;
    }
    if let Some(f) = sec.subsample_fraction {
        base.subsample_fraction = f;
    }
    if let Some(f) = sec.honesty_fraction {
        base.honesty_fraction = f;
    }
    if sec.max_depth.is_some() {
        base.max_depth = sec.max_depth;
    }
}

/// Builds resolved settings from the optional TOML sections.
pub fn build_settings(
    forests: &ForestSection,
    ndr: &NdrSection,
    cftt: &CfttSection,
    bart: &BartSection,
) -> EstimatorSettings {
    let mut s = EstimatorSettings::default();
    apply_forest(&mut s.nuisance, forests.nuisance_trees, forests);
    apply_forest(&mut s.causal, forests.causal_trees, forests);
    apply_forest(&mut s.ndr.second_stage, ndr.second_stage_trees, forests);
    if let Some(k) = ndr.n_parts {
        s.ndr.n_parts = k;
    }
    if let Some(v) = ndr.normalise {
        s.ndr.normalise = v;
    }
    if let Some(k) = cftt.k {
        s.cftt_k = k;
    }
    if let Some(t) = cftt.t {
        s.cftt_t = t;
    }
    for chain in [&mut s.bart.outcome, &mut s.bart.propensity] {
        if let Some(v) = bart.n_trees {
            chain.n_trees = v;
        }
        if let Some(v) = bart.n_draws {
            chain.n_draws = v;
        }
        if let Some(v) = bart.n_burn {
            chain.n_burn = v;
        }
        if let Some(v) = bart.k {
            chain.k = v;
        }
    }
    if let Some(v) = bart.include_propensity_feature {
        s.bart.include_propensity_feature = v;
    }
    if let Some(v) = bart.normalise {
        s.bart.normalise = v;
    }
    s
}

/// Stand-alone estimator file accepted by `fit` and `analyze`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorToml {
    #[serde(default)]
    pub forests: ForestSection,
    #[serde(default)]
    pub ndr: NdrSection,
    #[serde(default)]
    pub cftt: CfttSection,
    #[serde(default)]
    pub bart: BartSection,
}

impl EstimatorToml {
    pub fn settings(&self) -> EstimatorSettings {
        build_settings(&self.forests, &self.ndr, &self.cftt, &self.bart)
    }
}

/// Loads estimator settings, or the defaults when no file is given.
pub fn load_estimator_settings(path: Option<&Path>) -> Result<EstimatorSettings> {
    match path {
        None => Ok(EstimatorSettings::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot open {}", p.display()))?;
            let parsed: EstimatorToml = toml::from_str(&text)
                .with_context(|| format!("{} is not a valid estimator file", p.display()))?;
            Ok(parsed.settings())
        }
    }
}

fn default_reps() -> usize {
    100
}
fn default_depth() -> usize {
    2
}
fn default_cv_k() -> usize {
    4
}

/// A full simulation study: grid, methods, repetitions, and outputs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stream in the run derives from it.
    pub root_seed: u64,
    /// Repetitions per cell (100 is a desk-scale default; the full-scale
    /// study uses 500).
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Policy tree depth.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Folds for cross-validated tree values.
    #[serde(default = "default_cv_k")]
    pub cv_k: usize,
    /// Optional cap on split candidates at recursing tree nodes.
    #[serde(default)]
    pub split_budget: Option<usize>,
    /// Score engines to evaluate; an empty list runs the oracle quantities
    /// only.
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    pub cells: Vec<CellConfig>,
    #[serde(default)]
    pub forests: ForestSection,
    #[serde(default)]
    pub ndr: NdrSection,
    #[serde(default)]
    pub cftt: CfttSection,
    #[serde(default)]
    pub bart: BartSection,
}

impl RunConfig {
    pub fn settings(&self) -> EstimatorSettings {
        build_settings(&self.forests, &self.ndr, &self.cftt, &self.bart)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            bail!("reps must be positive");
        }
        if self.cells.is_empty() {
            bail!("the run defines no cells");
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.cells {
            c.to_spec()
                .with_context(|| format!("cell {}", c.label()))?;
            if !seen.insert(c.label()) {
                bail!("duplicate cell {}", c.label());
            }
        }
        let mut methods = std::collections::HashSet::new();
        for m in &self.methods {
            if !methods.insert(*m) {
                bail!("method '{}' is listed twice", m.name());
            }
        }
        Ok(())
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot open {}", path.display()))?;
    let cfg: RunConfig = toml::from_str(&text)
        .with_context(|| format!("{} is not a valid run file", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}
