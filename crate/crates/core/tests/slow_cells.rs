//! Heavier Monte Carlo cells, ignored by default because each takes minutes.
//!
//! Run them explicitly:
//!
//! ```text
//! cargo test -p policyforge-core --test slow_cells -- --ignored --nocapture
//! ```

use policyforge_core::data::OutcomeKind;
use policyforge_core::dgp::{generate, Confounding, DgpSpec, Prevalence};
use policyforge_core::forest::{cf_scores, cftt, fit_causal_forest, fit_nuisances, ForestConfig};
use policyforge_core::metrics::cate_rmse;
use policyforge_core::policy::{fit_policy_tree, policy_value};
use policyforge_core::rng::RngStream;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// At full scale (500 repetitions) the depth-2 tree fit directly on
/// true effects captures a setting-dependent share of the first-best value:
/// nearly all of it when the effect surface is tree-like, far less when the
/// effect is dense in many covariates.
#[test]
#[ignore = "about 15 minutes: 500 repetitions x 3 cells of oracle tree fits"]
fn oracle_tree_value_share_at_full_scale() {
    let cells: [(u8, Prevalence, usize, f64, f64); 3] = [
        (1, Prevalence::Common, 1000, 0.99, 0.02),
        (2, Prevalence::Rare, 1000, 0.82, 0.03),
        (3, Prevalence::Common, 5000, 0.61, 0.03),
    ];
    for (setting, prevalence, n, target, tol) in cells {
        let spec = DgpSpec::new(
            setting,
            prevalence,
            OutcomeKind::Binary,
            Confounding::Mild,
            n,
        )
        .unwrap();
        let root = RngStream::root(20260815).derive(u64::from(setting));
        let mut tree_advs = Vec::with_capacity(500);
        let mut oracle_advs = Vec::with_capacity(500);
        for rep in 0..500u64 {
            let ds = generate(&spec, &root.derive(rep)).unwrap();
            let truth = ds.truth.as_ref().unwrap();
            let tree =
                fit_policy_tree(ds.x(), &truth.tau, 2, ds.harmful, Some(64), None).unwrap();
            tree_advs.push(policy_value(&tree.assign(ds.x()), &truth.tau, ds.harmful));
            oracle_advs.push(policy_value(
                &truth.oracle_action(ds.harmful),
                &truth.tau,
                ds.harmful,
            ));
        }
        let ratio = mean(&tree_advs) / mean(&oracle_advs);
        println!("setting {setting} n={n}: oracle tree share {ratio:.4} (target {target} +/- {tol})");
        assert!(
            (ratio - target).abs() <= tol,
            "setting {setting}: ratio {ratio:.4} outside {target} +/- {tol}"
        );
    }
}

/// The cross-fitted forest refits everything on fold complements, so its
/// effect predictions should be close to the within-sample honest forest's:
/// same average, and unit-level error of the same order.
#[test]
#[ignore = "about 5 minutes: two cross-fitting passes at n = 5000"]
fn cross_fitted_forest_matches_forest_quality() {
    let spec = DgpSpec::new(
        3,
        Prevalence::Common,
        OutcomeKind::Binary,
        Confounding::Mild,
        5000,
    )
    .unwrap();
    let nuis_cfg = ForestConfig::default();
    let causal_cfg = ForestConfig::causal_default();

    let ds = generate(&spec, &RngStream::root(1001)).unwrap();
    let truth = ds.truth.as_ref().unwrap();

    let nuis = fit_nuisances(&ds, &nuis_cfg, &RngStream::root(1)).unwrap();
    let fit = fit_causal_forest(&ds, &nuis, &causal_cfg, &RngStream::root(2)).unwrap();
    let cf = cf_scores(&fit, &ds, &nuis).unwrap();
    let cftt_scores = cftt(&ds, &nuis_cfg, &causal_cfg, 4, 2, &RngStream::root(3)).unwrap();

    let cf_rmse = cate_rmse(&truth.tau, &cf.tau_hat).unwrap();
    let cftt_rmse = cate_rmse(&truth.tau, &cftt_scores.tau_hat).unwrap();
    println!(
        "effect prediction RMSE: forest {cf_rmse:.4}, cross-fitted {cftt_rmse:.4}; \
         average effect: forest {:.4}, cross-fitted {:.4}, true {:.4}",
        cf.ate,
        cftt_scores.ate,
        mean(&truth.tau)
    );
    assert!(
        cftt_rmse < 2.0 * cf_rmse + 0.01,
        "cross-fitting should not blow up prediction error"
    );
    assert!(
        (cftt_scores.ate - cf.ate).abs() < 0.05,
        "the two score engines should agree on the average effect"
    );
}

/// On a randomized cell the BART engine's average score should recover the
/// true average effect.
#[test]
#[ignore = "about 5 minutes: two full MCMC chains at n = 1000"]
fn bart_recovers_the_average_effect_on_a_randomized_cell() {
    use policyforge_core::bart::{bart_scores, BartMethodConfig};
    let spec = DgpSpec::new(
        1,
        Prevalence::Common,
        OutcomeKind::Binary,
        Confounding::None,
        1000,
    )
    .unwrap();
    let ds = generate(&spec, &RngStream::root(2024)).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let scores = bart_scores(&ds, &BartMethodConfig::default(), &RngStream::root(9)).unwrap();
    let ate_true = mean(&truth.tau);
    println!(
        "bart average effect {:.4} +/- {:.4}, true {ate_true:.4}",
        scores.ate, scores.ate_se
    );
    assert!(
        (scores.ate - ate_true).abs() < 0.05,
        "bart average effect {} should be near {ate_true}",
        scores.ate
    );
    let share_negative =
        scores.tau_hat.iter().filter(|&&t| t < 0.0).count() as f64 / scores.tau_hat.len() as f64;
    let share_negative_true =
        truth.tau.iter().filter(|&&t| t < 0.0).count() as f64 / truth.tau.len() as f64;
    println!("negative share: bart {share_negative:.4}, true {share_negative_true:.4}");
    assert!(
        (share_negative - share_negative_true).abs() <= 0.15,
        "the sign split of the effect predictions ({share_negative}) should track \
         the true split ({share_negative_true})"
    );
}
