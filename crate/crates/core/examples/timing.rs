//! Rough single-machine timings for the main estimators (dev profile).

use std::time::Instant;

use policyforge_core::data::OutcomeKind;
use policyforge_core::dgp::{generate, Confounding, DgpSpec, Prevalence};
use policyforge_core::drlearner::{ndr_learner, NdrConfig};
use policyforge_core::forest::{cf_scores, cftt, fit_causal_forest, fit_nuisances, ForestConfig};
use policyforge_core::policy::fit_policy_tree;
use policyforge_core::rng::RngStream;

fn main() {
    let spec = DgpSpec::new(
        3,
        Prevalence::Common,
        OutcomeKind::Binary,
        Confounding::Mild,
        5000,
    )
    .unwrap();
    let ds = generate(&spec, &RngStream::root(7)).unwrap();
    let truth = ds.truth.clone().unwrap();

    let t = Instant::now();
    let tree = fit_policy_tree(ds.x(), &truth.tau, 2, true, Some(64), None).unwrap();
    println!(
        "tree depth2 n=5000 budget=64: {:?} (depth {})",
        t.elapsed(),
        tree.realized_depth()
    );

    let spec1k = DgpSpec::new(
        3,
        Prevalence::Common,
        OutcomeKind::Binary,
        Confounding::Mild,
        1000,
    )
    .unwrap();
    let ds1k = generate(&spec1k, &RngStream::root(8)).unwrap();
    let truth1k = ds1k.truth.clone().unwrap();
    let t = Instant::now();
    let _ = fit_policy_tree(ds1k.x(), &truth1k.tau, 2, true, None, None).unwrap();
    println!("tree depth2 n=1000 exhaustive: {:?}", t.elapsed());

    let nuis_cfg = ForestConfig::default();
    let t = Instant::now();
    let nuis = fit_nuisances(&ds, &nuis_cfg, &RngStream::root(1)).unwrap();
    println!("nuisances n=5000 (4x500 trees): {:?}", t.elapsed());

    let causal_cfg = ForestConfig::causal_default();
    let t = Instant::now();
    let cf = fit_causal_forest(&ds, &nuis, &causal_cfg, &RngStream::root(2)).unwrap();
    println!("causal forest n=5000 2000 trees: {:?}", t.elapsed());
    let t = Instant::now();
    let _ = cf_scores(&cf, &ds, &nuis).unwrap();
    println!("cf scores: {:?}", t.elapsed());

    let t = Instant::now();
    let ndr = ndr_learner(&ds, &NdrConfig::default(), &nuis_cfg, &RngStream::root(3)).unwrap();
    println!("ndr n=5000 (4 parts): {:?}  ate={:.4}", t.elapsed(), ndr.ate);

    let t = Instant::now();
    let _ = cftt(&ds, &nuis_cfg, &causal_cfg, 4, 1, &RngStream::root(4)).unwrap();
    println!("cftt n=5000 k=4 t=1: {:?}", t.elapsed());

    if std::env::var("TIME_BART").is_ok() {
        use policyforge_core::bart::{bart_scores, BartMethodConfig};
        let spec1k = DgpSpec::new(
            3,
            Prevalence::Common,
            OutcomeKind::Binary,
            Confounding::Mild,
            1000,
        )
        .unwrap();
        let ds1k = generate(&spec1k, &RngStream::root(9)).unwrap();
        let t = Instant::now();
        let b = bart_scores(&ds1k, &BartMethodConfig::default(), &RngStream::root(5)).unwrap();
        println!(
            "bart n=1000 (200 trees, 2500 draws): {:?}  ate={:.4}",
            t.elapsed(),
            b.ate
        );
    }
}
