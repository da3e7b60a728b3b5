//! Doubly robust scores and the normalised doubly robust (NDR) learner.
//!
//! The augmented inverse-propensity score for unit `i` is
//!
//! ```text
//! gamma_i = m1_i - m0_i + (w_i - e_i) / (e_i (1 - e_i)) * (y_i - m_{w_i,i})
//! ```
//!
//! whose inverse-propensity factor equals `1 / e_i` on treated units and
//! `-1 / (1 - e_i)` on control units. The *normalised* variant rescales those
//! factors so they sum to one within each arm (a Hájek-style correction),
//! which removes the score's sensitivity to propensity estimates that do not
//! average out within the sample.
//!
//! The NDR learner splits the sample into four parts and rotates roles so
//! that every quantity is formed out of sample: one part estimates the
//! propensity, a second the arm-specific outcome means, a third has its
//! scores formed from those models and trains a second-stage forest of score
//! on covariates, and the held-out fourth part receives effect predictions
//! from that forest. Every part is held out once and the three rotations per
//! hold-out give each unit three independent effect predictions and three
//! out-of-sample score constructions, which are averaged.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Dataset, Method, ScoreSet};
use crate::error::{Error, Result};
use crate::forest::{clip_propensity, fit_regression_forest, ForestConfig, NuisanceFit};
use crate::rng::RngStream;

/// The augmented inverse-propensity score of a single unit.
pub fn aipw_score(y: f64, w: u8, e: f64, m0: f64, m1: f64) -> f64 {
    let e = clip_propensity(e);
    let w_real = f64::from(w);
    let m_obs = if w == 1 { m1 } else { m0 };
    m1 - m0 + (w_real - e) / (e * (1.0 - e)) * (y - m_obs)
}

/// Signed Hájek weights: `1 / e_i` over treated units rescaled to sum to one,
/// and `-1 / (1 - e_i)` over control units rescaled to sum to minus one.
///
/// # Errors
/// [`Error::InvalidData`] when either arm is empty or lengths differ.
pub fn normalise_score_weights(w: &[u8], e_hat: &[f64]) -> Result<Vec<f64>> {
    if w.len() != e_hat.len() {
        return Err(Error::invalid_data(format!(
            "{} treatments but {} propensities",
            w.len(),
            e_hat.len()
        )));
    }
    let mut raw = vec![0.0; w.len()];
    let mut sum_t = 0.0;
    let mut sum_c = 0.0;
    for i in 0..w.len() {
        let e = clip_propensity(e_hat[i]);
        if w[i] == 1 {
            raw[i] = 1.0 / e;
            sum_t += raw[i];
        } else {
            raw[i] = 1.0 / (1.0 - e);
            sum_c += raw[i];
        }
    }
    if sum_t == 0.0 || sum_c == 0.0 {
        return Err(Error::invalid_data(
            "cannot normalise weights: a treatment arm is empty",
        ));
    }
    for i in 0..w.len() {
        raw[i] = if w[i] == 1 {
            raw[i] / sum_t
        } else {
            -raw[i] / sum_c
        };
    }
    Ok(raw)
}

/// Doubly robust scores from explicit nuisance values.
///
/// With `normalise` the inverse-propensity factor `(w - e) / (e (1 - e))` is
/// replaced by `n` times the signed Hájek weight, which coincides with the
/// plain factor whenever the propensity is constant and equal to the treated
/// share.
///
/// # Errors
/// [`Error::InvalidData`] on length mismatches or (when normalising) an
/// empty arm.
pub fn dr_scores_from(
    y: &[f64],
    w: &[u8],
    e_hat: &[f64],
    m0_hat: &[f64],
    m1_hat: &[f64],
    normalise: bool,
) -> Result<Vec<f64>> {
    let n = y.len();
    if w.len() != n || e_hat.len() != n || m0_hat.len() != n || m1_hat.len() != n {
        return Err(Error::invalid_data(
            "scores need equally many outcomes, treatments, and nuisance values",
        ));
    }
    if !normalise {
        return Ok((0..n)
            .map(|i| aipw_score(y[i], w[i], e_hat[i], m0_hat[i], m1_hat[i]))
            .collect());
    }
    let weights = normalise_score_weights(w, e_hat)?;
    Ok((0..n)
        .map(|i| {
            let m_obs = if w[i] == 1 { m1_hat[i] } else { m0_hat[i] };
            m1_hat[i] - m0_hat[i] + n as f64 * weights[i] * (y[i] - m_obs)
        })
        .collect())
}

/// Doubly robust scores for a dataset from a fitted nuisance model.
///
/// # Errors
/// See [`dr_scores_from`].
pub fn dr_scores(ds: &Dataset, nuis: &NuisanceFit, normalise: bool) -> Result<Vec<f64>> {
    dr_scores_from(
        ds.y(),
        ds.w(),
        &nuis.e_hat,
        &nuis.m0_hat,
        &nuis.m1_hat,
        normalise,
    )
}

/// Configuration of the NDR learner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NdrConfig {
    /// Number of sample parts; must be at least 4 so the propensity part,
    /// outcome part, score part, and hold-out part are distinct.
    pub n_parts: usize,
    /// Second-stage forest regressing scores on covariates.
    pub second_stage: ForestConfig,
    /// Whether scores use the Hájek-normalised weights.
    pub normalise: bool,
}

impl Default for NdrConfig {
    fn default() -> Self {
        NdrConfig {
            n_parts: 4,
            second_stage: ForestConfig::default(),
            normalise: true,
        }
    }
}

/// Runs the NDR learner.
///
/// For each hold-out part `d` the remaining parts rotate through three roles:
/// part `a` fits the propensity forest, part `b` fits the two arm-outcome
/// forests, part `c` gets doubly robust scores from those (fresh-point)
/// predictions and trains the second-stage forest, and part `d` receives
/// effect predictions. A unit's effect estimate averages the rotations of its
/// own hold-out round; its final score averages the rotations in which its
/// part formed scores. Both are therefore strictly out of sample.
///
/// # Errors
/// [`Error::InvalidArgument`] when `n_parts < 4` or the sample cannot be
/// partitioned; fit errors propagate (for instance an empty arm inside one
/// part).
pub fn ndr_learner(
    ds: &Dataset,
    cfg: &NdrConfig,
    nuisance_cfg: &ForestConfig,
    stream: &RngStream,
) -> Result<ScoreSet> {
    let k = cfg.n_parts;
    if k < 4 {
        return Err(Error::invalid_argument(format!(
            "the rotation needs at least 4 parts, got {k}"
        )));
    }
    let n = ds.n();
    let rotations = k - 1;

    let mut part_stream = stream.derive((k * rotations) as u64);
    let parts = assign_folds(n, k, part_stream.draw_seed())?;

    let mut gamma_acc = vec![0.0; n];
    let mut tau_acc = vec![0.0; n];

    for d in 0..k {
        let others: Vec<usize> = (1..k).map(|o| (d + o) % k).collect();
        let hold_rows = parts.fold_rows(d);
        let x_hold = ds.x().select(Axis(0), &hold_rows);

        for r in 0..rotations {
            let part_a = others[r];
            let part_b = others[(r + 1) % rotations];
            let part_c = others[(r + 2) % rotations];
            let s_rot = stream.derive((d * rotations + r) as u64);

            // Propensity from part a.
            let rows_a = parts.fold_rows(part_a);
            let ds_a = ds.subset(&rows_a);
            let w_a: Vec<f64> = ds_a.w().iter().map(|&w| f64::from(w)).collect();
            let e_forest =
                fit_regression_forest(ds_a.x(), &w_a, nuisance_cfg, &s_rot.derive(0))?;

            // Arm-outcome means from part b.
            let rows_b = parts.fold_rows(part_b);
            let ds_b = ds.subset(&rows_b);
            let control_b = ds_b.control_rows();
            let treated_b = ds_b.treated_rows();
            if control_b.is_empty() || treated_b.is_empty() {
                return Err(Error::fit_failed(format!(
                    "part {part_b} has an empty treatment arm; draw a larger sample"
                )));
            }
            let x0 = ds_b.x().select(Axis(0), &control_b);
            let y0: Vec<f64> = control_b.iter().map(|&i| ds_b.y()[i]).collect();
            let m0_forest = fit_regression_forest(&x0, &y0, nuisance_cfg, &s_rot.derive(1))?;
            let x1 = ds_b.x().select(Axis(0), &treated_b);
            let y1: Vec<f64> = treated_b.iter().map(|&i| ds_b.y()[i]).collect();
            let m1_forest = fit_regression_forest(&x1, &y1, nuisance_cfg, &s_rot.derive(2))?;

            // Scores on part c from fresh-point predictions.
            let rows_c = parts.fold_rows(part_c);
            let ds_c = ds.subset(&rows_c);
            let e_c: Vec<f64> = e_forest
                .predict(ds_c.x())
                .into_iter()
                .map(clip_propensity)
                .collect();
            let m0_c = m0_forest.predict(ds_c.x());
            let m1_c = m1_forest.predict(ds_c.x());
            let gamma_c =
                dr_scores_from(ds_c.y(), ds_c.w(), &e_c, &m0_c, &m1_c, cfg.normalise)?;
            for (pos, &i) in rows_c.iter().enumerate() {
                gamma_acc[i] += gamma_c[pos];
            }

            // Second stage: scores on covariates, predicted on the hold-out.
            let second =
                fit_regression_forest(ds_c.x(), &gamma_c, &cfg.second_stage, &s_rot.derive(3))?;
            let tau_hold = second.predict(&x_hold);
            for (pos, &i) in hold_rows.iter().enumerate() {
                tau_acc[i] += tau_hold[pos];
            }
        }
    }

    let r_real = rotations as f64;
    let gamma: Vec<f64> = gamma_acc.into_iter().map(|g| g / r_real).collect();
    let tau_hat: Vec<f64> = tau_acc.into_iter().map(|v| v / r_real).collect();
    ScoreSet::new(Method::Ndr, gamma, tau_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeKind;
    use crate::dgp::{Confounding, DgpSpec, Prevalence};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn aipw_score_matches_the_hand_example() {
        // Control unit, e = 0.2, all outcome models zero, y = 1:
        // gamma = 0 + (0 - 0.2) / (0.2 * 0.8) * 1 = -1.25.
        assert_abs_diff_eq!(aipw_score(1.0, 0, 0.2, 0.0, 0.0), -1.25, epsilon = 1e-15);
        // Treated unit with a perfect outcome model keeps only m1 - m0.
        assert_abs_diff_eq!(aipw_score(0.7, 1, 0.4, 0.2, 0.7), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn hajek_weights_match_the_hand_example() {
        // w = (1, 1, 0), e = (0.5, 0.25, 0.5): treated raw factors (2, 4)
        // rescale to (2/6, 4/6); the lone control gets -1.
        let w = vec![1u8, 1, 0];
        let e = vec![0.5, 0.25, 0.5];
        let weights = normalise_score_weights(&w, &e).unwrap();
        assert_abs_diff_eq!(weights[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[2], -1.0, epsilon = 1e-15);
        let treated_sum: f64 = weights.iter().filter(|v| **v > 0.0).sum();
        assert_abs_diff_eq!(treated_sum, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hajek_weights_require_both_arms() {
        assert!(normalise_score_weights(&[1, 1], &[0.5, 0.5]).is_err());
        assert!(normalise_score_weights(&[0], &[0.5]).is_err());
        assert!(normalise_score_weights(&[0, 1], &[0.5]).is_err());
    }

    #[test]
    fn normalised_scores_equal_plain_scores_at_the_treated_share() {
        // When e is constant and equals the treated share, the Hájek factor
        // reduces to the plain inverse-propensity factor.
        let mut s = RngStream::root(40);
        let n = 50;
        let w: Vec<u8> = (0..n).map(|i| u8::from(i % 5 == 0)).collect(); // share 0.2
        let y: Vec<f64> = (0..n).map(|_| s.draw_normal()).collect();
        let m0: Vec<f64> = (0..n).map(|_| s.draw_normal()).collect();
        let m1: Vec<f64> = (0..n).map(|_| s.draw_normal()).collect();
        let e = vec![0.2; n];
        let plain = dr_scores_from(&y, &w, &e, &m0, &m1, false).unwrap();
        let hajek = dr_scores_from(&y, &w, &e, &m0, &m1, true).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(plain[i], hajek[i], epsilon = 1e-11);
        }
        // At a different constant propensity the two disagree.
        let e_off = vec![0.35; n];
        let plain = dr_scores_from(&y, &w, &e_off, &m0, &m1, false).unwrap();
        let hajek = dr_scores_from(&y, &w, &e_off, &m0, &m1, true).unwrap();
        assert!((0..n).any(|i| (plain[i] - hajek[i]).abs() > 1e-6));
    }

    #[test]
    fn oracle_scores_average_to_the_true_effect() {
        // Confounded design with the true nuisances plugged in: the mean
        // score must track the mean true effect closely.
        let spec = DgpSpec::new(
            1,
            Prevalence::Common,
            OutcomeKind::Binary,
            Confounding::Mild,
            5000,
        )
        .unwrap();
        let ds = crate::dgp::generate(&spec, &RngStream::root(424242)).unwrap();
        let truth = ds.truth.clone().unwrap();
        let gamma = dr_scores_from(
            ds.y(),
            ds.w(),
            &truth.e,
            truth.m0.as_ref().unwrap(),
            truth.m1.as_ref().unwrap(),
            false,
        )
        .unwrap();
        let mean_gamma: f64 = gamma.iter().sum::<f64>() / gamma.len() as f64;
        let mean_tau: f64 = truth.tau.iter().sum::<f64>() / truth.tau.len() as f64;
        assert!(
            (mean_gamma - mean_tau).abs() < 0.02,
            "oracle score mean {mean_gamma} vs true effect mean {mean_tau}"
        );
        // The normalised variant must land in the same place.
        let gamma_n = dr_scores_from(
            ds.y(),
            ds.w(),
            &truth.e,
            truth.m0.as_ref().unwrap(),
            truth.m1.as_ref().unwrap(),
            true,
        )
        .unwrap();
        let mean_n: f64 = gamma_n.iter().sum::<f64>() / gamma_n.len() as f64;
        assert!(
            (mean_n - mean_tau).abs() < 0.02,
            "normalised score mean {mean_n} vs true effect mean {mean_tau}"
        );
    }

    fn small_forest_cfg() -> ForestConfig {
        ForestConfig {
            n_trees: 15,
            min_leaf: 2,
            ..ForestConfig::default()
        }
    }

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut s = RngStream::root(seed);
        let x = Array2::from_shape_fn((n, 3), |_| s.draw_normal());
        let w: Vec<u8> = (0..n)
            .map(|_| u8::from(s.draw_bernoulli(0.5).unwrap()))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[[i, 0]] + f64::from(w[i]) + 0.2 * s.draw_normal())
            .collect();
        Dataset::new(x, w, y, None, OutcomeKind::Continuous, false).unwrap()
    }

    #[test]
    fn ndr_validates_the_part_count() {
        let ds = random_dataset(40, 1);
        let cfg = NdrConfig {
            n_parts: 3,
            second_stage: small_forest_cfg(),
            normalise: true,
        };
        let err = ndr_learner(&ds, &cfg, &small_forest_cfg(), &RngStream::root(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn ndr_is_deterministic_in_the_stream() {
        let ds = random_dataset(120, 7);
        let cfg = NdrConfig {
            n_parts: 4,
            second_stage: small_forest_cfg(),
            normalise: true,
        };
        let a = ndr_learner(&ds, &cfg, &small_forest_cfg(), &RngStream::root(5)).unwrap();
        let b = ndr_learner(&ds, &cfg, &small_forest_cfg(), &RngStream::root(5)).unwrap();
        let c = ndr_learner(&ds, &cfg, &small_forest_cfg(), &RngStream::root(6)).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.tau_hat, b.tau_hat);
        assert_ne!(a.gamma, c.gamma);
        assert_eq!(a.method, Method::Ndr);
    }

    #[test]
    fn ndr_holds_out_every_unit_from_its_own_predictions() {
        // Shifting the outcomes of one part must leave that part's effect
        // predictions unchanged: they come from forests trained on other
        // parts. (Its *scores* change, since scores use the unit's own y.)
        let ds = random_dataset(160, 9);
        let cfg = NdrConfig {
            n_parts: 4,
            second_stage: small_forest_cfg(),
            normalise: true,
        };
        let stream = RngStream::root(31);
        let base = ndr_learner(&ds, &cfg, &small_forest_cfg(), &stream).unwrap();

        // Reconstruct the partition with the same derivation path.
        let mut part_stream = stream.derive((4 * 3) as u64);
        let parts = assign_folds(ds.n(), 4, part_stream.draw_seed()).unwrap();
        let part0 = parts.fold_rows(0);

        let mut y2 = ds.y().to_vec();
        for &i in &part0 {
            y2[i] += 10.0;
        }
        let ds2 = Dataset::new(
            ds.x().clone(),
            ds.w().to_vec(),
            y2,
            None,
            OutcomeKind::Continuous,
            false,
        )
        .unwrap();
        let perturbed = ndr_learner(&ds2, &cfg, &small_forest_cfg(), &stream).unwrap();
        for &i in &part0 {
            assert_abs_diff_eq!(base.tau_hat[i], perturbed.tau_hat[i], epsilon = 1e-12);
        }
        let other_changed = (0..ds.n())
            .filter(|i| !part0.contains(i))
            .any(|i| (base.tau_hat[i] - perturbed.tau_hat[i]).abs() > 1e-9);
        assert!(other_changed, "perturbation should reach the other parts");
    }

    #[test]
    fn ndr_tracks_a_constant_effect() {
        let ds = random_dataset(400, 17);
        let cfg = NdrConfig {
            n_parts: 4,
            second_stage: ForestConfig {
                n_trees: 60,
                ..ForestConfig::default()
            },
            normalise: true,
        };
        let nuisance = ForestConfig {
            n_trees: 60,
            ..ForestConfig::default()
        };
        let scores = ndr_learner(&ds, &cfg, &nuisance, &RngStream::root(19)).unwrap();
        assert!(
            (scores.ate - 1.0).abs() < 0.25,
            "score mean {} should be near the constant effect 1.0",
            scores.ate
        );
        let mean_tau: f64 = scores.tau_hat.iter().sum::<f64>() / scores.tau_hat.len() as f64;
        assert!(
            (mean_tau - 1.0).abs() < 0.25,
            "effect predictions average to {mean_tau}"
        );
    }
}
