mod common;

use icl_uq::baselines::{OlsPredictor, RidgePredictor};
use icl_uq::bayes::{mc_risk, BayesPredictor};
use icl_uq::experiments::{
    bayes_curves, classify_raw, classify_resolved, flipped_oracle_rates, flipped_rates, last_sigma, GroupCall,
    TruncationConfig,
};
use icl_uq::montecarlo::{eval_by_position, EvalSpec, Metric, TaskSource};
use icl_uq::par::Execution;
use icl_uq::taskgen::{CovariateConfig, FlipMode, FlippedRegionConfig, PriorConfig, SigmaGroup};
use proptest::prelude::*;

fn spec(n_eval: usize) -> EvalSpec {
    EvalSpec::from_prior(PriorConfig::in_distribution(8), 100, n_eval, 17)
}

#[test]
fn bayes_average_sigma_at_100() {
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(8));
    let out = eval_by_position(&[&bayes], &spec(2000), &[Metric::AvgSigma]).unwrap();
    let v = out[0][0].at(100);
    assert!((v / 1.03 - 1.0).abs() < 0.05, "{v}");
}

#[test]
fn bayes_against_itself_is_exactly_zero() {
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(8));
    let out = eval_by_position(
        &[&bayes],
        &spec(50),
        &[Metric::AbsErrVsBayesMean, Metric::AbsErrVsBayesSigma],
    )
    .unwrap();
    for s in &out[0] {
        assert!(s.mean.iter().chain(&s.stderr).all(|&v| v == 0.0));
    }
}

#[test]
fn ols_blows_up_in_the_interpolation_regime() {
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(8));
    let out = eval_by_position(&[&bayes, &OlsPredictor], &spec(1000), &[Metric::MeanMse]).unwrap();
    // The min-norm solution is merely worse below d; the spike sits at d + 1.
    for t in 1..=8 {
        assert!(out[1][0].at(t) > 1.2 * out[0][0].at(t), "t = {t}");
    }
    assert!(out[1][0].at(9) > 100.0 * out[0][0].at(9));
    // Far past d both are close to the noise level.
    assert!(out[1][0].at(100) / out[0][0].at(100) < 1.2);
}

#[test]
fn stderr_shrinks_like_root_n() {
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(8));
    let small = mc_risk(&bayes, &spec(1000)).unwrap();
    let mut big_spec = spec(2000);
    big_spec.seed = 99;
    let big = mc_risk(&bayes, &big_spec).unwrap();
    let ratio: f64 = (20..=100).map(|t| small.stderr[t - 1] / big.stderr[t - 1]).sum::<f64>() / 81.0;
    assert!((1.2..=1.8).contains(&ratio), "{ratio}");
}

#[test]
fn sequential_and_parallel_evaluation_agree_bitwise() {
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(4));
    let ridge = RidgePredictor::default();
    let mut s = EvalSpec::from_prior(PriorConfig::in_distribution(4), 30, 40, 3);
    s.exec = Execution::Sequential;
    let a = eval_by_position(&[&bayes, &ridge], &s, &Metric::ALL).unwrap();
    s.exec = Execution::Parallel;
    let b = eval_by_position(&[&bayes, &ridge], &s, &Metric::ALL).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bayes_curves_are_deterministic() {
    let prior = PriorConfig::in_distribution(2);
    let cov = CovariateConfig::default();
    let a = bayes_curves(&prior, &cov, 20, 30, 5, Execution::Parallel).unwrap();
    let b = bayes_curves(&prior, &cov, 20, 30, 5, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 9);
    assert!(a.iter().all(|s| s.len() == 20 && s.stderr.iter().all(|&e| e >= 0.0)));
}

#[test]
fn ood_tasks_pull_sigma_toward_the_shifted_noise() {
    // The in-distribution oracle's σ* moves from the prior toward the shifted
    // noise level. With a rate of 20 the prior still weighs in at t = 100, so
    // only the ordering and the direction of travel are exact.
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(8));
    let mut at_100 = Vec::new();
    for prior in [
        PriorConfig::small_ood(8),
        PriorConfig::in_distribution(8),
        PriorConfig::medium_ood(8),
        PriorConfig::large_ood(8),
    ] {
        let s = EvalSpec {
            tasks: TaskSource::Prior(prior),
            covariates: CovariateConfig::default(),
            len: 100,
            n_eval: 500,
            seed: 8,
            reference_prior: PriorConfig::in_distribution(8),
            exec: Execution::Parallel,
        };
        let sig = &eval_by_position(&[&bayes], &s, &[Metric::AvgSigma]).unwrap()[0][0];
        at_100.push((sig.at(20), sig.at(100)));
    }
    assert!(at_100.windows(2).all(|w| w[0].1 < w[1].1), "{at_100:?}");
    // Shifted environments keep moving away from the ID level of about 1.
    assert!(at_100[0].1 < at_100[0].0);
    assert!(at_100[2].1 > at_100[2].0 && at_100[3].1 > at_100[3].0);
    assert!((at_100[2].1 / 2.0 - 1.0).abs() < 0.1 && at_100[3].1 / 4.0 > 0.85, "{at_100:?}");
}

#[test]
fn group_oracle_is_accurate_in_distribution() {
    let rates = flipped_oracle_rates(8, FlipMode::Id, 100, 500, 4, Execution::Parallel).unwrap();
    assert!(rates.accuracy > 0.9, "{rates:?}");
}

#[test]
fn flipped_rates_partition() {
    // The ID-prior Bayes oracle ignores the group structure entirely.
    let bayes = BayesPredictor::new(PriorConfig::in_distribution(2));
    let cfg = FlippedRegionConfig::new(2, FlipMode::Ood);
    let r = flipped_rates(&cfg, 30, 200, 1, Execution::Parallel, |_, seq| last_sigma(&bayes, seq)).unwrap();
    assert!((r.accuracy + r.complementary + r.out_of_support - 1.0).abs() < 1e-12);
    assert!(r.resolved_accuracy >= r.accuracy);
    assert!(r.resolved_accuracy <= r.accuracy + r.out_of_support + 1e-12);
}

#[test]
fn truncation_gap_decreases_with_the_window() {
    let cfg = TruncationConfig {
        prior: PriorConfig::in_distribution(4),
        covariates: CovariateConfig::default(),
        t_eval: 100,
        windows: vec![5, 10, 40],
        n_mc: 4000,
        seed: 2,
        exec: Execution::Parallel,
    };
    let r = icl_uq::experiments::truncation_gap_study(&cfg).unwrap();
    let g = &r.gaps.mean;
    assert!(g[0] > g[1] && g[1] > g[2], "{g:?}");
    for (m, s) in g.iter().zip(&r.gaps.stderr) {
        assert!(*m > 3.0 * s);
    }
    let bayes = BayesPredictor::new(cfg.prior.clone());
    let series = mc_risk(&bayes, &cfg.eval_spec()).unwrap();
    assert_eq!(r.full_risk, series.at(100));
}

proptest! {
    #[test]
    fn resolved_classification_is_a_partition(s in 0.0f64..1.2, g1 in any::<bool>()) {
        let truth = if g1 { SigmaGroup::G1 } else { SigmaGroup::G2 };
        let raw = classify_raw(s, truth);
        let res = classify_resolved(s, truth);
        prop_assert!(res != GroupCall::OutOfSupport);
        if raw != GroupCall::OutOfSupport {
            prop_assert_eq!(raw, res);
        }
        prop_assert_eq!(raw == GroupCall::OutOfSupport, !(0.1..=0.9).contains(&s));
    }
}
