mod common;

use hazardlab::cohort::CohortCriteria;
use hazardlab::cox::{
    self, adjusted_survival, cv_select_gamma, default_gamma_grid, gradient_neg_log_partial_likelihood,
    neg_log_partial_likelihood, rank_factors, CoxFitConfig, CoxProblem, CvConfig, TieMethod,
};
use hazardlab::features::{build_survival_matrix, SurvivalDataset, SurvivalOptions};
use hazardlab::synth::SynthConfig;
use rand::seq::SliceRandom;
use rand::Rng;

fn dataset(x: &[Vec<f64>], t: &[f64], e: &[bool]) -> SurvivalDataset {
    SurvivalDataset::from_rows(x, t.to_vec(), e.to_vec()).unwrap()
}

fn random_beta(rng: &mut rand_chacha::ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn likelihood_matches_direct_sum() {
    let mut rng = common::rng(41);
    for draw in 0..60 {
        let (x, t, e) = common::random_survival(&mut rng, 3 + draw % 20, 3, draw % 2 == 0);
        let beta = random_beta(&mut rng, 3);
        let got = neg_log_partial_likelihood(&beta, &dataset(&x, &t, &e)).unwrap();
        let want = common::efron_oracle(&x, &t, &e, &beta);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "draw {draw}: {got} vs {want}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = common::rng(42);
    for draw in 0..20 {
        let (x, t, e) = common::random_survival(&mut rng, 30, 4, draw % 2 == 1);
        let data = dataset(&x, &t, &e);
        let beta = random_beta(&mut rng, 4);
        let analytic = gradient_neg_log_partial_likelihood(&beta, &data).unwrap();
        let numeric = common::fd_gradient(|b| common::efron_oracle(&x, &t, &e, b), &beta, 1e-5);
        let err = common::max_relative_error(analytic.as_slice(), &numeric);
        assert!(err < 1e-6, "draw {draw}: {err}");
    }
}

#[test]
fn efron_equals_breslow_without_ties() {
    let mut rng = common::rng(43);
    for _ in 0..20 {
        let (x, t, e) = common::random_survival(&mut rng, 25, 3, false);
        let data = dataset(&x, &t, &e);
        let beta = random_beta(&mut rng, 3);
        let efron = CoxProblem::new(&data, TieMethod::Efron).neg_log_likelihood(&beta).unwrap();
        let breslow = CoxProblem::new(&data, TieMethod::Breslow).neg_log_likelihood(&beta).unwrap();
        assert!((efron - breslow).abs() < 1e-12, "{efron} vs {breslow}");
        let oracle = common::breslow_oracle(&x, &t, &e, &beta);
        assert!((breslow - oracle).abs() < 1e-10);
    }
}

#[test]
fn breslow_differs_from_efron_with_ties() {
    let x = vec![vec![0.0]; 3];
    let data = dataset(&x, &[1.0, 1.0, 2.0], &[true, true, true]);
    let breslow = CoxProblem::new(&data, TieMethod::Breslow).neg_log_likelihood(&[0.0]).unwrap();
    assert!((breslow - 2.0 * 3f64.ln()).abs() < 1e-12);
}

#[test]
fn permuting_subjects_changes_nothing() {
    let mut rng = common::rng(44);
    let (x, t, e) = common::random_survival(&mut rng, 80, 3, true);
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.shuffle(&mut rng);
    let xp: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let tp: Vec<f64> = order.iter().map(|&i| t[i]).collect();
    let ep: Vec<bool> = order.iter().map(|&i| e[i]).collect();
    let config = CoxFitConfig {
        tolerance: 1e-12,
        ..CoxFitConfig::with_gamma(0.5)
    };
    let a = cox::fit(&dataset(&x, &t, &e), &config).unwrap();
    let b = cox::fit(&dataset(&xp, &tp, &ep), &config).unwrap();
    for (u, v) in a.beta.iter().zip(&b.beta) {
        assert!((u - v).abs() < 1e-8, "{u} vs {v}");
    }
    assert_eq!(a.support, b.support);
    assert_eq!(a.baseline.points.len(), b.baseline.points.len());
    for (p, q) in a.baseline.points.iter().zip(&b.baseline.points) {
        assert_eq!(p.0, q.0);
        assert!((p.1 - q.1).abs() < 1e-8);
    }
}

#[test]
fn shrinkage_path_is_monotone() {
    let mut rng = common::rng(45);
    let (x, t, e) = common::random_survival(&mut rng, 150, 6, false);
    let data = dataset(&x, &t, &e);
    let grid = default_gamma_grid(cox::gamma_max(&data).unwrap(), 30, 1e-3);
    let mut prev: Option<Vec<f64>> = None;
    let mut norms = Vec::new();
    for &gamma in &grid {
        let cfg = CoxFitConfig {
            tolerance: 1e-12,
            ..CoxFitConfig::with_gamma(gamma)
        };
        let fit = cox::fit_from(&data, &cfg, prev.as_deref()).unwrap();
        assert!(fit.converged);
        norms.push(fit.l1_norm());
        prev = Some(fit.beta);
    }
    assert_eq!(norms[0], 0.0);
    // Penalties descend along the grid, so norms must not shrink.
    for w in norms.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{norms:?}");
    }
}

#[test]
fn objective_and_baseline_invariants() {
    let mut rng = common::rng(46);
    for draw in 0..5 {
        let (x, t, e) = common::random_survival(&mut rng, 60, 4, draw % 2 == 0);
        let data = dataset(&x, &t, &e);
        let fit = cox::fit(&data, &CoxFitConfig::with_gamma(0.05 * draw as f64)).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.baseline.points[0], (0.0, 0.0));
        for w in fit.baseline.points.windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].1 >= w[0].1);
        }
    }
}

fn synthetic_survival(seed: u64, beta: Vec<f64>, n: usize) -> SurvivalDataset {
    let codes: Vec<String> = (0..beta.len()).map(|j| format!("F{j}")).collect();
    let cfg = SynthConfig::new(n, seed, codes.clone(), beta);
    let s = common::synth_cohort(&cfg, &CohortCriteria::default());
    build_survival_matrix(&s.cohort.members, &s.histories, &codes, &SurvivalOptions::default())
        .unwrap()
        .dataset
}

#[test]
fn ranking_recovers_planted_order() {
    let data = synthetic_survival(47, vec![0.8, 0.0, 0.3], 2_000);
    let cv = CvConfig {
        seed: 47,
        ..CvConfig::default()
    };
    let sel = cv_select_gamma(&data, &CoxFitConfig::default(), &cv).unwrap();
    let fit = cox::fit(&data, &CoxFitConfig::with_gamma(sel.best_gamma)).unwrap();
    let ranked = rank_factors(&fit, 0.05);
    let codes: Vec<&str> = ranked.iter().map(|r| r.code.as_str()).collect();
    assert_eq!(codes.first(), Some(&"F0"), "{ranked:?}");
    assert!(codes.contains(&"F2"), "{ranked:?}");
    assert!(ranked.windows(2).all(|w| w[0].coefficient >= w[1].coefficient));
    assert!(ranked.iter().all(|r| r.positive == (r.coefficient > 0.0)));
}

#[test]
fn cv_is_deterministic_and_respects_single_grid() {
    let data = synthetic_survival(48, vec![0.5, 0.0], 400);
    let cv = CvConfig {
        seed: 5,
        grid_size: 8,
        ..CvConfig::default()
    };
    let a = cv_select_gamma(&data, &CoxFitConfig::default(), &cv).unwrap();
    let b = cv_select_gamma(&data, &CoxFitConfig::default(), &cv).unwrap();
    assert_eq!(a, b);
    let single = CvConfig {
        grid: Some(vec![0.123]),
        ..cv
    };
    assert_eq!(cv_select_gamma(&data, &CoxFitConfig::default(), &single).unwrap().best_gamma, 0.123);
}

#[test]
fn zero_model_curves_are_baseline_survival() {
    let data = synthetic_survival(49, vec![0.5, 0.0], 300);
    let gmax = cox::gamma_max(&data).unwrap();
    let fit = cox::fit(&data, &CoxFitConfig::with_gamma(gmax * 1.01)).unwrap();
    assert!(fit.beta.iter().all(|b| *b == 0.0));
    assert!(rank_factors(&fit, 0.05).is_empty());
    let curves = adjusted_survival(&fit, &data, "F0", &[-1.0, 0.0, 7.0]).unwrap();
    for c in &curves {
        for (&(t, s), &(bt, h)) in c.points.iter().zip(&fit.baseline.points) {
            assert_eq!(t, bt);
            assert_eq!(s, (-h).exp());
        }
    }
    assert!(adjusted_survival(&fit, &data, "nope", &[1.0]).is_err());
}
