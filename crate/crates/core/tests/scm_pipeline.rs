//! End-to-end runs on the SCM fixture: erasure, regression, counterfactuals
//! and the effect metrics, checked against the SCM's own counterfactuals.

use cfrep_core::cfr::{
    counterfactual_matrix, fit_cfr_matrix, fit_cfr_sgd_matrix, CfrMode, SgdConfig,
};
use cfrep_core::classify::{fit_logreg_ova, LinearClassifier, LogRegConfig};
use cfrep_core::erasure::{cross_covariance_matrix, fit_projector_matrix};
use cfrep_core::linalg::pearson;
use cfrep_core::metrics::{
    ate_hat, ate_ref, evaluate_pairs, nested_analysis, prefix_len, te_hat_values, te_ref_values,
    PairEvaluation,
};
use cfrep_core::synthetic::{GaussianMixture, ScmData, ScmFixture, ScmFixtureConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

#[test]
fn erased_mixture_is_guarded() {
    let mix = GaussianMixture::new(32, 3, 3.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, z) = mix.sample(3000, &mut rng);
    let proj = fit_projector_matrix(&x, &z, 3, 1e-8).unwrap();
    assert_eq!(proj.rank(), 2);
    let xe = proj.erase_matrix(&x).unwrap();
    let before = cross_covariance_matrix(&x, &z, 3).unwrap().norm();
    let after = cross_covariance_matrix(&xe, &z, 3).unwrap().norm();
    assert!(after <= 1e-6 * before, "{after} vs {before}");

    let (xt, zt) = mix.sample(3000, &mut rng);
    let accuracy = |clf: &LinearClassifier, x: &DMatrix<f64>| {
        (0..x.nrows())
            .filter(|&i| {
                cfrep_core::classify::ProbabilisticClassifier::predict(clf, &x.row(i).transpose())
                    .unwrap()
                    == zt[i]
            })
            .count() as f64
            / x.nrows() as f64
    };
    let raw = fit_logreg_ova(&x, &z, classes(3), 1e-3, &LogRegConfig::default()).unwrap();
    assert!(accuracy(&raw, &xt) > 0.9);
    let probe = fit_logreg_ova(&xe, &z, classes(3), 1e-3, &LogRegConfig::default()).unwrap();
    let acc = accuracy(&probe, &proj.erase_matrix(&xt).unwrap());
    let majority = (0..3)
        .map(|c| zt.iter().filter(|&&v| v == c).count())
        .max()
        .unwrap() as f64
        / 3000.0;
    assert!((acc - majority).abs() <= 0.03, "{acc} vs {majority}");
}

fn true_cf_matrix(fx: &ScmFixture, data: &ScmData, targets: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(data.len(), fx.dim());
    for (i, &t) in targets.iter().enumerate() {
        out.row_mut(i)
            .copy_from(&fx.true_counterfactual(data, i, t).unwrap().transpose());
    }
    out
}

fn ref_cf_matrix(fx: &ScmFixture, data: &ScmData, targets: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(data.len(), fx.dim());
    for (i, &t) in targets.iter().enumerate() {
        out.row_mut(i)
            .copy_from(&fx.reference_counterfactual(data, i, t).unwrap().transpose());
    }
    out
}

#[test]
fn recovers_scm_counterfactuals() {
    let fx = ScmFixture::new(&ScmFixtureConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = fx.sample(5000, &mut rng).unwrap();
    let test = fx.sample(300, &mut rng).unwrap();
    let proj = fit_projector_matrix(&train.x, train.z(), 3, 1e-8).unwrap();
    assert_eq!(proj.rank(), 2);
    let model = fit_cfr_matrix(&train.x, train.z(), &proj, 0.0).unwrap();
    let targets: Vec<usize> = test.z().iter().map(|z| (z + 1) % 3).collect();
    let cf = counterfactual_matrix(
        &model,
        &proj,
        &test.x,
        &targets,
        CfrMode::Deterministic,
        &mut rng,
    )
    .unwrap();
    let truth = true_cf_matrix(&fx, &test, &targets);
    let errors: Vec<f64> = (0..test.len())
        .map(|i| (cf.row(i) - truth.row(i)).norm() / truth.row(i).norm())
        .collect();
    let med = median(errors);
    assert!(med < 0.05, "median relative error {med}");
}

#[test]
fn sgd_matches_closed_form_on_conditioned_fixture() {
    let fx = ScmFixture::new(&ScmFixtureConfig {
        p: 16,
        seed: 5,
        perp_condition: 100.0,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = fx.sample(6000, &mut rng).unwrap();
    let proj = fit_projector_matrix(&train.x, train.z(), 3, 1e-8).unwrap();
    let lambda = 1e-2;
    let exact = fit_cfr_matrix(&train.x, train.z(), &proj, lambda).unwrap();
    let cfg = SgdConfig {
        lr: 0.05,
        epochs: 200,
        batch_size: 32,
        seed: 7,
    };
    let sgd = fit_cfr_sgd_matrix(&train.x, train.z(), &proj, lambda, &cfg).unwrap();
    for z in 0..3 {
        let (a, b) = (exact.class(z), sgd.class(z));
        let rel_w = (&a.weights - &b.weights).norm() / a.weights.norm();
        let rel_b = (&a.bias - &b.bias).norm() / a.bias.norm();
        assert!(rel_w < 0.01 && rel_b < 0.01, "z={z}: {rel_w} {rel_b}");
    }
}

struct Effects {
    biased: Vec<PairEvaluation>,
    balanced: Vec<PairEvaluation>,
}

fn effects(seed: u64, n_train: usize, n_test: usize) -> Effects {
    let fx = ScmFixture::new(&ScmFixtureConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let train = fx.sample(n_train, &mut rng).unwrap();
    let test = fx.sample(n_test, &mut rng).unwrap();
    let proj = fit_projector_matrix(&train.x, train.z(), 3, 1e-8).unwrap();
    let model = fit_cfr_matrix(&train.x, train.z(), &proj, 0.0).unwrap();
    let targets: Vec<usize> = test.z().iter().map(|z| (z + 1) % 3).collect();
    let cfr = counterfactual_matrix(
        &model,
        &proj,
        &test.x,
        &targets,
        CfrMode::Deterministic,
        &mut rng,
    )
    .unwrap();
    let reference = ref_cf_matrix(&fx, &test, &targets);
    let ids: Vec<String> = (0..test.len()).map(|i| format!("t{i}")).collect();
    let transitions: Vec<(usize, usize)> = test
        .z()
        .iter()
        .copied()
        .zip(targets.iter().copied())
        .collect();
    let run = |gamma: f64, rng: &mut ChaCha8Rng| {
        let y = fx.labels(&train, gamma, 0.5, seed, rng);
        let clf = fit_logreg_ova(&train.x, &y, classes(2), 1e-3, &LogRegConfig::default()).unwrap();
        evaluate_pairs(&clf, &ids, &transitions, &test.x, &cfr, Some(&reference)).unwrap()
    };
    Effects {
        biased: run(3.0, &mut rng),
        balanced: run(0.0, &mut rng),
    }
}

#[test]
fn biased_classifier_effects() {
    let e = effects(8, 5000, 1000);
    let report = nested_analysis(&e.biased, &[0.5, 1.0]).unwrap();
    let half = prefix_len(0.5, e.biased.len());
    let order = &report.order[..half];
    let te: Vec<f64> = te_ref_values(&e.biased).unwrap();
    let te_hat: Vec<f64> = te_hat_values(&e.biased).unwrap();
    let rho = pearson(
        &order.iter().map(|&i| te[i]).collect::<Vec<_>>(),
        &order.iter().map(|&i| te_hat[i]).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(rho > 0.9, "rho {rho}");
    assert!((report.points[0].rho.unwrap() - rho).abs() < 1e-9);
    assert!(report.points.windows(2).all(|w| w[0].atv <= w[1].atv));

    let (biased, balanced) = (ate_hat(&e.biased).unwrap(), ate_hat(&e.balanced).unwrap());
    assert!(biased >= 3.0 * balanced, "{biased} vs {balanced}");
    let reference = ate_ref(&e.biased).unwrap();
    assert!(
        (biased - reference).abs() <= 0.1 * reference,
        "{biased} vs {reference}"
    );
}
