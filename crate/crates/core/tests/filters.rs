use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use etpf::dynamics::{propagate, synthesize_observations, Lorenz63, ObservationModel, ZeroField};
use etpf::ensemble_transform::mean_identity_check;
use etpf::filters::{
    esrf_analysis, etpf_analysis_step, inflate, initial_ensemble, run_filter, FilterConfig,
    FilterMethod,
};
use etpf::Ensemble;

fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.ncols();
    let mean = x.column_mean();
    let mut a = x.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    &a * a.transpose() / (m as f64 - 1.0)
}

#[test]
fn esrf_matches_kalman_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let (n, p, m) = (3, 2, 8);
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = DMatrix::from_fn(p, p, |i, j| {
            if i >= j {
                0.5 + rng.random::<f64>()
            } else {
                0.0
            }
        });
        let r = &l * l.transpose();
        let model = ObservationModel::new(h.clone(), r.clone(), 1.0).unwrap();
        let y = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let forecast = Ensemble::new(x.clone()).unwrap();
        let analysis = esrf_analysis(&forecast, &y, &model).unwrap();

        let pf = sample_cov(&x);
        let s = &h * &pf * h.transpose() + &r;
        let k = &pf * h.transpose() * s.try_inverse().unwrap();
        let mean = x.column_mean() + &k * (&y - &h * x.column_mean());
        let cov = (DMatrix::identity(n, n) - &k * &h) * &pf;
        assert!((analysis.mean() - mean).amax() <= 1e-10);
        assert!((sample_cov(analysis.states()) - cov).amax() <= 1e-10);
    }
}

#[test]
fn esrf_contracts_on_static_truth() {
    let field = ZeroField { dim: 3 };
    let r = 1e-4;
    let model = ObservationModel::identity(3, r, 0.1).unwrap();
    let x0 = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
    let data = synthesize_observations(
        &field,
        &model,
        &x0,
        10,
        0.1,
        &mut ChaCha8Rng::seed_from_u64(42),
    )
    .unwrap();
    let config = FilterConfig {
        ensemble_size: 20,
        inflation: 1.0,
        rejuvenation: 0.0,
        model,
        dt: 0.1,
        steps: 10,
        seed: 3,
        initial_spread: 1.0,
    };
    let diag = run_filter(&config, FilterMethod::Esrf, &field, &data).unwrap();
    let bound = (3.0 * r / 3.0_f64).sqrt() / 3.0;
    assert!(diag.rmse.iter().any(|&e| e < bound), "{:?}", diag.rmse);
}

#[test]
fn etpf_invariants_hold_along_a_lorenz_run() {
    let field = Lorenz63::default();
    let model = ObservationModel::identity(3, 8.0, 0.12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let start = propagate(
        &field,
        &DVector::from_column_slice(&[1.0, 1.0, 1.0]),
        20.0,
        0.01,
    )
    .unwrap();
    let data = synthesize_observations(&field, &model, &start, 30, 0.01, &mut rng).unwrap();
    let mut ens = initial_ensemble(&start, 25, 1.0, &mut rng).unwrap();
    for y in &data.observations {
        let mut f = ens.states().clone();
        for j in 0..ens.members() {
            f.set_column(j, &propagate(&field, &ens.member(j), 0.12, 0.01).unwrap());
        }
        let forecast = inflate(&Ensemble::new(f).unwrap(), 1.05).unwrap();
        let step = etpf_analysis_step(&forecast, y, &model).unwrap();
        assert!(mean_identity_check(&forecast, &step.analysis, &step.weights).unwrap() <= 1e-10);
        for k in 0..3 {
            let row = forecast.states().row(k);
            assert!(step
                .analysis
                .states()
                .row(k)
                .iter()
                .all(|&x| x >= row.min() - 1e-12 && x <= row.max() + 1e-12));
        }
        ens = step.analysis;
    }
}

#[test]
fn runs_are_reproducible() {
    let field = Lorenz63::default();
    let model = ObservationModel::identity(3, 8.0, 0.12).unwrap();
    let start = DVector::from_column_slice(&[-5.0, -6.0, 22.0]);
    let data = synthesize_observations(
        &field,
        &model,
        &start,
        15,
        0.01,
        &mut ChaCha8Rng::seed_from_u64(44),
    )
    .unwrap();
    let config = FilterConfig {
        ensemble_size: 12,
        inflation: 1.05,
        rejuvenation: 0.3,
        model,
        dt: 0.01,
        steps: 15,
        seed: 9,
        initial_spread: 1.0,
    };
    for method in FilterMethod::ALL {
        let a = run_filter(&config, method, &field, &data).unwrap();
        let b = run_filter(&config, method, &field, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rmse.len(), 15);
    }
}

proptest! {
    #[test]
    fn inflation_scales_covariance(
        seed in any::<u64>(),
        n in 1usize..4,
        m in 2usize..20,
        lambda in 1.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ens = Ensemble::new(x.clone()).unwrap();
        let out = inflate(&ens, lambda).unwrap();
        let expected = sample_cov(&x) * lambda * lambda;
        prop_assert!((sample_cov(out.states()) - expected).amax() <= 1e-12);
        prop_assert!((out.mean() - ens.mean()).amax() <= 1e-14 * (1.0 + ens.mean().amax()));
    }
}
