use etpf::experiments::{
    lorenz_sweep, run_scalar, scalar_gaussian_experiment, scalar_uniform_experiment,
    support_pattern_export, transform_map_export, ScalarPrior, SweepConfig,
};
use etpf::filters::FilterMethod;
use etpf::inference::{analytic_posterior_moments, AnalyticPosterior};

#[test]
fn mean_error_shrinks_with_ensemble_size() {
    let uniform =
        analytic_posterior_moments(&AnalyticPosterior::uniform_prior(0.0, 1.0, 0.1, 2.0)).unwrap();
    let err = |m| (scalar_uniform_experiment(m).unwrap().mean - uniform.mean).abs();
    assert!(err(100) < err(10));
    let err = |m| (scalar_gaussian_experiment(m).unwrap().mean - 0.55).abs();
    assert!(err(100) < err(10));
}

#[test]
fn gaussian_support_has_two_m_minus_one_entries() {
    for m in [10, 40, 100] {
        assert_eq!(support_pattern_export(m).unwrap().count, 2 * m - 1);
    }
}

#[test]
fn support_is_a_staircase() {
    for prior in [ScalarPrior::default_gaussian(), ScalarPrior::Uniform01] {
        let run = run_scalar(40, prior).unwrap();
        let support = run.coupling.support();
        let mut prev: Option<(usize, usize)> = None;
        for i in 0..40 {
            let js: Vec<usize> = support
                .iter()
                .filter(|&&(r, _)| r == i)
                .map(|&(_, j)| j)
                .collect();
            if js.is_empty() {
                continue;
            }
            let (lo, hi) = (js[0], *js.last().unwrap());
            assert_eq!(hi - lo + 1, js.len(), "row {i} is not an interval");
            if let Some((plo, phi)) = prev {
                assert!(lo >= plo && hi >= phi && lo <= phi + 1, "row {i}");
            }
            prev = Some((lo, hi));
        }
    }
}

#[test]
fn transform_map_approaches_exact_map() {
    let worst = |m| {
        transform_map_export(m)
            .unwrap()
            .iter()
            .map(|p| (p.numerical - p.analytic).abs())
            .fold(0.0, f64::max)
    };
    assert!(worst(100) < worst(10));
    let pts = transform_map_export(10).unwrap();
    assert!(pts
        .windows(2)
        .all(|w| w[0].prior < w[1].prior && w[0].numerical <= w[1].numerical));
}

#[test]
fn sweep_is_reproducible() {
    let config = SweepConfig {
        ensemble_sizes: vec![8],
        inflation_grid: vec![1.0, 1.1],
        steps: 12,
        seeds: vec![1, 2],
        ..Default::default()
    };
    let a = lorenz_sweep(&config).unwrap();
    let b = lorenz_sweep(&config).unwrap();
    let bytes = |r: &etpf::experiments::SweepResult| {
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        r.write_grid_csv(&mut out).unwrap();
        out
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.cells.len(), 2 * 2 * 2);
    assert!(a.row(FilterMethod::Esrf, 8).is_some());
}
