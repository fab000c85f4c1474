//! Drivers for the scalar inference problems and the Lorenz-63 filter sweep,
//! plus their CSV writers.

use std::io::{self, Write};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::defaults;
use crate::dynamics::{
    propagate, synthesize_observations, Lorenz63, ObservationModel, SyntheticData,
};
use crate::ensemble_transform::{et_transform, Ensemble};
use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterConfig, FilterDiagnostics, FilterMethod};
use crate::inference::{importance_weights, weighted_moments, WeightedSamples};
use crate::transport::{
    cost_matrix, solve_transport, support_pattern, transition_from_coupling, Coupling,
    MarginalPair, SupportPattern,
};

/// Prior laws of the scalar problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarPrior {
    Gaussian { mean: f64, variance: f64 },
    Uniform01,
}

impl ScalarPrior {
    pub fn default_gaussian() -> Self {
        ScalarPrior::Gaussian {
            mean: defaults::GAUSSIAN_PRIOR_MEAN,
            variance: defaults::GAUSSIAN_PRIOR_VARIANCE,
        }
    }
}

/// `u_i = 1/(2M) + (i-1)/M` pushed through the prior's quantile function.
pub fn deterministic_quantile_samples(m: usize, prior: ScalarPrior) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let mf = m as f64;
    Ok((0..m)
        .map(|i| {
            let u = 1.0 / (2.0 * mf) + i as f64 / mf;
            match prior {
                ScalarPrior::Uniform01 => u,
                ScalarPrior::Gaussian { mean, variance } => {
                    mean + variance.sqrt() * std::f64::consts::SQRT_2 * erf_inv(2.0 * u - 1.0)
                }
            }
        })
        .collect())
}

/// All intermediate products of one scalar ensemble transform.
#[derive(Debug, Clone)]
pub struct ScalarRun {
    pub prior: Ensemble,
    pub weights: DVector<f64>,
    pub coupling: Coupling,
    pub posterior: Ensemble,
}

/// Quantile samples, Gaussian likelihood around `y = 0.1` with variance 2,
/// optimal coupling against uniform prior weights, deterministic transform.
pub fn run_scalar(m: usize, prior: ScalarPrior) -> Result<ScalarRun> {
    if m < 2 {
        return Err(Error::InvalidInput("scalar experiments need M >= 2".into()));
    }
    let samples = deterministic_quantile_samples(m, prior)?;
    let prior_ens = Ensemble::from_scalars(&samples)?;
    let y = defaults::SCALAR_OBSERVATION;
    let likelihoods = DVector::from_iterator(
        m,
        samples
            .iter()
            .map(|x| (-(y - x).powi(2) / (2.0 * defaults::SCALAR_NOISE_VARIANCE)).exp()),
    );
    let uniform = prior_ens.weights();
    let weights = importance_weights(&likelihoods, &uniform)?;
    let marginals = MarginalPair::new(weights.clone(), uniform.clone())?;
    let coupling = solve_transport(&cost_matrix(&prior_ens)?, &marginals)?;
    let transition = transition_from_coupling(&coupling, &uniform)?;
    let posterior = et_transform(&prior_ens, &transition)?;
    Ok(ScalarRun {
        prior: prior_ens,
        weights,
        coupling,
        posterior,
    })
}

/// One row of a posterior moment table.
///
/// `variance` is the sample variance with `1/(M-1)` normalization; the third
/// and fourth entries are plain central moments `(1/M) sum (x - mean)^r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRow {
    pub m: usize,
    pub mean: f64,
    pub variance: f64,
    pub third: f64,
    pub fourth: f64,
}

impl MomentRow {
    pub fn from_ensemble(ensemble: &Ensemble) -> Result<Self> {
        let m = ensemble.members();
        let moments = weighted_moments(&WeightedSamples::from_ensemble(ensemble), 4)?;
        Ok(Self {
            m,
            mean: moments[0][0],
            variance: moments[1][0] * m as f64 / (m as f64 - 1.0),
            third: moments[2][0],
            fourth: moments[3][0],
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mean, self.variance, self.third, self.fourth]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    /// Header plus one row per ensemble size, rounded to four decimals.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "M,mean,variance,E[(X-mean)^3],E[(X-mean)^4]")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.m,
                fmt4(r.mean),
                fmt4(r.variance),
                fmt4(r.third),
                fmt4(r.fourth)
            )?;
        }
        Ok(())
    }
}

fn fmt4(x: f64) -> String {
    let s = format!("{x:.4}");
    // Avoid "-0.0000".
    if s.trim_start_matches('-')
        .chars()
        .all(|c| c == '0' || c == '.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn scalar_gaussian_experiment(m: usize) -> Result<MomentRow> {
    MomentRow::from_ensemble(&run_scalar(m, ScalarPrior::default_gaussian())?.posterior)
}

pub fn scalar_uniform_experiment(m: usize) -> Result<MomentRow> {
    MomentRow::from_ensemble(&run_scalar(m, ScalarPrior::Uniform01)?.posterior)
}

pub fn moment_table(sizes: &[usize], prior: ScalarPrior) -> Result<MomentTable> {
    let rows = sizes
        .iter()
        .map(|&m| MomentRow::from_ensemble(&run_scalar(m, prior)?.posterior))
        .collect::<Result<_>>()?;
    Ok(MomentTable { rows })
}

/// Exact optimal map between the Gaussian prior and posterior of the scalar
/// problem: affine, sending the prior mean to the posterior mean and scaling
/// by the ratio of standard deviations.
pub fn analytic_gaussian_map(x: f64) -> f64 {
    let post = crate::inference::AnalyticPosterior::gaussian_conjugate(
        defaults::GAUSSIAN_PRIOR_MEAN,
        defaults::GAUSSIAN_PRIOR_VARIANCE,
        defaults::SCALAR_OBSERVATION,
        defaults::SCALAR_NOISE_VARIANCE,
    );
    let crate::inference::AnalyticPosterior::Gaussian { mean, variance } = post else {
        unreachable!("conjugate update of a Gaussian is Gaussian")
    };
    mean + (variance / defaults::GAUSSIAN_PRIOR_VARIANCE).sqrt()
        * (x - defaults::GAUSSIAN_PRIOR_MEAN)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub prior: f64,
    pub numerical: f64,
    pub analytic: f64,
}

pub fn transform_map_export(m: usize) -> Result<Vec<MapPoint>> {
    let run = run_scalar(m, ScalarPrior::default_gaussian())?;
    Ok((0..m)
        .map(|j| {
            let x = run.prior.states()[(0, j)];
            MapPoint {
                prior: x,
                numerical: run.posterior.states()[(0, j)],
                analytic: analytic_gaussian_map(x),
            }
        })
        .collect())
}

pub fn write_map_csv<W: Write>(points: &[MapPoint], mut out: W) -> io::Result<()> {
    writeln!(out, "x_prior,x_posterior,x_exact")?;
    for p in points {
        writeln!(out, "{},{},{}", p.prior, p.numerical, p.analytic)?;
    }
    Ok(())
}

pub fn support_pattern_export(m: usize) -> Result<SupportPattern> {
    Ok(support_pattern(
        &run_scalar(m, ScalarPrior::default_gaussian())?.coupling,
    ))
}

pub fn write_support_csv<W: Write>(pattern: &SupportPattern, mut out: W) -> io::Result<()> {
    writeln!(out, "i,j")?;
    for (i, j) in &pattern.entries {
        writeln!(out, "{i},{j}")?;
    }
    Ok(())
}

/// Lorenz-63 twin-experiment sweep over methods, ensemble sizes, inflation
/// factors and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<FilterMethod>,
    pub ensemble_sizes: Vec<usize>,
    pub inflation_grid: Vec<f64>,
    /// ETPF rejuvenation strength.
    pub rejuvenation: f64,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub dt: f64,
    pub obs_interval: f64,
    pub noise_variance: f64,
    pub spinup: f64,
    pub initial_spread: f64,
    pub lorenz: Lorenz63,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: FilterMethod::ALL.to_vec(),
            ensemble_sizes: defaults::SWEEP_SIZES.to_vec(),
            inflation_grid: defaults::INFLATION_GRID.to_vec(),
            rejuvenation: defaults::ETPF_REJUVENATION,
            steps: defaults::SWEEP_STEPS,
            seeds: (0..defaults::SWEEP_SEEDS as u64)
                .map(|s| defaults::SEED + s)
                .collect(),
            dt: defaults::LORENZ_DT,
            obs_interval: defaults::LORENZ_OBS_INTERVAL,
            noise_variance: defaults::LORENZ_NOISE_VARIANCE,
            spinup: defaults::LORENZ_SPINUP,
            initial_spread: defaults::LORENZ_INITIAL_SPREAD,
            lorenz: Lorenz63 {
                sigma: defaults::LORENZ_SIGMA,
                rho: defaults::LORENZ_RHO,
                beta: defaults::LORENZ_BETA,
            },
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.methods.is_empty() || self.ensemble_sizes.is_empty() || self.seeds.is_empty() {
            return bad("sweep needs methods, ensemble sizes and seeds");
        }
        if self.inflation_grid.is_empty() || self.inflation_grid.iter().any(|l| !(*l >= 1.0)) {
            return bad("inflation grid must be nonempty with factors >= 1");
        }
        if self.ensemble_sizes.iter().any(|&m| m < 2) {
            return bad("ensemble sizes must be at least 2");
        }
        if !(self.rejuvenation >= 0.0 && self.rejuvenation.is_finite()) {
            return bad("rejuvenation must be nonnegative");
        }
        if self.steps == 0 {
            return bad("need at least one assimilation step");
        }
        if !(self.noise_variance > 0.0) || !(self.spinup >= 0.0) {
            return bad("noise variance must be positive and spin-up nonnegative");
        }
        crate::dynamics::step_count(self.obs_interval, self.dt)?;
        crate::dynamics::step_count(self.spinup, self.dt)?;
        Ok(())
    }
}

/// Result of one (method, M, lambda, seed) filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: FilterMethod,
    pub ensemble_size: usize,
    pub inflation: f64,
    pub seed: u64,
    pub time_averaged_rmse: f64,
    pub diverged_at: Option<usize>,
}

/// Best-inflation summary for one (method, M).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: FilterMethod,
    pub ensemble_size: usize,
    /// Seed-averaged time-averaged RMSE at the chosen inflation; NaN when every
    /// inflation diverged for some seed.
    pub rmse: f64,
    pub inflation: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn row(&self, method: FilterMethod, m: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.ensemble_size == m)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "method,M,rmse,inflation,diverged")?;
        for r in &self.rows {
            let infl = r.inflation.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.method, r.ensemble_size, r.rmse, infl, r.diverged as u8
            )?;
        }
        Ok(())
    }

    pub fn write_grid_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "method,M,inflation,seed,rmse,diverged_at")?;
        for c in &self.cells {
            let at = c.diverged_at.map(|k| k.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.method, c.ensemble_size, c.inflation, c.seed, c.time_averaged_rmse, at
            )?;
        }
        Ok(())
    }
}

/// Reference state after the spin-up from (1, 1, 1).
pub fn lorenz_reference_start(config: &SweepConfig) -> Result<DVector<f64>> {
    propagate(
        &config.lorenz,
        &DVector::from_column_slice(&[1.0, 1.0, 1.0]),
        config.spinup,
        config.dt,
    )
}

/// Observation stream for one seed (shared by every method, size and inflation).
pub fn lorenz_data(config: &SweepConfig, start: &DVector<f64>, seed: u64) -> Result<SyntheticData> {
    let model = ObservationModel::identity(3, config.noise_variance, config.obs_interval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    synthesize_observations(
        &config.lorenz,
        &model,
        start,
        config.steps,
        config.dt,
        &mut rng,
    )
}

fn filter_seed(seed: u64, m: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ m as u64
}

/// Runs a single sweep cell.
pub fn lorenz_cell(
    config: &SweepConfig,
    data: &SyntheticData,
    method: FilterMethod,
    m: usize,
    inflation: f64,
    seed: u64,
) -> Result<FilterDiagnostics> {
    let filter = FilterConfig {
        ensemble_size: m,
        inflation,
        rejuvenation: config.rejuvenation,
        model: ObservationModel::identity(3, config.noise_variance, config.obs_interval)?,
        dt: config.dt,
        steps: config.steps,
        seed: filter_seed(seed, m),
        initial_spread: config.initial_spread,
    };
    run_filter(&filter, method, &config.lorenz, data)
}

/// All cells run independently (in parallel on the current rayon pool) and
/// are merged in key order. For each (method, M) the inflation with the
/// lowest seed-averaged RMSE among those that never diverged is reported.
pub fn lorenz_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let start = lorenz_reference_start(config)?;
    let data: Vec<SyntheticData> = config
        .seeds
        .par_iter()
        .map(|&s| lorenz_data(config, &start, s))
        .collect::<Result<_>>()?;

    let mut keys = Vec::new();
    for &method in &config.methods {
        for &m in &config.ensemble_sizes {
            for &lambda in &config.inflation_grid {
                for (k, &seed) in config.seeds.iter().enumerate() {
                    keys.push((method, m, lambda, k, seed));
                }
            }
        }
    }
    let cells: Vec<SweepCell> = keys
        .par_iter()
        .map(|&(method, m, lambda, k, seed)| {
            let diag = lorenz_cell(config, &data[k], method, m, lambda, seed)?;
            Ok(SweepCell {
                method,
                ensemble_size: m,
                inflation: lambda,
                seed,
                time_averaged_rmse: diag.time_averaged_rmse,
                diverged_at: diag.diverged_at,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let per_lambda = config.seeds.len();
    let per_cell = per_lambda * config.inflation_grid.len();
    for block in cells.chunks(per_cell) {
        let mut best: Option<(f64, f64)> = None;
        for group in block.chunks(per_lambda) {
            if group
                .iter()
                .any(|c| c.diverged_at.is_some() || !c.time_averaged_rmse.is_finite())
            {
                continue;
            }
            let avg = group.iter().map(|c| c.time_averaged_rmse).sum::<f64>() / per_lambda as f64;
            if best.is_none_or(|(b, _)| avg < b) {
                best = Some((avg, group[0].inflation));
            }
        }
        rows.push(SweepRow {
            method: block[0].method,
            ensemble_size: block[0].ensemble_size,
            rmse: best.map_or(f64::NAN, |b| b.0),
            inflation: best.map(|b| b.1),
            diverged: best.is_none(),
        });
    }
    Ok(SweepResult { rows, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_examples() {
        assert_eq!(
            deterministic_quantile_samples(1, ScalarPrior::Uniform01).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            deterministic_quantile_samples(2, ScalarPrior::Uniform01).unwrap(),
            vec![0.25, 0.75]
        );
        let g = deterministic_quantile_samples(
            7,
            ScalarPrior::Gaussian {
                mean: 0.0,
                variance: 1.0,
            },
        )
        .unwrap();
        assert_eq!(g[3], 0.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_abs_diff_eq!(g[0], -g[6], epsilon = 1e-14);
    }

    #[test]
    fn gaussian_quantiles_have_prior_moments() {
        let x = deterministic_quantile_samples(4000, ScalarPrior::default_gaussian()).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 2.0, epsilon = 5e-3);
    }

    #[test]
    fn analytic_map_sends_prior_mean_to_posterior_mean() {
        assert_abs_diff_eq!(analytic_gaussian_map(1.0), 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(
            analytic_gaussian_map(3.0) - analytic_gaussian_map(1.0),
            2.0 / 2f64.sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn table_csv_layout() {
        let table = MomentTable {
            rows: vec![MomentRow {
                m: 10,
                mean: 0.48377,
                variance: 0.088595,
                third: -0.00001,
                fourth: 0.0114,
            }],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "M,mean,variance,E[(X-mean)^3],E[(X-mean)^4]\n10,0.4838,0.0886,0.0000,0.0114\n"
        );
    }

    #[test]
    fn sweep_config_validation() {
        let ok = SweepConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SweepConfig {
            inflation_grid: vec![0.9],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            ensemble_sizes: vec![1],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            obs_interval: 0.125,
            ..ok
        }
        .validate()
        .is_err());
    }
}
