//! Sequential assimilation: the ensemble transform particle filter and an
//! ensemble square root filter baseline, both with multiplicative inflation.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, step_count, ObservationModel, SyntheticData, VectorField};
use crate::ensemble_transform::{et_transform, Ensemble};
use crate::error::{Error, Result};
use crate::inference::importance_weights_from_log;
use crate::transport::{
    cost_matrix, solve_transport, transition_from_coupling, Coupling, MarginalPair,
};

/// Per-step RMSE above this (or any non-finite state) marks the run as diverged.
pub const DIVERGENCE_RMSE: f64 = 100.0;
/// Leading fraction of steps excluded from the time-averaged RMSE.
pub const BURN_IN_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Etpf,
    Esrf,
}

impl FilterMethod {
    pub const ALL: [FilterMethod; 2] = [FilterMethod::Etpf, FilterMethod::Esrf];
}

impl fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMethod::Etpf => "etpf",
            FilterMethod::Esrf => "esrf",
        })
    }
}

impl FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "etpf" | "et" => Ok(FilterMethod::Etpf),
            "esrf" => Ok(FilterMethod::Esrf),
            other => Err(Error::InvalidInput(format!(
                "unknown filter method '{other}'"
            ))),
        }
    }
}

/// Intermediate products of one ensemble transform analysis.
#[derive(Debug, Clone)]
pub struct EtpfStep {
    pub analysis: Ensemble,
    pub weights: DVector<f64>,
    pub coupling: Coupling,
}

/// Likelihood weights, optimal coupling against the forecast weights, and
/// the deterministic transform `X^a = X^f P`.
pub fn etpf_analysis_step(
    forecast: &Ensemble,
    observation: &DVector<f64>,
    model: &ObservationModel,
) -> Result<EtpfStep> {
    check_shapes(forecast, observation, model)?;
    let log_lik = DVector::from_fn(forecast.members(), |j, _| {
        model.log_likelihood(observation, &forecast.member(j))
    });
    let prior_weights = forecast.weights();
    let weights = importance_weights_from_log(&log_lik, &prior_weights)?;
    let cost = cost_matrix(forecast)?;
    let marginals = MarginalPair::new(weights.clone(), prior_weights.clone())?;
    let coupling = solve_transport(&cost, &marginals)?;
    let transition = transition_from_coupling(&coupling, &prior_weights)?;
    let analysis = et_transform(forecast, &transition)?;
    Ok(EtpfStep {
        analysis,
        weights,
        coupling,
    })
}

pub fn etpf_analysis(
    forecast: &Ensemble,
    observation: &DVector<f64>,
    model: &ObservationModel,
) -> Result<Ensemble> {
    etpf_analysis_step(forecast, observation, model).map(|s| s.analysis)
}

fn check_shapes(
    forecast: &Ensemble,
    observation: &DVector<f64>,
    model: &ObservationModel,
) -> Result<()> {
    if forecast.dim() != model.state_dim() || observation.len() != model.obs_dim() {
        return Err(Error::InvalidInput(format!(
            "ensemble dim {} / observation dim {} do not match model {}x{}",
            forecast.dim(),
            observation.len(),
            model.obs_dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

/// Deterministic square root update with the symmetric transform
/// `T = (I + (HA)^T R^{-1} (HA) / (M-1))^{-1/2}` applied to the anomalies `A`.
pub fn esrf_analysis(
    forecast: &Ensemble,
    observation: &DVector<f64>,
    model: &ObservationModel,
) -> Result<Ensemble> {
    check_shapes(forecast, observation, model)?;
    let m = forecast.members();
    if m < 2 {
        return Err(Error::InvalidInput(
            "square root filter needs at least two members".into(),
        ));
    }
    let x = forecast.states();
    let mean = x.column_mean();
    let anomalies = DMatrix::from_fn(x.nrows(), m, |i, j| x[(i, j)] - mean[i]);
    let h = model.operator();
    let r = model.noise_cov();
    let scale = 1.0 / (m as f64 - 1.0);

    let obs_anom = h * &anomalies;
    let innovation_cov = &obs_anom * obs_anom.transpose() * scale + r;
    let chol_s = Cholesky::new(innovation_cov)
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    let innovation = observation - h * &mean;
    // K d = A (HA)^T S^{-1} d / (M-1)
    let mean_a = &mean + &anomalies * (obs_anom.transpose() * chol_s.solve(&innovation)) * scale;

    let chol_r = Cholesky::new(r.clone())
        .ok_or_else(|| Error::Numerical("noise covariance is not positive definite".into()))?;
    let c = obs_anom.transpose() * chol_r.solve(&obs_anom) * scale;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / (1.0 + l.max(0.0)).sqrt());
    let transform =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();

    let mut states = anomalies * transform;
    for mut col in states.column_iter_mut() {
        col += &mean_a;
    }
    Ensemble::new(states)
}

/// `x_i -> mean + factor (x_i - mean)`.
pub fn inflate(ensemble: &Ensemble, factor: f64) -> Result<Ensemble> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "inflation factor must be >= 1, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(ensemble.clone());
    }
    let mean = ensemble.mean();
    let mut states = ensemble.states().clone();
    for mut col in states.column_iter_mut() {
        let spread = (&col - &mean) * factor;
        col.copy_from(&(&mean + spread));
    }
    ensemble.replace_states(states)
}

/// Reference state plus i.i.d. `N(0, spread^2)` perturbations.
pub fn initial_ensemble<R: Rng + ?Sized>(
    center: &DVector<f64>,
    members: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    let n = center.len();
    let mut states = DMatrix::zeros(n, members);
    for j in 0..members {
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            states[(i, j)] = center[i] + spread * z;
        }
    }
    Ensemble::new(states)
}

/// Adds `tau * A^f xi / sqrt(M - 1)` to every analysis member, where `A^f` holds
/// the forecast anomalies and `xi` is an `M x M` matrix of standard normals.
pub fn rejuvenate<R: Rng + ?Sized>(
    analysis: &Ensemble,
    forecast: &Ensemble,
    tau: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "rejuvenation must be >= 0, got {tau}"
        )));
    }
    let m = forecast.members();
    if analysis.members() != m || analysis.dim() != forecast.dim() {
        return Err(Error::InvalidInput(
            "analysis and forecast shapes differ".into(),
        ));
    }
    if tau == 0.0 {
        return Ok(analysis.clone());
    }
    let mean = forecast.mean();
    let mut anomalies = forecast.states().clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let xi = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = tau / ((m - 1) as f64).sqrt();
    analysis.replace_states(analysis.states() + anomalies * xi * scale)
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub ensemble_size: usize,
    pub inflation: f64,
    /// Rejuvenation strength applied after each ETPF analysis; ignored by the ESRF.
    pub rejuvenation: f64,
    pub model: ObservationModel,
    /// Integrator step; the observation interval must be a multiple of it.
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    /// Standard deviation of the initial perturbations.
    pub initial_spread: f64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::InvalidInput(
                "ensemble size must be at least 2".into(),
            ));
        }
        if !(self.inflation >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "inflation must be >= 1, got {}",
                self.inflation
            )));
        }
        if !(self.rejuvenation >= 0.0 && self.rejuvenation.is_finite()) {
            return Err(Error::InvalidInput(
                "rejuvenation must be nonnegative".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput(
                "need at least one assimilation step".into(),
            ));
        }
        if !(self.initial_spread >= 0.0) {
            return Err(Error::InvalidInput(
                "initial spread must be nonnegative".into(),
            ));
        }
        step_count(self.model.interval(), self.dt)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiagnostics {
    pub method: FilterMethod,
    pub inflation: f64,
    /// Analysis mean after step `k + 1`.
    pub means: Vec<DVector<f64>>,
    pub rmse: Vec<f64>,
    /// Mean RMSE after discarding the first `burn_in` steps; NaN if nothing is left.
    pub time_averaged_rmse: f64,
    pub burn_in: usize,
    /// 1-based assimilation step at which the run diverged.
    pub diverged_at: Option<usize>,
    pub interval: f64,
}

impl FilterDiagnostics {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// `step,time,rmse,diverged` rows, then a summary row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,time,rmse,diverged")?;
        for (k, r) in self.rmse.iter().enumerate() {
            let step = k + 1;
            let flag = self.diverged_at == Some(step);
            writeln!(
                out,
                "{step},{},{r},{}",
                step as f64 * self.interval,
                flag as u8
            )?;
        }
        if let Some(step) = self.diverged_at {
            if step > self.rmse.len() {
                writeln!(out, "{step},{},NaN,1", step as f64 * self.interval)?;
            }
        }
        writeln!(
            out,
            "# summary,method={},inflation={},time_averaged_rmse={},diverged={}",
            self.method,
            self.inflation,
            self.time_averaged_rmse,
            self.diverged() as u8
        )
    }
}

/// RMSE per component: `sqrt(|a - b|^2 / N)`.
pub fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

/// Alternates propagation over the observation interval, inflation and the
/// chosen analysis for every observation in `data`.
pub fn run_filter<F: VectorField + ?Sized>(
    config: &FilterConfig,
    method: FilterMethod,
    field: &F,
    data: &SyntheticData,
) -> Result<FilterDiagnostics> {
    config.validate()?;
    let steps = config.steps.min(data.steps());
    if steps == 0 {
        return Err(Error::InvalidInput("no observations to assimilate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ensemble = initial_ensemble(
        &data.reference[0],
        config.ensemble_size,
        config.initial_spread,
        &mut rng,
    )?;
    let interval = config.model.interval();
    let mut diag = FilterDiagnostics {
        method,
        inflation: config.inflation,
        means: Vec::with_capacity(steps),
        rmse: Vec::with_capacity(steps),
        time_averaged_rmse: f64::NAN,
        burn_in: (steps as f64 * BURN_IN_FRACTION).floor() as usize,
        diverged_at: None,
        interval,
    };
    for k in 0..steps {
        let step = |rng: &mut ChaCha8Rng| -> Result<(Ensemble, Ensemble)> {
            let mut forecast = DMatrix::zeros(ensemble.dim(), ensemble.members());
            for j in 0..ensemble.members() {
                let x = propagate(field, &ensemble.member(j), interval, config.dt)?;
                forecast.set_column(j, &x);
            }
            let forecast = inflate(&Ensemble::new(forecast)?, config.inflation)?;
            let y = &data.observations[k];
            match method {
                FilterMethod::Etpf => {
                    let analysis = etpf_analysis(&forecast, y, &config.model)?;
                    let next = rejuvenate(&analysis, &forecast, config.rejuvenation, rng)?;
                    Ok((analysis, next))
                }
                FilterMethod::Esrf => {
                    let analysis = esrf_analysis(&forecast, y, &config.model)?;
                    Ok((analysis.clone(), analysis))
                }
            }
        };
        match step(&mut rng) {
            Ok((analysis, next)) => {
                let mean = analysis.mean();
                let err = rmse(&mean, &data.reference[k + 1]);
                diag.means.push(mean);
                diag.rmse.push(err);
                ensemble = next;
                if !(err <= DIVERGENCE_RMSE) {
                    diag.diverged_at = Some(k + 1);
                    break;
                }
            }
            Err(_) => {
                diag.diverged_at = Some(k + 1);
                break;
            }
        }
    }
    let kept = diag.rmse.iter().skip(diag.burn_in);
    let count = kept.clone().count();
    if count > 0 {
        diag.time_averaged_rmse = kept.sum::<f64>() / count as f64;
    }
    Ok(diag)
}
