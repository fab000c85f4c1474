//! Model vector fields, implicit midpoint time stepping and Gaussian
//! observation models for twin experiments.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Autonomous vector field `x' = f(x)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of `f`, by central differences unless overridden.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            jac.set_column(k, &((self.eval(&xp) - self.eval(&xm)) / (2.0 * h)));
        }
        jac
    }
}

/// Lorenz-63 system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63 {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for Lorenz63 {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl Lorenz63 {
    pub fn rhs(&self, s: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = s;
        [
            self.sigma * (y - x),
            x * (self.rho - z) - y,
            x * y - self.beta * z,
        ]
    }
}

impl VectorField for Lorenz63 {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.rhs([x[0], x[1], x[2]]);
        DVector::from_column_slice(&r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -self.sigma,
                self.sigma,
                0.0,
                self.rho - x[2],
                -1.0,
                -x[0],
                x[1],
                x[0],
                -self.beta,
            ],
        )
    }
}

/// `f(x) = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub matrix: DMatrix<f64>,
}

impl LinearField {
    pub fn scalar(a: f64) -> Self {
        Self {
            matrix: DMatrix::from_element(1, 1, a),
        }
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// `f(x) = 0` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroField {
    pub dim: usize,
}

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

/// Residual target for the implicit solve (infinity norm).
pub const MIDPOINT_TOL: f64 = 1e-12;
const FIXED_POINT_CAP: usize = 100;
const NEWTON_CAP: usize = 50;

fn midpoint_residual<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    next: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let mid = (x + next) * 0.5;
    next - x - field.eval(&mid) * dt
}

/// Solves `x' = x + dt f((x + x') / 2)`.
///
/// Fixed-point iteration first; if it stalls or runs out of iterations the
/// solve continues with damped Newton from the best iterate.
pub fn implicit_midpoint_step<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !dt.is_finite() {
        return Err(Error::InvalidInput(format!(
            "time step must be finite, got {dt}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("state has non-finite entries".into()));
    }
    if dt == 0.0 {
        return Ok(x.clone());
    }
    let mut next = x + field.eval(x) * dt;
    let mut res_norm = f64::INFINITY;
    for _ in 0..FIXED_POINT_CAP {
        let candidate = x + field.eval(&((x + &next) * 0.5)) * dt;
        let step = (&candidate - &next).amax();
        next = candidate;
        let r = midpoint_residual(field, x, &next, dt).amax();
        if r <= MIDPOINT_TOL {
            return Ok(next);
        }
        if !r.is_finite() || (r >= res_norm && step > MIDPOINT_TOL) {
            break;
        }
        res_norm = r;
    }
    if next.iter().any(|v| !v.is_finite()) {
        next = x.clone();
    }
    newton_midpoint(field, x, next, dt)
}

fn newton_midpoint<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    mut next: DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let n = x.len();
    let mut res = midpoint_residual(field, x, &next, dt);
    for _ in 0..NEWTON_CAP {
        let r = res.amax();
        if r <= MIDPOINT_TOL {
            return Ok(next);
        }
        let mid = (x + &next) * 0.5;
        let jac = DMatrix::identity(n, n) - field.jacobian(&mid) * (0.5 * dt);
        let delta = jac
            .lu()
            .solve(&(-&res))
            .ok_or_else(|| Error::Numerical("singular Newton matrix in midpoint solve".into()))?;
        let mut damping = 1.0;
        loop {
            let trial = &next + &delta * damping;
            let trial_res = midpoint_residual(field, x, &trial, dt);
            if trial_res.amax() < r || damping < 1e-4 {
                next = trial;
                res = trial_res;
                break;
            }
            damping *= 0.5;
        }
    }
    if res.amax() <= MIDPOINT_TOL {
        Ok(next)
    } else {
        Err(Error::Numerical(format!(
            "implicit midpoint residual {:e} after {NEWTON_CAP} Newton steps",
            res.amax()
        )))
    }
}

/// Number of `dt` steps in `duration`, which must be an integer multiple.
pub fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need dt > 0 and duration >= 0, got dt={dt}, duration={duration}"
        )));
    }
    let n = (duration / dt).round();
    if (n * dt - duration).abs() > 1e-12 * duration.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "duration {duration} is not a multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

/// Composition of `duration / dt` midpoint steps.
pub fn propagate<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    duration: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let steps = step_count(duration, dt)?;
    let mut state = x.clone();
    for _ in 0..steps {
        state = implicit_midpoint_step(field, &state, dt)?;
    }
    Ok(state)
}

/// Linear forward map `h(x) = H x` with additive Gaussian noise `N(0, R)`.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    operator: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
    interval: f64,
}

impl ObservationModel {
    pub fn new(operator: DMatrix<f64>, noise_cov: DMatrix<f64>, interval: f64) -> Result<Self> {
        let k = operator.nrows();
        if noise_cov.nrows() != k || noise_cov.ncols() != k || k == 0 {
            return Err(Error::InvalidModel(format!(
                "noise covariance must be {k}x{k}, got {}x{}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let asym = (&noise_cov - noise_cov.transpose()).amax();
        if asym > 1e-12 * noise_cov.amax().max(1.0) {
            return Err(Error::InvalidModel(
                "noise covariance is not symmetric".into(),
            ));
        }
        if !(interval > 0.0) {
            return Err(Error::InvalidModel(format!(
                "observation interval must be positive, got {interval}"
            )));
        }
        let chol = Cholesky::new(noise_cov.clone()).ok_or_else(|| {
            Error::InvalidModel("noise covariance is not positive definite".into())
        })?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (k as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        Ok(Self {
            operator,
            noise_cov,
            chol,
            log_norm,
            interval,
        })
    }

    /// Every component observed with independent noise of variance `variance`.
    pub fn identity(dim: usize, variance: f64, interval: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(dim, dim),
            DMatrix::identity(dim, dim) * variance,
            interval,
        )
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn obs_dim(&self) -> usize {
        self.operator.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.operator.ncols()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.operator * x
    }

    /// `log pi(y | x)`.
    pub fn log_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let innovation = y - self.forward(x);
        let whitened = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&innovation)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * whitened.norm_squared()
    }

    /// Draws `h(x) + xi` with `xi ~ N(0, R)`.
    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.obs_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.forward(x) + self.chol.l() * z
    }
}

/// `(2 pi)^{-K/2} |R|^{-1/2} exp(-(y - h(x))^T R^{-1} (y - h(x)) / 2)`.
pub fn gaussian_likelihood(model: &ObservationModel, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    model.log_likelihood(y, x).exp()
}

/// Reference trajectory sampled at the observation times together with the
/// noisy observations. `reference[0]` is the initial state; `observations[k]`
/// belongs to `reference[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub reference: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub interval: f64,
}

impl SyntheticData {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.interval
    }
}

pub fn synthesize_observations<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    model: &ObservationModel,
    x0: &DVector<f64>,
    steps: usize,
    dt: f64,
    rng: &mut R,
) -> Result<SyntheticData> {
    let mut reference = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    let mut x = x0.clone();
    reference.push(x.clone());
    for _ in 0..steps {
        x = propagate(field, &x, model.interval(), dt)?;
        observations.push(model.observe(&x, rng));
        reference.push(x.clone());
    }
    Ok(SyntheticData {
        reference,
        observations,
        interval: model.interval(),
    })
}
