//! Numeric defaults shared by the library drivers and the CLI.

/// Observed value in both scalar problems.
pub const SCALAR_OBSERVATION: f64 = 0.1;
/// Likelihood `exp(-(y - x)^2 / 4)` has noise variance 2.
pub const SCALAR_NOISE_VARIANCE: f64 = 2.0;
pub const GAUSSIAN_PRIOR_MEAN: f64 = 1.0;
pub const GAUSSIAN_PRIOR_VARIANCE: f64 = 2.0;
/// Ensemble sizes of the moment tables.
pub const TABLE_SIZES: [usize; 3] = [10, 40, 100];
/// Ensemble size of the transform-map export.
pub const MAP_SIZE: usize = 10;
/// Ensemble size of the coupling-support export.
pub const SUPPORT_SIZE: usize = 40;

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;
pub const LORENZ_DT: f64 = 0.01;
pub const LORENZ_OBS_INTERVAL: f64 = 0.12;
pub const LORENZ_NOISE_VARIANCE: f64 = 8.0;
/// Time units integrated from (1, 1, 1) before the first observation.
pub const LORENZ_SPINUP: f64 = 1000.0;
pub const LORENZ_INITIAL_SPREAD: f64 = 1.0;
pub const SWEEP_SIZES: [usize; 4] = [10, 20, 40, 80];
pub const SWEEP_STEPS: usize = 500;
/// Assimilation steps of the full-length run.
pub const SWEEP_STEPS_FULL: usize = 2000;
pub const SWEEP_SEEDS: usize = 3;
pub const INFLATION_GRID: [f64; 8] = [1.0, 1.02, 1.05, 1.08, 1.12, 1.2, 1.3, 1.5];
/// Strength of the anomaly noise added after each ETPF analysis.
pub const ETPF_REJUVENATION: f64 = 0.3;
pub const SEED: u64 = 20130;
