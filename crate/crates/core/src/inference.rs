//! Importance weights, weighted moment estimators and the closed-form
//! posteriors of the two scalar test problems.

use nalgebra::{DMatrix, DVector};

use crate::ensemble_transform::{validate_probability, Ensemble};
use crate::error::{Error, Result};
use crate::quadrature;

/// `w_i = l_i w_i^f / sum_k l_k w_k^f`.
pub fn importance_weights(
    likelihoods: &DVector<f64>,
    prior_weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    if likelihoods.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidInput(
            "likelihoods must be finite and nonnegative".into(),
        ));
    }
    validate_probability(prior_weights, likelihoods.len())?;
    let unnormalized = likelihoods.component_mul(prior_weights);
    let total = unnormalized.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(unnormalized / total)
}

/// Same as [`importance_weights`] from log-likelihoods, shifted by their
/// maximum so that far-off members do not underflow every weight to zero.
pub fn importance_weights_from_log(
    log_likelihoods: &DVector<f64>,
    prior_weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    if log_likelihoods
        .iter()
        .any(|l| l.is_nan() || *l == f64::INFINITY)
    {
        return Err(Error::InvalidInput("log-likelihoods must be < +inf".into()));
    }
    let shift = log_likelihoods
        .iter()
        .zip(prior_weights.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let likelihoods = log_likelihoods.map(|l| (l - shift).exp());
    importance_weights(&likelihoods, prior_weights)
}

/// Sample values (columns) with a probability vector of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    values: DMatrix<f64>,
    weights: DVector<f64>,
}

impl WeightedSamples {
    pub fn new(values: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidInput("no samples".into()));
        }
        validate_probability(&weights, values.ncols())?;
        Ok(Self { values, weights })
    }

    pub fn uniform(values: DMatrix<f64>) -> Result<Self> {
        let m = values.ncols();
        Self::new(
            values,
            DVector::from_element(m.max(1), 1.0 / m.max(1) as f64),
        )
    }

    pub fn from_ensemble(ensemble: &Ensemble) -> Self {
        Self {
            values: ensemble.states().clone(),
            weights: ensemble.weights(),
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
}

/// Per-component moments up to `order`: entry 0 is the weighted mean and
/// entry `r - 1` (for `r >= 2`) the central moment `sum_i w_i (x_i - mean)^r`.
pub fn weighted_moments(samples: &WeightedSamples, order: usize) -> Result<Vec<DVector<f64>>> {
    if !(1..=4).contains(&order) {
        return Err(Error::InvalidInput(format!(
            "moment order must be in 1..=4, got {order}"
        )));
    }
    let x = &samples.values;
    let w = &samples.weights;
    let mean = x * w;
    let mut out = vec![mean.clone()];
    for r in 2..=order as i32 {
        let central = DVector::from_fn(x.nrows(), |k, _| {
            x.row(k)
                .iter()
                .zip(w.iter())
                .map(|(&xi, &wi)| wi * (xi - mean[k]).powi(r))
                .sum()
        });
        out.push(central);
    }
    Ok(out)
}

/// Mean, variance, third and fourth central moments of a scalar law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMoments {
    pub mean: f64,
    pub variance: f64,
    pub third: f64,
    pub fourth: f64,
}

/// Closed-form posteriors for the scalar test problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticPosterior {
    Gaussian {
        mean: f64,
        variance: f64,
    },
    /// Density proportional to `exp(-(x - center)^2 / (2 variance))` on `[lower, upper]`.
    TruncatedGaussian {
        lower: f64,
        upper: f64,
        center: f64,
        variance: f64,
    },
}

const QUAD_TOL: f64 = 1e-10;

impl AnalyticPosterior {
    /// Gaussian prior `N(prior_mean, prior_variance)` updated with a scalar
    /// observation `y` of noise variance `noise_variance`.
    pub fn gaussian_conjugate(
        prior_mean: f64,
        prior_variance: f64,
        y: f64,
        noise_variance: f64,
    ) -> Self {
        let gain = prior_variance / (prior_variance + noise_variance);
        AnalyticPosterior::Gaussian {
            mean: prior_mean + gain * (y - prior_mean),
            variance: (1.0 - gain) * prior_variance,
        }
    }

    /// Uniform prior on `[lower, upper]` with a Gaussian likelihood centred at `y`.
    pub fn uniform_prior(lower: f64, upper: f64, y: f64, noise_variance: f64) -> Self {
        AnalyticPosterior::TruncatedGaussian {
            lower,
            upper,
            center: y,
            variance: noise_variance,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AnalyticPosterior::Gaussian { mean, variance } => mean.is_finite() && variance > 0.0,
            AnalyticPosterior::TruncatedGaussian {
                lower,
                upper,
                center,
                variance,
            } => {
                lower.is_finite()
                    && upper.is_finite()
                    && lower < upper
                    && center.is_finite()
                    && variance > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid posterior {self:?}")))
        }
    }

    /// Integral of the unnormalized kernel; for the Gaussian this is `sqrt(2 pi variance)`.
    pub fn normalization(&self) -> Result<f64> {
        self.validate()?;
        match *self {
            AnalyticPosterior::Gaussian { variance, .. } => {
                Ok((2.0 * std::f64::consts::PI * variance).sqrt())
            }
            AnalyticPosterior::TruncatedGaussian { lower, upper, .. } => {
                quadrature::integrate(|x| self.kernel(x), lower, upper, QUAD_TOL)
            }
        }
    }

    fn kernel(&self, x: f64) -> f64 {
        match *self {
            AnalyticPosterior::Gaussian { mean, variance } => {
                (-(x - mean).powi(2) / (2.0 * variance)).exp()
            }
            AnalyticPosterior::TruncatedGaussian {
                lower,
                upper,
                center,
                variance,
            } => {
                if x < lower || x > upper {
                    0.0
                } else {
                    (-(x - center).powi(2) / (2.0 * variance)).exp()
                }
            }
        }
    }

    pub fn density(&self, x: f64) -> Result<f64> {
        Ok(self.kernel(x) / self.normalization()?)
    }

    /// First four moments (mean and central moments of order 2 to 4).
    pub fn moments(&self) -> Result<ScalarMoments> {
        self.validate()?;
        match *self {
            AnalyticPosterior::Gaussian { mean, variance } => Ok(ScalarMoments {
                mean,
                variance,
                third: 0.0,
                fourth: 3.0 * variance * variance,
            }),
            AnalyticPosterior::TruncatedGaussian { lower, upper, .. } => {
                let z = self.normalization()?;
                let raw = |r: i32| {
                    quadrature::integrate(
                        |x| x.powi(r) * self.kernel(x) / z,
                        lower,
                        upper,
                        QUAD_TOL,
                    )
                };
                let mean = raw(1)?;
                let central = |r: i32| {
                    quadrature::integrate(
                        |x| (x - mean).powi(r) * self.kernel(x) / z,
                        lower,
                        upper,
                        QUAD_TOL,
                    )
                };
                Ok(ScalarMoments {
                    mean,
                    variance: central(2)?,
                    third: central(3)?,
                    fourth: central(4)?,
                })
            }
        }
    }
}

/// Convenience wrapper matching the operation name used in the CLI docs.
pub fn analytic_posterior_moments(posterior: &AnalyticPosterior) -> Result<ScalarMoments> {
    posterior.moments()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    #[test]
    fn weight_examples() {
        let u = dvector![0.5, 0.5];
        assert_abs_diff_eq!(importance_weights(&dvector![3.0, 3.0], &u).unwrap(), u);
        assert_abs_diff_eq!(
            importance_weights(&dvector![2.0, 1.0], &u).unwrap(),
            dvector![2.0 / 3.0, 1.0 / 3.0],
            epsilon = 1e-15
        );
        let prior = dvector![0.9, 0.1];
        assert_abs_diff_eq!(
            importance_weights(&dvector![1.0, 1.0], &prior).unwrap(),
            prior,
            epsilon = 1e-15
        );
    }

    #[test]
    fn vanishing_likelihoods() {
        let err = importance_weights(&dvector![0.0, 0.0], &dvector![0.5, 0.5]).unwrap_err();
        assert_eq!(err, Error::DegenerateWeights);
        // Positive likelihood only on a zero-weight member is still degenerate.
        let err = importance_weights(&dvector![0.0, 1.0], &dvector![1.0, 0.0]).unwrap_err();
        assert_eq!(err, Error::DegenerateWeights);
    }

    #[test]
    fn log_weights_survive_underflow() {
        let w =
            importance_weights_from_log(&dvector![-2000.0, -2001.0], &dvector![0.5, 0.5]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(w[0], e / (e + 1.0), epsilon = 1e-14);
    }

    #[test]
    fn moment_examples() {
        let s = WeightedSamples::uniform(dmatrix![0.0, 1.0]).unwrap();
        let m = weighted_moments(&s, 2).unwrap();
        assert_eq!(m[0][0], 0.5);
        assert_eq!(m[1][0], 0.25);

        let single = WeightedSamples::uniform(dmatrix![4.2; -1.0]).unwrap();
        let m = weighted_moments(&single, 4).unwrap();
        assert_eq!(m[0], dvector![4.2, -1.0]);
        for higher in &m[1..] {
            assert_eq!(higher, &dvector![0.0, 0.0]);
        }

        let sym = WeightedSamples::uniform(dmatrix![-1.7, 1.7]).unwrap();
        assert_eq!(weighted_moments(&sym, 3).unwrap()[2][0], 0.0);
    }

    #[test]
    fn moment_order_bounds() {
        let s = WeightedSamples::uniform(dmatrix![0.0, 1.0]).unwrap();
        assert!(weighted_moments(&s, 0).is_err());
        assert!(weighted_moments(&s, 5).is_err());
    }

    #[test]
    fn gaussian_posterior_of_scalar_problem() {
        let post = AnalyticPosterior::gaussian_conjugate(1.0, 2.0, 0.1, 2.0);
        let m = post.moments().unwrap();
        assert_abs_diff_eq!(m.mean, 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(m.variance, 1.0, epsilon = 1e-15);
        assert_eq!(m.third, 0.0);
        assert_abs_diff_eq!(m.fourth, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn truncated_posterior_of_uniform_problem() {
        let post = AnalyticPosterior::uniform_prior(0.0, 1.0, 0.1, 2.0);
        assert_abs_diff_eq!(post.normalization().unwrap(), 0.9427, epsilon = 1e-4);
        let m = post.moments().unwrap();
        assert_abs_diff_eq!(m.mean, 0.4836, epsilon = 5e-5);
        assert_abs_diff_eq!(m.variance, 0.0818, epsilon = 5e-5);
        assert_abs_diff_eq!(m.third, 0.0016, epsilon = 5e-5);
        assert_abs_diff_eq!(m.fourth, 0.0122, epsilon = 5e-5);
    }

    #[test]
    fn densities_integrate_to_one() {
        let trunc = AnalyticPosterior::uniform_prior(0.0, 1.0, 0.1, 2.0);
        let mass = quadrature::integrate(|x| trunc.density(x).unwrap(), 0.0, 1.0, 1e-10).unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-8);
        let gauss = AnalyticPosterior::gaussian_conjugate(1.0, 2.0, 0.1, 2.0);
        let mass =
            quadrature::integrate(|x| gauss.density(x).unwrap(), -15.0, 15.0, 1e-10).unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn invalid_posteriors() {
        let bad = AnalyticPosterior::TruncatedGaussian {
            lower: 1.0,
            upper: 0.0,
            center: 0.0,
            variance: 1.0,
        };
        assert!(bad.moments().is_err());
        assert!(AnalyticPosterior::Gaussian {
            mean: 0.0,
            variance: 0.0
        }
        .moments()
        .is_err());
    }

    proptest! {
        #[test]
        fn weights_ignore_likelihood_scale(
            l in prop::collection::vec(0.01f64..10.0, 1..20),
            c in 1e-3f64..1e3,
        ) {
            let m = l.len();
            let prior = DVector::from_element(m, 1.0 / m as f64);
            let lv = DVector::from_vec(l);
            let a = importance_weights(&lv, &prior).unwrap();
            let b = importance_weights(&(&lv * c), &prior).unwrap();
            prop_assert!((a - b).amax() <= 1e-14);
        }

        #[test]
        fn uniform_weights_match_sample_moments(x in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let m = x.len();
            let s = WeightedSamples::uniform(DMatrix::from_row_slice(1, m, &x)).unwrap();
            let got = weighted_moments(&s, 4).unwrap();
            let mean = x.iter().sum::<f64>() / m as f64;
            prop_assert!((got[0][0] - mean).abs() <= 1e-14);
            for r in 2..=4 {
                let c = x.iter().map(|v| (v - mean).powi(r as i32)).sum::<f64>() / m as f64;
                prop_assert!((got[r - 1][0] - c).abs() <= 1e-14 * (1.0 + c.abs()) * 10.0);
            }
        }
    }
}
