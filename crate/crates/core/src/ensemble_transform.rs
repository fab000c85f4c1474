//! Ensembles and the two ways of pushing them through a transition matrix:
//! the deterministic ensemble transform `X^a = X^f P` and categorical
//! resampling along the columns of `P`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::transport::TransitionMatrix;

/// `M` state vectors of dimension `N`, stored as the columns of an `N x M`
/// matrix, with optional member weights (absent means uniform).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
    weights: Option<DVector<f64>>,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.ncols() == 0 || states.nrows() == 0 {
            return Err(Error::InvalidInput(
                "ensemble must have members and state components".into(),
            ));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "ensemble has non-finite entries".into(),
            ));
        }
        Ok(Self {
            states,
            weights: None,
        })
    }

    pub fn with_weights(states: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        let mut ens = Self::new(states)?;
        validate_probability(&weights, ens.members())?;
        ens.weights = Some(weights);
        Ok(ens)
    }

    /// One-dimensional ensemble from scalar members.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn into_states(self) -> DMatrix<f64> {
        self.states
    }

    pub fn members(&self) -> usize {
        self.states.ncols()
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Member weights; uniform when none were attached.
    pub fn weights(&self) -> DVector<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => DVector::from_element(self.members(), 1.0 / self.members() as f64),
        }
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.states.column(j).into_owned()
    }

    /// Weighted ensemble mean.
    pub fn mean(&self) -> DVector<f64> {
        &self.states * self.weights()
    }

    pub(crate) fn replace_states(&self, states: DMatrix<f64>) -> Result<Self> {
        let mut ens = Self::new(states)?;
        ens.weights = self.weights.clone();
        Ok(ens)
    }
}

/// Neumaier-compensated sum.
pub(crate) fn stable_sum<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for &x in values {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

pub(crate) fn validate_probability(w: &DVector<f64>, len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::InvalidInput(format!(
            "weight vector has length {}, expected {len}",
            w.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let s = stable_sum(w.iter());
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

fn check_sizes(prior: &Ensemble, transition: &TransitionMatrix) -> Result<()> {
    if transition.size() != prior.members() {
        return Err(Error::InvalidInput(format!(
            "transition is {0}x{0} but ensemble has {1} members",
            transition.size(),
            prior.members()
        )));
    }
    Ok(())
}

/// Deterministic transform `x_j^a = sum_i p_ij x_i^f`. The output keeps the
/// prior's weights.
pub fn et_transform(prior: &Ensemble, transition: &TransitionMatrix) -> Result<Ensemble> {
    check_sizes(prior, transition)?;
    prior.replace_states(prior.states() * transition.matrix())
}

/// Draws member `j` of the output from the categorical law in column `j` of
/// `P`, one uniform variate per column in column order (inverse CDF).
pub fn ot_resample<R: Rng + ?Sized>(
    prior: &Ensemble,
    transition: &TransitionMatrix,
    rng: &mut R,
) -> Result<Ensemble> {
    check_sizes(prior, transition)?;
    let p = transition.matrix();
    let m = prior.members();
    let mut out = DMatrix::zeros(prior.dim(), m);
    for j in 0..m {
        let column = p.column(j);
        let total = column.sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "transition column {j} sums to {total}"
            )));
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &pij) in column.iter().enumerate() {
            if pij <= 0.0 {
                continue;
            }
            acc += pij;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        let i = pick.expect("column with unit mass has a positive entry");
        out.set_column(j, &prior.states().column(i));
    }
    prior.replace_states(out)
}

/// `| sum_j omega_j x_j^a - sum_i w_i^a x_i^f |` with `omega` the prior's
/// weights. Zero (up to rounding) for any output of [`et_transform`] built
/// from a coupling with row marginal `w^a`.
pub fn mean_identity_check(
    prior: &Ensemble,
    posterior: &Ensemble,
    posterior_weights: &DVector<f64>,
) -> Result<f64> {
    if prior.dim() != posterior.dim()
        || prior.members() != posterior.members()
        || posterior_weights.len() != prior.members()
    {
        return Err(Error::InvalidInput(
            "prior and posterior shapes differ".into(),
        ));
    }
    let transformed_mean = posterior.states() * prior.weights();
    let weighted_prior_mean = prior.states() * posterior_weights;
    Ok((transformed_mean - weighted_prior_mean).norm())
}
