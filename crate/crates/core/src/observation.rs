//! From latent infections to expected and observed deaths.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::delaydist::{lagged_dot, DiscretePmf};
use crate::error::{Error, Result};
use crate::renewal::InfectionSeries;

/// Number of trailing days never used in the likelihood.
pub const DROPPED_TRAILING_DAYS: usize = 2;

/// How the negative-binomial variance grows with the mean `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionForm {
    /// `Var = d + d / φ` (size `d φ`).
    #[default]
    Linear,
    /// `Var = d + d² / φ` (size `φ`).
    Quadratic,
}

impl DispersionForm {
    /// Negative-binomial size for a given mean.
    #[inline]
    pub fn size(self, mean: f64, phi: f64) -> f64 {
        match self {
            DispersionForm::Linear => mean * phi,
            DispersionForm::Quadratic => phi,
        }
    }

    pub fn variance(self, mean: f64, phi: f64) -> f64 {
        match self {
            DispersionForm::Linear => mean + mean / phi,
            DispersionForm::Quadratic => mean + mean * mean / phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeathModelParams {
    pub ifr: f64,
    pub ifr_noise: f64,
    /// Fraction of deaths that ever get reported.
    pub psi: f64,
    pub phi: f64,
}

impl DeathModelParams {
    pub fn effective_ifr(&self) -> f64 {
        self.ifr * self.ifr_noise
    }

    pub fn validate(&self) -> Result<()> {
        let eff = self.effective_ifr();
        if !(eff > 0.0 && eff < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "effective IFR must lie in (0, 1), got {eff}"
            )));
        }
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "psi must lie in (0, 1), got {}",
                self.psi
            )));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("phi must be > 0, got {}", self.phi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedDeaths {
    pub d: Vec<f64>,
}

/// `d_t = IFR_eff · Σ_{τ<t} c_τ π_{t-τ}`; `d` on the first day is zero.
pub fn expected_deaths(
    infections: &InfectionSeries,
    pi: &DiscretePmf,
    params: &DeathModelParams,
) -> ExpectedDeaths {
    let mut d = vec![0.0; infections.len()];
    fill_expected_deaths(&infections.c, pi.as_slice(), params.effective_ifr(), &mut d);
    ExpectedDeaths { d }
}

pub(crate) fn fill_expected_deaths(c: &[f64], pi: &[f64], ifr: f64, d: &mut [f64]) {
    for t in 0..c.len() {
        d[t] = ifr * lagged_dot(c, pi, t);
    }
}

/// `ψ · P_t · d_t` for every day, with `P_t` the cumulative reported proportion.
pub fn apply_reporting_factors(d: &ExpectedDeaths, psi: f64, reported: &[f64]) -> Result<ExpectedDeaths> {
    if reported.len() != d.d.len() {
        return Err(Error::Misaligned(format!(
            "{} reporting factors for {} days",
            reported.len(),
            d.d.len()
        )));
    }
    Ok(ExpectedDeaths {
        d: d.d.iter().zip(reported).map(|(d, p)| psi * p * d).collect(),
    })
}

/// `ln Γ(r + y) - ln Γ(r)`.
/// Below this count rising factorials are summed term by term.
const RISING_LOOP_MAX: u64 = 8;

#[inline]
fn ln_rising(r: f64, y: u64) -> f64 {
    if y < RISING_LOOP_MAX {
        let mut acc = 0.0;
        for i in 0..y {
            acc += (r + i as f64).ln();
        }
        acc
    } else {
        ln_gamma(r + y as f64) - ln_gamma(r)
    }
}

/// Log-pmf of a negative binomial with mean `mean` and dispersion `phi`.
///
/// A zero mean puts all mass on zero.
pub fn negbin_logpmf(observed: u64, mean: f64, phi: f64, form: DispersionForm) -> f64 {
    if mean == 0.0 {
        return if observed == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if !(mean > 0.0 && phi > 0.0) || mean.is_nan() || phi.is_nan() {
        return f64::NAN;
    }
    let r = form.size(mean, phi);
    negbin_logpmf_size(observed, mean, r) - ln_gamma(observed as f64 + 1.0)
}

/// Log-pmf without the `-ln y!` term.
#[inline]
fn negbin_logpmf_size(y: u64, mean: f64, r: f64) -> f64 {
    let yf = y as f64;
    // r ln(r / (r + μ)) = -r ln(1 + μ / r)
    let log_r_part = -r * (mean / r).ln_1p();
    let log_mu_part = if y == 0 {
        0.0
    } else {
        yf * (mean.ln() - (r + mean).ln())
    };
    ln_rising(r, y) + log_r_part + log_mu_part
}

/// Sum of negative-binomial log-pmfs over `fit_start..len-2`.
///
/// Days outside that window are never read, so they may hold anything.
pub fn state_loglikelihood(
    observed: &[u32],
    d_obs: &ExpectedDeaths,
    phi: f64,
    form: DispersionForm,
    fit_start: usize,
) -> Result<f64> {
    if observed.len() != d_obs.d.len() {
        return Err(Error::Misaligned(format!(
            "{} observed days vs {} expected days",
            observed.len(),
            d_obs.d.len()
        )));
    }
    let end = observed.len().saturating_sub(DROPPED_TRAILING_DAYS);
    if fit_start > end {
        return Err(Error::Misaligned(format!(
            "fit start {fit_start} is past the last fitted day {end}"
        )));
    }
    let mut total = 0.0;
    for t in fit_start..end {
        total += negbin_logpmf(observed[t] as u64, d_obs.d[t], phi, form);
    }
    Ok(total)
}

/// Likelihood core used by the posterior, with precomputed `ln y!` terms.
pub(crate) fn window_loglikelihood(
    observed: &[u32],
    ln_factorials: &[f64],
    d_obs: &[f64],
    phi: f64,
    form: DispersionForm,
    range: std::ops::Range<usize>,
) -> f64 {
    let mut total = 0.0;
    for t in range {
        let y = observed[t] as u64;
        let mean = d_obs[t];
        if mean <= 0.0 {
            if y > 0 {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        total += negbin_logpmf_size(y, mean, form.size(mean, phi)) - ln_factorials[t];
    }
    total
}

/// `ψ(r + y) - ψ(r)` for the digamma function `ψ`.
#[inline]
fn digamma_rising(r: f64, y: u64) -> f64 {
    if y < RISING_LOOP_MAX {
        let mut acc = 0.0;
        for i in 0..y {
            acc += 1.0 / (r + i as f64);
        }
        acc
    } else {
        digamma(r + y as f64) - digamma(r)
    }
}

/// Log-pmf without the `-ln y!` term, with its partial derivatives in the
/// mean and in `phi`.
#[inline]
pub(crate) fn negbin_logpmf_grad(y: u64, mean: f64, phi: f64, form: DispersionForm) -> (f64, f64, f64) {
    if mean <= 0.0 {
        return if y == 0 { (0.0, 0.0, 0.0) } else { (f64::NEG_INFINITY, 0.0, 0.0) };
    }
    let r = form.size(mean, phi);
    let yf = y as f64;
    let value = negbin_logpmf_size(y, mean, r);
    let d_mean = yf / mean - (r + yf) / (r + mean);
    let d_size = digamma_rising(r, y) - (mean / r).ln_1p() + (mean - yf) / (r + mean);
    match form {
        DispersionForm::Linear => (value, d_mean + phi * d_size, mean * d_size),
        DispersionForm::Quadratic => (value, d_mean, d_size),
    }
}

/// Draws a negative binomial count with the given mean and dispersion.
pub fn sample_negbin<R: rand::Rng + ?Sized>(rng: &mut R, mean: f64, phi: f64, form: DispersionForm) -> u64 {
    use rand_distr::{Distribution, Gamma, Poisson};
    if mean <= 0.0 {
        return 0;
    }
    let r = form.size(mean, phi);
    let lambda = Gamma::new(r, mean / r).expect("valid gamma").sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("valid poisson").sample(rng) as u64
}
