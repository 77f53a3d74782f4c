//! Hierarchical priors, the parameter vector and its unconstrained
//! coordinates.
//!
//! Sampler coordinates: positives are log-transformed, `psi` is
//! logit-transformed and reals stay as they are, except the per-state
//! effects `beta` and `gamma`, which are stored divided by their pooled
//! scales (`sigma_beta`, `sigma_gamma`). That non-centered form removes the
//! funnel between a pooled scale and its effects.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::renewal::{RtParams, N_COVARIATES};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior hyperparameters. Defaults are the model's stated priors plus
/// weakly informative choices for the covariate effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    /// Mean of the per-state `r0 ~ N(r0_mean, k)`.
    pub r0_mean: f64,
    /// `k ~ N⁺(0, r0_scale_sd)`.
    pub r0_scale_sd: f64,
    /// `alpha_k ~ N(0, alpha_sd)`.
    pub alpha_sd: f64,
    /// `sigma_beta ~ N⁺(0, beta_scale_sd)`, `beta_{k,m} ~ N(0, sigma_beta)`.
    pub beta_scale_sd: f64,
    /// `sigma_gamma ~ N⁺(0, gamma_scale_sd)`, `gamma_{k,m} ~ N(0, sigma_gamma)`.
    pub gamma_scale_sd: f64,
    /// Seeded infections per day `~ Exponential(mean = seed_mean)`.
    pub seed_mean: f64,
    /// `psi ~ Beta(psi_a, psi_b)`.
    pub psi_a: f64,
    pub psi_b: f64,
    /// `phi ~ N⁺(0, phi_sd)`.
    pub phi_sd: f64,
    /// `ifr_noise ~ N(ifr_noise_mean, ifr_noise_sd)` truncated to positives.
    pub ifr_noise_mean: f64,
    pub ifr_noise_sd: f64,
    /// Dirichlet concentration `~ Gamma(shape, rate)`.
    pub delay_alpha_shape: f64,
    pub delay_alpha_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            r0_mean: 3.28,
            r0_scale_sd: 0.5,
            alpha_sd: 0.5,
            beta_scale_sd: 0.5,
            gamma_scale_sd: 0.5,
            seed_mean: 30.0,
            psi_a: 80.0,
            psi_b: 80.0,
            phi_sd: 5.0,
            ifr_noise_mean: 1.0,
            ifr_noise_sd: 0.1,
            delay_alpha_shape: 100.0,
            delay_alpha_rate: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("r0_scale_sd", self.r0_scale_sd),
            ("alpha_sd", self.alpha_sd),
            ("beta_scale_sd", self.beta_scale_sd),
            ("gamma_scale_sd", self.gamma_scale_sd),
            ("seed_mean", self.seed_mean),
            ("psi_a", self.psi_a),
            ("psi_b", self.psi_b),
            ("phi_sd", self.phi_sd),
            ("ifr_noise_sd", self.ifr_noise_sd),
            ("delay_alpha_shape", self.delay_alpha_shape),
            ("delay_alpha_rate", self.delay_alpha_rate),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("prior {name} must be positive, got {v}")));
            }
        }
        if !self.r0_mean.is_finite() || !self.ifr_noise_mean.is_finite() {
            return Err(Error::InvalidParameter("prior means must be finite".into()));
        }
        Ok(())
    }
}

/// Per-state block of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    pub r0: f64,
    pub beta: [f64; N_COVARIATES],
    pub gamma: [f64; N_COVARIATES],
    /// Infections per seeded day.
    pub seed: f64,
    pub psi: f64,
    pub ifr_noise: f64,
}

/// The full hierarchical parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    /// Standard deviation of the `r0` prior.
    pub k_scale: f64,
    pub alpha: [f64; N_COVARIATES],
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub phi: f64,
    pub delay_alpha: f64,
    pub states: Vec<StateParams>,
}

impl ParamVector {
    pub fn rt_params(&self, m: usize) -> RtParams {
        let s = &self.states[m];
        RtParams {
            r0: s.r0,
            alpha: self.alpha,
            beta: s.beta,
            gamma: s.gamma,
        }
    }

    /// Checks every domain constraint.
    pub fn in_domain(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| v.is_finite() && v > 0.0 && v < 1.0;
        pos(self.k_scale)
            && pos(self.sigma_beta)
            && pos(self.sigma_gamma)
            && pos(self.phi)
            && pos(self.delay_alpha)
            && self.alpha.iter().all(|v| v.is_finite())
            && self.states.iter().all(|s| {
                pos(s.r0)
                    && pos(s.seed)
                    && unit(s.psi)
                    && pos(s.ifr_noise)
                    && s.beta.iter().chain(&s.gamma).all(|v| v.is_finite())
            })
    }
}

pub const N_GLOBAL: usize = 5 + N_COVARIATES;
pub const N_PER_STATE: usize = 4 + 2 * N_COVARIATES;

/// Number of unconstrained coordinates for `n_states` states.
pub fn dimension(n_states: usize) -> usize {
    N_GLOBAL + N_PER_STATE * n_states
}

/// Column names in unconstrained-vector order, using state names.
pub fn parameter_names(states: &[String]) -> Vec<String> {
    let mut names = vec!["k_scale".to_string()];
    names.extend((1..=N_COVARIATES).map(|k| format!("alpha_{k}")));
    names.extend(["sigma_beta", "sigma_gamma", "phi", "delay_alpha"].map(String::from));
    for s in states {
        names.push(format!("r0[{s}]"));
        names.extend((1..=N_COVARIATES).map(|k| format!("beta_{k}[{s}]")));
        names.extend((1..=N_COVARIATES).map(|k| format!("gamma_{k}[{s}]")));
        names.push(format!("seed[{s}]"));
        names.push(format!("psi[{s}]"));
        names.push(format!("ifr_noise[{s}]"));
    }
    names
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(p (1 - p))` for `p = inv_logit(x)`, stable in both tails.
fn ln_logit_jacobian(x: f64) -> f64 {
    -x.abs() - 2.0 * (-x.abs()).exp().ln_1p()
}

/// Which state offsets are sampled directly (centered) rather than as
/// `sigma * raw` (non-centered), per covariate.
///
/// Centering suits offsets the data pins down; non-centering suits offsets
/// informed by the prior alone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Centering {
    pub beta: [bool; N_COVARIATES],
    pub gamma: [bool; N_COVARIATES],
}

impl Centering {
    pub const NON_CENTERED: Centering = Centering {
        beta: [false; N_COVARIATES],
        gamma: [false; N_COVARIATES],
    };

    fn n_non_centered(flags: &[bool; N_COVARIATES]) -> f64 {
        flags.iter().filter(|c| !**c).count() as f64
    }
}

/// Maps sampler coordinates to parameters, returning the log-Jacobian of
/// the map.
pub fn constrain(v: &[f64], n_states: usize, centering: &Centering) -> Result<(ParamVector, f64)> {
    if v.len() != dimension(n_states) {
        return Err(Error::Misaligned(format!(
            "{} coordinates for {} states (expected {})",
            v.len(),
            n_states,
            dimension(n_states)
        )));
    }
    let mut jac = 0.0;
    let pos = |x: f64, jac: &mut f64| {
        *jac += x;
        x.exp()
    };
    let k_scale = pos(v[0], &mut jac);
    let alpha: [f64; N_COVARIATES] = std::array::from_fn(|k| v[1 + k]);
    let g = 1 + N_COVARIATES;
    let sigma_beta = pos(v[g], &mut jac);
    let sigma_gamma = pos(v[g + 1], &mut jac);
    let phi = pos(v[g + 2], &mut jac);
    let delay_alpha = pos(v[g + 3], &mut jac);
    let mut states = Vec::with_capacity(n_states);
    for m in 0..n_states {
        let b = &v[N_GLOBAL + m * N_PER_STATE..N_GLOBAL + (m + 1) * N_PER_STATE];
        let r0 = pos(b[0], &mut jac);
        let scale = |centered: bool, sigma: f64| if centered { 1.0 } else { sigma };
        let beta = std::array::from_fn(|k| scale(centering.beta[k], sigma_beta) * b[1 + k]);
        let gamma = std::array::from_fn(|k| scale(centering.gamma[k], sigma_gamma) * b[1 + N_COVARIATES + k]);
        let rest = 1 + 2 * N_COVARIATES;
        let seed = pos(b[rest], &mut jac);
        let psi = inv_logit(b[rest + 1]);
        jac += ln_logit_jacobian(b[rest + 1]);
        let ifr_noise = pos(b[rest + 2], &mut jac);
        states.push(StateParams {
            r0,
            beta,
            gamma,
            seed,
            psi,
            ifr_noise,
        });
    }
    jac += n_states as f64
        * (Centering::n_non_centered(&centering.beta) * v[g] + Centering::n_non_centered(&centering.gamma) * v[g + 1]);
    Ok((
        ParamVector {
            k_scale,
            alpha,
            sigma_beta,
            sigma_gamma,
            phi,
            delay_alpha,
            states,
        },
        jac,
    ))
}

/// Inverse of [`constrain`]. Boundary and out-of-domain values are rejected.
pub fn unconstrain(theta: &ParamVector, centering: &Centering) -> Result<Vec<f64>> {
    if !theta.in_domain() {
        return Err(Error::InvalidParameter("parameter vector is outside its domain".into()));
    }
    let mut v = Vec::with_capacity(dimension(theta.states.len()));
    v.push(theta.k_scale.ln());
    v.extend_from_slice(&theta.alpha);
    v.extend([
        theta.sigma_beta.ln(),
        theta.sigma_gamma.ln(),
        theta.phi.ln(),
        theta.delay_alpha.ln(),
    ]);
    for s in &theta.states {
        v.push(s.r0.ln());
        let raw = |x: f64, centered: bool, sigma: f64| if centered { x } else { x / sigma };
        v.extend((0..N_COVARIATES).map(|k| raw(s.beta[k], centering.beta[k], theta.sigma_beta)));
        v.extend((0..N_COVARIATES).map(|k| raw(s.gamma[k], centering.gamma[k], theta.sigma_gamma)));
        v.push(s.seed.ln());
        v.push(logit(s.psi));
        v.push(s.ifr_noise.ln());
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("parameter vector sits on a domain boundary".into()));
    }
    Ok(v)
}

/// Parameters flattened in [`parameter_names`] order (constrained scale).
pub fn flatten(theta: &ParamVector) -> Vec<f64> {
    let mut v = Vec::with_capacity(dimension(theta.states.len()));
    v.push(theta.k_scale);
    v.extend_from_slice(&theta.alpha);
    v.extend([theta.sigma_beta, theta.sigma_gamma, theta.phi, theta.delay_alpha]);
    for s in &theta.states {
        v.push(s.r0);
        v.extend_from_slice(&s.beta);
        v.extend_from_slice(&s.gamma);
        v.extend([s.seed, s.psi, s.ifr_noise]);
    }
    v
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64], n_states: usize) -> Result<ParamVector> {
    if v.len() != dimension(n_states) {
        return Err(Error::Misaligned(format!("{} values for {n_states} states", v.len())));
    }
    let g = 1 + N_COVARIATES;
    let states = (0..n_states)
        .map(|m| {
            let b = &v[N_GLOBAL + m * N_PER_STATE..N_GLOBAL + (m + 1) * N_PER_STATE];
            let rest = 1 + 2 * N_COVARIATES;
            StateParams {
                r0: b[0],
                beta: std::array::from_fn(|k| b[1 + k]),
                gamma: std::array::from_fn(|k| b[1 + N_COVARIATES + k]),
                seed: b[rest],
                psi: b[rest + 1],
                ifr_noise: b[rest + 2],
            }
        })
        .collect();
    Ok(ParamVector {
        k_scale: v[0],
        alpha: std::array::from_fn(|k| v[1 + k]),
        sigma_beta: v[g],
        sigma_gamma: v[g + 1],
        phi: v[g + 2],
        delay_alpha: v[g + 3],
        states,
    })
}

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Normal density truncated to `x > 0`.
pub fn positive_normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    // P(X > 0) = erfc(-mean / (sd √2)) / 2
    let mass = 0.5 * erfc(-mean / (sd * std::f64::consts::SQRT_2));
    normal_lpdf(x, mean, sd) - mass.ln()
}

pub fn half_normal_lpdf(x: f64, sd: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    normal_lpdf(x, 0.0, sd) + std::f64::consts::LN_2
}

pub fn beta_lpdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

pub fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)
}

pub fn exponential_lpdf(x: f64, mean: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    -mean.ln() - x / mean
}

/// Joint log prior density on the constrained scale (no Jacobian).
pub fn log_prior(theta: &ParamVector, spec: &PriorSpec) -> f64 {
    if !theta.in_domain() {
        return f64::NEG_INFINITY;
    }
    let mut lp = half_normal_lpdf(theta.k_scale, spec.r0_scale_sd);
    lp += theta.alpha.iter().map(|a| normal_lpdf(*a, 0.0, spec.alpha_sd)).sum::<f64>();
    lp += half_normal_lpdf(theta.sigma_beta, spec.beta_scale_sd);
    lp += half_normal_lpdf(theta.sigma_gamma, spec.gamma_scale_sd);
    lp += half_normal_lpdf(theta.phi, spec.phi_sd);
    lp += gamma_lpdf(theta.delay_alpha, spec.delay_alpha_shape, spec.delay_alpha_rate);
    for s in &theta.states {
        lp += positive_normal_lpdf(s.r0, spec.r0_mean, theta.k_scale);
        lp += s.beta.iter().map(|b| normal_lpdf(*b, 0.0, theta.sigma_beta)).sum::<f64>();
        lp += s.gamma.iter().map(|g| normal_lpdf(*g, 0.0, theta.sigma_gamma)).sum::<f64>();
        lp += exponential_lpdf(s.seed, spec.seed_mean);
        lp += beta_lpdf(s.psi, spec.psi_a, spec.psi_b);
        lp += positive_normal_lpdf(s.ifr_noise, spec.ifr_noise_mean, spec.ifr_noise_sd);
    }
    lp
}

/// `φ(a) / Φ(a)` for the standard normal.
fn inverse_mills(a: f64) -> f64 {
    let cdf = 0.5 * erfc(-a / std::f64::consts::SQRT_2);
    if cdf > 0.0 {
        (-0.5 * a * a - LN_SQRT_2PI).exp() / cdf
    } else {
        -a
    }
}

/// Offsets into the flattened parameter order.
pub(crate) mod idx {
    use super::{N_COVARIATES, N_GLOBAL, N_PER_STATE};
    pub const K_SCALE: usize = 0;
    pub const ALPHA: usize = 1;
    pub const SIGMA_BETA: usize = 1 + N_COVARIATES;
    pub const SIGMA_GAMMA: usize = SIGMA_BETA + 1;
    pub const PHI: usize = SIGMA_BETA + 2;
    pub const DELAY_ALPHA: usize = SIGMA_BETA + 3;
    pub const R0: usize = 0;
    pub const BETA: usize = 1;
    pub const GAMMA: usize = 1 + N_COVARIATES;
    pub const SEED: usize = 1 + 2 * N_COVARIATES;
    pub const PSI: usize = SEED + 1;
    pub const IFR_NOISE: usize = SEED + 2;

    pub fn state(m: usize) -> usize {
        N_GLOBAL + m * N_PER_STATE
    }
}

/// Adds the gradient of [`log_prior`] (in [`flatten`] order) to `g`.
pub fn log_prior_gradient(theta: &ParamVector, spec: &PriorSpec, g: &mut [f64]) {
    let half = |x: f64, sd: f64| -x / (sd * sd);
    g[idx::K_SCALE] += half(theta.k_scale, spec.r0_scale_sd);
    for k in 0..N_COVARIATES {
        g[idx::ALPHA + k] += -theta.alpha[k] / (spec.alpha_sd * spec.alpha_sd);
    }
    g[idx::SIGMA_BETA] += half(theta.sigma_beta, spec.beta_scale_sd);
    g[idx::SIGMA_GAMMA] += half(theta.sigma_gamma, spec.gamma_scale_sd);
    g[idx::PHI] += half(theta.phi, spec.phi_sd);
    g[idx::DELAY_ALPHA] += (spec.delay_alpha_shape - 1.0) / theta.delay_alpha - spec.delay_alpha_rate;
    let k = theta.k_scale;
    let a = spec.r0_mean / k;
    let mills = inverse_mills(a);
    let (sb, sg) = (theta.sigma_beta, theta.sigma_gamma);
    for (m, s) in theta.states.iter().enumerate() {
        let b = idx::state(m);
        let z = (s.r0 - spec.r0_mean) / k;
        g[b + idx::R0] += -z / k;
        g[idx::K_SCALE] += z * z / k - 1.0 / k + mills * spec.r0_mean / (k * k);
        for j in 0..N_COVARIATES {
            g[b + idx::BETA + j] += -s.beta[j] / (sb * sb);
            g[idx::SIGMA_BETA] += s.beta[j] * s.beta[j] / (sb * sb * sb) - 1.0 / sb;
            g[b + idx::GAMMA + j] += -s.gamma[j] / (sg * sg);
            g[idx::SIGMA_GAMMA] += s.gamma[j] * s.gamma[j] / (sg * sg * sg) - 1.0 / sg;
        }
        g[b + idx::SEED] += -1.0 / spec.seed_mean;
        g[b + idx::PSI] += (spec.psi_a - 1.0) / s.psi - (spec.psi_b - 1.0) / (1.0 - s.psi);
        g[b + idx::IFR_NOISE] += -(s.ifr_noise - spec.ifr_noise_mean) / (spec.ifr_noise_sd * spec.ifr_noise_sd);
    }
}

/// Maps a gradient in [`flatten`] order to sampler coordinates, adding the
/// gradient of the log-Jacobian of [`constrain`].
pub fn unconstrained_gradient(theta: &ParamVector, centering: &Centering, g_theta: &[f64]) -> Vec<f64> {
    let n = theta.states.len();
    let mut g = vec![0.0; dimension(n)];
    let pos = |i: usize, x: f64, g: &mut [f64]| g[i] = g_theta[i] * x + 1.0;
    pos(idx::K_SCALE, theta.k_scale, &mut g);
    for k in 0..N_COVARIATES {
        g[idx::ALPHA + k] = g_theta[idx::ALPHA + k];
    }
    pos(idx::SIGMA_BETA, theta.sigma_beta, &mut g);
    pos(idx::SIGMA_GAMMA, theta.sigma_gamma, &mut g);
    pos(idx::PHI, theta.phi, &mut g);
    pos(idx::DELAY_ALPHA, theta.delay_alpha, &mut g);
    g[idx::SIGMA_BETA] += n as f64 * Centering::n_non_centered(&centering.beta);
    g[idx::SIGMA_GAMMA] += n as f64 * Centering::n_non_centered(&centering.gamma);
    for (m, s) in theta.states.iter().enumerate() {
        let b = idx::state(m);
        pos(b + idx::R0, s.r0, &mut g);
        for j in 0..N_COVARIATES {
            let gb = g_theta[b + idx::BETA + j];
            if centering.beta[j] {
                g[b + idx::BETA + j] = gb;
            } else {
                g[b + idx::BETA + j] = gb * theta.sigma_beta;
                g[idx::SIGMA_BETA] += gb * s.beta[j];
            }
            let gg = g_theta[b + idx::GAMMA + j];
            if centering.gamma[j] {
                g[b + idx::GAMMA + j] = gg;
            } else {
                g[b + idx::GAMMA + j] = gg * theta.sigma_gamma;
                g[idx::SIGMA_GAMMA] += gg * s.gamma[j];
            }
        }
        pos(b + idx::SEED, s.seed, &mut g);
        g[b + idx::PSI] = g_theta[b + idx::PSI] * s.psi * (1.0 - s.psi) + (1.0 - 2.0 * s.psi);
        pos(b + idx::IFR_NOISE, s.ifr_noise, &mut g);
    }
    g
}

fn positive_normal_draw<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let d = Normal::new(mean, sd).expect("valid normal");
    loop {
        let x = d.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

/// Draws a parameter vector from the prior.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, n_states: usize, rng: &mut R) -> ParamVector {
    let half = |rng: &mut R, sd: f64| positive_normal_draw(rng, 0.0, sd);
    let k_scale = half(rng, spec.r0_scale_sd);
    let alpha_d = Normal::new(0.0, spec.alpha_sd).expect("valid");
    let alpha = std::array::from_fn(|_| alpha_d.sample(rng));
    let sigma_beta = half(rng, spec.beta_scale_sd);
    let sigma_gamma = half(rng, spec.gamma_scale_sd);
    let phi = half(rng, spec.phi_sd);
    let delay_alpha = Gamma::new(spec.delay_alpha_shape, 1.0 / spec.delay_alpha_rate)
        .expect("valid")
        .sample(rng);
    let states = (0..n_states)
        .map(|_| {
            let r0 = positive_normal_draw(rng, spec.r0_mean, k_scale);
            let bd = Normal::new(0.0, sigma_beta).expect("valid");
            let gd = Normal::new(0.0, sigma_gamma).expect("valid");
            let beta = std::array::from_fn(|_| bd.sample(rng));
            let gamma = std::array::from_fn(|_| gd.sample(rng));
            let seed = Exp::new(1.0 / spec.seed_mean).expect("valid").sample(rng);
            let psi = Beta::new(spec.psi_a, spec.psi_b).expect("valid").sample(rng);
            let ifr_noise = positive_normal_draw(rng, spec.ifr_noise_mean, spec.ifr_noise_sd);
            StateParams {
                r0,
                beta,
                gamma,
                seed,
                psi,
                ifr_noise,
            }
        })
        .collect();
    ParamVector {
        k_scale,
        alpha,
        sigma_beta,
        sigma_gamma,
        phi,
        delay_alpha,
        states,
    }
}
