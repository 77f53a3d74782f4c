//! Joint model over all states: fit inputs, latent trajectories and the
//! log posterior.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::delaydist::{convolve_infection_to_death, discretize, min_horizon, DiscretePmf, GammaSpec};
use crate::error::{Error, Result};
use crate::delaydist::{lagged_dot, lead_dot};
use crate::hierarchy::{
    constrain, dimension, idx, Centering, log_prior, log_prior_gradient, parameter_names, unconstrained_gradient, ParamVector,
    PriorSpec,
};
use crate::ingest::{smooth_mobility, StateData};
use crate::nowcast::{reporting_factors, DelayProfile};
use crate::observation::{
    fill_expected_deaths, negbin_logpmf_grad, window_loglikelihood, DispersionForm, DROPPED_TRAILING_DAYS,
};
use crate::renewal::{fill_infections, rt_link, InfectionSeries, MobilityMatrix, Seeding, N_COVARIATES, SEED_DAYS};

/// Smallest default horizon for the generation-interval and
/// infection-to-death pmfs.
pub const DEFAULT_MIN_PMF_HORIZON: usize = 100;

/// Model choices that are not priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub dispersion: DispersionForm,
    /// Date from which the relaxation dummies switch on.
    pub relaxation_date: NaiveDate,
    /// Overrides the pmf horizon. `None` picks the longest window, at
    /// least [`DEFAULT_MIN_PMF_HORIZON`].
    pub pmf_horizon: Option<usize>,
    pub infection_to_onset: GammaSpecConfig,
    pub onset_to_death: GammaSpecConfig,
    pub serial_interval: GammaSpecConfig,
}

/// Serializable Gamma `(mean, cv)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSpecConfig {
    pub mean: f64,
    pub cv: f64,
}

impl GammaSpecConfig {
    pub fn spec(&self) -> Result<GammaSpec> {
        GammaSpec::new(self.mean, self.cv)
    }
}

impl From<GammaSpec> for GammaSpecConfig {
    fn from(g: GammaSpec) -> Self {
        GammaSpecConfig {
            mean: g.mean(),
            cv: g.cv(),
        }
    }
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            dispersion: DispersionForm::default(),
            relaxation_date: crate::ingest::default_relaxation_date(),
            pmf_horizon: None,
            infection_to_onset: GammaSpec::INFECTION_TO_ONSET.into(),
            onset_to_death: GammaSpec::ONSET_TO_DEATH.into(),
            serial_interval: GammaSpec::SERIAL_INTERVAL.into(),
        }
    }
}

impl ModelOptions {
    /// Builds the generation-interval and infection-to-death pmfs.
    pub fn pmfs(&self, longest_window: usize) -> Result<(DiscretePmf, DiscretePmf)> {
        let serial = self.serial_interval.spec()?;
        let onset = self.infection_to_onset.spec()?;
        let death = self.onset_to_death.spec()?;
        let horizon = match self.pmf_horizon {
            Some(h) => h,
            None => longest_window.max(DEFAULT_MIN_PMF_HORIZON).max(min_horizon(&serial)),
        };
        let g = discretize(&serial, horizon)?;
        let pi = convolve_infection_to_death(&onset, &death, horizon)?;
        Ok((g, pi))
    }
}

/// Fit inputs for one state, restricted to its modelled window.
#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub name: String,
    pub population: f64,
    /// Baseline infection fatality ratio as a probability.
    pub ifr: f64,
    /// Calendar date of the first modelled day.
    pub start: NaiveDate,
    pub observed: Vec<u32>,
    ln_factorials: Vec<f64>,
    /// First day entering the likelihood, relative to `start`.
    pub fit_start: usize,
    pub mobility: MobilityMatrix,
    /// Expected reported share `P_t` of each day's deaths.
    pub reported: Vec<f64>,
}

impl StateModel {
    pub fn days(&self) -> usize {
        self.observed.len()
    }

    /// Days entering the likelihood.
    pub fn fit_range(&self) -> std::ops::Range<usize> {
        self.fit_start..self.days() - DROPPED_TRAILING_DAYS
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + chrono::Days::new(day as u64)
    }
}

/// Latent trajectories of one state under one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLatent {
    pub rt: Vec<f64>,
    pub infections: InfectionSeries,
    /// True deaths by date of death.
    pub deaths: Vec<f64>,
    /// Expected deaths on the reported scale, `ψ P_t d_t`.
    pub reported: Vec<f64>,
}

/// All states plus shared pmfs and priors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub states: Vec<StateModel>,
    pub g: DiscretePmf,
    pub pi: DiscretePmf,
    pub priors: PriorSpec,
    pub dispersion: DispersionForm,
    pub delay: DelayProfile,
    /// Offsets for covariates that vary in some state are centered; offsets
    /// for covariates that are zero everywhere are non-centered.
    pub centering: Centering,
}

impl Model {
    /// Builds the model from ingested states.
    ///
    /// The reporting profile's ages are counted back from each state's last
    /// observed day.
    pub fn build(data: &[StateData], delay: &DelayProfile, priors: &PriorSpec, opts: &ModelOptions) -> Result<Model> {
        priors.validate()?;
        if data.is_empty() {
            return Err(Error::Validation("no states to fit".into()));
        }
        let cumulative = delay.cumulative();
        let mut states = Vec::with_capacity(data.len());
        for sd in data {
            let len = sd.deaths.len();
            if sd.window_start >= sd.fit_start || sd.fit_start + DROPPED_TRAILING_DAYS >= len {
                return Err(Error::Validation(format!(
                    "{}: fit window {}..{} does not fit in {len} days",
                    sd.name, sd.fit_start, len
                )));
            }
            if len - sd.window_start <= SEED_DAYS {
                return Err(Error::Validation(format!("{}: window shorter than the seeding period", sd.name)));
            }
            if sd.population == 0 {
                return Err(Error::Validation(format!("{}: population must be positive", sd.name)));
            }
            if !(sd.ifr() > 0.0 && sd.ifr() < 1.0) {
                return Err(Error::Validation(format!("{}: IFR {}% out of range", sd.name, sd.ifr_percent)));
            }
            let mobility = smooth_mobility(&sd.raw_mobility(), opts.relaxation_date)?.slice(sd.window_start, len);
            let reported = reporting_factors(len, &cumulative)[sd.window_start..].to_vec();
            let observed = sd.deaths.values[sd.window_start..].to_vec();
            let ln_factorials = observed.iter().map(|&y| ln_gamma(y as f64 + 1.0)).collect();
            states.push(StateModel {
                name: sd.name.clone(),
                population: sd.population as f64,
                ifr: sd.ifr(),
                start: sd.deaths.date(sd.window_start),
                observed,
                ln_factorials,
                fit_start: sd.fit_start - sd.window_start,
                mobility,
                reported,
            });
        }
        let longest = states.iter().map(StateModel::days).max().unwrap_or(0);
        let (g, pi) = opts.pmfs(longest)?;
        let nonzero = |xs: &[f64]| xs.iter().any(|x| *x != 0.0);
        let centering = Centering {
            beta: std::array::from_fn(|k| states.iter().any(|st| nonzero(st.mobility.indicator(k)))),
            gamma: std::array::from_fn(|k| states.iter().any(|st| nonzero(st.mobility.dummy(k)))),
        };
        Ok(Model {
            states,
            g,
            pi,
            priors: priors.clone(),
            dispersion: opts.dispersion,
            delay: delay.clone(),
            centering,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        dimension(self.n_states())
    }

    pub fn state_names(&self) -> Vec<String> {
        self.states.iter().map(|s| s.name.clone()).collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(&self.state_names())
    }

    /// Forward model for state `m`.
    pub fn latent(&self, theta: &ParamVector, m: usize) -> StateLatent {
        let st = &self.states[m];
        let n = st.days();
        let mut rt = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut d = vec![0.0; n];
        self.fill_state(theta, m, &mut rt, &mut c, &mut s, &mut d);
        let p = &theta.states[m];
        let reported = d.iter().zip(&st.reported).map(|(d, r)| p.psi * r * d).collect();
        StateLatent {
            rt,
            infections: InfectionSeries {
                c,
                s,
                population: st.population,
            },
            deaths: d,
            reported,
        }
    }

    fn fill_state(&self, theta: &ParamVector, m: usize, rt: &mut [f64], c: &mut [f64], s: &mut [f64], d: &mut [f64]) {
        let st = &self.states[m];
        let params = theta.rt_params(m);
        for (t, r) in rt.iter_mut().enumerate() {
            *r = rt_link(&params, &st.mobility.x_at(t), &st.mobility.z_at(t));
        }
        let p = &theta.states[m];
        fill_infections(&Seeding::new(p.seed), self.g.as_slice(), rt, st.population, c, s);
        fill_expected_deaths(c, self.pi.as_slice(), st.ifr * p.ifr_noise, d);
    }

    /// Log-likelihood of state `m`'s observed deaths.
    pub fn state_loglikelihood(&self, theta: &ParamVector, m: usize) -> f64 {
        let st = &self.states[m];
        let n = st.days();
        let mut buf = vec![0.0; 4 * n];
        let (rt, rest) = buf.split_at_mut(n);
        let (c, rest) = rest.split_at_mut(n);
        let (s, d) = rest.split_at_mut(n);
        self.fill_state(theta, m, rt, c, s, d);
        let psi = theta.states[m].psi;
        for (d, r) in d.iter_mut().zip(&st.reported) {
            *d *= psi * r;
        }
        window_loglikelihood(&st.observed, &st.ln_factorials, d, theta.phi, self.dispersion, st.fit_range())
    }

    /// [`Model::state_loglikelihood`] plus its gradient, added to `g` in
    /// flattened parameter order. The forward pass repeats the value
    /// computation operation for operation, so the two agree exactly.
    fn state_loglikelihood_gradient(&self, theta: &ParamVector, m: usize, g: &mut [f64]) -> f64 {
        let st = &self.states[m];
        let n = st.days();
        let p = &theta.states[m];
        let params = theta.rt_params(m);
        let gi = self.g.as_slice();
        let pi = self.pi.as_slice();
        let pop = st.population;

        let mut rt = vec![0.0; n];
        let mut sig = vec![0.0; n];
        for t in 0..n {
            let (x, z) = (st.mobility.x_at(t), st.mobility.z_at(t));
            rt[t] = rt_link(&params, &x, &z);
            let lin: f64 = (0..N_COVARIATES).map(|k| params.effect(k) * x[k] + params.gamma[k] * z[k]).sum();
            sig[t] = 1.0 / (1.0 + (-lin).exp());
        }
        let mut c = vec![0.0; n];
        let mut lam = vec![0.0; n];
        let mut frac = vec![0.0; n];
        let mut frac_open = vec![false; n];
        let mut capped = vec![false; n];
        let mut room = vec![false; n];
        let mut cumulative = 0.0;
        for t in 0..n {
            let f = (1.0 - cumulative / pop).max(0.0);
            frac[t] = f;
            frac_open[t] = 1.0 - cumulative / pop > 0.0;
            let remaining = (pop - cumulative).max(0.0);
            room[t] = pop - cumulative > 0.0;
            let val = if t < SEED_DAYS {
                p.seed
            } else {
                lam[t] = lagged_dot(&c, gi, t);
                f * rt[t] * lam[t]
            };
            capped[t] = val > remaining;
            let new = val.min(remaining);
            c[t] = new;
            cumulative += new;
        }

        let ifr = st.ifr * p.ifr_noise;
        let mut ebar = vec![0.0; n];
        let mut total = 0.0;
        let (mut g_phi, mut g_psi, mut g_noise) = (0.0, 0.0, 0.0);
        for t in st.fit_range() {
            let e = lagged_dot(&c, pi, t);
            let d = ifr * e;
            let mean = d * (p.psi * st.reported[t]);
            let y = st.observed[t] as u64;
            let (v, dm, dp) = if mean <= 0.0 {
                if y > 0 {
                    return f64::NEG_INFINITY;
                }
                (0.0, 0.0, 0.0)
            } else {
                let (v, dm, dp) = negbin_logpmf_grad(y, mean, theta.phi, self.dispersion);
                (v - st.ln_factorials[t], dm, dp)
            };
            total += v;
            g_phi += dp;
            g_psi += dm * st.reported[t] * d;
            let gd = dm * p.psi * st.reported[t];
            g_noise += gd * st.ifr * e;
            ebar[t] = gd * ifr;
        }

        let mut cbar: Vec<f64> = (0..n).map(|tau| lead_dot(&ebar, pi, tau)).collect();
        let mut rbar = vec![0.0; n];
        let mut g_seed = 0.0;
        let mut uniform = 0.0;
        for t in (0..n).rev() {
            cbar[t] += uniform;
            let a = cbar[t];
            if a == 0.0 {
                continue;
            }
            if capped[t] {
                if room[t] {
                    uniform -= a;
                }
            } else if t < SEED_DAYS {
                g_seed += a;
            } else {
                rbar[t] = a * frac[t] * lam[t];
                let coef = a * frac[t] * rt[t];
                let lags = t.min(gi.len());
                for (cb, w) in cbar[t - lags..t].iter_mut().rev().zip(&gi[..lags]) {
                    *cb += coef * w;
                }
                if frac_open[t] {
                    uniform -= a * rt[t] * lam[t] / pop;
                }
            }
        }

        let b = idx::state(m);
        for t in SEED_DAYS..n {
            if rbar[t] == 0.0 {
                continue;
            }
            g[b + idx::R0] += rbar[t] * rt[t] / p.r0;
            let sbar = -rbar[t] * rt[t] * sig[t];
            let (x, z) = (st.mobility.x_at(t), st.mobility.z_at(t));
            for k in 0..N_COVARIATES {
                g[idx::ALPHA + k] += sbar * x[k];
                g[b + idx::BETA + k] += sbar * x[k];
                g[b + idx::GAMMA + k] += sbar * z[k];
            }
        }
        g[idx::PHI] += g_phi;
        g[b + idx::PSI] += g_psi;
        g[b + idx::IFR_NOISE] += g_noise;
        g[b + idx::SEED] += g_seed;
        total
    }

    /// [`Model::log_density`] and its gradient in sampler coordinates.
    ///
    /// A point whose gradient overflows is given zero density.
    pub fn log_density_gradient(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let Ok((theta, jac)) = constrain(v, self.n_states(), &self.centering) else {
            return f64::NAN;
        };
        let lp = log_prior(&theta, &self.priors);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let mut gt = vec![0.0; self.dim()];
        log_prior_gradient(&theta, &self.priors, &mut gt);
        let mut total = lp;
        for m in 0..self.n_states() {
            total += self.state_loglikelihood_gradient(&theta, m, &mut gt);
            if total == f64::NEG_INFINITY {
                return total;
            }
        }
        let out = total + jac;
        if out.is_nan() {
            return f64::NEG_INFINITY;
        }
        grad.copy_from_slice(&unconstrained_gradient(&theta, &self.centering, &gt));
        if grad.iter().any(|g| !g.is_finite()) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        out
    }

    /// Log prior plus the sum of state log-likelihoods, in state order.
    pub fn log_posterior(&self, theta: &ParamVector) -> f64 {
        if theta.states.len() != self.n_states() {
            return f64::NAN;
        }
        let lp = log_prior(theta, &self.priors);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let mut total = lp;
        for m in 0..self.n_states() {
            total += self.state_loglikelihood(theta, m);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    /// Log posterior in sampler coordinates, including the log-Jacobian.
    ///
    /// NaN only for a vector of the wrong length; overflow far in the tails
    /// gives `-inf`.
    pub fn log_density(&self, v: &[f64]) -> f64 {
        match constrain(v, self.n_states(), &self.centering) {
            Ok((theta, jac)) => {
                let lp = self.log_posterior(&theta);
                if lp == f64::NEG_INFINITY {
                    return lp;
                }
                let out = lp + jac;
                if out.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    out
                }
            }
            Err(_) => f64::NAN,
        }
    }
}
