//! Posterior fitting: prior initialization, sampling and diagnostics for a
//! [`Model`].

use crate::error::Result;
use crate::hierarchy::{flatten, sample_prior, unconstrain, unflatten, ParamVector};
use crate::model::Model;
use crate::sampler::{diagnostics, run_chains, ChainConfig, Diagnostic, PosteriorDraws};

/// R-hat above this flags a parameter as not converged.
pub const RHAT_THRESHOLD: f64 = 1.05;

/// Draws on the constrained scale with their diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub draws: PosteriorDraws,
    pub diagnostics: Vec<Diagnostic>,
    pub n_states: usize,
}

impl Fit {
    pub fn param(&self, chain: usize, i: usize) -> ParamVector {
        unflatten(self.draws.draw(chain, i), self.n_states).expect("consistent layout")
    }

    /// Every draw in chain order.
    pub fn params(&self) -> Vec<ParamVector> {
        self.draws
            .iter()
            .map(|d| unflatten(d, self.n_states).expect("consistent layout"))
            .collect()
    }

    pub fn max_rhat(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.rhat).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.ess).fold(f64::INFINITY, f64::min)
    }

    /// Names of parameters whose R-hat exceeds [`RHAT_THRESHOLD`].
    pub fn nonconverged(&self) -> Vec<String> {
        self.draws
            .names
            .iter()
            .zip(&self.diagnostics)
            .filter(|(_, d)| !(d.rhat <= RHAT_THRESHOLD))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn converged(&self) -> bool {
        self.nonconverged().is_empty()
    }
}

/// Samples the posterior of `model`, starting each chain from a prior draw.
pub fn fit(model: &Model, cfg: &ChainConfig) -> Result<Fit> {
    let n_states = model.n_states();
    let init = |rng: &mut rand_chacha::ChaCha8Rng| {
        let theta = sample_prior(&model.priors, n_states, rng);
        // a prior draw on a domain boundary is retried by the sampler
        unconstrain(&theta, &model.centering).unwrap_or_else(|_| vec![f64::NAN; model.dim()])
    };
    let raw = run_chains(model, model.parameter_names(), cfg, &init)?;
    let draws = raw.map(model.parameter_names(), |v| {
        let (theta, _) = crate::hierarchy::constrain(v, n_states, &model.centering).expect("dimension checked");
        flatten(&theta)
    })?;
    let diagnostics = diagnostics(&draws)?;
    Ok(Fit {
        draws,
        diagnostics,
        n_states,
    })
}
