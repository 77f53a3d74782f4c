//! Forward simulation of synthetic datasets with known parameters.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::StateParams;
use crate::ingest::{epidemic_window, smooth_mobility, DailySeries, RawMobility, StateData};
use crate::model::ModelOptions;
use crate::nowcast::{reporting_factors, DelayProfile, ReportingTriangle};
use crate::observation::{expected_deaths, sample_negbin, DeathModelParams};
use crate::renewal::{rt_series, simulate_state, RtParams, Seeding, N_COVARIATES};

/// Ground-truth parameters for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub alpha: [f64; N_COVARIATES],
    pub phi: f64,
    /// Reporting-delay proportions by delay in days.
    pub eta: Vec<f64>,
    pub states: BTreeMap<String, StateParams>,
}

impl TrueParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("phi must be positive, got {}", self.phi)));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("alpha must be finite".into()));
        }
        DelayProfile::new(self.eta.clone())?;
        for (name, s) in &self.states {
            let ok = s.r0 > 0.0
                && s.seed >= 0.0
                && s.psi > 0.0
                && s.psi <= 1.0
                && s.ifr_noise > 0.0
                && s.beta.iter().chain(&s.gamma).all(|v| v.is_finite());
            if !ok {
                return Err(Error::InvalidParameter(format!("{name}: true parameters out of range")));
            }
        }
        Ok(())
    }

    pub fn rt_params(&self, name: &str) -> Option<RtParams> {
        self.states.get(name).map(|s| RtParams {
            r0: s.r0,
            alpha: self.alpha,
            beta: s.beta,
            gamma: s.gamma,
        })
    }
}

/// Per-state inputs that the simulation does not generate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimInput {
    pub name: String,
    pub population: u64,
    pub ifr_percent: f64,
    pub mobility: RawMobility,
}

/// True latent series for one simulated state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedState {
    pub name: String,
    pub infections: Vec<f64>,
    pub expected_deaths: Vec<f64>,
    /// Mean of the observed counts, `ψ P_t d_t`.
    pub expected_reported: Vec<f64>,
    pub rt: Vec<f64>,
}

/// A simulated dataset in ingest form plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// Every simulated state; window indices are zero where the state never
    /// crosses the death threshold.
    pub states: Vec<StateData>,
    pub triangle: ReportingTriangle,
    pub truth: Vec<SimulatedState>,
}

/// Simulates deaths for every input state under `truth`.
///
/// Observed counts are negative binomial around `ψ P_t d_t`, where `P_t`
/// is the share reported by the last day. Each count is split across
/// reporting delays to build a national reporting triangle.
pub fn simulate<R: Rng + ?Sized>(
    truth: &TrueParams,
    inputs: &[SimInput],
    opts: &ModelOptions,
    rng: &mut R,
) -> Result<Synthetic> {
    truth.validate()?;
    let delay = DelayProfile::new(truth.eta.clone())?;
    let cumulative = delay.cumulative();
    let longest = inputs.iter().map(|i| i.mobility.len()).max().unwrap_or(0);
    let (g, pi) = opts.pmfs(longest)?;
    let mut states = Vec::with_capacity(inputs.len());
    let mut sims = Vec::with_capacity(inputs.len());
    let mut triangle_counts: BTreeMap<(NaiveDate, usize), u64> = BTreeMap::new();
    let mut as_of = None;
    for input in inputs {
        let p = truth
            .states
            .get(&input.name)
            .ok_or_else(|| Error::InvalidParameter(format!("no true parameters for state `{}`", input.name)))?;
        let days = input.mobility.len();
        let mobility = smooth_mobility(&input.mobility, opts.relaxation_date)?;
        let rt = rt_series(&truth.rt_params(&input.name).expect("present"), &mobility);
        let infections = simulate_state(&Seeding::new(p.seed), days, &g, &rt, input.population as f64)?;
        let death_params = DeathModelParams {
            ifr: input.ifr_percent / 100.0,
            ifr_noise: p.ifr_noise,
            psi: p.psi,
            phi: truth.phi,
        };
        let d = expected_deaths(&infections, &pi, &death_params);
        let reported = reporting_factors(days, &cumulative);
        let mean: Vec<f64> = d.d.iter().zip(&reported).map(|(d, r)| p.psi * r * d).collect();
        let observed: Vec<u32> = mean
            .iter()
            .map(|&m| sample_negbin(rng, m, truth.phi, opts.dispersion).min(u32::MAX as u64) as u32)
            .collect();

        let start = input.mobility.start;
        let end = start + Days::new(days as u64 - 1);
        as_of = Some(as_of.map_or(end, |a: NaiveDate| a.max(end)));
        for (t, &y) in observed.iter().enumerate() {
            let age = days - 1 - t;
            split_by_delay(rng, y as u64, &delay, age, |delay_days, n| {
                *triangle_counts
                    .entry((start + Days::new(t as u64), delay_days))
                    .or_insert(0) += n;
            });
        }

        let (window_start, fit_start) = epidemic_window(&observed, crate::ingest::DEATH_THRESHOLD, crate::ingest::WINDOW_LEAD_DAYS)
            .unwrap_or((0, 0));
        states.push(StateData {
            name: input.name.clone(),
            population: input.population,
            deaths: DailySeries {
                start,
                values: observed,
            },
            mobility: input.mobility.indicators.clone(),
            ifr_percent: input.ifr_percent,
            window_start,
            fit_start,
        });
        sims.push(SimulatedState {
            name: input.name.clone(),
            infections: infections.c,
            expected_deaths: d.d,
            expected_reported: mean,
            rt,
        });
    }
    let as_of = as_of.ok_or_else(|| Error::Validation("no states to simulate".into()))?;
    let triangle = ReportingTriangle::new(
        triangle_counts.into_iter().map(|((d, k), n)| (d, k, n)),
        delay.max_delay(),
        as_of,
    );
    Ok(Synthetic {
        states,
        triangle,
        truth: sims,
    })
}

/// Splits `count` deaths of a given age across delays `0..=min(age, K)`
/// in proportion to `η`, by sequential binomial draws.
fn split_by_delay<R: Rng + ?Sized>(rng: &mut R, count: u64, delay: &DelayProfile, age: usize, mut emit: impl FnMut(usize, u64)) {
    let eta = delay.eta();
    let last = age.min(eta.len() - 1);
    let mut remaining = count;
    let mut mass: f64 = eta[..=last].iter().sum();
    for (k, &e) in eta[..=last].iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let n = if k == last || mass <= e {
            remaining
        } else {
            let p = (e / mass).clamp(0.0, 1.0);
            Binomial::new(remaining, p).expect("valid binomial").sample(rng)
        };
        if n > 0 {
            emit(k, n);
        }
        remaining -= n;
        mass -= e;
    }
}

/// Raw mobility for a lockdown-shaped scenario: indicator 1 rises from 0
/// to `depth` along a logistic centred on `onset` with the given width in
/// days; the other indicators stay at zero.
pub fn lockdown_mobility(start: NaiveDate, days: usize, onset: f64, width: f64, depth: f64) -> RawMobility {
    let mut indicators: [Vec<f64>; N_COVARIATES] = std::array::from_fn(|_| vec![0.0; days]);
    for (t, v) in indicators[0].iter_mut().enumerate() {
        *v = depth / (1.0 + (-(t as f64 - onset) / width).exp());
    }
    RawMobility { start, indicators }
}

impl Synthetic {
    /// Writes the ingest tables, `triangle.csv` and `truth.json`
    /// (`TrueParams` plus the latent series) into `dir`.
    pub fn save(&self, truth: &TrueParams, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::ingest::save_all(&self.states, dir)?;
        let path = dir.join("triangle.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.triangle.write_csv(f).map_err(|e| Error::io(&path, e))?;
        #[derive(Serialize)]
        struct TruthFile<'a> {
            params: &'a TrueParams,
            latent: &'a [SimulatedState],
        }
        let path = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&TruthFile {
            params: truth,
            latent: &self.truth,
        })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nowcast::estimate_eta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(r0: f64, seed: f64, psi: f64) -> StateParams {
        StateParams {
            r0,
            beta: [0.0; 4],
            gamma: [0.0; 4],
            seed,
            psi,
            ifr_noise: 1.0,
        }
    }

    fn setup(psi: f64, phi: f64, eta: Vec<f64>) -> (TrueParams, Vec<SimInput>) {
        let start = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
        let truth = TrueParams {
            alpha: [1.0, 0.0, 0.0, 0.0],
            phi,
            eta,
            states: [("A".to_string(), state(3.0, 20.0, psi)), ("B".to_string(), state(2.5, 40.0, psi))].into(),
        };
        let inputs = vec![
            SimInput {
                name: "A".into(),
                population: 5_000_000,
                ifr_percent: 0.8,
                mobility: lockdown_mobility(start, 150, 50.0, 4.0, 1.5),
            },
            SimInput {
                name: "B".into(),
                population: 3_000_000,
                ifr_percent: 0.7,
                mobility: lockdown_mobility(start, 150, 55.0, 4.0, 1.5),
            },
        ];
        (truth, inputs)
    }

    fn opts() -> ModelOptions {
        ModelOptions {
            relaxation_date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            ..ModelOptions::default()
        }
    }

    #[test]
    fn same_seed_same_output() {
        let (truth, inputs) = setup(0.5, 2.0, vec![0.5, 0.3, 0.2]);
        let a = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.states[0].deaths, c.states[0].deaths);
    }

    #[test]
    fn noise_free_limit_tracks_expected_deaths() {
        // psi = 1, immediate reporting and huge phi: counts are Poisson
        // around the expected deaths
        let (truth, inputs) = setup(1.0, 1e9, vec![1.0]);
        let sim = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (st, tr) in sim.states.iter().zip(&sim.truth) {
            let obs: f64 = st.deaths.values.iter().map(|&v| v as f64).sum();
            let exp: f64 = tr.expected_deaths.iter().sum();
            assert!((obs - exp).abs() < 4.0 * exp.sqrt(), "{obs} vs {exp}");
            for (o, e) in st.deaths.values.iter().zip(&tr.expected_deaths) {
                assert!((*o as f64 - e).abs() <= 6.0 * e.sqrt() + 3.0);
            }
        }
    }

    #[test]
    fn deaths_over_ifr_track_lagged_infections() {
        let (truth, inputs) = setup(1.0, 1e9, vec![1.0]);
        let sim = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, pi) = opts().pmfs(150).unwrap();
        let lag = pi.mean().round() as usize;
        for (input, tr) in inputs.iter().zip(&sim.truth) {
            let ifr = input.ifr_percent / 100.0;
            let deaths: f64 = tr.expected_deaths.iter().sum::<f64>() / ifr;
            let infections: f64 = tr.infections[..150 - lag].iter().sum();
            assert!((deaths / infections - 1.0).abs() < 0.1, "{deaths} vs {infections}");
        }
    }

    #[test]
    fn triangle_recovers_delay_profile() {
        let eta = vec![0.4, 0.3, 0.2, 0.1];
        let (truth, inputs) = setup(0.5, 2.0, eta.clone());
        let sim = simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let est = estimate_eta(&sim.triangle).unwrap();
        for (a, b) in est.eta().iter().zip(&eta) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
        // triangle totals equal the observed deaths
        let mut total = 0u64;
        for st in &sim.states {
            total += st.total_deaths();
        }
        let tri_total: u64 = {
            let mut buf = Vec::new();
            sim.triangle.write_csv(&mut buf).unwrap();
            let mut rdr = csv::Reader::from_reader(buf.as_slice());
            rdr.records().map(|r| r.unwrap()[2].parse::<u64>().unwrap()).sum()
        };
        assert_eq!(total, tri_total);
    }

    #[test]
    fn rejects_bad_truth() {
        let (mut truth, inputs) = setup(0.5, 2.0, vec![1.0]);
        truth.phi = -1.0;
        assert!(simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let (mut truth, inputs) = setup(0.5, 2.0, vec![1.0]);
        truth.states.remove("B");
        assert!(simulate(&truth, &inputs, &opts(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
