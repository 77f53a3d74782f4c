//! Infection renewal recursion with susceptible depletion and the
//! mobility-driven reproduction number.

use crate::delaydist::{lagged_dot, DiscretePmf};
use crate::error::{Error, Result};

/// Number of mobility indicators (and matching post-relaxation dummies).
pub const N_COVARIATES: usize = 4;

/// Default number of seeded days at the start of a modelled window.
pub const SEED_DAYS: usize = 6;

/// Smoothed mobility indicators and post-relaxation dummies for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityMatrix {
    indicators: [Vec<f64>; N_COVARIATES],
    dummies: [Vec<f64>; N_COVARIATES],
}

impl MobilityMatrix {
    pub fn new(indicators: [Vec<f64>; N_COVARIATES], dummies: [Vec<f64>; N_COVARIATES]) -> Result<Self> {
        let len = indicators[0].len();
        if indicators.iter().chain(dummies.iter()).any(|s| s.len() != len) {
            return Err(Error::Misaligned(
                "mobility indicator and dummy series must share one day index".into(),
            ));
        }
        if dummies.iter().flatten().any(|z| *z != 0.0 && *z != 1.0) {
            return Err(Error::InvalidParameter("dummy values must be 0 or 1".into()));
        }
        if indicators.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("mobility values must be finite".into()));
        }
        Ok(MobilityMatrix { indicators, dummies })
    }

    /// All-zero covariates for `days` days.
    pub fn zeros(days: usize) -> Self {
        MobilityMatrix {
            indicators: std::array::from_fn(|_| vec![0.0; days]),
            dummies: std::array::from_fn(|_| vec![0.0; days]),
        }
    }

    pub fn len(&self) -> usize {
        self.indicators[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indicator(&self, k: usize) -> &[f64] {
        &self.indicators[k]
    }

    pub fn dummy(&self, k: usize) -> &[f64] {
        &self.dummies[k]
    }

    pub fn x_at(&self, day: usize) -> [f64; N_COVARIATES] {
        std::array::from_fn(|k| self.indicators[k][day])
    }

    pub fn z_at(&self, day: usize) -> [f64; N_COVARIATES] {
        std::array::from_fn(|k| self.dummies[k][day])
    }

    /// Restricts both matrices to `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> MobilityMatrix {
        MobilityMatrix {
            indicators: std::array::from_fn(|k| self.indicators[k][start..end].to_vec()),
            dummies: std::array::from_fn(|k| self.dummies[k][start..end].to_vec()),
        }
    }
}

/// Parameters of the reproduction-number link for one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtParams {
    pub r0: f64,
    /// Covariate effects shared by every state.
    pub alpha: [f64; N_COVARIATES],
    /// State-specific covariate effects.
    pub beta: [f64; N_COVARIATES],
    /// State-specific effects of the post-relaxation dummies.
    pub gamma: [f64; N_COVARIATES],
}

impl RtParams {
    pub fn constant(r0: f64) -> Self {
        RtParams {
            r0,
            alpha: [0.0; N_COVARIATES],
            beta: [0.0; N_COVARIATES],
            gamma: [0.0; N_COVARIATES],
        }
    }

    /// Combined effect `alpha_k + beta_k` of indicator `k`.
    pub fn effect(&self, k: usize) -> f64 {
        self.alpha[k] + self.beta[k]
    }
}

/// `R = r0 * 2 / (1 + exp(-u))` with `u = -Σ_k [(α_k + β_k) x_k + γ_k z_k]`.
///
/// Zero covariates give exactly `r0`; the result lies in `(0, 2 r0)`.
pub fn rt_link(params: &RtParams, x: &[f64; N_COVARIATES], z: &[f64; N_COVARIATES]) -> f64 {
    let mut s = 0.0;
    for k in 0..N_COVARIATES {
        s += params.effect(k) * x[k] + params.gamma[k] * z[k];
    }
    // -u = s
    params.r0 * 2.0 / (1.0 + s.exp())
}

/// Reproduction number for every day of `mobility`.
pub fn rt_series(params: &RtParams, mobility: &MobilityMatrix) -> Vec<f64> {
    (0..mobility.len())
        .map(|t| rt_link(params, &mobility.x_at(t), &mobility.z_at(t)))
        .collect()
}

/// Daily infections with the susceptible fraction in effect on each day.
#[derive(Debug, Clone, PartialEq)]
pub struct InfectionSeries {
    /// New infections per day.
    pub c: Vec<f64>,
    /// `s[t] = 1 - (Σ_{i<t} c_i) / N`, floored at zero.
    pub s: Vec<f64>,
    pub population: f64,
}

impl InfectionSeries {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn cumulative(&self) -> f64 {
        self.c.iter().sum()
    }
}

/// Seeding of the first days of a modelled window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seeding {
    pub days: usize,
    /// Infections per seeded day.
    pub magnitude: f64,
}

impl Seeding {
    pub fn new(magnitude: f64) -> Self {
        Seeding {
            days: SEED_DAYS,
            magnitude,
        }
    }
}

/// Next day's infections given the history `c_1..c_{t-1}`.
pub fn renewal_step(history: &[f64], g: &DiscretePmf, rt: f64, population: f64) -> f64 {
    let t = history.len();
    let cumulative: f64 = history.iter().sum();
    let remaining = (population - cumulative).max(0.0);
    let s = (1.0 - cumulative / population).max(0.0);
    (s * rt * lagged_dot(history, g.as_slice(), t)).min(remaining)
}

/// Runs the renewal recursion over `days` days.
pub fn simulate_state(
    seed: &Seeding,
    days: usize,
    g: &DiscretePmf,
    rt_series: &[f64],
    population: f64,
) -> Result<InfectionSeries> {
    if days < seed.days {
        return Err(Error::InvalidParameter(format!(
            "{days} modelled days cannot hold a {}-day seeding window",
            seed.days
        )));
    }
    if rt_series.len() != days {
        return Err(Error::Misaligned(format!(
            "Rt series has {} entries for {days} days",
            rt_series.len()
        )));
    }
    if !(population > 0.0) {
        return Err(Error::InvalidParameter("population must be positive".into()));
    }
    let mut c = vec![0.0; days];
    let mut s = vec![0.0; days];
    fill_infections(seed, g.as_slice(), rt_series, population, &mut c, &mut s);
    Ok(InfectionSeries { c, s, population })
}

/// Allocation-free core of [`simulate_state`].
pub(crate) fn fill_infections(
    seed: &Seeding,
    g: &[f64],
    rt: &[f64],
    population: f64,
    c: &mut [f64],
    s: &mut [f64],
) {
    let mut cumulative = 0.0;
    for t in 0..c.len() {
        let frac = (1.0 - cumulative / population).max(0.0);
        s[t] = frac;
        let remaining = (population - cumulative).max(0.0);
        let new = if t < seed.days {
            seed.magnitude.min(remaining)
        } else {
            (frac * rt[t] * lagged_dot(c, g, t)).min(remaining)
        };
        c[t] = new;
        cumulative += new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delaydist::{discretize, GammaSpec};
    use proptest::prelude::*;

    fn toy_g() -> DiscretePmf {
        DiscretePmf::from_weights(vec![0.5, 0.3, 0.2]).unwrap()
    }

    #[test]
    fn zero_covariates_give_r0() {
        let p = RtParams::constant(3.28);
        assert_eq!(rt_link(&p, &[0.0; 4], &[0.0; 4]), 3.28);
    }

    #[test]
    fn logistic_tail_vanishes() {
        let mut p = RtParams::constant(3.28);
        p.alpha[0] = 1.0;
        // u = -20
        let r = rt_link(&p, &[20.0, 0.0, 0.0, 0.0], &[0.0; 4]);
        assert!(r > 0.0 && r < 3.28 * 2.0 * 2.1e-9, "{r}");
    }

    #[test]
    fn single_effect_hand_value() {
        let mut p = RtParams::constant(2.0);
        p.alpha[0] = 0.4;
        p.beta[0] = 0.6;
        let r = rt_link(&p, &[0.5, 0.0, 0.0, 0.0], &[0.0; 4]);
        // 2 * 2 / (1 + e^0.5) = 4 / 2.6487212707 = 1.5101624...
        assert!((r - 1.510_162_4).abs() < 1e-6, "{r}");
    }

    #[test]
    fn renewal_step_hand_values() {
        let g = toy_g();
        let n = 1e9;
        let c2 = renewal_step(&[10.0], &g, 2.0, n);
        assert!((c2 - 10.0).abs() / 10.0 < 1e-6, "{c2}");
        let c3 = renewal_step(&[10.0, c2], &g, 2.0, n);
        assert!((c3 - 16.0).abs() / 16.0 < 1e-6, "{c3}");
        assert_eq!(renewal_step(&[10.0, 10.0, 5.0], &g, 0.0, n), 0.0);
    }

    #[test]
    fn renewal_step_is_capped_by_population() {
        let g = toy_g();
        let c = renewal_step(&[60.0, 30.0], &g, 50.0, 100.0);
        assert!((c - 10.0).abs() < 1e-12);
        assert_eq!(renewal_step(&[60.0, 40.0], &g, 50.0, 100.0), 0.0);
    }

    #[test]
    fn zero_seed_gives_no_epidemic() {
        let g = discretize(&GammaSpec::SERIAL_INTERVAL, 60).unwrap();
        let series = simulate_state(&Seeding::new(0.0), 100, &g, &vec![3.0; 100], 1e6).unwrap();
        assert!(series.c.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn unit_reproduction_number_is_quasi_stationary() {
        let g = discretize(&GammaSpec::SERIAL_INTERVAL, 60).unwrap();
        let days = 120;
        let series = simulate_state(&Seeding::new(10.0), days, &g, &vec![1.0; days], 1e9).unwrap();
        // brute-force check of relative day-on-day change after the transient
        for t in 40..days {
            let rel = (series.c[t] - series.c[t - 1]).abs() / series.c[t - 1];
            assert!(rel < 0.05, "day {t}: {rel}");
        }
    }

    #[test]
    fn short_window_and_misaligned_rt_are_rejected() {
        let g = toy_g();
        assert!(simulate_state(&Seeding::new(1.0), 5, &g, &[1.0; 5], 10.0).is_err());
        assert!(simulate_state(&Seeding::new(1.0), 10, &g, &[1.0; 9], 10.0).is_err());
    }

    #[test]
    fn simulate_matches_step_by_step_recursion() {
        let g = discretize(&GammaSpec::SERIAL_INTERVAL, 80).unwrap();
        let days = 80;
        let rt: Vec<f64> = (0..days).map(|t| 3.0 - 0.02 * t as f64).collect();
        let series = simulate_state(&Seeding::new(20.0), days, &g, &rt, 2e5).unwrap();
        let mut hist: Vec<f64> = vec![20.0; SEED_DAYS];
        for t in SEED_DAYS..days {
            let next = renewal_step(&hist, &g, rt[t], 2e5);
            hist.push(next);
        }
        for (a, b) in series.c.iter().zip(&hist) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn doubling_the_seed_doubles_infections_at_small_prevalence() {
        let g = discretize(&GammaSpec::SERIAL_INTERVAL, 60).unwrap();
        let days = 60;
        let rt = vec![2.5; days];
        let n = 1e13;
        let a = simulate_state(&Seeding::new(10.0), days, &g, &rt, n).unwrap();
        let b = simulate_state(&Seeding::new(20.0), days, &g, &rt, n).unwrap();
        let mut cum = 0.0;
        for t in 0..days {
            cum += b.c[t];
            if cum >= 1e-3 * n {
                break;
            }
            let rel = (b.c[t] - 2.0 * a.c[t]).abs() / (2.0 * a.c[t]);
            assert!(rel < 1e-6, "day {t}: {rel}");
        }
    }

    proptest! {
        #[test]
        fn rt_link_stays_in_bounds(
            r0 in 0.1f64..10.0,
            eff in proptest::array::uniform4(-2.0f64..2.0),
            gam in proptest::array::uniform4(-2.0f64..2.0),
            x in proptest::array::uniform4(-1.0f64..1.0),
            zb in proptest::array::uniform4(proptest::bool::ANY),
        ) {
            let p = RtParams { r0, alpha: eff, beta: [0.0; 4], gamma: gam };
            let z = zb.map(|b| if b { 1.0 } else { 0.0 });
            let r = rt_link(&p, &x, &z);
            prop_assert!(r > 0.0 && r < 2.0 * r0);
        }

        #[test]
        fn rt_link_is_monotone_in_each_covariate(
            r0 in 0.5f64..5.0,
            eff in -3.0f64..3.0,
            x in -1.0f64..1.0,
            dx in 0.01f64..0.5,
            k in 0usize..4,
        ) {
            prop_assume!(eff.abs() > 1e-3);
            let mut p = RtParams::constant(r0);
            p.alpha[k] = eff;
            let mut lo = [0.0; 4];
            lo[k] = x;
            let mut hi = lo;
            hi[k] = x + dx;
            let (r_lo, r_hi) = (rt_link(&p, &lo, &[0.0; 4]), rt_link(&p, &hi, &[0.0; 4]));
            if eff > 0.0 {
                prop_assert!(r_hi < r_lo);
            } else {
                prop_assert!(r_hi > r_lo);
            }
        }

        #[test]
        fn susceptibles_decline_and_attack_rate_is_capped(
            seed in 0.0f64..5e3,
            r in 0.5f64..8.0,
            pop in 1e3f64..1e7,
        ) {
            let g = discretize(&GammaSpec::SERIAL_INTERVAL, 40).unwrap();
            let days = 120;
            let series = simulate_state(&Seeding::new(seed), days, &g, &vec![r; days], pop).unwrap();
            prop_assert!(series.cumulative() <= pop);
            prop_assert!(series.c.iter().all(|c| *c >= 0.0));
            for w in series.s.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
