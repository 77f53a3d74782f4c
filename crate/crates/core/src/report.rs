//! Derived per-state quantities from posterior draws and the files that
//! carry them: a summary table, per-day band tables and a JSON manifest.
//!
//! Point estimates are posterior medians; intervals are equal-tailed
//! posterior credible intervals.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{Fit, RHAT_THRESHOLD};
use crate::hierarchy::{Centering, ParamVector};
use crate::ingest::StateData;
use crate::model::Model;
use crate::nowcast::{cumulative_by_age, reporting_factors, sample_delay_proportions_given};
use crate::sampler::{quantile_sorted, ChainConfig, Diagnostic};

/// Days counted as currently infected.
pub const ACTIVE_DAYS: usize = 14;

/// Quantiles written for every per-day series.
pub const BAND_PROBS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Column order of the summary table.
pub const SUMMARY_HEADER: [&str; 14] = [
    "state",
    "ifr_percent",
    "population",
    "deaths",
    "deaths_per_million",
    "infections_thousands",
    "infections_thousands_lo",
    "infections_thousands_hi",
    "infections_prev_14d_thousands",
    "infections_prev_14d_thousands_lo",
    "infections_prev_14d_thousands_hi",
    "attack_rate_percent",
    "attack_rate_percent_lo",
    "attack_rate_percent_hi",
];

/// Series in a band table, each followed by its [`BAND_PROBS`] columns.
pub const BAND_SERIES: [&str; 4] = ["infections", "expected_deaths", "reported_deaths", "rt"];

pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "report.json";

/// Percentage of the population infected up to and including `as_of_day`,
/// capped at 100.
pub fn attack_rate(infections: &[f64], population: f64, as_of_day: usize) -> Result<f64> {
    if as_of_day >= infections.len() {
        return Err(Error::InvalidParameter(format!(
            "day {as_of_day} outside a {}-day series",
            infections.len()
        )));
    }
    if !(population > 0.0) {
        return Err(Error::InvalidParameter("population must be positive".into()));
    }
    let total: f64 = infections[..=as_of_day].iter().sum();
    Ok((100.0 * total / population).min(100.0))
}

/// Infections over the [`ACTIVE_DAYS`] days ending on `as_of_day`.
pub fn active_infections(infections: &[f64], as_of_day: usize) -> Result<f64> {
    if as_of_day >= infections.len() {
        return Err(Error::InvalidParameter(format!(
            "day {as_of_day} outside a {}-day series",
            infections.len()
        )));
    }
    if as_of_day + 1 < ACTIVE_DAYS {
        return Err(Error::InvalidParameter(format!(
            "window underflow: day {as_of_day} has fewer than {ACTIVE_DAYS} days behind it"
        )));
    }
    Ok(infections[as_of_day + 1 - ACTIVE_DAYS..=as_of_day].iter().sum())
}

pub fn deaths_per_million(deaths: u64, population: u64) -> f64 {
    1e6 * deaths as f64 / population as f64
}

/// Median with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    fn of(values: &[f64]) -> Interval {
        let sorted = sorted(values);
        Interval {
            median: quantile_sorted(&sorted, 0.5),
            lo: quantile_sorted(&sorted, 0.025),
            hi: quantile_sorted(&sorted, 0.975),
        }
    }

    fn scaled(self, k: f64) -> Interval {
        Interval {
            median: self.median * k,
            lo: self.lo * k,
            hi: self.hi * k,
        }
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub state: String,
    pub ifr_percent: f64,
    pub population: u64,
    /// Reported deaths up to the as-of date.
    pub deaths: u64,
    pub deaths_per_million: u64,
    pub infections_thousands: Interval,
    pub infections_prev_14d_thousands: Interval,
    pub attack_rate_percent: Interval,
}

/// The [`BAND_PROBS`] quantiles of one day's draws.
pub type Band = [f64; 5];

/// Per-day bands for one state over its modelled window.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBands {
    pub state: String,
    pub dates: Vec<NaiveDate>,
    pub observed: Vec<u32>,
    pub infections: Vec<Band>,
    /// True deaths by date of death, before under-reporting.
    pub expected_deaths: Vec<Band>,
    /// Deaths on the reported scale with a reporting-delay draw per sample.
    pub reported_deaths: Vec<Band>,
    pub rt: Vec<Band>,
}

impl StateBands {
    fn series(&self) -> [&[Band]; 4] {
        [&self.infections, &self.expected_deaths, &self.reported_deaths, &self.rt]
    }

    pub fn file_name(&self) -> String {
        let slug: String = self
            .state
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("bands_{slug}.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

/// Sampler settings and convergence evidence stored with a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub config: ChainConfig,
    pub seed: u64,
    pub as_of: NaiveDate,
    pub n_draws: usize,
    pub centering: Centering,
    pub converged: bool,
    /// Set when any R-hat exceeds the threshold.
    pub warning: Option<String>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub accept_rate: Vec<f64>,
    pub divergent: Vec<usize>,
    pub leapfrog: Vec<f64>,
    pub parameters: Vec<ParameterDiagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub rows: Vec<SummaryRow>,
    pub bands: Vec<StateBands>,
    pub run: RunInfo,
}

/// Summarizes a fit as of `as_of`, or as of the last day observed in
/// every state when `None`. `seed` drives the reporting-delay draws.
pub fn build_report(
    model: &Model,
    fit: &Fit,
    data: &[StateData],
    cfg: &ChainConfig,
    as_of: Option<NaiveDate>,
    seed: u64,
) -> Result<FitReport> {
    let params = fit.params();
    if params.is_empty() {
        return Err(Error::InsufficientDraws("fit holds no draws".into()));
    }
    let last = model
        .states
        .iter()
        .map(|st| st.date(st.days() - 1))
        .min()
        .expect("model has states");
    let as_of = as_of.unwrap_or(last);
    let per_state: Vec<(SummaryRow, StateBands)> = (0..model.n_states())
        .into_par_iter()
        .map(|m| {
            let name = &model.states[m].name;
            let sd = data
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| Error::Validation(format!("no input data for state `{name}`")))?;
            summarize_state(model, &params, sd, m, as_of, seed)
        })
        .collect::<Result<_>>()?;
    let (rows, bands) = per_state.into_iter().unzip();
    let parameters: Vec<ParameterDiagnostic> = fit
        .draws
        .names
        .iter()
        .zip(&fit.diagnostics)
        .map(|(name, &Diagnostic { rhat, ess })| ParameterDiagnostic {
            name: name.clone(),
            rhat,
            ess,
        })
        .collect();
    let bad = fit.nonconverged();
    let warning = (!bad.is_empty()).then(|| {
        format!(
            "NOT CONVERGED: R-hat above {RHAT_THRESHOLD} for {}; intervals are unreliable",
            bad.join(", ")
        )
    });
    Ok(FitReport {
        rows,
        bands,
        run: RunInfo {
            config: cfg.clone(),
            seed,
            as_of,
            n_draws: params.len(),
            centering: model.centering,
            converged: bad.is_empty(),
            warning,
            max_rhat: fit.max_rhat(),
            min_ess: fit.min_ess(),
            accept_rate: fit.draws.accept_rate.clone(),
            divergent: fit.draws.divergent.clone(),
            leapfrog: fit.draws.leapfrog.clone(),
            parameters,
        },
    })
}

fn summarize_state(
    model: &Model,
    params: &[ParamVector],
    sd: &StateData,
    m: usize,
    as_of: NaiveDate,
    seed: u64,
) -> Result<(SummaryRow, StateBands)> {
    let st = &model.states[m];
    let days = st.days();
    let offset = (as_of - st.start).num_days();
    if offset < 0 || offset as usize >= days {
        return Err(Error::InvalidParameter(format!(
            "as-of date {as_of} outside the modelled window of {}",
            st.name
        )));
    }
    let day = offset as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);

    let n = params.len();
    let mut infections = vec![0.0; n * days];
    let mut deaths = vec![0.0; n * days];
    let mut reported = vec![0.0; n * days];
    let mut rt = vec![0.0; n * days];
    let mut cumulative = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    let mut attack = Vec::with_capacity(n);
    for (i, theta) in params.iter().enumerate() {
        let latent = model.latent(theta, m);
        let c = &latent.infections.c;
        cumulative.push(c[..=day].iter().sum::<f64>());
        active.push(active_infections(c, day)?);
        attack.push(attack_rate(c, st.population, day)?);
        let p = sample_delay_proportions_given(&model.delay, theta.delay_alpha, &mut rng);
        let factors = reporting_factors(days, &cumulative_by_age(&p));
        let row = i * days..(i + 1) * days;
        infections[row.clone()].copy_from_slice(c);
        deaths[row.clone()].copy_from_slice(&latent.deaths);
        rt[row.clone()].copy_from_slice(&latent.rt);
        let psi = theta.states[m].psi;
        for ((r, d), f) in reported[row].iter_mut().zip(&latent.deaths).zip(&factors) {
            *r = psi * f * d;
        }
    }

    let cut = sd.deaths.index_of(as_of).map_or(sd.deaths.len(), |i| i + 1);
    let death_total: u64 = sd.deaths.values[..cut].iter().map(|&d| d as u64).sum();
    let row = SummaryRow {
        state: st.name.clone(),
        ifr_percent: sd.ifr_percent,
        population: sd.population,
        deaths: death_total,
        deaths_per_million: deaths_per_million(death_total, sd.population).round() as u64,
        infections_thousands: Interval::of(&cumulative).scaled(1e-3),
        infections_prev_14d_thousands: Interval::of(&active).scaled(1e-3),
        attack_rate_percent: Interval::of(&attack),
    };
    let bands = StateBands {
        state: st.name.clone(),
        dates: (0..days).map(|t| st.date(t)).collect(),
        observed: st.observed.clone(),
        infections: day_bands(&infections, n, days),
        expected_deaths: day_bands(&deaths, n, days),
        reported_deaths: day_bands(&reported, n, days),
        rt: day_bands(&rt, n, days),
    };
    Ok((row, bands))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Quantiles per day of a draw-major `n × days` block.
fn day_bands(block: &[f64], n: usize, days: usize) -> Vec<Band> {
    let mut column = vec![0.0; n];
    (0..days)
        .map(|t| {
            for (i, v) in column.iter_mut().enumerate() {
                *v = block[i * days + t];
            }
            column.sort_by(f64::total_cmp);
            BAND_PROBS.map(|p| quantile_sorted(&column, p))
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        let iv = |i: &Interval| [fmt(i.median), fmt(i.lo), fmt(i.hi)];
        let mut rec = vec![
            r.state.clone(),
            fmt(r.ifr_percent),
            r.population.to_string(),
            r.deaths.to_string(),
            r.deaths_per_million.to_string(),
        ];
        rec.extend(iv(&r.infections_thousands));
        rec.extend(iv(&r.infections_prev_14d_thousands));
        rec.extend(iv(&r.attack_rate_percent));
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Header of a band table.
pub fn band_header() -> Vec<String> {
    let mut h = vec!["date".to_string(), "observed_deaths".to_string()];
    for s in BAND_SERIES {
        for p in BAND_PROBS {
            h.push(format!("{s}_q{:03}", (p * 1000.0).round() as u32));
        }
    }
    h
}

pub fn write_bands<W: Write>(bands: &StateBands, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(band_header())?;
    let series = bands.series();
    for (t, date) in bands.dates.iter().enumerate() {
        let mut rec = vec![date.to_string(), bands.observed[t].to_string()];
        for s in series {
            rec.extend(s[t].iter().map(|&v| fmt(v)));
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Fixed precision keeps files stable across platforms.
fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Serialize)]
struct Manifest<'a> {
    summary: &'a str,
    bands: Vec<(String, String)>,
    #[serde(flatten)]
    run: &'a RunInfo,
}

/// Writes the summary table, one band table per state and the manifest
/// into `dir`, returning the paths written.
pub fn emit_report(report: &FitReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join(SUMMARY_FILE);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_summary(&report.rows, f).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for b in &report.bands {
        let path = dir.join(b.file_name());
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_bands(b, f).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let manifest = Manifest {
        summary: SUMMARY_FILE,
        bands: report.bands.iter().map(|b| (b.state.clone(), b.file_name())).collect(),
        run: &report.run,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{flatten, sample_prior, PriorSpec};
    use crate::ingest::table1;
    use crate::model::tests::toy_state;
    use crate::model::ModelOptions;
    use crate::nowcast::DelayProfile;
    use crate::sampler::PosteriorDraws;
    use proptest::prelude::*;

    #[test]
    fn attack_rate_examples() {
        assert_eq!(attack_rate(&[0.0; 20], 1000.0, 19).unwrap(), 0.0);
        let mut c = vec![0.0; 30];
        c[5] = 1_000_000.0;
        c[20] = 710_000.0;
        let ar = attack_rate(&c, 3_606_940.0, 29).unwrap();
        assert!((ar - 47.4).abs() < 0.1, "{ar}");
        let ar = attack_rate(&[3_060_000.0], 9_025_363.0, 0).unwrap();
        assert!((ar - 33.9).abs() < 0.1, "{ar}");
        assert_eq!(attack_rate(&[600.0, 400.0, 50.0], 1000.0, 2).unwrap(), 100.0);
        assert_eq!(attack_rate(&[600.0, 400.0, 50.0], 1000.0, 0).unwrap(), 60.0);
        assert!(attack_rate(&[1.0; 5], 1000.0, 5).is_err());
    }

    #[test]
    fn active_infections_window() {
        assert_eq!(active_infections(&[10.0; 30], 29).unwrap(), 140.0);
        let mut c = vec![0.0; 40];
        c[39 - 15] = 100.0;
        assert_eq!(active_infections(&c, 39).unwrap(), 0.0);
        c[39 - 13] = 100.0;
        assert_eq!(active_infections(&c, 39).unwrap(), 100.0);
        assert_eq!(active_infections(&[1.0; 14], 13).unwrap(), 14.0);
        assert!(active_infections(&[1.0; 14], 12).is_err());
    }

    #[test]
    fn deaths_per_million_examples() {
        assert_eq!(deaths_per_million(6119, 9_025_363).round(), 678.0);
        assert_eq!(deaths_per_million(6392, 17_338_220).round(), 369.0);
        assert_eq!(deaths_per_million(0, 17_338_220), 0.0);
    }

    #[test]
    fn table_deaths_per_million_within_one() {
        let rows = table1();
        assert_eq!(rows.len(), 32);
        for r in rows {
            let dpm = deaths_per_million(r.deaths, r.population);
            assert!((dpm - r.deaths_per_million as f64).abs() <= 1.0, "{}: {dpm}", r.state);
        }
    }

    fn fixture(n_draws: usize) -> (Model, Fit, Vec<StateData>) {
        let data = vec![toy_state("Alpha", 90, 1), toy_state("Beta Two", 80, 2)];
        let delay = DelayProfile::new(vec![0.3, 0.3, 0.2, 0.1, 0.1]).unwrap();
        let model = Model::build(&data, &delay, &PriorSpec::default(), &ModelOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut values = Vec::new();
        for _ in 0..n_draws {
            let mut th = sample_prior(&model.priors, 2, &mut rng);
            for s in th.states.iter_mut() {
                s.r0 = s.r0.clamp(1.5, 4.0);
            }
            values.extend(flatten(&th));
        }
        let names = model.parameter_names();
        let d = names.len();
        let draws = PosteriorDraws::new(names, 2, n_draws / 2, values).unwrap();
        let fit = Fit {
            draws,
            diagnostics: vec![Diagnostic { rhat: 1.001, ess: 400.0 }; d],
            n_states: 2,
        };
        (model, fit, data)
    }

    /// Type-7 quantile by partial selection rather than a full sort.
    fn oracle_quantile(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        let h = (v.len() - 1) as f64 * p;
        let k = h.floor() as usize;
        let (_, lo, rest) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap());
        let lo = *lo;
        let hi = rest.iter().cloned().fold(f64::INFINITY, f64::min);
        if h == k as f64 || rest.is_empty() {
            lo
        } else {
            lo + (h - k as f64) * (hi - lo)
        }
    }

    #[test]
    fn summaries_match_per_draw_oracle() {
        let (model, fit, data) = fixture(40);
        let as_of = NaiveDate::from_ymd_opt(2020, 5, 10).unwrap();
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), Some(as_of), 5).unwrap();
        for (m, st) in model.states.iter().enumerate() {
            let day = (as_of - st.start).num_days() as usize;
            let mut ar = Vec::new();
            let mut act = Vec::new();
            let mut cum = Vec::new();
            for th in fit.params() {
                let c = model.latent(&th, m).infections.c;
                let mut total = 0.0;
                let mut recent = 0.0;
                for (t, x) in c.iter().enumerate().take(day + 1) {
                    total += x;
                    if t + 14 > day {
                        recent += x;
                    }
                }
                cum.push(total);
                act.push(recent);
                ar.push((total / st.population * 100.0).min(100.0));
            }
            let row = &report.rows[m];
            for (iv, xs, k) in [
                (row.attack_rate_percent, &ar, 1.0),
                (row.infections_prev_14d_thousands, &act, 1e-3),
                (row.infections_thousands, &cum, 1e-3),
            ] {
                for (got, p) in [(iv.lo, 0.025), (iv.median, 0.5), (iv.hi, 0.975)] {
                    let want = oracle_quantile(xs, p) * k;
                    assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
                }
            }
            let sd = &data[m];
            let upto = (as_of - sd.deaths.start).num_days() as usize;
            let deaths: u64 = sd.deaths.values[..=upto].iter().map(|&d| d as u64).sum();
            assert_eq!(row.deaths, deaths);
            assert_eq!(row.population, sd.population);
        }
    }

    #[test]
    fn intervals_nest_and_stay_in_range() {
        let (model, fit, data) = fixture(60);
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, 1).unwrap();
        for r in &report.rows {
            for iv in [r.infections_thousands, r.infections_prev_14d_thousands, r.attack_rate_percent] {
                assert!(iv.lo <= iv.median && iv.median <= iv.hi, "{iv:?}");
            }
            assert!(r.attack_rate_percent.lo >= 0.0 && r.attack_rate_percent.hi <= 100.0);
        }
        for b in &report.bands {
            for s in b.series() {
                assert_eq!(s.len(), b.dates.len());
                for q in s {
                    assert!(q.windows(2).all(|w| w[0] <= w[1]), "{q:?}");
                }
            }
        }
        assert!(report.run.converged);
        assert!(report.run.warning.is_none());
    }

    #[test]
    fn reported_bands_sit_below_true_deaths() {
        let (model, fit, data) = fixture(40);
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, 1).unwrap();
        for b in &report.bands {
            for (r, d) in b.reported_deaths.iter().zip(&b.expected_deaths) {
                assert!(r[2] <= d[2] + 1e-12);
            }
        }
    }

    #[test]
    fn nonconverged_fit_is_flagged() {
        let (model, mut fit, data) = fixture(20);
        fit.diagnostics[3].rhat = 1.2;
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, 1).unwrap();
        assert!(!report.run.converged);
        let w = report.run.warning.unwrap();
        assert!(w.contains(&fit.draws.names[3]), "{w}");
    }

    #[test]
    fn as_of_outside_window_is_rejected() {
        let (model, fit, data) = fixture(20);
        let late = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        assert!(build_report(&model, &fit, &data, &ChainConfig::default(), Some(late), 1).is_err());
        let early = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
        assert!(build_report(&model, &fit, &data, &ChainConfig::default(), Some(early), 1).is_err());
    }

    #[test]
    fn summary_header_is_golden() {
        let (model, fit, data) = fixture(20);
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, 1).unwrap();
        let mut buf = Vec::new();
        write_summary(&report.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "state,ifr_percent,population,deaths,deaths_per_million,infections_thousands,infections_thousands_lo,\
             infections_thousands_hi,infections_prev_14d_thousands,infections_prev_14d_thousands_lo,\
             infections_prev_14d_thousands_hi,attack_rate_percent,attack_rate_percent_lo,attack_rate_percent_hi"
        );
        let bundled = include_str!("../fixtures/table1.csv");
        assert_eq!(text.lines().next(), bundled.lines().next());
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn band_table_has_one_row_per_day() {
        let (model, fit, data) = fixture(20);
        let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, 1).unwrap();
        for (b, st) in report.bands.iter().zip(&model.states) {
            let mut buf = Vec::new();
            write_bands(b, &mut buf).unwrap();
            let text = String::from_utf8(buf).unwrap();
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap().split(',').collect();
            assert_eq!(header.len(), 2 + 4 * 5);
            assert_eq!(header[2], "infections_q025");
            assert_eq!(header[21], "rt_q975");
            assert_eq!(lines.count(), st.days());
        }
        assert_eq!(report.bands[1].file_name(), "bands_beta_two.csv");
    }

    #[test]
    fn emission_is_byte_identical_under_a_fixed_seed() {
        let (model, fit, data) = fixture(20);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let mut outputs = Vec::new();
        for (dir, seed) in dirs.iter().zip([9, 9, 10]) {
            let report = build_report(&model, &fit, &data, &ChainConfig::default(), None, seed).unwrap();
            let paths = emit_report(&report, dir.path()).unwrap();
            assert_eq!(paths.len(), 4);
            outputs.push(paths.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_ne!(outputs[0][1], outputs[2][1]);
        assert_eq!(outputs[0][0], outputs[2][0]);
        let json: serde_json::Value = serde_json::from_slice(&outputs[0][3]).unwrap();
        assert_eq!(json["summary"], "summary.csv");
        assert_eq!(json["converged"], true);
        assert_eq!(json["parameters"].as_array().unwrap().len(), model.dim());
    }

    proptest! {
        #[test]
        fn attack_rate_is_capped(c in proptest::collection::vec(0.0f64..1e6, 1..60), pop in 1.0f64..1e7) {
            let day = c.len() - 1;
            let ar = attack_rate(&c, pop, day).unwrap();
            prop_assert!((0.0..=100.0).contains(&ar));
        }

        #[test]
        fn active_never_exceeds_cumulative(c in proptest::collection::vec(0.0f64..1e6, 14..60)) {
            let day = c.len() - 1;
            let total: f64 = c.iter().sum();
            prop_assert!(active_infections(&c, day).unwrap() <= total * (1.0 + 1e-12));
        }
    }
}
