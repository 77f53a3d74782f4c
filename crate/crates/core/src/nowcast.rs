//! Reporting-delay correction.
//!
//! Deaths are reported with a delay. A reporting triangle (counts by date
//! of death and delay) gives the empirical share `η_d` of deaths reported
//! `d` days after they occur. Delay proportions are then modelled as
//! `p ~ Dirichlet(α η)` with `α ~ Gamma(100, 1)`, so `E[p_d] = η_d` and
//! `Var(p_d | α) = η_d (1 - η_d) / (α + 1)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Default maximum reporting delay in days.
pub const DEFAULT_MAX_DELAY: usize = 42;

/// Cumulative reported proportions below this are treated as unusable.
pub const REPORTED_FLOOR: f64 = 0.05;

/// Hyper-prior on the Dirichlet concentration: `Gamma(shape, rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for ConcentrationPrior {
    fn default() -> Self {
        ConcentrationPrior {
            shape: 100.0,
            rate: 1.0,
        }
    }
}

/// Death counts cross-classified by date of death and reporting delay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportingTriangle {
    counts: BTreeMap<(NaiveDate, usize), u64>,
    max_delay: usize,
    as_of: NaiveDate,
}

#[derive(Debug, Deserialize)]
struct TriangleRow {
    death_date: NaiveDate,
    report_date: NaiveDate,
    count: u64,
}

impl ReportingTriangle {
    /// Builds a triangle from `(death_date, delay, count)` triples. Delays
    /// beyond `max_delay` are folded into the last delay bin.
    pub fn new(
        entries: impl IntoIterator<Item = (NaiveDate, usize, u64)>,
        max_delay: usize,
        as_of: NaiveDate,
    ) -> Self {
        let mut counts = BTreeMap::new();
        for (date, delay, count) in entries {
            *counts.entry((date, delay.min(max_delay))).or_insert(0) += count;
        }
        ReportingTriangle {
            counts,
            max_delay,
            as_of,
        }
    }

    /// Reads `death_date,report_date,count` CSV. The as-of date is the
    /// latest report date in the file.
    pub fn from_reader<R: Read>(rdr: R, max_delay: usize, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["death_date", "report_date", "count"] {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!(
                    "expected header `death_date,report_date,count`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut entries = Vec::new();
        let mut as_of: Option<NaiveDate> = None;
        for (i, row) in reader.deserialize::<TriangleRow>().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::Parse {
                path: path.into(),
                line,
                message: e.to_string(),
            })?;
            let delay = (row.report_date - row.death_date).num_days();
            if delay < 0 {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: "report_date precedes death_date".into(),
                });
            }
            as_of = Some(as_of.map_or(row.report_date, |d| d.max(row.report_date)));
            entries.push((row.death_date, delay as usize, row.count));
        }
        let as_of = as_of.ok_or_else(|| Error::Validation(format!("{}: empty reporting triangle", path.display())))?;
        Ok(Self::new(entries, max_delay, as_of))
    }

    pub fn load(path: &Path, max_delay: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, max_delay, path)
    }

    /// Writes the triangle as `death_date,report_date,count`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["death_date", "report_date", "count"])?;
        for (&(date, delay), &count) in &self.counts {
            let report = date + chrono::Duration::days(delay as i64);
            w.write_record([date.to_string(), report.to_string(), count.to_string()])?;
        }
        w.flush()
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn as_of(&self) -> NaiveDate {
        self.as_of
    }

    pub fn is_empty(&self) -> bool {
        self.counts.values().all(|&c| c == 0)
    }

    /// Death dates whose every delay up to `max_delay` has been observable.
    pub fn complete_dates(&self) -> Vec<NaiveDate> {
        let cutoff = self.as_of - chrono::Duration::days(self.max_delay as i64);
        let mut dates: Vec<NaiveDate> = self.counts.keys().map(|(d, _)| *d).filter(|d| *d <= cutoff).collect();
        dates.dedup();
        dates
    }
}

/// Empirical reporting proportions `η_0..η_k` (indexed by delay in days).
#[derive(Debug, Clone, PartialEq)]
pub struct DelayProfile {
    eta: Vec<f64>,
    pub alpha_prior: ConcentrationPrior,
}

impl DelayProfile {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() || eta.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidParameter("eta must be non-empty and non-negative".into()));
        }
        let total: f64 = eta.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("eta must sum to 1, sums to {total}")));
        }
        Ok(DelayProfile {
            eta,
            alpha_prior: ConcentrationPrior::default(),
        })
    }

    /// Everything reported on the day it happens.
    pub fn immediate() -> Self {
        DelayProfile {
            eta: vec![1.0],
            alpha_prior: ConcentrationPrior::default(),
        }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn max_delay(&self) -> usize {
        self.eta.len() - 1
    }

    /// Cumulative share reported by each age (days since death).
    pub fn cumulative(&self) -> Vec<f64> {
        cumulative_by_age(&self.eta)
    }

    /// Writes `delay_days,eta,cumulative`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delay_days", "eta", "cumulative"])?;
        for (d, (e, c)) in self.eta.iter().zip(self.cumulative()).enumerate() {
            w.write_record([d.to_string(), e.to_string(), c.to_string()])?;
        }
        w.flush()
    }
}

/// Running sums of per-delay proportions, clamped to at most one.
pub fn cumulative_by_age(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc.min(1.0)
        })
        .collect()
}

/// Pools the complete death dates of a triangle into per-delay proportions.
pub fn estimate_eta(triangle: &ReportingTriangle) -> Result<DelayProfile> {
    if triangle.is_empty() {
        return Err(Error::Validation("reporting triangle is empty".into()));
    }
    let complete = triangle.complete_dates();
    if complete.is_empty() {
        return Err(Error::Validation(format!(
            "no death date is fully observed at max delay {} (as of {})",
            triangle.max_delay, triangle.as_of
        )));
    }
    let last = *complete.last().expect("non-empty");
    let mut by_delay = vec![0u64; triangle.max_delay + 1];
    for (&(date, delay), &count) in &triangle.counts {
        if date <= last {
            by_delay[delay] += count;
        }
    }
    let total: u64 = by_delay.iter().sum();
    if total == 0 {
        return Err(Error::Validation("fully observed death dates hold no deaths".into()));
    }
    let eta: Vec<f64> = by_delay.iter().map(|&c| c as f64 / total as f64).collect();
    DelayProfile::new(eta)
}

/// Draws `α ~ Gamma(shape, rate)` then `p ~ Dirichlet(α η)`.
pub fn sample_delay_proportions<R: Rng + ?Sized>(profile: &DelayProfile, rng: &mut R) -> Vec<f64> {
    let prior = profile.alpha_prior;
    let alpha = Gamma::new(prior.shape, 1.0 / prior.rate)
        .expect("valid concentration prior")
        .sample(rng);
    sample_delay_proportions_given(profile, alpha, rng)
}

/// `p ~ Dirichlet(α η)` for a fixed concentration. Zero entries of `η`
/// stay at zero.
pub fn sample_delay_proportions_given<R: Rng + ?Sized>(profile: &DelayProfile, alpha: f64, rng: &mut R) -> Vec<f64> {
    let mut p: Vec<f64> = profile
        .eta
        .iter()
        .map(|&e| {
            if e > 0.0 {
                Gamma::new(alpha * e, 1.0).expect("positive shape").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // every gamma underflowed; fall back to the mean
        p.copy_from_slice(&profile.eta);
    }
    p
}

/// Cumulative reported proportion for each day of a series ending on the
/// as-of date. The last day has age zero.
pub fn reporting_factors(len: usize, cumulative: &[f64]) -> Vec<f64> {
    (0..len)
        .map(|t| {
            let age = len - 1 - t;
            cumulative.get(age).copied().unwrap_or(1.0)
        })
        .collect()
}

/// Observed series divided by the cumulative share reported so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedSeries {
    /// `None` where the reported share is below [`REPORTED_FLOOR`].
    pub values: Vec<Option<f64>>,
}

impl AdjustedSeries {
    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// Inflates each day's count by `1 / P_t`; the final two days are dropped.
///
/// `cumulative[a]` is the share of deaths reported within `a` days; ages
/// past its end count as fully reported.
pub fn adjust_death_series(raw: &[u32], cumulative: &[f64]) -> Result<AdjustedSeries> {
    if cumulative.iter().any(|p| !(p.is_finite() && *p >= 0.0 && *p <= 1.0 + 1e-12)) {
        return Err(Error::InvalidParameter("reported proportions must lie in [0, 1]".into()));
    }
    let factors = reporting_factors(raw.len(), cumulative);
    let keep = raw.len().saturating_sub(crate::observation::DROPPED_TRAILING_DAYS);
    let values = raw[..keep]
        .iter()
        .zip(&factors)
        .map(|(&y, &p)| if p < REPORTED_FLOOR { None } else { Some(y as f64 / p) })
        .collect();
    Ok(AdjustedSeries { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::weighted::WeightedIndex;
    use rand_distr::{Binomial, Poisson};

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn all_immediate_reports_give_degenerate_profile() {
        let d0 = date("2020-05-01");
        let tri = ReportingTriangle::new((0..10).map(|i| (d0 + chrono::Duration::days(i), 0, 7)), 3, date("2020-05-20"));
        let profile = estimate_eta(&tri).unwrap();
        assert_eq!(profile.eta(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_complete_date_ratio() {
        let d0 = date("2020-05-01");
        let tri = ReportingTriangle::new([(d0, 0, 10), (d0, 1, 30)], 1, date("2020-05-02"));
        let profile = estimate_eta(&tri).unwrap();
        assert_eq!(profile.eta(), &[0.25, 0.75]);
    }

    #[test]
    fn incomplete_dates_are_ignored() {
        let d0 = date("2020-05-01");
        // only d0 is complete as of 05-02 with k = 1
        let tri = ReportingTriangle::new([(d0, 0, 10), (d0, 1, 30), (date("2020-05-02"), 0, 100)], 1, date("2020-05-02"));
        assert_eq!(estimate_eta(&tri).unwrap().eta(), &[0.25, 0.75]);
    }

    #[test]
    fn empty_or_immature_triangle_errors() {
        let tri = ReportingTriangle::new(Vec::new(), 3, date("2020-05-02"));
        assert!(estimate_eta(&tri).is_err());
        let tri = ReportingTriangle::new([(date("2020-05-01"), 0, 5)], 3, date("2020-05-02"));
        assert!(estimate_eta(&tri).is_err());
    }

    #[test]
    fn recovers_known_profile_from_simulated_triangle() {
        let truth = [0.1, 0.3, 0.4, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pick = WeightedIndex::new(truth).unwrap();
        let d0 = date("2020-04-01");
        let mut entries = Vec::new();
        for i in 0..100_000 {
            let death = d0 + chrono::Duration::days((i % 50) as i64);
            entries.push((death, pick.sample(&mut rng), 1));
        }
        // as of day 53: every date up to day 50 is complete
        let tri = ReportingTriangle::new(entries, 3, d0 + chrono::Duration::days(53));
        let profile = estimate_eta(&tri).unwrap();
        for (got, want) in profile.eta().iter().zip(truth) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn triangle_csv_round_trip() {
        let d0 = date("2020-05-01");
        let tri = ReportingTriangle::new([(d0, 0, 10), (d0, 2, 30), (date("2020-05-03"), 1, 4)], 5, date("2020-05-04"));
        let mut buf = Vec::new();
        tri.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("death_date,report_date,count\n"));
        let back = ReportingTriangle::from_reader(text.as_bytes(), 5, Path::new("mem")).unwrap();
        assert_eq!(back, tri);
    }

    #[test]
    fn triangle_rejects_bad_rows() {
        let bad = "death_date,report_date,count\n2020-05-03,2020-05-01,4\n";
        assert!(ReportingTriangle::from_reader(bad.as_bytes(), 5, Path::new("mem")).is_err());
        let bad = "date,count\n2020-05-03,4\n";
        assert!(ReportingTriangle::from_reader(bad.as_bytes(), 5, Path::new("mem")).is_err());
    }

    #[test]
    fn dirichlet_draws_lie_on_the_simplex() {
        let profile = DelayProfile::new(vec![0.05, 0.0, 0.45, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = sample_delay_proportions(&profile, &mut rng);
            assert!(p.iter().all(|v| *v >= 0.0));
            assert_eq!(p[1], 0.0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_csv_has_documented_header() {
        let profile = DelayProfile::new(vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        profile.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "delay_days,eta,cumulative\n0,0.25,0.25\n1,0.75,1\n");
    }

    #[test]
    fn mature_days_are_unchanged_and_tail_is_dropped() {
        let raw = [5u32, 7, 9, 11, 13];
        let adj = adjust_death_series(&raw, &[1.0]).unwrap();
        assert_eq!(adj.values, vec![Some(5.0), Some(7.0), Some(9.0)]);
    }

    #[test]
    fn direct_division_and_floor() {
        // ages: day 0 -> 4, day 1 -> 3, day 2 -> 2
        let raw = [45u32, 45, 45, 1, 1];
        let cumulative = [0.01, 0.02, 0.04, 0.9];
        let adj = adjust_death_series(&raw, &cumulative).unwrap();
        assert_eq!(adj.values.len(), 3);
        assert_eq!(adj.values[0], Some(45.0));
        assert!((adj.values[1].unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(adj.values[2], None);
    }

    #[test]
    fn adjustment_recovers_thinned_totals() {
        let eta = [0.1, 0.2, 0.3, 0.2, 0.1, 0.1];
        let profile = DelayProfile::new(eta.to_vec()).unwrap();
        let cumulative = profile.cumulative();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let days = 40;
        let true_deaths: Vec<u64> = (0..days).map(|_| Poisson::new(400.0).unwrap().sample(&mut rng) as u64).collect();
        let observed: Vec<u32> = (0..days)
            .map(|t| {
                let p = cumulative.get(days - 1 - t).copied().unwrap_or(1.0);
                Binomial::new(true_deaths[t], p).unwrap().sample(&mut rng) as u32
            })
            .collect();
        let adj = adjust_death_series(&observed, &cumulative).unwrap();
        let kept = days - 2;
        let truth: f64 = true_deaths[..kept].iter().map(|&v| v as f64).sum();
        // thinning variance: Σ D_t (1 - P_t) / P_t
        let var: f64 = (0..kept)
            .map(|t| {
                let p = cumulative.get(days - 1 - t).copied().unwrap_or(1.0);
                true_deaths[t] as f64 * (1.0 - p) / p
            })
            .sum();
        assert!((adj.total() - truth).abs() < 4.0 * var.sqrt().max(1.0), "{} vs {truth}", adj.total());
    }
}
