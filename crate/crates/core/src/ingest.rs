//! Input loading, validation and preprocessing.
//!
//! CSV schemas (headers are matched exactly):
//!
//! | file        | header                          |
//! |-------------|---------------------------------|
//! | deaths      | `state,date,deaths`             |
//! | mobility    | `state,date,k1,k2,k3,k4`        |
//! | population  | `state,population`              |
//! | ifr         | `state,ifr_percent`             |
//!
//! Dates are ISO-8601 (`YYYY-MM-DD`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::renewal::{MobilityMatrix, N_COVARIATES};

pub const DEATHS_HEADER: [&str; 3] = ["state", "date", "deaths"];
pub const MOBILITY_HEADER: [&str; 6] = ["state", "date", "k1", "k2", "k3", "k4"];
pub const POPULATION_HEADER: [&str; 2] = ["state", "population"];
pub const IFR_HEADER: [&str; 2] = ["state", "ifr_percent"];

/// Cumulative deaths that mark the start of a state's fitted window.
pub const DEATH_THRESHOLD: u64 = 10;
/// Days modelled before the first fitted day.
pub const WINDOW_LEAD_DAYS: usize = 30;
/// Loader bounds on per-state IFR, in percent (exclusive).
pub const IFR_PERCENT_RANGE: (f64, f64) = (0.0, 10.0);

/// First day of the post-relaxation dummies.
pub fn default_relaxation_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 6, 1).expect("valid date")
}

/// A contiguous daily series starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries<T> {
    pub start: NaiveDate,
    pub values: Vec<T>,
}

impl<T> DailySeries<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }

    pub fn end(&self) -> NaiveDate {
        self.date(self.values.len().saturating_sub(1))
    }

    /// Day index of `date`, if it falls inside the series.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start).num_days();
        (d >= 0 && (d as usize) < self.values.len()).then_some(d as usize)
    }
}

/// Parsed CSV contents plus the non-fatal issues found along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub data: BTreeMap<String, T>,
    pub warnings: Vec<String>,
}

fn check_header(reader: &mut csv::Reader<impl Read>, want: &[&str], path: &Path) -> Result<()> {
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != want {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr)
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn parse_date(field: &str, path: &Path, line: u64) -> Result<NaiveDate> {
    field
        .parse::<NaiveDate>()
        .map_err(|e| parse_err(path, line, format!("bad date `{field}`: {e}")))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads `state,date,deaths` rows into contiguous per-state series.
///
/// Dates must increase strictly within a state; gaps are zero-filled and
/// reported as warnings.
pub fn read_deaths<R: Read>(rdr: R, path: &Path) -> Result<Loaded<DailySeries<u32>>> {
    let mut reader = csv_reader(rdr);
    check_header(&mut reader, &DEATHS_HEADER, path)?;
    let mut data: BTreeMap<String, DailySeries<u32>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let state = rec[0].to_string();
        if state.is_empty() {
            return Err(parse_err(path, line, "empty state name"));
        }
        let date = parse_date(&rec[1], path, line)?;
        let count: i64 = rec[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad death count `{}`", &rec[2])))?;
        if count < 0 {
            return Err(Error::Validation(format!(
                "{}: line {line}: negative death count {count} for {state} on {date}",
                path.display()
            )));
        }
        let count = u32::try_from(count).map_err(|_| parse_err(path, line, "death count too large"))?;
        match data.get_mut(&state) {
            None => {
                data.insert(state, DailySeries { start: date, values: vec![count] });
            }
            Some(series) => {
                let next = series.end() + Duration::days(1);
                if date < next {
                    return Err(parse_err(
                        path,
                        line,
                        format!("dates for {state} are not increasing ({date} after {})", series.end()),
                    ));
                }
                if date > next {
                    let gap = (date - next).num_days() as usize;
                    warnings.push(format!("{state}: {gap} missing day(s) before {date} zero-filled"));
                    series.values.extend(std::iter::repeat_n(0, gap));
                }
                series.values.push(count);
            }
        }
    }
    Ok(Loaded { data, warnings })
}

pub fn load_deaths(path: &Path) -> Result<Loaded<DailySeries<u32>>> {
    read_deaths(open(path)?, path)
}

/// Raw (unsmoothed) daily mobility indicators for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMobility {
    pub start: NaiveDate,
    pub indicators: [Vec<f64>; N_COVARIATES],
}

impl RawMobility {
    pub fn len(&self) -> usize {
        self.indicators[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fills interior `None` gaps by linear interpolation and edge gaps by
/// carrying the nearest observed value. Returns the number of filled days.
fn fill_gaps(values: &mut [Option<f64>]) -> Option<usize> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (&first, &last) = (known.first()?, known.last()?);
    let mut filled = 0;
    for i in 0..values.len() {
        if values[i].is_some() {
            continue;
        }
        filled += 1;
        values[i] = Some(if i < first {
            values[first].unwrap()
        } else if i > last {
            values[last].unwrap()
        } else {
            let hi = *known.iter().find(|&&k| k > i).unwrap();
            let lo = *known.iter().rev().find(|&&k| k < i).unwrap();
            let (a, b) = (values[lo].unwrap(), values[hi].unwrap());
            a + (b - a) * (i - lo) as f64 / (hi - lo) as f64
        });
    }
    Some(filled)
}

/// Reads `state,date,k1,k2,k3,k4`. Missing days (absent rows or empty
/// cells) are linearly interpolated and flagged.
pub fn read_mobility<R: Read>(rdr: R, path: &Path) -> Result<Loaded<RawMobility>> {
    let mut reader = csv_reader(rdr);
    check_header(&mut reader, &MOBILITY_HEADER, path)?;
    let mut rows: BTreeMap<String, (NaiveDate, Vec<[Option<f64>; N_COVARIATES]>)> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 6 {
            return Err(parse_err(path, line, format!("expected 6 fields, found {}", rec.len())));
        }
        let state = rec[0].to_string();
        let date = parse_date(&rec[1], path, line)?;
        let mut vals = [None; N_COVARIATES];
        for k in 0..N_COVARIATES {
            let f = &rec[2 + k];
            if !f.is_empty() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad mobility value `{f}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, "non-finite mobility value"));
                }
                vals[k] = Some(v);
            }
        }
        let entry = rows.entry(state.clone()).or_insert_with(|| (date, Vec::new()));
        let expected = entry.0 + Duration::days(entry.1.len() as i64);
        if !entry.1.is_empty() && date < expected {
            return Err(parse_err(path, line, format!("dates for {state} are not increasing")));
        }
        while entry.0 + Duration::days(entry.1.len() as i64) < date {
            entry.1.push([None; N_COVARIATES]);
        }
        entry.1.push(vals);
    }
    let mut data = BTreeMap::new();
    let mut warnings = Vec::new();
    for (state, (start, days)) in rows {
        let mut indicators: [Vec<f64>; N_COVARIATES] = Default::default();
        for k in 0..N_COVARIATES {
            let mut col: Vec<Option<f64>> = days.iter().map(|d| d[k]).collect();
            match fill_gaps(&mut col) {
                None => {
                    return Err(Error::Validation(format!(
                        "{}: indicator k{} has no values for {state}",
                        path.display(),
                        k + 1
                    )))
                }
                Some(0) => {}
                Some(n) => warnings.push(format!("{state}: k{} has {n} interpolated day(s)", k + 1)),
            }
            indicators[k] = col.into_iter().map(|v| v.unwrap()).collect();
        }
        data.insert(state, RawMobility { start, indicators });
    }
    Ok(Loaded { data, warnings })
}

pub fn load_mobility(path: &Path) -> Result<Loaded<RawMobility>> {
    read_mobility(open(path)?, path)
}

fn read_keyed<R: Read, T>(
    rdr: R,
    path: &Path,
    header: &[&str],
    parse: impl Fn(&str, &str, u64) -> Result<T>,
) -> Result<BTreeMap<String, T>> {
    let mut reader = csv_reader(rdr);
    check_header(&mut reader, header, path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let value = parse(&rec[0], &rec[1], line)?;
        if out.insert(rec[0].to_string(), value).is_some() {
            return Err(parse_err(path, line, format!("duplicate state `{}`", &rec[0])));
        }
    }
    Ok(out)
}

/// Reads `state,population`; populations must be positive integers.
pub fn read_population<R: Read>(rdr: R, path: &Path) -> Result<BTreeMap<String, u64>> {
    read_keyed(rdr, path, &POPULATION_HEADER, |state, v, line| {
        let n: u64 = v
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad population `{v}`")))?;
        if n == 0 {
            return Err(Error::Validation(format!("{}: population of {state} is zero", path.display())));
        }
        Ok(n)
    })
}

pub fn load_population(path: &Path) -> Result<BTreeMap<String, u64>> {
    read_population(open(path)?, path)
}

/// Reads `state,ifr_percent`; values must lie strictly inside (0, 10).
pub fn read_ifr<R: Read>(rdr: R, path: &Path) -> Result<BTreeMap<String, f64>> {
    read_keyed(rdr, path, &IFR_HEADER, |state, v, line| {
        let pct: f64 = v
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad ifr_percent `{v}`")))?;
        let (lo, hi) = IFR_PERCENT_RANGE;
        if !(pct > lo && pct < hi) {
            return Err(Error::Validation(format!(
                "{}: IFR of {state} is {pct}%, outside ({lo}%, {hi}%)",
                path.display()
            )));
        }
        Ok(pct)
    })
}

pub fn load_ifr(path: &Path) -> Result<BTreeMap<String, f64>> {
    read_ifr(open(path)?, path)
}

/// Trailing seven-day mean; the first six days average what is available.
pub fn moving_average(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for t in 0..raw.len() {
        let lo = t.saturating_sub(6);
        let window = &raw[lo..=t];
        out.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    out
}

/// Smooths the raw indicators and sets the dummies to one from
/// `relaxation` onwards.
pub fn smooth_mobility(raw: &RawMobility, relaxation: NaiveDate) -> Result<MobilityMatrix> {
    if raw.is_empty() {
        return Err(Error::Validation("mobility needs at least one day".into()));
    }
    let len = raw.len();
    let indicators = std::array::from_fn(|k| moving_average(&raw.indicators[k]));
    let flags: Vec<f64> = (0..len)
        .map(|t| if raw.start + Duration::days(t as i64) >= relaxation { 1.0 } else { 0.0 })
        .collect();
    MobilityMatrix::new(indicators, std::array::from_fn(|_| flags.clone()))
}

/// Returns `(window_start, fit_start)` as 0-based day indices.
///
/// `fit_start` is the day after cumulative deaths first reach `threshold`;
/// the window opens `lead` days earlier, clamped to the series start.
pub fn epidemic_window(deaths: &[u32], threshold: u64, lead: usize) -> Option<(usize, usize)> {
    let mut cumulative = 0u64;
    for (t, &d) in deaths.iter().enumerate() {
        cumulative += d as u64;
        if cumulative >= threshold {
            let fit_start = t + 1;
            return Some((fit_start.saturating_sub(lead), fit_start));
        }
    }
    None
}

/// Everything known about one state after ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct StateData {
    pub name: String,
    pub population: u64,
    pub deaths: DailySeries<u32>,
    /// Raw mobility aligned day-for-day with `deaths`.
    pub mobility: [Vec<f64>; N_COVARIATES],
    pub ifr_percent: f64,
    pub window_start: usize,
    pub fit_start: usize,
}

impl StateData {
    pub fn ifr(&self) -> f64 {
        self.ifr_percent / 100.0
    }

    pub fn raw_mobility(&self) -> RawMobility {
        RawMobility {
            start: self.deaths.start,
            indicators: self.mobility.clone(),
        }
    }

    pub fn total_deaths(&self) -> u64 {
        self.deaths.values.iter().map(|&d| d as u64).sum()
    }
}

/// Settings for turning raw tables into [`StateData`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub threshold: u64,
    pub lead_days: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            threshold: DEATH_THRESHOLD,
            lead_days: WINDOW_LEAD_DAYS,
        }
    }
}

/// Result of joining the input tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub states: Vec<StateData>,
    /// States dropped with the reason.
    pub excluded: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Joins deaths, mobility, population and IFR tables per state.
///
/// Mobility is aligned to the death dates; days outside the mobility file
/// carry the nearest observed value and are flagged.
pub fn assemble(
    deaths: Loaded<DailySeries<u32>>,
    mobility: Loaded<RawMobility>,
    population: &BTreeMap<String, u64>,
    ifr: &BTreeMap<String, f64>,
    opts: &IngestOptions,
) -> Result<Ingested> {
    let mut warnings = deaths.warnings;
    warnings.extend(mobility.warnings);
    let mut states = Vec::new();
    let mut excluded = Vec::new();
    for (name, series) in deaths.data {
        let pop = *population
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("no population for state `{name}`")))?;
        let ifr_percent = *ifr
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("no IFR for state `{name}`")))?;
        let mob = mobility
            .data
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("no mobility for state `{name}`")))?;
        let offset = (series.start - mob.start).num_days();
        let mut carried = 0;
        let aligned: [Vec<f64>; N_COVARIATES] = std::array::from_fn(|k| {
            (0..series.len())
                .map(|t| {
                    let idx = offset + t as i64;
                    let clamped = idx.clamp(0, mob.len() as i64 - 1);
                    if clamped != idx && k == 0 {
                        carried += 1;
                    }
                    mob.indicators[k][clamped as usize]
                })
                .collect()
        });
        if carried > 0 {
            warnings.push(format!("{name}: {carried} day(s) outside the mobility file use the nearest value"));
        }
        let Some((window_start, fit_start)) = epidemic_window(&series.values, opts.threshold, opts.lead_days) else {
            excluded.push((name, format!("never reaches {} cumulative deaths", opts.threshold)));
            continue;
        };
        if fit_start + crate::observation::DROPPED_TRAILING_DAYS >= series.len() {
            excluded.push((name, "no fitted days remain after the threshold".into()));
            continue;
        }
        states.push(StateData {
            name,
            population: pop,
            deaths: series,
            mobility: aligned,
            ifr_percent,
            window_start,
            fit_start,
        });
    }
    Ok(Ingested {
        states,
        excluded,
        warnings,
    })
}

/// Paths of the four input tables.
#[derive(Debug, Clone)]
pub struct InputPaths<'a> {
    pub deaths: &'a Path,
    pub mobility: &'a Path,
    pub population: &'a Path,
    pub ifr: &'a Path,
}

pub fn load_all(paths: &InputPaths<'_>, opts: &IngestOptions) -> Result<Ingested> {
    let deaths = load_deaths(paths.deaths)?;
    let mobility = load_mobility(paths.mobility)?;
    let population = load_population(paths.population)?;
    let ifr = load_ifr(paths.ifr)?;
    assemble(deaths, mobility, &population, &ifr, opts)
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_deaths<W: Write>(states: &[StateData], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DEATHS_HEADER)?;
    for s in states {
        for (t, d) in s.deaths.values.iter().enumerate() {
            w.write_record([s.name.clone(), s.deaths.date(t).to_string(), d.to_string()])?;
        }
    }
    w.flush()
}

pub fn write_mobility<W: Write>(states: &[StateData], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MOBILITY_HEADER)?;
    for s in states {
        for t in 0..s.deaths.len() {
            let mut row = vec![s.name.clone(), s.deaths.date(t).to_string()];
            row.extend(s.mobility.iter().map(|k| k[t].to_string()));
            w.write_record(row)?;
        }
    }
    w.flush()
}

pub fn write_population<W: Write>(states: &[StateData], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(POPULATION_HEADER)?;
    for s in states {
        w.write_record([s.name.clone(), s.population.to_string()])?;
    }
    w.flush()
}

pub fn write_ifr<W: Write>(states: &[StateData], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(IFR_HEADER)?;
    for s in states {
        w.write_record([s.name.clone(), s.ifr_percent.to_string()])?;
    }
    w.flush()
}

/// Writes the four input tables into `dir` as `deaths.csv`, `mobility.csv`,
/// `population.csv` and `ifr.csv`.
pub fn save_all(states: &[StateData], dir: &Path) -> Result<()> {
    let write = |name: &str, f: &dyn Fn(std::fs::File) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        f(create(&path)?).map_err(|e| Error::io(&path, e))
    };
    write("deaths.csv", &|f| write_deaths(states, f))?;
    write("mobility.csv", &|f| write_mobility(states, f))?;
    write("population.csv", &|f| write_population(states, f))?;
    write("ifr.csv", &|f| write_ifr(states, f))
}

/// Marginalization-index categories, from least to most deprived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalizationLevel {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl MarginalizationLevel {
    pub const ALL: [MarginalizationLevel; 5] = [
        MarginalizationLevel::VeryLow,
        MarginalizationLevel::Low,
        MarginalizationLevel::Medium,
        MarginalizationLevel::High,
        MarginalizationLevel::VeryHigh,
    ];

    pub fn rank(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for MarginalizationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "very_low" | "muy_bajo" => Ok(Self::VeryLow),
            "low" | "bajo" => Ok(Self::Low),
            "medium" | "medio" => Ok(Self::Medium),
            "high" | "alto" => Ok(Self::High),
            "very_high" | "muy_alto" => Ok(Self::VeryHigh),
            other => Err(Error::InvalidParameter(format!("unknown marginalization level `{other}`"))),
        }
    }
}

/// Anchors for interpolating state IFRs across marginalization levels.
///
/// The anchors are IFRs (percent) for a population with the reference age
/// structure. A state's age structure rescales the interpolated value by
/// `Σ w_a r_a / Σ w̄_a r_a`, with `r` the relative IFR of each age group
/// and `w̄` the reference shares.
#[derive(Debug, Clone, PartialEq)]
pub struct IfrInterpolationTable {
    /// IFR at the least marginalized level.
    pub anchor_high_income: f64,
    /// IFR at the most marginalized level.
    pub anchor_low_income: f64,
    pub age_relative_risk: Vec<f64>,
    pub reference_shares: Vec<f64>,
}

impl IfrInterpolationTable {
    /// Mexico City (0.65%) and Oaxaca (1.10%) anchors with a single age group.
    pub fn mexico() -> Self {
        IfrInterpolationTable {
            anchor_high_income: 0.65,
            anchor_low_income: 1.10,
            age_relative_risk: vec![1.0],
            reference_shares: vec![1.0],
        }
    }
}

/// Interpolated IFR (percent) for a state.
pub fn interpolate_ifr(table: &IfrInterpolationTable, level: MarginalizationLevel, age_shares: &[f64]) -> Result<f64> {
    if age_shares.len() != table.age_relative_risk.len() || table.reference_shares.len() != age_shares.len() {
        return Err(Error::InvalidParameter(format!(
            "{} age shares for {} age groups",
            age_shares.len(),
            table.age_relative_risk.len()
        )));
    }
    if table.anchor_high_income <= 0.0 || table.anchor_low_income <= 0.0 {
        return Err(Error::InvalidParameter("IFR anchors must be positive".into()));
    }
    let weighted = |w: &[f64]| w.iter().zip(&table.age_relative_risk).map(|(a, b)| a * b).sum::<f64>();
    let reference = weighted(&table.reference_shares);
    if reference <= 0.0 {
        return Err(Error::InvalidParameter("reference age weighting is zero".into()));
    }
    let factor = weighted(age_shares) / reference;
    let frac = level.rank() as f64 / (MarginalizationLevel::ALL.len() - 1) as f64;
    let base = table.anchor_high_income + frac * (table.anchor_low_income - table.anchor_high_income);
    Ok(base * factor)
}

/// One row of the published state-level results table.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct Table1Row {
    pub state: String,
    pub ifr_percent: f64,
    pub population: u64,
    pub deaths: u64,
    pub deaths_per_million: u64,
    pub infections_thousands: f64,
    pub infections_thousands_lo: f64,
    pub infections_thousands_hi: f64,
    pub infections_prev_14d_thousands: f64,
    pub infections_prev_14d_thousands_lo: f64,
    pub infections_prev_14d_thousands_hi: f64,
    pub attack_rate_percent: f64,
    pub attack_rate_percent_lo: f64,
    pub attack_rate_percent_hi: f64,
}

const TABLE1_CSV: &str = include_str!("../fixtures/table1.csv");

/// The bundled 32-state reference table (Mexico, as of 2020-07-07).
pub fn table1() -> Vec<Table1Row> {
    csv::Reader::from_reader(TABLE1_CSV.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("bundled table parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mem() -> &'static Path {
        Path::new("mem.csv")
    }

    #[test]
    fn three_days_one_state() {
        let text = "state,date,deaths\nA,2020-04-01,0\nA,2020-04-02,3\nA,2020-04-03,5\n";
        let loaded = read_deaths(text.as_bytes(), mem()).unwrap();
        assert_eq!(loaded.data["A"].values, vec![0, 3, 5]);
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn gaps_are_zero_filled_and_flagged() {
        let text = "state,date,deaths\nA,2020-04-01,2\nA,2020-04-03,5\n";
        let loaded = read_deaths(text.as_bytes(), mem()).unwrap();
        assert_eq!(loaded.data["A"].values, vec![2, 0, 5]);
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn bad_death_rows_are_rejected() {
        for text in [
            "state,date,deaths\nA,2020-04-01,-1\n",
            "state,date,deaths\nA,2020-04-02,1\nA,2020-04-01,1\n",
            "state,date,deaths\nA,2020-04-02,1\nA,2020-04-02,1\n",
            "state,date,deaths\nA,04/01/2020,1\n",
            "state,date,deaths\nA,2020-04-01,x\n",
            "state,day,deaths\nA,2020-04-01,1\n",
        ] {
            assert!(read_deaths(text.as_bytes(), mem()).is_err(), "{text}");
        }
        let err = read_deaths("state,date,deaths\nA,2020-04-01,-1\n".as_bytes(), mem()).unwrap_err();
        assert!(err.to_string().contains("negative"));
    }

    #[test]
    fn mobility_gaps_are_interpolated() {
        let text = "state,date,k1,k2,k3,k4\nA,2020-04-01,0,1,2,3\nA,2020-04-03,2,1,2,3\nA,2020-04-04,,1,2,5\n";
        let loaded = read_mobility(text.as_bytes(), mem()).unwrap();
        let m = &loaded.data["A"];
        assert_eq!(m.indicators[0], vec![0.0, 1.0, 2.0, 2.0]);
        assert_eq!(m.indicators[3], vec![3.0, 3.0, 3.0, 5.0]);
        assert!(!loaded.warnings.is_empty());
    }

    #[test]
    fn population_and_ifr_validation() {
        let pop = read_population("state,population\nA,100\nB,5\n".as_bytes(), mem()).unwrap();
        assert_eq!(pop["A"], 100);
        assert!(read_population("state,population\nA,0\n".as_bytes(), mem()).is_err());
        assert!(read_population("state,population\nA,1\nA,2\n".as_bytes(), mem()).is_err());
        let ifr = read_ifr("state,ifr_percent\nA,0.65\n".as_bytes(), mem()).unwrap();
        assert_eq!(ifr["A"], 0.65);
        assert!(read_ifr("state,ifr_percent\nA,12\n".as_bytes(), mem()).is_err());
        assert!(read_ifr("state,ifr_percent\nA,0\n".as_bytes(), mem()).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let constant = moving_average(&[2.5; 20]);
        assert!(constant.iter().all(|v| *v == 2.5));
        let ramp: Vec<f64> = (1..=7).map(|v| v as f64).collect();
        assert_eq!(moving_average(&ramp)[6], 4.0);
        assert_eq!(moving_average(&ramp)[0], 1.0);
        assert_eq!(moving_average(&ramp)[1], 1.5);
    }

    #[test]
    fn smoothing_matches_window_oracle() {
        let raw: Vec<f64> = (0..60).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let got = moving_average(&raw);
        for t in 0..raw.len() {
            let mut sum = 0.0;
            let mut n = 0.0;
            let mut s = t as i64;
            while s >= 0 && s > t as i64 - 7 {
                sum += raw[s as usize];
                n += 1.0;
                s -= 1;
            }
            assert!((got[t] - sum / n).abs() < 1e-14);
        }
    }

    #[test]
    fn dummies_switch_on_first_of_june() {
        let raw = RawMobility {
            start: "2020-05-30".parse().unwrap(),
            indicators: std::array::from_fn(|_| vec![0.0; 5]),
        };
        let m = smooth_mobility(&raw, default_relaxation_date()).unwrap();
        for k in 0..N_COVARIATES {
            assert_eq!(m.dummy(k), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        }
        let empty = RawMobility {
            start: raw.start,
            indicators: Default::default(),
        };
        assert!(smooth_mobility(&empty, default_relaxation_date()).is_err());
    }

    #[test]
    fn window_threshold_arithmetic() {
        // 1-based day 4 is 0-based index 3
        assert_eq!(epidemic_window(&[0, 0, 10, 1, 1], 10, 30), Some((0, 3)));
        assert_eq!(epidemic_window(&[5, 5, 5, 5], 10, 30), Some((0, 2)));
        assert_eq!(epidemic_window(&[0; 20], 10, 30), None);
        let mut late = vec![0u32; 50];
        late[45] = 10;
        assert_eq!(epidemic_window(&late, 10, 30), Some((16, 46)));
    }

    #[test]
    fn ifr_anchors_and_midpoint() {
        let table = IfrInterpolationTable::mexico();
        let cdmx = interpolate_ifr(&table, MarginalizationLevel::VeryLow, &[1.0]).unwrap();
        let oax = interpolate_ifr(&table, MarginalizationLevel::VeryHigh, &[1.0]).unwrap();
        assert_eq!(cdmx, 0.65);
        assert_eq!(oax, 1.10);
        let mid = interpolate_ifr(&table, MarginalizationLevel::Medium, &[1.0]).unwrap();
        assert!((mid - 0.875).abs() < 1e-12);
        assert!(interpolate_ifr(&table, MarginalizationLevel::Medium, &[0.5, 0.5]).is_err());
        assert!("muy alto".parse::<MarginalizationLevel>().is_ok());
        assert!("extreme".parse::<MarginalizationLevel>().is_err());
    }

    #[test]
    fn older_states_get_higher_ifr() {
        let table = IfrInterpolationTable {
            age_relative_risk: vec![0.1, 1.0, 10.0],
            reference_shares: vec![0.5, 0.4, 0.1],
            ..IfrInterpolationTable::mexico()
        };
        let reference = interpolate_ifr(&table, MarginalizationLevel::Low, &[0.5, 0.4, 0.1]).unwrap();
        let older = interpolate_ifr(&table, MarginalizationLevel::Low, &[0.4, 0.4, 0.2]).unwrap();
        assert!((reference - (0.65 + 0.25 * 0.45)).abs() < 1e-12);
        assert!(older > reference);
    }

    #[test]
    fn bundled_table_is_complete() {
        let rows = table1();
        assert_eq!(rows.len(), 32);
        for r in &rows {
            assert!((0.40..=1.10).contains(&r.ifr_percent), "{}", r.state);
        }
        let total: u64 = rows.iter().map(|r| r.deaths).sum();
        assert_eq!(total, 33_381);
    }

    fn state_strategy() -> impl Strategy<Value = Vec<StateData>> {
        let one = (1u64..50_000_000, prop::collection::vec(0u32..500, 15..40), 0.01f64..9.99, -1e3f64..1e3)
            .prop_map(|(pop, deaths, ifr, m)| (pop, deaths, ifr, m));
        prop::collection::vec(one, 1..4).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .filter_map(|(i, (pop, mut deaths, ifr, m))| {
                    deaths[3] = deaths[3].max(10);
                    let (window_start, fit_start) = epidemic_window(&deaths, 10, 30)?;
                    let n = deaths.len();
                    Some(StateData {
                        name: format!("State {i}"),
                        population: pop,
                        deaths: DailySeries {
                            start: "2020-03-01".parse().unwrap(),
                            values: deaths,
                        },
                        mobility: std::array::from_fn(|k| (0..n).map(|t| m * (t as f64 + 0.1) / (k as f64 + 3.0)).collect()),
                        ifr_percent: ifr,
                        window_start,
                        fit_start,
                    })
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn write_then_load_is_lossless(states in state_strategy()) {
            let dir = tempfile::tempdir().unwrap();
            save_all(&states, dir.path()).unwrap();
            let back = load_all(
                &InputPaths {
                    deaths: &dir.path().join("deaths.csv"),
                    mobility: &dir.path().join("mobility.csv"),
                    population: &dir.path().join("population.csv"),
                    ifr: &dir.path().join("ifr.csv"),
                },
                &IngestOptions::default(),
            )
            .unwrap();
            prop_assert_eq!(back.states, states);
        }

        #[test]
        fn smoothing_is_bounded_and_order_preserving(raw in prop::collection::vec(-100.0f64..100.0, 1..80)) {
            let out = moving_average(&raw);
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let smooth = moving_average(&sorted);
            prop_assert!(smooth.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }
}
