//! Gamma delay distributions and their discretization to daily pmfs.
//!
//! Every Gamma here is parameterized by `(mean, cv)`: the mean in days and
//! the coefficient of variation. The shape is `1 / cv²` and the rate is
//! `shape / mean`. This is the convention of the renewal-model family the
//! three published pairs come from: infection-to-onset `(5.1, 0.86)`,
//! onset-to-death `(18.8, 0.45)` and the serial interval `(6.5, 0.62)`.
//!
//! Discretization assigns day 1 the interval `[0, 1.5]` and day `s ≥ 2`
//! the interval `[s - 0.5, s + 0.5]`. Truncated pmfs are renormalized.

use std::io::Write;
use std::path::Path;

use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

/// Maximum uncaptured tail mass tolerated when truncating at a horizon.
pub const MAX_TAIL_MASS: f64 = 0.01;

/// Sub-day grid resolution used by the numerical convolution (steps per day).
const STEPS_PER_DAY: usize = 20;

/// A Gamma distribution given by its mean (days) and coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GammaSpec {
    mean: f64,
    cv: f64,
}

impl GammaSpec {
    /// Infection to symptom onset.
    pub const INFECTION_TO_ONSET: GammaSpec = GammaSpec { mean: 5.1, cv: 0.86 };
    /// Symptom onset to death.
    pub const ONSET_TO_DEATH: GammaSpec = GammaSpec { mean: 18.8, cv: 0.45 };
    /// Serial interval `g`.
    pub const SERIAL_INTERVAL: GammaSpec = GammaSpec { mean: 6.5, cv: 0.62 };

    pub fn new(mean: f64, cv: f64) -> Result<Self> {
        if !(mean.is_finite() && mean > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma mean must be finite and > 0, got {mean}"
            )));
        }
        if !(cv.is_finite() && cv > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma cv must be finite and > 0, got {cv}"
            )));
        }
        let spec = GammaSpec { mean, cv };
        if !(spec.shape().is_finite() && spec.rate().is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma (mean={mean}, cv={cv}) has a non-finite shape or rate"
            )));
        }
        Ok(spec)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn cv(&self) -> f64 {
        self.cv
    }

    pub fn shape(&self) -> f64 {
        1.0 / (self.cv * self.cv)
    }

    pub fn rate(&self) -> f64 {
        self.shape() / self.mean
    }

    pub fn variance(&self) -> f64 {
        let sd = self.mean * self.cv;
        sd * sd
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        gamma_cdf(self, x)
    }

    fn cdf_unchecked(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            gamma_lr(self.shape(), self.rate() * x)
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let (k, b) = (self.shape(), self.rate());
        if x == 0.0 {
            return match k.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Less) => f64::INFINITY,
                Some(std::cmp::Ordering::Equal) => b,
                _ => 0.0,
            };
        }
        (k * b.ln() + (k - 1.0) * x.ln() - b * x - ln_gamma(k)).exp()
    }
}

/// Gamma CDF under the (mean, cv) convention.
pub fn gamma_cdf(spec: &GammaSpec, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gamma_cdf requires a finite argument, got {x}"
        )));
    }
    if x < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gamma_cdf requires x >= 0, got {x}"
        )));
    }
    Ok(spec.cdf_unchecked(x))
}

/// A probability mass function over days `1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePmf {
    mass: Vec<f64>,
}

impl DiscretePmf {
    /// Builds a pmf from raw non-negative weights, renormalizing them.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("pmf horizon must be >= 1".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "pmf weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("pmf weights sum to zero".into()));
        }
        Ok(DiscretePmf {
            mass: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.mass.len()
    }

    /// Mass on day `day` (1-based). Zero outside `1..=horizon`.
    pub fn at(&self, day: usize) -> f64 {
        if day == 0 {
            0.0
        } else {
            self.mass.get(day - 1).copied().unwrap_or(0.0)
        }
    }

    /// Masses for days `1..=horizon`, in order.
    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Mean delay in days.
    pub fn mean(&self) -> f64 {
        self.mass
            .iter()
            .enumerate()
            .map(|(i, m)| (i + 1) as f64 * m)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "mass"])?;
        for (i, m) in self.mass.iter().enumerate() {
            w.write_record([(i + 1).to_string(), m.to_string()])?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|e| Error::io(path, e))
    }
}

/// Interval masses for days `1..=horizon` before renormalization.
pub fn raw_interval_masses(spec: &GammaSpec, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon);
    let mut lower = 0.0;
    for day in 1..=horizon {
        let upper = spec.cdf_unchecked(day as f64 + 0.5);
        out.push(upper - lower);
        lower = upper;
    }
    out
}

/// Discretizes a Gamma onto days `1..=horizon`.
///
/// Fails when more than 1% of the mass lies beyond `horizon + 0.5`.
pub fn discretize(spec: &GammaSpec, horizon: usize) -> Result<DiscretePmf> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("pmf horizon must be >= 1".into()));
    }
    let raw = raw_interval_masses(spec, horizon);
    let tail = 1.0 - spec.cdf_unchecked(horizon as f64 + 0.5);
    if tail >= MAX_TAIL_MASS {
        return Err(Error::Truncation { horizon, tail });
    }
    DiscretePmf::from_weights(raw)
}

/// Day whose interval contains grid point `m / STEPS_PER_DAY`, or the pair
/// of days sharing it when it falls exactly on an interval boundary.
fn grid_point_days(m: usize) -> (usize, Option<usize>) {
    let spd = STEPS_PER_DAY;
    let half = spd / 2;
    if m < spd + half {
        return (1, None);
    }
    if m % spd == half {
        let below = (m - half) / spd;
        (below, Some(below + 1))
    } else {
        ((m + half) / spd, None)
    }
}

/// Discretized distribution of `onset + death` for independent Gammas.
///
/// Both distributions are binned on a 0.05-day grid with their mass placed
/// at bin midpoints; the grids are convolved exactly and the result is
/// re-binned onto days with the same interval rule as [`discretize`].
pub fn convolve_infection_to_death(
    onset: &GammaSpec,
    death: &GammaSpec,
    horizon: usize,
) -> Result<DiscretePmf> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("pmf horizon must be >= 1".into()));
    }
    let h = 1.0 / STEPS_PER_DAY as f64;
    // grid points beyond this index fall outside the last day
    let limit = (horizon * STEPS_PER_DAY) + STEPS_PER_DAY / 2;
    let fine = |spec: &GammaSpec| -> Vec<f64> {
        let mut out = Vec::with_capacity(limit);
        let mut lower = 0.0;
        for j in 1..=limit {
            let upper = spec.cdf_unchecked(j as f64 * h);
            out.push(upper - lower);
            lower = upper;
        }
        out
    };
    let a = fine(onset);
    let b = fine(death);

    let mut days = vec![0.0; horizon];
    for (i, &ma) in a.iter().enumerate() {
        if ma == 0.0 {
            continue;
        }
        // midpoints (i + 0.5)h and (j + 0.5)h sum to (i + j + 1)h
        let max_j = limit.saturating_sub(i + 1).min(b.len());
        for (j, &mb) in b[..max_j].iter().enumerate() {
            let m = i + j + 1;
            let w = ma * mb;
            match grid_point_days(m) {
                (d, None) => days[d - 1] += w,
                (d, Some(next)) => {
                    days[d - 1] += 0.5 * w;
                    if next <= horizon {
                        days[next - 1] += 0.5 * w;
                    }
                }
            }
        }
    }
    let captured: f64 = days.iter().sum();
    let tail = 1.0 - captured;
    if tail >= MAX_TAIL_MASS {
        return Err(Error::Truncation { horizon, tail });
    }
    DiscretePmf::from_weights(days)
}

/// `Σ_{lag=1..=min(t, H)} series[t - lag] · pmf[lag - 1]`, where `pmf[0]`
/// is the mass at a lag of one day.
#[inline]
pub(crate) fn lagged_dot(series: &[f64], pmf: &[f64], t: usize) -> f64 {
    let l = t.min(pmf.len());
    let a = &series[t - l..t];
    let b = &pmf[..l];
    // four partial sums break the serial dependency between additions
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (bc, ac) in b.chunks_exact(4).zip(a.rchunks_exact(4)) {
        s0 += ac[3] * bc[0];
        s1 += ac[2] * bc[1];
        s2 += ac[1] * bc[2];
        s3 += ac[0] * bc[3];
    }
    let br = b.chunks_exact(4).remainder();
    let ar = a.rchunks_exact(4).remainder();
    for (k, &bv) in br.iter().enumerate() {
        s0 += ar[ar.len() - 1 - k] * bv;
    }
    (s0 + s1) + (s2 + s3)
}

/// `Σ_{lag=1..=H} series[t + lag] · pmf[lag - 1]`, truncated at the end of
/// `series`. This is the transpose of [`lagged_dot`].
#[inline]
pub(crate) fn lead_dot(series: &[f64], pmf: &[f64], t: usize) -> f64 {
    let l = (series.len() - 1 - t).min(pmf.len());
    let a = &series[t + 1..t + 1 + l];
    let b = &pmf[..l];
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (ac, bc) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        s0 += ac[0] * bc[0];
        s1 += ac[1] * bc[1];
        s2 += ac[2] * bc[2];
        s3 += ac[3] * bc[3];
    }
    for (x, y) in a.chunks_exact(4).remainder().iter().zip(b.chunks_exact(4).remainder()) {
        s0 += x * y;
    }
    (s0 + s1) + (s2 + s3)
}

/// Smallest horizon at which `spec` passes the truncation guard.
pub fn min_horizon(spec: &GammaSpec) -> usize {
    let mut h = 1;
    while 1.0 - spec.cdf_unchecked(h as f64 + 0.5) >= MAX_TAIL_MASS {
        h += 1;
    }
    h
}
