//! NUTS and adaptive random-walk Metropolis over an unconstrained log
//! density, with convergence diagnostics and posterior summaries.
//!
//! Warmup adapts a covariance in doubling windows (diagonal in the first
//! window, dense afterwards) and tunes the step size toward the target
//! acceptance statistic. Stored draws are `thin`
//! transitions apart. Chains run in parallel; each has its own ChaCha8
//! stream derived from the seed, so results do not depend on scheduling.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CHAINS: usize = 2;
pub const MIN_WARMUP: usize = 100;
/// Draws per chain needed for diagnostics.
pub const MIN_DIAGNOSTIC_DRAWS: usize = 100;
pub const MAX_INIT_TRIES: usize = 100;
/// Quasi-Newton iterations toward a mode before NUTS warmup.
pub const MAX_ASCENT_ITERATIONS: usize = 500;
/// Draws per ELBO estimate when choosing the initial Gaussian approximation.
const ELBO_DRAWS: usize = 16;
/// Posterior summary quantiles.
pub const SUMMARY_QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// A log density on `R^dim`, up to a constant.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// `-inf` outside the support. NaN and `+inf` are treated as errors.
    fn log_density(&self, x: &[f64]) -> f64;
    /// Log density with its gradient written to `grad`; `None` when the
    /// density has no gradient.
    fn log_density_gradient(&self, _x: &[f64], _grad: &mut [f64]) -> Option<f64> {
        None
    }
}

impl LogDensity for crate::model::Model {
    fn dim(&self) -> usize {
        crate::model::Model::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        crate::model::Model::log_density(self, x)
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
        Some(crate::model::Model::log_density_gradient(self, x, grad))
    }
}

/// Transition kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// No-U-turn Hamiltonian sampler with a dense metric; needs gradients.
    #[default]
    Nuts,
    /// Random-walk Metropolis with a dense proposal covariance.
    Metropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub algorithm: Algorithm,
    pub n_chains: usize,
    /// Warmup iterations per chain.
    pub n_warmup: usize,
    /// Stored draws per chain.
    pub n_samples: usize,
    pub seed: u64,
    /// Target acceptance statistic. `None` uses 0.9 for NUTS and 0.234
    /// for Metropolis.
    pub target_accept: Option<f64>,
    /// Transitions per iteration. `None` uses 1 for NUTS and the
    /// dimension for Metropolis.
    pub thin: Option<usize>,
    /// NUTS trajectories stop after `2^max_tree_depth` leapfrog steps.
    pub max_tree_depth: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            algorithm: Algorithm::Nuts,
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 1000,
            seed: 1,
            target_accept: None,
            thin: None,
            max_tree_depth: 10,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < MIN_CHAINS {
            return Err(Error::InvalidParameter(format!("need at least {MIN_CHAINS} chains, got {}", self.n_chains)));
        }
        if self.n_warmup < MIN_WARMUP {
            return Err(Error::InvalidParameter(format!(
                "need at least {MIN_WARMUP} warmup iterations, got {}",
                self.n_warmup
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be positive".into()));
        }
        if let Some(t) = self.target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidParameter("target_accept must lie in (0, 1)".into()));
            }
        }
        if self.thin == Some(0) {
            return Err(Error::InvalidParameter("thin must be positive".into()));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 16 {
            return Err(Error::InvalidParameter("max_tree_depth must lie in 1..=16".into()));
        }
        Ok(())
    }

    pub fn thin_for(&self, dim: usize) -> usize {
        self.thin.unwrap_or(match self.algorithm {
            Algorithm::Nuts => 1,
            Algorithm::Metropolis => dim.max(1),
        })
    }

    pub fn target_accept(&self) -> f64 {
        self.target_accept.unwrap_or(match self.algorithm {
            Algorithm::Nuts => 0.9,
            Algorithm::Metropolis => 0.234,
        })
    }
}

/// Stored draws, `values[chain][draw][param]` flattened chain-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub n_chains: usize,
    pub n_samples: usize,
    values: Vec<f64>,
    /// Acceptance rate after warmup, per chain.
    pub accept_rate: Vec<f64>,
    /// Final step scale, per chain.
    pub step_scale: Vec<f64>,
    /// Divergent trajectories after warmup, per chain (NUTS only).
    pub divergent: Vec<usize>,
    /// Mean leapfrog steps per transition after warmup, per chain (NUTS only).
    pub leapfrog: Vec<f64>,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, n_chains: usize, n_samples: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != names.len() * n_chains * n_samples {
            return Err(Error::Misaligned(format!(
                "{} values for {} chains x {} draws x {} parameters",
                values.len(),
                n_chains,
                n_samples,
                names.len()
            )));
        }
        Ok(PosteriorDraws {
            names,
            n_chains,
            n_samples,
            values,
            accept_rate: vec![f64::NAN; n_chains],
            step_scale: vec![f64::NAN; n_chains],
            divergent: vec![0; n_chains],
            leapfrog: vec![0.0; n_chains],
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn draw(&self, chain: usize, i: usize) -> &[f64] {
        let d = self.dim();
        let start = (chain * self.n_samples + i) * d;
        &self.values[start..start + d]
    }

    /// All draws in chain order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim().max(1))
    }

    /// One parameter's draws split by chain.
    pub fn chains_of(&self, p: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_samples).map(|i| self.draw(c, i)[p]).collect())
            .collect()
    }

    /// One parameter's draws pooled over chains.
    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.iter().map(|d| d[p]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Applies `f` to every draw, keeping the chain layout.
    pub fn map(&self, names: Vec<String>, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<PosteriorDraws> {
        let mut values = Vec::with_capacity(names.len() * self.n_chains * self.n_samples);
        for d in self.iter() {
            let out = f(d);
            if out.len() != names.len() {
                return Err(Error::Misaligned("mapped draw has the wrong length".into()));
            }
            values.extend(out);
        }
        let mut mapped = PosteriorDraws::new(names, self.n_chains, self.n_samples, values)?;
        mapped.accept_rate = self.accept_rate.clone();
        mapped.step_scale = self.step_scale.clone();
        mapped.divergent = self.divergent.clone();
        mapped.leapfrog = self.leapfrog.clone();
        Ok(mapped)
    }

    /// CSV with `chain,draw,<names...>`. Floats use shortest round-trip
    /// formatting, so equal draws give identical bytes.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for c in 0..self.n_chains {
            for i in 0..self.n_samples {
                let mut row = vec![(c + 1).to_string(), (i + 1).to_string()];
                row.extend(self.draw(c, i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<PosteriorDraws> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.len() < 3 || &header[0] != "chain" || &header[1] != "draw" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected a `chain,draw,...` header".into(),
            });
        }
        let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message,
            };
            let chain: usize = rec[0].parse().map_err(|_| bad(format!("bad chain `{}`", &rec[0])))?;
            let draw: usize = rec[1].parse().map_err(|_| bad(format!("bad draw `{}`", &rec[1])))?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != names.len() {
                return Err(bad("wrong number of columns".into()));
            }
            rows.push((chain, draw, vals));
        }
        let n_chains = rows.iter().map(|r| r.0).max().unwrap_or(0);
        if n_chains == 0 || rows.len() % n_chains != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "chains have unequal lengths".into(),
            });
        }
        let n_samples = rows.len() / n_chains;
        rows.sort_by_key(|r| (r.0, r.1));
        for (k, r) in rows.iter().enumerate() {
            if r.0 != k / n_samples + 1 || r.1 != k % n_samples + 1 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("missing or duplicate draw near chain {} draw {}", r.0, r.1),
                });
            }
        }
        let values = rows.into_iter().flat_map(|r| r.2).collect();
        PosteriorDraws::new(names, n_chains, n_samples, values)
    }
}

/// Lower Cholesky factor of a symmetric matrix (row-major), adding jitter
/// to the diagonal until it succeeds.
fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mean_diag = (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64;
    let mut jitter = 0.0;
    loop {
        if let Some(l) = try_cholesky(a, n, jitter) {
            return l;
        }
        jitter = if jitter == 0.0 { 1e-10 * mean_diag.max(1e-12) } else { jitter * 10.0 };
    }
}

/// Lower Cholesky factor of `a + jitter I`, or `None` if it is not positive
/// definite.
fn try_cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0 && s.is_finite()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Gradient of the negative log density, `None` where the density is zero.
fn descent_eval<D: LogDensity + ?Sized>(target: &D, x: &[f64], g: &mut [f64]) -> Result<Option<f64>> {
    let lp = target
        .log_density_gradient(x, g)
        .ok_or_else(|| Error::Sampler("NUTS needs a log density with a gradient".into()))?;
    check_value(lp, x)?;
    if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    g.iter_mut().for_each(|v| *v = -*v);
    Ok(Some(-lp))
}

/// Climbs toward a mode of the log density with limited-memory BFGS and a
/// backtracking line search. Returns every accepted iterate, starting point
/// first.
fn ascend<D: LogDensity + ?Sized>(target: &D, x0: Vec<f64>, max_iter: usize) -> Result<Vec<Vec<f64>>> {
    const HISTORY: usize = 8;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let Some(mut f) = descent_eval(target, &x, &mut g)? else {
        return Ok(vec![x]);
    };
    let mut path = vec![x.clone()];
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = std::collections::VecDeque::new();
    let mut gn = vec![0.0; n];
    for _ in 0..max_iter {
        let mut q = g.clone();
        let mut a = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let ai = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= ai * y);
            a.push(ai);
        }
        let scale = match hist.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / dot(&g, &g).sqrt().max(1.0),
        };
        q.iter_mut().for_each(|q| *q *= scale);
        for ((s, y, rho), ai) in hist.iter().zip(a.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += s * (ai - b));
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hist.clear();
            let k = 1.0 / dot(&g, &g).sqrt().max(1.0);
            dir = g.iter().map(|v| -k * v).collect();
            slope = dot(&dir, &g);
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            if let Some(fnew) = descent_eval(target, &xn, &mut gn)? {
                if fnew <= f + 1e-4 * t * slope {
                    next = Some((xn, fnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == HISTORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let done = (f - fnew).abs() <= 1e-10 * (1.0 + f.abs()) || gn.iter().all(|v| v.abs() < 1e-6);
        x = xn;
        f = fnew;
        path.push(x.clone());
        std::mem::swap(&mut g, &mut gn);
        if done {
            break;
        }
    }
    Ok(path)
}

/// Gaussian approximation `N(mean, L L^T)` with its Monte Carlo evidence
/// lower bound and one finite draw.
struct Laplace {
    chol: Vec<f64>,
    elbo: f64,
    draw: Vec<f64>,
}

/// Laplace approximations at points along the ascent path, scored by a
/// Monte Carlo ELBO. Returns the best one. The joint density of a
/// hierarchical model can be unbounded, so the path end need not be best.
fn best_laplace<D: LogDensity + ?Sized>(target: &D, path: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Option<Laplace>> {
    let mut picks: Vec<usize> = std::iter::successors(Some(4usize), |i| Some(i * 2))
        .take_while(|&i| i < path.len())
        .collect();
    picks.push(path.len() - 1);
    picks.dedup();
    let d = path[0].len();
    let mut best: Option<Laplace> = None;
    for &i in &picks {
        let mean = &path[i];
        let Some(chol) = laplace_factor(target, mean)? else {
            continue;
        };
        let log_det: f64 = (0..d).map(|k| chol[k * d + k].ln()).sum();
        let mut total = 0.0;
        let mut draw = None;
        for _ in 0..ELBO_DRAWS {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x: Vec<f64> = (0..d).map(|r| mean[r] + (0..=r).map(|k| chol[r * d + k] * z[k]).sum::<f64>()).collect();
            let lp = target.log_density(&x);
            check_value(lp, &x)?;
            // log q up to the constant shared by every candidate
            total += lp + 0.5 * dot(&z, &z) + log_det;
            if lp.is_finite() && draw.is_none() {
                draw = Some(x);
            }
        }
        let elbo = total / ELBO_DRAWS as f64;
        if let Some(draw) = draw {
            if elbo.is_finite() && best.as_ref().is_none_or(|b| elbo > b.elbo) {
                best = Some(Laplace { chol, elbo, draw });
            }
        }
    }
    Ok(best)
}

/// Cholesky factor of the inverse finite-difference Hessian of the negative
/// log density at `x`, ridged until positive definite.
fn laplace_factor<D: LogDensity + ?Sized>(target: &D, x: &[f64]) -> Result<Option<Vec<f64>>> {
    let n = x.len();
    let mut h = vec![0.0; n * n];
    let (mut up, mut dn) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let step = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] += step;
        let mut xm = x.to_vec();
        xm[j] -= step;
        if descent_eval(target, &xp, &mut up)?.is_none() || descent_eval(target, &xm, &mut dn)?.is_none() {
            return Ok(None);
        }
        for i in 0..n {
            h[i * n + j] = (up[i] - dn[i]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = m;
            h[j * n + i] = m;
        }
    }
    // an indefinite Hessian away from a mode gets a ridge
    let scale = (0..n).map(|i| h[i * n + i].abs()).sum::<f64>() / n as f64;
    let mut ridge = 0.0;
    let l = loop {
        if let Some(l) = try_cholesky(&h, n, ridge) {
            break l;
        }
        ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
        if !(ridge < 1e3 * scale) {
            return Ok(None);
        }
    };
    // H^-1 = L^-T L^-1 from the inverse of the lower factor
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let s: f64 = (c..i).map(|k| l[i * n + k] * inv[k * n + c]).sum();
            let e = if i == c { 1.0 } else { 0.0 };
            inv[i * n + c] = (e - s) / l[i * n + i];
        }
    }
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (i..n).map(|k| inv[k * n + i] * inv[k * n + j]).sum();
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    Ok(try_cholesky(&cov, n, 0.0))
}

/// Warmup window boundaries in iterations: an initial buffer of at most 75
/// iterations, doubling adaptation windows from 25, and a terminal buffer of
/// at most 50.
fn adaptation_windows(n_warmup: usize) -> (usize, Vec<usize>) {
    let init = ((n_warmup * 15) / 100).min(75);
    let term = ((n_warmup * 10) / 100).min(50);
    let mut ends = Vec::new();
    let mut start = init;
    let mut len = 25;
    let last = n_warmup - term;
    while start < last {
        let mut end = start + len;
        // merge a short remainder into the current window
        if end + 2 * len > last {
            end = last;
        }
        ends.push(end);
        start = end;
        len *= 2;
    }
    (init, ends)
}

struct Proposal {
    chol: Vec<f64>,
    dim: usize,
}

impl Proposal {
    fn step(&self, x: &[f64], scale: f64, z: &mut [f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += self.chol[i * n + k] * z[k];
            }
            out[i] = x[i] + scale * acc;
        }
    }
}

/// Running mean and covariance (Welford).
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = x.len();
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / self.n as f64;
        }
        for i in 0..d {
            let di2 = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += delta[j] * di2;
            }
        }
    }

    /// Covariance shrunk toward a small diagonal, as a dense or diagonal
    /// matrix.
    fn covariance(&self, dense: bool) -> Vec<f64> {
        let d = self.mean.len();
        let n = self.n as f64;
        let w = n / (n + 5.0);
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if i == j || dense {
                    let v = self.m2[i * d + j] / (n - 1.0).max(1.0);
                    c[i * d + j] = w * v;
                }
            }
            c[i * d + i] += 1e-3 * (5.0 / (n + 5.0));
        }
        c
    }

    /// Dense covariance blended with `prior`; the sample weight is
    /// `n / (n + d)`, so short windows lean on the prior.
    fn covariance_toward(&self, prior: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let n = self.n as f64;
        let w = n / (n + d as f64);
        (0..d * d)
            .map(|k| w * self.m2[k] / (n - 1.0).max(1.0) + (1.0 - w) * prior[k])
            .collect()
    }
}

/// `L L^T` for a lower-triangular `L`.
fn outer_lower(l: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (0..=j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    c
}

struct ChainOutput {
    draws: Vec<f64>,
    accept_rate: f64,
    step_scale: f64,
    divergent: usize,
    leapfrog: f64,
}

fn chain_rng(cfg: &ChainConfig, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    rng
}

/// First initial draw with a finite density.
fn initial_point<D: LogDensity + ?Sized>(
    target: &D,
    chain: usize,
    rng: &mut ChaCha8Rng,
    init: &(dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync),
) -> Result<(Vec<f64>, f64)> {
    let d = target.dim();
    for _ in 0..MAX_INIT_TRIES {
        let cand = init(rng);
        if cand.len() != d {
            return Err(Error::Sampler(format!("initial point has {} coordinates, expected {d}", cand.len())));
        }
        let v = target.log_density(&cand);
        check_value(v, &cand)?;
        if v.is_finite() {
            return Ok((cand, v));
        }
    }
    Err(Error::Sampler(format!(
        "chain {}: no initial point with finite density after {MAX_INIT_TRIES} tries",
        chain + 1
    )))
}

fn run_chain_metropolis<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
    chain: usize,
    init: &(dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync),
) -> Result<ChainOutput> {
    let d = target.dim();
    let thin = cfg.thin_for(d);
    let target_accept = cfg.target_accept();
    let mut rng = chain_rng(cfg, chain);
    let (mut x, mut lp) = initial_point(target, chain, &mut rng, init)?;

    let mut identity = vec![0.0; d * d];
    for i in 0..d {
        identity[i * d + i] = 0.01;
    }
    let mut prop = Proposal {
        chol: cholesky(&identity, d),
        dim: d,
    };
    let base_scale = 2.38 / (d as f64).sqrt();
    let mut log_scale: f64 = base_scale.ln();
    let (init_buffer, windows) = adaptation_windows(cfg.n_warmup);
    let mut window_idx = 0;
    let mut moments = Moments::new(d);
    let mut rm_count = 0usize;

    let mut z = vec![0.0; d];
    let mut cand = vec![0.0; d];
    let mut draws = Vec::with_capacity(cfg.n_samples * d);
    let mut accepted = 0usize;
    let total_iter = cfg.n_warmup + cfg.n_samples;

    for iter in 0..total_iter {
        let warm = iter < cfg.n_warmup;
        for _ in 0..thin {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let scale = log_scale.exp();
            prop.step(&x, scale, &mut z, &mut cand);
            let lp_new = target.log_density(&cand);
            check_value(lp_new, &cand)?;
            let log_ratio = lp_new - lp;
            let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
            let u: f64 = rng.random();
            if u < accept_prob {
                x.copy_from_slice(&cand);
                lp = lp_new;
                if !warm {
                    accepted += 1;
                }
            }
            if warm {
                rm_count += 1;
                let gain = (rm_count as f64).powf(-0.6);
                log_scale += gain * (accept_prob - target_accept);
                log_scale = log_scale.clamp(-30.0, 5.0);
            }
        }
        if warm {
            if iter >= init_buffer && window_idx < windows.len() {
                moments.push(&x);
                if iter + 1 == windows[window_idx] {
                    let cov = moments.covariance(window_idx > 0);
                    prop.chol = cholesky(&cov, d);
                    log_scale = base_scale.ln();
                    rm_count = 0;
                    moments = Moments::new(d);
                    window_idx += 1;
                }
            }
        } else {
            draws.extend_from_slice(&x);
        }
    }
    Ok(ChainOutput {
        draws,
        accept_rate: accepted as f64 / (cfg.n_samples * thin) as f64,
        step_scale: log_scale.exp(),
        divergent: 0,
        leapfrog: 0.0,
    })
}

/// Energy error beyond which a trajectory counts as divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Target seen through `x = L y`, so a unit metric in `y` is the dense
/// metric `L Lᵀ` in `x`.
struct Whitened<'a, D: ?Sized> {
    target: &'a D,
    chol: Vec<f64>,
    d: usize,
}

#[derive(Clone)]
struct Point {
    y: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

impl<D: LogDensity + ?Sized> Whitened<'_, D> {
    fn to_x(&self, y: &[f64]) -> Vec<f64> {
        let n = self.d;
        (0..n)
            .map(|i| (0..=i).map(|k| self.chol[i * n + k] * y[k]).sum())
            .collect()
    }

    fn to_y(&self, x: &[f64]) -> Vec<f64> {
        let n = self.d;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.chol[i * n + k] * y[k]).sum();
            y[i] = (x[i] - s) / self.chol[i * n + i];
        }
        y
    }

    /// Log density at `y` with its gradient in `y` coordinates.
    fn eval(&self, y: &[f64], grad: &mut [f64]) -> Result<f64> {
        let n = self.d;
        let x = self.to_x(y);
        let mut gx = vec![0.0; n];
        let lp = self
            .target
            .log_density_gradient(&x, &mut gx)
            .ok_or_else(|| Error::Sampler("NUTS needs a log density with a gradient".into()))?;
        check_value(lp, &x)?;
        if lp.is_finite() && gx.iter().any(|g| !g.is_finite()) {
            return Err(Error::Sampler("gradient is not finite at a point of finite density".into()));
        }
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk = (k..n).map(|i| self.chol[i * n + k] * gx[i]).sum();
        }
        Ok(lp)
    }

    fn point(&self, y: Vec<f64>) -> Result<Point> {
        let mut grad = vec![0.0; self.d];
        let lp = self.eval(&y, &mut grad)?;
        Ok(Point {
            p: vec![0.0; self.d],
            y,
            grad,
            lp,
        })
    }

    fn leapfrog(&self, pt: &mut Point, eps: f64) -> Result<()> {
        for (p, g) in pt.p.iter_mut().zip(&pt.grad) {
            *p += 0.5 * eps * g;
        }
        for (y, p) in pt.y.iter_mut().zip(&pt.p) {
            *y += eps * p;
        }
        pt.lp = self.eval(&pt.y, &mut pt.grad)?;
        if pt.lp.is_finite() {
            for (p, g) in pt.p.iter_mut().zip(&pt.grad) {
                *p += 0.5 * eps * g;
            }
        }
        Ok(())
    }
}

fn energy(pt: &Point) -> f64 {
    let h = -pt.lp + 0.5 * dot(&pt.p, &pt.p);
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Tree {
    left: Point,
    right: Point,
    proposal: Point,
    log_w: f64,
    p_sum: Vec<f64>,
    n_leapfrog: usize,
    accept_sum: f64,
    divergent: bool,
    turning: bool,
}

/// No-U-turn condition between two edge momenta and the summed momentum.
fn no_uturn(p_sum: &[f64], p_left: &[f64], p_right: &[f64]) -> bool {
    dot(p_sum, p_left) > 0.0 && dot(p_sum, p_right) > 0.0
}

/// Joins adjacent trees `l` (earlier in time order) and `r`, including the
/// checks across the seam between them.
fn seam_ok(l: &Tree, r: &Tree) -> bool {
    let a: Vec<f64> = l.p_sum.iter().zip(&r.left.p).map(|(x, y)| x + y).collect();
    let b: Vec<f64> = r.p_sum.iter().zip(&l.right.p).map(|(x, y)| x + y).collect();
    no_uturn(&a, &l.left.p, &r.left.p) && no_uturn(&b, &l.right.p, &r.right.p)
}

struct Nuts<'a, 'b, D: ?Sized> {
    w: &'b Whitened<'a, D>,
    eps: f64,
    h0: f64,
}

impl<D: LogDensity + ?Sized> Nuts<'_, '_, D> {
    fn leaf(&self, from: &Point, dir: f64) -> Result<Tree> {
        let mut pt = from.clone();
        self.w.leapfrog(&mut pt, dir * self.eps)?;
        let h = energy(&pt);
        let divergent = h - self.h0 > MAX_ENERGY_ERROR;
        let accept = if h.is_finite() { (self.h0 - h).exp().min(1.0) } else { 0.0 };
        Ok(Tree {
            p_sum: pt.p.clone(),
            left: pt.clone(),
            right: pt.clone(),
            proposal: pt,
            log_w: -h,
            n_leapfrog: 1,
            accept_sum: accept,
            divergent,
            turning: false,
        })
    }

    fn build(&self, from: &Point, depth: usize, dir: f64, rng: &mut ChaCha8Rng) -> Result<Tree> {
        if depth == 0 {
            return self.leaf(from, dir);
        }
        let first = self.build(from, depth - 1, dir, rng)?;
        if first.divergent || first.turning {
            return Ok(first);
        }
        let edge = if dir > 0.0 { &first.right } else { &first.left };
        let second = self.build(edge, depth - 1, dir, rng)?;
        Ok(self.join(first, second, dir, rng, false))
    }

    /// Merges `new` (built in direction `dir`) into `old`. With `biased`,
    /// the new proposal is favoured as in progressive top-level sampling.
    fn join(&self, old: Tree, new: Tree, dir: f64, rng: &mut ChaCha8Rng, biased: bool) -> Tree {
        let n_leapfrog = old.n_leapfrog + new.n_leapfrog;
        let accept_sum = old.accept_sum + new.accept_sum;
        if new.divergent || new.turning {
            return Tree {
                n_leapfrog,
                accept_sum,
                divergent: new.divergent,
                turning: new.turning,
                ..old
            };
        }
        let log_w = log_add_exp(old.log_w, new.log_w);
        let log_take = if biased { new.log_w - old.log_w } else { new.log_w - log_w };
        let u: f64 = rng.random();
        let take_new = log_take >= 0.0 || u.ln() < log_take;
        let p_sum: Vec<f64> = old.p_sum.iter().zip(&new.p_sum).map(|(a, b)| a + b).collect();
        let (l, r) = if dir > 0.0 { (&old, &new) } else { (&new, &old) };
        let turning = !no_uturn(&p_sum, &l.left.p, &r.right.p) || !seam_ok(l, r);
        let (left, right) = if dir > 0.0 {
            (old.left, new.right)
        } else {
            (new.left, old.right)
        };
        Tree {
            left,
            right,
            proposal: if take_new { new.proposal } else { old.proposal },
            log_w,
            p_sum,
            n_leapfrog,
            accept_sum,
            divergent: false,
            turning,
        }
    }

    /// One NUTS transition from `current` (whose momentum is resampled).
    /// One draw: the next point, mean acceptance, divergence flag and
    /// leapfrog count.
    fn transition(&mut self, current: &Point, max_depth: usize, rng: &mut ChaCha8Rng) -> Result<(Point, f64, bool, usize)> {
        let mut start = current.clone();
        for p in start.p.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        self.h0 = energy(&start);
        let mut tree = Tree {
            p_sum: start.p.clone(),
            left: start.clone(),
            right: start.clone(),
            proposal: start,
            log_w: -self.h0,
            n_leapfrog: 0,
            accept_sum: 0.0,
            divergent: false,
            turning: false,
        };
        for depth in 0..max_depth {
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let edge = if dir > 0.0 { tree.right.clone() } else { tree.left.clone() };
            let sub = self.build(&edge, depth, dir, rng)?;
            tree = self.join(tree, sub, dir, rng, true);
            if tree.divergent || tree.turning {
                break;
            }
        }
        let accept = tree.accept_sum / tree.n_leapfrog.max(1) as f64;
        let mut out = tree.proposal;
        out.p.iter_mut().for_each(|p| *p = 0.0);
        Ok((out, accept, tree.divergent, tree.n_leapfrog))
    }
}

/// Dual averaging of the log step size toward a target acceptance.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let eta = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept);
        self.log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let w = self.t.powf(-KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Doubles or halves a trial step until one leapfrog step crosses an
/// acceptance of one half.
fn initial_step_size<D: LogDensity + ?Sized>(
    w: &Whitened<'_, D>,
    current: &Point,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut eps: f64 = 1.0;
    let mut start = current.clone();
    for p in start.p.iter_mut() {
        *p = rng.sample(StandardNormal);
    }
    let h0 = energy(&start);
    let accept_log = |eps: f64| -> Result<f64> {
        let mut pt = start.clone();
        w.leapfrog(&mut pt, eps)?;
        let h = energy(&pt);
        Ok(if h.is_finite() { h0 - h } else { f64::NEG_INFINITY })
    };
    let up = accept_log(eps)? > 0.5f64.ln();
    for _ in 0..60 {
        let a = accept_log(eps)?;
        if up != (a > 0.5f64.ln()) {
            break;
        }
        eps = if up { eps * 2.0 } else { eps / 2.0 };
    }
    Ok(eps)
}

fn run_chain_nuts<D: LogDensity + ?Sized>(
    target: &D,
    cfg: &ChainConfig,
    chain: usize,
    init: &(dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync),
) -> Result<ChainOutput> {
    let d = target.dim();
    let thin = cfg.thin_for(d);
    let mut rng = chain_rng(cfg, chain);
    let (x0, _) = initial_point(target, chain, &mut rng, init)?;
    // start from a draw of a Gaussian approximation found along a
    // quasi-Newton path, which also seeds the metric
    let path = ascend(target, x0.clone(), MAX_ASCENT_ITERATIONS)?;
    let mut x_start = x0;
    let mut chol = vec![0.0; d * d];
    for i in 0..d {
        chol[i * d + i] = 1.0;
    }
    let laplace = best_laplace(target, &path, &mut rng)?;
    let seeded = laplace.is_some();
    if let Some(best) = laplace {
        x_start = best.draw;
        chol = best.chol;
    }
    let mut w = Whitened { target, chol, d };
    let mut current = w.point(w.to_y(&x_start))?;
    let mut eps = initial_step_size(&w, &current, &mut rng)?;
    let mut da = DualAveraging::new(eps, cfg.target_accept());
    let (init_buffer, windows) = adaptation_windows(cfg.n_warmup);
    let mut window_idx = 0;
    let mut moments = Moments::new(d);

    let mut draws = Vec::with_capacity(cfg.n_samples * d);
    let mut accept_total = 0.0;
    let mut divergent = 0;
    let mut leapfrog = 0;
    for iter in 0..cfg.n_warmup + cfg.n_samples {
        let warm = iter < cfg.n_warmup;
        for _ in 0..thin {
            let mut nuts = Nuts { w: &w, eps, h0: 0.0 };
            let (next, accept, div, steps) = nuts.transition(&current, cfg.max_tree_depth, &mut rng)?;
            current = next;
            if warm {
                eps = da.update(accept);
            } else {
                accept_total += accept;
                divergent += div as usize;
                leapfrog += steps;
            }
        }
        if warm {
            if iter >= init_buffer && window_idx < windows.len() {
                moments.push(&w.to_x(&current.y));
                if iter + 1 == windows[window_idx] {
                    let x = w.to_x(&current.y);
                    let cov = if seeded {
                        moments.covariance_toward(&outer_lower(&w.chol, d))
                    } else {
                        moments.covariance(window_idx > 0)
                    };
                    w.chol = cholesky(&cov, d);
                    current = w.point(w.to_y(&x))?;
                    eps = initial_step_size(&w, &current, &mut rng)?;
                    da = DualAveraging::new(eps, cfg.target_accept());
                    moments = Moments::new(d);
                    window_idx += 1;
                }
            }
            if iter + 1 == cfg.n_warmup {
                eps = da.final_eps();
            }
        } else {
            draws.extend(w.to_x(&current.y));
        }
    }
    Ok(ChainOutput {
        draws,
        accept_rate: accept_total / (cfg.n_samples * thin) as f64,
        step_scale: eps,
        divergent,
        leapfrog: leapfrog as f64 / (cfg.n_samples * thin) as f64,
    })
}

fn check_value(v: f64, x: &[f64]) -> Result<()> {
    if v.is_nan() || v == f64::INFINITY {
        let finite = x.iter().all(|a| a.is_finite());
        return Err(Error::Sampler(format!(
            "log density returned {v} at a {} point",
            if finite { "finite" } else { "non-finite" }
        )));
    }
    Ok(())
}

/// Runs `cfg.n_chains` chains and collects their draws.
///
/// `init` draws a starting point; it is retried up to [`MAX_INIT_TRIES`]
/// times per chain until the density is finite.
pub fn run_chains<D: LogDensity + ?Sized>(
    target: &D,
    names: Vec<String>,
    cfg: &ChainConfig,
    init: &(dyn Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync),
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if names.len() != target.dim() {
        return Err(Error::Misaligned(format!("{} names for dimension {}", names.len(), target.dim())));
    }
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| match cfg.algorithm {
            Algorithm::Nuts => run_chain_nuts(target, cfg, c, init),
            Algorithm::Metropolis => run_chain_metropolis(target, cfg, c, init),
        })
        .collect();
    let mut values = Vec::with_capacity(cfg.n_chains * cfg.n_samples * names.len());
    let mut accept = Vec::new();
    let mut scales = Vec::new();
    let mut divergent = Vec::new();
    let mut leapfrog = Vec::new();
    for out in outputs {
        let out = out?;
        values.extend(out.draws);
        accept.push(out.accept_rate);
        scales.push(out.step_scale);
        divergent.push(out.divergent);
        leapfrog.push(out.leapfrog);
    }
    let mut draws = PosteriorDraws::new(names, cfg.n_chains, cfg.n_samples, values)?;
    draws.accept_rate = accept;
    draws.step_scale = scales;
    draws.divergent = divergent;
    draws.leapfrog = leapfrog;
    Ok(draws)
}

/// Per-parameter convergence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub rhat: f64,
    pub ess: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        // an odd middle draw is dropped
        out.push(&c[..half]);
        out.push(&c[c.len() - half..]);
    }
    out
}

fn check_draws(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < MIN_CHAINS {
        return Err(Error::InsufficientDraws(format!("{} chain(s); need {MIN_CHAINS}", chains.len())));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Misaligned("chains have unequal lengths".into()));
    }
    if n < MIN_DIAGNOSTIC_DRAWS {
        return Err(Error::InsufficientDraws(format!("{n} draws per chain; need {MIN_DIAGNOSTIC_DRAWS}")));
    }
    Ok(n)
}

/// Between- and within-chain variances of equal-length chains.
fn b_and_w(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let m = chains.len() as f64;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    (b, w)
}

/// Split potential scale reduction factor.
///
/// Identical constant chains give 1; zero within-chain variance with
/// differing chains gives infinity.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_draws(chains)?;
    let s = split(chains);
    let (b, w) = b_and_w(&s);
    let n = s[0].len() as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Autocovariance at lags `0..n` by direct summation.
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mu = mean(x);
    let dev: Vec<f64> = x.iter().map(|v| v - mu).collect();
    (0..max_lag.min(n))
        .map(|lag| dev[..n - lag].iter().zip(&dev[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Effective sample size from split chains with Geyer's initial monotone
/// sequence estimator.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    check_draws(chains)?;
    let s = split(chains);
    let m = s.len();
    let n = s[0].len();
    let (b, w) = b_and_w(&s);
    let total = (m * n) as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { total } else { f64::NAN });
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    let acov: Vec<Vec<f64>> = s.iter().map(|c| autocovariance(c, n)).collect();
    let rho = |t: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    // pairs (rho_{2k}, rho_{2k+1}) while their sum stays positive
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        sum_pairs += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (total).log10().max(1.0));
    Ok(total / tau)
}

/// R-hat and ESS for every parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<Diagnostic>> {
    (0..draws.dim())
        .map(|p| {
            let chains = draws.chains_of(p);
            Ok(Diagnostic {
                rhat: split_rhat(&chains)?,
                ess: effective_sample_size(&chains)?,
            })
        })
        .collect()
}

/// Posterior summary of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// `(probability, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
}

impl Summary {
    pub fn quantile(&self, p: f64) -> Option<f64> {
        self.quantiles.iter().find(|q| (q.0 - p).abs() < 1e-12).map(|q| q.1)
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median and the requested quantiles of pooled draws.
pub fn summarize(values: &[f64], probs: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InsufficientDraws("no draws to summarize".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("draws contain NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(Summary {
        mean: mean(values),
        median: quantile_sorted(&sorted, 0.5),
        quantiles: probs.iter().map(|&p| (p, quantile_sorted(&sorted, p))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.mean)
                .zip(&self.sd)
                .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2))
                .sum()
        }

        fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
            for i in 0..x.len() {
                grad[i] = -(x[i] - self.mean[i]) / (self.sd[i] * self.sd[i]);
            }
            Some(self.log_density(x))
        }
    }

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("x{i}")).collect()
    }

    fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn warmup_windows_double() {
        assert_eq!(adaptation_windows(1000), (75, vec![100, 150, 250, 450, 950]));
        assert_eq!(adaptation_windows(100), (15, vec![40, 90]));
    }

    #[test]
    fn standard_normal_moments() {
        let target = Gaussian {
            mean: vec![0.0; 5],
            sd: vec![1.0; 5],
        };
        for algorithm in [Algorithm::Nuts, Algorithm::Metropolis] {
            let cfg = ChainConfig {
                algorithm,
                n_chains: 4,
                n_warmup: 500,
                n_samples: 5000,
                seed: 12,
                ..ChainConfig::default()
            };
            let draws = run_chains(&target, names(5), &cfg, &|r| (0..5).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
            let n = (4 * 5000) as f64;
            let means: Vec<f64> = (0..5).map(|p| draws.pooled(p).iter().sum::<f64>() / n).collect();
            for p in 0..5 {
                assert!(means[p].abs() < 0.05, "{algorithm:?} mean {p}: {}", means[p]);
                for q in 0..5 {
                    let cov = draws.iter().map(|d| (d[p] - means[p]) * (d[q] - means[q])).sum::<f64>() / (n - 1.0);
                    let want = if p == q { 1.0 } else { 0.0 };
                    assert!((cov - want).abs() < 0.1, "{algorithm:?} cov {p},{q}: {cov}");
                }
            }
        }
    }

    #[test]
    fn recovers_gaussian_moments() {
        let target = Gaussian {
            mean: vec![1.0, -2.0, 0.0, 5.0, 0.5],
            sd: vec![1.0, 0.5, 2.0, 0.1, 3.0],
        };
        let cfg = ChainConfig {
            algorithm: Algorithm::Metropolis,
            n_chains: 4,
            n_warmup: 500,
            n_samples: 1000,
            seed: 11,
            ..ChainConfig::default()
        };
        let draws = run_chains(&target, names(5), &cfg, &|r| (0..5).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        for p in 0..5 {
            let s = summarize(&draws.pooled(p), &SUMMARY_QUANTILES).unwrap();
            let tol = 0.1 * target.sd[p];
            assert!((s.mean - target.mean[p]).abs() < tol, "param {p}: mean {}", s.mean);
            let v = draws.pooled(p).iter().map(|x| (x - s.mean).powi(2)).sum::<f64>() / (4000.0 - 1.0);
            assert!((v.sqrt() / target.sd[p] - 1.0).abs() < 0.1, "param {p}: sd {}", v.sqrt());
        }
        for d in diagnostics(&draws).unwrap() {
            assert!(d.rhat < 1.05);
        }
        for a in &draws.accept_rate {
            assert!((0.1..0.45).contains(a), "accept {a}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let target = Gaussian {
            mean: vec![0.0; 3],
            sd: vec![1.0; 3],
        };
        let cfg = ChainConfig {
            n_chains: 3,
            n_warmup: 100,
            n_samples: 50,
            seed: 3,
            ..ChainConfig::default()
        };
        let init = |r: &mut ChaCha8Rng| (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = run_chains(&target, names(3), &cfg, &init).unwrap();
        let b = run_chains(&target, names(3), &cfg, &init).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        let other = run_chains(&target, names(3), &ChainConfig { seed: 4, ..cfg }, &init).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn csv_round_trip() {
        let draws = PosteriorDraws::new(names(2), 2, 3, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        draws.save_csv(&path).unwrap();
        let back = PosteriorDraws::load_csv(&path).unwrap();
        assert_eq!(back.pooled(1), draws.pooled(1));
        assert_eq!(back.n_chains, 2);
    }

    #[test]
    fn rhat_cases() {
        let iid = iid_chains(4, 1000, 1);
        let r = split_rhat(&iid).unwrap();
        assert!((r - 1.0).abs() < 0.01, "{r}");
        let constant = vec![vec![2.0; 200]; 4];
        assert_eq!(split_rhat(&constant).unwrap(), 1.0);
        let shifted: Vec<Vec<f64>> = (0..4).map(|c| vec![c as f64; 200]).collect();
        assert_eq!(split_rhat(&shifted).unwrap(), f64::INFINITY);
        let offset: Vec<Vec<f64>> = iid.iter().enumerate().map(|(c, v)| v.iter().map(|x| x + 3.0 * c as f64).collect()).collect();
        assert!(split_rhat(&offset).unwrap() > 1.5);
    }

    #[test]
    fn insufficient_draws() {
        assert!(matches!(split_rhat(&iid_chains(1, 500, 2)), Err(Error::InsufficientDraws(_))));
        assert!(matches!(split_rhat(&iid_chains(4, 50, 2)), Err(Error::InsufficientDraws(_))));
        assert!(matches!(effective_sample_size(&iid_chains(4, 99, 2)), Err(Error::InsufficientDraws(_))));
    }

    #[test]
    fn ess_of_iid_and_ar1() {
        let iid = iid_chains(4, 1000, 5);
        let ess = effective_sample_size(&iid).unwrap();
        assert!((ess / 4000.0 - 1.0).abs() < 0.2, "{ess}");
        // AR(1) with rho = 0.9 has ESS/N = (1 - rho) / (1 + rho)
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ar: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = effective_sample_size(&ar).unwrap();
        let want = 20000.0 * 0.1 / 1.9;
        assert!((ess / want - 1.0).abs() < 0.25, "{ess} vs {want}");
    }

    #[test]
    fn uniform_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u: Vec<f64> = (0..1_000_000).map(|_| rng.random::<f64>()).collect();
        let s = summarize(&u, &SUMMARY_QUANTILES).unwrap();
        assert!((s.quantile(0.025).unwrap() - 0.025).abs() < 0.003);
        assert!((s.quantile(0.975).unwrap() - 0.975).abs() < 0.003);
        assert!((s.median - 0.5).abs() < 0.003);
    }

    #[test]
    fn quantile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!(summarize(&[], &[0.5]).is_err());
    }

    #[test]
    fn rejects_bad_config_and_nan_density() {
        let target = Gaussian {
            mean: vec![0.0],
            sd: vec![1.0],
        };
        let init = |_: &mut ChaCha8Rng| vec![0.0];
        let bad = ChainConfig {
            n_chains: 1,
            ..ChainConfig::default()
        };
        assert!(run_chains(&target, names(1), &bad, &init).is_err());
        let bad = ChainConfig {
            n_warmup: 50,
            ..ChainConfig::default()
        };
        assert!(run_chains(&target, names(1), &bad, &init).is_err());

        struct Broken;
        impl LogDensity for Broken {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                if x[0] > 0.5 {
                    f64::NAN
                } else {
                    -x[0] * x[0]
                }
            }
        }
        let cfg = ChainConfig {
            algorithm: Algorithm::Metropolis,
            n_warmup: 100,
            n_samples: 100,
            ..ChainConfig::default()
        };
        let err = run_chains(&Broken, names(1), &cfg, &init).unwrap_err();
        assert!(matches!(err, Error::Sampler(_)));

        struct Nowhere;
        impl LogDensity for Nowhere {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, _: &[f64]) -> f64 {
                f64::NEG_INFINITY
            }
        }
        assert!(matches!(run_chains(&Nowhere, names(1), &cfg, &init), Err(Error::Sampler(_))));
    }

    #[test]
    fn beta_posterior_through_logit() {
        // Beta(80, 80) sampled on the logit scale with its Jacobian
        struct LogitBeta;
        impl LogDensity for LogitBeta {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                let p = 1.0 / (1.0 + (-x[0]).exp());
                79.0 * p.ln() + 79.0 * (1.0 - p).ln() + p.ln() + (1.0 - p).ln()
            }
            fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> Option<f64> {
                let p = 1.0 / (1.0 + (-x[0]).exp());
                grad[0] = 80.0 * (1.0 - p) - 80.0 * p;
                Some(self.log_density(x))
            }
        }
        let cfg = ChainConfig {
            n_chains: 4,
            n_warmup: 500,
            n_samples: 2000,
            seed: 21,
            ..ChainConfig::default()
        };
        let draws = run_chains(&LogitBeta, names(1), &cfg, &|r| vec![r.random_range(-0.5..0.5)]).unwrap();
        let p: Vec<f64> = draws.pooled(0).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let s = summarize(&p, &SUMMARY_QUANTILES).unwrap();
        // sd of Beta(80, 80) is sqrt(0.25 / 161)
        let sd = (0.25f64 / 161.0).sqrt();
        assert!((s.mean - 0.5).abs() < 0.1 * sd * 3.0, "{}", s.mean);
        let v = p.iter().map(|x| (x - s.mean).powi(2)).sum::<f64>() / (p.len() as f64 - 1.0);
        assert!((v.sqrt() / sd - 1.0).abs() < 0.1);
    }
}
