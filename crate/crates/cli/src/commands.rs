use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use epirenew::fit::{fit, Fit};
use epirenew::hierarchy::sample_prior;
use epirenew::ingest::{load_ifr, load_mobility, load_population, Ingested};
use epirenew::model::Model;
use epirenew::nowcast::{estimate_eta, DelayProfile, ReportingTriangle};
use epirenew::report::{build_report, emit_report};
use epirenew::sampler::{diagnostics, PosteriorDraws};
use epirenew::simulate::{simulate, SimInput, TrueParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;

pub const DRAWS_FILE: &str = "draws.csv";
pub const SAMPLER_FILE: &str = "sampler.json";

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Convergence(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Convergence(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "error: {e:#}"),
            Failure::Data(e) => write!(f, "data error: {e:#}"),
            Failure::Convergence(msg) => write!(f, "convergence failure: {msg}"),
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

/// Run-time overrides shared by the commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, m: &mut Manifest) -> Outcome {
        if let Some(s) = self.seed {
            m.chains.seed = s;
        }
        if let Some(c) = self.chains {
            m.chains.n_chains = c;
        }
        if let Some(o) = &self.output {
            m.output.dir = o.clone();
        }
        m.chains.validate().map_err(usage)
    }
}

struct Prepared {
    ingested: Ingested,
    model: Model,
}

fn check_files(m: &Manifest) -> Outcome {
    for (role, path) in m.files() {
        if !path.is_file() {
            return Err(data(anyhow!("{role} file not found: {}", path.display())));
        }
    }
    Ok(())
}

fn delay_profile(m: &Manifest) -> epirenew::Result<DelayProfile> {
    match &m.inputs.triangle {
        Some(path) => estimate_eta(&ReportingTriangle::load(path, m.inputs.max_delay)?),
        None => Ok(DelayProfile::immediate()),
    }
}

fn prepare(m: &Manifest) -> std::result::Result<Prepared, Failure> {
    check_files(m)?;
    let ingested = epirenew::ingest::load_all(&m.paths(), &m.ingest_options()).map_err(data)?;
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    for (state, why) in &ingested.excluded {
        eprintln!("excluded {state}: {why}");
    }
    let delay = delay_profile(m).map_err(data)?;
    let model = Model::build(&ingested.states, &delay, &m.priors, &m.model).map_err(data)?;
    Ok(Prepared { ingested, model })
}

/// Sampler statistics that the draws table cannot carry.
#[derive(Debug, Serialize, Deserialize)]
struct SamplerStats {
    accept_rate: Vec<f64>,
    step_scale: Vec<f64>,
    divergent: Vec<usize>,
    leapfrog: Vec<f64>,
}

fn write_report(m: &Manifest, p: &Prepared, fit: &Fit) -> Outcome {
    let report = build_report(&p.model, fit, &p.ingested.states, &m.chains, m.output.as_of, m.chains.seed).map_err(data)?;
    let written = emit_report(&report, &m.output.dir).map_err(usage)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    match &report.run.warning {
        Some(w) => {
            eprintln!("WARNING: {w}");
            Err(Failure::Convergence(format!("max R-hat {:.3}", report.run.max_rhat)))
        }
        None => Ok(()),
    }
}

fn print_dimensions(p: &Prepared) {
    println!("states      {}", p.model.n_states());
    println!("parameters  {}", p.model.dim());
    for st in &p.model.states {
        println!(
            "  {:<24} {} .. {}  fit from {}  ({} days)",
            st.name,
            st.date(0),
            st.date(st.days() - 1),
            st.date(st.fit_start),
            st.days()
        );
    }
}

pub fn cmd_fit(m: &Manifest, dry_run: bool, allow_nonconverged: bool) -> Outcome {
    let p = prepare(m)?;
    print_dimensions(&p);
    if dry_run {
        return Ok(());
    }
    let fit = fit(&p.model, &m.chains).map_err(usage)?;
    std::fs::create_dir_all(&m.output.dir)
        .with_context(|| format!("cannot create {}", m.output.dir.display()))
        .map_err(usage)?;
    fit.draws.save_csv(&m.output.dir.join(DRAWS_FILE)).map_err(usage)?;
    let stats = SamplerStats {
        accept_rate: fit.draws.accept_rate.clone(),
        step_scale: fit.draws.step_scale.clone(),
        divergent: fit.draws.divergent.clone(),
        leapfrog: fit.draws.leapfrog.clone(),
    };
    let path = m.output.dir.join(SAMPLER_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&stats).map_err(usage)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(usage)?;
    println!("max R-hat {:.4}  min ESS {:.0}", fit.max_rhat(), fit.min_ess());
    match write_report(m, &p, &fit) {
        Err(Failure::Convergence(_)) if allow_nonconverged => Ok(()),
        r => r,
    }
}

/// Rebuilds the report from a previous fit's stored draws.
pub fn cmd_summarize(m: &Manifest, allow_nonconverged: bool) -> Outcome {
    let p = prepare(m)?;
    let path = m.output.dir.join(DRAWS_FILE);
    let mut draws = PosteriorDraws::load_csv(&path).map_err(data)?;
    if draws.names != p.model.parameter_names() {
        return Err(data(anyhow!("{} does not match the manifest's model", path.display())));
    }
    let stats_path = m.output.dir.join(SAMPLER_FILE);
    if let Ok(text) = std::fs::read_to_string(&stats_path) {
        let s: SamplerStats = serde_json::from_str(&text)
            .with_context(|| format!("bad {}", stats_path.display()))
            .map_err(data)?;
        draws.accept_rate = s.accept_rate;
        draws.step_scale = s.step_scale;
        draws.divergent = s.divergent;
        draws.leapfrog = s.leapfrog;
    }
    let diagnostics = diagnostics(&draws).map_err(data)?;
    let fit = Fit {
        draws,
        diagnostics,
        n_states: p.model.n_states(),
    };
    match write_report(m, &p, &fit) {
        Err(Failure::Convergence(_)) if allow_nonconverged => Ok(()),
        r => r,
    }
}

pub fn cmd_simulate(m: &Manifest, truth_path: &Path) -> Outcome {
    let text = std::fs::read_to_string(truth_path)
        .with_context(|| format!("cannot read {}", truth_path.display()))
        .map_err(usage)?;
    let truth: TrueParams = serde_json::from_str(&text)
        .with_context(|| format!("bad true parameters in {}", truth_path.display()))
        .map_err(usage)?;
    for (role, path) in m.files().into_iter().filter(|(r, _)| matches!(*r, "mobility" | "population" | "ifr")) {
        if !path.is_file() {
            return Err(data(anyhow!("{role} file not found: {}", path.display())));
        }
    }
    let mobility = load_mobility(&m.inputs.mobility).map_err(data)?;
    let population = load_population(&m.inputs.population).map_err(data)?;
    let ifr = load_ifr(&m.inputs.ifr).map_err(data)?;
    let inputs = truth
        .states
        .keys()
        .map(|name| {
            let missing = |what: &str| data(anyhow!("no {what} for simulated state `{name}`"));
            Ok(SimInput {
                name: name.clone(),
                population: *population.get(name).ok_or_else(|| missing("population"))?,
                ifr_percent: *ifr.get(name).ok_or_else(|| missing("IFR"))?,
                mobility: mobility.data.get(name).ok_or_else(|| missing("mobility"))?.clone(),
            })
        })
        .collect::<std::result::Result<Vec<_>, Failure>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(m.chains.seed);
    let sim = simulate(&truth, &inputs, &m.model, &mut rng).map_err(usage)?;
    let dir = &m.output.dir;
    sim.save(&truth, dir).map_err(usage)?;
    let manifest = format!(
        "[inputs]\ndeaths = \"deaths.csv\"\nmobility = \"mobility.csv\"\npopulation = \"population.csv\"\n\
         ifr = \"ifr.csv\"\ntriangle = \"triangle.csv\"\nmax_delay = {}\n\n[output]\ndir = \"fit\"\n",
        truth.eta.len().saturating_sub(1)
    );
    std::fs::write(dir.join("manifest.toml"), manifest).map_err(usage)?;
    for s in &sim.states {
        println!("{:<24} {} deaths  window from day {}", s.name, s.total_deaths(), s.window_start);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// One row of the validation table.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, result: std::result::Result<String, String>) -> Check {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Number of prior draws pushed through the forward model.
pub const PRIOR_PREDICTIVE_DRAWS: usize = 100;

/// Runs every input and model check without stopping at the first
/// failure.
pub fn validation_checks(m: &Manifest) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut files_ok = true;
    for (role, path) in m.files() {
        let ok = path.is_file();
        files_ok &= ok;
        checks.push(Check::new(
            format!("file {role}"),
            if ok { Ok(path.display().to_string()) } else { Err(format!("not found: {}", path.display())) },
        ));
    }
    if !files_ok {
        return checks;
    }
    let tables: [(&str, Box<dyn Fn() -> epirenew::Result<String>>); 4] = [
        ("deaths table", Box::new(|| epirenew::ingest::load_deaths(&m.inputs.deaths).map(|l| format!("{} states", l.data.len())))),
        ("mobility table", Box::new(|| load_mobility(&m.inputs.mobility).map(|l| format!("{} states", l.data.len())))),
        ("population table", Box::new(|| load_population(&m.inputs.population).map(|p| format!("{} states", p.len())))),
        ("ifr table", Box::new(|| load_ifr(&m.inputs.ifr).map(|p| format!("{} states", p.len())))),
    ];
    for (name, load) in &tables {
        checks.push(Check::new(*name, load().map_err(|e| e.to_string())));
    }
    let delay = delay_profile(m);
    checks.push(Check::new(
        "reporting delay",
        delay.as_ref().map(|d| format!("{} delay days", d.max_delay())).map_err(|e| e.to_string()),
    ));
    let ingested = epirenew::ingest::load_all(&m.paths(), &m.ingest_options());
    checks.push(Check::new(
        "state windows",
        ingested
            .as_ref()
            .map(|i| format!("{} fitted, {} excluded, {} warnings", i.states.len(), i.excluded.len(), i.warnings.len()))
            .map_err(|e| e.to_string()),
    ));
    let longest = ingested
        .as_ref()
        .map(|i| i.states.iter().map(|s| s.deaths.len() - s.window_start).max().unwrap_or(0))
        .unwrap_or(0);
    checks.push(Check::new(
        "pmf horizon",
        m.model.pmfs(longest).map_err(|e| e.to_string()).and_then(|(g, pi)| {
            let sums = [g.as_slice().iter().sum::<f64>(), pi.as_slice().iter().sum::<f64>()];
            if sums.iter().all(|s| (s - 1.0).abs() < 1e-9) {
                Ok(format!("g and pi normalized over {} days", pi.as_slice().len()))
            } else {
                Err(format!("pmf sums {sums:?}"))
            }
        }),
    ));
    let (Ok(ingested), Ok(delay)) = (ingested, delay) else {
        return checks;
    };
    let model = Model::build(&ingested.states, &delay, &m.priors, &m.model);
    checks.push(Check::new(
        "model build",
        model.as_ref().map(|md| format!("{} parameters", md.dim())).map_err(|e| e.to_string()),
    ));
    if let Ok(model) = model {
        let mut rng = ChaCha8Rng::seed_from_u64(m.chains.seed);
        let mut bad = 0;
        for _ in 0..PRIOR_PREDICTIVE_DRAWS {
            let theta = sample_prior(&model.priors, model.n_states(), &mut rng);
            for s in 0..model.n_states() {
                let latent = model.latent(&theta, s);
                if !latent.reported.iter().all(|d| d.is_finite() && *d >= 0.0) {
                    bad += 1;
                }
            }
        }
        checks.push(Check::new(
            "prior predictive",
            if bad == 0 {
                Ok(format!("{PRIOR_PREDICTIVE_DRAWS} draws with finite expected deaths"))
            } else {
                Err(format!("{bad} state draws with non-finite expected deaths"))
            },
        ));
    }
    checks
}

pub fn cmd_validate(m: &Manifest) -> Outcome {
    let checks = validation_checks(m);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{:<width$}  {status}  {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(data(anyhow!("{failed} of {} checks failed", checks.len())))
    }
}
