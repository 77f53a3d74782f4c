//! Run manifest: a TOML file naming every input and setting of a run.
//! Relative paths resolve against the manifest's own directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::NaiveDate;
use epirenew::hierarchy::PriorSpec;
use epirenew::ingest::{IngestOptions, InputPaths, DEATH_THRESHOLD, WINDOW_LEAD_DAYS};
use epirenew::model::ModelOptions;
use epirenew::sampler::ChainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub deaths: PathBuf,
    pub mobility: PathBuf,
    pub population: PathBuf,
    pub ifr: PathBuf,
    /// Reporting triangle; without one every death counts as reported at
    /// once.
    pub triangle: Option<PathBuf>,
    /// Longest reporting delay in days; later reports fold into it.
    #[serde(default = "default_max_delay")]
    pub max_delay: usize,
    #[serde(default = "default_threshold")]
    pub death_threshold: u64,
    #[serde(default = "default_lead")]
    pub lead_days: usize,
}

fn default_max_delay() -> usize {
    10
}

fn default_threshold() -> u64 {
    DEATH_THRESHOLD
}

fn default_lead() -> usize {
    WINDOW_LEAD_DAYS
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: PathBuf,
    /// Date the summary table refers to; defaults to the last day every
    /// state has data for.
    pub as_of: Option<NaiveDate>,
}

impl Default for Output {
    fn default() -> Self {
        Output {
            dir: PathBuf::from("out"),
            as_of: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub inputs: Inputs,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub chains: ChainConfig,
    #[serde(default)]
    pub output: Output,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Manifest> {
        let mut m: Manifest = toml::from_str(text)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.inputs.deaths);
        resolve(&mut m.inputs.mobility);
        resolve(&mut m.inputs.population);
        resolve(&mut m.inputs.ifr);
        if let Some(t) = m.inputs.triangle.as_mut() {
            resolve(t);
        }
        resolve(&mut m.output.dir);
        m.priors.validate()?;
        m.chains.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> anyhow::Result<Manifest> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, base).with_context(|| format!("invalid manifest {}", path.display()))
    }

    pub fn paths(&self) -> InputPaths<'_> {
        InputPaths {
            deaths: &self.inputs.deaths,
            mobility: &self.inputs.mobility,
            population: &self.inputs.population,
            ifr: &self.inputs.ifr,
        }
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            threshold: self.inputs.death_threshold,
            lead_days: self.inputs.lead_days,
        }
    }

    /// Every referenced input file with its role.
    pub fn files(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![
            ("deaths", self.inputs.deaths.as_path()),
            ("mobility", self.inputs.mobility.as_path()),
            ("population", self.inputs.population.as_path()),
            ("ifr", self.inputs.ifr.as_path()),
        ];
        if let Some(t) = &self.inputs.triangle {
            v.push(("triangle", t.as_path()));
        }
        v
    }
}
