//! Experiment configuration: a flat `key = value` text file plus overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::EnvKind;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::pruning::{check_sparsity, Criterion};
use crate::rl::{Algorithm, Architecture, BcqConfig};

/// Environment variable that overrides the output root.
pub const OUT_DIR_ENV: &str = "SPARSERL_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchScale {
    Full,
    Toy,
}

impl ArchScale {
    pub fn architecture(self) -> Architecture {
        match self {
            ArchScale::Full => Architecture::full(),
            ArchScale::Toy => Architecture::toy(),
        }
    }
}

impl fmt::Display for ArchScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchScale::Full => "full",
            ArchScale::Toy => "toy",
        })
    }
}

impl FromStr for ArchScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ArchScale::Full),
            "toy" => Ok(ArchScale::Toy),
            other => Err(Error::InvalidConfig(format!("unknown architecture scale '{other}'"))),
        }
    }
}

/// `None` means no pruning; only valid with sparsity 0.
pub fn parse_criterion(s: &str) -> Result<Option<Criterion>> {
    match s {
        "none" => Ok(None),
        "snip" => Ok(Some(Criterion::Snip)),
        "grasp" => Ok(Some(Criterion::Grasp)),
        other => Err(Error::InvalidConfig(format!("unknown criterion '{other}'"))),
    }
}

pub fn criterion_name(c: Option<Criterion>) -> String {
    c.map_or_else(|| "none".to_string(), |c| c.to_string())
}

/// One batch of 100 transitions for SNIP and 200 for GraSP.
pub fn default_prune_batch(criterion: Criterion) -> usize {
    match criterion {
        Criterion::Snip => 100,
        Criterion::Grasp => 200,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub criterion: Option<Criterion>,
    pub sparsity: f64,
    pub env: EnvKind,
    pub dataset: PathBuf,
    pub seeds: Vec<u64>,
    pub gradient_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub batch_size: usize,
    /// `None` picks the criterion's default, [`default_prune_batch`].
    pub prune_batch_size: Option<usize>,
    pub prune_batches: usize,
    pub arch: ArchScale,
    pub hyper: BcqConfig,
    pub lr: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::Bc,
            criterion: None,
            sparsity: 0.0,
            env: EnvKind::PointMass,
            dataset: PathBuf::from("data/point-mass.srld"),
            seeds: vec![0, 1, 2, 3, 4],
            gradient_steps: 50_000,
            eval_every: 2_500,
            eval_episodes: 10,
            batch_size: 256,
            prune_batch_size: None,
            prune_batches: 1,
            arch: ArchScale::Toy,
            hyper: BcqConfig::default(),
            lr: AdamConfig::default().lr,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value '{value}' for '{key}'")))
}

impl ExperimentConfig {
    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "algo" | "algorithm" => self.algorithm = v.parse()?,
            "criterion" => self.criterion = parse_criterion(v)?,
            "sparsity" => self.sparsity = parse(key, v)?,
            "env" => self.env = v.parse()?,
            "dataset" => self.dataset = PathBuf::from(v),
            "seed" => self.seeds = vec![parse(key, v)?],
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "gradient_steps" => self.gradient_steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "prune_batch_size" => {
                self.prune_batch_size = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "prune_batches" => self.prune_batches = parse(key, v)?,
            "arch" => self.arch = v.parse()?,
            "gamma" => self.hyper.gamma = parse(key, v)?,
            "tau" => self.hyper.tau = parse(key, v)?,
            "phi" => self.hyper.phi = parse(key, v)?,
            "lambda" => self.hyper.lambda = parse(key, v)?,
            "n_action_samples" => self.hyper.n_action_samples = parse(key, v)?,
            "n_eval_samples" => self.hyper.n_eval_samples = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::InvalidConfig(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// The config as `key = value` text that [`parse_text`](Self::parse_text)
    /// reads back unchanged.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let h = &self.hyper;
        [
            format!("algo = {}", self.algorithm),
            format!("criterion = {}", criterion_name(self.criterion)),
            format!("sparsity = {}", self.sparsity),
            format!("env = {}", self.env),
            format!("dataset = {}", self.dataset.display()),
            format!("seeds = {}", seeds.join(",")),
            format!("gradient_steps = {}", self.gradient_steps),
            format!("eval_every = {}", self.eval_every),
            format!("eval_episodes = {}", self.eval_episodes),
            format!("batch_size = {}", self.batch_size),
            format!(
                "prune_batch_size = {}",
                self.prune_batch_size.map_or_else(|| "auto".to_string(), |n| n.to_string())
            ),
            format!("prune_batches = {}", self.prune_batches),
            format!("arch = {}", self.arch),
            format!("gamma = {}", h.gamma),
            format!("tau = {}", h.tau),
            format!("phi = {}", h.phi),
            format!("lambda = {}", h.lambda),
            format!("n_action_samples = {}", h.n_action_samples),
            format!("n_eval_samples = {}", h.n_eval_samples),
            format!("lr = {}", self.lr),
            format!("out = {}", self.out.display()),
        ]
        .join("\n")
            + "\n"
    }

    /// Transitions per pruning batch for `criterion`.
    pub fn prune_batch_for(&self, criterion: Criterion) -> usize {
        self.prune_batch_size.unwrap_or_else(|| default_prune_batch(criterion))
    }

    /// Output root, honoring [`OUT_DIR_ENV`].
    pub fn out_root(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV).map_or_else(|| self.out.clone(), PathBuf::from)
    }

    /// Directory name for one configuration, e.g. `bcq-snip-0.95`.
    pub fn cell_name(&self) -> String {
        format!("{}-{}-{}", self.algorithm, criterion_name(self.criterion), self.sparsity)
    }

    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.sparsity)?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.criterion.is_none() && self.sparsity > 0.0 {
            return bad("sparsity > 0 needs a pruning criterion");
        }
        if self.seeds.is_empty() {
            return bad("no seeds given");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.batch_size == 0 || self.prune_batch_size == Some(0) || self.prune_batches == 0 {
            return bad("batch sizes and prune_batches must be positive");
        }
        let h = &self.hyper;
        if !(0.0..=1.0).contains(&h.tau) || !(0.0..=1.0).contains(&h.lambda) || !(0.0..=1.0).contains(&h.gamma) {
            return bad("gamma, tau and lambda must lie in [0, 1]");
        }
        if h.n_action_samples == 0 || h.n_eval_samples == 0 {
            return bad("action sample counts must be positive");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !h.phi.is_finite() || h.phi < 0.0 {
            return bad("lr must be positive and phi non-negative");
        }
        Ok(())
    }
}
