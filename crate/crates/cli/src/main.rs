//! Command-line front end: dataset generation, runs, sweeps and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparserl::dataset::{generate_dataset, DataPolicy};
use sparserl::env::EnvKind;
use sparserl::harness::{
    report_memory, run_experiment, run_sweep, write_memory_csv, ArchScale,
    ExperimentConfig,
};
use sparserl::pruning::layer_stats;
use sparserl::rl::AgentDims;
use sparserl::store::{load_checkpoint, masked_byte_model};

#[derive(Parser)]
#[command(name = "sparserl", version, about = "Single-shot pruning for offline RL agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a dataset file.
    GenData(GenData),
    /// Train and evaluate one configuration for each configured seed.
    Run(RunArgs),
    /// Run a sparsity × seed grid and write a summary CSV.
    Sweep(SweepArgs),
    /// Print the memory table for a network family.
    ReportMemory(MemoryArgs),
    /// Describe the networks stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "point-mass")]
    env: EnvKind,
    #[arg(long, default_value_t = 20_000)]
    transitions: usize,
    /// Gaussian action noise, as a fraction of the action bound.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// snip, grasp or none.
    #[arg(long)]
    criterion: Option<String>,
    /// bc or bcq.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("config: reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v).with_context(|| format!("config: --{k}"));
        if let Some(v) = self.sparsity {
            set("sparsity", v.to_string())?;
        }
        if let Some(v) = &self.criterion {
            set("criterion", v.clone())?;
        }
        if let Some(v) = &self.algo {
            set("algo", v.clone())?;
        }
        if let Some(v) = &self.env {
            set("env", v.clone())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = &self.dataset {
            set("dataset", v.display().to_string())?;
        }
        if let Some(v) = &self.out {
            set("out", v.display().to_string())?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("config: --set expects KEY=VALUE, got '{kv}'");
            };
            set(k.trim(), v.trim().to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// Comma-separated sparsities.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,0.9,0.95")]
    sparsities: Vec<f64>,
    /// Comma-separated seeds; defaults to the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct MemoryArgs {
    #[arg(long, default_value_t = 17)]
    state_dim: usize,
    #[arg(long, default_value_t = 6)]
    action_dim: usize,
    #[arg(long, default_value = "full")]
    arch: ArchScale,
    #[arg(long, default_value_t = 0.95)]
    sparsity: f64,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(a: &GenData) -> Result<()> {
    let policy = if a.sigma > 0.0 {
        DataPolicy::NoisyExpert { sigma: a.sigma }
    } else {
        DataPolicy::Expert
    };
    let ds = generate_dataset(a.env, policy, a.transitions, a.seed).context("gen-data")?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("gen-data: creating {}", dir.display()))?;
    }
    ds.write(&a.out).with_context(|| format!("gen-data: writing {}", a.out.display()))?;
    println!("wrote {} transitions of {} to {}", ds.len(), a.env, a.out.display());
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    cfg.validate().context("config")?;
    let root = cfg.out_root().join(cfg.cell_name());
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed{seed}"));
        let record = run_experiment(&cfg, seed, Some(&dir)).with_context(|| format!("run seed {seed}"))?;
        let last = record.final_eval().context("run produced no evaluations")?;
        println!(
            "{} seed {seed}: final return {:.3} (normalized {:.3}) -> {}",
            cfg.cell_name(),
            last.mean,
            last.normalized,
            dir.display()
        );
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let seeds = if a.seeds.is_empty() { cfg.seeds.clone() } else { a.seeds.clone() };
    let root = cfg.out_root();
    let (cells, summary) = run_sweep(&cfg, &a.sparsities, &seeds, Some(&root)).context("sweep")?;
    let failed: Vec<_> = cells.iter().filter(|c| c.outcome.is_err()).collect();
    for c in &failed {
        eprintln!("cell sparsity {} seed {} failed: {}", c.sparsity, c.seed, c.outcome.as_ref().unwrap_err());
    }
    println!(
        "{} cells ({} failed), {} summary rows -> {}",
        cells.len(),
        failed.len(),
        summary.len(),
        root.join("summary.csv").display()
    );
    if !failed.is_empty() {
        bail!("sweep: {} of {} cells failed", failed.len(), cells.len());
    }
    Ok(())
}

fn memory(a: &MemoryArgs) -> Result<()> {
    let dims = AgentDims::new(a.state_dim, a.action_dim, 1.0);
    let rows = report_memory(&dims, &a.arch.architecture(), a.sparsity).context("report-memory")?;
    match &a.out {
        Some(p) => {
            write_memory_csv(p, &rows).with_context(|| format!("report-memory: writing {}", p.display()))?;
            println!("wrote {}", p.display());
        }
        None => {
            println!("row,actor,critic,vae");
            for r in rows {
                println!("{},{:.6},{:.6},{:.6}", r.row, r.actor_mb, r.critic_mb, r.vae_mb);
            }
        }
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let b = load_checkpoint(path).with_context(|| format!("inspect-checkpoint: {}", path.display()))?;
    let d = &b.dims;
    println!(
        "{} agent: state {} action {} latent {} max_action {}",
        b.algorithm, d.state_dim, d.action_dim, d.latent_dim, d.max_action
    );
    for (name, net) in b.networks() {
        let stats = layer_stats(&net.mask);
        let kept: usize = stats.iter().map(|s| s.kept).sum();
        let total: usize = stats.iter().map(|s| s.total).sum();
        let bytes = masked_byte_model(name, &net.spec, &net.mask)?;
        let layers: Vec<String> = stats.iter().map(|s| format!("{}/{}", s.kept, s.total)).collect();
        println!(
            "  {name:<12} dims {:?} kept {kept}/{total} [{}] sparse bytes {}",
            net.spec.layer_dims,
            layers.join(" "),
            bytes.pruned_sparse
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::ReportMemory(a) => memory(a),
        Command::InspectCheckpoint { path } => inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

