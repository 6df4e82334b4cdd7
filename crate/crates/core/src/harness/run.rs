//! One (config, seed) run: initialize, prune, train, evaluate, record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_batch, Batch, Dataset};
use crate::error::{Context, Error, Result};
use crate::optim::AdamConfig;
use crate::pruning::{layer_stats, LayerStat, Mask};
use crate::rl::{
    evaluate_policy, prune_agent, reference_returns, AgentBundle, AgentDims, Learner, NoiseDraw, ReferenceReturns,
};
use crate::store::{masked_byte_model, save_checkpoint, MemoryReport};

use super::config::ExperimentConfig;

// Independent random streams derived from the run seed.
const PRUNE_STREAM: u64 = 0x7072_756e;
const TRAIN_STREAM: u64 = 0x7472_6169;
const EVAL_STREAM: u64 = 0x6576_616c;

/// One step in the run's logical timeline; `seq` orders events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub seq: u64,
    pub phase: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `(mean − zero-policy) / (expert − zero-policy)`.
    pub normalized: f64,
}

/// Result of checking every network's mask against its creation state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub step: u64,
    pub masked_nonzero: usize,
    pub masks_unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayers {
    pub network: String,
    pub layers: Vec<LayerStat>,
}

/// Everything a run produces apart from wall-clock timings, which live in
/// [`RunTiming`] so that records are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub reference: ReferenceReturns,
    pub evals: Vec<EvalPoint>,
    pub layers: Vec<NetworkLayers>,
    pub memory: Vec<MemoryReport>,
    pub audits: Vec<MaskAudit>,
    pub events: Vec<PhaseEvent>,
}

impl RunRecord {
    pub fn final_eval(&self) -> Option<&EvalPoint> {
        self.evals.last()
    }

    /// Serialized form written to `record.json`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub prune_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub total_secs: f64,
}

/// Paths of the files written for one run.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub record: PathBuf,
    pub checkpoint: PathBuf,
}

struct Timeline {
    events: Vec<PhaseEvent>,
}

impl Timeline {
    fn log(&mut self, phase: impl Into<String>, step: u64) {
        let seq = self.events.len() as u64;
        self.events.push(PhaseEvent {
            seq,
            phase: phase.into(),
            step,
        });
    }
}

fn masks(bundle: &AgentBundle) -> Vec<Mask> {
    bundle.networks().into_iter().map(|(_, n)| n.mask.clone()).collect()
}

fn memory_reports(bundle: &AgentBundle) -> Result<Vec<MemoryReport>> {
    let nets = bundle.networks();
    let report = |name: &str| -> Result<MemoryReport> {
        let (_, n) = nets.iter().find(|(k, _)| *k == name).ok_or(Error::Empty("network"))?;
        masked_byte_model(name, &n.spec, &n.mask)
    };
    let mut out = vec![report("actor")?];
    if bundle.bcq.is_some() {
        out.push(MemoryReport::combine("critic", &[report("q1")?, report("q2")?]));
        out.push(MemoryReport::combine("vae", &[report("vae_encoder")?, report("vae_decoder")?]));
    }
    Ok(out)
}

/// Loads the dataset named by `config` and checks it against the env.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let ds = Dataset::read(&config.dataset)?;
    if ds.env != config.env {
        return Err(Error::InvalidConfig(format!(
            "dataset {} was generated on {}, config uses {}",
            config.dataset.display(),
            ds.env,
            config.env
        )));
    }
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(ds)
}

/// Runs the full pipeline for one seed on an already loaded dataset.
///
/// Order: initialize every network from `seed`; score and prune each
/// network on fresh batches; train with masks enforced, evaluating every
/// `eval_every` steps (and at step 0 and the last step).
pub fn run_with_dataset(config: &ExperimentConfig, seed: u64, ds: &Dataset) -> Result<(RunRecord, AgentBundle, RunTiming)> {
    config.validate().phase("config")?;
    let start = Instant::now();
    let mut timing = RunTiming::default();
    let mut tl = Timeline { events: Vec::new() };
    let env = config.env;

    let dims = AgentDims::for_env(&env.spec()).phase("init")?;
    let arch = config.arch.architecture();
    let mut bundle = AgentBundle::init(config.algorithm, dims, &arch, config.hyper, seed);
    tl.log("init", 0);

    if let Some(criterion) = config.criterion {
        let t = Instant::now();
        let mut prune_rng = NoiseDraw::new(seed ^ PRUNE_STREAM);
        let batches: Vec<Batch> = (0..config.prune_batches)
            .map(|_| sample_batch(ds, config.prune_batch_for(criterion).min(ds.len()), prune_rng.rng()))
            .collect::<Result<_>>()
            .phase("prune/sample")?;
        prune_agent(&mut bundle, criterion, config.sparsity, &batches, &mut prune_rng)
            .phase(format!("prune/{criterion}"))?;
        for (name, _) in bundle.networks() {
            tl.log(format!("mask:{name}"), 0);
        }
        timing.prune_secs = t.elapsed().as_secs_f64();
    }
    let initial_masks = masks(&bundle);

    let eval_seed = seed ^ EVAL_STREAM;
    let reference = reference_returns(env, config.eval_episodes, eval_seed).phase("eval/reference")?;
    let mut learner = Learner::new(bundle, AdamConfig::with_lr(config.lr));
    let mut noise = NoiseDraw::new(seed ^ TRAIN_STREAM);
    let mut evals = Vec::new();
    let mut audits = Vec::new();

    let mut evaluate = |learner: &Learner, step: u64, tl: &mut Timeline, timing: &mut RunTiming| -> Result<()> {
        let t = Instant::now();
        let r = evaluate_policy(&learner.bundle, env, config.eval_episodes, eval_seed).phase(format!("eval/step {step}"))?;
        tl.log("eval", step);
        evals.push(EvalPoint {
            step,
            normalized: reference.normalize(r.mean),
            mean: r.mean,
            min: r.min,
            max: r.max,
            returns: r.returns,
        });
        audits.push(MaskAudit {
            step,
            masked_nonzero: learner.bundle.masked_nonzero(),
            masks_unchanged: masks(&learner.bundle) == initial_masks,
        });
        timing.eval_secs += t.elapsed().as_secs_f64();
        Ok(())
    };

    evaluate(&learner, 0, &mut tl, &mut timing)?;
    let t = Instant::now();
    let eval_before = timing.eval_secs;
    for step in 1..=config.gradient_steps {
        if step == 1 {
            tl.log("train:start", 0);
        }
        let batch = sample_batch(ds, config.batch_size.min(ds.len()), noise.rng()).phase(format!("train/step {step}"))?;
        learner.train_step(&batch, &mut noise).phase(format!("train/step {step}"))?;
        if step % config.eval_every == 0 || step == config.gradient_steps {
            evaluate(&learner, step, &mut tl, &mut timing)?;
        }
    }
    timing.train_secs = t.elapsed().as_secs_f64() - (timing.eval_secs - eval_before);
    tl.log("done", config.gradient_steps);

    let bundle = learner.bundle;
    let layers = bundle
        .networks()
        .into_iter()
        .map(|(name, n)| NetworkLayers {
            network: name.to_string(),
            layers: layer_stats(&n.mask),
        })
        .collect();
    let record = RunRecord {
        config: config.clone(),
        seed,
        reference,
        evals,
        layers,
        memory: memory_reports(&bundle).phase("memory")?,
        audits,
        events: tl.events,
    };
    timing.total_secs = start.elapsed().as_secs_f64();
    Ok((record, bundle, timing))
}

/// Loads the dataset and runs one seed; writes outputs when `out` is set.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunRecord> {
    let ds = load_dataset(config).phase("load-data")?;
    let (record, bundle, timing) = run_with_dataset(config, seed, &ds)?;
    if let Some(dir) = out {
        write_run(dir, &record, &bundle, &timing).phase("write")?;
    }
    Ok(record)
}

/// Writes `record.json`, `timing.json`, `curve.csv`, `layers.csv`,
/// `memory.csv` and `agent.srlc` into `dir`.
pub fn write_run(dir: &Path, record: &RunRecord, bundle: &AgentBundle, timing: &RunTiming) -> Result<RunFiles> {
    std::fs::create_dir_all(dir)?;
    let files = RunFiles {
        dir: dir.to_path_buf(),
        record: dir.join("record.json"),
        checkpoint: dir.join("agent.srlc"),
    };
    std::fs::write(&files.record, record.to_json()?)?;
    std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(timing)?)?;
    save_checkpoint(bundle, &files.checkpoint)?;

    let mut w = csv::Writer::from_path(dir.join("curve.csv"))?;
    w.write_record(["step", "seed", "return_mean", "return_min", "return_max"])?;
    for e in &record.evals {
        w.write_record([
            e.step.to_string(),
            record.seed.to_string(),
            e.mean.to_string(),
            e.min.to_string(),
            e.max.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("layers.csv"))?;
    w.write_record(["network", "layer", "kept", "total"])?;
    for n in &record.layers {
        for (l, s) in n.layers.iter().enumerate() {
            w.write_record([n.network.clone(), l.to_string(), s.kept.to_string(), s.total.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("memory.csv"))?;
    w.write_record(["network", "dense_bytes", "dense_sparse_indexed_bytes", "pruned_sparse_bytes"])?;
    for m in &record.memory {
        w.write_record([
            m.name.clone(),
            m.dense.to_string(),
            m.dense_sparse_indexed.to_string(),
            m.pruned_sparse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(files)
}
