//! Memory table: byte model of every network family at one sparsity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pruning::Criterion;
use crate::rl::{AgentDims, Algorithm, Architecture, NetworkSpecs};
use crate::store::{byte_model, MemoryReport};

pub const BYTES_PER_MB: f64 = 1e6;

/// One table row; columns are megabytes for the actor, the twin critics
/// and the VAE (encoder plus decoder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub row: String,
    pub actor_mb: f64,
    pub critic_mb: f64,
    pub vae_mb: f64,
}

fn family(dims: &AgentDims, arch: &Architecture, sparsity: f64) -> Result<[MemoryReport; 3]> {
    let specs = NetworkSpecs::new(Algorithm::Bcq, dims, arch);
    let q = byte_model("q", &specs.critic, sparsity)?;
    Ok([
        byte_model("actor", &specs.actor, sparsity)?,
        MemoryReport::combine("critic", &[q.clone(), q]),
        MemoryReport::combine(
            "vae",
            &[byte_model("encoder", &specs.encoder, sparsity)?, byte_model("decoder", &specs.decoder, sparsity)?],
        ),
    ])
}

/// Rows `dense`, `dense_sparse_indexed`, `snip@s` and `grasp@s` for the BCQ
/// networks of the given dimensions.
///
/// Both criteria prune exactly `round(s·N)` weights per network, so their
/// rows coincide under the byte model.
pub fn report_memory(dims: &AgentDims, arch: &Architecture, sparsity: f64) -> Result<Vec<MemoryRow>> {
    let dense = family(dims, arch, 0.0)?;
    let pruned = family(dims, arch, sparsity)?;
    let mb = |b: u64| b as f64 / BYTES_PER_MB;
    let row = |name: String, f: &dyn Fn(&MemoryReport) -> u64, reps: &[MemoryReport; 3]| MemoryRow {
        row: name,
        actor_mb: mb(f(&reps[0])),
        critic_mb: mb(f(&reps[1])),
        vae_mb: mb(f(&reps[2])),
    };
    let mut rows = vec![
        row("dense".into(), &|r| r.dense, &dense),
        row("dense_sparse_indexed".into(), &|r| r.dense_sparse_indexed, &dense),
    ];
    for c in [Criterion::Snip, Criterion::Grasp] {
        rows.push(row(format!("{c}@{sparsity}"), &|r| r.pruned_sparse, &pruned));
    }
    Ok(rows)
}

pub fn write_memory_csv(path: &Path, rows: &[MemoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "actor", "critic", "vae"])?;
    for r in rows {
        w.write_record([
            r.row.clone(),
            format!("{:.6}", r.actor_mb),
            format!("{:.6}", r.critic_mb),
            format!("{:.6}", r.vae_mb),
        ])?;
    }
    w.flush()?;
    Ok(())
}
