//! Pruning every network of a freshly initialized agent.
//!
//! Each network is scored against its own training objective with all
//! other networks still dense and untrained:
//!
//! * BC actor: the cloning loss.
//! * BCQ actor: the actor loss through the initial critic and VAE.
//! * Critic: the TD loss with the initial targets; `q1` is scored and `q2`
//!   receives a copy of its pruned weights and mask.
//! * VAE: encoder and decoder are scored together from the VAE loss, each
//!   keeping its own top-k.
//!
//! Target networks are copied from their pruned online networks.

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mlp::Network;
use crate::pruning::{build_mask, check_sparsity, scores, Criterion, Mask, Objective};
use crate::tensor::Tensor;

use super::losses::{bc_loss, bcq_actor_loss, bcq_critic_loss, vae_loss};
use super::train::NoiseDraw;
use super::{AgentBundle, Algorithm};

/// Noise drawn up front so that every scored objective sees the same
/// inputs in every pass.
struct ScoreBatch<'a> {
    batch: &'a Batch,
    eps: Tensor,
    z: Tensor,
    z_next: Tensor,
}

fn masks_for(
    criterion: Criterion,
    sparsity: f64,
    batches: &[ScoreBatch],
    build: impl FnMut(&mut Graph, &ScoreBatch) -> Result<Objective>,
) -> Result<Vec<Mask>> {
    scores(criterion, batches, build)?
        .iter()
        .map(|s| build_mask(s, sparsity, criterion))
        .collect()
}

/// Prunes all networks of `bundle` to `sparsity` in one shot. Must run
/// before any training step.
pub fn prune_agent(
    bundle: &mut AgentBundle,
    criterion: Criterion,
    sparsity: f64,
    batches: &[Batch],
    noise: &mut NoiseDraw,
) -> Result<()> {
    check_sparsity(sparsity)?;
    if batches.is_empty() {
        return Err(Error::Empty("pruning batches"));
    }
    if sparsity == 0.0 {
        return Ok(());
    }
    let dims = bundle.dims;
    let n = bundle.hyper.n_action_samples;
    let inputs: Vec<ScoreBatch> = batches
        .iter()
        .map(|b| ScoreBatch {
            batch: b,
            eps: noise.normal(b.len(), dims.latent_dim),
            z: noise.latent(b.len(), dims.latent_dim),
            z_next: noise.latent(b.len() * n, dims.latent_dim),
        })
        .collect();

    let fresh = bundle.clone();
    match bundle.algorithm {
        Algorithm::Bc => {
            let m = masks_for(criterion, sparsity, &inputs, |g, x| {
                bc_loss(g, &fresh.actor, &dims, x.batch)
            })?;
            bundle.actor.prune(one(m)?)?;
        }
        Algorithm::Bcq => {
            let nets = fresh.bcq()?;
            let actor = masks_for(criterion, sparsity, &inputs, |g, x| {
                bcq_actor_loss(g, &fresh, x.batch, &x.z)
            })?;
            let critic = masks_for(criterion, sparsity, &inputs, |g, x| {
                let mut o = bcq_critic_loss(g, &fresh, x.batch, &x.z_next)?;
                o.scored.truncate(1);
                Ok(o)
            })?;
            let vae = masks_for(criterion, sparsity, &inputs, |g, x| {
                vae_loss(g, &nets.encoder, &nets.decoder, &dims, x.batch, &x.eps)
            })?;

            bundle.actor.prune(one(actor)?)?;
            let actor = bundle.actor.clone();
            let out = bundle.bcq.as_mut().ok_or(Error::Empty("BCQ networks"))?;
            out.q1.prune(one(critic)?)?;
            out.q2 = out.q1.clone();
            let mut vae = vae.into_iter();
            out.encoder.prune(vae.next().ok_or(Error::Empty("encoder mask"))?)?;
            out.decoder.prune(vae.next().ok_or(Error::Empty("decoder mask"))?)?;
            out.actor_target = actor;
            out.q1_target = out.q1.clone();
            out.q2_target = out.q2.clone();
        }
    }
    Ok(())
}

fn one(mut masks: Vec<Mask>) -> Result<Mask> {
    masks.pop().ok_or(Error::Empty("mask"))
}

/// Per-network mask for reporting, in checkpoint order.
pub fn agent_masks(bundle: &AgentBundle) -> Vec<(&'static str, &Mask)> {
    bundle.networks().into_iter().map(|(n, net): (_, &Network)| (n, &net.mask)).collect()
}
