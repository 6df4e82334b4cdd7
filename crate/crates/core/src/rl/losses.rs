//! Loss graphs for BC and BCQ.
//!
//! Every builder appends to a caller-owned [`Graph`] and returns an
//! [`Objective`] whose `scored` list holds the networks bound as trainable,
//! so the same builders drive both training steps and pruning scores.

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mlp::{MlpNodes, Network};
use crate::pruning::Objective;
use crate::tensor::Tensor;

use super::{AgentBundle, AgentDims};

/// Objective returned by the loss builders.
pub type LossGraph = Objective;

pub fn q_value(g: &mut Graph, q: &Network, nodes: &MlpNodes, s: NodeId, a: NodeId) -> Result<NodeId> {
    let sa = g.concat(s, a)?;
    nodes.apply(g, &q.spec, sa)
}

/// `max_action · tanh(dec([s, z]))`
pub fn decode(g: &mut Graph, dec: &Network, nodes: &MlpNodes, max_action: f64, s: NodeId, z: NodeId) -> Result<NodeId> {
    let sz = g.concat(s, z)?;
    let out = nodes.apply(g, &dec.spec, sz)?;
    g.scale(out, max_action)
}

/// Mean and clamped log-std of the approximate posterior.
pub fn encode(g: &mut Graph, enc: &Network, nodes: &MlpNodes, latent: usize, s: NodeId, a: NodeId) -> Result<(NodeId, NodeId)> {
    let sa = g.concat(s, a)?;
    let out = nodes.apply(g, &enc.spec, sa)?;
    let mean = g.slice_cols(out, 0, latent)?;
    let log_std = g.slice_cols(out, latent, 2 * latent)?;
    let log_std = g.clamp(log_std, -4.0, 15.0)?;
    Ok((mean, log_std))
}

/// `clamp(a + phi · max_action · tanh(ξ([s, a])), −max_action, max_action)`
pub fn perturb(
    g: &mut Graph,
    actor: &Network,
    nodes: &MlpNodes,
    dims: &AgentDims,
    phi: f64,
    s: NodeId,
    a: NodeId,
) -> Result<NodeId> {
    let sa = g.concat(s, a)?;
    let xi = nodes.apply(g, &actor.spec, sa)?;
    let xi = g.scale(xi, phi * dims.max_action)?;
    let moved = g.add(a, xi)?;
    g.clamp(moved, -dims.max_action, dims.max_action)
}

fn check_batch(batch: &Batch, dims: &AgentDims) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (_, sd) = batch.states.dims2()?;
    let (_, ad) = batch.actions.dims2()?;
    if sd != dims.state_dim || ad != dims.action_dim {
        return Err(Error::shape(
            "batch",
            format!("state/action dims {sd}/{ad}, agent expects {}/{}", dims.state_dim, dims.action_dim),
        ));
    }
    Ok(())
}

/// Mean over the batch of `‖π(s) − a‖²`.
pub fn bc_loss(g: &mut Graph, actor: &Network, dims: &AgentDims, batch: &Batch) -> Result<Objective> {
    check_batch(batch, dims)?;
    let nodes = actor.bind(g)?;
    let s = g.input(batch.states.clone())?;
    let out = nodes.apply(g, &actor.spec, s)?;
    let pi = g.scale(out, dims.max_action)?;
    let a = g.input(batch.actions.clone())?;
    let loss = g.mse_loss(pi, a)?;
    Ok(Objective {
        loss,
        scored: vec![nodes],
    })
}

/// Reconstruction error plus half the KL divergence to `N(0, I)`, with
/// latent `z = μ + σ·ε` and `ε` given by `noise` (`[B, latent]`).
pub fn vae_loss(
    g: &mut Graph,
    encoder: &Network,
    decoder: &Network,
    dims: &AgentDims,
    batch: &Batch,
    noise: &Tensor,
) -> Result<Objective> {
    check_batch(batch, dims)?;
    let b = batch.len();
    if noise.shape() != [b, dims.latent_dim] {
        return Err(Error::shape(
            "vae_loss",
            format!("noise {:?}, expected [{b}, {}]", noise.shape(), dims.latent_dim),
        ));
    }
    let enc = encoder.bind(g)?;
    let dec = decoder.bind(g)?;
    let s = g.input(batch.states.clone())?;
    let a = g.input(batch.actions.clone())?;
    let (mean, log_std) = encode(g, encoder, &enc, dims.latent_dim, s, a)?;
    let std = g.exp(log_std)?;
    let eps = g.input(noise.clone())?;
    let z = g.gaussian_sample(mean, std, eps)?;
    let recon = decode(g, decoder, &dec, dims.max_action, s, z)?;
    let recon_loss = g.mse_loss(recon, a)?;

    // KL = −½ · (1/B) Σ (1 + 2 log σ − μ² − σ²)
    let two_log = g.scale(log_std, 2.0)?;
    let mu_sq = g.square(mean)?;
    let var = g.square(std)?;
    let t = g.sub(two_log, mu_sq)?;
    let t = g.sub(t, var)?;
    let t = g.sum(t)?;
    let ones = g.constant(Tensor::scalar((b * dims.latent_dim) as f64))?;
    let t = g.add(t, ones)?;
    let kl = g.scale(t, -0.5 / b as f64)?;
    let half_kl = g.scale(kl, 0.5)?;
    let loss = g.add(recon_loss, half_kl)?;
    Ok(Objective {
        loss,
        scored: vec![enc, dec],
    })
}

/// Soft clipped double-Q target over decoded and perturbed candidate
/// next-actions:
/// `y = r + γ (1 − done) max_k [λ min(Q'₁, Q'₂) + (1 − λ) max(Q'₁, Q'₂)]`.
///
/// `z_noise` holds one latent per candidate, `[B · n, latent]`, rows grouped
/// by state. No gradient flows through the target.
pub fn bcq_critic_target(bundle: &AgentBundle, batch: &Batch, z_noise: &Tensor) -> Result<Tensor> {
    let nets = bundle.bcq()?;
    let dims = &bundle.dims;
    let h = &bundle.hyper;
    let b = batch.len();
    let n = h.n_action_samples;
    if n == 0 {
        return Err(Error::InvalidConfig("n_action_samples must be >= 1".into()));
    }
    if z_noise.shape() != [b * n, dims.latent_dim] {
        return Err(Error::shape(
            "bcq_critic_target",
            format!("noise {:?}, expected [{}, {}]", z_noise.shape(), b * n, dims.latent_dim),
        ));
    }
    let mut g = Graph::new();
    let dec = nets.decoder.bind_frozen(&mut g)?;
    let act = nets.actor_target.bind_frozen(&mut g)?;
    let q1 = nets.q1_target.bind_frozen(&mut g)?;
    let q2 = nets.q2_target.bind_frozen(&mut g)?;
    let sn = g.input(batch.next_states.repeat_rows(n)?)?;
    let z = g.input(z_noise.clone())?;
    let a_dec = decode(&mut g, &nets.decoder, &dec, dims.max_action, sn, z)?;
    let a_next = perturb(&mut g, &nets.actor_target, &act, dims, h.phi, sn, a_dec)?;
    let v1 = q_value(&mut g, &nets.q1_target, &q1, sn, a_next)?;
    let v2 = q_value(&mut g, &nets.q2_target, &q2, sn, a_next)?;
    let (v1, v2) = (g.value(v1).data(), g.value(v2).data());

    let mut y = Vec::with_capacity(b);
    for i in 0..b {
        let best = (0..n)
            .map(|k| {
                let (x1, x2) = (v1[i * n + k], v2[i * n + k]);
                h.lambda * x1.min(x2) + (1.0 - h.lambda) * x1.max(x2)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        y.push(batch.rewards.data()[i] + h.gamma * batch.not_done.data()[i] * best);
    }
    let y = Tensor::matrix(b, 1, y)?;
    if !y.is_finite() {
        return Err(Error::NonFinite("critic target".into()));
    }
    Ok(y)
}

/// `mse(Q₁(s, a), y) + mse(Q₂(s, a), y)` with the target from
/// [`bcq_critic_target`]. Both critics are trainable.
pub fn bcq_critic_loss(g: &mut Graph, bundle: &AgentBundle, batch: &Batch, z_noise: &Tensor) -> Result<Objective> {
    check_batch(batch, &bundle.dims)?;
    let y = bcq_critic_target(bundle, batch, z_noise)?;
    critic_loss_with_target(g, bundle, batch, &y)
}

pub(crate) fn critic_loss_with_target(g: &mut Graph, bundle: &AgentBundle, batch: &Batch, y: &Tensor) -> Result<Objective> {
    let nets = bundle.bcq()?;
    let q1 = nets.q1.bind(g)?;
    let q2 = nets.q2.bind(g)?;
    let s = g.input(batch.states.clone())?;
    let a = g.input(batch.actions.clone())?;
    let y = g.constant(y.clone())?;
    let v1 = q_value(g, &nets.q1, &q1, s, a)?;
    let v2 = q_value(g, &nets.q2, &q2, s, a)?;
    let l1 = g.mse_loss(v1, y)?;
    let l2 = g.mse_loss(v2, y)?;
    let loss = g.add(l1, l2)?;
    Ok(Objective {
        loss,
        scored: vec![q1, q2],
    })
}

/// `−mean Q₁(s, ã)` where `ã` perturbs a VAE decode of `z` (`[B, latent]`).
/// Only the actor is trainable.
pub fn bcq_actor_loss(g: &mut Graph, bundle: &AgentBundle, batch: &Batch, z: &Tensor) -> Result<Objective> {
    check_batch(batch, &bundle.dims)?;
    let nets = bundle.bcq()?;
    let dims = &bundle.dims;
    if z.shape() != [batch.len(), dims.latent_dim] {
        return Err(Error::shape("bcq_actor_loss", format!("noise {:?}", z.shape())));
    }
    let actor = bundle.actor.bind(g)?;
    let dec = nets.decoder.bind_frozen(g)?;
    let q1 = nets.q1.bind_frozen(g)?;
    let s = g.input(batch.states.clone())?;
    let zn = g.input(z.clone())?;
    let a_dec = decode(g, &nets.decoder, &dec, dims.max_action, s, zn)?;
    let a = perturb(g, &bundle.actor, &actor, dims, bundle.hyper.phi, s, a_dec)?;
    let q = q_value(g, &nets.q1, &q1, s, a)?;
    let m = g.mean(q)?;
    let loss = g.neg(m)?;
    Ok(Objective {
        loss,
        scored: vec![actor],
    })
}
