//! Behavior Cloning and BCQ trained from a fixed dataset with masked networks.

mod eval;
mod losses;
mod prune;
mod train;

pub use eval::{evaluate_policy, reference_returns, select_action, start_states, EvalResult, ReferenceReturns};
pub use losses::{
    bc_loss, bcq_actor_loss, bcq_critic_loss, bcq_critic_target, decode, encode, perturb, q_value,
    vae_loss, LossGraph,
};
pub use prune::{agent_masks, prune_agent};
pub use train::{soft_update, AgentOptimizers, Learner, NoiseDraw, StepLosses};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::mlp::{Activation, MlpSpec, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bc,
    Bcq,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Bc => "bc",
            Algorithm::Bcq => "bcq",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Algorithm::Bc),
            "bcq" => Ok(Algorithm::Bcq),
            other => Err(Error::InvalidConfig(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Hidden-layer widths for each network family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub vae_hidden: Vec<usize>,
}

impl Architecture {
    /// The full-size configuration (400/300 actor and critic, 750/750 VAE).
    pub fn full() -> Self {
        Architecture {
            actor_hidden: vec![400, 300],
            critic_hidden: vec![400, 300],
            vae_hidden: vec![750, 750],
        }
    }

    /// Desk-scale networks for training on the toy environments.
    pub fn toy() -> Self {
        Architecture {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            vae_hidden: vec![128, 128],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcqConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Perturbation limit as a fraction of `max_action`.
    pub phi: f64,
    /// Weight on the minimum of the twin critics in the soft clipped target.
    pub lambda: f64,
    pub n_action_samples: usize,
    pub n_eval_samples: usize,
}

impl Default for BcqConfig {
    fn default() -> Self {
        BcqConfig {
            gamma: 0.99,
            tau: 0.005,
            phi: 0.05,
            lambda: 0.75,
            n_action_samples: 10,
            n_eval_samples: 10,
        }
    }
}

/// Input/output sizes shared by all networks of an agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    /// Symmetric action bound; actions live in `[-max_action, max_action]`.
    pub max_action: f64,
}

impl AgentDims {
    pub fn new(state_dim: usize, action_dim: usize, max_action: f64) -> Self {
        AgentDims {
            state_dim,
            action_dim,
            latent_dim: 2 * action_dim,
            max_action,
        }
    }

    pub fn for_env(spec: &EnvSpec) -> Result<Self> {
        let m = spec.max_action();
        if m.iter().any(|&v| v != m[0])
            || spec.action_low.iter().zip(&spec.action_high).any(|(l, h)| *l != -*h)
        {
            return Err(Error::InvalidConfig("action box must be symmetric and uniform".into()));
        }
        Ok(Self::new(spec.state_dim, spec.action_dim, m[0]))
    }
}

fn mlp(input: usize, hidden: &[usize], output: usize, out_act: Activation) -> MlpSpec {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    MlpSpec {
        layer_dims: dims,
        hidden_activation: Activation::Relu,
        output_activation: out_act,
    }
}

/// Network architectures for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpecs {
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
}

impl NetworkSpecs {
    pub fn new(algorithm: Algorithm, dims: &AgentDims, arch: &Architecture) -> Self {
        let (s, a, z) = (dims.state_dim, dims.action_dim, dims.latent_dim);
        let actor_in = match algorithm {
            Algorithm::Bc => s,
            Algorithm::Bcq => s + a,
        };
        NetworkSpecs {
            actor: mlp(actor_in, &arch.actor_hidden, a, Activation::Tanh),
            critic: mlp(s + a, &arch.critic_hidden, 1, Activation::Identity),
            encoder: mlp(s + a, &arch.vae_hidden, 2 * z, Activation::Identity),
            decoder: mlp(s + z, &arch.vae_hidden, a, Activation::Tanh),
        }
    }
}

/// The BCQ-only networks: twin critics, targets and the VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct BcqNetworks {
    pub actor_target: Network,
    pub q1: Network,
    pub q2: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    pub encoder: Network,
    pub decoder: Network,
}

/// Every network of an agent plus the settings needed to run it.
///
/// For BC only the actor (a plain policy) exists; for BCQ the actor is the
/// perturbation network.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentBundle {
    pub algorithm: Algorithm,
    pub dims: AgentDims,
    pub hyper: BcqConfig,
    pub actor: Network,
    pub bcq: Option<BcqNetworks>,
}

/// Names in checkpoint order.
pub const BCQ_NETWORK_NAMES: [&str; 8] = [
    "actor",
    "actor_target",
    "q1",
    "q2",
    "q1_target",
    "q2_target",
    "vae_encoder",
    "vae_decoder",
];

impl AgentBundle {
    /// Fresh, unpruned networks; each network gets its own seed derived from
    /// `seed`.
    pub fn init(algorithm: Algorithm, dims: AgentDims, arch: &Architecture, hyper: BcqConfig, seed: u64) -> Self {
        let specs = NetworkSpecs::new(algorithm, &dims, arch);
        let sub = |k: u64| seed.wrapping_mul(1_000_003).wrapping_add(k);
        let actor = Network::new(specs.actor.clone(), sub(0));
        let bcq = match algorithm {
            Algorithm::Bc => None,
            Algorithm::Bcq => {
                let q1 = Network::new(specs.critic.clone(), sub(1));
                let q2 = Network::new(specs.critic.clone(), sub(2));
                Some(BcqNetworks {
                    actor_target: actor.clone(),
                    q1_target: q1.clone(),
                    q2_target: q2.clone(),
                    q1,
                    q2,
                    encoder: Network::new(specs.encoder.clone(), sub(3)),
                    decoder: Network::new(specs.decoder.clone(), sub(4)),
                })
            }
        };
        AgentBundle {
            algorithm,
            dims,
            hyper,
            actor,
            bcq,
        }
    }

    pub fn bcq(&self) -> Result<&BcqNetworks> {
        self.bcq
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("BCQ networks missing from a BC agent".into()))
    }

    /// `(name, network)` in checkpoint order.
    pub fn networks(&self) -> Vec<(&'static str, &Network)> {
        let mut out = vec![("actor", &self.actor)];
        if let Some(b) = &self.bcq {
            out.extend([
                ("actor_target", &b.actor_target),
                ("q1", &b.q1),
                ("q2", &b.q2),
                ("q1_target", &b.q1_target),
                ("q2_target", &b.q2_target),
                ("vae_encoder", &b.encoder),
                ("vae_decoder", &b.decoder),
            ]);
        }
        out
    }

    /// Rebuilds a bundle from networks listed in checkpoint order.
    pub fn from_networks(
        algorithm: Algorithm,
        dims: AgentDims,
        hyper: BcqConfig,
        mut nets: Vec<(String, Network)>,
    ) -> Result<Self> {
        let expect: &[&str] = match algorithm {
            Algorithm::Bc => &BCQ_NETWORK_NAMES[..1],
            Algorithm::Bcq => &BCQ_NETWORK_NAMES,
        };
        let names: Vec<&str> = nets.iter().map(|(n, _)| n.as_str()).collect();
        if names != expect {
            return Err(Error::InvalidConfig(format!(
                "{algorithm} agent expects networks {expect:?}, found {names:?}"
            )));
        }
        let mut take = || nets.remove(0).1;
        let actor = take();
        let bcq = match algorithm {
            Algorithm::Bc => None,
            Algorithm::Bcq => Some(BcqNetworks {
                actor_target: take(),
                q1: take(),
                q2: take(),
                q1_target: take(),
                q2_target: take(),
                encoder: take(),
                decoder: take(),
            }),
        };
        Ok(AgentBundle {
            algorithm,
            dims,
            hyper,
            actor,
            bcq,
        })
    }

    /// Total count of masked weights holding a nonzero value, over all
    /// networks including targets.
    pub fn masked_nonzero(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.masked_nonzero()).sum()
    }

    /// Parameters rounded through `f32` (the checkpoint storage precision).
    pub fn rounded_f32(&self) -> Self {
        let mut out = self.clone();
        let r = |n: &mut Network| n.params = n.params.rounded_f32();
        r(&mut out.actor);
        if let Some(b) = &mut out.bcq {
            for n in [
                &mut b.actor_target,
                &mut b.q1,
                &mut b.q2,
                &mut b.q1_target,
                &mut b.q2_target,
                &mut b.encoder,
                &mut b.decoder,
            ] {
                r(n);
            }
        }
        out
    }
}
