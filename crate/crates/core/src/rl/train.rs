//! Gradient steps for BC and BCQ with masks enforced after every update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::mlp::{MlpNodes, Network};
use crate::optim::{adam_step, AdamConfig, AdamState, ParamGrads};
use crate::tensor::Tensor;

use super::losses::{bc_loss, bcq_actor_loss, bcq_critic_target, critic_loss_with_target, vae_loss};
use super::{AgentBundle, Algorithm};

/// Seeded source of every random draw made during training.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    rng: ChaCha8Rng,
}

impl NoiseDraw {
    pub fn new(seed: u64) -> Self {
        NoiseDraw {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `[rows, cols]` of independent standard normals.
    pub fn normal(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("consistent shape")
    }

    /// Latent draws for the decoder's sampling mode, clipped to `[-0.5, 0.5]`.
    pub fn latent(&mut self, rows: usize, cols: usize) -> Tensor {
        self.normal(rows, cols).map(|v| v.clamp(-0.5, 0.5))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One Adam state per trained network.
#[derive(Clone, Debug)]
pub struct AgentOptimizers {
    pub actor: AdamState,
    pub q1: Option<AdamState>,
    pub q2: Option<AdamState>,
    pub encoder: Option<AdamState>,
    pub decoder: Option<AdamState>,
}

impl AgentOptimizers {
    pub fn new(bundle: &AgentBundle) -> Self {
        let b = bundle.bcq.as_ref();
        AgentOptimizers {
            actor: AdamState::new(&bundle.actor.params),
            q1: b.map(|n| AdamState::new(&n.q1.params)),
            q2: b.map(|n| AdamState::new(&n.q2.params)),
            encoder: b.map(|n| AdamState::new(&n.encoder.params)),
            decoder: b.map(|n| AdamState::new(&n.decoder.params)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub actor: f64,
    pub critic: Option<f64>,
    pub vae: Option<f64>,
}

/// `target ← τ·online + (1 − τ)·target`, then the online mask is applied
/// to the target.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    if target.spec != online.spec {
        return Err(Error::shape("soft_update", "target and online architectures differ"));
    }
    let mix = |t: &mut Tensor, o: &Tensor| {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    };
    for (t, o) in target.params.weights.iter_mut().zip(&online.params.weights) {
        mix(t, o);
    }
    for (t, o) in target.params.biases.iter_mut().zip(&online.params.biases) {
        mix(t, o);
    }
    if target.mask != online.mask {
        target.mask = online.mask.clone();
    }
    target.params.apply_mask(&target.mask);
    Ok(())
}

fn param_grads(grads: &Gradients, nodes: &MlpNodes) -> ParamGrads {
    ParamGrads {
        weights: nodes.weights.iter().map(|&w| grads.get(w)).collect(),
        biases: nodes.biases.iter().map(|&b| grads.get(b)).collect(),
    }
}

fn step_net(net: &mut Network, grads: &Gradients, nodes: &MlpNodes, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    adam_step(&mut net.params, &net.mask, &param_grads(grads, nodes), state, cfg)
}

fn missing() -> Error {
    Error::InvalidConfig("BCQ optimizer state missing".into())
}

/// An agent together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub bundle: AgentBundle,
    pub opt: AgentOptimizers,
    pub adam: AdamConfig,
    steps: u64,
}

impl Learner {
    pub fn new(bundle: AgentBundle, adam: AdamConfig) -> Self {
        let opt = AgentOptimizers::new(&bundle);
        Learner {
            bundle,
            opt,
            adam,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One gradient step on `batch`. BCQ updates the VAE, then both
    /// critics, then the actor, then all targets.
    pub fn train_step(&mut self, batch: &Batch, noise: &mut NoiseDraw) -> Result<StepLosses> {
        let losses = match self.bundle.algorithm {
            Algorithm::Bc => self.bc_step(batch)?,
            Algorithm::Bcq => self.bcq_step(batch, noise)?,
        };
        self.steps += 1;
        Ok(losses)
    }

    fn bc_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let mut g = Graph::new();
        let o = bc_loss(&mut g, &self.bundle.actor, &self.bundle.dims, batch)?;
        let grads = g.backward(o.loss)?;
        step_net(&mut self.bundle.actor, &grads, &o.scored[0], &mut self.opt.actor, &self.adam)?;
        Ok(StepLosses {
            actor: g.value(o.loss).item(),
            ..StepLosses::default()
        })
    }

    fn bcq_step(&mut self, batch: &Batch, noise: &mut NoiseDraw) -> Result<StepLosses> {
        let b = batch.len();
        let dims = self.bundle.dims;
        let hyper = self.bundle.hyper;
        let cfg = self.adam;

        // VAE
        let eps = noise.normal(b, dims.latent_dim);
        let mut g = Graph::new();
        let nets = self.bundle.bcq()?;
        let o = vae_loss(&mut g, &nets.encoder, &nets.decoder, &dims, batch, &eps)?;
        let grads = g.backward(o.loss)?;
        let vae = g.value(o.loss).item();
        {
            let nets = self.bundle.bcq.as_mut().ok_or_else(missing)?;
            let enc_state = self.opt.encoder.as_mut().ok_or_else(missing)?;
            step_net(&mut nets.encoder, &grads, &o.scored[0], enc_state, &cfg)?;
            let dec_state = self.opt.decoder.as_mut().ok_or_else(missing)?;
            step_net(&mut nets.decoder, &grads, &o.scored[1], dec_state, &cfg)?;
        }

        // Critics
        let zc = noise.latent(b * hyper.n_action_samples, dims.latent_dim);
        let y = bcq_critic_target(&self.bundle, batch, &zc)?;
        let mut g = Graph::new();
        let o = critic_loss_with_target(&mut g, &self.bundle, batch, &y)?;
        let grads = g.backward(o.loss)?;
        let critic = g.value(o.loss).item();
        {
            let nets = self.bundle.bcq.as_mut().ok_or_else(missing)?;
            step_net(&mut nets.q1, &grads, &o.scored[0], self.opt.q1.as_mut().ok_or_else(missing)?, &cfg)?;
            step_net(&mut nets.q2, &grads, &o.scored[1], self.opt.q2.as_mut().ok_or_else(missing)?, &cfg)?;
        }

        // Actor
        let z = noise.latent(b, dims.latent_dim);
        let mut g = Graph::new();
        let o = bcq_actor_loss(&mut g, &self.bundle, batch, &z)?;
        let grads = g.backward(o.loss)?;
        let actor = g.value(o.loss).item();
        step_net(&mut self.bundle.actor, &grads, &o.scored[0], &mut self.opt.actor, &cfg)?;

        // Targets
        let actor_net = self.bundle.actor.clone();
        let nets = self.bundle.bcq.as_mut().ok_or_else(missing)?;
        soft_update(&mut nets.q1_target, &nets.q1, hyper.tau)?;
        soft_update(&mut nets.q2_target, &nets.q2, hyper.tau)?;
        soft_update(&mut nets.actor_target, &actor_net, hyper.tau)?;

        Ok(StepLosses {
            actor,
            critic: Some(critic),
            vae: Some(vae),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, sample_batch, DataPolicy};
    use crate::env::EnvKind;
    use crate::mlp::{Activation, MlpParams, MlpSpec};
    use crate::pruning::Mask;
    use crate::rl::{AgentDims, Architecture, BcqConfig};

    fn scalar_net(w: f64) -> Network {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity, Activation::Identity).unwrap();
        Network {
            params: MlpParams {
                weights: vec![Tensor::matrix(1, 1, vec![w]).unwrap()],
                biases: vec![Tensor::vector(vec![w])],
                seed: 0,
            },
            mask: Mask::dense(&spec),
            spec,
        }
    }

    #[test]
    fn soft_update_extremes() {
        let online = scalar_net(1.0);
        let mut t = scalar_net(0.0);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        let mut t = scalar_net(0.0);
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, scalar_net(0.0));
        let mut t = scalar_net(0.0);
        soft_update(&mut t, &online, 0.005).unwrap();
        assert_eq!(t.params.weights[0].data()[0], 0.005);
        assert!(soft_update(&mut t, &online, 1.5).is_err());
    }

    #[test]
    fn soft_update_enforces_online_mask() {
        let mut online = scalar_net(1.0);
        online.prune(Mask::from_layers(vec![Tensor::zeros(&[1, 1])], 1.0)).unwrap();
        let mut t = scalar_net(0.7);
        soft_update(&mut t, &online, 0.005).unwrap();
        assert_eq!(t.params.weights[0].data()[0], 0.0);
        assert_eq!(t.mask, online.mask);
    }

    fn learner(algorithm: Algorithm) -> (Learner, crate::dataset::Dataset) {
        let env = EnvKind::PointMass;
        let dims = AgentDims::for_env(&env.spec()).unwrap();
        let arch = Architecture {
            actor_hidden: vec![16],
            critic_hidden: vec![16],
            vae_hidden: vec![16],
        };
        let bundle = AgentBundle::init(algorithm, dims, &arch, BcqConfig::default(), 0);
        let ds = generate_dataset(env, DataPolicy::NoisyExpert { sigma: 0.2 }, 500, 1).unwrap();
        (Learner::new(bundle, AdamConfig::default()), ds)
    }

    #[test]
    fn bc_training_reduces_loss() {
        let (mut l, ds) = learner(Algorithm::Bc);
        let mut noise = NoiseDraw::new(0);
        let probe = sample_batch(&ds, 200, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let loss = |l: &Learner| {
            let mut g = Graph::new();
            let o = bc_loss(&mut g, &l.bundle.actor, &l.bundle.dims, &probe).unwrap();
            g.value(o.loss).item()
        };
        let before = loss(&l);
        for _ in 0..200 {
            let b = sample_batch(&ds, 32, noise.rng()).unwrap();
            l.train_step(&b, &mut noise).unwrap();
        }
        let after = loss(&l);
        assert!(after < 0.8 * before, "{before} -> {after}");
        assert_eq!(l.steps(), 200);
    }

    #[test]
    fn pruned_bcq_stays_pruned_through_training() {
        let (mut l, ds) = learner(Algorithm::Bcq);
        let half = |n: &mut Network| {
            let layers = n
                .params
                .weights
                .iter()
                .map(|w| Tensor::new(w.shape().to_vec(), (0..w.len()).map(|i| (i % 2) as f64).collect()).unwrap())
                .collect();
            n.prune(Mask::from_layers(layers, 0.5)).unwrap();
        };
        half(&mut l.bundle.actor);
        {
            let n = l.bundle.bcq.as_mut().unwrap();
            for net in [&mut n.q1, &mut n.q2, &mut n.encoder, &mut n.decoder] {
                half(net);
            }
            n.actor_target = l.bundle.actor.clone();
            n.q1_target = n.q1.clone();
            n.q2_target = n.q2.clone();
        }
        let mut noise = NoiseDraw::new(3);
        for _ in 0..20 {
            let b = sample_batch(&ds, 16, noise.rng()).unwrap();
            let losses = l.train_step(&b, &mut noise).unwrap();
            assert!(losses.critic.unwrap().is_finite() && losses.vae.unwrap().is_finite());
            assert_eq!(l.bundle.masked_nonzero(), 0);
        }
        assert_eq!(l.opt.q1.as_ref().unwrap().steps(), 20);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut l, ds) = learner(Algorithm::Bcq);
            let mut noise = NoiseDraw::new(5);
            for _ in 0..5 {
                let b = sample_batch(&ds, 8, noise.rng()).unwrap();
                l.train_step(&b, &mut noise).unwrap();
            }
            l.bundle
        };
        assert_eq!(run(), run());
    }
}
