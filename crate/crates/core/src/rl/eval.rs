//! Policy evaluation in the simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, EnvKind};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

use super::losses::{decode, perturb, q_value};
use super::{AgentBundle, AgentDims, Algorithm};
use super::train::NoiseDraw;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        EvalResult {
            mean: returns.iter().sum::<f64>() / n,
            min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            returns,
        }
    }
}

/// Deterministic action for `state`.
///
/// BC returns `max_action · π(s)`. BCQ decodes `n_eval_samples` candidates,
/// perturbs them, and returns the one with the highest `Q₁` (first on ties).
pub fn select_action(bundle: &AgentBundle, state: &[f64], noise: &mut NoiseDraw) -> Result<Vec<f64>> {
    let dims = &bundle.dims;
    if state.len() != dims.state_dim {
        return Err(Error::shape(
            "select_action",
            format!("state of length {}, expected {}", state.len(), dims.state_dim),
        ));
    }
    let s = Tensor::matrix(1, dims.state_dim, state.to_vec())?;
    match bundle.algorithm {
        Algorithm::Bc => Ok(bundle.actor.forward(&s)?.scale(dims.max_action).into_data()),
        Algorithm::Bcq => {
            let nets = bundle.bcq()?;
            let n = bundle.hyper.n_eval_samples.max(1);
            let mut g = Graph::new();
            let dec = nets.decoder.bind_frozen(&mut g)?;
            let act = bundle.actor.bind_frozen(&mut g)?;
            let q1 = nets.q1.bind_frozen(&mut g)?;
            let sr = g.input(s.repeat_rows(n)?)?;
            let z = g.input(noise.latent(n, dims.latent_dim))?;
            let a_dec = decode(&mut g, &nets.decoder, &dec, dims.max_action, sr, z)?;
            let a = perturb(&mut g, &bundle.actor, &act, dims, bundle.hyper.phi, sr, a_dec)?;
            let q = q_value(&mut g, &nets.q1, &q1, sr, a)?;
            let best = g
                .value(q)
                .data()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            Ok(g.value(a).row(best.0).to_vec())
        }
    }
}

fn check_env(dims: &AgentDims, env: EnvKind) -> Result<()> {
    let spec = env.spec();
    if spec.state_dim != dims.state_dim || spec.action_dim != dims.action_dim {
        return Err(Error::InvalidConfig(format!(
            "{env} has state/action dims {}/{}, agent has {}/{}",
            spec.state_dim, spec.action_dim, dims.state_dim, dims.action_dim
        )));
    }
    Ok(())
}

/// Start states for `episodes` evaluation episodes; identical for every
/// policy evaluated with the same seed.
pub fn start_states(env: EnvKind, episodes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| env.reset(&mut rng)).collect()
}

/// Mean undiscounted return over `episodes` episodes.
pub fn evaluate_policy(bundle: &AgentBundle, env: EnvKind, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    check_env(&bundle.dims, env)?;
    let mut noise = NoiseDraw::new(seed ^ 0x5e_ed0f_e7a1);
    let mut returns = Vec::with_capacity(episodes);
    for start in start_states(env, episodes, seed) {
        returns.push(rollout(env, start, |s| select_action(bundle, s, &mut noise))?);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Returns of the scripted expert and of the all-zero action policy on the
/// same start states, used to normalize agent returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub expert: f64,
    pub zero: f64,
}

impl ReferenceReturns {
    /// `(R − R_zero) / (R_expert − R_zero)`: 0 for doing nothing, 1 for the
    /// expert.
    pub fn normalize(&self, ret: f64) -> f64 {
        (ret - self.zero) / (self.expert - self.zero)
    }
}

pub fn reference_returns(env: EnvKind, episodes: usize, seed: u64) -> Result<ReferenceReturns> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let starts = start_states(env, episodes, seed);
    let zero_action = vec![0.0; env.spec().action_dim];
    let mut expert = 0.0;
    let mut zero = 0.0;
    for s in starts {
        expert += rollout(env, s.clone(), |x| Ok(env.expert_action(x)))?;
        zero += rollout(env, s, |_| Ok(zero_action.clone()))?;
    }
    let n = episodes as f64;
    Ok(ReferenceReturns {
        expert: expert / n,
        zero: zero / n,
    })
}
