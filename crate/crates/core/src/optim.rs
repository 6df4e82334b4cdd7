//! Adam with unconditional mask enforcement after every update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{MlpParams, Network};
use crate::pruning::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m_w: Vec<Tensor>,
    v_w: Vec<Tensor>,
    m_b: Vec<Tensor>,
    v_b: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let z = |ts: &[Tensor]| ts.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        AdamState {
            step: 0,
            m_w: z(&params.weights),
            v_w: z(&params.weights),
            m_b: z(&params.biases),
            v_b: z(&params.biases),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Gradients for one network, aligned with [`MlpParams`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

fn update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, cfg: &AdamConfig, bc1: f64, bc2: f64) {
    let pd = p.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let gi = g.data()[i];
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One Adam update followed by zeroing every masked weight.
pub fn adam_step(
    params: &mut MlpParams,
    mask: &Mask,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.weights.len() != params.weights.len() || grads.biases.len() != params.biases.len() {
        return Err(Error::shape("adam_step", "gradient layer count differs from params"));
    }
    for (p, g) in params
        .weights
        .iter()
        .zip(&grads.weights)
        .chain(params.biases.iter().zip(&grads.biases))
    {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("adam_step gradient".into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for l in 0..params.weights.len() {
        update(&mut params.weights[l], &grads.weights[l], &mut state.m_w[l], &mut state.v_w[l], cfg, bc1, bc2);
        update(&mut params.biases[l], &grads.biases[l], &mut state.m_b[l], &mut state.v_b[l], cfg, bc1, bc2);
    }
    params.apply_mask(mask);
    Ok(())
}

/// A network paired with its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub net: Network,
    pub opt: AdamState,
    pub cfg: AdamConfig,
}

impl Trainable {
    pub fn new(net: Network, cfg: AdamConfig) -> Self {
        let opt = AdamState::new(&net.params);
        Trainable { net, opt, cfg }
    }

    pub fn step(&mut self, grads: &ParamGrads) -> Result<()> {
        adam_step(&mut self.net.params, &self.net.mask, grads, &mut self.opt, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, MlpSpec};

    fn scalar_net() -> (MlpParams, Mask) {
        let params = MlpParams {
            weights: vec![Tensor::matrix(1, 1, vec![0.5]).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
            seed: 0,
        };
        let mask = Mask::from_layers(vec![Tensor::ones(&[1, 1])], 0.0);
        (params, mask)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut params, mask) = scalar_net();
        let mut st = AdamState::new(&params);
        let grads = ParamGrads {
            weights: vec![Tensor::matrix(1, 1, vec![1.0]).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
        };
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut params, &mask, &grads, &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1: step = lr · 1 / (1 + eps)
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((params.weights[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(params.biases[0].data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut params = MlpParams::init(&spec, 1);
        let before = params.clone();
        let mask = Mask::dense(&spec);
        let mut st = AdamState::new(&params);
        let grads = ParamGrads {
            weights: params.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: params.biases.iter().map(|b| Tensor::zeros(b.shape())).collect(),
        };
        for _ in 0..3 {
            adam_step(&mut params, &mask, &grads, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn masked_entry_stays_zero() {
        let (mut params, _) = scalar_net();
        let mask = Mask::from_layers(vec![Tensor::zeros(&[1, 1])], 1.0);
        params.apply_mask(&mask);
        let mut st = AdamState::new(&params);
        let grads = ParamGrads {
            weights: vec![Tensor::matrix(1, 1, vec![3.0]).unwrap()],
            biases: vec![Tensor::vector(vec![1.0])],
        };
        for _ in 0..5 {
            adam_step(&mut params, &mask, &grads, &mut st, &AdamConfig::default()).unwrap();
            assert_eq!(params.weights[0].data()[0], 0.0);
        }
        assert!(params.biases[0].data()[0] != 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut params, mask) = scalar_net();
        let mut st = AdamState::new(&params);
        let grads = ParamGrads {
            weights: vec![Tensor::matrix(1, 1, vec![f64::NAN]).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
        };
        let r = adam_step(&mut params, &mask, &grads, &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(st.steps(), 0);
    }
}
