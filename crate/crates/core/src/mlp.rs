//! Fully connected networks whose weight matrices carry a binary mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::pruning::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_dims,
            hidden_activation: hidden,
            output_activation: output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims {:?} need at least two entries, all >= 1",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(out, in)` for each weight matrix.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shapes().iter().map(|(o, i)| o * i).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layer_dims[1..].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub seed: u64,
}

impl MlpParams {
    /// Fan-in uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights
    /// and biases. Values are drawn in `f32` so they survive checkpointing
    /// unchanged.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (out, inp) in spec.weight_shapes() {
            let bound = 1.0 / (inp as f32).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| rng.random_range(-bound..=bound) as f64)
                    .collect()
            };
            let w = draw(out * inp);
            let b = draw(out);
            weights.push(Tensor::new(vec![out, inp], w).expect("shape"));
            biases.push(Tensor::vector(b));
        }
        MlpParams {
            weights,
            biases,
            seed,
        }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        let shapes = spec.weight_shapes();
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(Error::shape("mlp params", "layer count differs from spec"));
        }
        for (l, (out, inp)) in shapes.into_iter().enumerate() {
            if self.weights[l].shape() != [out, inp] || self.biases[l].shape() != [out] {
                return Err(Error::shape(
                    "mlp params",
                    format!(
                        "layer {l}: weight {:?} bias {:?}, expected [{out}, {inp}] / [{out}]",
                        self.weights[l].shape(),
                        self.biases[l].shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Zeroes every weight whose mask entry is zero.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for (w, m) in self.weights.iter_mut().zip(&mask.layers) {
            for (v, &k) in w.data_mut().iter_mut().zip(m.data()) {
                if k == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// All parameters rounded through `f32`, the checkpoint storage type.
    pub fn rounded_f32(&self) -> Self {
        let r = |t: &Tensor| t.map(|v| v as f32 as f64);
        MlpParams {
            weights: self.weights.iter().map(r).collect(),
            biases: self.biases.iter().map(r).collect(),
            seed: self.seed,
        }
    }
}

/// A network: architecture, parameters and its pruning mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub mask: Mask,
}

impl Network {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = MlpParams::init(&spec, seed);
        let mask = Mask::dense(&spec);
        Network { spec, params, mask }
    }

    /// Installs `mask` and zeroes the pruned weights.
    pub fn prune(&mut self, mask: Mask) -> Result<()> {
        mask.check(&self.spec)?;
        self.params.apply_mask(&mask);
        self.mask = mask;
        Ok(())
    }

    /// Binds parameters into `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<MlpNodes> {
        MlpNodes::bind(g, &self.params, &self.mask, true)
    }

    /// Binds parameters as constants (no gradient is requested for them).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<MlpNodes> {
        MlpNodes::bind(g, &self.params, &self.mask, false)
    }

    /// Evaluates the masked network outside of any training graph.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        forward(&self.spec, &self.params, &self.mask, input)
    }

    /// Count of masked-out weights that are nonzero (must always be zero).
    pub fn masked_nonzero(&self) -> usize {
        self.params
            .weights
            .iter()
            .zip(&self.mask.layers)
            .map(|(w, m)| {
                w.data()
                    .iter()
                    .zip(m.data())
                    .filter(|(&v, &k)| k == 0.0 && v != 0.0)
                    .count()
            })
            .sum()
    }
}

/// Graph handles for one bound network.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    effective: Vec<NodeId>,
}

impl MlpNodes {
    pub fn bind(g: &mut Graph, params: &MlpParams, mask: &Mask, trainable: bool) -> Result<Self> {
        if params.weights.len() != mask.layers.len() {
            return Err(Error::shape("bind", "mask layer count differs from weights"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut effective = Vec::new();
        for ((w, b), m) in params.weights.iter().zip(&params.biases).zip(&mask.layers) {
            if w.shape() != m.shape() {
                return Err(Error::shape(
                    "bind",
                    format!("weight {:?} vs mask {:?}", w.shape(), m.shape()),
                ));
            }
            let (wn, bn) = if trainable {
                (g.parameter(w.clone())?, g.parameter(b.clone())?)
            } else {
                (g.constant(w.clone())?, g.constant(b.clone())?)
            };
            let mn = g.constant(m.clone())?;
            let masked = g.mul(wn, mn)?;
            effective.push(g.transpose(masked)?);
            weights.push(wn);
            biases.push(bn);
        }
        Ok(MlpNodes {
            weights,
            biases,
            effective,
        })
    }

    /// Every parameter node, weights first then biases.
    pub fn all(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().chain(&self.biases).copied()
    }

    pub fn apply(&self, g: &mut Graph, spec: &MlpSpec, input: NodeId) -> Result<NodeId> {
        let cols = *g.value(input).shape().last().unwrap_or(&0);
        if g.value(input).rank() != 2 || cols != spec.input_dim() {
            return Err(Error::shape(
                "mlp forward",
                format!(
                    "input {:?}, expected [batch, {}]",
                    g.value(input).shape(),
                    spec.input_dim()
                ),
            ));
        }
        let last = self.effective.len() - 1;
        let mut h = input;
        for (l, (&w, &b)) in self.effective.iter().zip(&self.biases).enumerate() {
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            let act = if l == last {
                spec.output_activation
            } else {
                spec.hidden_activation
            };
            h = act.apply(g, z)?;
        }
        Ok(h)
    }
}

/// Output of the masked network, using effective weights `W ⊙ M`.
pub fn forward(spec: &MlpSpec, params: &MlpParams, mask: &Mask, input: &Tensor) -> Result<Tensor> {
    params.check(spec)?;
    mask.check(spec)?;
    let batched = match input.shape() {
        [n] => Tensor::new(vec![1, *n], input.data().to_vec())?,
        _ => input.clone(),
    };
    let mut g = Graph::new();
    let nodes = MlpNodes::bind(&mut g, params, mask, false)?;
    let x = g.input(batched)?;
    let y = nodes.apply(&mut g, spec, x)?;
    let out = g.value(y).clone();
    if input.rank() == 1 {
        return Ok(Tensor::vector(out.into_data()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(mask_value: f64) -> (MlpSpec, MlpParams, Mask) {
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, Activation::Identity).unwrap();
        let params = MlpParams {
            weights: vec![Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap()],
            biases: vec![Tensor::zeros(&[2])],
            seed: 0,
        };
        let mask = Mask::from_layers(vec![Tensor::full(&[2, 2], mask_value)], 0.0);
        (spec, params, mask)
    }

    #[test]
    fn identity_network_passes_input_through() {
        let (spec, params, mask) = identity_net(1.0);
        let y = forward(&spec, &params, &mask, &Tensor::vector(vec![1., 2.])).unwrap();
        assert_eq!(y.data(), &[1., 2.]);
    }

    #[test]
    fn fully_pruned_network_outputs_bias() {
        let (spec, mut params, mask) = identity_net(0.0);
        let y = forward(&spec, &params, &mask, &Tensor::vector(vec![1., 2.])).unwrap();
        assert_eq!(y.data(), &[0., 0.]);
        params.biases[0] = Tensor::vector(vec![0.5, -1.0]);
        let y = forward(&spec, &params, &mask, &Tensor::vector(vec![1., 2.])).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
    }

    #[test]
    fn two_layer_tanh_matches_straight_line_evaluation() {
        let spec = MlpSpec::new(vec![3, 2, 1], Activation::Tanh, Activation::Identity).unwrap();
        let params = MlpParams {
            weights: vec![
                Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
                Tensor::matrix(1, 2, vec![0.7, -0.8]).unwrap(),
            ],
            biases: vec![Tensor::vector(vec![0.05, -0.05]), Tensor::vector(vec![0.2])],
            seed: 0,
        };
        let mask = Mask::dense(&spec);
        let y = forward(&spec, &params, &mask, &Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();

        let h0 = (0.1f64 - 0.2 + 0.3 + 0.05).tanh();
        let h1 = (0.4f64 + 0.5 - 0.6 - 0.05).tanh();
        let expected = 0.7 * h0 - 0.8 * h1 + 0.2;
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let spec = MlpSpec::new(vec![16, 8, 4], Activation::Relu, Activation::Identity).unwrap();
        let a = MlpParams::init(&spec, 7);
        let b = MlpParams::init(&spec, 7);
        let c = MlpParams::init(&spec, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.weights[0].max_abs() <= 0.25);
        assert!(a.weights[1].max_abs() <= 1.0 / 8f64.sqrt() + 1e-7);
        assert_eq!(a.rounded_f32(), a);
    }

    #[test]
    fn input_width_is_checked() {
        let (spec, params, mask) = identity_net(1.0);
        let r = forward(&spec, &params, &mask, &Tensor::vector(vec![1., 2., 3.]));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn spec_requires_two_positive_dims() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0], Activation::Relu, Activation::Identity).is_err());
    }
}
