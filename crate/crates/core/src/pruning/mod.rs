//! Single-shot pruning at initialization.
//!
//! Both criteria score every weight of one or more networks against a data
//! batch and keep a global top-k per network:
//!
//! * SNIP, connection sensitivity: `|θ ⊙ ∇L(θ)|`, lowest scores pruned.
//! * GraSP, gradient signal preservation: `−θ ⊙ H∇L(θ)`, highest scores
//!   pruned, since removing those weights reduces gradient flow the least.
//!
//! A loss is supplied as a closure that builds the scalar objective on a
//! fresh [`Graph`] and reports which bound networks are being scored. The
//! Hessian-vector product runs along the full parameter gradient of the
//! scored networks (weights and biases); scores are only produced for
//! weight matrices.

mod mask;

pub use mask::{build_mask, check_sparsity, layer_stats, pruned_count, LayerStat, Mask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mlp::MlpNodes;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Snip,
    Grasp,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
        })
    }
}

/// One score tensor per weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyScores {
    pub layers: Vec<Tensor>,
}

/// A built pruning objective: the scalar loss and the networks to score.
pub struct Objective {
    pub loss: NodeId,
    pub scored: Vec<MlpNodes>,
}

fn average(acc: &mut Option<Vec<SaliencyScores>>, next: Vec<SaliencyScores>) {
    match acc {
        None => *acc = Some(next),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(next) {
                for (tx, ty) in x.layers.iter_mut().zip(y.layers) {
                    tx.add_assign(&ty);
                }
            }
        }
    }
}

fn finish(acc: Option<Vec<SaliencyScores>>, batches: usize) -> Result<Vec<SaliencyScores>> {
    let mut out = acc.ok_or(Error::Empty("pruning batches"))?;
    if batches > 1 {
        let k = 1.0 / batches as f64;
        for s in &mut out {
            for t in &mut s.layers {
                *t = t.scale(k);
            }
        }
    }
    for s in &out {
        if s.layers.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("saliency scores".into()));
        }
    }
    Ok(out)
}

fn check_loss(g: &Graph, loss: NodeId) -> Result<()> {
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("pruning loss".into()));
    }
    Ok(())
}

/// Connection sensitivity `|θ_q · ∂L/∂θ_q|` for every weight of every scored
/// network, averaged over `batches`.
pub fn snip_scores<B>(
    batches: &[B],
    mut build: impl FnMut(&mut Graph, &B) -> Result<Objective>,
) -> Result<Vec<SaliencyScores>> {
    let mut acc = None;
    for batch in batches {
        let mut g = Graph::new();
        let obj = build(&mut g, batch)?;
        check_loss(&g, obj.loss)?;
        let grads = g.backward(obj.loss)?;
        let scores = obj
            .scored
            .iter()
            .map(|net| SaliencyScores {
                layers: net
                    .weights
                    .iter()
                    .map(|&w| g.value(w).mul(&grads.get(w)).map(f64::abs))
                    .collect(),
            })
            .collect();
        average(&mut acc, scores);
    }
    finish(acc, batches.len())
}

/// Gradient-flow preservation score `−θ ⊙ Hg`, with `g` the gradient over
/// all parameters of the scored networks.
pub fn grasp_scores<B>(
    batches: &[B],
    mut build: impl FnMut(&mut Graph, &B) -> Result<Objective>,
) -> Result<Vec<SaliencyScores>> {
    let mut acc = None;
    for batch in batches {
        let mut g = Graph::new();
        let obj = build(&mut g, batch)?;
        check_loss(&g, obj.loss)?;
        let grads = g.backward(obj.loss)?;
        let v: Vec<(NodeId, Tensor)> = obj
            .scored
            .iter()
            .flat_map(|net| net.all())
            .map(|id| (id, grads.get(id)))
            .collect();
        let hg = g.hvp(obj.loss, &v)?;
        let scores = obj
            .scored
            .iter()
            .map(|net| SaliencyScores {
                layers: net
                    .weights
                    .iter()
                    .map(|&w| g.value(w).mul(&hg.get(w)).scale(-1.0))
                    .collect(),
            })
            .collect();
        average(&mut acc, scores);
    }
    finish(acc, batches.len())
}

/// Scores for a single criterion.
pub fn scores<B>(
    criterion: Criterion,
    batches: &[B],
    build: impl FnMut(&mut Graph, &B) -> Result<Objective>,
) -> Result<Vec<SaliencyScores>> {
    match criterion {
        Criterion::Snip => snip_scores(batches, build),
        Criterion::Grasp => grasp_scores(batches, build),
    }
}

/// Gradient flow `∇L(θ)ᵀ∇L(θ)` over every parameter of the scored networks.
pub fn gradient_flow(g: &Graph, objective: &Objective) -> Result<f64> {
    check_loss(g, objective.loss)?;
    let grads = g.backward(objective.loss)?;
    let flow = objective
        .scored
        .iter()
        .flat_map(|net| net.all())
        .map(|id| grads.get(id).norm_sq())
        .sum::<f64>();
    if !flow.is_finite() {
        return Err(Error::NonFinite("gradient flow".into()));
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, MlpParams, MlpSpec};

    /// Single linear neuron `θ·x` (no bias contribution) with `L = ½(θ·x − y)²`.
    fn linear_neuron(g: &mut Graph, theta: &[f64], x: &[f64], y: f64) -> Objective {
        let spec = MlpSpec::new(vec![theta.len(), 1], Activation::Identity, Activation::Identity).unwrap();
        let params = MlpParams {
            weights: vec![Tensor::matrix(1, theta.len(), theta.to_vec()).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
            seed: 0,
        };
        let nodes = MlpNodes::bind(g, &params, &Mask::dense(&spec), true).unwrap();
        let xin = g.input(Tensor::matrix(1, x.len(), x.to_vec()).unwrap()).unwrap();
        let out = nodes.apply(g, &spec, xin).unwrap();
        let target = g.input(Tensor::matrix(1, 1, vec![y]).unwrap()).unwrap();
        let mse = g.mse_loss(out, target).unwrap();
        let loss = g.scale(mse, 0.5).unwrap();
        Objective {
            loss,
            scored: vec![nodes],
        }
    }

    #[test]
    fn snip_linear_neuron() {
        let s = snip_scores(&[()], |g, _| Ok(linear_neuron(g, &[1.0, 2.0], &[1.0, 1.0], 0.0))).unwrap();
        assert_eq!(s[0].layers[0].data(), &[3.0, 6.0]);
    }

    #[test]
    fn snip_matches_limit_form() {
        let theta = [1.0, 2.0];
        let loss_at = |t: &[f64]| {
            let mut g = Graph::new();
            let o = linear_neuron(&mut g, t, &[1.0, 1.0], 0.0);
            g.value(o.loss).item()
        };
        let s = snip_scores(&[()], |g, _| Ok(linear_neuron(g, &theta, &[1.0, 1.0], 0.0))).unwrap();
        let eps = 1e-6;
        for q in 0..2 {
            let mut pert = theta;
            pert[q] += eps * theta[q];
            let fd = ((loss_at(&theta) - loss_at(&pert)) / eps).abs();
            let got = s[0].layers[0].data()[q];
            assert!((fd - got).abs() / got < 1e-5, "q={q}: fd {fd} vs {got}");
        }
    }

    #[test]
    fn snip_zero_weight_scores_zero() {
        let s = snip_scores(&[()], |g, _| Ok(linear_neuron(g, &[0.0, 2.0], &[1.0, 1.0], 5.0))).unwrap();
        assert_eq!(s[0].layers[0].data()[0], 0.0);
    }

    fn quadratic(g: &mut Graph, theta: &[f64], a: &[f64]) -> Objective {
        // L = ½ Σ a_i θ_i², θ stored as a single weight row
        let params = MlpParams {
            weights: vec![Tensor::matrix(1, theta.len(), theta.to_vec()).unwrap()],
            biases: vec![Tensor::vector(vec![0.0])],
            seed: 0,
        };
        let mask = Mask::from_layers(vec![Tensor::ones(&[1, theta.len()])], 0.0);
        let nodes = MlpNodes::bind(g, &params, &mask, true).unwrap();
        let w = nodes.weights[0];
        let ac = g.constant(Tensor::matrix(1, a.len(), a.to_vec()).unwrap()).unwrap();
        let sq = g.square(w).unwrap();
        let weighted = g.mul(sq, ac).unwrap();
        let s = g.sum(weighted).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        Objective {
            loss,
            scored: vec![nodes],
        }
    }

    #[test]
    fn grasp_quadratic() {
        let s = grasp_scores(&[()], |g, _| Ok(quadratic(g, &[1.0, 1.0], &[2.0, 1.0]))).unwrap();
        assert_eq!(s[0].layers[0].data(), &[-4.0, -1.0]);
        let m = build_mask(&s[0], 0.5, Criterion::Grasp).unwrap();
        assert_eq!(m.layers[0].data(), &[1.0, 0.0]);
    }

    #[test]
    fn grasp_zero_theta_scores_zero() {
        let s = grasp_scores(&[()], |g, _| Ok(quadratic(g, &[0.0, 0.0], &[2.0, 1.0]))).unwrap();
        assert_eq!(s[0].layers[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_scaling_scales_snip_scores() {
        let base = snip_scores(&[()], |g, _| Ok(linear_neuron(g, &[0.3, -0.7, 1.1], &[1.0, 2.0, -1.0], 0.4))).unwrap();
        let scaled = snip_scores(&[()], |g, _| {
            let o = linear_neuron(g, &[0.3, -0.7, 1.1], &[1.0, 2.0, -1.0], 0.4);
            let loss = g.scale(o.loss, 4.0)?;
            Ok(Objective { loss, ..o })
        })
        .unwrap();
        for (a, b) in base[0].layers[0].data().iter().zip(scaled[0].layers[0].data()) {
            assert!((4.0 * a - b).abs() < 1e-12);
        }
        assert_eq!(
            build_mask(&base[0], 0.34, Criterion::Snip).unwrap(),
            build_mask(&scaled[0], 0.34, Criterion::Snip).unwrap()
        );
    }

    #[test]
    fn gradient_flow_norms() {
        // g = θ for L = ½‖θ‖²
        let mut g = Graph::new();
        let o = quadratic(&mut g, &[3.0, -4.0], &[1.0, 1.0]);
        assert_eq!(gradient_flow(&g, &o).unwrap(), 25.0);
        let mut g = Graph::new();
        let o = quadratic(&mut g, &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(gradient_flow(&g, &o).unwrap(), 0.0);
    }

    #[test]
    fn multiple_batches_average() {
        let batches = [(0.0, 1.0), (2.0, 1.0)];
        let s = snip_scores(&batches, |g, &(y, x)| Ok(linear_neuron(g, &[1.0], &[x], y))).unwrap();
        // |θ g| per batch: |1·(1−0)·1| = 1 and |1·(1−2)·1| = 1
        assert_eq!(s[0].layers[0].data(), &[1.0]);
        assert!(snip_scores::<()>(&[], |g, _| Ok(linear_neuron(g, &[1.0], &[1.0], 0.0))).is_err());
    }
}
