use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpSpec;
use crate::tensor::Tensor;

use super::{Criterion, SaliencyScores};

/// Binary keep (1) / drop (0) tensors, one per weight matrix. Biases are
/// never masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub layers: Vec<Tensor>,
    pub sparsity: f64,
}

impl Mask {
    pub fn dense(spec: &MlpSpec) -> Self {
        Mask {
            layers: spec
                .weight_shapes()
                .into_iter()
                .map(|(o, i)| Tensor::ones(&[o, i]))
                .collect(),
            sparsity: 0.0,
        }
    }

    pub fn from_layers(layers: Vec<Tensor>, sparsity: f64) -> Self {
        Mask { layers, sparsity }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        let shapes = spec.weight_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape("mask", "layer count differs from spec"));
        }
        for (l, ((o, i), m)) in shapes.into_iter().zip(&self.layers).enumerate() {
            if m.shape() != [o, i] {
                return Err(Error::shape("mask", format!("layer {l}: {:?} vs [{o}, {i}]", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::shape("mask", format!("layer {l} holds a non-binary entry")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    pub fn zeros(&self) -> usize {
        self.total() - self.kept()
    }
}

/// Number of weights pruned out of `total` at `sparsity`.
pub fn pruned_count(sparsity: f64, total: usize) -> usize {
    (sparsity * total as f64).round() as usize
}

pub fn check_sparsity(sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) || sparsity.is_nan() {
        return Err(Error::InvalidSparsity(sparsity));
    }
    Ok(())
}

/// Global top-k mask over all weight matrices of one network.
///
/// SNIP prunes the lowest scores, GraSP the highest. Among equal scores the
/// lower flat index (layers concatenated in order, row-major inside each
/// layer) is pruned first.
pub fn build_mask(scores: &SaliencyScores, sparsity: f64, criterion: Criterion) -> Result<Mask> {
    check_sparsity(sparsity)?;
    let flat: Vec<f64> = scores.layers.iter().flat_map(|t| t.data().iter().copied()).collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency scores".into()));
    }
    let n = flat.len();
    let k = pruned_count(sparsity, n);
    let mut order: Vec<usize> = (0..n).collect();
    let cmp: fn(f64, f64) -> Ordering = match criterion {
        Criterion::Snip => |a, b| a.total_cmp(&b),
        Criterion::Grasp => |a, b| b.total_cmp(&a),
    };
    if k > 0 && k < n {
        order.select_nth_unstable_by(k - 1, |&i, &j| cmp(flat[i], flat[j]).then(i.cmp(&j)));
    }
    let mut keep = vec![1.0; n];
    for &i in &order[..k] {
        keep[i] = 0.0;
    }
    let mut layers = Vec::with_capacity(scores.layers.len());
    let mut offset = 0;
    for t in &scores.layers {
        let len = t.len();
        layers.push(Tensor::new(t.shape().to_vec(), keep[offset..offset + len].to_vec())?);
        offset += len;
    }
    Ok(Mask { layers, sparsity })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub kept: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Kept / total counts per weight matrix.
pub fn layer_stats(mask: &Mask) -> Vec<LayerStat> {
    mask.layers
        .iter()
        .map(|m| {
            let kept = m.data().iter().filter(|&&v| v != 0.0).count();
            let total = m.len();
            LayerStat {
                kept,
                total,
                fraction: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: Vec<f64>) -> SaliencyScores {
        SaliencyScores {
            layers: vec![Tensor::vector(v)],
        }
    }

    #[test]
    fn snip_keeps_highest() {
        let m = build_mask(&scores(vec![0.1, 0.5, 0.3, 0.4]), 0.5, Criterion::Snip).unwrap();
        assert_eq!(m.layers[0].data(), &[0., 1., 0., 1.]);
    }

    #[test]
    fn grasp_prunes_highest() {
        let m = build_mask(&scores(vec![-4.0, -1.0]), 0.5, Criterion::Grasp).unwrap();
        assert_eq!(m.layers[0].data(), &[1., 0.]);
    }

    #[test]
    fn zero_sparsity_is_dense() {
        let m = build_mask(&scores(vec![3.0, -1.0, 0.0]), 0.0, Criterion::Snip).unwrap();
        assert_eq!(m.layers[0].data(), &[1., 1., 1.]);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let m = build_mask(&scores(vec![1.0, 1.0, 1.0, 1.0]), 0.5, Criterion::Snip).unwrap();
        assert_eq!(m.layers[0].data(), &[0., 0., 1., 1.]);
        let m = build_mask(&scores(vec![1.0, 1.0, 1.0, 1.0]), 0.5, Criterion::Grasp).unwrap();
        assert_eq!(m.layers[0].data(), &[0., 0., 1., 1.]);
    }

    #[test]
    fn out_of_range_sparsity_is_rejected() {
        for s in [1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                build_mask(&scores(vec![1.0]), s, Criterion::Snip),
                Err(Error::InvalidSparsity(_))
            ));
        }
    }

    #[test]
    fn layer_stats_counts() {
        let m = Mask::from_layers(vec![Tensor::ones(&[2, 2]), Tensor::ones(&[2, 3])], 0.0);
        let s = layer_stats(&m);
        assert_eq!((s[0].kept, s[0].total, s[0].fraction), (4, 4, 1.0));
        assert_eq!((s[1].kept, s[1].total, s[1].fraction), (6, 6, 1.0));

        let m = Mask::from_layers(vec![Tensor::zeros(&[2, 2]), Tensor::ones(&[2, 3])], 0.4);
        let s = layer_stats(&m);
        assert_eq!(s[0].fraction, 0.0);
        assert_eq!(s[1].fraction, 1.0);
    }

    #[test]
    fn selection_is_global_across_layers() {
        let s = SaliencyScores {
            layers: vec![Tensor::vector(vec![0.1, 0.2]), Tensor::vector(vec![5.0, 6.0])],
        };
        let m = build_mask(&s, 0.5, Criterion::Snip).unwrap();
        assert_eq!(m.layers[0].data(), &[0., 0.]);
        assert_eq!(m.layers[1].data(), &[1., 1.]);
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_mask(
            v in prop::collection::vec(-10.0f64..10.0, 1..60),
            c in 0.01f64..100.0,
            s in 0.0f64..0.99,
        ) {
            let a = scores(v.clone());
            let b = scores(v.iter().map(|x| x * c).collect());
            for crit in [Criterion::Snip, Criterion::Grasp] {
                let ma = build_mask(&a, s, crit).unwrap();
                let mb = build_mask(&b, s, crit).unwrap();
                prop_assert_eq!(&ma, &mb);
                prop_assert_eq!(ma.zeros(), pruned_count(s, v.len()));
            }
        }
    }
}
