//! Sparse (COO) storage of pruned networks and the byte accounting behind
//! the memory tables.
//!
//! Byte model, per network:
//!
//! * dense: 4 bytes per weight and bias.
//! * dense with sparse indexing: every weight stored as a COO entry of one
//!   `f32` value plus two `u64` indices (20 bytes); every bias as a 1-D
//!   sparse entry with one index (12 bytes).
//! * pruned sparse: as above but only kept weights are stored. Biases are
//!   never pruned.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpSpec;
use crate::pruning::{check_sparsity, pruned_count, Mask};
use crate::tensor::Tensor;

pub const VALUE_BYTES: u64 = 4;
pub const INDEX_BYTES: u64 = 8;
/// One value and a (row, col) index pair.
pub const COO_ENTRY_BYTES: u64 = VALUE_BYTES + 2 * INDEX_BYTES;
/// One value and a single index.
pub const BIAS_ENTRY_BYTES: u64 = VALUE_BYTES + INDEX_BYTES;

/// Row-major sorted coordinate list of the kept entries of one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CooMatrix {
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub values: Vec<f32>,
    pub shape: (u64, u64),
}

impl CooMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Equal lengths, indices in range, strictly increasing row-major order
    /// (which also rules out duplicates).
    pub fn check(&self) -> Result<()> {
        let n = self.values.len();
        if self.rows.len() != n || self.cols.len() != n {
            return Err(Error::shape("coo", "index and value arrays differ in length"));
        }
        let (r, c) = self.shape;
        let mut prev: Option<(u64, u64)> = None;
        for (&i, &j) in self.rows.iter().zip(&self.cols) {
            if i >= r || j >= c {
                return Err(Error::shape("coo", format!("index ({i}, {j}) outside {r}x{c}")));
            }
            if prev.is_some_and(|p| p >= (i, j)) {
                return Err(Error::shape("coo", format!("entry ({i}, {j}) out of order or duplicated")));
            }
            prev = Some((i, j));
        }
        Ok(())
    }
}

/// Entries at every kept position of `weight`, including kept entries whose
/// value is zero.
pub fn to_coo(weight: &Tensor, mask: &Tensor) -> Result<CooMatrix> {
    let (r, c) = weight.dims2()?;
    if mask.shape() != weight.shape() {
        return Err(Error::shape(
            "to_coo",
            format!("weight {:?} vs mask {:?}", weight.shape(), mask.shape()),
        ));
    }
    let mut coo = CooMatrix {
        rows: Vec::new(),
        cols: Vec::new(),
        values: Vec::new(),
        shape: (r as u64, c as u64),
    };
    for (idx, (&w, &m)) in weight.data().iter().zip(mask.data()).enumerate() {
        if m != 0.0 {
            coo.rows.push((idx / c) as u64);
            coo.cols.push((idx % c) as u64);
            coo.values.push(w as f32);
        }
    }
    Ok(coo)
}

/// Dense weight and mask tensors rebuilt from `coo`.
pub fn from_coo(coo: &CooMatrix) -> Result<(Tensor, Tensor)> {
    coo.check()?;
    let (r, c) = (coo.shape.0 as usize, coo.shape.1 as usize);
    let mut w = vec![0.0; r * c];
    let mut m = vec![0.0; r * c];
    for ((&i, &j), &v) in coo.rows.iter().zip(&coo.cols).zip(&coo.values) {
        let idx = i as usize * c + j as usize;
        w[idx] = v as f64;
        m[idx] = 1.0;
    }
    Ok((Tensor::new(vec![r, c], w)?, Tensor::new(vec![r, c], m)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBytes {
    pub layer: usize,
    pub kind: BlockKind,
    pub entries: u64,
    pub kept: u64,
    pub dense: u64,
    pub dense_sparse_indexed: u64,
    pub pruned_sparse: u64,
}

/// Byte counts for one network (or a group of networks reported together).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub name: String,
    pub layers: Vec<LayerBytes>,
    pub dense: u64,
    pub dense_sparse_indexed: u64,
    pub pruned_sparse: u64,
}

impl MemoryReport {
    fn from_layers(name: &str, layers: Vec<LayerBytes>) -> Self {
        let sum = |f: fn(&LayerBytes) -> u64| layers.iter().map(f).sum();
        MemoryReport {
            name: name.to_string(),
            dense: sum(|l| l.dense),
            dense_sparse_indexed: sum(|l| l.dense_sparse_indexed),
            pruned_sparse: sum(|l| l.pruned_sparse),
            layers,
        }
    }

    /// Several networks reported as one column (twin critics, VAE halves).
    pub fn combine(name: &str, parts: &[MemoryReport]) -> Self {
        let layers = parts.iter().flat_map(|p| p.layers.iter().copied()).collect();
        Self::from_layers(name, layers)
    }
}

fn layer_bytes(spec: &MlpSpec, kept: &[u64]) -> Vec<LayerBytes> {
    let mut out = Vec::new();
    for (l, ((o, i), &k)) in spec.weight_shapes().into_iter().zip(kept).enumerate() {
        let n = (o * i) as u64;
        out.push(LayerBytes {
            layer: l,
            kind: BlockKind::Weight,
            entries: n,
            kept: k,
            dense: n * VALUE_BYTES,
            dense_sparse_indexed: n * COO_ENTRY_BYTES,
            pruned_sparse: k * COO_ENTRY_BYTES,
        });
        let b = o as u64;
        out.push(LayerBytes {
            layer: l,
            kind: BlockKind::Bias,
            entries: b,
            kept: b,
            dense: b * VALUE_BYTES,
            dense_sparse_indexed: b * BIAS_ENTRY_BYTES,
            pruned_sparse: b * BIAS_ENTRY_BYTES,
        });
    }
    out
}

/// Byte model for a network of `spec` pruned to `sparsity`.
///
/// The total kept count is `N − round(s·N)`; it is split across layers in
/// proportion to their size (largest remainder), so per-layer rows sum to
/// the network total exactly. Use [`masked_byte_model`] for the per-layer
/// split of an actual mask.
pub fn byte_model(name: &str, spec: &MlpSpec, sparsity: f64) -> Result<MemoryReport> {
    check_sparsity(sparsity)?;
    spec.validate()?;
    let sizes: Vec<u64> = spec.weight_shapes().iter().map(|(o, i)| (o * i) as u64).collect();
    let total: u64 = sizes.iter().sum();
    let kept_total = total - pruned_count(sparsity, total as usize) as u64;
    let mut kept: Vec<u64> = sizes.iter().map(|&n| n * kept_total / total).collect();
    let mut rest = kept_total - kept.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&l| std::cmp::Reverse((sizes[l] * kept_total) % total));
    for &l in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if kept[l] < sizes[l] {
            kept[l] += 1;
            rest -= 1;
        }
    }
    Ok(MemoryReport::from_layers(name, layer_bytes(spec, &kept)))
}

/// Byte model using the kept counts of `mask`.
pub fn masked_byte_model(name: &str, spec: &MlpSpec, mask: &Mask) -> Result<MemoryReport> {
    mask.check(spec)?;
    let kept: Vec<u64> = mask
        .layers
        .iter()
        .map(|m| m.data().iter().filter(|&&v| v != 0.0).count() as u64)
        .collect();
    Ok(MemoryReport::from_layers(name, layer_bytes(spec, &kept)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use proptest::prelude::*;

    fn actor_spec() -> MlpSpec {
        MlpSpec::new(vec![23, 400, 300, 6], Activation::Relu, Activation::Tanh).unwrap()
    }

    #[test]
    fn kept_zero_values_are_stored() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let coo = to_coo(&w, &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(coo.nnz(), 4);
        assert_eq!(coo.values, vec![1.0, 0.0, 0.0, 2.0]);
        assert_eq!((coo.rows[1], coo.cols[1]), (0, 1));
        let empty = to_coo(&w, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(empty.nnz(), 0);
        assert!(to_coo(&w, &Tensor::ones(&[2, 3])).is_err());
    }

    #[test]
    fn malformed_coo_is_rejected() {
        let mut coo = CooMatrix {
            rows: vec![0, 0],
            cols: vec![1, 1],
            values: vec![1.0, 2.0],
            shape: (2, 2),
        };
        assert!(coo.check().is_err());
        coo.cols = vec![1, 0];
        assert!(coo.check().is_err());
        coo.cols = vec![0, 2];
        assert!(coo.check().is_err());
        coo.cols = vec![0, 1];
        coo.check().unwrap();
    }

    #[test]
    fn actor_dense_bytes() {
        let r = byte_model("actor", &actor_spec(), 0.0).unwrap();
        assert_eq!(r.dense, 4 * 131_706);
        assert_eq!(r.dense_sparse_indexed, 131_000 * 20 + 706 * 12);
        assert_eq!(r.pruned_sparse, r.dense_sparse_indexed);
    }

    #[test]
    fn pruned_bytes_count_kept_weights() {
        let r = byte_model("actor", &actor_spec(), 0.95).unwrap();
        let kept = 131_000 - (0.95f64 * 131_000.0).round() as u64;
        assert_eq!(r.pruned_sparse, kept * 20 + 706 * 12);
        assert!(r.dense_sparse_indexed >= 4 * r.pruned_sparse);
        assert!(r.dense as f64 >= 3.5 * r.pruned_sparse as f64);
    }

    proptest! {
        #[test]
        fn layers_sum_to_totals(dims in prop::collection::vec(1usize..40, 2..5), s in 0.0f64..0.99) {
            let spec = MlpSpec::new(dims, Activation::Relu, Activation::Identity).unwrap();
            let r = byte_model("net", &spec, s).unwrap();
            prop_assert_eq!(r.layers.iter().map(|l| l.dense).sum::<u64>(), r.dense);
            prop_assert_eq!(r.layers.iter().map(|l| l.pruned_sparse).sum::<u64>(), r.pruned_sparse);
            prop_assert!(r.layers.iter().all(|l| l.kept <= l.entries));
            let kept: u64 = r.layers.iter().filter(|l| l.kind == BlockKind::Weight).map(|l| l.kept).sum();
            let n = spec.weight_count();
            prop_assert_eq!(kept as usize, n - pruned_count(s, n));
            if s > 0.0 {
                prop_assert!(r.pruned_sparse <= r.dense_sparse_indexed);
            }
        }

        #[test]
        fn coo_round_trip(vals in prop::collection::vec(-2.0f32..2.0, 12), keep in prop::collection::vec(any::<bool>(), 12)) {
            let w = Tensor::matrix(3, 4, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let m = Tensor::matrix(3, 4, keep.iter().map(|&k| k as u8 as f64).collect()).unwrap();
            let coo = to_coo(&w, &m).unwrap();
            coo.check().unwrap();
            let (w2, m2) = from_coo(&coo).unwrap();
            prop_assert_eq!(&m2, &m);
            prop_assert_eq!(w2, w.mul(&m));
        }
    }
}
