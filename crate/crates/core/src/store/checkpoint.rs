//! Agent checkpoints: pruned weights in COO form, biases dense.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SRLC" | version u32 = 1
//! | algorithm u8 | state_dim u32 | action_dim u32 | latent_dim u32 | max_action f64
//! | gamma f64 | tau f64 | phi f64 | lambda f64 | n_action_samples u32 | n_eval_samples u32
//! | network count u32
//! | per network:
//!     name (u16 length + UTF-8)
//!     spec: layer count + 1 as u32, each dim u32, hidden act u8, output act u8
//!     init seed u64 | mask sparsity f64
//!     per layer: rows u64, cols u64, nnz u64, row idx u64 × nnz, col idx u64 × nnz, values f32 × nnz
//!     per layer: bias length u64, values f32 × length
//! ```
//!
//! Values are stored as `f32`; a loaded bundle equals the saved bundle
//! rounded through `f32`. Optimizer state is not stored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{Activation, MlpParams, MlpSpec, Network};
use crate::pruning::Mask;
use crate::rl::{AgentBundle, AgentDims, Algorithm, BcqConfig};
use crate::tensor::Tensor;

use super::{from_coo, to_coo, CooMatrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRLC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: Default::default(),
        reason: reason.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated checkpoint"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.arr::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    /// A length prefix that cannot exceed the remaining bytes at `unit`
    /// bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(corrupt("truncated checkpoint"));
        }
        Ok(n as usize)
    }
}

fn write_network(w: &mut Writer, name: &str, net: &Network) -> Result<()> {
    w.u16(name.len() as u16);
    w.0.extend_from_slice(name.as_bytes());
    let spec = &net.spec;
    w.u32(spec.layer_dims.len() as u32);
    for &d in &spec.layer_dims {
        w.u32(d as u32);
    }
    w.u8(spec.hidden_activation.code());
    w.u8(spec.output_activation.code());
    w.u64(net.params.seed);
    w.f64(net.mask.sparsity);
    for (wt, m) in net.params.weights.iter().zip(&net.mask.layers) {
        let coo = to_coo(wt, m)?;
        w.u64(coo.shape.0);
        w.u64(coo.shape.1);
        w.u64(coo.nnz() as u64);
        coo.rows.iter().for_each(|&v| w.u64(v));
        coo.cols.iter().for_each(|&v| w.u64(v));
        coo.values.iter().for_each(|&v| w.f32(v));
    }
    for b in &net.params.biases {
        w.u64(b.len() as u64);
        b.data().iter().for_each(|&v| w.f32(v as f32));
    }
    Ok(())
}

fn read_network(r: &mut Reader) -> Result<(String, Network)> {
    let n = r.u16()? as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("network name is not UTF-8"))?;
    let n_dims = r.u32()? as usize;
    if n_dims > (r.buf.len() - r.pos) / 4 {
        return Err(corrupt("truncated checkpoint"));
    }
    let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let act = |c: u8| Activation::from_code(c).ok_or_else(|| corrupt(format!("unknown activation code {c}")));
    let hidden = act(r.u8()?)?;
    let output = act(r.u8()?)?;
    let spec = MlpSpec::new(dims, hidden, output).map_err(|e| corrupt(format!("network '{name}': {e}")))?;
    let seed = r.u64()?;
    let sparsity = r.f64()?;

    let mut weights = Vec::new();
    let mut masks = Vec::new();
    for (o, i) in spec.weight_shapes() {
        let shape = (r.u64()?, r.u64()?);
        if shape != (o as u64, i as u64) {
            return Err(corrupt(format!("network '{name}': weight block {shape:?} vs spec [{o}, {i}]")));
        }
        let nnz = r.len(20)?;
        let rows = (0..nnz).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let cols = (0..nnz).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let coo = CooMatrix {
            rows,
            cols,
            values,
            shape,
        };
        let (w, m) = from_coo(&coo).map_err(|e| corrupt(format!("network '{name}': {e}")))?;
        weights.push(w);
        masks.push(m);
    }
    let mut biases = Vec::new();
    for (o, _) in spec.weight_shapes() {
        let len = r.len(4)?;
        if len != o {
            return Err(corrupt(format!("network '{name}': bias of length {len}, expected {o}")));
        }
        let b = (0..len).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
        biases.push(Tensor::vector(b));
    }
    let net = Network {
        params: MlpParams { weights, biases, seed },
        mask: Mask::from_layers(masks, sparsity),
        spec,
    };
    if !net.params.weights.iter().chain(&net.params.biases).all(Tensor::is_finite) {
        return Err(corrupt(format!("network '{name}' holds non-finite values")));
    }
    Ok((name, net))
}

/// Serialized checkpoint bytes.
pub fn encode_checkpoint(bundle: &AgentBundle) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(match bundle.algorithm {
        Algorithm::Bc => 0,
        Algorithm::Bcq => 1,
    });
    let d = &bundle.dims;
    w.u32(d.state_dim as u32);
    w.u32(d.action_dim as u32);
    w.u32(d.latent_dim as u32);
    w.f64(d.max_action);
    let h = &bundle.hyper;
    for v in [h.gamma, h.tau, h.phi, h.lambda] {
        w.f64(v);
    }
    w.u32(h.n_action_samples as u32);
    w.u32(h.n_eval_samples as u32);
    let nets = bundle.networks();
    w.u32(nets.len() as u32);
    for (name, net) in nets {
        write_network(&mut w, name, net)?;
    }
    Ok(w.0)
}

/// Parses checkpoint bytes; nothing is returned unless the whole buffer is
/// valid.
pub fn decode_checkpoint(buf: &[u8]) -> Result<AgentBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| corrupt("truncated checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let algorithm = match r.u8()? {
        0 => Algorithm::Bc,
        1 => Algorithm::Bcq,
        c => return Err(corrupt(format!("unknown algorithm code {c}"))),
    };
    let dims = AgentDims {
        state_dim: r.u32()? as usize,
        action_dim: r.u32()? as usize,
        latent_dim: r.u32()? as usize,
        max_action: r.f64()?,
    };
    let hyper = BcqConfig {
        gamma: r.f64()?,
        tau: r.f64()?,
        phi: r.f64()?,
        lambda: r.f64()?,
        n_action_samples: r.u32()? as usize,
        n_eval_samples: r.u32()? as usize,
    };
    let count = r.u32()? as usize;
    if count > 8 {
        return Err(corrupt(format!("{count} networks in one checkpoint")));
    }
    let nets = (0..count).map(|_| read_network(&mut r)).collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(corrupt("trailing bytes after last network"));
    }
    AgentBundle::from_networks(algorithm, dims, hyper, nets).map_err(|e| corrupt(e.to_string()))
}

pub fn save_checkpoint(bundle: &AgentBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AgentBundle> {
    let buf = std::fs::read(path)?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
