//! Fixed offline datasets and their binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SRLD" | version u32 = 1 | state_dim u32 | action_dim u32 | count u64
//! | env name: u16 length + UTF-8
//! | count × [s: f32 × state_dim, a: f32 × action_dim, r: f32, s': f32 × state_dim, done: u8]
//! ```
//!
//! Values are held in memory already rounded through `f32`, so a dataset
//! read back from disk is identical to the one that was written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SRLD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<bool>,
}

/// Behaviour policy used to collect a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DataPolicy {
    Expert,
    /// Expert action plus Gaussian noise with std `sigma × max_action`.
    NoisyExpert { sigma: f64 },
}

/// One `(s, a, r, s', done)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

impl Dataset {
    pub fn empty(env: EnvKind) -> Self {
        let spec = env.spec();
        Dataset {
            env,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn spec(&self) -> EnvSpec {
        self.env.spec()
    }

    pub fn push(&mut self, t: &Transition) {
        self.states.extend(t.state.iter().map(|&v| f32r(v)));
        self.actions.extend(t.action.iter().map(|&v| f32r(v)));
        self.rewards.push(f32r(t.reward));
        self.next_states.extend(t.next_state.iter().map(|&v| f32r(v)));
        self.dones.push(t.done);
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let name = self.env.name().as_bytes();
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let f = |w: &mut dyn Write, xs: &[f64]| -> std::io::Result<()> {
            for &x in xs {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
            Ok(())
        };
        for i in 0..self.len() {
            f(w, self.state(i))?;
            f(w, self.action(i))?;
            f(w, &[self.rewards[i]])?;
            f(w, self.next_state(i))?;
            w.write_all(&[self.dones[i] as u8])?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Corrupt {
                path: path.to_path_buf(),
                reason: "truncated dataset".into(),
            },
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: Default::default(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let state_dim = read_u32(r)? as usize;
        let action_dim = read_u32(r)? as usize;
        let count = read_u64(r)? as usize;
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("env name is not UTF-8"))?;
        let env: EnvKind = name.parse()?;
        let spec = env.spec();
        if spec.state_dim != state_dim || spec.action_dim != action_dim {
            return Err(corrupt("dimensions do not match the named environment"));
        }
        let mut ds = Dataset::empty(env);
        let mut buf = vec![0u8; 4 * (2 * state_dim + action_dim + 1) + 1];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let vals: Vec<f64> = buf[..buf.len() - 1]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let (s, rest) = vals.split_at(state_dim);
            let (a, rest) = rest.split_at(action_dim);
            let (rew, sn) = rest.split_at(1);
            let done = match buf[buf.len() - 1] {
                0 => false,
                1 => true,
                _ => return Err(corrupt("done flag is not 0/1")),
            };
            ds.states.extend_from_slice(s);
            ds.actions.extend_from_slice(a);
            ds.rewards.push(rew[0]);
            ds.next_states.extend_from_slice(sn);
            ds.dones.push(done);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(corrupt("trailing bytes after last record"));
        }
        Ok(ds)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Concatenates seeded rollouts of `policy` until `n_transitions` records
/// have been collected.
pub fn generate_dataset(env: EnvKind, policy: DataPolicy, n_transitions: usize, seed: u64) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::Empty("dataset size"));
    }
    let spec = env.spec();
    let max_action = spec.max_action();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::empty(env);
    while ds.len() < n_transitions {
        let mut s = env.reset(&mut rng);
        for t in 0..spec.horizon {
            if ds.len() >= n_transitions {
                break;
            }
            let mut a = env.expert_action(&s);
            if let DataPolicy::NoisyExpert { sigma } = policy {
                for (ai, m) in a.iter_mut().zip(&max_action) {
                    let z: f64 = rng.sample(StandardNormal);
                    *ai += sigma * m * z;
                }
            }
            let a = spec.clip_action(&a);
            let out = env.step(&s, &a, t);
            ds.push(&Transition {
                state: s,
                action: a,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            s = out.next_state;
        }
    }
    Ok(ds)
}

/// A minibatch as dense tensors with a shared leading dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    /// `1 − done`, shaped `[B, 1]`.
    pub not_done: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_indices(ds: &Dataset, idx: &[usize]) -> Result<Batch> {
        if ds.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let b = idx.len();
        let mut s = Vec::with_capacity(b * ds.state_dim);
        let mut a = Vec::with_capacity(b * ds.action_dim);
        let mut r = Vec::with_capacity(b);
        let mut sn = Vec::with_capacity(b * ds.state_dim);
        let mut nd = Vec::with_capacity(b);
        for &i in idx {
            s.extend_from_slice(ds.state(i));
            a.extend_from_slice(ds.action(i));
            r.push(ds.rewards[i]);
            sn.extend_from_slice(ds.next_state(i));
            nd.push(if ds.dones[i] { 0.0 } else { 1.0 });
        }
        Ok(Batch {
            states: Tensor::matrix(b, ds.state_dim, s)?,
            actions: Tensor::matrix(b, ds.action_dim, a)?,
            rewards: Tensor::matrix(b, 1, r)?,
            next_states: Tensor::matrix(b, ds.state_dim, sn)?,
            not_done: Tensor::matrix(b, 1, nd)?,
        })
    }
}

/// Source of dataset indices for minibatch sampling.
pub trait IndexSampler {
    fn next_index(&mut self, n: usize) -> usize;
}

impl<R: RngCore> IndexSampler for R {
    fn next_index(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }
}

/// Uniform sampling with replacement.
pub fn sample_batch(ds: &Dataset, batch_size: usize, sampler: &mut impl IndexSampler) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} must be in 1..={}",
            ds.len()
        )));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| sampler.next_index(ds.len())).collect();
    Batch::from_indices(ds, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Sequential(usize);

    impl IndexSampler for Sequential {
        fn next_index(&mut self, n: usize) -> usize {
            let i = self.0 % n;
            self.0 += 1;
            i
        }
    }

    fn bytes(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        ds.write_to(&mut out).unwrap();
        out
    }

    #[test]
    fn one_episode_ends_done() {
        let ds = generate_dataset(EnvKind::PointMass, DataPolicy::Expert, 100, 0).unwrap();
        assert_eq!(ds.len(), 100);
        assert!(ds.dones[99]);
        assert_eq!(ds.dones.iter().filter(|&&d| d).count(), 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let p = DataPolicy::NoisyExpert { sigma: 0.05 };
        let a = generate_dataset(EnvKind::Pendulum, p, 450, 9).unwrap();
        let b = generate_dataset(EnvKind::Pendulum, p, 450, 9).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_dataset(EnvKind::Pendulum, p, 450, 10).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn noiseless_actions_are_expert_actions() {
        let ds = generate_dataset(EnvKind::PointMass, DataPolicy::Expert, 300, 4).unwrap();
        for i in 0..ds.len() {
            // states were rounded to f32 after the action was chosen, so
            // recompute with loose tolerance
            let a = crate::env::point_mass_expert(ds.state(i));
            for (x, y) in a.iter().zip(ds.action(i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stored_actions_in_bounds_and_rewards_finite() {
        for env in [EnvKind::PointMass, EnvKind::Pendulum] {
            let ds = generate_dataset(env, DataPolicy::NoisyExpert { sigma: 0.5 }, 500, 1).unwrap();
            let spec = env.spec();
            for i in 0..ds.len() {
                for (d, &a) in ds.action(i).iter().enumerate() {
                    assert!(a >= spec.action_low[d] && a <= spec.action_high[d]);
                }
                assert!(ds.rewards[i].is_finite());
            }
        }
    }

    #[test]
    fn round_trip_and_truncation() {
        let ds = generate_dataset(EnvKind::PointMass, DataPolicy::NoisyExpert { sigma: 0.05 }, 150, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.srld");
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);

        let raw = std::fs::read(&path).unwrap();
        let header = 4 + 4 + 4 + 4 + 8 + 2 + "point-mass".len();
        assert_eq!(raw.len(), header + 150 * (4 * (6 + 2 + 1 + 6) + 1));
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Corrupt { .. })));

        let mut bad = raw.clone();
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn sequential_sampler_returns_everything() {
        let ds = generate_dataset(EnvKind::PointMass, DataPolicy::Expert, 40, 0).unwrap();
        let b = sample_batch(&ds, 40, &mut Sequential(0)).unwrap();
        assert_eq!(b.states.data(), ds.states.as_slice());
        assert_eq!(b.actions.data(), ds.actions.as_slice());
    }

    #[test]
    fn seeded_draws_repeat() {
        let ds = generate_dataset(EnvKind::PointMass, DataPolicy::Expert, 40, 0).unwrap();
        let a = sample_batch(&ds, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&ds, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&ds, 41, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
        assert!(sample_batch(&Dataset::empty(EnvKind::PointMass), 1, &mut Sequential(0)).is_err());
    }

    #[test]
    fn index_zero_frequency_is_uniform() {
        let n = 50usize;
        let draws = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let hits = (0..draws).filter(|_| rng.next_index(n) == 0).count() as f64;
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - mean).abs() <= 3.0 * sd, "hits {hits}, expected {mean} ± {}", 3.0 * sd);
    }
}
