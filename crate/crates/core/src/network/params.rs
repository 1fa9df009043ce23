//! Named parameter tensors, seeded initialization and the EVP1 file format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::ModelConfig;
use super::tensor::Tensor;
use super::NetworkError;

pub const EVP1_MAGIC: [u8; 4] = *b"EVP1";
/// Upper bounds applied while decoding untrusted parameter files.
const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 8;

/// Every learnable tensor of the model, keyed by a stable dotted name.
///
/// One set exists per pyramid level; all time steps read the same values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Fan-in scaled uniform weights, zero biases, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = config.init_gain * (3.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(&shape, data)
            };
            params.insert(name, t);
        }
        params
    }

    /// Fails unless every tensor the config expects is present with the right shape.
    pub fn check(&self, config: &ModelConfig) -> Result<(), NetworkError> {
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            match self.get(name) {
                None => return Err(NetworkError::Params(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(NetworkError::Params(format!("{name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                _ => {}
            }
        }
        if self.len() != expected.len() {
            return Err(NetworkError::Params(format!("{} tensors, expected {}", self.len(), expected.len())));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// EVP1 bytes: magic, u32 tensor count, then per tensor
    /// `u32 name_len, name, u32 rank, u32 extents.., f32 data..`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&EVP1_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NetworkError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != EVP1_MAGIC {
            return Err(NetworkError::Params("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(NetworkError::Params(format!("name length {name_len}")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| NetworkError::Params(e.to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(NetworkError::Params(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let e = r.u32()? as usize;
                n = n.saturating_mul(e as u64);
                shape.push(e);
            }
            // Reject before allocating: the data must actually be present.
            if n.saturating_mul(4) > r.remaining() as u64 {
                return Err(NetworkError::Params(format!("{name}: truncated data")));
            }
            let data = r
                .take(n as usize * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::Params(format!("{name}: non-finite value")));
            }
            if params.tensors.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
                return Err(NetworkError::Params(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(NetworkError::Params(format!("{} trailing bytes", r.remaining())));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Values rounded through `f32`, i.e. exactly what a save/load round trip yields.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if n > self.remaining() {
            return Err(NetworkError::Params("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
