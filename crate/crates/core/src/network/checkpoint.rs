//! Binary checkpoints: magic, JSON header, then little-endian buffers.
//!
//! Layout: `CSEGCKPT`, u32 format version, u64 header length, the header
//! (compact JSON), then every parameter in declaration order followed by
//! the running mean and variance of every normalization layer.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::BnState;
use crate::network::config::NetworkConfig;
use crate::network::model::Network;
use crate::tensor_core::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to resume its stream exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    features: usize,
    momentum: f64,
    eps: f64,
    updates: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config_hash: String,
    epoch: usize,
    rng: Option<RngState>,
    init_seed: u64,
    config: NetworkConfig,
    params: Vec<ParamEntry>,
    bn: Vec<BnEntry>,
}

/// A network snapshot plus the training position it was taken at.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub network: Network<T>,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(network: Network<T>, epoch: usize, rng: Option<RngState>) -> Self {
        Self {
            network,
            epoch,
            rng,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let header = Header {
            dtype: T::DTYPE.into(),
            config_hash: net.config().hash(),
            epoch: self.epoch,
            rng: self.rng,
            init_seed: net.init_record().seed,
            config: net.config().clone(),
            params: net
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            bn: net
                .bn_states()
                .iter()
                .map(|s| BnEntry {
                    features: s.features(),
                    momentum: s.momentum,
                    eps: s.eps,
                    updates: s.updates,
                })
                .collect(),
        };
        let head = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for p in net.params() {
            p.value.data().iter().for_each(|v| v.write_le(&mut out));
        }
        for s in net.bn_states() {
            s.running_mean.iter().for_each(|v| v.write_le(&mut out));
            s.running_var.iter().for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let head_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(head_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {}, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }

        let expected: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .chain(header.bn.iter().map(|b| 2 * b.features))
            .sum::<usize>()
            * T::BYTES;
        let body = &bytes[body_start..];
        if body.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint body holds {} bytes, expected {expected}",
                body.len()
            )));
        }

        let mut network = Network::<T>::build(&header.config, header.init_seed)?;
        let mut cursor = body.chunks_exact(T::BYTES).map(T::read_le);
        let mut take = |n: usize| -> Vec<T> { cursor.by_ref().take(n).collect() };
        let mut params = Vec::with_capacity(header.params.len());
        for (entry, p) in header.params.iter().zip(network.params()) {
            if entry.name != p.name {
                return Err(Error::Format(format!(
                    "parameter '{}' found where '{}' was expected",
                    entry.name, p.name
                )));
            }
            let n = entry.shape.iter().product();
            params.push(Tensor::from_vec(&entry.shape, take(n))?);
        }
        let bn = header
            .bn
            .iter()
            .map(|b| BnState {
                running_mean: take(b.features),
                running_var: take(b.features),
                momentum: b.momentum,
                eps: b.eps,
                updates: b.updates,
            })
            .collect();
        network.set_state(params, bn)?;
        Ok(Self {
            network,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
