//! Binary checkpoints: `DODC`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in
//! manifest order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::train::{AdamState, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DODC";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

const PARAMS: &str = "params/";
const EMA: &str = "ema/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

/// ChaCha position; `word_pos` is a decimal string because it is a `u128`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config_fingerprint: String,
    pub model: Option<ModelConfig>,
    pub step: u64,
    pub adam_step: u64,
    pub rng: Option<RngState>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
}

impl Checkpoint {
    /// Named tensors with a manifest laid out back to back.
    pub fn new(
        config_fingerprint: String,
        model: Option<ModelConfig>,
        step: u64,
        named: Vec<(String, Tensor<f32>)>,
    ) -> Self {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
            tensors.push(t);
        }
        Self {
            header: Header {
                format_version: FORMAT_VERSION,
                config_fingerprint,
                model,
                step,
                adam_step: 0,
                rng: None,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse and check the manifest against the payload.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        if bytes.len() < PREFIX_LEN {
            return Err(Error::TruncatedPayload {
                expected: PREFIX_LEN,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[PREFIX_LEN..];
        let hlen = usize::try_from(hlen).ok().filter(|&h| h <= body.len()).ok_or(Error::TruncatedPayload {
            expected: PREFIX_LEN.saturating_add(usize::try_from(hlen).unwrap_or(usize::MAX)),
            found: bytes.len(),
        })?;
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Checkpoint(format!(
                "header version {} disagrees with prefix version {version}",
                header.format_version
            )));
        }
        let payload = &body[hlen..];
        let mut expected_offset = 0usize;
        for e in &header.tensors {
            let n = numel(&e.shape)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is too large", e.name)))?;
            if e.offset != expected_offset as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {} but the previous tensor ends at {expected_offset}",
                    e.name, e.offset
                )));
            }
            expected_offset = expected_offset
                .checked_add(n)
                .ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?;
        }
        if payload.len() < expected_offset {
            return Err(Error::TruncatedPayload {
                expected: expected_offset,
                found: payload.len(),
            });
        }
        if payload.len() > expected_offset {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected_offset
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let n = numel(&e.shape).expect("checked above");
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    fn group(&self, prefix: &str) -> Vec<(&str, &Tensor<f32>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter_map(|(e, t)| e.name.strip_prefix(prefix).map(|n| (n, t)))
            .collect()
    }

    /// Rebuild a store from the `prefix` group, checking it against `layout`.
    fn store_like(&self, prefix: &str, layout: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let group = self.group(prefix);
        if group.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix} holds {} tensors, the model has {}",
                group.len(),
                layout.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((name, t), (_, want, w)) in group.into_iter().zip(layout.iter()) {
            if name != want || t.shape() != w.shape() {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {prefix}{name} {:?} does not match model parameter {want} {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
            store.add(name, t.clone());
        }
        Ok(store)
    }

    /// Parameters only, laid out like `layout`.
    pub fn params(&self, layout: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        self.store_like(PARAMS, layout)
    }

    pub fn ema(&self, layout: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        self.store_like(EMA, layout)
    }

    /// Full training state: parameters, EMA, moments and rng.
    pub fn from_train_state(state: &TrainState<f32>, model: &ModelConfig, fingerprint: String) -> Self {
        let mut named = Vec::new();
        for (prefix, store) in [(PARAMS, &state.params), (EMA, &state.ema)] {
            for (_, n, t) in store.iter() {
                named.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        for (prefix, moments) in [(ADAM_M, &state.adam.m), (ADAM_V, &state.adam.v)] {
            for ((_, n, _), t) in state.params.iter().zip(moments) {
                named.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        let mut ck = Self::new(fingerprint, Some(model.clone()), state.step, named);
        ck.header.adam_step = state.adam.t;
        ck.header.rng = Some(RngState::capture(&state.rng));
        ck
    }

    pub fn train_state(&self, layout: &ParamStore<f32>) -> Result<TrainState<f32>> {
        let moments = |prefix| -> Result<Vec<Tensor<f32>>> {
            Ok(self.store_like(prefix, layout)?.iter().map(|(_, _, t)| t.clone()).collect())
        };
        let rng = self
            .header
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no rng state; not a training checkpoint".into()))?
            .restore()?;
        Ok(TrainState {
            params: self.params(layout)?,
            ema: self.ema(layout)?,
            adam: AdamState {
                m: moments(ADAM_M)?,
                v: moments(ADAM_V)?,
                t: self.header.adam_step,
            },
            step: self.header.step,
            rng,
        })
    }

    /// Plain store of every tensor under `prefix` (no layout check).
    pub fn named_store(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (n, t) in self.group(prefix) {
            store.add(n, t.clone());
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            "abc".into(),
            None,
            7,
            vec![
                ("params/a".into(), Tensor::from_f64([2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap()),
                ("params/b".into(), Tensor::from_f64([3], &[0.0, 1e-8, -7.0]).unwrap()),
            ],
        )
    }

    #[test]
    fn encode_decode_encode_is_identity() {
        let bytes = sample().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn explicit_errors() {
        let bytes = sample().encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("not a checkpoint"));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::decode(&newer), Err(Error::UnsupportedVersion { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(9);
        let _: [u64; 5] = rng.random();
        let mut back = RngState::capture(&rng).restore().unwrap();
        assert_eq!(back.random::<u64>(), rng.random::<u64>());
    }
}
