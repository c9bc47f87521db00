//! Versioned on-disk artifacts: run checkpoints and pretrained base weights.
//!
//! Float arrays are embedded as base64 of little-endian `f64` bytes next to
//! an explicit shape. A checkpoint wraps its payload in an envelope carrying
//! the format version, the run-config hash and a SHA-256 of the payload's
//! canonical JSON, so truncation or tampering is detected before any state is
//! returned.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::run_config_hash;
use crate::error::{Error, Result};
use crate::model::{AdapterParams, BaseWeights};
use crate::orchestrator::{Federation, RoundRecord, RunConfig, UnlearnRequest};
use crate::params::FlatParams;
use crate::server::{Algorithm, ServerHyper, ServerOptState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const BASE_FORMAT_VERSION: u32 = 1;
pub const ADAPTER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    /// Base64 of the little-endian `f64` bytes, row-major.
    pub data: String,
}

impl EncodedArray {
    pub fn encode(shape: Vec<usize>, values: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
        EncodedArray {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Integrity(format!("bad base64 array: {e}")))?;
        let expected = self.shape.iter().product::<usize>();
        if bytes.len() != expected * 8 {
            return Err(Error::Integrity(format!(
                "array of shape {:?} needs {} bytes, found {}",
                self.shape,
                expected * 8,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterBlob {
    vocab: usize,
    rank: usize,
    alpha: f64,
    scaling: bool,
    a: EncodedArray,
    b: EncodedArray,
}

impl AdapterBlob {
    fn from_adapter(ad: &AdapterParams) -> Self {
        let (v, r) = (ad.vocab(), ad.rank());
        AdapterBlob {
            vocab: v,
            rank: r,
            alpha: ad.alpha(),
            scaling: ad.scaling(),
            a: EncodedArray::encode(vec![v, r], ad.a()),
            b: EncodedArray::encode(vec![r, v], ad.b()),
        }
    }

    fn to_adapter(&self) -> Result<AdapterParams> {
        let (v, r) = (self.vocab, self.rank);
        if self.a.shape != [v, r] || self.b.shape != [r, v] {
            return Err(Error::Integrity(format!(
                "adapter shapes {:?} / {:?} do not match header {v}x{r}",
                self.a.shape, self.b.shape
            )));
        }
        let mut flat = self.a.decode()?;
        flat.extend(self.b.decode()?);
        AdapterParams::from_flat(v, r, self.alpha, self.scaling, FlatParams(flat))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ServerBlob {
    algorithm: Algorithm,
    round_index: u64,
    hyper: ServerHyper,
    uniform_weights: bool,
    m: Option<EncodedArray>,
    v: Option<EncodedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Payload {
    master_seed: u64,
    global: AdapterBlob,
    server: ServerBlob,
    excluded: Vec<Vec<bool>>,
    ledger: Vec<UnlearnRequest>,
    pending: VecDeque<UnlearnRequest>,
    records: Vec<RoundRecord>,
    unlearn_executions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub run_config_hash: String,
    pub round: u64,
    pub payload_sha256: String,
    payload: Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_digest(payload: &Value) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(payload)?))
}

impl Checkpoint {
    pub fn capture(fed: &Federation, cfg: &RunConfig) -> Result<Self> {
        let enc = |p: &Option<FlatParams>| p.as_ref().map(|x| EncodedArray::encode(vec![x.len()], x));
        let payload = Payload {
            master_seed: cfg.master_seed,
            global: AdapterBlob::from_adapter(&fed.global),
            server: ServerBlob {
                algorithm: fed.server.algorithm,
                round_index: fed.server.round_index,
                hyper: fed.server.hyper,
                uniform_weights: fed.server.uniform_weights,
                m: enc(&fed.server.m),
                v: enc(&fed.server.v),
            },
            excluded: fed.excluded.clone(),
            ledger: fed.ledger.clone(),
            pending: fed.pending.clone(),
            records: fed.records.clone(),
            unlearn_executions: fed.unlearn_executions,
        };
        let payload = serde_json::to_value(payload)?;
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            run_config_hash: run_config_hash(cfg),
            round: fed.round,
            payload_sha256: payload_digest(&payload)?,
            payload,
        })
    }

    /// Rebuilds the federation. The run config must hash to the value the
    /// checkpoint was taken under.
    pub fn restore(&self, cfg: &RunConfig) -> Result<Federation> {
        let hash = run_config_hash(cfg);
        if hash != self.run_config_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was taken under run config {} but {} was supplied",
                self.run_config_hash, hash
            )));
        }
        let p: Payload = serde_json::from_value(self.payload.clone())
            .map_err(|e| Error::Integrity(format!("malformed payload: {e}")))?;
        let dec = |a: &Option<EncodedArray>| -> Result<Option<FlatParams>> {
            a.as_ref().map(|x| x.decode().map(FlatParams)).transpose()
        };
        let global = p.global.to_adapter()?;
        let server = ServerOptState {
            algorithm: p.server.algorithm,
            m: dec(&p.server.m)?,
            v: dec(&p.server.v)?,
            round_index: p.server.round_index,
            hyper: p.server.hyper,
            uniform_weights: p.server.uniform_weights,
        };
        server.validate()?;
        for buf in [&server.m, &server.v].into_iter().flatten() {
            if buf.len() != global.num_params() {
                return Err(Error::Integrity("optimizer buffer length differs from adapter".into()));
            }
        }
        Ok(Federation {
            global,
            server,
            excluded: p.excluded,
            ledger: p.ledger,
            pending: p.pending,
            round: self.round,
            records: p.records,
            unlearn_executions: p.unlearn_executions,
            wall_clock_secs: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable checkpoint: {e}")))?;
        match value.get("format_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Incompatible(format!(
                    "checkpoint format version {v}, this build reads {CHECKPOINT_FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Integrity("checkpoint has no format_version".into())),
        }
        let ck: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Integrity(format!("malformed checkpoint: {e}")))?;
        let digest = payload_digest(&ck.payload)?;
        if digest != ck.payload_sha256 {
            return Err(Error::Integrity(format!(
                "payload checksum {digest} does not match recorded {}",
                ck.payload_sha256
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdapterFile {
    format_version: u32,
    adapter: AdapterBlob,
}

pub fn adapter_to_json(adapter: &AdapterParams) -> Result<String> {
    Ok(serde_json::to_string(&AdapterFile {
        format_version: ADAPTER_FORMAT_VERSION,
        adapter: AdapterBlob::from_adapter(adapter),
    })?)
}

pub fn adapter_from_json(text: &str) -> Result<AdapterParams> {
    let f: AdapterFile = serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable adapter: {e}")))?;
    if f.format_version != ADAPTER_FORMAT_VERSION {
        return Err(Error::Incompatible(format!("adapter format version {}", f.format_version)));
    }
    f.adapter.to_adapter()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BaseFile {
    format_version: u32,
    vocab: usize,
    weights: EncodedArray,
}

pub fn base_to_json(base: &BaseWeights) -> Result<String> {
    let v = base.vocab();
    Ok(serde_json::to_string(&BaseFile {
        format_version: BASE_FORMAT_VERSION,
        vocab: v,
        weights: EncodedArray::encode(vec![v, v], base.data()),
    })?)
}

pub fn base_from_json(text: &str) -> Result<BaseWeights> {
    let f: BaseFile = serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable base weights: {e}")))?;
    if f.format_version != BASE_FORMAT_VERSION {
        return Err(Error::Incompatible(format!("base weights format version {}", f.format_version)));
    }
    if f.weights.shape != [f.vocab, f.vocab] {
        return Err(Error::Integrity(format!("base weights shape {:?} for vocab {}", f.weights.shape, f.vocab)));
    }
    BaseWeights::new(f.vocab, f.weights.decode()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_roundtrip_is_bit_exact() {
        let xs = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, std::f64::consts::PI];
        let enc = EncodedArray::encode(vec![2, 3], &xs);
        let back = enc.decode().unwrap();
        assert_eq!(xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let bad = EncodedArray { shape: vec![7], ..enc };
        assert!(matches!(bad.decode(), Err(Error::Integrity(_))));
    }

    #[test]
    fn base_file_roundtrip() {
        let base = BaseWeights::new(8, (0..64).map(|i| i as f64 * 0.37 - 3.0).collect()).unwrap();
        assert_eq!(base_from_json(&base_to_json(&base).unwrap()).unwrap(), base);
    }
}
