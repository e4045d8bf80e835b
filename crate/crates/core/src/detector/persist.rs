//! Versioned JSON model files.
//!
//! A file is an envelope `{format, version, checksum, payload}`. Float arrays
//! inside the payload are the big-endian IEEE-754 bit patterns of each value,
//! hex encoded (16 characters per value), so parameters round-trip bitwise.
//! The checksum is the SHA-256 of the payload's compact JSON serialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::network::{Architecture, BatchNorm, Dense, Network};
use super::DetectorError;

pub const MODEL_FORMAT: &str = "invariance-mlp";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    hex::encode(bytes)
}

pub fn decode_f64s(text: &str, expected: usize, what: &str) -> Result<Vec<f64>, DetectorError> {
    let bytes = hex::decode(text).map_err(|e| DetectorError::Format(format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(DetectorError::Format(format!("{what}: expected {expected} values, found {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().unwrap()))).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerRecord {
    Dense {
        in_dim: usize,
        out_dim: usize,
        weight: String,
        bias: String,
    },
    BatchNorm {
        dim: usize,
        momentum: f64,
        epsilon: f64,
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
    },
}

/// Serialized form of a [`Network`]: the architecture plus one record per
/// layer in forward order, the output head last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkRecord {
    architecture: Architecture,
    layers: Vec<LayerRecord>,
}

fn dense_record(d: &Dense) -> LayerRecord {
    LayerRecord::Dense {
        in_dim: d.in_dim,
        out_dim: d.out_dim,
        weight: encode_f64s(&d.weight),
        bias: encode_f64s(&d.bias),
    }
}

impl From<&Network> for NetworkRecord {
    fn from(net: &Network) -> Self {
        let mut layers = Vec::new();
        for block in &net.blocks {
            layers.push(dense_record(&block.dense));
            if let Some(n) = &block.norm {
                layers.push(LayerRecord::BatchNorm {
                    dim: n.dim,
                    momentum: n.momentum,
                    epsilon: n.epsilon,
                    gamma: encode_f64s(&n.gamma),
                    beta: encode_f64s(&n.beta),
                    running_mean: encode_f64s(&n.running_mean),
                    running_var: encode_f64s(&n.running_var),
                });
            }
        }
        layers.push(dense_record(&net.head));
        Self { architecture: net.arch.clone(), layers }
    }
}

impl NetworkRecord {
    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    /// Rebuilds the network, checking every layer shape against the
    /// architecture.
    pub fn to_network(&self) -> Result<Network, DetectorError> {
        let mut net = Network::zeroed(self.architecture.clone())?;
        let mut layers = self.layers.iter();
        let mismatch = |what: String| DetectorError::Architecture(what);

        fn read_dense(rec: Option<&LayerRecord>, target: &mut Dense, at: &str) -> Result<(), DetectorError> {
            match rec {
                Some(LayerRecord::Dense { in_dim, out_dim, weight, bias }) => {
                    if (*in_dim, *out_dim) != (target.in_dim, target.out_dim) {
                        return Err(DetectorError::Architecture(format!(
                            "{at}: layer is {in_dim}x{out_dim}, architecture needs {}x{}",
                            target.in_dim, target.out_dim
                        )));
                    }
                    target.weight = decode_f64s(weight, in_dim * out_dim, at)?;
                    target.bias = decode_f64s(bias, *out_dim, at)?;
                    Ok(())
                }
                _ => Err(DetectorError::Architecture(format!("{at}: expected a dense layer"))),
            }
        }

        for (i, block) in net.blocks.iter_mut().enumerate() {
            read_dense(layers.next(), &mut block.dense, &format!("hidden layer {i}"))?;
            if let Some(norm) = &mut block.norm {
                match layers.next() {
                    Some(LayerRecord::BatchNorm { dim, momentum, epsilon, gamma, beta, running_mean, running_var }) => {
                        if *dim != norm.dim {
                            return Err(mismatch(format!(
                                "batchnorm {i}: width {dim}, architecture needs {}",
                                norm.dim
                            )));
                        }
                        let at = format!("batchnorm {i}");
                        *norm = BatchNorm {
                            dim: *dim,
                            gamma: decode_f64s(gamma, *dim, &at)?,
                            beta: decode_f64s(beta, *dim, &at)?,
                            running_mean: decode_f64s(running_mean, *dim, &at)?,
                            running_var: decode_f64s(running_var, *dim, &at)?,
                            momentum: *momentum,
                            epsilon: *epsilon,
                        };
                    }
                    _ => return Err(mismatch(format!("hidden block {i}: missing batchnorm layer"))),
                }
            }
        }
        read_dense(layers.next(), &mut net.head, "output layer")?;
        if layers.next().is_some() {
            return Err(mismatch("unexpected trailing layers".into()));
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
    checksum: String,
    payload: Value,
}

fn checksum(payload: &Value) -> String {
    let text = serde_json::to_string(payload).expect("json values always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DetectorError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_string<T: Serialize>(kind: &str, payload: &T) -> Result<String, DetectorError> {
    let payload = serde_json::to_value(payload).map_err(|e| DetectorError::Format(e.to_string()))?;
    let envelope = Envelope {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind: kind.into(),
        checksum: checksum(&payload),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&envelope).map_err(|e| DetectorError::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn from_json_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T, DetectorError> {
    let envelope: Envelope = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            DetectorError::Checksum("model file is truncated".into())
        } else {
            DetectorError::Format(e.to_string())
        }
    })?;
    if envelope.format != MODEL_FORMAT {
        return Err(DetectorError::Format(format!("unknown model format {:?}", envelope.format)));
    }
    if envelope.version != MODEL_VERSION {
        return Err(DetectorError::Version { found: envelope.version, supported: MODEL_VERSION });
    }
    if envelope.kind != kind {
        return Err(DetectorError::Format(format!("expected a {kind} model, found {:?}", envelope.kind)));
    }
    let actual = checksum(&envelope.payload);
    if actual != envelope.checksum {
        return Err(DetectorError::Checksum(format!("payload hashes to {actual}, header says {}", envelope.checksum)));
    }
    serde_json::from_value(envelope.payload).map_err(|e| DetectorError::Format(e.to_string()))
}

pub fn save_json<T: Serialize>(kind: &str, payload: &T, path: &Path) -> Result<(), DetectorError> {
    atomic_write(path, to_json_string(kind, payload)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T, DetectorError> {
    let text = fs::read_to_string(path)?;
    from_json_str(kind, &text)
}
