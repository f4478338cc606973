//! On-disk model container.
//!
//! ```text
//! 0       4       magic "P2QM"
//! 4       4       version (1), u32 LE
//! 8       4       header length H, u32 LE
//! 12      H       UTF-8 JSON: {"config": NetworkConfig, "provenance": Provenance, "kind": "float" | "quantized"}
//!                 payload, kind "float":
//!                   tensor list: parameters, then BN running means, then running variances
//!                     u32 count; per tensor: u32 rank, rank × u32 dims, f32 LE data
//!                   thresholds: u32 count; per vector: u32 length, f64 LE values
//!                 payload, kind "quantized":
//!                   u64 length + packed weight stream ("P2QW")
//!                   u64 length + calibration sidecar ("P2QC")
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Buffers, NetworkConfig, Params};
use crate::quant::Thresholds;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"P2QM";
pub const VERSION: u32 = 1;

/// Where a model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub epochs: usize,
    pub k: usize,
    /// Training scheme name: `flexible`, `fixed` or `full-precision`.
    pub scheme: String,
    pub code_bits: u8,
    /// Test accuracy measured when the file was written.
    pub accuracy: Option<f64>,
    /// Hex SHA-256 of the run configuration that produced the model.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Float { params: Params<f32>, buffers: Buffers<f32>, thresholds: Vec<Thresholds> },
    Quantized { packed: Vec<u8>, sidecar: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub config: NetworkConfig,
    pub provenance: Provenance,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    provenance: Provenance,
    kind: String,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Encoding(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor<f32>]) -> Result<()> {
    put_u32(out, ts.len())?;
    for t in ts {
        put_u32(out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(())
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let kind = match self.payload {
            Payload::Float { .. } => "float",
            Payload::Quantized { .. } => "quantized",
        };
        let header = serde_json::to_vec(&Header { config: self.config.clone(), provenance: self.provenance.clone(), kind: kind.into() })
            .map_err(|e| Error::Encoding(e.to_string()))?;
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        match &self.payload {
            Payload::Float { params, buffers, thresholds } => {
                put_tensors(&mut out, &params.tensors)?;
                put_tensors(&mut out, &buffers.running_mean)?;
                put_tensors(&mut out, &buffers.running_var)?;
                put_u32(&mut out, thresholds.len())?;
                for t in thresholds {
                    put_u32(&mut out, t.len())?;
                    t.0.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
            Payload::Quantized { packed, sidecar } => {
                for blob in [packed, sidecar] {
                    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
                    out.extend_from_slice(blob);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Encoding("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Encoding(format!("model header: {e}")))?;
        let payload = match header.kind.as_str() {
            "float" => {
                let params = Params { tensors: r.tensors()? };
                let buffers = Buffers { running_mean: r.tensors()?, running_var: r.tensors()? };
                let thresholds = (0..r.u32()?)
                    .map(|_| {
                        let n = r.u32()? as usize;
                        (0..n).map(|_| Ok(f64::from_le_bytes(r.take(8)?.try_into().unwrap()))).collect::<Result<Vec<_>>>().map(Thresholds)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Payload::Float { params, buffers, thresholds }
            }
            "quantized" => {
                let packed = r.blob()?;
                Payload::Quantized { packed, sidecar: r.blob()? }
            }
            other => return Err(Error::Encoding(format!("unknown model kind {other:?}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Encoding(format!("{} trailing bytes after model payload", bytes.len() - r.pos)));
        }
        Ok(ModelFile { config: header.config, provenance: header.provenance, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Encoding(format!("model file truncated: need {n} bytes at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let n = usize::try_from(n).map_err(|_| Error::Encoding("blob length overflow".into()))?;
        Ok(self.take(n)?.to_vec())
    }

    fn tensors(&mut self) -> Result<Vec<Tensor<f32>>> {
        (0..self.u32()?)
            .map(|_| {
                let rank = self.u32()? as usize;
                let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Encoding("tensor size overflow".into()))?;
                let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Encoding("tensor size overflow".into()))?)?;
                let data = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(&shape, data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{preset, Network};

    fn sample() -> ModelFile {
        let net = Network::new(preset("mnist-2conv").unwrap()).unwrap();
        ModelFile {
            config: net.config().clone(),
            provenance: Provenance { seed: 3, lambda: vec![0.0, 3e-5], epochs: 1, k: 2, scheme: "flexible".into(), code_bits: 4, accuracy: Some(0.1 + 0.2), config_hash: "ab".into() },
            payload: Payload::Float {
                params: net.init_params(3),
                buffers: net.init_buffers(),
                thresholds: vec![Thresholds(vec![f64::NEG_INFINITY, 0.1 + 0.2])],
            },
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = sample();
        let bytes = m.to_bytes().unwrap();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        let err = ModelFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 0, expected: 1 }));
        assert!(err.to_string().contains('0') && err.to_string().contains('1'));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
