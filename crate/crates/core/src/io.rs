//! Binary model container.
//!
//! ```text
//! "LMK1" | header_len: u32 LE | header (JSON, header_len bytes) | payload
//! ```
//!
//! The header lists the block sequence and a manifest of tensors in payload
//! order. Tensors are raw little-endian `f64` or `f32`, row-major; lmKAN
//! coefficients are stored `[i1][i2][pair][out]`. A CRC-32 of the payload is
//! kept in the header. With `f64` storage a round trip is bitwise; `f32`
//! storage rounds every tensor value to single precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batchnorm::{Affine, BatchNorm, BatchNormState};
use crate::error::{Error, Result};
use crate::layer::LmKanLayer;
use crate::linear::Linear;
use crate::model::{Activation, Block, Model};
use crate::precond::{PrecondBlock, PrecondMode};

pub const MAGIC: &[u8; 4] = b"LMK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormDesc {
    dim: usize,
    momentum: f64,
    epsilon: f64,
    batches_tracked: u64,
    affine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum BlockDesc {
    Norm {
        norm: NormDesc,
    },
    Lmkan {
        n_in: usize,
        n_out: usize,
        grid: usize,
        gamma: f64,
        precond: PrecondMode,
        norm: Option<NormDesc>,
    },
    Dense {
        n_in: usize,
        n_out: usize,
        activation: Activation,
        norm: Option<NormDesc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: DType,
    blocks: Vec<BlockDesc>,
    tensors: Vec<TensorEntry>,
    payload_crc32: u32,
}

struct Writer {
    dtype: DType,
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        for &v in data {
            match self.dtype {
                DType::F64 => self.payload.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => self.payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        self.entries.push(TensorEntry {
            name,
            shape,
            bytes: data.len() * self.dtype.width(),
        });
    }

    fn push_norm(&mut self, prefix: &str, bn: &BatchNorm) -> NormDesc {
        let d = bn.dim();
        self.push(format!("{prefix}.running_mean"), vec![d], &bn.state.running_mean);
        self.push(format!("{prefix}.running_var"), vec![d], &bn.state.running_var);
        if let Some(a) = &bn.affine {
            self.push(format!("{prefix}.weight"), vec![d], &a.weight);
            self.push(format!("{prefix}.bias"), vec![d], &a.bias);
        }
        NormDesc {
            dim: d,
            momentum: bn.state.momentum,
            epsilon: bn.state.epsilon,
            batches_tracked: bn.state.batches_tracked,
            affine: bn.affine.is_some(),
        }
    }

    fn push_linear(&mut self, prefix: &str, lin: &Linear) {
        self.push(format!("{prefix}.weight"), vec![lin.n_out(), lin.n_in()], lin.weight());
        self.push(format!("{prefix}.bias"), vec![lin.n_out()], lin.bias());
    }
}

/// Serializes `model` to bytes.
pub fn encode_model(model: &Model, dtype: DType) -> Result<Vec<u8>> {
    let mut w = Writer {
        dtype,
        entries: Vec::new(),
        payload: Vec::new(),
    };
    let mut blocks = Vec::new();
    for (k, b) in model.blocks().iter().enumerate() {
        let prefix = format!("blocks.{k}");
        blocks.push(match b {
            Block::Norm(bn) => BlockDesc::Norm {
                norm: w.push_norm(&format!("{prefix}.norm"), bn),
            },
            Block::LmKan { block, norm } => {
                let layer = &block.layer;
                let n = layer.grid().nodes();
                w.push(
                    format!("{prefix}.coefficients"),
                    vec![n, n, layer.pairs(), layer.n_out()],
                    layer.params(),
                );
                if let Some(lin) = &block.linear {
                    w.push_linear(&format!("{prefix}.branch"), lin);
                }
                BlockDesc::Lmkan {
                    n_in: layer.n_in(),
                    n_out: layer.n_out(),
                    grid: layer.grid().intervals(),
                    gamma: layer.gamma(),
                    precond: block.mode(),
                    norm: norm.as_ref().map(|bn| w.push_norm(&format!("{prefix}.norm"), bn)),
                }
            }
            Block::Dense {
                linear,
                norm,
                activation,
            } => {
                w.push_linear(&format!("{prefix}.linear"), linear);
                BlockDesc::Dense {
                    n_in: linear.n_in(),
                    n_out: linear.n_out(),
                    activation: *activation,
                    norm: norm.as_ref().map(|bn| w.push_norm(&format!("{prefix}.norm"), bn)),
                }
            }
        });
    }
    let header = Header {
        version: VERSION,
        dtype,
        blocks,
        tensors: w.entries,
        payload_crc32: crc32fast::hash(&w.payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

struct Reader<'a> {
    dtype: DType,
    entries: std::slice::Iter<'a, TensorEntry>,
    payload: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| Error::Format(format!("manifest ends before tensor '{name}'")))?;
        if e.name != name || e.shape != shape {
            return Err(Error::Format(format!(
                "manifest entry '{}' {:?} does not match expected '{name}' {:?}",
                e.name, e.shape, shape
            )));
        }
        let count: usize = shape.iter().product();
        let width = self.dtype.width();
        if e.bytes != count * width {
            return Err(Error::Format(format!(
                "tensor '{name}' declares {} bytes, shape needs {}",
                e.bytes,
                count * width
            )));
        }
        let end = self.pos + e.bytes;
        let raw = self
            .payload
            .get(self.pos..end)
            .ok_or_else(|| Error::Corrupt(format!("payload truncated inside tensor '{name}'")))?;
        self.pos = end;
        Ok(match self.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        })
    }

    fn norm(&mut self, prefix: &str, d: &NormDesc) -> Result<BatchNorm> {
        let mean = self.take(&format!("{prefix}.running_mean"), &[d.dim])?;
        let var = self.take(&format!("{prefix}.running_var"), &[d.dim])?;
        let affine = if d.affine {
            Some(Affine {
                weight: self.take(&format!("{prefix}.weight"), &[d.dim])?,
                bias: self.take(&format!("{prefix}.bias"), &[d.dim])?,
            })
        } else {
            None
        };
        Ok(BatchNorm {
            state: BatchNormState {
                dim: d.dim,
                running_mean: mean,
                running_var: var,
                momentum: d.momentum,
                epsilon: d.epsilon,
                batches_tracked: d.batches_tracked,
            },
            affine,
        })
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> Result<Linear> {
        let w = self.take(&format!("{prefix}.weight"), &[n_out, n_in])?;
        let b = self.take(&format!("{prefix}.bias"), &[n_out])?;
        Linear::from_parts(n_in, n_out, w, b)
    }
}

fn format_err(e: Error) -> Error {
    match e {
        Error::Format(_) | Error::Corrupt(_) => e,
        other => Error::Format(other.to_string()),
    }
}

/// Parses a model from bytes. Nothing is returned unless the whole file is valid.
pub fn decode_model(bytes: &[u8]) -> Result<(Model, DType)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an LMK1 file".into()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(4..8)
        .ok_or_else(|| Error::Corrupt("file ends inside the header length".into()))?
        .try_into()
        .expect("4 bytes");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Corrupt(format!("file ends inside the {header_len}-byte header")))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {VERSION}",
            header.version
        )));
    }
    let payload = &bytes[8 + header_len..];
    let declared: usize = header.tensors.iter().map(|t| t.bytes).sum();
    if payload.len() < declared {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes, manifest declares {declared}",
            payload.len()
        )));
    }
    if payload.len() > declared {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the declared payload",
            payload.len() - declared
        )));
    }
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(Error::Corrupt("payload checksum mismatch".into()));
    }
    let mut r = Reader {
        dtype: header.dtype,
        entries: header.tensors.iter(),
        payload,
        pos: 0,
    };
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for (k, desc) in header.blocks.iter().enumerate() {
        let prefix = format!("blocks.{k}");
        blocks.push(match desc {
            BlockDesc::Norm { norm } => Block::Norm(r.norm(&format!("{prefix}.norm"), norm)?),
            BlockDesc::Lmkan {
                n_in,
                n_out,
                grid,
                gamma,
                precond,
                norm,
            } => {
                if *n_in % 2 != 0 || *grid < 3 {
                    return Err(Error::Format(format!(
                        "block {k}: invalid lmKAN layer ({n_in} inputs, G = {grid})"
                    )));
                }
                let n = grid + 1;
                let params = r.take(&format!("{prefix}.coefficients"), &[n, n, n_in / 2, *n_out])?;
                let layer = LmKanLayer::from_params(*n_in, *n_out, *grid, params, *gamma).map_err(format_err)?;
                let linear = if precond.has_branch() {
                    Some(r.linear(&format!("{prefix}.branch"), *n_in, *n_out)?)
                } else {
                    None
                };
                let block = PrecondBlock::new(layer, linear, *precond).map_err(format_err)?;
                let norm = match norm {
                    Some(d) => Some(r.norm(&format!("{prefix}.norm"), d)?),
                    None => None,
                };
                Block::LmKan { block, norm }
            }
            BlockDesc::Dense {
                n_in,
                n_out,
                activation,
                norm,
            } => {
                let linear = r.linear(&format!("{prefix}.linear"), *n_in, *n_out)?;
                let norm = match norm {
                    Some(d) => Some(r.norm(&format!("{prefix}.norm"), d)?),
                    None => None,
                };
                Block::Dense {
                    linear,
                    norm,
                    activation: *activation,
                }
            }
        });
    }
    if r.entries.next().is_some() {
        return Err(Error::Format("manifest lists tensors no block uses".into()));
    }
    let model = Model::new(blocks).map_err(format_err)?;
    Ok((model, header.dtype))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    fs::write(path, encode_model(model, dtype)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(decode_model(&fs::read(path)?)?.0)
}
