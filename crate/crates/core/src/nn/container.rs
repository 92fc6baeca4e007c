//! The `SSTW` binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSTW" | version: u32 | layer count: u32
//! per layer: kind tag: u8 | parameter block | tensors
//!   convolution (0): filters u32, height u32, width u32, padding u8 (0 valid, 1 same)
//!   max pool    (1): height u32, width u32
//!   dense       (2): units u32
//!   flatten (3), sigmoid (4), relu (5): no parameters
//! convolution and dense layers are followed by the weight then bias tensor,
//! each as rank: u32, extents: u32 × rank, values: f64 × product(extents).
//! ```

use super::layer::{Layer, LayerConfig};
use super::ops::Padding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSTW";
pub const VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_POOL: u8 = 1;
const TAG_DENSE: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_SIGMOID: u8 = 4;
const TAG_RELU: u8 = 5;

pub fn encode_layers(layers: &[Layer]) -> Vec<u8> {
    let payload: usize = layers.iter().map(|l| l.parameter_count() * 8 + 64).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, layers.len() as u32);
    for layer in layers {
        match layer.config() {
            LayerConfig::Convolution {
                filters,
                height,
                width,
                padding,
            } => {
                out.push(TAG_CONV);
                put_u32(&mut out, filters as u32);
                put_u32(&mut out, height as u32);
                put_u32(&mut out, width as u32);
                out.push(match padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
            }
            LayerConfig::MaxPool { height, width } => {
                out.push(TAG_POOL);
                put_u32(&mut out, height as u32);
                put_u32(&mut out, width as u32);
            }
            LayerConfig::Dense { units } => {
                out.push(TAG_DENSE);
                put_u32(&mut out, units as u32);
            }
            LayerConfig::Flatten => out.push(TAG_FLATTEN),
            LayerConfig::Sigmoid => out.push(TAG_SIGMOID),
            LayerConfig::Relu => out.push(TAG_RELU),
        }
        if let Some((w, b)) = layer.params() {
            put_tensor(&mut out, w);
            put_tensor(&mut out, b);
        }
    }
    out
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<Layer>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Load("not an SSTW weight container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Load(format!(
            "unsupported SSTW version {version} (this reader handles {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8()?;
        let config = match tag {
            TAG_CONV => LayerConfig::Convolution {
                filters: r.u32()? as usize,
                height: r.u32()? as usize,
                width: r.u32()? as usize,
                padding: match r.u8()? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    p => return Err(Error::Load(format!("layer {i}: unknown padding code {p}"))),
                },
            },
            TAG_POOL => LayerConfig::MaxPool {
                height: r.u32()? as usize,
                width: r.u32()? as usize,
            },
            TAG_DENSE => LayerConfig::Dense {
                units: r.u32()? as usize,
            },
            TAG_FLATTEN => LayerConfig::Flatten,
            TAG_SIGMOID => LayerConfig::Sigmoid,
            TAG_RELU => LayerConfig::Relu,
            t => return Err(Error::Load(format!("layer {i}: unknown kind tag {t}"))),
        };
        let params = match config {
            LayerConfig::Convolution { .. } | LayerConfig::Dense { .. } => Some((r.tensor()?, r.tensor()?)),
            _ => None,
        };
        let layer = Layer::from_config(config, params).map_err(|e| Error::Load(format!("layer {i}: {e}")))?;
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Load(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    Ok(layers)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u32(out, e as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load(format!("container truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Load(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Load("tensor size overflows".into()))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Load("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Load(e.to_string()))
    }
}
