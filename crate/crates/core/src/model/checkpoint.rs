//! Flat binary checkpoint.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  "CHWVCKPT"
//! version      u32      1
//! seed         u64
//! input        u32 x 3  channels, height, width
//! layer count  u32
//! per layer:
//!   kind       u8       0 = conv, 1 = dense
//!   shape      u32 x 5  conv: kernel_h, kernel_w, in, out, stride
//!              u32 x 2  dense: inputs, outputs
//!   activation u8       0 = none, 1 = relu
//!   frozen     u8       0 or 1
//!   weights    u64 count, then f64 values
//!   bias       u64 count, then f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{Activation, LayerKind, LayerSpec, Model, ModelError, Result, Shape};

const MAGIC: &[u8; 8] = b"CHWVCKPT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `model` into checkpoint bytes.
pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * model.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    let input = model.input_shape();
    for v in [input.channels, input.height, input.width] {
        put_u32(&mut buf, v);
    }
    put_u32(&mut buf, model.layers.len());
    for layer in &model.layers {
        match layer.spec.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                buf.push(0);
                for v in [kernel_h, kernel_w, in_channels, out_channels, stride] {
                    put_u32(&mut buf, v);
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                buf.push(1);
                put_u32(&mut buf, inputs);
                put_u32(&mut buf, outputs);
            }
        }
        buf.push(match layer.spec.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        buf.push(u8::from(layer.spec.frozen));
        put_f64s(&mut buf, &layer.weights);
        put_f64s(&mut buf, &layer.bias);
    }
    buf
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
            .ok_or_else(|| ModelError::BadCheckpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = usize::try_from(self.u64()?)
            .map_err(|_| ModelError::BadCheckpoint("array length overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            ModelError::BadCheckpoint("array length overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses checkpoint bytes back into a model.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let seed = r.u64()?;
    let input = Shape::new(r.u32()?, r.u32()?, r.u32()?);
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let kind = match r.u8()? {
            0 => LayerKind::Conv {
                kernel_h: r.u32()?,
                kernel_w: r.u32()?,
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                stride: r.u32()?,
            },
            1 => LayerKind::Dense {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            tag => {
                return Err(ModelError::BadCheckpoint(format!(
                    "layer {i} has unknown kind tag {tag}"
                )))
            }
        };
        let activation = match r.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            tag => {
                return Err(ModelError::BadCheckpoint(format!(
                    "layer {i} has unknown activation tag {tag}"
                )))
            }
        };
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            tag => {
                return Err(ModelError::BadCheckpoint(format!(
                    "layer {i} has frozen flag {tag}"
                )))
            }
        };
        let weights = r.f64s()?;
        let bias = r.f64s()?;
        layers.push((
            LayerSpec {
                kind,
                activation,
                frozen,
            },
            weights,
            bias,
        ));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    Model::from_parts(input, layers, seed)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}
