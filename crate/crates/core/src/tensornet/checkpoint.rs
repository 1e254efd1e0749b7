//! Binary checkpoint container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      b"LWGM"
//! version    u8 (= 1)
//! input      u32 height, u32 width, u32 channels
//! classes    u32
//! layers     u32 count, then per layer: u8 tag + u32 fields
//!              1 conv   (channels, kernel, stride, padding)
//!              2 dense  (width)
//!              3 relu
//!              4 avgpool(size)
//! norm       per channel: f64 mean, f64 std
//! weights    u64 count, then f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::{GuideModel, Normalization};
use super::spec::{InputShape, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LWGM";
pub const FORMAT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(model: &GuideModel, mut w: W) -> Result<()> {
    let spec = model.spec();
    w.write_all(MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    let s = spec.input_shape;
    for v in [s.height, s.width, s.channels, spec.class_count] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_u32::<LittleEndian>(spec.layers.len() as u32)?;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                w.write_u8(1)?;
                for v in [channels, kernel, stride, padding] {
                    w.write_u32::<LittleEndian>(v as u32)?;
                }
            }
            LayerSpec::Dense { width } => {
                w.write_u8(2)?;
                w.write_u32::<LittleEndian>(width as u32)?;
            }
            LayerSpec::Relu => w.write_u8(3)?,
            LayerSpec::AvgPool { size } => {
                w.write_u8(4)?;
                w.write_u32::<LittleEndian>(size as u32)?;
            }
        }
    }
    let norm = model.normalization();
    for (m, sd) in norm.mean.iter().zip(&norm.std) {
        w.write_f64::<LittleEndian>(*m)?;
        w.write_f64::<LittleEndian>(*sd)?;
    }
    let weights = model.weights();
    w.write_u64::<LittleEndian>(weights.len() as u64)?;
    for &v in weights {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GuideModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut u32s = |n: usize| -> Result<Vec<usize>> {
        (0..n)
            .map(|_| {
                r.read_u32::<LittleEndian>()
                    .map(|v| v as usize)
                    .map_err(|_| Error::Checkpoint("truncated descriptor".into()))
            })
            .collect()
    };
    let head = u32s(5)?;
    let (input_shape, class_count, layer_count) = (InputShape::new(head[0], head[1], head[2]), head[3], head[4]);
    if layer_count > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.read_u8()?;
        let layer = match tag {
            1 => {
                let v = read_u32s(&mut r, 4)?;
                LayerSpec::Conv {
                    channels: v[0],
                    kernel: v[1],
                    stride: v[2],
                    padding: v[3],
                }
            }
            2 => LayerSpec::Dense {
                width: read_u32s(&mut r, 1)?[0],
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::AvgPool {
                size: read_u32s(&mut r, 1)?[0],
            },
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let spec = NetworkSpec {
        input_shape,
        layers,
        class_count,
    };
    let expected = spec.parameter_count()?;
    let mut mean = Vec::with_capacity(input_shape.channels);
    let mut std = Vec::with_capacity(input_shape.channels);
    for _ in 0..input_shape.channels {
        mean.push(r.read_f64::<LittleEndian>()?);
        std.push(r.read_f64::<LittleEndian>()?);
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {count} weights, spec needs {expected}"
        )));
    }
    let mut weights = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut weights)
        .map_err(|_| Error::Checkpoint("truncated weight payload".into()))?;
    GuideModel::from_parts(spec, Normalization { mean, std }, weights)
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<usize>> {
    (0..n)
        .map(|_| {
            r.read_u32::<LittleEndian>()
                .map(|v| v as usize)
                .map_err(|_| Error::Checkpoint("truncated layer descriptor".into()))
        })
        .collect()
}

pub fn save(model: &GuideModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<GuideModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_model() {
        let model = GuideModel::init(NetworkSpec::desk_scale(4), 3)
            .unwrap()
            .with_normalization(Normalization {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![0.5, 0.6, 0.7],
            })
            .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf[4], FORMAT_VERSION);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_corruption() {
        let model = GuideModel::init(NetworkSpec::desk_scale(2), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));

        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(truncated).is_err());
    }
}
