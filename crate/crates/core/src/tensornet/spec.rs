use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image geometry. Pixels are stored channel-major (CHW) everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        width: usize,
    },
    Relu,
    /// Non-overlapping `size x size` average pooling.
    AvgPool {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    /// Two stride-2 3x3 convolutions (16 and 32 channels) with rectifiers, then a
    /// dense read-out.
    pub fn desk_scale(class_count: usize) -> Self {
        NetworkSpec {
            input_shape: InputShape::new(32, 32, 3),
            layers: vec![
                LayerSpec::Conv {
                    channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { width: class_count },
            ],
            class_count,
        }
    }

    /// Single dense layer; the logits are an affine function of the pixels.
    pub fn linear(input_shape: InputShape, class_count: usize) -> Self {
        NetworkSpec {
            input_shape,
            layers: vec![LayerSpec::Dense { width: class_count }],
            class_count,
        }
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(compile(self)?.1)
    }
}

/// A layer with its geometry and parameter offsets resolved.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Conv(ConvGeom),
    Dense {
        inputs: usize,
        outputs: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu {
        len: usize,
    },
    AvgPool {
        channels: usize,
        in_h: usize,
        in_w: usize,
        size: usize,
        out_h: usize,
        out_w: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl Op {
    pub fn input_len(&self) -> usize {
        match *self {
            Op::Conv(g) => g.in_c * g.in_h * g.in_w,
            Op::Dense { inputs, .. } => inputs,
            Op::Relu { len } => len,
            Op::AvgPool {
                channels, in_h, in_w, ..
            } => channels * in_h * in_w,
        }
    }
}

/// Resolves layer geometry; returns the op list and the total parameter count.
pub(crate) fn compile(spec: &NetworkSpec) -> Result<(Vec<Op>, usize)> {
    if spec.class_count < 2 {
        return Err(Error::InvalidSpec(format!(
            "class_count must be at least 2, got {}",
            spec.class_count
        )));
    }
    let s = spec.input_shape;
    if s.is_empty() {
        return Err(Error::InvalidSpec("empty input shape".into()));
    }
    // (channels, height, width); after a dense layer the spatial extent is 1x1.
    let (mut c, mut h, mut w) = (s.channels, s.height, s.width);
    let mut ops = Vec::with_capacity(spec.layers.len());
    let mut params = 0usize;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                if channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidSpec(format!("degenerate conv {layer:?}")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::InvalidSpec(format!(
                        "conv kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                let out_h = (h + 2 * padding - kernel) / stride + 1;
                let out_w = (w + 2 * padding - kernel) / stride + 1;
                let w_off = params;
                params += channels * c * kernel * kernel;
                let b_off = params;
                params += channels;
                ops.push(Op::Conv(ConvGeom {
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c: channels,
                    kernel,
                    stride,
                    pad: padding,
                    out_h,
                    out_w,
                    w_off,
                    b_off,
                }));
                c = channels;
                h = out_h;
                w = out_w;
            }
            LayerSpec::Dense { width } => {
                if width == 0 {
                    return Err(Error::InvalidSpec("dense layer of width 0".into()));
                }
                let inputs = c * h * w;
                let w_off = params;
                params += width * inputs;
                let b_off = params;
                params += width;
                ops.push(Op::Dense {
                    inputs,
                    outputs: width,
                    w_off,
                    b_off,
                });
                c = width;
                h = 1;
                w = 1;
            }
            LayerSpec::Relu => ops.push(Op::Relu { len: c * h * w }),
            LayerSpec::AvgPool { size } => {
                if size == 0 || size > h || size > w {
                    return Err(Error::InvalidSpec(format!("pool size {size} does not fit {h}x{w}")));
                }
                let (out_h, out_w) = (h / size, w / size);
                ops.push(Op::AvgPool {
                    channels: c,
                    in_h: h,
                    in_w: w,
                    size,
                    out_h,
                    out_w,
                });
                h = out_h;
                w = out_w;
            }
        }
    }
    if c * h * w != spec.class_count {
        return Err(Error::InvalidSpec(format!(
            "final layer width {} does not match class_count {}",
            c * h * w,
            spec.class_count
        )));
    }
    if !ops.iter().any(|op| matches!(op, Op::Dense { .. })) {
        return Err(Error::InvalidSpec("network needs a dense read-out".into()));
    }
    Ok((ops, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_parameter_count() {
        let spec = NetworkSpec::desk_scale(4);
        // conv1 16*3*9+16, conv2 32*16*9+32, dense 4*(32*8*8)+4
        assert_eq!(spec.parameter_count().unwrap(), 448 + 4640 + 8196);
    }

    #[test]
    fn rejects_width_mismatch_and_single_class() {
        let mut spec = NetworkSpec::desk_scale(4);
        spec.class_count = 5;
        assert!(spec.parameter_count().is_err());
        let spec = NetworkSpec::linear(InputShape::new(1, 1, 2), 1);
        assert!(spec.parameter_count().is_err());
    }
}
