use std::fmt;

use rand::Rng;

use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether stochastic layers are active. Train mode carries the seed that
/// determines every dropout mask of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// The layer vocabulary. Convolutions use 3x3 kernels with padding 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        stride: usize,
    },
    MaxPool2x2,
    Dense {
        width: usize,
    },
    ReLU,
    Tanh,
    Softmax,
    Dropout {
        rate: f64,
    },
    InstanceNorm,
    /// Stride-2 upsampling convolution.
    TransposeConv2d {
        filters: usize,
    },
    /// conv, norm, relu, conv, norm, plus the identity skip.
    ResidualBlock {
        filters: usize,
    },
}

pub const KERNEL: usize = 3;

fn bad(msg: String) -> EngineError {
    EngineError::InvalidLayer(msg)
}

fn chw(kind: &LayerKind, input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(bad(format!("{kind} needs a CxHxW input, got {input:?}"))),
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv2d { filters, stride } => write!(f, "conv2d({filters}, stride {stride})"),
            LayerKind::MaxPool2x2 => write!(f, "maxpool2x2"),
            LayerKind::Dense { width } => write!(f, "dense({width})"),
            LayerKind::ReLU => write!(f, "relu"),
            LayerKind::Tanh => write!(f, "tanh"),
            LayerKind::Softmax => write!(f, "softmax"),
            LayerKind::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerKind::InstanceNorm => write!(f, "instance_norm"),
            LayerKind::TransposeConv2d { filters } => write!(f, "transpose_conv2d({filters})"),
            LayerKind::ResidualBlock { filters } => write!(f, "residual_block({filters})"),
        }
    }
}

impl LayerKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Conv2d { filters, stride } if filters == 0 || stride == 0 => {
                Err(bad(format!("{self}: filters and stride must be >= 1")))
            }
            LayerKind::Dense { width: 0 }
            | LayerKind::TransposeConv2d { filters: 0 }
            | LayerKind::ResidualBlock { filters: 0 } => Err(bad(format!("{self}: width must be >= 1"))),
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(bad(format!("dropout rate {rate} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerKind::Conv2d { filters, stride } => {
                let (_, h, w) = chw(self, input)?;
                Ok(vec![filters, (h - 1) / stride + 1, (w - 1) / stride + 1])
            }
            LayerKind::MaxPool2x2 => {
                let (c, h, w) = chw(self, input)?;
                if h < 2 || w < 2 {
                    return Err(bad(format!("maxpool2x2 on {h}x{w} input underflows")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerKind::Dense { width } => Ok(vec![width]),
            LayerKind::TransposeConv2d { filters } => {
                let (_, h, w) = chw(self, input)?;
                Ok(vec![filters, 2 * h, 2 * w])
            }
            LayerKind::ResidualBlock { filters } => {
                let (c, _, _) = chw(self, input)?;
                if c != filters {
                    return Err(bad(format!("{self} on {c}-channel input")));
                }
                Ok(input.to_vec())
            }
            LayerKind::InstanceNorm => {
                chw(self, input)?;
                Ok(input.to_vec())
            }
            LayerKind::ReLU | LayerKind::Tanh | LayerKind::Softmax | LayerKind::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    /// Shapes of the trainable tensors, in declaration order.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.output_shape(input)?;
        let k = KERNEL;
        Ok(match *self {
            LayerKind::Conv2d { filters, .. } => vec![vec![filters, input[0], k, k], vec![filters]],
            LayerKind::TransposeConv2d { filters } => {
                vec![vec![input[0], filters, k, k], vec![filters]]
            }
            LayerKind::Dense { width } => {
                vec![vec![width, input.iter().product()], vec![width]]
            }
            LayerKind::InstanceNorm => vec![vec![input[0]], vec![input[0]]],
            LayerKind::ResidualBlock { filters } => {
                let conv = [vec![filters, filters, k, k], vec![filters]];
                let norm = [vec![filters], vec![filters]];
                [conv.clone(), norm.clone(), conv, norm].concat()
            }
            _ => Vec::new(),
        })
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerKind::Conv2d { .. } | LayerKind::TransposeConv2d { .. } | LayerKind::Dense { .. } => {
                &["weight", "bias"]
            }
            LayerKind::InstanceNorm => &["gamma", "beta"],
            LayerKind::ResidualBlock { .. } => &[
                "conv1.weight",
                "conv1.bias",
                "norm1.gamma",
                "norm1.beta",
                "conv2.weight",
                "conv2.bias",
                "norm2.gamma",
                "norm2.beta",
            ],
            _ => &[],
        }
    }

    /// Seeded initial parameters: fan-in scaled uniform weights, zero biases,
    /// unit norm scales.
    pub fn init_params<T: Scalar, R: Rng>(&self, input: &[usize], rng: &mut R) -> Result<Vec<Tensor<T>>> {
        let shapes = self.param_shapes(input)?;
        Ok(shapes
            .into_iter()
            .zip(self.param_names())
            .map(|(shape, name)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect()
                } else if name.ends_with("gamma") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                Tensor::new(shape, data).expect("param shape").with_grad()
            })
            .collect())
    }

    /// Applies the layer to a batched input.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, params: &[Var], mode: Mode) -> Result<Var> {
        let expected = self.param_names().len();
        if params.len() != expected {
            return Err(EngineError::ParamCount {
                expected,
                actual: params.len(),
            });
        }
        self.validate()?;
        match *self {
            LayerKind::Conv2d { stride, .. } => tape.conv2d(x, params[0], params[1], stride),
            LayerKind::TransposeConv2d { .. } => tape.conv_transpose2d(x, params[0], params[1]),
            LayerKind::MaxPool2x2 => tape.maxpool2(x),
            LayerKind::Dense { .. } => tape.dense(x, params[0], params[1]),
            LayerKind::ReLU => Ok(tape.relu(x)),
            LayerKind::Tanh => Ok(tape.tanh(x)),
            LayerKind::Softmax => tape.softmax(x),
            LayerKind::Dropout { rate } => match mode {
                Mode::Train { seed } => tape.dropout(x, rate, seed),
                Mode::Eval => Ok(x),
            },
            LayerKind::InstanceNorm => tape.instance_norm(x, params[0], params[1]),
            LayerKind::ResidualBlock { .. } => {
                let h = tape.conv2d(x, params[0], params[1], 1)?;
                let h = tape.instance_norm(h, params[2], params[3])?;
                let h = tape.relu(h);
                let h = tape.conv2d(h, params[4], params[5], 1)?;
                let h = tape.instance_norm(h, params[6], params[7])?;
                tape.add(x, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_algebra() {
        let conv = LayerKind::Conv2d { filters: 64, stride: 1 };
        assert_eq!(conv.output_shape(&[3, 224, 224]).unwrap(), vec![64, 224, 224]);
        let down = LayerKind::Conv2d { filters: 8, stride: 2 };
        assert_eq!(down.output_shape(&[3, 63, 64]).unwrap(), vec![8, 32, 32]);
        let pool = LayerKind::MaxPool2x2;
        assert_eq!(pool.output_shape(&[8, 7, 7]).unwrap(), vec![8, 3, 3]);
        assert!(pool.output_shape(&[8, 1, 4]).is_err());
        let up = LayerKind::TransposeConv2d { filters: 4 };
        assert_eq!(up.output_shape(&[8, 16, 16]).unwrap(), vec![4, 32, 32]);
        let res = LayerKind::ResidualBlock { filters: 8 };
        assert!(res.output_shape(&[4, 16, 16]).is_err());
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(LayerKind::Dense { width: 0 }.validate().is_err());
        assert!(LayerKind::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerKind::Dropout { rate: -0.1 }.validate().is_err());
        assert!(LayerKind::Dropout { rate: 0.0 }.validate().is_ok());
    }

    #[test]
    fn dense_params_count_fan_in_plus_bias() {
        let shapes = LayerKind::Dense { width: 4 }.param_shapes(&[10]).unwrap();
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(n, 44);
    }
}
