use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The primitive layers shared by the backbone and the codec.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    TransConv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm {
        ch: usize,
    },
    ReLU,
    PReLU {
        ch: usize,
    },
    Sigmoid,
    GlobalAvgPool,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    Dense {
        inp: usize,
        out: usize,
        bias: bool,
    },
    Gdn {
        ch: usize,
    },
    Igdn {
        ch: usize,
    },
}

/// Role of a parameter tensor inside its layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// BatchNorm running statistics; persisted but never trained.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub suffix: &'static str,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDecl {
    fn new(suffix: &'static str, shape: Vec<usize>, kind: ParamKind) -> Self {
        Self { suffix, shape, kind }
    }
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn dense(inp: usize, out: usize, bias: bool) -> Self {
        LayerSpec::Dense { inp, out, bias }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::TransConv2d { .. } => "TransConv2d",
            LayerSpec::BatchNorm { .. } => "BatchNorm",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::PReLU { .. } => "PReLU",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::AvgPool { .. } => "AvgPool",
            LayerSpec::UpsampleNearest { .. } => "UpsampleNearest",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Gdn { .. } => "Gdn",
            LayerSpec::Igdn { .. } => "Igdn",
        }
    }

    /// True when the layer has a kink that finite differences can straddle.
    pub fn is_piecewise(&self) -> bool {
        matches!(self, LayerSpec::ReLU | LayerSpec::PReLU { .. })
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        use ParamKind::*;
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![ParamDecl::new("weight", vec![out_ch, in_ch, kernel, kernel], Weight)];
                if bias {
                    v.push(ParamDecl::new("bias", vec![out_ch], Bias));
                }
                v
            }
            LayerSpec::TransConv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![ParamDecl::new("weight", vec![in_ch, out_ch, kernel, kernel], Weight)];
                if bias {
                    v.push(ParamDecl::new("bias", vec![out_ch], Bias));
                }
                v
            }
            LayerSpec::BatchNorm { ch } => vec![
                ParamDecl::new("weight", vec![ch], Weight),
                ParamDecl::new("bias", vec![ch], Bias),
                ParamDecl::new("running_mean", vec![ch], Buffer),
                ParamDecl::new("running_var", vec![ch], Buffer),
            ],
            LayerSpec::PReLU { ch } => vec![ParamDecl::new("weight", vec![ch], Weight)],
            LayerSpec::Dense { inp, out, bias } => {
                let mut v = vec![ParamDecl::new("weight", vec![out, inp], Weight)];
                if bias {
                    v.push(ParamDecl::new("bias", vec![out], Bias));
                }
                v
            }
            LayerSpec::Gdn { ch } | LayerSpec::Igdn { ch } => vec![
                ParamDecl::new("beta", vec![ch], Weight),
                ParamDecl::new("gamma", vec![ch, ch], Weight),
            ],
            LayerSpec::ReLU
            | LayerSpec::Sigmoid
            | LayerSpec::GlobalAvgPool
            | LayerSpec::AvgPool { .. }
            | LayerSpec::UpsampleNearest { .. } => Vec::new(),
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    fn validate_dims(&self) -> Result<()> {
        let dims: Vec<usize> = match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => vec![in_ch, out_ch, kernel, stride],
            LayerSpec::TransConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => vec![in_ch, out_ch, kernel, stride],
            LayerSpec::BatchNorm { ch }
            | LayerSpec::PReLU { ch }
            | LayerSpec::Gdn { ch }
            | LayerSpec::Igdn { ch } => vec![ch],
            LayerSpec::AvgPool { kernel, stride } => vec![kernel, stride],
            LayerSpec::UpsampleNearest { factor } => vec![factor],
            LayerSpec::Dense { inp, out, .. } => vec![inp, out],
            LayerSpec::ReLU | LayerSpec::Sigmoid | LayerSpec::GlobalAvgPool => vec![],
        };
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("{self}: every dimension must be positive")));
        }
        Ok(())
    }

    /// Output shape for a given input shape (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate_dims()?;
        let map4 = |want_c: Option<usize>| -> Result<(usize, usize, usize, usize)> {
            if input.len() != 4 {
                return Err(Error::shape(self.kind_name(), &[0, want_c.unwrap_or(0), 0, 0], input));
            }
            if let Some(c) = want_c {
                if input[1] != c {
                    return Err(Error::shape(self.kind_name(), &[input[0], c, input[2], input[3]], input));
                }
            }
            Ok((input[0], input[1], input[2], input[3]))
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (n, _, h, w) = map4(Some(in_ch))?;
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(Error::invalid(format!(
                        "{self}: kernel {kernel} exceeds padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    n,
                    out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::TransConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                let (n, _, h, w) = map4(Some(in_ch))?;
                Ok(vec![n, out_ch, (h - 1) * stride + kernel, (w - 1) * stride + kernel])
            }
            LayerSpec::BatchNorm { ch } | LayerSpec::PReLU { ch } => {
                if input.len() < 2 || input[1] != ch {
                    let mut want = input.to_vec();
                    if want.len() >= 2 {
                        want[1] = ch;
                    }
                    return Err(Error::shape(self.kind_name(), &want, input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Gdn { ch } | LayerSpec::Igdn { ch } => {
                map4(Some(ch))?;
                Ok(input.to_vec())
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::GlobalAvgPool => {
                let (n, c, _, _) = map4(None)?;
                Ok(vec![n, c])
            }
            LayerSpec::AvgPool { kernel, stride } => {
                let (n, c, h, w) = map4(None)?;
                if kernel > h || kernel > w {
                    return Err(Error::invalid(format!("{self}: kernel exceeds input {h}x{w}")));
                }
                Ok(vec![n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::UpsampleNearest { factor } => {
                let (n, c, h, w) = map4(None)?;
                Ok(vec![n, c, h * factor, w * factor])
            }
            LayerSpec::Dense { inp, out, .. } => {
                if input.len() != 2 || input[1] != inp {
                    return Err(Error::shape("Dense", &[input.first().copied().unwrap_or(0), inp], input));
                }
                Ok(vec![input[0], out])
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                bias,
            } => write!(
                f,
                "Conv2d({in_ch}->{out_ch}, k={kernel}, s={stride}, p={padding}, bias={bias})"
            ),
            LayerSpec::TransConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                bias,
            } => write!(f, "TransConv2d({in_ch}->{out_ch}, k={kernel}, s={stride}, bias={bias})"),
            LayerSpec::BatchNorm { ch } => write!(f, "BatchNorm({ch})"),
            LayerSpec::ReLU => write!(f, "ReLU"),
            LayerSpec::PReLU { ch } => write!(f, "PReLU({ch})"),
            LayerSpec::Sigmoid => write!(f, "Sigmoid"),
            LayerSpec::GlobalAvgPool => write!(f, "GlobalAvgPool"),
            LayerSpec::AvgPool { kernel, stride } => write!(f, "AvgPool(k={kernel}, s={stride})"),
            LayerSpec::UpsampleNearest { factor } => write!(f, "UpsampleNearest(x{factor})"),
            LayerSpec::Dense { inp, out, bias } => write!(f, "Dense({inp}->{out}, bias={bias})"),
            LayerSpec::Gdn { ch } => write!(f, "Gdn({ch})"),
            LayerSpec::Igdn { ch } => write!(f, "Igdn({ch})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conv_shape_arithmetic() {
        let c = LayerSpec::conv(3, 16, 3, 1, 1, false);
        assert_eq!(c.output_shape(&[2, 3, 32, 32]).unwrap(), vec![2, 16, 32, 32]);
        let c = LayerSpec::conv(460, 64, 2, 2, 0, true);
        assert_eq!(c.output_shape(&[1, 460, 8, 8]).unwrap(), vec![1, 64, 4, 4]);
        assert!(c.output_shape(&[1, 461, 8, 8]).is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        let c = LayerSpec::conv(3, 0, 3, 1, 1, false);
        assert!(c.output_shape(&[1, 3, 8, 8]).is_err());
    }

    proptest! {
        #[test]
        fn conv_and_pool_shapes(h in 1usize..20, w in 1usize..20, k in 1usize..5, s in 1usize..4, p in 0usize..3) {
            let conv = LayerSpec::conv(2, 3, k, s, p, false);
            let r = conv.output_shape(&[1, 2, h, w]);
            if k <= h + 2 * p && k <= w + 2 * p {
                let out = r.unwrap();
                prop_assert_eq!(out[2], (h + 2 * p - k) / s + 1);
                prop_assert_eq!(out[3], (w + 2 * p - k) / s + 1);
            } else {
                prop_assert!(r.is_err());
            }
            let t = LayerSpec::TransConv2d { in_ch: 2, out_ch: 1, kernel: k, stride: s, bias: false };
            let out = t.output_shape(&[1, 2, h, w]).unwrap();
            prop_assert_eq!(out[2], (h - 1) * s + k);
            let pool = LayerSpec::AvgPool { kernel: k, stride: s };
            if let Ok(out) = pool.output_shape(&[1, 2, h, w]) {
                prop_assert_eq!(out[3], (w - k) / s + 1);
            } else {
                prop_assert!(k > h || k > w);
            }
        }
    }
}
