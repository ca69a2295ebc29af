use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::{out_extent, PoolKind};
use crate::param::{BnIds, Builder, Ctx, ParamId};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    SepConv3,
    SepConv5,
    SepConv7,
    Conv1x1,
    MaxPool3,
    AvgPool3,
    Identity,
    Zero,
}

impl OpKind {
    /// Canonical order; also the tie-break order during derivation.
    pub const ALL: [OpKind; 8] = [
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::SepConv7,
        OpKind::Conv1x1,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::SepConv3 => "sep_conv_3",
            OpKind::SepConv5 => "sep_conv_5",
            OpKind::SepConv7 => "sep_conv_7",
            OpKind::Conv1x1 => "conv_1x1",
            OpKind::MaxPool3 => "max_pool_3",
            OpKind::AvgPool3 => "avg_pool_3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Depthwise kernel size of the separable convolutions.
    pub fn sep_kernel(self) -> Option<usize> {
        match self {
            OpKind::SepConv3 => Some(3),
            OpKind::SepConv5 => Some(5),
            OpKind::SepConv7 => Some(7),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operation {s:?}")))
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::invalid(format!("edge stride must be 1 or 2, got {stride}")))
    }
}

/// Trainable scalars of one edge operation at node width `c`.
///
/// Separable convs are PReLU → depthwise k×k → pointwise 1×1 → BN; the
/// 1×1 conv is PReLU → conv → BN; pools carry a BN; a strided identity is a
/// strided 1×1 conv + BN. Convolutions have no bias.
pub fn op_param_count(kind: OpKind, c: usize, stride: usize) -> usize {
    match kind {
        OpKind::SepConv3 | OpKind::SepConv5 | OpKind::SepConv7 => {
            let k = kind.sep_kernel().unwrap_or(0);
            c + c * k * k + c * c + 2 * c
        }
        OpKind::Conv1x1 => c + c * c + 2 * c,
        OpKind::MaxPool3 | OpKind::AvgPool3 => 2 * c,
        OpKind::Identity if stride == 2 => c * c + 2 * c,
        OpKind::Identity | OpKind::Zero => 0,
    }
}

/// Multiply-accumulates of one edge operation per sample, given the input
/// spatial extent.
pub fn op_macs(kind: OpKind, c: usize, stride: usize, h: usize, w: usize) -> u64 {
    let (oh, ow) = (
        out_extent(h, 1, stride, 0).unwrap_or(0),
        out_extent(w, 1, stride, 0).unwrap_or(0),
    );
    let area = (oh * ow) as u64;
    let c = c as u64;
    match kind {
        OpKind::SepConv3 | OpKind::SepConv5 | OpKind::SepConv7 => {
            let k = kind.sep_kernel().unwrap_or(0) as u64;
            area * (c * k * k + c * c)
        }
        OpKind::Conv1x1 => area * c * c,
        OpKind::Identity if stride == 2 => area * c * c,
        _ => 0,
    }
}

#[derive(Clone, Debug)]
enum OpParams {
    SepConv {
        act: ParamId,
        depthwise: ParamId,
        pointwise: ParamId,
        bn: BnIds,
    },
    Conv1x1 {
        act: ParamId,
        conv: ParamId,
        bn: BnIds,
    },
    Pool {
        bn: BnIds,
    },
    StridedIdentity {
        conv: ParamId,
        bn: BnIds,
    },
    None,
}

/// One instantiated edge operation with its parameters.
#[derive(Clone, Debug)]
pub struct EdgeOp {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    params: OpParams,
}

impl EdgeOp {
    pub fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, kind: OpKind, c: usize, stride: usize) -> Result<Self> {
        check_stride(stride)?;
        let params = b.scope(kind.tag(), |b| -> Result<OpParams> {
            Ok(match kind {
                OpKind::SepConv3 | OpKind::SepConv5 | OpKind::SepConv7 => {
                    let k = kind.sep_kernel().unwrap_or(3);
                    OpParams::SepConv {
                        act: b.prelu("act", c)?,
                        depthwise: b.conv("dw", c, c, k, c)?,
                        pointwise: b.conv("pw", c, c, 1, 1)?,
                        bn: b.bn("bn", c)?,
                    }
                }
                OpKind::Conv1x1 => OpParams::Conv1x1 {
                    act: b.prelu("act", c)?,
                    conv: b.conv("conv", c, c, 1, 1)?,
                    bn: b.bn("bn", c)?,
                },
                OpKind::MaxPool3 | OpKind::AvgPool3 => OpParams::Pool { bn: b.bn("bn", c)? },
                OpKind::Identity if stride == 2 => OpParams::StridedIdentity {
                    conv: b.conv("conv", c, c, 1, 1)?,
                    bn: b.bn("bn", c)?,
                },
                OpKind::Identity | OpKind::Zero => OpParams::None,
            })
        })?;
        Ok(Self {
            kind,
            channels: c,
            stride,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        op_param_count(self.kind, self.channels, self.stride)
    }

    /// Forward pass; `None` stands for the all-zero output of [`OpKind::Zero`].
    pub fn forward_opt<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        let s = self.stride;
        let y = match &self.params {
            OpParams::SepConv {
                act,
                depthwise,
                pointwise,
                bn,
            } => {
                let k = self.kind.sep_kernel().unwrap_or(3);
                let a = x.prelu(ctx.param(*act))?;
                let d = a.conv2d(ctx.param(*depthwise), s, (k - 1) / 2, self.channels)?;
                let p = d.conv2d(ctx.param(*pointwise), 1, 0, 1)?;
                ctx.batch_norm(p, bn)?
            }
            OpParams::Conv1x1 { act, conv, bn } => {
                let a = x.prelu(ctx.param(*act))?;
                let c = a.conv2d(ctx.param(*conv), s, 0, 1)?;
                ctx.batch_norm(c, bn)?
            }
            OpParams::Pool { bn } => {
                let kind = if self.kind == OpKind::MaxPool3 {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                let p = x.pool2d(kind, 3, s, 1)?;
                ctx.batch_norm(p, bn)?
            }
            OpParams::StridedIdentity { conv, bn } => {
                let c = x.conv2d(ctx.param(*conv), s, 0, 1)?;
                ctx.batch_norm(c, bn)?
            }
            OpParams::None => match self.kind {
                OpKind::Identity => x,
                _ => return Ok(None),
            },
        };
        Ok(Some(y))
    }

    /// Forward pass; the zero operation yields an explicit zero tensor.
    pub fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.forward_opt(ctx, x)? {
            Some(y) => Ok(y),
            None => {
                let [n, c, h, w] = x.value().dims4()?;
                let (oh, ow) = (
                    out_extent(h, 1, self.stride, 0).unwrap_or(1),
                    out_extent(w, 1, self.stride, 0).unwrap_or(1),
                );
                Ok(ctx.tape.constant(Tensor::zeros(&[n, c, oh, ow])?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_roundtrip() {
        for k in OpKind::ALL {
            assert_eq!(k.tag().parse::<OpKind>().unwrap(), k);
            assert_eq!(OpKind::from_index(k.index()), Some(k));
        }
        assert!("sep_conv_9".parse::<OpKind>().is_err());
    }

    #[test]
    fn parameter_composition() {
        assert_eq!(op_param_count(OpKind::Zero, 16, 1), 0);
        assert_eq!(op_param_count(OpKind::SepConv3, 16, 1), 448);
        assert_eq!(op_param_count(OpKind::MaxPool3, 16, 1), 32);
        assert_eq!(op_param_count(OpKind::Identity, 16, 1), 0);
        assert_eq!(op_param_count(OpKind::Identity, 16, 2), 288);
        assert_eq!(op_param_count(OpKind::Conv1x1, 16, 2), 16 + 256 + 32);
    }

    #[test]
    fn zero_and_identity_cost_nothing() {
        assert_eq!(op_macs(OpKind::Zero, 8, 1, 4, 4), 0);
        assert_eq!(op_macs(OpKind::Identity, 8, 1, 4, 4), 0);
        assert_eq!(op_macs(OpKind::Conv1x1, 4, 1, 4, 4), 4 * 4 * 16);
    }
}
