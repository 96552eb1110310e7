//! Candidate operation set for searchable cells.
//!
//! Every op maps a (C, H, W) map to the same shape. The declared order is
//! part of the contract: genotype op indices are positions in this list.

use crate::graph::{Graph, VarId};
use crate::nn::{conv_init, ParamId, Params};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    /// Zero output; lets the search prune a connection.
    None,
    /// Identity / skip.
    Identity,
    Conv { kernel: usize, dilation: usize },
    /// Depthwise 3x3 followed by pointwise 1x1.
    SepConv { kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpDescriptor {
    pub kind: OpKind,
}

impl OpDescriptor {
    fn tag(&self) -> String {
        match self.kind {
            OpKind::None => "none".into(),
            OpKind::Identity => "identity".into(),
            OpKind::Conv { kernel, dilation } => format!("conv{kernel}x{kernel}d{dilation}"),
            OpKind::SepConv { kernel } => format!("sep{kernel}x{kernel}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateOpSet {
    pub ops: Vec<OpDescriptor>,
}

impl CandidateOpSet {
    /// Receptive-field-oriented set: none, skip, 1x1, 3x3, dilated 3x3
    /// (rates 2 and 3), separable 3x3.
    pub fn standard() -> Self {
        use OpKind::*;
        let kinds = [
            None,
            Identity,
            Conv {
                kernel: 1,
                dilation: 1,
            },
            Conv {
                kernel: 3,
                dilation: 1,
            },
            Conv {
                kernel: 3,
                dilation: 2,
            },
            Conv {
                kernel: 3,
                dilation: 3,
            },
            SepConv { kernel: 3 },
        ];
        Self {
            ops: kinds.iter().map(|&kind| OpDescriptor { kind }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn none_index(&self) -> Option<usize> {
        self.ops.iter().position(|o| o.kind == OpKind::None)
    }

    pub fn identity_index(&self) -> Option<usize> {
        self.ops.iter().position(|o| o.kind == OpKind::Identity)
    }

    pub fn conv1x1_index(&self) -> Option<usize> {
        self.ops.iter().position(|o| {
            matches!(
                o.kind,
                OpKind::Conv {
                    kernel: 1,
                    dilation: 1
                }
            )
        })
    }

    /// Hash of the ordered descriptor list; checked when loading genotypes.
    pub fn signature(&self) -> String {
        let mut h = Sha256::new();
        for op in &self.ops {
            h.update(op.tag().as_bytes());
            h.update(b";");
        }
        format!("{:x}", h.finalize())
    }
}

/// Learnable tensors behind one candidate op instance at a given width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OpParams {
    NoParams,
    Conv { w: ParamId },
    Sep { dw: ParamId, pw: ParamId },
}

pub fn init_op_params(
    params: &mut Params,
    rng: &mut impl Rng,
    desc: &OpDescriptor,
    channels: usize,
) -> OpParams {
    match desc.kind {
        OpKind::None | OpKind::Identity => OpParams::NoParams,
        OpKind::Conv { kernel, .. } => OpParams::Conv {
            w: params.add(conv_init(rng, channels, channels, kernel)),
        },
        OpKind::SepConv { kernel } => OpParams::Sep {
            dw: params.add(conv_init(rng, channels, 1, kernel)),
            pw: params.add(conv_init(rng, channels, channels, 1)),
        },
    }
}

/// Evaluate one candidate op. Convs are followed by ReLU; identity and
/// none are free.
pub fn apply_op(
    g: &mut Graph,
    params: &Params,
    x: VarId,
    desc: &OpDescriptor,
    op_params: &OpParams,
) -> VarId {
    match (&desc.kind, op_params) {
        (OpKind::None, _) => {
            let shape: Vec<usize> = g.value(x).shape().to_vec();
            g.zeros(&shape)
        }
        (OpKind::Identity, _) => x,
        (OpKind::Conv { dilation, .. }, OpParams::Conv { w }) => {
            let wv = g.param(params, *w);
            let c = g.conv2d(x, wv, None, 1, *dilation, 1);
            g.relu(c)
        }
        (OpKind::SepConv { .. }, OpParams::Sep { dw, pw }) => {
            let channels = g.value(x).shape()[0];
            let dwv = g.param(params, *dw);
            let d = g.conv2d(x, dwv, None, 1, 1, channels);
            let pwv = g.param(params, *pw);
            let p = g.conv2d(d, pwv, None, 1, 1, 1);
            g.relu(p)
        }
        _ => panic!("op descriptor and parameters disagree"),
    }
}
