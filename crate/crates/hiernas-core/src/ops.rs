//! Candidate-operator catalog: the S1-S5 search spaces and concrete
//! operator instances built for a channel count and stride.
//!
//! Convolutional candidates follow the usual cell-search internals: each
//! conv block is ReLU -> conv -> BN, separable convs stack the depthwise-
//! separable block twice, and the stride-2 skip connection is a factorized
//! reduction. Batch-norm affine weights are off while an operator lives
//! inside a mixed edge and on in discrete networks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{BnHandle, BnStats, Graph, Mode, Var};
use crate::kernels::PoolKind;
use crate::tensor::{Param, Tensor};

// ── Kinds and spaces ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    MaxPool3,
    MaxPool5,
    AvgPool3,
    AvgPool5,
    SepConv3,
    SepConv5,
    SepConv7,
    DilConv3,
    DilConv5,
    SkipConnect,
    Zero,
}

pub const ALL_KINDS: [OperatorKind; 11] = [
    OperatorKind::MaxPool3,
    OperatorKind::MaxPool5,
    OperatorKind::AvgPool3,
    OperatorKind::AvgPool5,
    OperatorKind::SepConv3,
    OperatorKind::SepConv5,
    OperatorKind::SepConv7,
    OperatorKind::DilConv3,
    OperatorKind::DilConv5,
    OperatorKind::SkipConnect,
    OperatorKind::Zero,
];

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::MaxPool3 => "MaxPool3",
            OperatorKind::MaxPool5 => "MaxPool5",
            OperatorKind::AvgPool3 => "AvgPool3",
            OperatorKind::AvgPool5 => "AvgPool5",
            OperatorKind::SepConv3 => "SepConv3",
            OperatorKind::SepConv5 => "SepConv5",
            OperatorKind::SepConv7 => "SepConv7",
            OperatorKind::DilConv3 => "DilConv3",
            OperatorKind::DilConv5 => "DilConv5",
            OperatorKind::SkipConnect => "SkipConnect",
            OperatorKind::Zero => "Zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("unknown operator tag {s:?}")))
    }

    /// Spatial kernel size for pooling and conv kinds.
    pub fn kernel_size(&self) -> Option<usize> {
        match self {
            OperatorKind::MaxPool3 | OperatorKind::AvgPool3 => Some(3),
            OperatorKind::MaxPool5 | OperatorKind::AvgPool5 => Some(5),
            OperatorKind::SepConv3 | OperatorKind::DilConv3 => Some(3),
            OperatorKind::SepConv5 | OperatorKind::DilConv5 => Some(5),
            OperatorKind::SepConv7 => Some(7),
            OperatorKind::SkipConnect | OperatorKind::Zero => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, OperatorKind::Zero)
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, OperatorKind::SkipConnect)
    }

    pub fn is_pool(&self) -> bool {
        matches!(
            self,
            OperatorKind::MaxPool3
                | OperatorKind::MaxPool5
                | OperatorKind::AvgPool3
                | OperatorKind::AvgPool5
        )
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceId {
    S1,
    S2,
    S3,
    S4,
    S5,
}

pub const ALL_SPACES: [SpaceId; 5] = [SpaceId::S1, SpaceId::S2, SpaceId::S3, SpaceId::S4, SpaceId::S5];

impl SpaceId {
    pub fn name(&self) -> &'static str {
        match self {
            SpaceId::S1 => "S1",
            SpaceId::S2 => "S2",
            SpaceId::S3 => "S3",
            SpaceId::S4 => "S4",
            SpaceId::S5 => "S5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_SPACES
            .iter()
            .find(|id| id.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidArg(format!(
                    "unknown search space {s:?}; valid ids: S1, S2, S3, S4, S5"
                ))
            })
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered candidate-operator list. The five standard catalogs come from
/// `space`; custom lists can be built from config tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub label: String,
    pub kinds: Vec<OperatorKind>,
}

impl SearchSpace {
    pub fn custom(label: impl Into<String>, kinds: Vec<OperatorKind>) -> Self {
        SearchSpace { label: label.into(), kinds }
    }

    pub fn contains(&self, kind: OperatorKind) -> bool {
        self.kinds.contains(&kind)
    }

    /// Position of a kind in the listed order (used for tie-breaks).
    pub fn position(&self, kind: OperatorKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }
}

/// The standard catalogs, membership and order fixed.
pub fn space(id: SpaceId) -> SearchSpace {
    use OperatorKind::*;
    let kinds = match id {
        SpaceId::S1 => vec![MaxPool3, AvgPool3, SepConv3, SepConv5, DilConv3, DilConv5, SkipConnect, Zero],
        SpaceId::S2 => vec![MaxPool3, MaxPool5, AvgPool3, AvgPool5, SepConv3, SepConv5, SkipConnect, Zero],
        SpaceId::S3 => vec![MaxPool3, SepConv3, SepConv5, SepConv7, DilConv3, DilConv5, SkipConnect, Zero],
        SpaceId::S4 => vec![SepConv3, SepConv5, DilConv3, DilConv5, SkipConnect, Zero],
        SpaceId::S5 => vec![SepConv3, SkipConnect, Zero],
    };
    SearchSpace { label: id.name().to_string(), kinds }
}

// ── Layer building blocks ─────────────────────────────────────────────────

/// Plain convolution layer (no bias; BN follows wherever one is used).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Param,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvLayer {
    pub fn new(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_c / groups) * k * k;
        let weight = Param::new(Tensor::kaiming(vec![out_c, in_c / groups, k, k], fan_in, rng));
        ConvLayer { weight, stride, padding, dilation, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        g.conv2d(x, w, self.stride, self.padding, self.dilation, self.groups)
    }
}

/// Batch norm with owned running statistics; affine weights optional.
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Option<Param>,
    pub beta: Option<Param>,
    pub stats: BnHandle,
}

impl BnLayer {
    pub fn new(channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(Param::new(Tensor::full(vec![channels], 1.0))),
                Some(Param::new(Tensor::zeros(vec![channels]))),
            )
        } else {
            (None, None)
        };
        BnLayer { gamma, beta, stats: Rc::new(RefCell::new(BnStats::new(channels))) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let affine = match (&self.gamma, &self.beta) {
            (Some(gm), Some(bt)) => Some((g.param(gm), g.param(bt))),
            _ => None,
        };
        g.batch_norm(x, affine, &self.stats, mode)
    }

    fn push_params(&self, out: &mut Vec<Param>) {
        if let Some(p) = &self.gamma {
            out.push(p.clone());
        }
        if let Some(p) = &self.beta {
            out.push(p.clone());
        }
    }
}

/// ReLU -> 1x1 conv -> BN, the preprocessing unit in front of every cell.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

impl ReluConvBn {
    pub fn new(out_c: usize, in_c: usize, affine: bool, rng: &mut impl Rng) -> Self {
        ReluConvBn {
            conv: ConvLayer::new(out_c, in_c, 1, 1, 0, 1, 1, rng),
            bn: BnLayer::new(out_c, affine),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let r = g.relu(x);
        let c = self.conv.forward(g, r)?;
        self.bn.forward(g, c, mode)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![self.conv.weight.clone()];
        self.bn.push_params(&mut out);
        out
    }
}

// one depthwise-separable unit: relu -> depthwise k x k -> pointwise 1x1 -> bn
#[derive(Debug, Clone)]
struct SepBlock {
    dw: ConvLayer,
    pw: ConvLayer,
    bn: BnLayer,
}

impl SepBlock {
    fn new(c: usize, k: usize, stride: usize, dilation: usize, affine: bool, rng: &mut impl Rng) -> Self {
        let padding = dilation * (k - 1) / 2;
        SepBlock {
            dw: ConvLayer::new(c, c, k, stride, padding, dilation, c, rng),
            pw: ConvLayer::new(c, c, 1, 1, 0, 1, 1, rng),
            bn: BnLayer::new(c, affine),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let r = g.relu(x);
        let d = self.dw.forward(g, r)?;
        let p = self.pw.forward(g, d)?;
        self.bn.forward(g, p, mode)
    }

    fn push_params(&self, out: &mut Vec<Param>) {
        out.push(self.dw.weight.clone());
        out.push(self.pw.weight.clone());
        self.bn.push_params(out);
    }
}

/// relu -> [1x1 stride-2 conv on x, 1x1 stride-2 conv on x shifted by one]
/// -> concat -> bn. Halves spatial dims; requires them even.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    conv1: ConvLayer,
    conv2: ConvLayer,
    bn: BnLayer,
}

impl FactorizedReduce {
    pub fn new(out_c: usize, in_c: usize, affine: bool, rng: &mut impl Rng) -> Self {
        let c1 = out_c - out_c / 2;
        let c2 = out_c / 2;
        FactorizedReduce {
            conv1: ConvLayer::new(c1, in_c, 1, 2, 0, 1, 1, rng),
            conv2: ConvLayer::new(c2, in_c, 1, 2, 0, 1, 1, rng),
            bn: BnLayer::new(out_c, affine),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x);
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::shape(
                "factorized_reduce",
                format!("spatial dims must be even, got {:?}", shape),
            ));
        }
        let r = g.relu(x);
        let a = self.conv1.forward(g, r)?;
        let shifted = g.shift2d(r)?;
        let b = self.conv2.forward(g, shifted)?;
        let cat = g.concat_channels(&[a, b])?;
        self.bn.forward(g, cat, mode)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.push_params(&mut out);
        out
    }

    fn push_params(&self, out: &mut Vec<Param>) {
        out.push(self.conv1.weight.clone());
        out.push(self.conv2.weight.clone());
        self.bn.push_params(out);
    }
}

// ── Operator instances ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum OpLayers {
    Zero,
    Identity,
    Reduce(FactorizedReduce),
    Pool { kind: PoolKind, k: usize },
    SepConv { first: SepBlock, second: SepBlock },
    DilConv { block: SepBlock },
}

/// A candidate operator bound to a channel count and stride, holding its
/// trainable parameters.
#[derive(Debug, Clone)]
pub struct OperatorInstance {
    pub kind: OperatorKind,
    pub channels: usize,
    pub stride: usize,
    layers: OpLayers,
}

/// Build a concrete operator. `affine` controls batch-norm affine weights
/// (off inside mixed edges during search, on in discrete networks).
pub fn build(
    kind: OperatorKind,
    channels: usize,
    stride: usize,
    affine: bool,
    rng: &mut impl Rng,
) -> Result<OperatorInstance> {
    if channels < 1 {
        return Err(Error::InvalidArg(format!("channels must be >= 1, got {channels}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArg(format!("unsupported stride {stride}, expected 1 or 2")));
    }
    use OperatorKind::*;
    let layers = match kind {
        Zero => OpLayers::Zero,
        SkipConnect => {
            if stride == 1 {
                OpLayers::Identity
            } else {
                OpLayers::Reduce(FactorizedReduce::new(channels, channels, affine, rng))
            }
        }
        MaxPool3 => OpLayers::Pool { kind: PoolKind::Max, k: 3 },
        MaxPool5 => OpLayers::Pool { kind: PoolKind::Max, k: 5 },
        AvgPool3 => OpLayers::Pool { kind: PoolKind::Avg, k: 3 },
        AvgPool5 => OpLayers::Pool { kind: PoolKind::Avg, k: 5 },
        SepConv3 | SepConv5 | SepConv7 => {
            let k = kind.kernel_size().unwrap();
            OpLayers::SepConv {
                first: SepBlock::new(channels, k, stride, 1, affine, rng),
                second: SepBlock::new(channels, k, 1, 1, affine, rng),
            }
        }
        DilConv3 | DilConv5 => {
            let k = kind.kernel_size().unwrap();
            OpLayers::DilConv { block: SepBlock::new(channels, k, stride, 2, affine, rng) }
        }
    };
    Ok(OperatorInstance { kind, channels, stride, layers })
}

impl OperatorInstance {
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "operator",
                format!("{} expects [N,{},H,W], got {:?}", self.kind, self.channels, shape),
            ));
        }
        match &self.layers {
            OpLayers::Zero => {
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
                Ok(g.zeros(vec![shape[0], shape[1], ho, wo]))
            }
            OpLayers::Identity => Ok(x),
            OpLayers::Reduce(fr) => fr.forward(g, x, mode),
            OpLayers::Pool { kind, k } => g.pool2d(x, *kind, *k, self.stride, (*k - 1) / 2),
            OpLayers::SepConv { first, second } => {
                let y = first.forward(g, x, mode)?;
                second.forward(g, y, mode)
            }
            OpLayers::DilConv { block } => block.forward(g, x, mode),
        }
    }

    /// Trainable parameters in construction order.
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        match &self.layers {
            OpLayers::Zero | OpLayers::Identity | OpLayers::Pool { .. } => {}
            OpLayers::Reduce(fr) => fr.push_params(&mut out),
            OpLayers::SepConv { first, second } => {
                first.push_params(&mut out);
                second.push_params(&mut out);
            }
            OpLayers::DilConv { block } => block.push_params(&mut out),
        }
        out
    }
}

/// Exact count of trainable scalars in a built operator.
pub fn param_count(instance: &OperatorInstance) -> usize {
    instance.params().iter().map(|p| p.numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn space_memberships() {
        use OperatorKind::*;
        let s1 = space(SpaceId::S1);
        assert_eq!(s1.kinds.len(), 8);
        assert!(s1.contains(SkipConnect) && s1.contains(Zero));

        let s2 = space(SpaceId::S2);
        assert_eq!(s2.kinds.len(), 8);
        assert!(s2.contains(MaxPool5) && s2.contains(AvgPool5));

        let s3 = space(SpaceId::S3);
        assert_eq!(s3.kinds.len(), 8);
        assert!(s3.contains(SepConv7));

        let s4 = space(SpaceId::S4);
        assert_eq!(s4.kinds.len(), 6);
        assert!(s4.kinds.iter().all(|k| !k.is_pool()));

        let s5 = space(SpaceId::S5);
        assert_eq!(s5.kinds, vec![SepConv3, SkipConnect, Zero]);

        // Zero belongs to every space.
        for id in ALL_SPACES {
            assert!(space(id).contains(Zero), "{id}");
        }
    }

    #[test]
    fn unknown_space_id_errors() {
        assert!(SpaceId::parse("S6").is_err());
        assert!(SpaceId::parse("s1").is_err());
        assert_eq!(SpaceId::parse("S4").unwrap(), SpaceId::S4);
    }

    #[test]
    fn zero_and_skip_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(vec![2, 16, 8, 8], -1.0, 1.0, &mut rng);

        let zero = build(OperatorKind::Zero, 16, 1, false, &mut rng).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = zero.forward(&mut g, xv, Mode::Train).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 16, 8, 8]);

        let skip = build(OperatorKind::SkipConnect, 16, 1, false, &mut rng).unwrap();
        let mut g2 = Graph::new();
        let xv2 = g2.leaf(x.clone());
        let y2 = skip.forward(&mut g2, xv2, Mode::Train).unwrap();
        assert_eq!(g2.value(y2).data, x.data);
    }

    #[test]
    fn unsupported_stride_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build(OperatorKind::SepConv3, 16, 3, false, &mut rng).is_err());
        assert!(build(OperatorKind::SepConv3, 0, 1, false, &mut rng).is_err());
    }

    // Symbolic parameter-count oracle, written independently of params().
    fn symbolic_count(kind: OperatorKind, c: usize, stride: usize, affine: bool) -> usize {
        let bn = if affine { 2 * c } else { 0 };
        let sep_block = |k: usize| c * k * k + c * c + bn;
        match kind {
            OperatorKind::Zero => 0,
            OperatorKind::SkipConnect => {
                if stride == 1 {
                    0
                } else {
                    (c - c / 2) * c + (c / 2) * c + bn
                }
            }
            OperatorKind::MaxPool3
            | OperatorKind::MaxPool5
            | OperatorKind::AvgPool3
            | OperatorKind::AvgPool5 => 0,
            OperatorKind::SepConv3 => 2 * sep_block(3),
            OperatorKind::SepConv5 => 2 * sep_block(5),
            OperatorKind::SepConv7 => 2 * sep_block(7),
            OperatorKind::DilConv3 => sep_block(3),
            OperatorKind::DilConv5 => sep_block(5),
        }
    }

    #[test]
    fn param_counts_match_symbolic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &kind in &ALL_KINDS {
            for &c in &[8usize, 16] {
                for &stride in &[1usize, 2] {
                    for &affine in &[false, true] {
                        let inst = build(kind, c, stride, affine, &mut rng).unwrap();
                        assert_eq!(
                            param_count(&inst),
                            symbolic_count(kind, c, stride, affine),
                            "{kind} c={c} stride={stride} affine={affine}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sepconv3_count_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = build(OperatorKind::SepConv3, 16, 1, true, &mut rng).unwrap();
        // two stacked blocks: depthwise 16*9 + pointwise 16*16 + bn 32 each
        assert_eq!(param_count(&inst), 2 * (16 * 9 + 16 * 16 + 32));
        let dil = build(OperatorKind::DilConv3, 8, 1, true, &mut rng).unwrap();
        assert_eq!(param_count(&dil), 8 * 9 + 8 * 8 + 16);
    }

    #[test]
    fn forward_preserves_channels_and_strides_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &kind in &ALL_KINDS {
            for &c in &[4usize, 8, 16] {
                for &stride in &[1usize, 2] {
                    let inst = build(kind, c, stride, false, &mut rng).unwrap();
                    let x = Tensor::rand_uniform(vec![2, c, 8, 8], -1.0, 1.0, &mut rng);
                    let mut g = Graph::new();
                    let xv = g.leaf(x);
                    let y = inst.forward(&mut g, xv, Mode::Train).unwrap();
                    assert_eq!(
                        g.shape(y),
                        &[2, c, 8 / stride, 8 / stride],
                        "{kind} c={c} stride={stride}"
                    );
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic_given_seed() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            build(OperatorKind::SepConv5, 8, 2, false, &mut rng).unwrap()
        };
        let a = make();
        let b = make();
        let pa = a.params();
        let pb = b.params();
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.value().data, y.value().data);
        }
    }
}
