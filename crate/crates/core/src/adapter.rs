//! Quadapter: a learnable per-channel scale `alpha` placed between two
//! linear relations.
//!
//! For a first layer `h = x·W1 + b1` (or the affine half of a layer norm,
//! `h = n ⊙ γ + β`) and consumers `y_k = h·W2_k + b2_k`, the adapted block is
//!
//! ```text
//! ŷ_k = Q2(A⁻¹·W2_k) · f(Qa(Q1(W1·A)·x + A·b1)) + b2_k,     A = diag(alpha)
//! ```
//!
//! Weights are stored `[in × out]`, so scaling output channel `i` of the first
//! layer scales column `i` of `W1`, and the inverse scale hits row `i` of each
//! `W2_k`. Without quantizers the scales cancel exactly in real arithmetic.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, PiecewiseLinear};
use crate::error::{Error, Result};
use crate::quant::{Bound, QuantizerState};
use crate::tensor::Tensor;

/// Smallest admissible scale after an optimizer step.
pub const ALPHA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadapterParams {
    pub alpha: Vec<f64>,
}

impl QuadapterParams {
    pub fn init_identity(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("quadapter width must be positive".into()));
        }
        Ok(Self { alpha: vec![1.0; d] })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn clamp_positive(&mut self) {
        for a in &mut self.alpha {
            *a = a.max(ALPHA_FLOOR);
        }
    }

    pub fn is_identity(&self) -> bool {
        self.alpha.iter().all(|&a| a == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Contract("quadapter scales must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.alpha.clone())
    }
}

/// Result of analytical range equalization.
#[derive(Clone, Debug)]
pub struct CleInit {
    pub params: QuadapterParams,
    /// Channels with a zero range on either side; their scale stays 1.
    pub dead_channels: Vec<usize>,
}

/// `alpha_i = sqrt(r2_i / r1_i)` where `r1_i` is the first layer's output-channel
/// range and `r2_i` the consumers' input-channel range. Afterwards both sides
/// have range `sqrt(r1_i * r2_i)`.
pub fn init_cle(first_ranges: &[f64], second_ranges: &[f64]) -> Result<CleInit> {
    if first_ranges.len() != second_ranges.len() || first_ranges.is_empty() {
        return Err(Error::Dimension(format!(
            "cle: {} first-layer channels vs {} second-layer channels",
            first_ranges.len(),
            second_ranges.len()
        )));
    }
    let mut alpha = Vec::with_capacity(first_ranges.len());
    let mut dead_channels = Vec::new();
    for (i, (&r1, &r2)) in first_ranges.iter().zip(second_ranges).enumerate() {
        if r1 > 0.0 && r2 > 0.0 {
            alpha.push((r2 / r1).sqrt());
        } else {
            dead_channels.push(i);
            alpha.push(1.0);
        }
    }
    Ok(CleInit { params: QuadapterParams { alpha }, dead_channels })
}

/// A linear layer `y = x·weight + bias` with `weight [in × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(Error::Dimension(format!(
                "linear weight {:?} with bias of {}",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// The layer whose output channels the adapter scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FirstLayer {
    Linear(Linear),
    /// Affine half of a layer norm; block inputs are already normalized.
    LayerNorm { gamma: Tensor, beta: Tensor },
}

impl FirstLayer {
    pub fn out_dim(&self) -> usize {
        match self {
            FirstLayer::Linear(l) => l.out_dim(),
            FirstLayer::LayerNorm { gamma, .. } => gamma.len(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            FirstLayer::Linear(l) => l.in_dim(),
            FirstLayer::LayerNorm { gamma, .. } => gamma.len(),
        }
    }

    /// Per-output-channel max magnitude of the weight.
    pub fn channel_ranges(&self) -> Vec<f64> {
        match self {
            FirstLayer::Linear(l) => {
                let w = &l.weight;
                (0..w.cols())
                    .map(|c| (0..w.rows()).map(|r| w.at(r, c).abs()).fold(0.0, f64::max))
                    .collect()
            }
            FirstLayer::LayerNorm { gamma, .. } => gamma.data().iter().map(|g| g.abs()).collect(),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            FirstLayer::Linear(_) => LayerKind::Linear,
            FirstLayer::LayerNorm { .. } => LayerKind::LayerNorm,
        }
    }
}

/// Per-input-channel max magnitude across all consumers.
pub fn consumer_channel_ranges(consumers: &[&Tensor]) -> Vec<f64> {
    let d = consumers[0].rows();
    (0..d)
        .map(|r| {
            consumers
                .iter()
                .flat_map(|w| w.row(r).iter().map(|v| v.abs()))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    LayerNorm,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Between {
    None,
    Relu,
    LeakyRelu(f64),
    Gelu,
    Tanh,
    Softmax,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Applicability {
    Accepted,
    Rejected(String),
}

/// A scale can only cross ops with `f(s·x) = s·f(x)` for `s > 0`.
pub fn check_applicability(first: LayerKind, between: Between, second: LayerKind) -> Applicability {
    use Applicability::*;
    match first {
        LayerKind::Linear | LayerKind::LayerNorm => {}
        LayerKind::Residual => return Rejected("first op is a residual junction, not a linear layer".into()),
    }
    match second {
        LayerKind::Linear => {}
        LayerKind::LayerNorm => {
            return Rejected("second op must be linear in its input; layer norm is not".into())
        }
        LayerKind::Residual => return Rejected("second op is a residual junction".into()),
    }
    match between {
        Between::None | Between::Relu | Between::LeakyRelu(_) => Accepted,
        Between::Gelu | Between::Tanh | Between::Softmax => {
            Rejected("non-scaling-invariant activation".into())
        }
        Between::Residual => Rejected("residual connection between the two layers".into()),
    }
}

/// Quantizers of one block: first-layer weight, activation, and one weight
/// quantizer per consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockQuantizers {
    pub first: QuantizerState,
    pub act: QuantizerState,
    pub second: Vec<QuantizerState>,
}

impl BlockQuantizers {
    pub fn dynamic(bits: u32, consumers: usize) -> Self {
        Self {
            first: QuantizerState::dynamic(bits),
            act: QuantizerState::dynamic(bits),
            second: vec![QuantizerState::dynamic(bits); consumers],
        }
    }
}

/// Bound quantizers for a single graph.
#[derive(Clone, Debug)]
pub struct BlockBinding {
    pub first: Bound,
    pub act: Bound,
    pub second: Vec<Bound>,
}

impl BlockBinding {
    pub fn identity(consumers: usize) -> Self {
        Self { first: Bound::Off, act: Bound::Off, second: vec![Bound::Off; consumers] }
    }

    pub fn bind(g: &mut Graph, q: &BlockQuantizers, train_range: bool) -> Result<Self> {
        Ok(Self {
            first: q.first.bind(g, train_range)?,
            act: q.act.bind(g, train_range)?,
            second: q.second.iter().map(|s| s.bind(g, train_range)).collect::<Result<_>>()?,
        })
    }
}

/// One adapter instance with the layers it mediates. The block owns copies of
/// the layer parameters; nothing here writes back to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadapterBlock {
    pub first: FirstLayer,
    pub consumers: Vec<Linear>,
    #[serde(skip)]
    pub between: Option<PiecewiseLinear>,
    /// `None` means all three quantizers are identity.
    pub quant: Option<BlockQuantizers>,
    pub params: QuadapterParams,
}

impl QuadapterBlock {
    pub fn new(
        first: FirstLayer,
        consumers: Vec<Linear>,
        between: Option<PiecewiseLinear>,
        quant: Option<BlockQuantizers>,
    ) -> Result<Self> {
        let d = first.out_dim();
        if consumers.is_empty() {
            return Err(Error::Dimension("a block needs at least one consumer".into()));
        }
        if let Some(c) = consumers.iter().find(|c| c.in_dim() != d) {
            return Err(Error::Dimension(format!(
                "consumer expects {} channels, first layer produces {d}",
                c.in_dim()
            )));
        }
        if let FirstLayer::LayerNorm { gamma, beta } = &first {
            if gamma.len() != beta.len() {
                return Err(Error::Dimension("layer-norm gamma and beta differ in width".into()));
            }
        }
        if let FirstLayer::Linear(l) = &first {
            if l.bias.len() != d {
                return Err(Error::Dimension("first-layer bias width".into()));
            }
        }
        if let Some(q) = &quant {
            if q.second.len() != consumers.len() {
                return Err(Error::Dimension("one weight quantizer per consumer".into()));
            }
        }
        let between_kind = match between {
            None => Between::None,
            Some(PiecewiseLinear::Relu) => Between::Relu,
            Some(PiecewiseLinear::LeakyRelu(s)) => Between::LeakyRelu(s),
        };
        if let Applicability::Rejected(reason) =
            check_applicability(first.kind(), between_kind, LayerKind::Linear)
        {
            return Err(Error::Applicability(reason));
        }
        Ok(Self { first, consumers, between, quant, params: QuadapterParams::init_identity(d)? })
    }

    pub fn dim(&self) -> usize {
        self.first.out_dim()
    }

    pub fn consumer_weights(&self) -> Vec<&Tensor> {
        self.consumers.iter().map(|c| &c.weight).collect()
    }

    /// CLE initialization from this block's weights.
    pub fn init_cle(&self) -> Result<CleInit> {
        init_cle(&self.first.channel_ranges(), &consumer_channel_ranges(&self.consumer_weights()))
    }

    pub fn binding(&self, g: &mut Graph, train_range: bool) -> Result<BlockBinding> {
        match &self.quant {
            Some(q) => BlockBinding::bind(g, q, train_range),
            None => Ok(BlockBinding::identity(self.consumers.len())),
        }
    }

    /// Adapted forward on `x` (normalized rows for a layer-norm block); one output per consumer.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.params.validate()?;
        let mut g = Graph::new();
        let xn = g.constant(x.clone())?;
        let alpha = g.constant(self.params.as_tensor())?;
        let binding = self.binding(&mut g, false)?;
        let outs = block_forward(&mut g, self, xn, alpha, &binding)?;
        Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
    }

    /// Unadapted, unquantized forward: `y_k = f(x·W1 + b1)·W2_k + b2_k`.
    pub fn reference_forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone())?;
        let h = match &self.first {
            FirstLayer::Linear(l) => {
                let w = g.constant(l.weight.clone())?;
                let b = g.constant(l.bias.clone())?;
                let m = g.matmul(xn, w)?;
                g.add_row(m, b)?
            }
            FirstLayer::LayerNorm { gamma, beta } => {
                let gm = g.constant(gamma.clone())?;
                let bt = g.constant(beta.clone())?;
                let m = g.mul_cols(xn, gm)?;
                g.add_row(m, bt)?
            }
        };
        let h = match self.between {
            Some(kind) => g.piecewise_linear(h, kind)?,
            None => h,
        };
        let mut outs = Vec::new();
        for c in &self.consumers {
            let w = g.constant(c.weight.clone())?;
            let b = g.constant(c.bias.clone())?;
            let m = g.matmul(h, w)?;
            let y = g.add_row(m, b)?;
            outs.push(g.value(y).clone());
        }
        Ok(outs)
    }

    /// Rewrites the scales into the weights.
    pub fn fold(&self) -> Result<FoldedWeights> {
        fold(&self.first, &self.consumer_weights(), &self.params)
    }
}

/// Weights with the adapter scales absorbed.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedWeights {
    pub first: FirstLayer,
    pub consumers: Vec<Tensor>,
}

/// The adapted first layer in the graph: `Q1(W1·A)` applied to `x`, plus `A·b1`.
/// `alpha` may be `None`, in which case no scaling op is emitted.
pub fn scaled_first_layer(
    g: &mut Graph,
    first: &FirstLayer,
    x: NodeId,
    alpha: Option<NodeId>,
    weight_quant: Bound,
    weight_grad: bool,
) -> Result<NodeId> {
    let (w, b) = match first {
        FirstLayer::Linear(l) => (l.weight.clone(), l.bias.clone()),
        FirstLayer::LayerNorm { gamma, beta } => (gamma.clone(), beta.clone()),
    };
    let w = g.leaf(w, weight_grad)?;
    let b = g.leaf(b, weight_grad)?;
    scaled_first_layer_nodes(g, matches!(first, FirstLayer::LayerNorm { .. }), x, w, b, alpha, weight_quant)
}

/// Node-level variant of [`scaled_first_layer`] for callers that own the parameter leaves.
pub fn scaled_first_layer_nodes(
    g: &mut Graph,
    layer_norm: bool,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    alpha: Option<NodeId>,
    weight_quant: Bound,
) -> Result<NodeId> {
    let (w, b) = match alpha {
        Some(a) => (g.mul_cols(w, a)?, g.mul_cols(b, a)?),
        None => (w, b),
    };
    let wq = weight_quant.apply(g, w)?;
    let h = if layer_norm { g.mul_cols(x, wq)? } else { g.matmul(x, wq)? };
    g.add_row(h, b)
}

/// A consumer with input channels scaled by `1/alpha`: `h·Q2(A⁻¹·W2) + b2`.
pub fn scaled_consumer_nodes(
    g: &mut Graph,
    h: NodeId,
    w: NodeId,
    b: NodeId,
    inv_alpha: Option<NodeId>,
    weight_quant: Bound,
) -> Result<NodeId> {
    let w = match inv_alpha {
        Some(ia) => g.mul_rows(w, ia)?,
        None => w,
    };
    let wq = weight_quant.apply(g, w)?;
    let m = g.matmul(h, wq)?;
    g.add_row(m, b)
}

/// Graph form of the adapted block. Returns one output node per consumer.
pub fn block_forward(
    g: &mut Graph,
    block: &QuadapterBlock,
    x: NodeId,
    alpha: NodeId,
    binding: &BlockBinding,
) -> Result<Vec<NodeId>> {
    if g.value(alpha).len() != block.dim() {
        return Err(Error::Dimension(format!(
            "alpha of {} for a block of width {}",
            g.value(alpha).len(),
            block.dim()
        )));
    }
    let h = scaled_first_layer(g, &block.first, x, Some(alpha), binding.first, false)?;
    let h = binding.act.apply(g, h)?;
    let h = match block.between {
        Some(kind) => g.piecewise_linear(h, kind)?,
        None => h,
    };
    let inv = g.recip(alpha)?;
    let mut outs = Vec::with_capacity(block.consumers.len());
    for (c, q) in block.consumers.iter().zip(&binding.second) {
        let w = g.constant(c.weight.clone())?;
        let b = g.constant(c.bias.clone())?;
        outs.push(scaled_consumer_nodes(g, h, w, b, Some(inv), *q)?);
    }
    Ok(outs)
}

/// Folds `alpha` into the weights: first-layer output channels times `alpha`,
/// consumer input channels times `1/alpha`.
pub fn fold(first: &FirstLayer, consumers: &[&Tensor], params: &QuadapterParams) -> Result<FoldedWeights> {
    params.validate()?;
    let a = &params.alpha;
    if first.out_dim() != a.len() || consumers.iter().any(|w| w.rows() != a.len()) {
        return Err(Error::Dimension("fold: width mismatch".into()));
    }
    let first = match first {
        FirstLayer::Linear(l) => FirstLayer::Linear(Linear {
            weight: scale_cols(&l.weight, a),
            bias: scale_cols(&l.bias, a),
        }),
        FirstLayer::LayerNorm { gamma, beta } => FirstLayer::LayerNorm {
            gamma: scale_cols(gamma, a),
            beta: scale_cols(beta, a),
        },
    };
    let inv: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
    let consumers = consumers.iter().map(|w| scale_rows(w, &inv)).collect();
    Ok(FoldedWeights { first, consumers })
}

/// Inverse of [`fold`].
pub fn unfold(folded: &FoldedWeights, params: &QuadapterParams) -> Result<(FirstLayer, Vec<Tensor>)> {
    params.validate()?;
    let a = &params.alpha;
    let inv: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
    let first = match &folded.first {
        FirstLayer::Linear(l) => FirstLayer::Linear(Linear {
            weight: scale_cols(&l.weight, &inv),
            bias: scale_cols(&l.bias, &inv),
        }),
        FirstLayer::LayerNorm { gamma, beta } => FirstLayer::LayerNorm {
            gamma: scale_cols(gamma, &inv),
            beta: scale_cols(beta, &inv),
        },
    };
    let consumers = folded.consumers.iter().map(|w| scale_rows(w, a)).collect();
    Ok((first, consumers))
}

/// Forward through folded weights with the same quantizer placement as [`block_forward`].
pub fn folded_forward(
    g: &mut Graph,
    folded: &FoldedWeights,
    biases: &[&Tensor],
    between: Option<PiecewiseLinear>,
    x: NodeId,
    binding: &BlockBinding,
) -> Result<Vec<NodeId>> {
    let h = scaled_first_layer(g, &folded.first, x, None, binding.first, false)?;
    let h = binding.act.apply(g, h)?;
    let h = match between {
        Some(kind) => g.piecewise_linear(h, kind)?,
        None => h,
    };
    let mut outs = Vec::new();
    for ((w, b), q) in folded.consumers.iter().zip(biases).zip(&binding.second) {
        let w = g.constant(w.clone())?;
        let b = g.constant((*b).clone())?;
        outs.push(scaled_consumer_nodes(g, h, w, b, None, *q)?);
    }
    Ok(outs)
}

/// `t[.., c] * v[c]`, computed exactly as the graph's `mul_cols`.
pub fn scale_cols(t: &Tensor, v: &[f64]) -> Tensor {
    let cols = t.cols();
    let data = t.data().iter().enumerate().map(|(i, &e)| e * v[i % cols]).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

/// `t[r, ..] * v[r]`, computed exactly as the graph's `mul_rows`.
pub fn scale_rows(t: &Tensor, v: &[f64]) -> Tensor {
    let cols = t.cols();
    let data = t.data().iter().enumerate().map(|(i, &e)| e * v[i / cols]).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}
