//! Uniform asymmetric fake quantization.
//!
//! `Q(x) = s * (clip(round(x / s + o), 0, 2^b - 1) - o)` with
//! `s = (theta_max - theta_min) / (2^b - 1)` and `o = round(-theta_min / s)`.
//! Rounding is half-to-even throughout. Granularity is per tensor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a quantizer's range comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Range recomputed from every tensor that passes through.
    Dynamic,
    /// Range aggregated over calibration batches, then frozen.
    Static,
    /// Range is a trainable parameter pair.
    Learned,
}

/// The quantization parameter pair `(theta_min, theta_max)` plus bit depth and mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub theta_min: f64,
    pub theta_max: f64,
    pub bits: u32,
    pub mode: QuantMode,
    /// Whether any data has been observed (dynamic/static) or the range was set explicitly.
    pub observed: bool,
    /// Static calibration has finished; the range no longer follows data.
    pub frozen: bool,
}

/// Scale and integer offset derived from a range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleOffset {
    pub scale: f64,
    pub offset: i64,
}

impl ScaleOffset {
    pub fn levels(bits: u32) -> f64 {
        ((1u64 << bits) - 1) as f64
    }

    /// Quantizes one value onto the grid.
    #[inline]
    pub fn apply(&self, x: f64, levels: f64) -> f64 {
        let o = self.offset as f64;
        let q = (x / self.scale + o).round_ties_even().clamp(0.0, levels);
        self.scale * (q - o)
    }

    /// Smallest and largest representable values.
    pub fn grid_bounds(&self, levels: f64) -> (f64, f64) {
        let o = self.offset as f64;
        (self.scale * (0.0 - o), self.scale * (levels - o))
    }
}

/// Derives `(s, o)` from a range; the offset is rounded half-to-even and clamped into `[0, 2^b - 1]`.
pub fn derive_scale_offset(theta_min: f64, theta_max: f64, bits: u32) -> Result<ScaleOffset> {
    if !(theta_max > theta_min) || !theta_min.is_finite() || !theta_max.is_finite() {
        return Err(Error::DegenerateRange { min: theta_min, max: theta_max });
    }
    let levels = ScaleOffset::levels(bits);
    let scale = (theta_max - theta_min) / levels;
    let offset = (-theta_min / scale).round_ties_even().clamp(0.0, levels) as i64;
    Ok(ScaleOffset { scale, offset })
}

/// Applies the quantizer elementwise for a fixed range.
pub fn quantize_slice(x: &[f64], theta_min: f64, theta_max: f64, bits: u32) -> Result<Vec<f64>> {
    let so = derive_scale_offset(theta_min, theta_max, bits)?;
    let levels = ScaleOffset::levels(bits);
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        if v.is_nan() {
            return Err(Error::NonFinite("fake_quantize input".into()));
        }
        out.push(so.apply(v, levels));
    }
    Ok(out)
}

/// Zero-inclusive `(min, max)` of a slice.
pub fn zero_inclusive_range(x: &[f64]) -> (f64, f64) {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (lo.min(0.0), hi.max(0.0))
}

impl QuantizerState {
    fn with_mode(bits: u32, mode: QuantMode) -> Self {
        assert!((2..=32).contains(&bits), "bit depth must be in 2..=32");
        Self { theta_min: 0.0, theta_max: 0.0, bits, mode, observed: false, frozen: false }
    }

    pub fn dynamic(bits: u32) -> Self {
        Self::with_mode(bits, QuantMode::Dynamic)
    }

    /// A static quantizer awaiting calibration batches.
    pub fn static_uncalibrated(bits: u32) -> Self {
        Self::with_mode(bits, QuantMode::Static)
    }

    /// A frozen static quantizer with an explicit range (zero-inclusion applied).
    pub fn fixed(theta_min: f64, theta_max: f64, bits: u32) -> Self {
        let mut q = Self::with_mode(bits, QuantMode::Static);
        q.theta_min = theta_min.min(0.0);
        q.theta_max = theta_max.max(0.0);
        q.observed = true;
        q.frozen = true;
        q
    }

    pub fn trainable(&self) -> bool {
        self.mode == QuantMode::Learned
    }

    pub fn scale_offset(&self) -> Result<ScaleOffset> {
        derive_scale_offset(self.theta_min, self.theta_max, self.bits)
    }

    /// Dynamic: replace the range with the batch range. Static (before freezing):
    /// widen the running range. Learned or frozen static: contract error.
    pub fn observe_range(&mut self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed batch".into()));
        }
        let (lo, hi) = zero_inclusive_range(x);
        match self.mode {
            QuantMode::Dynamic => {
                self.theta_min = lo;
                self.theta_max = hi;
            }
            QuantMode::Static if !self.frozen => {
                if self.observed {
                    self.theta_min = self.theta_min.min(lo);
                    self.theta_max = self.theta_max.max(hi);
                } else {
                    self.theta_min = lo;
                    self.theta_max = hi;
                }
            }
            QuantMode::Static => {
                return Err(Error::Contract("static quantizer range is frozen".into()));
            }
            QuantMode::Learned => {
                return Err(Error::Contract("learned quantizer range cannot be re-observed".into()));
            }
        }
        self.observed = true;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Switches a calibrated quantizer to trainable range parameters.
    pub fn into_learned(mut self) -> Self {
        self.mode = QuantMode::Learned;
        self.frozen = true;
        self
    }

    /// Keeps the range zero-inclusive and non-degenerate after an optimizer step.
    pub fn clamp_range(&mut self) {
        self.theta_min = self.theta_min.min(0.0);
        self.theta_max = self.theta_max.max(0.0);
        let min_width = 1e-8;
        if self.theta_max - self.theta_min < min_width {
            self.theta_max = self.theta_min + min_width;
        }
    }

    /// The range this quantizer would apply to `x`: refreshed from `x` in dynamic mode.
    pub fn range_for(&self, x: &[f64]) -> (f64, f64) {
        match self.mode {
            QuantMode::Dynamic => zero_inclusive_range(x),
            _ => (self.theta_min, self.theta_max),
        }
    }
}

/// How a quantizer participates in one graph.
#[derive(Clone, Copy, Debug)]
pub enum Bound {
    /// Quantizer disabled (identity).
    Off,
    /// Range refreshed from the incoming tensor, constant for backward.
    Dynamic { bits: u32 },
    /// Range held by scalar nodes; trainable when those nodes require grad.
    Range { min: NodeId, max: NodeId, bits: u32 },
}

impl Bound {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match *self {
            Bound::Off => Ok(x),
            Bound::Dynamic { bits } => g.fake_quantize_dynamic(x, bits),
            Bound::Range { min, max, bits } => g.fake_quantize(x, min, max, bits),
        }
    }

    pub fn range_nodes(&self) -> Option<(NodeId, NodeId)> {
        match *self {
            Bound::Range { min, max, .. } => Some((min, max)),
            _ => None,
        }
    }
}

impl QuantizerState {
    /// Places this quantizer into `g`. Learned quantizers get trainable range
    /// leaves when `train_range` is set.
    pub fn bind(&self, g: &mut Graph, train_range: bool) -> Result<Bound> {
        match self.mode {
            QuantMode::Dynamic => Ok(Bound::Dynamic { bits: self.bits }),
            _ => {
                if !self.observed {
                    return Err(Error::Contract("static quantizer used before calibration".into()));
                }
                let grad = train_range && self.trainable();
                let min = g.leaf(Tensor::scalar(self.theta_min), grad)?;
                let max = g.leaf(Tensor::scalar(self.theta_max), grad)?;
                Ok(Bound::Range { min, max, bits: self.bits })
            }
        }
    }
}

/// Fake-quantizes a tensor. In dynamic mode the range is first refreshed from `x`.
pub fn fake_quantize(x: &Tensor, q: &mut QuantizerState) -> Result<Tensor> {
    if q.mode == QuantMode::Dynamic {
        q.observe_range(x.data())?;
    } else if !q.observed {
        return Err(Error::Contract("static quantizer used before calibration".into()));
    }
    let data = quantize_slice(x.data(), q.theta_min, q.theta_max, q.bits)?;
    Tensor::new(x.shape(), data)
}

/// Straight-through backward: in-range elements pass `upstream` to `dx`;
/// elements below `theta_min` route it to `d_theta_min`, above `theta_max` to
/// `d_theta_max`. Range gradients are zero unless the quantizer is learned.
pub fn fake_quantize_backward(
    x: &[f64],
    q: &QuantizerState,
    upstream: &[f64],
) -> (Vec<f64>, f64, f64) {
    let (lo, hi) = q.range_for(x);
    let (dx, dmin, dmax) = route_ste(x, lo, hi, upstream);
    if q.trainable() {
        (dx, dmin, dmax)
    } else {
        (dx, 0.0, 0.0)
    }
}

pub(crate) fn route_ste(x: &[f64], lo: f64, hi: f64, upstream: &[f64]) -> (Vec<f64>, f64, f64) {
    let mut dmin = 0.0;
    let mut dmax = 0.0;
    let dx = x
        .iter()
        .zip(upstream)
        .map(|(&v, &g)| {
            if v < lo {
                dmin += g;
                0.0
            } else if v > hi {
                dmax += g;
                0.0
            } else {
                g
            }
        })
        .collect();
    (dx, dmin, dmax)
}
