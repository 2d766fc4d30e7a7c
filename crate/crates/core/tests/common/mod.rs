//! Independent reference code shared by the integration tests. Nothing here
//! calls into the library's quantizer or backward pass.

#![allow(dead_code)]

use quadapter::adapter::{block_forward, BlockBinding, FirstLayer, Linear, QuadapterBlock, QuadapterParams};
use quadapter::autodiff::Graph;
use quadapter::quant::Bound;
use quadapter::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain fake quantizer written from the formula.
pub fn ref_quant(x: f64, lo: f64, hi: f64, bits: u32) -> f64 {
    let levels = (2u64.pow(bits) - 1) as f64;
    let s = (hi - lo) / levels;
    let o = (-lo / s).round_ties_even().clamp(0.0, levels);
    let q = ((x / s).round_ties_even() + o).clamp(0.0, levels);
    s * (q - o)
}

pub fn ref_range(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().copied().fold(0.0, f64::min);
    let hi = xs.iter().copied().fold(0.0, f64::max);
    (lo, hi)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Parameters of one gradient-check configuration, flat row-major `[in × out]`.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub rows: usize,
    pub d_in: usize,
    pub d: usize,
    pub d_out: usize,
    pub layer_norm: bool,
    pub bits: u32,
    pub x: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub alpha: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub theta: (f64, f64),
    pub target: Vec<f64>,
}

/// Rounding noise frozen at the base point: `Q(v) - v` for dynamic weight
/// quantizers and `Q(h) - clamp(h)` for the learned activation quantizer.
pub struct Noise {
    pub w1: Vec<f64>,
    pub act: Vec<f64>,
    pub w2: Vec<f64>,
}

impl GradCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(3..8);
        let layer_norm = rng.random_bool(0.5);
        let d = rng.random_range(2..6);
        let d_in = if layer_norm { d } else { rng.random_range(2..6) };
        let d_out = rng.random_range(2..5);
        let bits = [4, 6, 8][rng.random_range(0..3)];
        let w1 = if layer_norm { randn(&mut rng, d, 1.5) } else { randn(&mut rng, d_in * d, 1.0) };
        let alpha = (0..d).map(|_| rng.random_range(0.3..3.0)).collect();
        let mut case = GradCase {
            rows,
            d_in,
            d,
            d_out,
            layer_norm,
            bits,
            x: randn(&mut rng, rows * d_in, 1.0),
            w1,
            b1: randn(&mut rng, d, 0.3),
            alpha,
            w2: randn(&mut rng, d * d_out, 1.0),
            b2: randn(&mut rng, d_out, 0.3),
            theta: (-1.0, 1.0),
            target: randn(&mut rng, rows * d_out, 1.0),
        };
        // clip roughly the outer fifth on each side
        let mut h = case.hidden_pre(None);
        h.sort_by(f64::total_cmp);
        let lo = h[h.len() / 5].min(-0.05);
        let hi = h[h.len() * 4 / 5].max(0.05);
        case.theta = (lo, hi);
        case
    }

    fn scaled_w1(&self) -> Vec<f64> {
        let d = self.d;
        self.w1.iter().enumerate().map(|(i, &w)| w * self.alpha[i % d]).collect()
    }

    fn scaled_w2(&self) -> Vec<f64> {
        let n = self.d_out;
        self.w2.iter().enumerate().map(|(i, &w)| w * (1.0 / self.alpha[i / n])).collect()
    }

    /// First-layer output before the activation quantizer.
    fn hidden_pre(&self, noise: Option<&Noise>) -> Vec<f64> {
        let mut w1 = self.scaled_w1();
        if let Some(n) = noise {
            for (w, e) in w1.iter_mut().zip(&n.w1) {
                *w += e;
            }
        }
        let mut h = vec![0.0; self.rows * self.d];
        for r in 0..self.rows {
            for j in 0..self.d {
                let mut acc = 0.0;
                if self.layer_norm {
                    acc = self.x[r * self.d + j] * w1[j];
                } else {
                    for i in 0..self.d_in {
                        acc += self.x[r * self.d_in + i] * w1[i * self.d + j];
                    }
                }
                h[r * self.d + j] = acc + self.b1[j] * self.alpha[j];
            }
        }
        h
    }

    pub fn noise(&self) -> Noise {
        let quant_all = |v: &[f64]| {
            let (lo, hi) = ref_range(v);
            v.iter().map(|&x| ref_quant(x, lo, hi, self.bits) - x).collect::<Vec<_>>()
        };
        let w1s = self.scaled_w1();
        let w1 = quant_all(&w1s);
        let partial = Noise { w1: w1.clone(), act: vec![], w2: vec![] };
        let h = self.hidden_pre(Some(&partial));
        let (lo, hi) = self.theta;
        let act = h.iter().map(|&v| ref_quant(v, lo, hi, self.bits) - v.clamp(lo, hi)).collect();
        let w2 = quant_all(&self.scaled_w2());
        Noise { w1, act, w2 }
    }

    /// Smallest distance of any pre-activation from a clip threshold.
    pub fn clip_margin(&self, noise: &Noise) -> f64 {
        let (lo, hi) = self.theta;
        self.hidden_pre(Some(noise))
            .iter()
            .map(|&v| (v - lo).abs().min((v - hi).abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Surrogate loss with round replaced by identity plus frozen noise.
    pub fn surrogate_loss(&self, noise: &Noise) -> f64 {
        let h = self.hidden_pre(Some(noise));
        let (lo, hi) = self.theta;
        let a: Vec<f64> = h.iter().zip(&noise.act).map(|(&v, e)| v.clamp(lo, hi) + e).collect();
        let w2: Vec<f64> = self.scaled_w2().iter().zip(&noise.w2).map(|(w, e)| w + e).collect();
        let mut loss = 0.0;
        for r in 0..self.rows {
            for k in 0..self.d_out {
                let mut acc = self.b2[k];
                for j in 0..self.d {
                    acc += a[r * self.d + j] * w2[j * self.d_out + k];
                }
                let diff = acc - self.target[r * self.d_out + k];
                loss += diff * diff;
            }
        }
        loss / (self.rows * self.d_out) as f64
    }

    pub fn block(&self) -> QuadapterBlock {
        let first = if self.layer_norm {
            FirstLayer::LayerNorm {
                gamma: Tensor::vector(self.w1.clone()),
                beta: Tensor::vector(self.b1.clone()),
            }
        } else {
            FirstLayer::Linear(
                Linear::new(Tensor::new(&[self.d_in, self.d], self.w1.clone()).unwrap(), Tensor::vector(self.b1.clone()))
                    .unwrap(),
            )
        };
        let consumer = Linear::new(
            Tensor::new(&[self.d, self.d_out], self.w2.clone()).unwrap(),
            Tensor::vector(self.b2.clone()),
        )
        .unwrap();
        let mut block = QuadapterBlock::new(first, vec![consumer], None, None).unwrap();
        block.params = QuadapterParams { alpha: self.alpha.clone() };
        block
    }

    /// Library forward and backward: `(loss, d_alpha, d_theta, d_w1, d_b1, d_w2)`.
    pub fn library_grads(&self) -> (f64, Vec<f64>, (f64, f64), Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[self.rows, self.d_in], self.x.clone()).unwrap()).unwrap();
        let w1_shape: Vec<usize> = if self.layer_norm { vec![self.d] } else { vec![self.d_in, self.d] };
        let w1 = g.leaf(Tensor::new(&w1_shape, self.w1.clone()).unwrap(), true).unwrap();
        let b1 = g.leaf(Tensor::vector(self.b1.clone()), true).unwrap();
        let alpha = g.leaf(Tensor::vector(self.alpha.clone()), true).unwrap();
        let w2 = g.leaf(Tensor::new(&[self.d, self.d_out], self.w2.clone()).unwrap(), true).unwrap();
        let b2 = g.leaf(Tensor::vector(self.b2.clone()), true).unwrap();
        let tmin = g.leaf(Tensor::scalar(self.theta.0), true).unwrap();
        let tmax = g.leaf(Tensor::scalar(self.theta.1), true).unwrap();
        let wq = Bound::Dynamic { bits: self.bits };
        let h = quadapter::adapter::scaled_first_layer_nodes(&mut g, self.layer_norm, x, w1, b1, Some(alpha), wq)
            .unwrap();
        let a = Bound::Range { min: tmin, max: tmax, bits: self.bits }.apply(&mut g, h).unwrap();
        let inv = g.recip(alpha).unwrap();
        let y = quadapter::adapter::scaled_consumer_nodes(&mut g, a, w2, b2, Some(inv), wq).unwrap();
        let loss = g.mse(y, &Tensor::new(&[self.rows, self.d_out], self.target.clone()).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        let v = |id| grads.slice(id).map(<[f64]>::to_vec).unwrap_or_default();
        (
            g.value(loss).data()[0],
            v(alpha),
            (v(tmin)[0], v(tmax)[0]),
            v(w1),
            v(b1),
            v(w2),
        )
    }
}

/// Central differences of `f` around each coordinate of `get(case)`.
pub fn central_diff(
    case: &GradCase,
    noise: &Noise,
    len: usize,
    set: impl Fn(&mut GradCase, usize, f64),
    get: impl Fn(&GradCase, usize) -> f64,
) -> Vec<f64> {
    let h = 1e-5;
    (0..len)
        .map(|i| {
            let base = get(case, i);
            let mut up = case.clone();
            set(&mut up, i, base + h);
            let mut dn = case.clone();
            set(&mut dn, i, base - h);
            (up.surrogate_loss(noise) - dn.surrogate_loss(noise)) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error over all checked gradients for one configuration, or
/// `None` when the configuration sits too close to a clip threshold.
pub fn grad_check(seed: u64) -> Option<f64> {
    let case = GradCase::random(seed);
    let noise = case.noise();
    if case.clip_margin(&noise) < 1e-3 {
        return None;
    }
    let (loss, d_alpha, d_theta, d_w1, d_b1, d_w2) = case.library_grads();
    assert!((loss - case.surrogate_loss(&noise)).abs() <= 1e-12 * loss.abs().max(1.0), "surrogate mismatch");
    let fd_alpha = central_diff(&case, &noise, case.d, |c, i, v| c.alpha[i] = v, |c, i| c.alpha[i]);
    let fd_w1 = central_diff(&case, &noise, case.w1.len(), |c, i, v| c.w1[i] = v, |c, i| c.w1[i]);
    let fd_b1 = central_diff(&case, &noise, case.d, |c, i, v| c.b1[i] = v, |c, i| c.b1[i]);
    let fd_w2 = central_diff(&case, &noise, case.w2.len(), |c, i, v| c.w2[i] = v, |c, i| c.w2[i]);
    let fd_theta = central_diff(
        &case,
        &noise,
        2,
        |c, i, v| if i == 0 { c.theta.0 = v } else { c.theta.1 = v },
        |c, i| if i == 0 { c.theta.0 } else { c.theta.1 },
    );
    let d_theta = [d_theta.0, d_theta.1];
    let pairs = d_alpha
        .iter()
        .zip(&fd_alpha)
        .chain(d_w1.iter().zip(&fd_w1))
        .chain(d_b1.iter().zip(&fd_b1))
        .chain(d_w2.iter().zip(&fd_w2))
        .chain(d_theta.iter().zip(&fd_theta));
    Some(pairs.map(|(&a, &f)| rel_err(a, f)).fold(0.0, f64::max))
}

/// Two-channel block with an outlier on channel 1: layer-norm first layer,
/// one linear consumer, all quantizers dynamic at `bits`.
pub fn outlier_block(seed: u64, bits: u32, rows: usize) -> (QuadapterBlock, Tensor, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Tensor::vector(vec![1.0, 100.0]);
    let beta = Tensor::vector(vec![0.1, -5.0]);
    let w2 = Tensor::new(&[2, 2], vec![0.8, -0.5, 0.6 / 100.0, 0.9 / 100.0]).unwrap();
    let b2 = Tensor::vector(vec![0.05, -0.02]);
    let x = Tensor::new(&[rows, 2], randn(&mut rng, rows * 2, 1.7)).unwrap();
    let mut block = QuadapterBlock::new(
        FirstLayer::LayerNorm { gamma, beta },
        vec![Linear::new(w2, b2).unwrap()],
        None,
        Some(quadapter::adapter::BlockQuantizers::dynamic(bits, 1)),
    )
    .unwrap();
    let targets = {
        let mut fp = block.clone();
        fp.quant = None;
        fp.reference_forward(&x).unwrap()
    };
    block.params = QuadapterParams::init_identity(2).unwrap();
    (block, x, targets)
}

/// Block MSE computed with plain loops and the reference quantizer.
pub fn ref_block_mse(block: &QuadapterBlock, alpha: &[f64], x: &Tensor, targets: &[Tensor]) -> f64 {
    let bits = block.quant.as_ref().unwrap().act.bits;
    let (gamma, beta) = match &block.first {
        FirstLayer::LayerNorm { gamma, beta } => (gamma.data(), beta.data()),
        FirstLayer::Linear(_) => panic!("layer-norm block expected"),
    };
    let d = alpha.len();
    let gs: Vec<f64> = (0..d).map(|j| gamma[j] * alpha[j]).collect();
    let (glo, ghi) = ref_range(&gs);
    let gq: Vec<f64> = gs.iter().map(|&v| ref_quant(v, glo, ghi, bits)).collect();
    let rows = x.rows();
    let h: Vec<f64> = (0..rows * d).map(|i| x.data()[i] * gq[i % d] + beta[i % d] * alpha[i % d]).collect();
    let (hlo, hhi) = ref_range(&h);
    let hq: Vec<f64> = h.iter().map(|&v| ref_quant(v, hlo, hhi, bits)).collect();
    let mut total = 0.0;
    for (c, t) in block.consumers.iter().zip(targets) {
        let n = c.weight.cols();
        let ws: Vec<f64> = c.weight.data().iter().enumerate().map(|(i, &w)| w * (1.0 / alpha[i / n])).collect();
        let (wlo, whi) = ref_range(&ws);
        let wq: Vec<f64> = ws.iter().map(|&v| ref_quant(v, wlo, whi, bits)).collect();
        let mut sse = 0.0;
        for r in 0..rows {
            for k in 0..n {
                let mut acc = c.bias.data()[k];
                for j in 0..d {
                    acc += hq[r * d + j] * wq[j * n + k];
                }
                let e = acc - t.data()[r * n + k];
                sse += e * e;
            }
        }
        total += sse / (rows * n) as f64;
    }
    total
}

/// Dense log-spaced grid over per-channel scales; returns the best MSE found.
pub fn grid_search_optimum(block: &QuadapterBlock, x: &Tensor, targets: &[Tensor], per_axis: usize) -> (f64, Vec<f64>) {
    let grid: Vec<f64> = (0..per_axis)
        .map(|i| 10f64.powf(-4.0 + 5.0 * i as f64 / (per_axis - 1) as f64))
        .collect();
    let mut best = (f64::INFINITY, vec![1.0, 1.0]);
    for &a0 in &grid {
        for &a1 in &grid {
            let mse = ref_block_mse(block, &[a0, a1], x, targets);
            if mse < best.0 {
                best = (mse, vec![a0, a1]);
            }
        }
    }
    best
}

/// Quantizers-off adapted forward through the graph, for identity checks.
pub fn adapted_plain(block: &QuadapterBlock, x: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone()).unwrap();
    let a = g.constant(block.params.as_tensor()).unwrap();
    let outs = block_forward(&mut g, block, xn, a, &BlockBinding::identity(block.consumers.len())).unwrap();
    outs.into_iter().map(|o| g.value(o).clone()).collect()
}

/// A random block with quantizers at `bits` (or none), layer-norm or linear first layer,
/// 1-3 consumers and an optional scale-invariant activation.
pub fn random_block(seed: u64, layer_norm: bool, bits: Option<u32>) -> (QuadapterBlock, Tensor) {
    use quadapter::adapter::BlockQuantizers;
    use quadapter::autodiff::PiecewiseLinear;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..10);
    let d_in = if layer_norm { d } else { rng.random_range(2..10) };
    let rows = rng.random_range(1..12);
    let n_cons = rng.random_range(1..4);
    let first = if layer_norm {
        FirstLayer::LayerNorm {
            gamma: Tensor::vector(randn(&mut rng, d, 2.0)),
            beta: Tensor::vector(randn(&mut rng, d, 0.5)),
        }
    } else {
        FirstLayer::Linear(
            Linear::new(
                Tensor::new(&[d_in, d], randn(&mut rng, d_in * d, 1.0)).unwrap(),
                Tensor::vector(randn(&mut rng, d, 0.5)),
            )
            .unwrap(),
        )
    };
    let consumers = (0..n_cons)
        .map(|_| {
            let out = rng.random_range(1..8);
            Linear::new(
                Tensor::new(&[d, out], randn(&mut rng, d * out, 1.0)).unwrap(),
                Tensor::vector(randn(&mut rng, out, 0.5)),
            )
            .unwrap()
        })
        .collect();
    let between = match rng.random_range(0..3) {
        0 => None,
        1 => Some(PiecewiseLinear::Relu),
        _ => Some(PiecewiseLinear::LeakyRelu(0.1)),
    };
    let quant = bits.map(|b| BlockQuantizers::dynamic(b, n_cons));
    let mut block = QuadapterBlock::new(first, consumers, between, quant).unwrap();
    block.params = QuadapterParams {
        alpha: (0..d).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect(),
    };
    let x = Tensor::new(&[rows, d_in], randn(&mut rng, rows * d_in, 2.0)).unwrap();
    (block, x)
}

/// Relative error between output sets, scaled by the largest reference magnitude.
pub fn outputs_rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = y.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            x.max_abs_diff(y) / scale
        })
        .fold(0.0, f64::max)
}

/// Runs the folded forward with the block's quantizers.
pub fn folded_outputs(block: &QuadapterBlock, x: &Tensor) -> Vec<Tensor> {
    let folded = block.fold().unwrap();
    let biases: Vec<&Tensor> = block.consumers.iter().map(|c| &c.bias).collect();
    let mut g = Graph::new();
    let xn = g.constant(x.clone()).unwrap();
    let binding = block.binding(&mut g, false).unwrap();
    let outs = quadapter::adapter::folded_forward(&mut g, &folded, &biases, block.between, xn, &binding).unwrap();
    outs.into_iter().map(|o| g.value(o).clone()).collect()
}

/// Worst relative difference after fold then unfold.
pub fn unfold_roundtrip_err(block: &QuadapterBlock) -> f64 {
    let folded = block.fold().unwrap();
    let (first, cons) = quadapter::adapter::unfold(&folded, &block.params).unwrap();
    let pair = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1e-300)).fold(0.0, f64::max)
    };
    let mut worst: f64 = 0.0;
    match (&first, &block.first) {
        (FirstLayer::Linear(a), FirstLayer::Linear(b)) => {
            worst = worst.max(pair(&a.weight, &b.weight)).max(pair(&a.bias, &b.bias));
        }
        (FirstLayer::LayerNorm { gamma: ga, beta: ba }, FirstLayer::LayerNorm { gamma: gb, beta: bb }) => {
            worst = worst.max(pair(ga, gb)).max(pair(ba, bb));
        }
        _ => panic!("layer kind changed under fold"),
    }
    for (a, b) in cons.iter().zip(block.consumer_weights()) {
        worst = worst.max(pair(a, b));
    }
    worst
}

/// Row and column max-magnitudes after applying `alpha` to a layer pair
/// (`w1 [in × d]`, `w2 [d × out]`), in plain loops.
pub fn equalized_ranges(w1: &[f64], d_in: usize, w2: &[f64], d_out: usize, alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = alpha.len();
    let r1 = (0..d).map(|j| (0..d_in).map(|i| (w1[i * d + j] * alpha[j]).abs()).fold(0.0, f64::max)).collect();
    let r2 = (0..d).map(|j| (0..d_out).map(|k| (w2[j * d_out + k] / alpha[j]).abs()).fold(0.0, f64::max)).collect();
    (r1, r2)
}
