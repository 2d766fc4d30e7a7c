//! Training: FP pretraining of the toy model, block-wise calibration of the
//! adapters (phase 1), end-to-end fine-tuning of adapters and quantizer ranges
//! with frozen weights (phase 2), and the QAT baseline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{block_forward, BlockQuantizers, QuadapterBlock, QuadapterParams};
use crate::autodiff::Graph;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{QuantizedView, RunOptions, ToyTransformer, Trainable};
use crate::optim::{adam_step, AdamState};
use crate::quant::{zero_inclusive_range, QuantizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Plan {
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    pub steps: usize,
    /// Rows per mini-batch; each batch gets its own dynamic ranges.
    pub batch_rows: usize,
}

impl Default for Phase1Plan {
    fn default() -> Self {
        Self { lr: 0.1, decay: 0.2, decay_every: 100, steps: 500, batch_rows: 64 }
    }
}

impl Phase1Plan {
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / self.decay_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Plan {
    pub lr_alpha: f64,
    pub lr_theta: f64,
    /// Weight learning rate, used only by QAT.
    pub lr_weights: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub block_size: usize,
}

impl Default for Phase2Plan {
    fn default() -> Self {
        Self { lr_alpha: 1e-3, lr_theta: 1e-3, lr_weights: 1e-5, steps: 2000, batch_size: 4, block_size: 128 }
    }
}

impl Phase2Plan {
    /// Linear decay to zero over the run.
    pub fn lr_scale(&self, step: usize) -> f64 {
        1.0 - step as f64 / self.steps.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainPlan {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub block_size: usize,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self { lr: 3e-3, steps: 1500, batch_size: 8, block_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub bits: u32,
    /// Number of calibration sequences in `D1`.
    pub calib_sequences: usize,
    pub phase1: Phase1Plan,
    pub phase2: Phase2Plan,
    pub pretrain: PretrainPlan,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            bits: 8,
            calib_sequences: 10,
            phase1: Phase1Plan::default(),
            phase2: Phase2Plan::default(),
            pretrain: PretrainPlan::default(),
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.phase1.lr, self.phase2.lr_alpha, self.phase2.lr_theta, self.phase2.lr_weights, self.pretrain.lr];
        if lrs.iter().any(|lr| !(*lr >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("bit depth {} outside 2..=16", self.bits)));
        }
        if self.phase1.batch_rows == 0 || self.phase2.batch_size == 0 || self.phase2.block_size == 0 {
            return Err(Error::Config("batch shapes must be positive".into()));
        }
        if self.calib_sequences == 0 {
            return Err(Error::Config("calibration needs at least one sequence".into()));
        }
        Ok(())
    }
}

/// One row of a loss curve: `(step, block id or "e2e", loss)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub tag: String,
    pub loss: f64,
}

/// Samples `batch` random windows of `len + 1` tokens.
pub fn sample_windows<'a>(tokens: &'a [usize], batch: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'a [usize]>> {
    if tokens.len() < len + 1 {
        return Err(Error::Data(format!("corpus of {} tokens is shorter than one window of {}", tokens.len(), len + 1)));
    }
    Ok((0..batch)
        .map(|_| {
            let s = rng.random_range(0..=tokens.len() - len - 1);
            &tokens[s..s + len + 1]
        })
        .collect())
}

/// The calibration set `D1`: evenly spaced windows of `len` tokens drawn
/// round-robin from the given corpora.
pub fn calibration_set(corpora: &[&Corpus], count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    if corpora.is_empty() || count == 0 {
        return Err(Error::Data("calibration set needs data".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let c = corpora[i % corpora.len()];
        let per = count.div_ceil(corpora.len());
        let k = i / corpora.len();
        if c.len() < len {
            return Err(Error::Data(format!("corpus {} shorter than {len}", c.name)));
        }
        let stride = (c.len() - len) / per.max(1);
        let s = k * stride;
        out.push(c.tokens[s..s + len].to_vec());
    }
    Ok(out)
}

fn split_batch(windows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let inputs = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let targets = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    (inputs, targets)
}

/// FP next-token training of every weight. Returns the loss curve.
pub fn pretrain(model: &mut ToyTransformer, data: &Corpus, plan: &PretrainPlan, seed: u64) -> Result<Vec<LossPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut states: Vec<AdamState> = names.iter().map(|n| AdamState::new(model.params[n].len())).collect();
    let block = plan.block_size.min(model.config.t_max);
    let warmup = (plan.steps / 20).max(1);
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let windows = sample_windows(&data.tokens, plan.batch_size, block, &mut rng)?;
        let (inputs, targets) = split_batch(&windows);
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &refs, RunOptions::fp().training(Trainable { weights: true, ..Default::default() }))?;
        let loss = g.softmax_cross_entropy(out.logits, &targets)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Training(format!("pretraining loss diverged at step {step}")));
        }
        let grads = g.backward(loss)?;
        // warmup then cosine-free linear decay to 10%
        let lr = if step < warmup {
            plan.lr * (step + 1) as f64 / warmup as f64
        } else {
            plan.lr * (1.0 - 0.9 * (step - warmup) as f64 / (plan.steps - warmup).max(1) as f64)
        };
        for (name, st) in names.iter().zip(&mut states) {
            if let Some(gr) = grads.slice(out.weights[name]) {
                adam_step(model.params.get_mut(name).expect("param").data_mut(), gr, st, lr)?;
            }
        }
        curve.push(LossPoint { step, tag: "pretrain".into(), loss: lv });
    }
    Ok(curve)
}

/// FP inputs and outputs of one adapter block over `D1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockIoCache {
    pub site: String,
    /// Normalized layer-norm inputs, `[rows × d]`.
    pub inputs: Tensor,
    /// One output tensor per consumer.
    pub outputs: Vec<Tensor>,
}

impl BlockIoCache {
    pub fn rows(&self) -> usize {
        self.inputs.rows()
    }

    fn take_rows(&self, idx: &[usize]) -> (Tensor, Vec<Tensor>) {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(&[idx.len(), c], data).expect("shape")
        };
        (pick(&self.inputs), self.outputs.iter().map(pick).collect())
    }
}

/// Captures block inputs/outputs of every adapter site from FP forwards of
/// the unadapted model.
pub fn gather_all_block_io(model: &ToyTransformer, d1: &[Vec<usize>]) -> Result<BTreeMap<String, BlockIoCache>> {
    if d1.is_empty() {
        return Err(Error::Data("calibration set is empty".into()));
    }
    let sites = model.adapter_sites();
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<Vec<f64>>)> = BTreeMap::new();
    for seq in d1 {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &[seq.as_slice()], RunOptions::fp())?;
        for site in &sites {
            let entry = acc.entry(site.name.clone()).or_insert_with(|| (Vec::new(), vec![Vec::new(); site.consumers.len()]));
            entry.0.extend_from_slice(g.value(out.captures[&format!("{}:in", site.name)][0]).data());
            for (i, c) in site.consumers.iter().enumerate() {
                entry.1[i].extend_from_slice(g.value(out.captures[&format!("{c}:out")][0]).data());
            }
        }
    }
    let d = model.config.d_model;
    sites
        .iter()
        .map(|site| {
            let (inp, outs) = acc.remove(&site.name).expect("gathered");
            let rows = inp.len() / d;
            let outputs = outs
                .into_iter()
                .map(|o| {
                    let c = o.len() / rows;
                    Tensor::new(&[rows, c], o)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((site.name.clone(), BlockIoCache { site: site.name.clone(), inputs: Tensor::new(&[rows, d], inp)?, outputs }))
        })
        .collect()
}

pub fn gather_block_io(model: &ToyTransformer, d1: &[Vec<usize>], site: &str) -> Result<BlockIoCache> {
    model.site(site)?;
    gather_all_block_io(model, d1)?
        .remove(site)
        .ok_or_else(|| Error::Index(format!("no adapter site named {site}")))
}

/// Mean squared error of the adapted block against cached FP outputs, summed
/// over consumers. Quantizers use the block's own modes (dynamic ranges are
/// taken from the whole `x`).
pub fn block_mse(block: &QuadapterBlock, params: &QuadapterParams, x: &Tensor, targets: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let alpha = g.constant(params.as_tensor())?;
    let binding = block.binding(&mut g, false)?;
    let outs = block_forward(&mut g, block, xn, alpha, &binding)?;
    let mut total = 0.0;
    for (o, t) in outs.iter().zip(targets) {
        let l = g.mse(*o, t)?;
        total += g.value(l).data()[0];
    }
    Ok(total)
}

/// Outcome of calibrating one block.
#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub site: String,
    pub params: QuadapterParams,
    /// Full-cache loss before training.
    pub initial_loss: f64,
    /// Full-cache loss after training.
    pub final_loss: f64,
    /// Per-step mini-batch losses.
    pub curve: Vec<LossPoint>,
}

/// Adam on the block's `alpha` against `||y − ŷ||²` with dynamic quantizer
/// ranges per mini-batch. `alpha` starts from `block.params`.
pub fn calibrate_block(block: &QuadapterBlock, cache: &BlockIoCache, plan: &Phase1Plan, seed: u64) -> Result<CalibrationReport> {
    let mut params = block.params.clone();
    let initial_loss = block_mse(block, &params, &cache.inputs, &cache.outputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cache.rows()).collect();
    let batch = plan.batch_rows.min(cache.rows());
    let mut cursor = order.len();
    let mut state = AdamState::new(params.dim());
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (x, ys) = cache.take_rows(&order[cursor..cursor + batch]);
        cursor += batch;

        let mut g = Graph::new();
        let xn = g.constant(x)?;
        let alpha = g.leaf(params.as_tensor(), true)?;
        let binding = block.binding(&mut g, false)?;
        let outs = block_forward(&mut g, block, xn, alpha, &binding)?;
        let mut loss = None;
        for (o, y) in outs.iter().zip(&ys) {
            let l = g.mse(*o, y)?;
            loss = Some(match loss {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let loss = loss.expect("at least one consumer");
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Training(format!("calibration of {} diverged at step {step}", cache.site)));
        }
        let grads = g.backward(loss)?;
        let ga = grads.slice(alpha).ok_or_else(|| Error::Training("no alpha gradient".into()))?;
        adam_step(&mut params.alpha, ga, &mut state, plan.lr_at(step))?;
        params.clamp_positive();
        curve.push(LossPoint { step, tag: cache.site.clone(), loss: lv });
    }
    let final_loss = block_mse(block, &params, &cache.inputs, &cache.outputs)?;
    if !final_loss.is_finite() {
        return Err(Error::Training(format!("calibration of {} produced a non-finite loss", cache.site)));
    }
    Ok(CalibrationReport { site: cache.site.clone(), params, initial_loss, final_loss, curve })
}

/// Phase 1 for every site, bottom to top, each against FP targets. `init`
/// supplies starting scales (identity when absent). Model weights are only read.
pub fn calibrate_all(
    model: &ToyTransformer,
    d1: &[Vec<usize>],
    init: &BTreeMap<String, QuadapterParams>,
    plan: &TrainPlan,
) -> Result<(BTreeMap<String, QuadapterParams>, Vec<CalibrationReport>)> {
    let caches = gather_all_block_io(model, d1)?;
    let mut adapters = BTreeMap::new();
    let mut reports = Vec::new();
    for (i, site) in model.adapter_sites().iter().enumerate() {
        let mut block = model.block_for_site(site)?;
        block.quant = Some(BlockQuantizers::dynamic(plan.bits, site.consumers.len()));
        if let Some(p) = init.get(&site.name) {
            block.params = p.clone();
        }
        let report = calibrate_block(&block, &caches[&site.name], &plan.phase1, plan.seed.wrapping_add(i as u64))
            .map_err(|e| Error::Training(format!("block {}: {e}", site.name)))?;
        adapters.insert(site.name.clone(), report.params.clone());
        reports.push(report);
    }
    Ok((adapters, reports))
}

/// Analytical equalization for every site.
pub fn cle_adapters(model: &ToyTransformer) -> Result<(BTreeMap<String, QuadapterParams>, Vec<(String, usize)>)> {
    let mut out = BTreeMap::new();
    let mut dead = Vec::new();
    for site in model.adapter_sites() {
        let block = model.block_for_site(&site)?;
        let cle = block.init_cle()?;
        dead.extend(cle.dead_channels.iter().map(|&c| (site.name.clone(), c)));
        out.insert(site.name.clone(), cle.params);
    }
    Ok((out, dead))
}

/// Static activation ranges from `D1`: each calibration sequence runs with
/// dynamic activation quantization and the ranges seen at every site are
/// aggregated, then frozen.
pub fn init_static_quantizers(
    model: &ToyTransformer,
    adapters: &BTreeMap<String, QuadapterParams>,
    d1: &[Vec<usize>],
    bits: u32,
) -> Result<QuantizedView> {
    if d1.is_empty() {
        return Err(Error::Data("calibration set is empty".into()));
    }
    let probe = QuantizedView::dynamic(model, bits).with_adapters(adapters.clone());
    let mut act: BTreeMap<String, QuantizerState> =
        model.activation_sites().into_iter().map(|s| (s, QuantizerState::static_uncalibrated(bits))).collect();
    for seq in d1 {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &[seq.as_slice()], RunOptions::quantized(&probe))?;
        for (site, q) in &mut act {
            let nodes = &out.captures[site];
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for &n in nodes {
                let (l, h) = zero_inclusive_range(g.value(n).data());
                lo = lo.min(l);
                hi = hi.max(h);
            }
            q.observe_range(&[lo, hi])?;
        }
    }
    for q in act.values_mut() {
        q.freeze();
    }
    Ok(QuantizedView { weight_bits: bits, adapters: adapters.clone(), act })
}

/// Switches every activation quantizer to trainable ranges.
pub fn into_learned(mut view: QuantizedView) -> QuantizedView {
    for q in view.act.values_mut() {
        *q = q.clone().into_learned();
    }
    view
}

/// Mean cross-entropy of the quantized model on one batch of windows.
fn batch_loss_graph(
    model: &ToyTransformer,
    view: &QuantizedView,
    windows: &[&[usize]],
    train: Trainable,
) -> Result<(Graph, crate::model::ForwardOutput, crate::autodiff::NodeId)> {
    let (inputs, targets) = split_batch(windows);
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &refs, RunOptions::quantized(view).training(train))?;
    let loss = g.softmax_cross_entropy(out.logits, &targets)?;
    Ok((g, out, loss))
}

struct RangeOptimizer {
    states: BTreeMap<String, AdamState>,
}

impl RangeOptimizer {
    fn new(view: &QuantizedView) -> Self {
        Self { states: view.act.keys().map(|k| (k.clone(), AdamState::new(2))).collect() }
    }

    fn step(&mut self, view: &mut QuantizedView, out: &crate::model::ForwardOutput, grads: &crate::autodiff::Gradients, lr: f64) -> Result<()> {
        for (site, (nmin, nmax)) in &out.theta {
            let gmin = grads.slice(*nmin).map_or(0.0, |g| g[0]);
            let gmax = grads.slice(*nmax).map_or(0.0, |g| g[0]);
            let q = view.act.get_mut(site).expect("site");
            let mut theta = [q.theta_min, q.theta_max];
            adam_step(&mut theta, &[gmin, gmax], self.states.get_mut(site).expect("state"), lr)?;
            q.theta_min = theta[0];
            q.theta_max = theta[1];
            q.clamp_range();
        }
        Ok(())
    }
}

/// Phase 2: Adam on adapter scales and activation ranges against next-token
/// cross entropy; model weights are not touched.
pub fn finetune_end_to_end(
    model: &ToyTransformer,
    view: &QuantizedView,
    d2: &Corpus,
    plan: &Phase2Plan,
    seed: u64,
) -> Result<(QuantizedView, Vec<LossPoint>)> {
    let mut view = into_learned(view.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha_states: BTreeMap<String, AdamState> =
        view.adapters.iter().map(|(k, p)| (k.clone(), AdamState::new(p.dim()))).collect();
    let mut ranges = RangeOptimizer::new(&view);
    let block = plan.block_size.min(model.config.t_max);
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let windows = sample_windows(&d2.tokens, plan.batch_size, block, &mut rng)?;
        let (g, out, loss) = batch_loss_graph(model, &view, &windows, Trainable { weights: false, alpha: true, theta: true })?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Training(format!("fine-tuning loss diverged at step {step}")));
        }
        let grads = g.backward(loss)?;
        let scale = plan.lr_scale(step);
        for (site, node) in &out.alpha {
            if let Some(ga) = grads.slice(*node) {
                let p = view.adapters.get_mut(site).expect("adapter");
                adam_step(&mut p.alpha, ga, alpha_states.get_mut(site).expect("state"), plan.lr_alpha * scale)?;
                p.clamp_positive();
            }
        }
        ranges.step(&mut view, &out, &grads, plan.lr_theta * scale)?;
        curve.push(LossPoint { step, tag: "e2e".into(), loss: lv });
    }
    Ok((view, curve))
}

/// QAT: trains every model weight (and, with `train_ranges`, the activation
/// ranges) under fake quantization. Adapter scales present in `view` stay fixed.
pub fn qat_baseline(
    model: &ToyTransformer,
    view: &QuantizedView,
    d2: &Corpus,
    plan: &Phase2Plan,
    train_ranges: bool,
    seed: u64,
) -> Result<(ToyTransformer, QuantizedView, Vec<LossPoint>)> {
    let mut model = model.clone();
    let mut view = if train_ranges { into_learned(view.clone()) } else { view.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut states: Vec<AdamState> = names.iter().map(|n| AdamState::new(model.params[n].len())).collect();
    let mut ranges = RangeOptimizer::new(&view);
    let block = plan.block_size.min(model.config.t_max);
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let windows = sample_windows(&d2.tokens, plan.batch_size, block, &mut rng)?;
        let train = Trainable { weights: true, alpha: false, theta: train_ranges };
        let (g, out, loss) = batch_loss_graph(&model, &view, &windows, train)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Training(format!("QAT loss diverged at step {step}")));
        }
        let grads = g.backward(loss)?;
        let scale = plan.lr_scale(step);
        for (name, st) in names.iter().zip(&mut states) {
            if let Some(gr) = grads.slice(out.weights[name]) {
                adam_step(model.params.get_mut(name).expect("param").data_mut(), gr, st, plan.lr_weights * scale)?;
            }
        }
        if train_ranges {
            ranges.step(&mut view, &out, &grads, plan.lr_theta * scale)?;
        }
        curve.push(LossPoint { step, tag: "qat".into(), loss: lv });
    }
    Ok((model, view, curve))
}

/// Bitwise fingerprint of every parameter, for frozen-weight audits.
pub fn weight_fingerprint(model: &ToyTransformer) -> Vec<(String, Vec<u64>)> {
    model.params.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}
