//! A small decoder-only transformer with adapter sites.
//!
//! Layout per block: `ln1 → fused qkv → causal attention → proj → residual`,
//! then `ln2 → fc → gelu → proj → residual`; a final layer norm feeds an
//! untied logit projection. Adapter sites sit between each layer norm and the
//! linear layer that consumes it: `h{l}.ln1 → h{l}.attn.qkv`,
//! `h{l}.ln2 → h{l}.mlp.fc`, and `ln_f → lm_head`.
//!
//! In quantized execution every weight is fake-quantized per tensor with a
//! range taken from the weight itself, and every activation at a matmul
//! boundary goes through a named activation quantizer. Biases, layer-norm
//! statistics, softmax, gelu internals and residual additions stay in full
//! precision.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{
    check_applicability, scaled_consumer_nodes, scaled_first_layer_nodes, Applicability, Between,
    FirstLayer, LayerKind, Linear, QuadapterBlock, QuadapterParams,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::quant::{zero_inclusive_range, Bound, QuantizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub t_max: usize,
    pub ln_eps: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            t_max: 128,
            ln_eps: 1e-5,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.d_model, self.layers, self.heads, self.d_ff, self.t_max];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("layer-norm epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// An adapter site: the layer norm whose affine output is scaled and the
/// linear layers that consume it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterSite {
    pub name: String,
    pub consumers: Vec<String>,
}

/// Named parameters of the model. The map order is the canonical order used
/// for initialization and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl ToyTransformer {
    /// Random initialization: weights `N(0, 0.02²)`, zero biases, unit layer-norm gains.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let (d, v, f) = (config.d_model, config.vocab, config.d_ff);
        shapes.insert("tok_emb".into(), vec![v, d]);
        shapes.insert("pos_emb".into(), vec![config.t_max, d]);
        for l in 0..config.layers {
            let p = format!("h{l}");
            for ln in ["ln1", "ln2"] {
                shapes.insert(format!("{p}.{ln}.gamma"), vec![d]);
                shapes.insert(format!("{p}.{ln}.beta"), vec![d]);
            }
            for (name, i, o) in [("attn.qkv", d, 3 * d), ("attn.proj", d, d), ("mlp.fc", d, f), ("mlp.proj", f, d)] {
                shapes.insert(format!("{p}.{name}.w"), vec![i, o]);
                shapes.insert(format!("{p}.{name}.b"), vec![o]);
            }
        }
        shapes.insert("ln_f.gamma".into(), vec![d]);
        shapes.insert("ln_f.beta".into(), vec![d]);
        if !config.tie_embeddings {
            shapes.insert("lm_head.w".into(), vec![d, v]);
            shapes.insert("lm_head.b".into(), vec![v]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") {
                    Tensor::ones(&shape)
                } else if name.ends_with(".beta") || name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    normal(&mut rng, &shape, 0.02)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Index(format!("no parameter named {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Every adapter site, bottom to top.
    pub fn adapter_sites(&self) -> Vec<AdapterSite> {
        let mut sites = Vec::new();
        for l in 0..self.config.layers {
            sites.push(AdapterSite { name: format!("h{l}.ln1"), consumers: vec![format!("h{l}.attn.qkv")] });
            sites.push(AdapterSite { name: format!("h{l}.ln2"), consumers: vec![format!("h{l}.mlp.fc")] });
        }
        if !self.config.tie_embeddings {
            sites.push(AdapterSite { name: "ln_f".into(), consumers: vec!["lm_head".into()] });
        }
        sites
    }

    pub fn site(&self, name: &str) -> Result<AdapterSite> {
        self.adapter_sites()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Index(format!("no adapter site named {name}")))
    }

    /// A standalone block holding copies of the site's parameters.
    pub fn block_for_site(&self, site: &AdapterSite) -> Result<QuadapterBlock> {
        let first = FirstLayer::LayerNorm {
            gamma: self.param(&format!("{}.gamma", site.name))?.clone(),
            beta: self.param(&format!("{}.beta", site.name))?.clone(),
        };
        let consumers = site
            .consumers
            .iter()
            .map(|c| {
                Linear::new(self.param(&format!("{c}.w"))?.clone(), self.param(&format!("{c}.b"))?.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        QuadapterBlock::new(first, consumers, None, None)
    }

    /// Names of activation quantizer sites, bottom to top.
    pub fn activation_sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.config.layers {
            for s in [
                "ln1", "attn.qkv", "attn.scores", "attn.probs", "attn.ctx", "attn.proj", "ln2", "mlp.fc",
                "mlp.gelu", "mlp.proj",
            ] {
                out.push(format!("h{l}.{s}"));
            }
        }
        out.push("ln_f".into());
        out.push("lm_head".into());
        out
    }

    /// Parameters that are fake-quantized as weights. Biases and layer-norm
    /// shifts are excluded.
    pub fn quantized_weights(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !(n.ends_with(".b") || n.ends_with(".beta")))
            .cloned()
            .collect()
    }

    /// Scales `channels` of a layer-norm site by `factor` and the consumers'
    /// matching input rows by `1/factor`. The function is unchanged up to
    /// rounding; the activation's channel ranges are not.
    pub fn inject_outliers(&mut self, site: &str, channels: &[usize], factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Contract(format!("outlier factor must be positive, got {factor}")));
        }
        let site = self.site(site)?;
        let d = self.config.d_model;
        if let Some(&c) = channels.iter().find(|&&c| c >= d) {
            return Err(Error::Index(format!("channel {c} outside width {d}")));
        }
        for suffix in ["gamma", "beta"] {
            let t = self.params.get_mut(&format!("{}.{suffix}", site.name)).expect("site param");
            for &c in channels {
                t.data_mut()[c] *= factor;
            }
        }
        let inv = 1.0 / factor;
        for consumer in &site.consumers {
            let w = self.params.get_mut(&format!("{consumer}.w")).expect("consumer weight");
            let cols = w.cols();
            for &c in channels {
                for v in &mut w.data_mut()[c * cols..(c + 1) * cols] {
                    *v *= inv;
                }
            }
        }
        Ok(())
    }

    /// Checks every site and returns identity adapters for all of them.
    pub fn install_quadapters(&self) -> Result<BTreeMap<String, QuadapterParams>> {
        let mut out = BTreeMap::new();
        for site in self.adapter_sites() {
            if let Applicability::Rejected(reason) =
                check_applicability(LayerKind::LayerNorm, Between::None, LayerKind::Linear)
            {
                return Err(Error::Applicability(format!("{}: {reason}", site.name)));
            }
            out.insert(site.name.clone(), QuadapterParams::init_identity(self.config.d_model)?);
        }
        Ok(out)
    }

    /// Folds adapters into the parameters (the only mutation path besides
    /// training the weights themselves).
    pub fn fold_commit(&mut self, adapters: &BTreeMap<String, QuadapterParams>) -> Result<()> {
        for (name, params) in adapters {
            let site = self.site(name)?;
            let block = self.block_for_site(&site)?;
            let folded = crate::adapter::fold(&block.first, &block.consumer_weights(), params)?;
            let FirstLayer::LayerNorm { gamma, beta } = folded.first else {
                unreachable!("model sites are layer norms")
            };
            self.params.insert(format!("{name}.gamma"), gamma);
            self.params.insert(format!("{name}.beta"), beta);
            for (c, w) in site.consumers.iter().zip(folded.consumers) {
                self.params.insert(format!("{c}.w"), w);
            }
        }
        Ok(())
    }
}

/// The quantized view `M_Q`: adapter scales plus quantizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedView {
    pub weight_bits: u32,
    pub adapters: BTreeMap<String, QuadapterParams>,
    pub act: BTreeMap<String, QuantizerState>,
}

impl QuantizedView {
    /// No adapters; every activation quantizer dynamic.
    pub fn dynamic(model: &ToyTransformer, bits: u32) -> Self {
        let act = model.activation_sites().into_iter().map(|s| (s, QuantizerState::dynamic(bits))).collect();
        Self { weight_bits: bits, adapters: BTreeMap::new(), act }
    }

    pub fn with_adapters(mut self, adapters: BTreeMap<String, QuadapterParams>) -> Self {
        self.adapters = adapters;
        self
    }

    pub fn quantizer(&self, site: &str) -> Result<&QuantizerState> {
        self.act.get(site).ok_or_else(|| Error::Index(format!("no activation quantizer {site}")))
    }

    pub fn learned(&self) -> bool {
        self.act.values().any(QuantizerState::trainable)
    }
}

/// What receives gradients in one forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    pub alpha: bool,
    pub theta: bool,
}

/// Execution options for [`ToyTransformer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct RunOptions<'a> {
    /// Adapters and quantizers; `None` is the plain model.
    pub view: Option<&'a QuantizedView>,
    /// When false, quantizers are ignored (adapters still scale, which is a
    /// no-op up to rounding).
    pub quantize: bool,
    pub train: Trainable,
}

impl<'a> RunOptions<'a> {
    pub fn fp() -> Self {
        Self { view: None, quantize: false, train: Trainable::default() }
    }

    pub fn quantized(view: &'a QuantizedView) -> Self {
        Self { view: Some(view), quantize: true, train: Trainable::default() }
    }

    pub fn fp_with(view: &'a QuantizedView) -> Self {
        Self { view: Some(view), quantize: false, train: Trainable::default() }
    }

    pub fn training(mut self, train: Trainable) -> Self {
        self.train = train;
        self
    }
}

/// Handles produced by one forward.
#[derive(Debug, Default)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub weights: BTreeMap<String, NodeId>,
    pub alpha: BTreeMap<String, NodeId>,
    pub theta: BTreeMap<String, (NodeId, NodeId)>,
    /// Pre-quantization inputs of every activation site (several pieces for
    /// attention scores/probabilities), adapter-site normalized inputs under
    /// `"{site}:in"`, and consumer outputs under `"{consumer}:out"`.
    pub captures: BTreeMap<String, Vec<NodeId>>,
}

struct Ctx<'a> {
    opts: RunOptions<'a>,
    out: ForwardOutput,
}

impl Ctx<'_> {
    fn weight_bound(&self) -> Bound {
        match (self.opts.quantize, self.opts.view) {
            (true, Some(v)) => Bound::Dynamic { bits: v.weight_bits },
            _ => Bound::Off,
        }
    }

    fn act_bound(&mut self, g: &mut Graph, site: &str) -> Result<Bound> {
        let Some(view) = self.opts.view.filter(|_| self.opts.quantize) else {
            return Ok(Bound::Off);
        };
        let q = view.quantizer(site)?;
        let b = q.bind(g, self.opts.train.theta)?;
        if let Some(nodes) = b.range_nodes() {
            if g.requires_grad(nodes.0) {
                self.out.theta.insert(site.to_string(), nodes);
            }
        }
        Ok(b)
    }

    fn capture(&mut self, key: impl Into<String>, nodes: Vec<NodeId>) {
        self.out.captures.insert(key.into(), nodes);
    }

    /// Quantizes an activation tensor held as several pieces with one shared range.
    fn quantize_act(&mut self, g: &mut Graph, site: &str, pieces: Vec<NodeId>) -> Result<Vec<NodeId>> {
        self.capture(site, pieces.clone());
        let bound = self.act_bound(g, site)?;
        let bound = match bound {
            Bound::Dynamic { bits } => {
                let (mut lo, mut hi) = (0.0f64, 0.0f64);
                for &p in &pieces {
                    let (l, h) = zero_inclusive_range(g.value(p).data());
                    lo = lo.min(l);
                    hi = hi.max(h);
                }
                let min = g.constant(Tensor::scalar(lo))?;
                let max = g.constant(Tensor::scalar(hi))?;
                Bound::Range { min, max, bits }
            }
            b => b,
        };
        pieces.into_iter().map(|p| bound.apply(g, p)).collect()
    }

    fn quantize_one(&mut self, g: &mut Graph, site: &str, x: NodeId) -> Result<NodeId> {
        Ok(self.quantize_act(g, site, vec![x])?[0])
    }
}

impl ToyTransformer {
    /// Runs a batch of equal-length sequences and returns logits `[B·T × V]`.
    pub fn forward(&self, g: &mut Graph, batch: &[&[usize]], opts: RunOptions<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let t = batch[0].len();
        if t == 0 || t > cfg.t_max || batch.iter().any(|s| s.len() != t) {
            return Err(Error::Dimension(format!("sequences must share a length in 1..={}", cfg.t_max)));
        }
        if let Some(&tok) = batch.iter().flat_map(|s| s.iter()).find(|&&tok| tok >= cfg.vocab) {
            return Err(Error::Index(format!("token {tok} outside vocabulary of {}", cfg.vocab)));
        }
        let mut ctx = Ctx { opts, out: ForwardOutput::default() };
        for (name, value) in &self.params {
            let id = g.leaf(value.clone(), opts.train.weights)?;
            ctx.out.weights.insert(name.clone(), id);
        }
        let w = |ctx: &Ctx, name: &str| ctx.out.weights[name];
        let wq = ctx.weight_bound();

        // Embeddings: quantized tables, unquantized sum.
        let tok = wq.apply(g, w(&ctx, "tok_emb"))?;
        let pos = wq.apply(g, w(&ctx, "pos_emb"))?;
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        for l in 0..cfg.layers {
            let p = format!("h{l}");
            // attention
            let qkv = self.adapted_site(g, &mut ctx, &format!("{p}.ln1"), x)?.remove(0);
            let ctx_rows = self.attention(g, &mut ctx, &p, qkv, b, t)?;
            let ctx_q = ctx.quantize_one(g, &format!("{p}.attn.ctx"), ctx_rows)?;
            let proj = linear(g, ctx_q, w(&ctx, &format!("{p}.attn.proj.w")), w(&ctx, &format!("{p}.attn.proj.b")), wq)?;
            let proj = ctx.quantize_one(g, &format!("{p}.attn.proj"), proj)?;
            x = g.add(x, proj)?;
            // feed-forward
            let fc = self.adapted_site(g, &mut ctx, &format!("{p}.ln2"), x)?.remove(0);
            let act = g.gelu(fc)?;
            let act = ctx.quantize_one(g, &format!("{p}.mlp.gelu"), act)?;
            let out = linear(g, act, w(&ctx, &format!("{p}.mlp.proj.w")), w(&ctx, &format!("{p}.mlp.proj.b")), wq)?;
            let out = ctx.quantize_one(g, &format!("{p}.mlp.proj"), out)?;
            x = g.add(x, out)?;
        }

        let logits = if cfg.tie_embeddings {
            let n = g.normalize(x, cfg.ln_eps)?;
            let gamma = wq.apply(g, w(&ctx, "ln_f.gamma"))?;
            let h = g.mul_cols(n, gamma)?;
            let h = g.add_row(h, w(&ctx, "ln_f.beta"))?;
            let h = ctx.quantize_one(g, "ln_f", h)?;
            let logits = g.matmul_nt(h, tok)?;
            ctx.quantize_one(g, "lm_head", logits)?
        } else {
            self.adapted_site(g, &mut ctx, "ln_f", x)?.remove(0)
        };
        ctx.out.logits = logits;
        Ok(ctx.out)
    }

    /// Layer norm → (adapter-scaled) affine → activation quantizer → consumers
    /// with inverse scaling → consumer output quantizers.
    fn adapted_site(&self, g: &mut Graph, ctx: &mut Ctx<'_>, name: &str, x: NodeId) -> Result<Vec<NodeId>> {
        let n = g.normalize(x, self.config.ln_eps)?;
        ctx.capture(format!("{name}:in"), vec![n]);
        let alpha = match ctx.opts.view.and_then(|v| v.adapters.get(name)) {
            Some(p) => {
                p.validate()?;
                let id = g.leaf(p.as_tensor(), ctx.opts.train.alpha)?;
                if ctx.opts.train.alpha {
                    ctx.out.alpha.insert(name.to_string(), id);
                }
                Some(id)
            }
            None => None,
        };
        let wq = ctx.weight_bound();
        let gamma = ctx.out.weights[&format!("{name}.gamma")];
        let beta = ctx.out.weights[&format!("{name}.beta")];
        let h = scaled_first_layer_nodes(g, true, n, gamma, beta, alpha, wq)?;
        let h = ctx.quantize_one(g, name, h)?;
        let inv = alpha.map(|a| g.recip(a)).transpose()?;
        let site = self.site(name)?;
        let mut outs = Vec::new();
        for c in &site.consumers {
            let (w, bias) = (ctx.out.weights[&format!("{c}.w")], ctx.out.weights[&format!("{c}.b")]);
            let y = scaled_consumer_nodes(g, h, w, bias, inv, wq)?;
            ctx.capture(format!("{c}:out"), vec![y]);
            outs.push(ctx.quantize_one(g, c, y)?);
        }
        Ok(outs)
    }

    fn attention(&self, g: &mut Graph, ctx: &mut Ctx<'_>, p: &str, qkv: NodeId, b: usize, t: usize) -> Result<NodeId> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = Vec::with_capacity(b * self.config.heads);
        let mut values = Vec::with_capacity(b * self.config.heads);
        for s in 0..b {
            let rows = g.slice_rows(qkv, s * t, t)?;
            for h in 0..self.config.heads {
                let q = g.slice_cols(rows, h * hd, hd)?;
                let k = g.slice_cols(rows, d + h * hd, hd)?;
                let v = g.slice_cols(rows, 2 * d + h * hd, hd)?;
                let sc = g.matmul_nt(q, k)?;
                scores.push(g.scale(sc, scale)?);
                values.push(v);
            }
        }
        let scores = ctx.quantize_act(g, &format!("{p}.attn.scores"), scores)?;
        let probs = scores.into_iter().map(|s| g.causal_softmax(s)).collect::<Result<Vec<_>>>()?;
        let probs = ctx.quantize_act(g, &format!("{p}.attn.probs"), probs)?;
        let mut seqs = Vec::with_capacity(b);
        for s in 0..b {
            let heads = (0..self.config.heads)
                .map(|h| {
                    let i = s * self.config.heads + h;
                    g.matmul(probs[i], values[i])
                })
                .collect::<Result<Vec<_>>>()?;
            seqs.push(g.concat_cols(&heads)?);
        }
        g.concat_rows(&seqs)
    }
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, wq: Bound) -> Result<NodeId> {
    let wq = wq.apply(g, w)?;
    let m = g.matmul(x, wq)?;
    g.add_row(m, b)
}

/// Runs a batch and returns the logits tensor.
pub fn logits(model: &ToyTransformer, batch: &[&[usize]], opts: RunOptions<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, opts)?;
    Ok(g.value(out.logits).clone())
}
