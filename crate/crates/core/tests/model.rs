use quadapter::adapter::QuadapterParams;
use quadapter::data::channel_stats_for_sequences;
use quadapter::model::{logits, ModelConfig, QuantizedView, RunOptions, ToyTransformer};
use quadapter::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { vocab: 32, d_model: 16, layers: 2, heads: 2, d_ff: 32, t_max: 12, ..ModelConfig::default() }
}

fn seq(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// A model whose parameters are far from the near-zero init, so differences show.
fn lively(seed: u64) -> ToyTransformer {
    let mut m = ToyTransformer::build(small(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in m.params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

#[test]
fn build_is_deterministic() {
    let a = ToyTransformer::build(ModelConfig::default(), 4).unwrap();
    let b = ToyTransformer::build(ModelConfig::default(), 4).unwrap();
    assert_eq!(a, b);
    let c = ToyTransformer::build(ModelConfig::default(), 5).unwrap();
    assert_ne!(a.params["tok_emb"], c.params["tok_emb"]);
    let s = seq(1, 20, 256);
    let la = logits(&a, &[&s], RunOptions::fp()).unwrap();
    let lb = logits(&b, &[&s], RunOptions::fp()).unwrap();
    assert!(la.bit_eq(&lb));
}

#[test]
fn default_shape() {
    let m = ToyTransformer::build(ModelConfig::default(), 0).unwrap();
    let s = seq(2, 7, 256);
    let l = logits(&m, &[&s, &s], RunOptions::fp()).unwrap();
    assert_eq!(l.shape(), &[14, 256]);
    assert_eq!(m.adapter_sites().len(), 2 * 2 + 1);
    assert_eq!(m.install_quadapters().unwrap().len(), 5);
    let tied = ToyTransformer::build(ModelConfig { tie_embeddings: true, ..ModelConfig::default() }, 0).unwrap();
    assert_eq!(tied.adapter_sites().len(), 4);
    assert!(!tied.params.contains_key("lm_head.w"));
}

#[test]
fn causal() {
    let m = lively(3);
    let mut s = seq(3, 10, 32);
    let before = logits(&m, &[&s], RunOptions::fp()).unwrap();
    s[6] = (s[6] + 1) % 32;
    let after = logits(&m, &[&s], RunOptions::fp()).unwrap();
    for t in 0..10 {
        let same = before.row(t) == after.row(t);
        assert_eq!(same, t < 6, "position {t}");
    }
}

#[test]
fn positions_matter() {
    let m = lively(4);
    let s = vec![5usize; 6];
    let l = logits(&m, &[&s], RunOptions::fp()).unwrap();
    assert_ne!(l.row(0), l.row(5));
}

#[test]
fn batch_rows_are_independent() {
    let m = lively(5);
    let a = seq(10, 8, 32);
    let b = seq(11, 8, 32);
    let both = logits(&m, &[&a, &b], RunOptions::fp()).unwrap();
    let solo = logits(&m, &[&b], RunOptions::fp()).unwrap();
    for t in 0..8 {
        for (x, y) in both.row(8 + t).iter().zip(solo.row(t)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn sixteen_bits_is_close_to_float() {
    let m = lively(6);
    let view = QuantizedView::dynamic(&m, 16);
    let s = seq(6, 12, 32);
    let fp = logits(&m, &[&s], RunOptions::fp()).unwrap();
    let q = logits(&m, &[&s], RunOptions::quantized(&view)).unwrap();
    assert!(fp.max_abs_diff(&q) < 1e-2, "{}", fp.max_abs_diff(&q));
    let view4 = QuantizedView::dynamic(&m, 4);
    let q4 = logits(&m, &[&s], RunOptions::quantized(&view4)).unwrap();
    assert!(fp.max_abs_diff(&q4) > fp.max_abs_diff(&q));
}

#[test]
fn outlier_injection_preserves_float_function() {
    let m = lively(7);
    let mut o = m.clone();
    for site in m.adapter_sites() {
        o.inject_outliers(&site.name, &[1, 9], 100.0).unwrap();
    }
    let seqs: Vec<Vec<usize>> = (0..3).map(|i| seq(20 + i, 12, 32)).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let a = logits(&m, &refs, RunOptions::fp()).unwrap();
    let b = logits(&o, &refs, RunOptions::fp()).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-9);
    let stats = channel_stats_for_sequences(&o, &refs, "h0.ln1", RunOptions::fp()).unwrap();
    assert!(stats.channel_range_spread() >= 50.0, "{}", stats.channel_range_spread());
    assert!(matches!(o.inject_outliers("h0.ln1", &[16], 10.0), Err(Error::Index(_))));
    assert!(o.inject_outliers("nope", &[0], 10.0).is_err());
}

#[test]
fn identity_adapters_are_bit_exact() {
    let m = lively(8);
    let s = seq(8, 12, 32);
    let plain = QuantizedView::dynamic(&m, 8);
    let adapted = plain.clone().with_adapters(m.install_quadapters().unwrap());
    let a = logits(&m, &[&s], RunOptions::quantized(&plain)).unwrap();
    let b = logits(&m, &[&s], RunOptions::quantized(&adapted)).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn fold_commit_matches_adapted_model() {
    let m = lively(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let adapters: std::collections::BTreeMap<String, QuadapterParams> = m
        .adapter_sites()
        .into_iter()
        .map(|s| (s.name, QuadapterParams { alpha: (0..16).map(|_| rng.random_range(0.05..4.0)).collect() }))
        .collect();
    let view = QuantizedView::dynamic(&m, 8).with_adapters(adapters.clone());
    let mut folded = m.clone();
    folded.fold_commit(&adapters).unwrap();
    let s = seq(9, 12, 32);
    let a = logits(&m, &[&s], RunOptions::quantized(&view)).unwrap();
    let b = logits(&folded, &[&s], RunOptions::quantized(&QuantizedView::dynamic(&m, 8))).unwrap();
    assert_eq!(a.max_abs_diff(&b), 0.0);
    let fa = logits(&m, &[&s], RunOptions::fp()).unwrap();
    let fb = logits(&folded, &[&s], RunOptions::fp()).unwrap();
    assert!(fa.max_abs_diff(&fb) < 1e-9);
}

#[test]
fn bad_inputs() {
    let m = ToyTransformer::build(small(), 0).unwrap();
    assert!(matches!(logits(&m, &[&[40usize][..]], RunOptions::fp()), Err(Error::Index(_))));
    assert!(matches!(logits(&m, &[&vec![0usize; 13][..]], RunOptions::fp()), Err(Error::Dimension(_))));
    assert!(logits(&m, &[], RunOptions::fp()).is_err());
    let bad = ModelConfig { heads: 3, ..small() };
    assert!(ToyTransformer::build(bad, 0).is_err());
}
