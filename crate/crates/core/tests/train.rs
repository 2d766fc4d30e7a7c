mod common;

use common::{grid_search_optimum, outlier_block, ref_block_mse};
use quadapter::adapter::QuadapterParams;
use quadapter::data::{channel_stats_for_sequences, make_synthetic_corpora, Corpus, Split, SyntheticSizes};
use quadapter::model::{ModelConfig, QuantizedView, RunOptions, ToyTransformer};
use quadapter::quant::QuantMode;
use quadapter::train::{
    block_mse, calibrate_all, calibrate_block, calibration_set, finetune_end_to_end, gather_block_io,
    init_static_quantizers, qat_baseline, weight_fingerprint, BlockIoCache, Phase1Plan, Phase2Plan, TrainPlan,
};
use std::collections::BTreeMap;

fn small_model() -> ToyTransformer {
    let cfg = ModelConfig { vocab: 256, d_model: 16, layers: 1, heads: 2, d_ff: 32, t_max: 32, ..ModelConfig::default() };
    let mut m = ToyTransformer::build(cfg, 1).unwrap();
    m.inject_outliers("h0.ln1", &[2], 50.0).unwrap();
    m
}

fn corpus() -> Corpus {
    let (a, _) = make_synthetic_corpora(3, SyntheticSizes { train: 4000, valid: 200, test: 400 });
    a.train
}

#[test]
fn schedules() {
    let p1 = Phase1Plan::default();
    assert_eq!(p1.lr_at(0), 0.1);
    assert!((p1.lr_at(100) - 0.02).abs() < 1e-15);
    assert!((p1.lr_at(499) - 0.1 * 0.2f64.powi(4)).abs() < 1e-15);
    let p2 = Phase2Plan::default();
    assert_eq!(p2.lr_scale(0), 1.0);
    assert_eq!(p2.lr_scale(1000), 0.5);
    let bad = TrainPlan { bits: 1, ..TrainPlan::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn calibration_cache_rows() {
    let model = ToyTransformer::build(ModelConfig::default(), 0).unwrap();
    let (a, b) = make_synthetic_corpora(1, SyntheticSizes { train: 5000, valid: 100, test: 100 });
    let d1 = calibration_set(&[&a.train, &b.train], 10, 128).unwrap();
    assert_eq!(d1.len(), 10);
    let cache = gather_block_io(&model, &d1, "h0.ln1").unwrap();
    assert_eq!(cache.inputs.shape(), &[1280, 64]);
    assert_eq!(cache.outputs[0].shape(), &[1280, 192]);
    assert!(gather_block_io(&model, &d1, "h9.ln1").is_err());
}

#[test]
fn block_mse_matches_reference_loops() {
    let (block, x, targets) = outlier_block(1, 8, 64);
    for alpha in [vec![1.0, 1.0], vec![0.7, 0.02], vec![3.0, 0.5]] {
        let lib = block_mse(&block, &QuadapterParams { alpha: alpha.clone() }, &x, &targets).unwrap();
        let reference = ref_block_mse(&block, &alpha, &x, &targets);
        assert!((lib - reference).abs() <= 1e-12 * reference.max(1e-30), "{alpha:?}: {lib} vs {reference}");
    }
}

#[test]
fn phase1_beats_identity() {
    let (block, x, targets) = outlier_block(2, 8, 640);
    let (optimum, best_alpha) = grid_search_optimum(&block, &x, &targets, 121);
    let identity = ref_block_mse(&block, &[1.0, 1.0], &x, &targets);
    assert!(optimum < identity);
    let cache = BlockIoCache { site: "toy".into(), inputs: x.clone(), outputs: targets.clone() };
    let report = calibrate_block(&block, &cache, &Phase1Plan::default(), 0).unwrap();
    let calibrated = ref_block_mse(&block, &report.params.alpha, &x, &targets);
    assert!(calibrated < identity, "{calibrated} vs identity {identity}");
    // the outlier channel's scale must at least move the right way
    assert!(report.params.alpha[1] / report.params.alpha[0] < 1.0, "{:?} vs optimum {best_alpha:?}", report.params.alpha);
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn zero_steps_change_nothing() {
    let (block, x, targets) = outlier_block(3, 8, 64);
    let cache = BlockIoCache { site: "toy".into(), inputs: x, outputs: targets };
    let plan = Phase1Plan { steps: 0, ..Phase1Plan::default() };
    let report = calibrate_block(&block, &cache, &plan, 0).unwrap();
    assert!(report.params.is_identity());
    assert_eq!(report.initial_loss, report.final_loss);
}

#[test]
fn static_ranges_equal_channel_statistics() {
    let model = small_model();
    let c = corpus();
    let d1 = calibration_set(&[&c], 4, 32).unwrap();
    let view = init_static_quantizers(&model, &BTreeMap::new(), &d1, 8).unwrap();
    let probe = QuantizedView::dynamic(&model, 8);
    let seqs: Vec<&[usize]> = d1.iter().map(Vec::as_slice).collect();
    for site in ["h0.ln1", "h0.mlp.fc", "lm_head"] {
        let stats = channel_stats_for_sequences(&model, &seqs, site, RunOptions::quantized(&probe)).unwrap();
        let q = view.quantizer(site).unwrap();
        assert_eq!(q.mode, QuantMode::Static);
        assert_eq!(q.theta_min, stats.total_min.min(0.0));
        assert_eq!(q.theta_max, stats.total_max.max(0.0));
    }
}

#[test]
fn end_to_end_keeps_weights_and_moves_scales() {
    let model = small_model();
    let c = corpus();
    let d1 = calibration_set(&[&c], 4, 32).unwrap();
    let mut plan = TrainPlan::default();
    plan.phase1.steps = 20;
    let (adapters, reports) = calibrate_all(&model, &d1, &BTreeMap::new(), &plan).unwrap();
    assert_eq!(reports.len(), model.adapter_sites().len());
    let view = init_static_quantizers(&model, &adapters, &d1, 8).unwrap();
    let before = weight_fingerprint(&model);
    let p2 = Phase2Plan { steps: 5, batch_size: 2, block_size: 32, ..Phase2Plan::default() };
    let (tuned, curve) = finetune_end_to_end(&model, &view, &c, &p2, 0).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(weight_fingerprint(&model), before);
    assert!(tuned.act.values().all(|q| q.mode == QuantMode::Learned));
    assert_ne!(tuned.adapters, view.adapters);
}

#[test]
fn qat_with_zero_rate_is_inert() {
    let model = small_model();
    let c = corpus();
    let d1 = calibration_set(&[&c], 2, 32).unwrap();
    let view = init_static_quantizers(&model, &BTreeMap::new(), &d1, 8).unwrap();
    let p2 = Phase2Plan { steps: 3, batch_size: 2, block_size: 32, lr_weights: 0.0, lr_theta: 0.0, ..Phase2Plan::default() };
    let (m, v, _) = qat_baseline(&model, &view, &c, &p2, true, 0).unwrap();
    assert_eq!(weight_fingerprint(&m), weight_fingerprint(&model));
    for (site, q) in &v.act {
        assert_eq!((q.theta_min, q.theta_max), (view.act[site].theta_min, view.act[site].theta_max));
    }
    let p2 = Phase2Plan { lr_weights: 1e-3, ..p2 };
    let (m, v, _) = qat_baseline(&model, &view, &c, &p2, false, 0).unwrap();
    assert_ne!(weight_fingerprint(&m), weight_fingerprint(&model));
    assert_eq!(v, view);
}

#[test]
fn empty_calibration_is_an_error() {
    let model = small_model();
    assert!(init_static_quantizers(&model, &BTreeMap::new(), &[], 8).is_err());
    assert!(calibrate_all(&model, &[], &BTreeMap::new(), &TrainPlan::default()).is_err());
    let short = Corpus::from_bytes("s", Split::Train, b"abc").unwrap();
    assert!(calibration_set(&[&short], 2, 32).is_err());
}
