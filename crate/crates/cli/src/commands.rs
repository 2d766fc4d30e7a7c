//! Subcommand implementations. Each one writes its artifacts plus a manifest
//! into the output directory.

use std::path::{Path, PathBuf};

use quadapter::checkpoint::Checkpoint;
use quadapter::data::{channel_stats, perplexity, CorpusSplits};
use quadapter::experiment::{
    evaluate, read_ppl_csv, run_matrix, run_method, write_loss_csv, write_ppl_csv, MethodOutcome, PplRow,
};
use quadapter::model::{logits, RunOptions, ToyTransformer};
use quadapter::train::{calibration_set, pretrain, LossPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{info, detail};

fn create(path: &Path) -> CliResult<std::fs::File> {
    Ok(std::fs::File::create(path)?)
}

fn write_ppl(path: &Path, rows: &[PplRow]) -> CliResult<()> {
    write_ppl_csv(rows, create(path)?)?;
    Ok(())
}

/// Appends rows to a perplexity table, creating it when missing.
fn append_ppl(path: &Path, rows: &[PplRow]) -> CliResult<()> {
    let mut all = if path.exists() { read_ppl_csv(std::fs::File::open(path)?)? } else { Vec::new() };
    all.extend_from_slice(rows);
    write_ppl(path, &all)
}

fn write_loss(path: &Path, curve: &[LossPoint]) -> CliResult<()> {
    write_loss_csv(curve, create(path)?)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn mixed_train(corpora: &[CorpusSplits]) -> quadapter::data::Corpus {
    let mut mixed = corpora[0].train.clone();
    mixed.name = corpora.iter().map(|c| c.name()).collect::<Vec<_>>().join("+");
    for c in &corpora[1..] {
        mixed.tokens.extend(&c.train.tokens);
    }
    mixed
}

/// Builds and pretrains the FP model on the union of the training splits,
/// then applies the configured outlier surgery.
fn pretrained_model(
    cfg: &RunConfig,
    corpora: &[CorpusSplits],
    manifest: &mut Manifest,
) -> CliResult<(ToyTransformer, Vec<LossPoint>)> {
    let mut model = ToyTransformer::build(cfg.model.clone(), cfg.seed)?;
    info!("pretraining {} parameters for {} steps", model.param_count(), cfg.plan.pretrain.steps);
    let curve = pretrain(&mut model, &mixed_train(corpora), &cfg.plan.pretrain, cfg.seed)?;
    let eval_block = cfg.experiment.eval_block;
    for c in corpora {
        let ppl = perplexity(&model, &c.test, eval_block, RunOptions::fp())?;
        if !ppl.is_finite() {
            return Err(CliError::Training(format!("FP perplexity on {} is not finite", c.name())));
        }
        info!("fp perplexity on {}: {ppl:.4}", c.name());
        manifest.note(&format!("fp_ppl_{}", c.name()), ppl);
    }
    cfg.apply_surgery(&mut model)?;
    Ok((model, curve))
}

pub fn pretrain_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let mut manifest = Manifest::new("pretrain", cfg);
    for p in cfg.input_files() {
        manifest.input(&p)?;
    }
    let corpora = cfg.corpora()?;
    let (model, curve) = pretrained_model(cfg, &corpora, &mut manifest)?;

    let mut ckpt = Checkpoint::new(model, None);
    ckpt.metadata = manifest.notes.clone();
    let ckpt_path = out.join("fp.ckpt");
    ckpt.write(&ckpt_path)?;
    let loss_path = out.join("pretrain_loss.csv");
    write_loss(&loss_path, &curve)?;
    for p in [&ckpt_path, &loss_path] {
        manifest.artifact(p)?;
    }
    let m = manifest.write(out, None)?;
    info!("wrote {} and {}", ckpt_path.display(), m.display());
    Ok(())
}

fn outcome_cell(outcome: &MethodOutcome, f_id: &str) -> String {
    if outcome.method.fine_tunes() {
        format!("{}-{f_id}", outcome.method)
    } else {
        outcome.method.to_string()
    }
}

pub fn quantize_cmd(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let method = cfg.method()?;
    let mut manifest = Manifest::new("quantize", cfg);
    manifest.input(checkpoint)?;
    for p in cfg.input_files() {
        manifest.input(&p)?;
    }
    let ckpt = read_checkpoint(checkpoint)?;
    let corpora = cfg.corpora()?;
    let model = ckpt.model;
    let train_splits: Vec<_> = corpora.iter().map(|c| &c.train).collect();
    let len = cfg.plan.phase2.block_size.min(model.config.t_max);
    let d1 = calibration_set(&train_splits, cfg.plan.calib_sequences, len)?;
    let ft = cfg.fine_tune_corpus(&corpora)?;
    let d2 = ft.train.prefix_fraction(cfg.data_fraction);
    let f_id = if method.fine_tunes() { ft.name() } else { "-" };

    info!("running {method}");
    let outcome = run_method(method, &model, &d1, Some(&d2), &cfg.plan)?;
    info!("{method}: {} training steps in {:.1}s", outcome.train_steps, outcome.seconds);
    if let Some(unchanged) = outcome.weights_unchanged {
        info!("frozen-weight audit: {}", if unchanged { "PASS" } else { "FAIL" });
        if !unchanged {
            return Err(CliError::SelfCheck(format!("{method} modified the model weights")));
        }
        manifest.note("frozen_weight_audit", "pass");
    }
    for r in &outcome.calibration {
        detail!("  {} block MSE {:.4e} -> {:.4e}", r.site, r.initial_loss, r.final_loss);
    }

    let cell = outcome_cell(&outcome, f_id);
    let rows = evaluate(&outcome, &corpora, f_id, cfg.data_fraction, cfg.experiment.eval_block)?;
    for r in &rows {
        println!("{}\t{}\t{}\t{}", r.method, r.f_id, r.eval_corpus, r.ppl);
    }
    let ckpt_path = out.join(format!("{cell}.ckpt"));
    let mut qckpt = Checkpoint::new(outcome.model.clone(), outcome.view.clone());
    qckpt.metadata.insert("method".into(), method.to_string());
    qckpt.metadata.insert("f_id".into(), f_id.into());
    qckpt.write(&ckpt_path)?;
    let ppl_path = out.join("ppl.csv");
    append_ppl(&ppl_path, &rows)?;
    let mut curve: Vec<LossPoint> = outcome.calibration.iter().flat_map(|r| r.curve.clone()).collect();
    curve.extend(outcome.curve.iter().cloned());
    let loss_path = out.join(format!("{cell}_loss.csv"));
    write_loss(&loss_path, &curve)?;
    for p in [&ckpt_path, &ppl_path, &loss_path] {
        manifest.artifact(p)?;
    }
    manifest.write(out, Some(&cell))?;
    Ok(())
}

pub fn experiment_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> CliResult<()> {
    let mut manifest = Manifest::new("experiment", cfg);
    for p in cfg.input_files() {
        manifest.input(&p)?;
    }
    let corpora = cfg.corpora()?;
    let model = match checkpoint {
        Some(path) => {
            manifest.input(path)?;
            read_checkpoint(path)?.model
        }
        None => pretrained_model(cfg, &corpora, &mut manifest)?.0,
    };
    let report = run_matrix(&model, &corpora, &cfg.plan, &cfg.experiment)?;

    let ppl_path = out.join("ppl.csv");
    write_ppl(&ppl_path, &report.rows)?;
    manifest.artifact(&ppl_path)?;
    let loss_dir = out.join("loss");
    std::fs::create_dir_all(&loss_dir)?;
    for (cell, curve) in &report.curves {
        let p = loss_dir.join(format!("{cell}.csv"));
        write_loss(&p, curve)?;
        manifest.artifacts.insert(format!("loss/{cell}.csv"), crate::manifest::sha256_file(&p)?);
    }
    let verdict = report.verdict();
    let verdict_path = out.join("verdict.txt");
    std::fs::write(&verdict_path, &verdict)?;
    manifest.artifact(&verdict_path)?;
    manifest.note("failed_cells", report.failures.len());
    manifest.write(out, None)?;
    for r in &report.rows {
        println!("{}\t{}\t{}\t{}\t{}", r.method, r.f_id, r.eval_corpus, r.data_fraction, r.ppl);
    }
    print!("{verdict}");
    Ok(())
}

pub fn inspect_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    site: &str,
    corpus: Option<&str>,
    csv_out: Option<&Path>,
) -> CliResult<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let corpora = cfg.corpora()?;
    let c = match corpus {
        None => &corpora[0],
        Some(name) => corpora
            .iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| CliError::Config(format!("unknown corpus {name:?}")))?,
    };
    // activation after the adapter scale, before quantization
    let opts = match &ckpt.view {
        Some(v) => RunOptions::fp_with(v),
        None => RunOptions::fp(),
    };
    let stats = channel_stats(&ckpt.model, &c.test, site, opts)?;
    match csv_out {
        Some(p) => stats.write_csv(create(p)?)?,
        None => stats.write_csv(std::io::stdout().lock())?,
    }
    eprintln!("{site} on {}: R = {:.4}", c.name(), stats.range_ratio());
    Ok(())
}

/// Tokens for the fold self-check.
fn probe_batch(model: &ToyTransformer, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = model.config.t_max.min(32);
    (0..2).map(|_| (0..len).map(|_| rng.random_range(0..model.config.vocab)).collect()).collect()
}

pub fn fold_cmd(cfg: &RunConfig, checkpoint: &Path, dest: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let mut manifest = Manifest::new("fold", cfg);
    manifest.input(checkpoint)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let Some(view) = ckpt.view.clone() else {
        return Err(CliError::Data(format!("{} has no quantized view to fold", checkpoint.display())));
    };
    let mut folded = ckpt.model.clone();
    folded.fold_commit(&view.adapters)?;
    let mut stripped = view.clone();
    stripped.adapters.clear();

    let probe = probe_batch(&ckpt.model, cfg.seed);
    let batch: Vec<&[usize]> = probe.iter().map(Vec::as_slice).collect();
    let before = logits(&ckpt.model, &batch, RunOptions::quantized(&view))?;
    let after = logits(&folded, &batch, RunOptions::quantized(&stripped))?;
    let dev = before.max_abs_diff(&after);
    println!("fold self-check: max abs deviation = {dev}");
    if dev != 0.0 {
        return Err(CliError::SelfCheck(format!("folded forward deviates by {dev:e}; nothing written")));
    }

    let dest = dest.unwrap_or_else(|| {
        let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.join(format!("{stem}-folded.ckpt"))
    });
    let mut result = Checkpoint::new(folded, Some(stripped));
    result.metadata = ckpt.metadata.clone();
    result.metadata.insert("folded".into(), "true".into());
    result.write(&dest)?;
    manifest.artifact(&dest)?;
    manifest.note("max_abs_deviation", dev);
    let stem = dest.file_stem().map(|s| s.to_string_lossy().into_owned());
    manifest.write(dest.parent().unwrap_or(out), stem.as_deref())?;
    info!("wrote {}", dest.display());
    Ok(())
}
