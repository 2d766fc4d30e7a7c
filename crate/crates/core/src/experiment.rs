//! The method matrix: every quantization method, fine-tuned on each corpus in
//! turn, evaluated on every corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::QuadapterParams;
use crate::data::{fmt_f64, perplexity, Corpus, CorpusSplits};
use crate::error::{Error, Result};
use crate::model::{QuantizedView, RunOptions, ToyTransformer};
use crate::train::{
    calibrate_all, calibration_set, cle_adapters, finetune_end_to_end, init_static_quantizers, qat_baseline,
    weight_fingerprint, CalibrationReport, LossPoint, TrainPlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fp,
    Ptq,
    Cle,
    QuadapterBc,
    Quadapter,
    Qat,
    QuadapterBcQat,
    QatNoLsq,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Fp,
        Method::Ptq,
        Method::Cle,
        Method::QuadapterBc,
        Method::Quadapter,
        Method::Qat,
        Method::QuadapterBcQat,
        Method::QatNoLsq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fp => "fp",
            Method::Ptq => "ptq",
            Method::Cle => "cle",
            Method::QuadapterBc => "quadapter_bc",
            Method::Quadapter => "quadapter",
            Method::Qat => "qat",
            Method::QuadapterBcQat => "quadapter_bc_qat",
            Method::QatNoLsq => "qat_no_lsq",
        }
    }

    /// Whether the method uses fine-tuning data.
    pub fn fine_tunes(self) -> bool {
        matches!(self, Method::Quadapter | Method::Qat | Method::QuadapterBcQat | Method::QatNoLsq)
    }

    /// Whether the method promises to leave model weights untouched.
    pub fn freezes_weights(self) -> bool {
        matches!(self, Method::Ptq | Method::Cle | Method::QuadapterBc | Method::Quadapter)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Result of one pipeline run.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub method: Method,
    /// Model after the method ran (differs from the input only for QAT variants).
    pub model: ToyTransformer,
    pub view: Option<QuantizedView>,
    pub calibration: Vec<CalibrationReport>,
    pub curve: Vec<LossPoint>,
    /// Frozen-weight audit; `None` for methods that train weights.
    pub weights_unchanged: Option<bool>,
    pub train_steps: usize,
    pub seconds: f64,
}

impl MethodOutcome {
    pub fn run_options(&self) -> RunOptions<'_> {
        match &self.view {
            Some(v) => RunOptions::quantized(v),
            None => RunOptions::fp(),
        }
    }
}

/// Runs one method. `d2` is required for methods that fine-tune.
pub fn run_method(
    method: Method,
    model: &ToyTransformer,
    d1: &[Vec<usize>],
    d2: Option<&Corpus>,
    plan: &TrainPlan,
) -> Result<MethodOutcome> {
    let start = Instant::now();
    let before = weight_fingerprint(model);
    let need_d2 = || d2.ok_or_else(|| Error::Config(format!("method {method} needs fine-tuning data")));
    let static_view = |adapters: &BTreeMap<String, QuadapterParams>| init_static_quantizers(model, adapters, d1, plan.bits);
    let bc = || calibrate_all(model, d1, &BTreeMap::new(), plan);

    let mut calibration = Vec::new();
    let mut curve = Vec::new();
    let mut out_model = None;
    let mut train_steps = 0;
    let view = match method {
        Method::Fp => None,
        Method::Ptq => Some(static_view(&BTreeMap::new())?),
        Method::Cle => {
            // an untrained adapter: CLE scales with zero calibration steps
            let (init, _) = cle_adapters(model)?;
            let mut p = plan.clone();
            p.phase1.steps = 0;
            let (adapters, reports) = calibrate_all(model, d1, &init, &p)?;
            calibration = reports;
            Some(static_view(&adapters)?)
        }
        Method::QuadapterBc => {
            let (adapters, reports) = bc()?;
            calibration = reports;
            train_steps = plan.phase1.steps * calibration.len();
            Some(static_view(&adapters)?)
        }
        Method::Quadapter => {
            let d2 = need_d2()?;
            let (adapters, reports) = bc()?;
            calibration = reports;
            let view = static_view(&adapters)?;
            let (view, c) = finetune_end_to_end(model, &view, d2, &plan.phase2, plan.seed)?;
            curve = c;
            train_steps = plan.phase1.steps * calibration.len() + plan.phase2.steps;
            Some(view)
        }
        Method::Qat | Method::QatNoLsq => {
            let d2 = need_d2()?;
            let view = static_view(&BTreeMap::new())?;
            let (m, view, c) = qat_baseline(model, &view, d2, &plan.phase2, method == Method::Qat, plan.seed)?;
            out_model = Some(m);
            curve = c;
            train_steps = plan.phase2.steps;
            Some(view)
        }
        Method::QuadapterBcQat => {
            let d2 = need_d2()?;
            let (adapters, reports) = bc()?;
            calibration = reports;
            let view = static_view(&adapters)?;
            let (m, view, c) = qat_baseline(model, &view, d2, &plan.phase2, true, plan.seed)?;
            out_model = Some(m);
            curve = c;
            train_steps = plan.phase1.steps * calibration.len() + plan.phase2.steps;
            Some(view)
        }
    };
    let weights_unchanged = method.freezes_weights().then(|| weight_fingerprint(model) == before);
    Ok(MethodOutcome {
        method,
        model: out_model.unwrap_or_else(|| model.clone()),
        view,
        calibration,
        curve,
        weights_unchanged,
        train_steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One line of the perplexity table.
#[derive(Clone, Debug, PartialEq)]
pub struct PplRow {
    pub method: Method,
    /// Fine-tuning corpus, `-` for methods without fine-tuning.
    pub f_id: String,
    pub eval_corpus: String,
    pub data_fraction: f64,
    pub ppl: f64,
}

pub const PPL_HEADER: [&str; 5] = ["method", "f_id", "eval_corpus", "data_fraction", "ppl"];

pub fn write_ppl_csv<W: Write>(rows: &[PplRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(PPL_HEADER)?;
    for r in rows {
        wr.write_record([
            r.method.name().to_string(),
            r.f_id.clone(),
            r.eval_corpus.clone(),
            fmt_f64(r.data_fraction),
            fmt_f64(r.ppl),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ppl_csv<R: Read>(r: R) -> Result<Vec<PplRow>> {
    let mut rd = csv::Reader::from_reader(r);
    if rd.headers()?.iter().collect::<Vec<_>>() != PPL_HEADER {
        return Err(Error::Data("unexpected perplexity table header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("bad number {s:?}: {e}")));
    rd.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != PPL_HEADER.len() {
                return Err(Error::Data("short perplexity row".into()));
            }
            Ok(PplRow {
                method: rec[0].parse()?,
                f_id: rec[1].to_string(),
                eval_corpus: rec[2].to_string(),
                data_fraction: num(&rec[3])?,
                ppl: num(&rec[4])?,
            })
        })
        .collect()
}

pub fn write_loss_csv<W: Write>(points: &[LossPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "block", "loss"])?;
    for p in points {
        wr.write_record([p.step.to_string(), p.tag.clone(), fmt_f64(p.loss)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Evaluates an outcome on the test split of every corpus.
pub fn evaluate(
    outcome: &MethodOutcome,
    corpora: &[CorpusSplits],
    f_id: &str,
    data_fraction: f64,
    eval_block: usize,
) -> Result<Vec<PplRow>> {
    corpora
        .iter()
        .map(|c| {
            let ppl = perplexity(&outcome.model, &c.test, eval_block, outcome.run_options())?;
            Ok(PplRow {
                method: outcome.method,
                f_id: f_id.to_string(),
                eval_corpus: c.name().to_string(),
                data_fraction,
                ppl,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixOptions {
    /// Adds the fixed-range QAT ablation for every fine-tuning corpus.
    pub ablation: bool,
    /// Fractions of the fine-tuning data for the data-size sweep (empty: no sweep).
    pub sweep_fractions: Vec<f64>,
    pub eval_block: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self { ablation: false, sweep_fractions: Vec::new(), eval_block: 128 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct MatrixReport {
    pub rows: Vec<PplRow>,
    pub gates: Vec<Gate>,
    /// `(cell, error)` for every run that failed; the matrix continues past them.
    pub failures: Vec<(String, String)>,
    /// Loss curves keyed by cell name.
    pub curves: BTreeMap<String, Vec<LossPoint>>,
    pub audits: BTreeMap<String, bool>,
    pub outcomes: Vec<(String, MethodOutcome)>,
}

impl MatrixReport {
    pub fn ppl(&self, method: Method, f_id: &str, eval: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.f_id == f_id && r.eval_corpus == eval && r.data_fraction == 1.0)
            .map(|r| r.ppl)
    }

    pub fn verdict(&self) -> String {
        let mut s = String::new();
        for g in &self.gates {
            s.push_str(&format!("{}: {} ({})\n", g.name, if g.passed { "PASS" } else { "FAIL" }, g.detail));
        }
        for (cell, err) in &self.failures {
            s.push_str(&format!("failed cell {cell}: {err}\n"));
        }
        s
    }
}

/// Runs the full matrix on an FP model. `d1` is drawn from the training
/// splits of all corpora; fine-tuning data is each corpus's training split.
pub fn run_matrix(
    model: &ToyTransformer,
    corpora: &[CorpusSplits],
    plan: &TrainPlan,
    options: &MatrixOptions,
) -> Result<MatrixReport> {
    if corpora.len() < 2 {
        return Err(Error::Config("the matrix needs at least two corpora".into()));
    }
    let trains: Vec<&Corpus> = corpora.iter().map(|c| &c.train).collect();
    let d1 = calibration_set(&trains, plan.calib_sequences, plan.phase2.block_size.min(model.config.t_max))?;
    let mut report = MatrixReport::default();

    let record = |report: &mut MatrixReport, cell: String, f_id: &str, fraction: f64, result: Result<MethodOutcome>| {
        match result.and_then(|o| evaluate(&o, corpora, f_id, fraction, options.eval_block).map(|rows| (o, rows))) {
            Ok((o, rows)) => {
                report.rows.extend(rows);
                if let Some(ok) = o.weights_unchanged {
                    report.audits.insert(cell.clone(), ok);
                }
                let mut curve: Vec<LossPoint> = o.calibration.iter().flat_map(|r| r.curve.iter().cloned()).collect();
                curve.extend(o.curve.iter().cloned());
                if !curve.is_empty() {
                    report.curves.insert(cell.clone(), curve);
                }
                report.outcomes.push((cell, o));
            }
            Err(e) => report.failures.push((cell, e.to_string())),
        }
    };

    for method in [Method::Fp, Method::Ptq, Method::Cle, Method::QuadapterBc] {
        let r = run_method(method, model, &d1, None, plan);
        record(&mut report, method.name().to_string(), "-", 1.0, r);
    }
    let mut tuned = vec![Method::Qat, Method::QuadapterBcQat, Method::Quadapter];
    if options.ablation {
        tuned.push(Method::QatNoLsq);
    }
    for c in corpora {
        for &method in &tuned {
            let r = run_method(method, model, &d1, Some(&c.train), plan);
            record(&mut report, format!("{}@{}", method.name(), c.name()), c.name(), 1.0, r);
        }
        for &fraction in options.sweep_fractions.iter().filter(|&&f| f < 1.0) {
            let d2 = c.train.prefix_fraction(fraction);
            for method in [Method::Qat, Method::Quadapter] {
                let r = run_method(method, model, &d1, Some(&d2), plan);
                record(&mut report, format!("{}@{}x{fraction}", method.name(), c.name()), c.name(), fraction, r);
            }
        }
    }
    report.gates = directional_gates(&report, corpora);
    Ok(report)
}

/// The directional comparisons the matrix is meant to show.
pub fn directional_gates(report: &MatrixReport, corpora: &[CorpusSplits]) -> Vec<Gate> {
    let names: Vec<&str> = corpora.iter().map(CorpusSplits::name).collect();
    let mut gates = Vec::new();
    let mut pairwise = |name: &str, lhs: Method, rhs: Method, strict: bool| {
        let mut passed = true;
        let mut detail = Vec::new();
        for &e in &names {
            match (report.ppl(lhs, "-", e), report.ppl(rhs, "-", e)) {
                (Some(a), Some(b)) => {
                    passed &= if strict { a < b } else { a >= b };
                    detail.push(format!("{e}: {a:.3} vs {b:.3}"));
                }
                _ => {
                    passed = false;
                    detail.push(format!("{e}: missing"));
                }
            }
        }
        gates.push(Gate { name: name.to_string(), passed, detail: detail.join(", ") });
    };
    pairwise("FP PPL < PTQ PPL on every corpus", Method::Fp, Method::Ptq, true);
    pairwise("Quadapter BC PPL < PTQ PPL on every corpus", Method::QuadapterBc, Method::Ptq, true);
    pairwise("CLE PPL >= Quadapter BC PPL on every corpus", Method::Cle, Method::QuadapterBc, false);

    // overfitting contrast: QAT tuned on the first corpus, judged on the rest
    let fp = |e: &str| report.ppl(Method::Fp, "-", e);
    let fid = names[0];
    let mut passed = true;
    let mut detail = Vec::new();
    match (report.ppl(Method::Qat, fid, fid), report.ppl(Method::Ptq, "-", fid)) {
        (Some(q), Some(p)) => {
            passed &= q < p;
            detail.push(format!("{fid}: QAT {q:.3} vs PTQ {p:.3}"));
        }
        _ => passed = false,
    }
    gates.push(Gate { name: "QAT F-ID PPL < PTQ PPL".into(), passed, detail: detail.join(", ") });
    let mut passed = true;
    let mut detail = Vec::new();
    for &ood in &names[1..] {
        match (report.ppl(Method::Qat, fid, ood), report.ppl(Method::Quadapter, fid, ood), fp(ood)) {
            (Some(q), Some(a), Some(f)) => {
                passed &= q - f > a - f;
                detail.push(format!("tuned on {fid}, eval {ood}: QAT +{:.3} vs Quadapter +{:.3}", q - f, a - f));
            }
            _ => passed = false,
        }
    }
    gates.push(Gate {
        name: "QAT F-OOD degradation > Quadapter F-OOD degradation".into(),
        passed,
        detail: detail.join(", "),
    });
    let audit_ok = !report.audits.is_empty() && report.audits.values().all(|&v| v);
    gates.push(Gate {
        name: "frozen-weight audit for weight-preserving methods".into(),
        passed: audit_ok,
        detail: format!("{} cells audited", report.audits.len()),
    });
    gates
}
