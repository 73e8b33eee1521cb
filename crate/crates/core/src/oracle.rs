//! Ground-truth influence by fine-tuning or retraining, and
//! predicted-vs-actual comparison.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{CandidateEdit, Graph};
use crate::influence::{InfluenceBreakdown, InfluenceEngine, LissaConfig};
use crate::metrics::{evaluate_metric, EvalMetric};
use crate::model::GcnParams;
use crate::train::{pbrf_finetune, retrain_plain, PbrfConfig, TrainConfig};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Gif,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Gif => "gif",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRecord {
    pub edit: CandidateEdit,
    pub metric: EvalMetric,
    pub method: Method,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<(), Error> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Degenerate(format!("insufficient n = {} for a correlation", a.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite sample in correlation".into()));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    check_pairs(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    check_pairs(a, b)?;
    pearson(&ranks(a), &ranks(b))
}

pub fn correlation(records: &[ScatterRecord]) -> Result<Correlation, Error> {
    let p: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let a: Vec<f64> = records.iter().map(|r| r.actual).collect();
    Ok(Correlation {
        pearson: pearson(&p, &a)?,
        spearman: spearman(&p, &a)?,
        n: records.len(),
    })
}

/// `f(θ', G_edit) − f(θ_s, G)` with `θ'` the PBRF fine-tune at `ε = −1/N`.
pub fn actual_influence_ours(
    theta_s: &GcnParams,
    graph: &Graph,
    metric: EvalMetric,
    edit: &CandidateEdit,
    pbrf: &PbrfConfig,
) -> Result<f64, Error> {
    let before = evaluate_metric(metric, theta_s, graph)?;
    let tuned = pbrf_finetune(graph, theta_s, edit, pbrf)?.params;
    let edited = graph.apply_edit(edit)?;
    Ok(evaluate_metric(metric, &tuned, &edited)? - before)
}

/// `f(θ', G_edit) − f(θ*, G)` with `θ'` retrained on the edited graph from
/// the original initialization and `θ*` the original trained parameters.
pub fn actual_influence_gif(
    init: &GcnParams,
    theta_star: &GcnParams,
    graph: &Graph,
    metric: EvalMetric,
    edit: &CandidateEdit,
    train: &TrainConfig,
) -> Result<f64, Error> {
    let before = evaluate_metric(metric, theta_star, graph)?;
    let edited = graph.apply_edit(edit)?;
    let retrained = retrain_plain(&edited, init, train)?;
    Ok(evaluate_metric(metric, &retrained, &edited)? - before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub lissa: LissaConfig,
    pub pbrf: PbrfConfig,
    pub train: TrainConfig,
    pub include_gif: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: Method,
    pub metric: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
    pub runtime_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub edit: CandidateEdit,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCorrelation {
    pub metric: String,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub entries: Vec<SummaryEntry>,
    pub component_correlation: Vec<ComponentCorrelation>,
    pub failures: Vec<Failure>,
}

impl VerifySummary {
    pub fn entry(&self, method: Method, metric: EvalMetric) -> Option<&SummaryEntry> {
        self.entries.iter().find(|e| e.method == method && e.metric == metric.name())
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub breakdowns: Vec<InfluenceBreakdown>,
    pub records: Vec<ScatterRecord>,
    pub summary: VerifySummary,
}

impl VerifyReport {
    pub fn records_for(&self, method: Method, metric: EvalMetric) -> Vec<ScatterRecord> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .cloned()
            .collect()
    }
}

fn summarize(method: Method, metric: EvalMetric, records: &[ScatterRecord], runtime_s: f64) -> SummaryEntry {
    let mine: Vec<ScatterRecord> = records
        .iter()
        .filter(|r| r.method == method && r.metric == metric)
        .cloned()
        .collect();
    let (pearson, spearman, note) = match correlation(&mine) {
        Ok(c) => (Some(c.pearson), Some(c.spearman), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    SummaryEntry {
        method,
        metric: metric.name().to_string(),
        pearson,
        spearman,
        n: mine.len(),
        runtime_s,
        note,
    }
}

/// Predicted (ours and optionally GIF) against actual influence for every
/// `(metric, edit)`. Oracle runs are parallel over edits on the current
/// rayon pool; per-edit failures are collected instead of aborting.
pub fn verify_run(
    theta_s: &GcnParams,
    init: &GcnParams,
    graph: &Graph,
    metrics: &[EvalMetric],
    edits: &[CandidateEdit],
    config: &VerifyConfig,
) -> Result<VerifyReport, Error> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    let mut component_correlation = Vec::new();
    let mut breakdowns = Vec::new();

    let baseline: Vec<f64> = metrics
        .iter()
        .map(|&m| evaluate_metric(m, theta_s, graph))
        .collect::<Result<_, _>>()?;

    // ours: predictions
    let t0 = Instant::now();
    let engine = InfluenceEngine::new(graph, theta_s, edits)?;
    let diffs = engine.grad_differences(edits)?;
    let op = engine.ggn(config.lissa.damping)?;
    for &metric in metrics {
        let grads = engine.metric_gradients(metric)?;
        let sol = engine.solve_ggn(op.as_ref(), &grads, &config.lissa)?;
        for (edit, d) in edits.iter().zip(&diffs) {
            breakdowns.push(engine.breakdown(&grads, &sol.x, d, edit)?);
        }
        let rows: Vec<InfluenceBreakdown> = breakdowns.iter().filter(|b| b.metric == metric).cloned().collect();
        component_correlation.push(ComponentCorrelation {
            metric: metric.name().to_string(),
            pearson: crate::influence::component_correlation(&rows),
        });
    }
    let predict_s = t0.elapsed().as_secs_f64();

    // ours: PBRF fine-tune once per edit, measured under every metric
    let t1 = Instant::now();
    let ours: Vec<Result<Vec<f64>, Error>> = edits
        .par_iter()
        .map(|edit| {
            let tuned = pbrf_finetune(graph, theta_s, edit, &config.pbrf)?.params;
            let edited = graph.apply_edit(edit)?;
            metrics
                .iter()
                .zip(&baseline)
                .map(|(&m, b)| Ok(evaluate_metric(m, &tuned, &edited)? - b))
                .collect()
        })
        .collect();
    let ours_s = predict_s + t1.elapsed().as_secs_f64();
    for (i, (edit, res)) in edits.iter().zip(ours).enumerate() {
        match res {
            Ok(actuals) => {
                for (k, &metric) in metrics.iter().enumerate() {
                    let b = &breakdowns[k * edits.len() + i];
                    records.push(ScatterRecord {
                        edit: *edit,
                        metric,
                        method: Method::Ours,
                        predicted: b.total,
                        actual: actuals[k],
                    });
                }
            }
            Err(e) => {
                warn!("oracle failed for {edit}: {e}");
                failures.push(Failure { edit: *edit, method: Method::Ours, error: e.to_string() });
            }
        }
    }
    for &metric in metrics {
        entries.push(summarize(Method::Ours, metric, &records, ours_s));
    }
    info!("ours: {} records in {ours_s:.1}s", records.len());

    if config.include_gif {
        let t2 = Instant::now();
        let gif_pred = match engine.gif_scan(metrics, edits, &diffs, &config.lissa) {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("GIF prediction failed: {e}");
                for edit in edits {
                    failures.push(Failure { edit: *edit, method: Method::Gif, error: e.to_string() });
                }
                None
            }
        };
        if let Some(gif_pred) = gif_pred {
            let baseline_star = &baseline;
            let gif: Vec<Result<Vec<f64>, Error>> = edits
                .par_iter()
                .map(|edit| {
                    let edited = graph.apply_edit(edit)?;
                    let retrained = retrain_plain(&edited, init, &config.train)?;
                    metrics
                        .iter()
                        .zip(baseline_star)
                        .map(|(&m, b)| Ok(evaluate_metric(m, &retrained, &edited)? - b))
                        .collect()
                })
                .collect();
            let gif_s = t2.elapsed().as_secs_f64();
            for (i, (edit, res)) in edits.iter().zip(gif).enumerate() {
                match res {
                    Ok(actuals) => {
                        for (k, (metric, scores)) in gif_pred.iter().enumerate() {
                            records.push(ScatterRecord {
                                edit: *edit,
                                metric: *metric,
                                method: Method::Gif,
                                predicted: scores[i],
                                actual: actuals[k],
                            });
                        }
                    }
                    Err(e) => failures.push(Failure { edit: *edit, method: Method::Gif, error: e.to_string() }),
                }
            }
            for &metric in metrics {
                entries.push(summarize(Method::Gif, metric, &records, gif_s));
            }
            info!("gif done in {gif_s:.1}s");
        }
    }

    Ok(VerifyReport {
        breakdowns,
        records,
        summary: VerifySummary {
            entries,
            component_correlation,
            failures,
        },
    })
}

pub fn write_scatter_csv(path: &Path, records: &[ScatterRecord]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u", "v", "kind", "metric", "method", "predicted", "actual"])?;
    for r in records {
        w.write_record([
            r.edit.u.to_string(),
            r.edit.v.to_string(),
            r.edit.kind.as_str().to_string(),
            r.metric.name().to_string(),
            r.method.as_str().to_string(),
            format!("{:e}", r.predicted),
            format!("{:e}", r.actual),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &VerifySummary) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(path, e))
}
