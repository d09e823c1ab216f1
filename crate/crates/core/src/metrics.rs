//! Span-level scoring, convergence steps and multi-seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::Span;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predicted} predicted sentences but {gold} gold sentences")]
    Misaligned { predicted: usize, gold: usize },
    #[error("curve steps must be strictly increasing (step {0})")]
    UnorderedCurve(u64),
    #[error("nothing to aggregate")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Counts {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, true_positives: tp, false_positives: fp, false_negatives: fn_ }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Counts,
    pub per_type: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.overall.f1
    }
}

type Key = (usize, usize, Option<String>);

fn multiset(spans: &[Span]) -> BTreeMap<Key, usize> {
    let mut m = BTreeMap::new();
    for s in spans {
        *m.entry((s.start, s.end, s.label.clone())).or_insert(0) += 1;
    }
    m
}

/// Exact-match (boundaries and type) micro-averaged P/R/F1.
pub fn micro_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<EvalReport, MetricsError> {
    if predicted.len() != gold.len() {
        return Err(MetricsError::Misaligned { predicted: predicted.len(), gold: gold.len() });
    }
    // per type: (tp, fp, fn)
    let mut by_type: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let type_of = |k: &Key| k.2.clone().unwrap_or_default();
    for (p, g) in predicted.iter().zip(gold) {
        let (pm, gm) = (multiset(p), multiset(g));
        for (k, &pc) in &pm {
            let gc = gm.get(k).copied().unwrap_or(0);
            let hit = pc.min(gc);
            let e = by_type.entry(type_of(k)).or_default();
            e.0 += hit;
            e.1 += pc - hit;
            tp += hit;
            fp += pc - hit;
        }
        for (k, &gc) in &gm {
            let pc = pm.get(k).copied().unwrap_or(0);
            let miss = gc.saturating_sub(pc);
            by_type.entry(type_of(k)).or_default().2 += miss;
            fn_ += miss;
        }
    }
    Ok(EvalReport {
        overall: Counts::from_counts(tp, fp, fn_),
        per_type: by_type.into_iter().map(|(t, (a, b, c))| (t, Counts::from_counts(a, b, c))).collect(),
    })
}

/// Boundary-only F1: types are ignored on both sides.
pub fn span_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<EvalReport, MetricsError> {
    let strip = |v: &[Vec<Span>]| -> Vec<Vec<Span>> { v.iter().map(|s| s.iter().map(Span::untyped).collect()).collect() };
    micro_f1(&strip(predicted), &strip(gold))
}

/// Ordered `(step, score)` validation points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub points: Vec<(u64, f64)>,
}

impl RunCurve {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, MetricsError> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(MetricsError::UnorderedCurve(w[1].0));
            }
        }
        Ok(Self { points })
    }

    pub fn push(&mut self, step: u64, score: f64) -> Result<(), MetricsError> {
        if self.points.last().is_some_and(|&(s, _)| s >= step) {
            return Err(MetricsError::UnorderedCurve(step));
        }
        self.points.push((step, score));
        Ok(())
    }

    pub fn max(&self) -> Option<f64> {
        self.points.iter().map(|p| p.1).reduce(f64::max)
    }
}

/// First recorded step `s` such that every score recorded in
/// `[s, s + patience]` is within `epsilon` of the curve maximum; the final
/// step when no such window exists. Windows running past the end of the
/// curve are judged on the points they contain. `None` for an empty curve.
pub fn convergence_steps(curve: &RunCurve, epsilon: f64, patience: u64) -> Option<u64> {
    let max = curve.max()?;
    let ok: Vec<bool> = curve.points.iter().map(|&(_, v)| v >= max - epsilon).collect();
    for (i, &(s, _)) in curve.points.iter().enumerate() {
        let end = s.saturating_add(patience);
        if curve.points[i..].iter().zip(&ok[i..]).take_while(|((t, _), _)| *t <= end).all(|(_, &good)| good) {
            return Some(s);
        }
    }
    curve.points.last().map(|p| p.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics. Summation runs over sorted values so the
    /// result does not depend on input order.
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }

    /// `mean±std` with two decimals, after multiplying both by `scale`.
    pub fn format_scaled(&self, scale: f64) -> String {
        format!("{:.2}±{:.2}", self.mean * scale, self.std * scale)
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.format_scaled(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport, MetricsError> {
    let field = |f: fn(&Counts) -> f64| MeanStd::of(&reports.iter().map(|r| f(&r.overall)).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        precision: field(|c| c.precision)?,
        recall: field(|c| c.recall)?,
        f1: field(|c| c.f1)?,
    })
}

/// Left-aligned plain-text table.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> =
            cells.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
