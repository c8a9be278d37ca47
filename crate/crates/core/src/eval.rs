//! The five evaluation metrics, per-visit teacher-forced prediction, and
//! bootstrap aggregation into a report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{bootstrap_samples, DdiMatrix, PatientRecord};
use crate::error::{CafeError, Result};
use crate::model::{predict, HomoGraphs, Model, TauBars};
use crate::numerics::params::ParamVars;
use crate::numerics::tape::sigmoid;
use crate::numerics::{rng, Tape};

/// |intersection| / |union|; 1 when both sets are empty, 0 when exactly
/// one is.
pub fn jaccard(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let inter = pred.iter().filter(|p| truth.contains(p)).count();
    let union = pred.len() + truth.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of unordered predicted pairs that interact; 0 below 2 meds.
pub fn ddi_rate(pred: &[usize], ddi: &DdiMatrix) -> f64 {
    if pred.len() < 2 {
        return 0.0;
    }
    let mut pairs = 0usize;
    let mut bad = 0usize;
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            pairs += 1;
            if ddi.interacts(pred[i], pred[j]) {
                bad += 1;
            }
        }
    }
    bad as f64 / pairs as f64
}

/// 2PR / (P + R); empty-set conventions mirror [`jaccard`].
pub fn f1(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let inter = pred.iter().filter(|p| truth.contains(p)).count() as f64;
    let p = inter / pred.len() as f64;
    let r = inter / truth.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Average precision over the ranking by probability (descending, ties
/// broken by ascending medication ID). Requires >= 1 positive.
pub fn prauc(probs: &[f64], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(CafeError::data("prauc: no positive labels"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    let n_pos = truth.len() as f64;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &id) in order.iter().enumerate() {
        if truth.contains(&id) {
            hits += 1;
            let precision_at_k = hits as f64 / (k + 1) as f64;
            ap += precision_at_k / n_pos; // delta recall = 1 / n_pos per hit
        }
    }
    Ok(ap)
}

/// Per-visit metric means for one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub jaccard: f64,
    pub ddi: f64,
    pub f1: f64,
    pub prauc: f64,
    pub avg_med: f64,
}

/// Teacher-forced per-visit evaluation: every visit t is scored from the
/// true history up to t (with true M_{t-1} as med-history input), and the
/// five metrics are averaged over all visits.
pub fn evaluate_split(
    model: &Model,
    graphs: &HomoGraphs,
    taus: &TauBars,
    records: &[PatientRecord],
    ddi: &DdiMatrix,
) -> Result<MetricValues> {
    if records.is_empty() {
        return Err(CafeError::data("evaluate: no records"));
    }
    if ddi.n_med() != model.vocab.n_med {
        return Err(CafeError::config(format!(
            "evaluate: DDI matrix over {} meds, model over {}",
            ddi.n_med(),
            model.vocab.n_med
        )));
    }
    let mut acc = MetricValues::default();
    let mut n_visits = 0usize;
    let mut n_prauc = 0usize;
    let mut eval_rng = rng::stream(0, "eval-noop");
    for rec in records {
        let mut tape = Tape::new();
        let pv = ParamVars::insert(&mut tape, &model.params, false);
        let outs =
            model.forward_seq(&mut tape, &pv, graphs, taus, &rec.visits, false, &mut eval_rng)?;
        for (t, out) in outs.iter().enumerate() {
            let logits = tape.value(out.logits).data();
            let truth = &rec.visits[t].med;
            let pred = predict(logits, 0.5);
            n_visits += 1;
            acc.jaccard += jaccard(&pred, truth);
            acc.ddi += ddi_rate(&pred, ddi);
            acc.f1 += f1(&pred, truth);
            acc.avg_med += pred.len() as f64;
            if !truth.is_empty() {
                let probs: Vec<f64> = logits.iter().map(|&s| sigmoid(s)).collect();
                acc.prauc += prauc(&probs, truth)?;
                n_prauc += 1;
            }
        }
    }
    acc.jaccard /= n_visits as f64;
    acc.ddi /= n_visits as f64;
    acc.f1 /= n_visits as f64;
    acc.avg_med /= n_visits as f64;
    if n_prauc > 0 {
        acc.prauc /= n_prauc as f64;
    }
    Ok(acc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rounds: Vec<MetricValues>,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub config_digest: String,
}

fn agg(rounds: &[MetricValues], f: impl Fn(&MetricValues) -> f64) -> (f64, f64) {
    let n = rounds.len() as f64;
    let mean = rounds.iter().map(&f).sum::<f64>() / n;
    let var = rounds.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_rounds(rounds: Vec<MetricValues>, config_digest: String) -> Self {
        let fields: [(fn(&MetricValues) -> f64, fn(&mut MetricValues) -> &mut f64); 5] = [
            (|r| r.jaccard, |r| &mut r.jaccard),
            (|r| r.ddi, |r| &mut r.ddi),
            (|r| r.f1, |r| &mut r.f1),
            (|r| r.prauc, |r| &mut r.prauc),
            (|r| r.avg_med, |r| &mut r.avg_med),
        ];
        let mut mean = MetricValues::default();
        let mut std = MetricValues::default();
        for (get, set) in fields {
            let (m, s) = agg(&rounds, get);
            *set(&mut mean) = m;
            *set(&mut std) = s;
        }
        MetricsReport {
            rounds,
            mean,
            std,
            config_digest,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CafeError::data(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CafeError::data(format!("report parse: {e}")))
    }
}

/// Bootstrap evaluation: `rounds` resamples of the test set, metrics per
/// round, report with means and standard deviations.
pub fn evaluate(
    model: &Model,
    graphs: &HomoGraphs,
    taus: &TauBars,
    test: &[PatientRecord],
    ddi: &DdiMatrix,
    rounds: usize,
    seed: u64,
    config_digest: String,
) -> Result<MetricsReport> {
    let samples = bootstrap_samples(test, rounds, seed)?;
    let values = samples
        .iter()
        .map(|sample| evaluate_split(model, graphs, taus, sample, ddi))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rounds(values, config_digest))
}
