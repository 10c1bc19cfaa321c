//! Early-detection error (ERDE), classification scores, AUC and threshold
//! sweeps over recorded probability traces.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::han::sigmoid;
use crate::stream::{inference_fraction, Decision, UserTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErdeParams {
    pub o: u32,
    pub c_fn: f64,
    pub c_tp: f64,
    /// `None` uses the fraction of positive users in the evaluated set.
    pub c_fp: Option<f64>,
}

impl ErdeParams {
    pub fn new(o: u32) -> Self {
        Self {
            o,
            c_fn: 1.0,
            c_tp: 1.0,
            c_fp: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.o == 0 {
            return Err(Error::Config("ERDE deadline o must be at least 1".into()));
        }
        let costs = [Some(self.c_fn), Some(self.c_tp), self.c_fp];
        if costs.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("ERDE costs must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Latency cost `1 - 1/(1 + e^(k - o))` of a true positive at post `k`.
pub fn latency_cost(k: usize, o: u32) -> f64 {
    sigmoid(k as f64 - f64::from(o))
}

/// Labels of the decided users, in decision order.
fn labels_for(decisions: &[Decision], labels: &BTreeMap<String, u8>) -> Result<Vec<u8>> {
    let mut seen = HashSet::with_capacity(decisions.len());
    decisions
        .iter()
        .map(|d| {
            if !seen.insert(d.user_id.as_str()) {
                return Err(Error::InvalidInput(format!("user {:?} decided twice", d.user_id)));
            }
            if d.alerted != d.alert_post_index.is_some() || d.alert_post_index == Some(0) {
                return Err(Error::InvalidInput(format!(
                    "user {:?}: inconsistent alert fields",
                    d.user_id
                )));
            }
            match labels.get(&d.user_id) {
                Some(&l) if l <= 1 => Ok(l),
                Some(&l) => Err(Error::InvalidInput(format!("user {:?} has label {l}", d.user_id))),
                None => Err(Error::MissingLabel(d.user_id.clone())),
            }
        })
        .collect()
}

/// Mean per-user ERDE cost over the decisions, as a percentage.
pub fn erde(decisions: &[Decision], labels: &BTreeMap<String, u8>, params: &ErdeParams) -> Result<f64> {
    params.validate()?;
    if decisions.is_empty() {
        return Err(Error::InvalidInput("no decisions to evaluate".into()));
    }
    let gold = labels_for(decisions, labels)?;
    let c_fp = params
        .c_fp
        .unwrap_or_else(|| gold.iter().filter(|&&l| l == 1).count() as f64 / gold.len() as f64);
    let total: f64 = decisions
        .iter()
        .zip(&gold)
        .map(|(d, &y)| match (d.alert_post_index, y) {
            (Some(k), 1) => params.c_tp * latency_cost(k, params.o),
            (Some(_), _) => c_fp,
            (None, 1) => params.c_fn,
            (None, _) => 0.0,
        })
        .sum();
    Ok(100.0 * total / decisions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    /// Set when some denominator was zero and the score defaulted to 0.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of alerts (positive predictions) against labels.
pub fn classification_scores(decisions: &[Decision], labels: &BTreeMap<String, u8>) -> Result<ClassificationScores> {
    let gold = labels_for(decisions, labels)?;
    let mut c = Confusion::default();
    for (d, &y) in decisions.iter().zip(&gold) {
        match (d.alerted, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let mut zero_division = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut zero_division);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut zero_division);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero_division = true;
        0.0
    };
    Ok(ClassificationScores {
        precision,
        recall,
        f1,
        counts: c,
        zero_division,
    })
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties at
/// midranks.
pub fn auc(scores: &[(f64, u8)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores must be finite".into()));
    }
    let pos = scores.iter().filter(|(_, y)| *y == 1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&t| scores[t].1 == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub users: usize,
    pub erde5: f64,
    pub erde50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Over final probabilities; absent when only one class is present.
    pub auc: Option<f64>,
    pub counts: Confusion,
    pub zero_division: bool,
    pub mean_latency: Option<f64>,
    pub median_latency: Option<f64>,
    pub inference_fraction: Option<f64>,
}

/// All metrics over a decision set. `c_fp` overrides the automatic
/// false-positive cost.
pub fn evaluate(decisions: &[Decision], labels: &BTreeMap<String, u8>, c_fp: Option<f64>) -> Result<EvalReport> {
    let erde_at = |o| {
        erde(
            decisions,
            labels,
            &ErdeParams {
                c_fp,
                ..ErdeParams::new(o)
            },
        )
    };
    let (erde5, erde50) = (erde_at(5)?, erde_at(50)?);
    let cls = classification_scores(decisions, labels)?;
    let gold = labels_for(decisions, labels)?;
    let pairs: Vec<(f64, u8)> = decisions.iter().map(|d| d.final_probability).zip(gold).collect();
    let auc = match auc(&pairs) {
        Ok(v) => Some(v),
        Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    let mut latencies: Vec<usize> = decisions.iter().filter_map(|d| d.alert_post_index).collect();
    latencies.sort_unstable();
    let (mean_latency, median_latency) = if latencies.is_empty() {
        (None, None)
    } else {
        let n = latencies.len();
        let mean = latencies.iter().sum::<usize>() as f64 / n as f64;
        let median = if n % 2 == 1 {
            latencies[n / 2] as f64
        } else {
            (latencies[n / 2 - 1] + latencies[n / 2]) as f64 / 2.0
        };
        (Some(mean), Some(median))
    };
    Ok(EvalReport {
        users: decisions.len(),
        erde5,
        erde50,
        precision: cls.precision,
        recall: cls.recall,
        f1: cls.f1,
        auc,
        counts: cls.counts,
        zero_division: cls.zero_division,
        mean_latency,
        median_latency,
        inference_fraction: inference_fraction(decisions).ok(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub erde5: f64,
    pub erde50: f64,
    pub f1: f64,
    pub alerts: usize,
}

/// Re-derives decisions from probability traces at each threshold (alert at
/// the first probability above it) and scores them. No model is run.
pub fn threshold_sweep(traces: &[UserTrace], labels: &BTreeMap<String, u8>, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no thresholds to sweep".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("threshold {t} is outside (0, 1)")));
            }
            let decisions: Vec<Decision> = traces.iter().map(|tr| tr.decision_at(t)).collect();
            let cls = classification_scores(&decisions, labels)?;
            Ok(SweepRow {
                threshold: t,
                erde5: erde(&decisions, labels, &ErdeParams::new(5))?,
                erde50: erde(&decisions, labels, &ErdeParams::new(50))?,
                f1: cls.f1,
                alerts: cls.counts.tp + cls.counts.fp,
            })
        })
        .collect()
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a comma
/// list of thresholds.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse thresholds {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step): (f64, f64, f64) = (
                start.trim().parse().map_err(|_| bad())?,
                stop.trim().parse().map_err(|_| bad())?,
                step.trim().parse().map_err(|_| bad())?,
            );
            if !step.is_finite() || step <= 0.0 || stop < start {
                return Err(bad());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
        }
        [list] => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(bad()),
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}
