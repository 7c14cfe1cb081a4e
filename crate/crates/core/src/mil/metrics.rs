use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::Event;

/// Predicted class: `p[1] >= 0.5` for two classes, argmax (first wins) otherwise.
pub fn predicted_class(probs: &[f64]) -> usize {
    if probs.len() == 2 {
        return usize::from(probs[1] >= 0.5);
    }
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "accuracy over {} predictions and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| predicted_class(p) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary ROC AUC from mid-ranks; tied scores contribute one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::UndefinedMetric(format!(
            "auc over {} scores and {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc over NaN scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        // ranks start..end (1-based: start+1..=end) share their mean
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum += mid * idx[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC for class probabilities: the positive-class AUC for two classes,
/// otherwise the macro average of one-vs-rest AUCs.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(per_class_auc(probs, labels)?.iter().sum::<f64>() / per_class_len(probs))
}

fn per_class_len(probs: &[Vec<f64>]) -> f64 {
    match probs.first().map_or(0, Vec::len) {
        2 => 1.0,
        c => c as f64,
    }
}

/// One-vs-rest AUC per class (a single entry for two classes).
pub fn per_class_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    let classes = probs.first().map_or(0, Vec::len);
    if classes < 2 || probs.iter().any(|p| p.len() != classes) {
        return Err(Error::UndefinedMetric(format!("auc over {classes} classes")));
    }
    let scored: Vec<usize> = if classes == 2 { vec![1] } else { (0..classes).collect() };
    scored
        .into_iter()
        .map(|k| {
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            auc(&scores, &positive)
        })
        .collect()
}

/// Harrell's concordance index. Pair (i, j) is comparable when `i` has an
/// observed event strictly before `t_j`; tied risks count one half.
pub fn c_index(risks: &[f64], times: &[f64], events: &[Event]) -> Result<f64> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(Error::UndefinedMetric(format!(
            "c-index over {} risks, {} times and {} events",
            risks.len(),
            times.len(),
            events.len()
        )));
    }
    let mut by_time: Vec<usize> = (0..times.len()).collect();
    by_time.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut concordant, mut comparable) = (0.0, 0usize);
    let mut later_from = 0;
    for (pos, &i) in by_time.iter().enumerate() {
        while later_from < by_time.len() && times[by_time[later_from]] <= times[i] {
            later_from += 1;
        }
        debug_assert!(later_from > pos);
        if events[i] != Event::Observed {
            continue;
        }
        for &j in &by_time[later_from..] {
            comparable += 1;
            if risks[i] > risks[j] {
                concordant += 1.0;
            } else if risks[i] == risks[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("c-index has no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Evaluation summary, rendered as `key=value` lines with six decimals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub bags: usize,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub class_auc: Vec<f64>,
    pub c_index: Option<f64>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("bags={}\n", self.bags);
        let mut line = |key: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(s, "{key}={v:.6}");
            }
        };
        line("loss", self.loss);
        line("accuracy", self.accuracy);
        line("auc", self.auc);
        if self.class_auc.len() > 1 {
            for (k, &v) in self.class_auc.iter().enumerate() {
                line(&format!("auc_class_{k}"), Some(v));
            }
        }
        line("c_index", self.c_index);
        s
    }

    /// Looks up a value in rendered report text.
    pub fn parse_value(text: &str, key: &str) -> Option<f64> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.trim().parse().ok())
    }
}
