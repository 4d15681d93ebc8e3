use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::NONE_LABEL;
use crate::error::Result;

use super::model::{Dataset, GatedGcnModel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TypeCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub per_type: BTreeMap<String, TypeCounts>,
    pub candidates: usize,
}

impl EvalReport {
    /// `P\tR\tF` with three decimals.
    pub fn prf_line(&self) -> String {
        format!("{:.3}\t{:.3}\t{:.3}", self.precision, self.recall, self.f1)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores aligned per-candidate predictions against gold labels. Only
/// non-`None` labels count; a hit needs the same position and type.
pub fn score_predictions<S: AsRef<str>, T: AsRef<str>>(gold: &[S], predicted: &[T]) -> EvalReport {
    assert_eq!(gold.len(), predicted.len(), "gold and predicted must align");
    let mut per_type: BTreeMap<String, TypeCounts> = BTreeMap::new();
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(predicted) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g != NONE_LABEL {
            n_gold += 1;
            per_type.entry(g.to_string()).or_default().gold += 1;
        }
        if p != NONE_LABEL {
            n_pred += 1;
            per_type.entry(p.to_string()).or_default().predicted += 1;
            if p == g {
                tp += 1;
                per_type.entry(p.to_string()).or_default().true_positives += 1;
            }
        }
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EvalReport {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
        per_type,
        candidates: gold.len(),
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and its probability for every token, in corpus order.
/// Sentences are processed in parallel.
pub fn predict(model: &GatedGcnModel, data: &Dataset) -> Result<Vec<Vec<(usize, f64)>>> {
    model.check_dataset(data)?;
    (0..data.len())
        .into_par_iter()
        .map(|ordinal| {
            let probs = model.predict_sentence(data, ordinal)?;
            Ok(probs
                .iter()
                .map(|p| {
                    let k = argmax(p);
                    (k, p[k])
                })
                .collect())
        })
        .collect()
}

pub fn evaluate(model: &GatedGcnModel, data: &Dataset) -> Result<EvalReport> {
    let predictions = predict(model, data)?;
    let predicted: Vec<&str> = predictions
        .iter()
        .flatten()
        .map(|&(k, _)| model.labels[k].as_str())
        .collect();
    let gold: Vec<&str> = data
        .sentences
        .iter()
        .flat_map(|s| s.gold_labels.iter().map(String::as_str))
        .collect();
    Ok(score_predictions(&gold, &predicted))
}
