//! Accuracy and ROC AUC.
//!
//! Binary AUC is the normalized Mann-Whitney U statistic, computed from
//! average ranks. Rank sums are kept doubled in integers so that ties cost no
//! precision and the result equals pairwise counting exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{read_json, write_json};
use crate::error::{Error, Result};
use crate::numerics::argmax;

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Argmax per row, ties to the lowest class.
pub fn predictions(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

/// AUC of `scores` for the positive class (`positive[i] == true`).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined(
            "both classes must be present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // 2 * (sum of positive ranks), ranks 1-based, ties share their average rank
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled average = start + 1 + end
        let twice_avg = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| positive[i]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        start = end;
    }
    // 2U = 2R - n_pos (n_pos + 1)
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 * 0.5 / (n_pos * n_neg) as f64)
}

/// Binary AUC on class-1 probabilities for two classes; otherwise the
/// unweighted mean of one-vs-rest AUCs.
pub fn auc_multiclass(probs: &[Vec<f64>], labels: &[usize], class_count: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(row) = probs.iter().find(|r| r.len() != class_count) {
        return Err(Error::Shape(format!(
            "score row of length {} for {class_count} classes",
            row.len()
        )));
    }
    let one_vs_rest = |c: usize| {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        auc_binary(&scores, &pos)
    };
    if class_count == 2 {
        return one_vs_rest(1);
    }
    let mut total = 0.0;
    for c in 0..class_count {
        total += one_vs_rest(c)?;
    }
    Ok(total / class_count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: usize,
    pub n: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub accuracy: f64,
    pub auc: f64,
    pub n: usize,
    pub per_class: Vec<ClassCounts>,
}

impl EvalResult {
    pub fn from_probs(
        split: impl Into<String>,
        probs: &[Vec<f64>],
        labels: &[usize],
        class_count: usize,
    ) -> Result<Self> {
        let predicted = predictions(probs);
        let accuracy = accuracy(&predicted, labels)?;
        let auc = auc_multiclass(probs, labels, class_count)?;
        let per_class = (0..class_count)
            .map(|class| {
                let n = labels.iter().filter(|&&l| l == class).count();
                let correct = labels
                    .iter()
                    .zip(&predicted)
                    .filter(|(&l, &p)| l == class && p == class)
                    .count();
                ClassCounts { class, n, correct }
            })
            .collect();
        Ok(EvalResult {
            split: split.into(),
            accuracy,
            auc,
            n: labels.len(),
            per_class,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}
