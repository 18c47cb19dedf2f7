//! ROC-AUC by the rank statistic.

use rayon::prelude::*;

use super::dataset::{Dataset, Split};
use super::TrainingError;
use crate::model::{predict_tags, Model};

/// AUC of `scores` against binary `labels`, with tied scores counting one
/// half. `None` when either class is absent.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over runs of equal scores.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-tag AUC on the test split; degenerate tags are `None`.
pub fn evaluate_auc(model: &Model, data: &Dataset) -> Result<Vec<Option<f64>>, TrainingError> {
    let items: Vec<_> = data.split(Split::Test).collect();
    if items.is_empty() {
        return Err(TrainingError::Contract("the test split is empty".into()));
    }
    let preds = items
        .par_iter()
        .map(|it| Ok(predict_tags(model, &it.input, None)?.0.probabilities))
        .collect::<Result<Vec<_>, TrainingError>>()?;
    let n_tags = model.config().n_tags;
    Ok((0..n_tags)
        .map(|k| {
            let scores: Vec<f32> = preds.iter().map(|p| p[k]).collect();
            let labels: Vec<bool> = items.iter().map(|it| it.target()[k] == 1.0).collect();
            roc_auc(&scores, &labels)
        })
        .collect())
}

/// Mean over the tags that have an AUC.
pub fn macro_auc(per_tag: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_tag.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
