use crate::error::{Error, Result};

/// Average precision: precision at the rank of every positive, averaged
/// over positives. Ranking is by descending score, ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), format!("{} labels", labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::Config("average precision is undefined without positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep their original order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Accuracy of `score >= threshold` against `labels`, and average precision.
pub fn accuracy_ap(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let ap = average_precision(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok((correct as f64 / scores.len() as f64, ap))
}
