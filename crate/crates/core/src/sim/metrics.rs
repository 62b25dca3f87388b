use crate::model::loss::PROB_EPS;

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn log_loss(preds: &[f64], labels: &[u8]) -> Option<f64> {
    if preds.is_empty() {
        return None;
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Some(total / preds.len() as f64)
}

/// Area under the ROC curve from the Mann-Whitney rank statistic, with tied
/// predictions given their mid-rank. `None` unless both classes occur.
pub fn auc(preds: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean prediction over mean label; `None` without positives.
pub fn calibration_ratio(preds: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if preds.is_empty() || pos == 0 {
        return None;
    }
    let mean_pred = preds.iter().sum::<f64>() / preds.len() as f64;
    Some(mean_pred / (pos as f64 / labels.len() as f64))
}
