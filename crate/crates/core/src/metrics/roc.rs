use serde::{Deserialize, Serialize};

use crate::error::{Result, RfaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating points for "positive iff score >= threshold", thresholds descending,
/// starting from the empty prediction at `+inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub tnr_at_95_tpr: f64,
}

pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(RfaError::shape("roc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(RfaError::InvalidArgument("roc needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(RfaError::NonFinite("roc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| 0.5 * (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr))
        .sum();
    let tnr = points
        .iter()
        .find(|p| p.tpr >= 0.95)
        .map(|p| 1.0 - p.fpr)
        .unwrap_or(0.0);
    Ok(RocCurve {
        points,
        auc,
        tnr_at_95_tpr: tnr,
    })
}
