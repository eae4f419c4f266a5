//! Classification and grounding metrics: rank-statistic AUC with mid-rank
//! ties, thresholded F1/ACC, Dice/IoU on binary masks, and the pointing
//! game.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// AUC via the Mann-Whitney rank statistic with mid-ranks on ties.
/// `None` when a class has no positive or no negative example.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l).map(|(_, r)| r).sum();
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// F1 and accuracy at a fixed score threshold (prediction = score >= t).
/// F1 is 0 when its denominator vanishes.
pub fn f1_acc(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let denom = 2 * tp + fp + fneg;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    let acc = (tp + tn) as f64 / scores.len().max(1) as f64;
    (f1, acc)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub auc: Option<f64>,
    pub f1: f64,
    pub acc: f64,
}

/// Per-class and macro-averaged metrics, where macro AUC averages only the
/// classes on which AUC is defined.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub macro_acc: f64,
    pub auc_skipped: Vec<String>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub pointing_game: Option<f64>,
}

/// Scores and labels are (images x classes); labels binary.
pub fn classification_report(
    scores: &Array2<f64>,
    labels: &Array2<f64>,
    class_names: &[String],
    threshold: f64,
) -> Result<MetricReport> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    if scores.ncols() != class_names.len() {
        return Err(Error::Shape(format!(
            "{} classes named, {} score columns",
            class_names.len(),
            scores.ncols()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    let mut per_class = Vec::new();
    let mut auc_skipped = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let s: Vec<f64> = scores.column(c).to_vec();
        let l: Vec<bool> = labels.column(c).iter().map(|&v| v == 1.0).collect();
        let auc = binary_auc(&s, &l);
        if auc.is_none() {
            log::warn!("class {name} has one-sided labels, AUC skipped");
            auc_skipped.push(name.clone());
        }
        let (f1, acc) = f1_acc(&s, &l, threshold);
        per_class.push(ClassMetrics { class: name.clone(), auc, f1, acc });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let macro_auc = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let k = per_class.len().max(1) as f64;
    Ok(MetricReport {
        macro_auc,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        macro_acc: per_class.iter().map(|c| c.acc).sum::<f64>() / k,
        per_class,
        auc_skipped,
        dice: None,
        iou: None,
        pointing_game: None,
    })
}

/// Dice and IoU over binary masks. Both empty counts as perfect agreement
/// (1, 1); exactly one empty is total disagreement (0, 0).
pub fn dice_iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        a += usize::from(p);
        b += usize::from(g);
        inter += usize::from(p && g);
    }
    Ok(match (a, b) {
        (0, 0) => (1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0),
        _ => {
            let union = a + b - inter;
            (2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64)
        }
    })
}

/// Ground-truth region for the pointing game.
#[derive(Debug, Clone, Copy)]
pub enum GtRegion<'a> {
    /// (x0, y0, x1, y1), inclusive on both ends.
    Bbox([usize; 4]),
    Mask(&'a Array2<u8>),
}

/// 1 iff the peak pixel (x, y) falls inside the region.
pub fn pointing_game(peak: (usize, usize), region: GtRegion) -> bool {
    let (x, y) = peak;
    match region {
        GtRegion::Bbox([x0, y0, x1, y1]) => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        GtRegion::Mask(m) => m.get([y, x]).is_some_and(|&v| v != 0),
    }
}
