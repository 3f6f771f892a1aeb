use crate::error::{Error, Result};

fn check_pairs(truth: &[usize], pred: &[usize], k: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::InsufficientData("no labels to score".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(bad) = truth.iter().chain(pred).find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

pub fn accuracy(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    check_pairs(truth, pred, k)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-class F1; a class that is neither present nor predicted scores 0.
pub fn f1_per_class(truth: &[usize], pred: &[usize], k: usize) -> Result<Vec<f64>> {
    check_pairs(truth, pred, k)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

pub fn f1_macro(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    let per = f1_per_class(truth, pred, k)?;
    Ok(per.iter().sum::<f64>() / k as f64)
}

/// Macro F1 over the columns of a multi-label problem (rows = samples).
pub fn f1_macro_multilabel(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Shape("multilabel truth/prediction size mismatch".into()));
    }
    let k = truth[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (t, p) in truth.iter().zip(pred) {
            match (t[c], p[c]) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / k as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. `None` when either class is absent.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney via midranks.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroAuroc {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Macro average over classes (columns) that have both positives and negatives.
pub fn auroc_macro(labels: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<MacroAuroc> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::Shape("auroc truth/score size mismatch".into()));
    }
    let k = labels[0].len();
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            auroc(&l, &s)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::InsufficientData(
            "no class has both positive and negative examples".into(),
        ));
    }
    let skipped = (0..k).filter(|&c| per_class[c].is_none()).collect();
    Ok(MacroAuroc {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped,
    })
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("ccc needs at least 2 values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let denom = vx + vy + (mx - my).powi(2);
    if denom == 0.0 {
        // Identical constant sequences agree perfectly.
        return Ok(1.0);
    }
    Ok(2.0 * cov / denom)
}

/// Anxiety index from arousal and valence already rescaled to [0, 1].
pub fn anxiety_target(arousal: f64, valence: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&arousal) || !(0.0..=1.0).contains(&valence) {
        return Err(Error::InvalidArgument(format!(
            "arousal {arousal} and valence {valence} must lie in [0, 1]"
        )));
    }
    Ok(arousal * (1.0 - valence))
}

/// Map a rating from its annotation range onto [0, 1].
pub fn rescale_unit(value: f64, range_min: f64, range_max: f64) -> Result<f64> {
    if !(range_max > range_min) {
        return Err(Error::InvalidArgument("empty annotation range".into()));
    }
    Ok((value - range_min) / (range_max - range_min))
}

/// Average the annotation samples whose timestamps fall inside `[start, end)`.
pub fn window_target(times_s: &[f64], values: &[f64], start_s: f64, end_s: f64) -> Option<f64> {
    let inside: Vec<f64> = times_s
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= start_s && **t < end_s)
        .map(|(_, v)| *v)
        .collect();
    (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_f1_examples() {
        let t = [1, 1, 0, 0];
        let p = [1, 0, 0, 0];
        assert_eq!(accuracy(&t, &p, 2).unwrap(), 0.75);
        let per = f1_per_class(&t, &p, 2).unwrap();
        assert!((per[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[0] - 0.8).abs() < 1e-12);
        assert!((f1_macro(&t, &p, 2).unwrap() - 0.733_333_333_333).abs() < 1e-9);
        assert_eq!(f1_macro(&t, &t, 2).unwrap(), 1.0);
        assert_eq!(accuracy(&t, &t, 2).unwrap(), 1.0);
    }

    #[test]
    fn majority_predictor() {
        let t = [0, 0, 0, 1];
        let p = [0, 0, 0, 0];
        let f1_major = 2.0 * 3.0 / (2.0 * 3.0 + 1.0);
        assert!((f1_macro(&t, &p, 2).unwrap() - f1_major / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero() {
        assert_eq!(f1_macro(&[0, 0], &[0, 0], 2).unwrap(), 0.5);
        assert!(f1_macro(&[], &[], 2).is_err());
        assert!(f1_macro(&[3], &[0], 2).is_err());
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(auroc(&[true, true, false, false], &s), Some(1.0));
        assert_eq!(auroc(&[true, false, true, false], &s), Some(0.75));
        assert_eq!(auroc(&[true, false, true, false], &[0.5; 4]), Some(0.5));
        assert_eq!(auroc(&[true, true], &[0.1, 0.2]), None);
    }

    #[test]
    fn auroc_macro_skips_degenerate_classes() {
        let labels = vec![vec![true, true], vec![false, true], vec![true, true], vec![false, true]];
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.3], vec![0.2, 0.4]];
        let m = auroc_macro(&labels, &scores).unwrap();
        assert_eq!(m.value, 0.75);
        assert_eq!(m.skipped, vec![1]);
        let all_pos = vec![vec![true]; 3];
        assert!(auroc_macro(&all_pos, &[vec![0.1], vec![0.2], vec![0.3]]).is_err());
    }

    #[test]
    fn ccc_examples() {
        let x = [0.3, 1.2, -0.5, 2.0];
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((ccc(&[0.0, 1.0], &[1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&x, &[2.0; 4]).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn anxiety_examples() {
        assert_eq!(anxiety_target(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(anxiety_target(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(anxiety_target(0.5, 0.25).unwrap(), 0.375);
        assert!(anxiety_target(1.2, 0.0).is_err());
        let a = rescale_unit(5.0, 1.0, 9.0).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn window_target_averages_annotations() {
        let t = [0.0, 0.04, 0.08, 10.0];
        let v = [1.0, 2.0, 3.0, 9.0];
        assert_eq!(window_target(&t, &v, 0.0, 10.0), Some(2.0));
        assert_eq!(window_target(&t, &v, 20.0, 30.0), None);
    }
}
