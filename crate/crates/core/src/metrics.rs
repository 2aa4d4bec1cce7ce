//! Evaluation metrics for the three downstream tasks.

use crate::error::{Error, Result};

/// Weighted accuracy (overall accuracy) and unweighted accuracy (mean
/// per-class recall). UA needs every class to occur in `golds`.
pub fn wa_ua(preds: &[usize], golds: &[usize], classes: usize) -> Result<(f64, f64)> {
    if preds.len() != golds.len() || golds.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "WA/UA needs equal non-empty inputs, got {} predictions and {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if g >= classes {
            return Err(Error::LabelOutOfRange { label: g, classes });
        }
        totals[g] += 1;
        if p == g {
            hits[g] += 1;
        }
    }
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::UndefinedMetric(format!("UA undefined: class {c} absent from golds")));
    }
    let wa = hits.iter().sum::<usize>() as f64 / golds.len() as f64;
    let ua = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| h as f64 / t as f64)
        .sum::<f64>()
        / classes as f64;
    Ok((wa, ua))
}

/// Binary accuracy and positive-class F1 after binarizing by sign.
/// A score is positive iff it is strictly greater than zero.
pub fn acc2_f1(pred_scores: &[f64], gold_scores: &[f64]) -> Result<(f64, f64)> {
    if pred_scores.len() != gold_scores.len() || gold_scores.is_empty() {
        return Err(Error::UndefinedMetric("Acc2/F1 needs equal non-empty inputs".into()));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred_scores.iter().zip(gold_scores) {
        let (p, g) = (p > 0.0, g > 0.0);
        if p == g {
            correct += 1;
        }
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let acc = correct as f64 / gold_scores.len() as f64;
    let denom = 2 * tp + fp + fneg;
    // no positives anywhere: every prediction agrees
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok((acc, f1))
}

/// Mean absolute error and Pearson correlation.
pub fn mae_corr(preds: &[f64], golds: &[f64]) -> Result<(f64, f64)> {
    let n = golds.len();
    if preds.len() != n || n < 2 {
        return Err(Error::UndefinedMetric(
            "MAE/Corr needs at least two paired values".into(),
        ));
    }
    let nf = n as f64;
    let mae = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / nf;
    let mp = preds.iter().sum::<f64>() / nf;
    let mg = golds.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let (dx, dy) = (p - mp, g - mg);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation undefined for zero variance".into()));
    }
    Ok((mae, sxy / (sxx.sqrt() * syy.sqrt())))
}

/// Equal error rate. Higher scores mean "same speaker"; a trial is accepted
/// when `score >= θ`.
///
/// θ sweeps the sorted union of all scores followed by +∞. The EER is read at
/// the first sweep point where FAR − FRR ≤ 0, linearly interpolated with the
/// previous point.
pub fn eer(scores_same: &[f64], scores_diff: &[f64]) -> Result<f64> {
    if scores_same.is_empty() || scores_diff.is_empty() {
        return Err(Error::UndefinedMetric("EER needs genuine and impostor scores".into()));
    }
    if scores_same.iter().chain(scores_diff).any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("EER scores contain NaN".into()));
    }
    let mut genuine = scores_same.to_vec();
    let mut impostor = scores_diff.to_vec();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    // sorted ascending: counts below θ advance monotonically
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    for &t in &thresholds {
        while gi < genuine.len() && genuine[gi] < t {
            gi += 1;
        }
        while ii < impostor.len() && impostor[ii] < t {
            ii += 1;
        }
        let far = (impostor.len() - ii) as f64 / ni;
        let frr = gi as f64 / ng;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((pfar, pfrr)) if d < 0.0 => {
                    let pd = pfar - pfrr;
                    let w = pd / (pd - d);
                    pfar + w * (far - pfar)
                }
                _ => far,
            });
        }
        prev = Some((far, frr));
    }
    unreachable!("the +inf threshold always gives FAR - FRR = -1")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wa_ua_hand_counts() {
        assert_eq!(wa_ua(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));
        assert_eq!(wa_ua(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap(), (0.75, 0.5));
        assert!(matches!(wa_ua(&[0], &[0], 2), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn acc2_f1_hand_counts() {
        assert_eq!(acc2_f1(&[1.0, -2.0], &[0.5, -0.1]).unwrap(), (1.0, 1.0));
        let (acc, f1) = acc2_f1(&[1.0, 1.0, 1.0, 1.0], &[1.0, 2.0, -1.0, 0.0]).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mae_corr_extremes() {
        let g = [1.0, 2.0, 4.0];
        assert_eq!(mae_corr(&g, &g).unwrap().0, 0.0);
        assert!((mae_corr(&g, &g).unwrap().1 - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((mae_corr(&neg, &g).unwrap().1 + 1.0).abs() < 1e-15);
        assert!(mae_corr(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eer_basic_cases() {
        assert_eq!(eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(eer(&[0.1, 0.2], &[0.9, 0.8]).unwrap(), 1.0);
        let e = eer(&[0.5, 0.7, 0.2], &[0.3, 0.6]).unwrap();
        let s = eer(&[0.3, 0.6], &[0.5, 0.7, 0.2]).unwrap();
        assert!((e + s - 1.0).abs() < 1e-12);
        assert!(eer(&[], &[0.1]).is_err());
    }
}
