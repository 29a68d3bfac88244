use std::fmt::Write;

use crate::error::{KwsError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    /// Negatives with score ≥ threshold.
    pub far: f64,
    /// Positives with score < threshold.
    pub frr: f64,
}

/// Points ordered by increasing threshold, from `(far, frr) = (1, 0)` at
/// threshold 0 to `(0, 1)` at `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Micro-averaged one-vs-rest curve: every `(sample, class)` score is one
/// detection, positive when the class is the sample's label. `scores` is
/// row-major `[N, K]`.
pub fn micro_roc(scores: &[f64], labels: &[usize], k: usize) -> Result<RocCurve> {
    if k == 0 || scores.len() != labels.len() * k {
        return Err(KwsError::dim("micro_roc", &[scores.len()], &[labels.len(), k]));
    }
    if labels.is_empty() {
        return Err(KwsError::config("ROC needs at least one sample"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(KwsError::config(format!("label {l} out of range for {k} classes")));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(KwsError::Numeric("ROC scores must be finite and non-negative".into()));
    }
    let mut pairs: Vec<(f64, bool)> =
        scores.iter().enumerate().map(|(i, &s)| (s, labels[i / k] == i % k)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos_total = labels.len() as f64;
    let neg_total = (pairs.len() - labels.len()) as f64;
    let rate = |n: usize, total: f64| if total > 0.0 { n as f64 / total } else { 0.0 };

    let mut points = vec![RocPoint { threshold: 0.0, far: rate(neg_total as usize, neg_total), frr: 0.0 }];
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        if t > 0.0 {
            points.push(RocPoint {
                threshold: t,
                far: rate(neg_total as usize - neg_below, neg_total),
                frr: rate(pos_below, pos_total),
            });
        }
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(RocCurve { points })
}

impl RocCurve {
    /// False alarms never rise and false rejects never fall with the threshold.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[0].threshold <= w[1].threshold && w[1].far <= w[0].far && w[1].frr >= w[0].frr
        })
    }

    /// Area under the detection curve `(far, 1 − frr)`.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[0].far - w[1].far) * ((1.0 - w[0].frr) + (1.0 - w[1].frr)) / 2.0)
            .sum()
    }

    /// Whether some threshold has both rates at most `tol`.
    pub fn touches_corner(&self, tol: f64) -> bool {
        self.points.iter().any(|p| p.far <= tol && p.frr <= tol)
    }

    /// Smallest `max(far, frr)` along the curve.
    pub fn equal_error_rate(&self) -> f64 {
        self.points.iter().map(|p| p.far.max(p.frr)).fold(1.0, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.far, p.frr);
        }
        s
    }
}
