//! Binary-classification metrics: confusion counts, the standard derived
//! rates, and ROC / AUC with half-credit tie handling.

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metrics need at least one sample")]
    Empty,
    #[error("scores and labels must align: {scores} scores, {labels} labels")]
    Misaligned { scores: usize, labels: usize },
    #[error("AUC needs both classes present")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold the positive-class scores: predicted positive iff
/// `score >= threshold`.
pub fn confusion(
    scores: &[f64],
    labels: &[usize],
    threshold: f64,
) -> Result<Confusion, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::Misaligned {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_pos = s >= threshold;
        match (predicted_pos, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Confusion counts from hard predicted labels.
pub fn confusion_from_predictions(
    preds: &[usize],
    labels: &[usize],
) -> Result<Confusion, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::Misaligned {
            scores: preds.len(),
            labels: labels.len(),
        });
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// ROC polyline over all distinct thresholds, swept from the highest score
/// down. Starts at (0, 0) and ends at (1, 1); tied scores advance both
/// rates at once (diagonal segments).
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Misaligned {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Area under the ROC polyline (trapezoidal rule). With ties handled by
/// diagonal segments this equals the rank statistic with half credit for
/// tied pairs.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let points = roc_points(scores, labels)?;
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) * 0.5;
    }
    Ok(area)
}

/// The full evaluation report: the six headline metrics, confusion counts
/// at the argmax decision, and the ROC polyline.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub confusion: Confusion,
    pub roc: Vec<(f64, f64)>,
}

impl EvalReport {
    /// `preds` are hard class decisions (argmax); `scores` are continuous
    /// positive-class scores used for ROC / AUC.
    pub fn compute(
        scores: &[f64],
        preds: &[usize],
        labels: &[usize],
    ) -> Result<EvalReport, MetricsError> {
        let c = confusion_from_predictions(preds, labels)?;
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let specificity = ratio(c.tn, c.tn + c.fp);
        let accuracy = ratio(c.tp + c.tn, c.total());
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let auc_v = auc(scores, labels)?;
        let roc = roc_points(scores, labels)?;
        Ok(EvalReport {
            precision,
            recall,
            specificity,
            accuracy,
            f1,
            auc: auc_v,
            confusion: c,
            roc,
        })
    }

    /// The six metrics, one `name=value` line each.
    pub fn metrics_text(&self) -> String {
        format!(
            "precision={}\nrecall={}\nspecificity={}\naccuracy={}\nf1={}\nauc={}\n",
            self.precision, self.recall, self.specificity, self.accuracy, self.f1, self.auc
        )
    }

    /// ROC polyline as `fpr,tpr` CSV with a header row.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (fpr, tpr) in &self.roc {
            out.push_str(&format!("{fpr},{tpr}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pair-counting rank statistic with ties at half credit.
    fn auc_pairs(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut won, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] == 1 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    won += 1.0;
                } else if si == sj {
                    won += 0.5;
                }
            }
        }
        won / pairs
    }

    #[test]
    fn confusion_basic_counts() {
        let c = confusion(&[0.9, 0.8, 0.4, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 2, 0, 0));
    }

    #[test]
    fn threshold_zero_predicts_all_positive() {
        let c = confusion(&[0.3, 0.1], &[1, 0], 0.0).unwrap();
        assert_eq!(c.tp, 1);
        assert_eq!(c.fp, 1);
        assert_eq!(c.tn, 0); // specificity 0
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(confusion(&[], &[], 0.5), Err(MetricsError::Empty)));
    }

    #[test]
    fn auc_perfect_separation() {
        let a = auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn auc_all_tied_is_half() {
        let a = auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_crossed_pairs_example() {
        let a = auc(&[0.9, 0.4, 0.8, 0.2], &[1, 0, 0, 1]).unwrap();
        assert!((a - 0.5).abs() < 1e-15);
        assert!((auc_pairs(&[0.9, 0.4, 0.8, 0.2], &[1, 0, 0, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(matches!(
            auc(&[0.5, 0.6], &[1, 1]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn trapezoid_equals_pair_counting() {
        let mut rng = crate::rng::Rng::seed_from(77);
        for _ in 0..200 {
            let n = 3 + rng.below(20);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.below(8) as f64) / 8.0) // coarse grid forces ties
                .collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let a = auc(&scores, &labels).unwrap();
            let b = auc_pairs(&scores, &labels);
            assert!((a - b).abs() < 1e-12, "trapezoid {a} vs pairs {b}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5];
        let labels = [0, 1, 0, 1, 1];
        let a = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|&s| (5.0 * s).exp()).collect();
        let b = auc(&warped, &labels).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn auc_flip_complement() {
        let mut rng = crate::rng::Rng::seed_from(31);
        for _ in 0..50 {
            let n = 4 + rng.below(12);
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(6) as f64) / 6.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let flipped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_has_exactly_six_metric_lines() {
        let report = EvalReport::compute(
            &[0.9, 0.8, 0.4, 0.2],
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
        )
        .unwrap();
        let text = report.metrics_text();
        let names: Vec<&str> = text
            .lines()
            .map(|l| l.split('=').next().unwrap())
            .collect();
        assert_eq!(
            names,
            ["precision", "recall", "specificity", "accuracy", "f1", "auc"]
        );
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let report =
            EvalReport::compute(&[0.9, 0.6, 0.4, 0.2], &[1, 1, 1, 0], &[1, 0, 1, 0]).unwrap();
        let expect = 2.0 * report.precision * report.recall / (report.precision + report.recall);
        assert!((report.f1 - expect).abs() < 1e-15);
        assert_eq!(report.confusion.total(), 4);
    }

    #[test]
    fn roc_csv_shape() {
        let report = EvalReport::compute(&[0.9, 0.1], &[1, 0], &[1, 0]).unwrap();
        let csv = report.roc_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("fpr,tpr"));
        assert_eq!(lines.next(), Some("0,0"));
    }
}
