//! Threshold-free detection metrics. Anomalous is the positive class and
//! higher scores mean more anomalous.

use serde::{Deserialize, Serialize};

use crate::data::{CategoryKind, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub balanced_accuracy: f64,
    /// Scores strictly above this are classified anomalous; may be infinite.
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub category: String,
    pub auroc: f64,
    pub balanced_accuracy: f64,
    pub best_threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn counts(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Evaluation(format!("score {i} is NaN")));
    }
    let p = labels.iter().filter(|&&l| l == Label::Anomalous).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Evaluation(format!("both classes are required, got {p} anomalous and {n} normal")));
    }
    Ok((p, n))
}

/// Score/label pairs sorted by ascending score.
fn sorted(scores: &[f64], labels: &[Label]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l == Label::Anomalous)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn midpoint(a: f64, b: f64) -> f64 {
    a / 2.0 + b / 2.0
}

/// Balanced accuracy of the rule `score > threshold` given `tp` of `p`
/// positives and `tn` of `n` negatives classified correctly.
pub fn balanced(tp: usize, p: usize, tn: usize, n: usize) -> f64 {
    (tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0
}

/// Maximum of `(TPR + TNR) / 2` over thresholds at `-inf`, the midpoints of
/// consecutive distinct scores and `+inf`. Ties go to the lowest threshold.
pub fn max_balanced_accuracy(scores: &[f64], labels: &[Label]) -> Result<BalancedAccuracy> {
    let (p, n) = counts(scores, labels)?;
    let v = sorted(scores, labels);
    // At -inf everything is anomalous.
    let (mut tp, mut tn) = (p, 0);
    let mut best = BalancedAccuracy { balanced_accuracy: balanced(tp, p, tn, n), threshold: f64::NEG_INFINITY, tpr: 1.0, tnr: 0.0 };
    let mut i = 0;
    while i < v.len() {
        let s = v[i].0;
        while i < v.len() && v[i].0 == s {
            if v[i].1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let threshold = if i < v.len() { midpoint(s, v[i].0) } else { f64::INFINITY };
        let b = balanced(tp, p, tn, n);
        if b > best.balanced_accuracy {
            best = BalancedAccuracy { balanced_accuracy: b, threshold, tpr: tp as f64 / p as f64, tnr: tn as f64 / n as f64 };
        }
    }
    Ok(best)
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)` with ties counted 1/2.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (p, n) = counts(scores, labels)?;
    let v = sorted(scores, labels);
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        let pos = v[i..j].iter().filter(|e| e.1).count() as u128;
        // Average rank of the tie group is (i + 1 + j) / 2.
        twice_rank_sum += pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let pu = p as u128;
    let twice_u = twice_rank_sum - pu * (pu + 1);
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// ROC points from the most to the least conservative threshold.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    let (p, n) = counts(scores, labels)?;
    let v = sorted(scores, labels);
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut j = v.len();
    while j > 0 {
        let s = v[j - 1].0;
        while j > 0 && v[j - 1].0 == s {
            if v[j - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j -= 1;
        }
        let threshold = if j > 0 { midpoint(v[j - 1].0, s) } else { f64::NEG_INFINITY };
        out.push(RocPoint { threshold, fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 });
    }
    Ok(out)
}

/// Trapezoidal area under [`roc_curve`].
pub fn auroc_trapezoid(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let roc = roc_curve(scores, labels)?;
    Ok(roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum())
}

pub fn evaluate(category: &str, scores: &[f64], labels: &[Label]) -> Result<EvalResult> {
    let (p, n) = counts(scores, labels)?;
    let b = max_balanced_accuracy(scores, labels)?;
    Ok(EvalResult {
        category: category.into(),
        auroc: auroc(scores, labels)?,
        balanced_accuracy: b.balanced_accuracy,
        best_threshold: b.threshold,
        tpr: b.tpr,
        tnr: b.tnr,
        positives: p,
        negatives: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub auroc: f64,
    pub balanced_accuracy: f64,
    pub categories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub categories: Vec<EvalResult>,
    pub texture: Option<MetricMeans>,
    pub object: Option<MetricMeans>,
    pub overall: MetricMeans,
}

fn means<'a>(rs: impl Iterator<Item = &'a EvalResult>) -> Option<MetricMeans> {
    let (mut a, mut b, mut k) = (0.0, 0.0, 0usize);
    for r in rs {
        a += r.auroc;
        b += r.balanced_accuracy;
        k += 1;
    }
    (k > 0).then(|| MetricMeans { auroc: a / k as f64, balanced_accuracy: b / k as f64, categories: k })
}

/// Per-kind and overall arithmetic means.
pub fn aggregate(results: &[(EvalResult, CategoryKind)]) -> Result<Report> {
    let overall = means(results.iter().map(|r| &r.0)).ok_or_else(|| Error::Evaluation("no results to aggregate".into()))?;
    Ok(Report {
        categories: results.iter().map(|r| r.0.clone()).collect(),
        texture: means(results.iter().filter(|r| r.1 == CategoryKind::Texture).map(|r| &r.0)),
        object: means(results.iter().filter(|r| r.1 == CategoryKind::Object).map(|r| &r.0)),
        overall,
    })
}

/// Fixed-width table of a report.
pub fn format_table(report: &Report) -> String {
    let mut s = format!("{:<16} {:>8} {:>8} {:>12} {:>5} {:>5}\n", "category", "auroc", "B", "threshold", "P", "N");
    for r in &report.categories {
        s += &format!("{:<16} {:>8.4} {:>8.4} {:>12.4} {:>5} {:>5}\n", r.category, r.auroc, r.balanced_accuracy, r.best_threshold, r.positives, r.negatives);
    }
    for (name, m) in [("mean texture", report.texture), ("mean object", report.object), ("mean overall", Some(report.overall))] {
        if let Some(m) = m {
            s += &format!("{:<16} {:>8.4} {:>8.4}\n", name, m.auroc, m.balanced_accuracy);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter().map(|&b| if b { Label::Anomalous } else { Label::Normal }).collect()
    }

    fn example() -> (Vec<f64>, Vec<Label>) {
        (vec![0.1, 0.2, 0.4, 0.3, 0.8], labels(&[false, false, false, true, true]))
    }

    fn pairwise(scores: &[f64], labels: &[Label]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == Label::Anomalous && labels[j] == Label::Normal {
                    den += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn fixed_example() {
        let (s, l) = example();
        let b = max_balanced_accuracy(&s, &l).unwrap();
        assert!((b.balanced_accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!(b.threshold > 0.2 && b.threshold < 0.3, "{}", b.threshold);
        assert!((auroc(&s, &l).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((pairwise(&s, &l) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let l = labels(&[false, true, false, true]);
        assert_eq!(max_balanced_accuracy(&[1.0, 2.0, 0.5, 3.0], &l).unwrap().balanced_accuracy, 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 0.5, 3.0], &l).unwrap(), 1.0);
        let b = max_balanced_accuracy(&[0.7; 4], &l).unwrap();
        assert_eq!(b.balanced_accuracy, 0.5);
        assert_eq!(b.threshold, f64::NEG_INFINITY);
        assert_eq!(auroc(&[0.7; 4], &l).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &labels(&[true, true])), Err(Error::Evaluation(_))));
        assert!(max_balanced_accuracy(&[1.0], &labels(&[false])).is_err());
    }

    #[test]
    fn aggregation_means() {
        let r = |c: &str, a: f64| EvalResult { category: c.into(), auroc: a, balanced_accuracy: a, best_threshold: 0.0, tpr: 1.0, tnr: 1.0, positives: 1, negatives: 1 };
        let rep = aggregate(&[(r("a", 0.8), CategoryKind::Texture), (r("b", 0.9), CategoryKind::Texture), (r("c", 0.7), CategoryKind::Object)]).unwrap();
        assert!((rep.texture.unwrap().auroc - 0.85).abs() < 1e-12);
        assert!((rep.object.unwrap().auroc - 0.7).abs() < 1e-12);
        assert!((rep.overall.auroc - 0.8).abs() < 1e-12);
        let one = aggregate(&[(r("a", 0.6), CategoryKind::Object)]).unwrap();
        assert_eq!(one.overall.auroc, 0.6);
        assert_eq!(one.object.unwrap().auroc, 0.6);
        assert!(aggregate(&[]).is_err());
        assert!(format_table(&rep).contains("mean texture"));
    }

    fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (proptest::collection::vec((0u8..12).prop_map(|v| v as f64 * 0.25 - 1.0), n), proptest::collection::vec(any::<bool>(), n))
        }).prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn mann_whitney_matches_pairs_and_trapezoid((s, l) in score_sets()) {
            let l = labels(&l);
            let a = auroc(&s, &l).unwrap();
            prop_assert!((a - pairwise(&s, &l)).abs() < 1e-12);
            prop_assert!((a - auroc_trapezoid(&s, &l).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn balanced_accuracy_floor_and_identity((s, l) in score_sets()) {
            let l = labels(&l);
            let b = max_balanced_accuracy(&s, &l).unwrap();
            prop_assert!(b.balanced_accuracy >= 0.5);
            prop_assert_eq!(b.balanced_accuracy, (b.tpr + b.tnr) / 2.0);
        }

        #[test]
        fn monotone_transform_invariance((s, l) in score_sets()) {
            let l = labels(&l);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            prop_assert_eq!(max_balanced_accuracy(&s, &l).unwrap().balanced_accuracy, max_balanced_accuracy(&t, &l).unwrap().balanced_accuracy);
        }

        #[test]
        fn negation_complements_without_ties(n in 2usize..40, seed in any::<u64>()) {
            let s: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(2654435761) ^ seed) as f64).collect();
            let mut uniq = s.clone();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            prop_assume!(uniq.len() == n);
            let l = labels(&(0..n).map(|i| i % 2 == 0).collect::<Vec<_>>());
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
