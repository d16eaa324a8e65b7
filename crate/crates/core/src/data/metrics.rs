use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{preds} predictions for {labels} labels")]
    Length { preds: usize, labels: usize },
    #[error("value {value} outside [0, {classes})")]
    Range { value: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Macro averages over classes present in labels or predictions.
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    /// Correct over total.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[label][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Nonnegative fraction in lowest terms, so macro means of small counts
/// round once (11/15 comes out as `11.0 / 15.0`).
#[derive(Clone, Copy, Debug)]
struct Frac {
    num: u128,
    den: u128,
}

impl Frac {
    fn new(num: u128, den: u128) -> Self {
        if den == 0 || num == 0 {
            return Self { num: 0, den: 1 };
        }
        let g = gcd(num, den);
        Self { num: num / g, den: den / g }
    }

    fn checked_add(self, o: Self) -> Option<Self> {
        let num = self.num.checked_mul(o.den)?.checked_add(o.num.checked_mul(self.den)?)?;
        Some(Self::new(num, self.den.checked_mul(o.den)?))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Mean of fractions, exact while the running sum fits in `u128`.
fn exact_mean(parts: &[(usize, usize)]) -> f64 {
    if parts.is_empty() {
        return 0.0;
    }
    let exact = parts
        .iter()
        .try_fold(Frac::new(0, 1), |acc, &(n, d)| acc.checked_add(Frac::new(n as u128, d as u128)))
        .and_then(|sum| Some(Frac::new(sum.num, sum.den.checked_mul(parts.len() as u128)?)));
    match exact {
        Some(f) => f.to_f64(),
        None => parts.iter().map(|&(n, d)| ratio(n, d)).sum::<f64>() / parts.len() as f64,
    }
}

pub fn compute_metrics(preds: &[usize], labels: &[usize], classes: usize) -> Result<MetricReport, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::Length { preds: preds.len(), labels: labels.len() });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if let Some(&value) = [p, l].iter().find(|&&v| v >= classes) {
            return Err(MetricError::Range { value, classes });
        }
        confusion[l][p] += 1;
    }
    // (tp, predicted, support) per class.
    let counts: Vec<(usize, usize, usize)> = (0..classes)
        .map(|c| (confusion[c][c], confusion.iter().map(|row| row[c]).sum(), confusion[c].iter().sum()))
        .collect();
    let per_class: Vec<ClassMetrics> = counts
        .iter()
        .map(|&(tp, predicted, support)| ClassMetrics {
            precision: ratio(tp, predicted),
            recall: ratio(tp, support),
            f1: ratio(2 * tp, predicted + support),
            support,
        })
        .collect();
    let present: Vec<&(usize, usize, usize)> = counts.iter().filter(|&&(_, p, s)| p + s > 0).collect();
    let macro_mean = |f: fn(&(usize, usize, usize)) -> (usize, usize)| {
        exact_mean(&present.iter().map(|&c| f(c)).collect::<Vec<_>>())
    };
    let correct = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(MetricReport {
        precision: macro_mean(|&(tp, p, _)| (tp, p)),
        recall: macro_mean(|&(tp, _, s)| (tp, s)),
        macro_f1: macro_mean(|&(tp, p, s)| (2 * tp, p + s)),
        accuracy: ratio(correct, preds.len()),
        per_class,
        confusion,
    })
}

impl MetricReport {
    /// Plain-text summary, one class per line.
    pub fn render(&self, names: &[&str]) -> String {
        let mut s = format!(
            "precision {:.4}  recall {:.4}  macro-f1 {:.4}  accuracy {:.4}\n",
            self.precision, self.recall, self.macro_f1, self.accuracy
        );
        for (i, m) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            s.push_str(&format!(
                "  {name:<15} p {:.4}  r {:.4}  f1 {:.4}  n {}\n",
                m.precision, m.recall, m.f1, m.support
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};

    #[test]
    fn hand_confusion() {
        // confusion [[1,1],[0,2]]
        let labels = [0, 0, 1, 1];
        let preds = [0, 1, 1, 1];
        let r = compute_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-15);
        assert_eq!(r.macro_f1, 11.0 / 15.0);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn perfect() {
        let y = [0, 1, 2, 2, 1];
        let r = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((r.precision, r.recall, r.macro_f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_predictions() {
        let r = compute_metrics(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_skipped() {
        let r = compute_metrics(&[0, 1], &[0, 1], 7).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        let r = compute_metrics(&[0, 2], &[0, 1], 3).unwrap();
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(compute_metrics(&[0], &[0, 1], 2), Err(MetricError::Length { preds: 1, labels: 2 }));
        assert!(compute_metrics(&[3], &[0], 2).is_err());
    }

    fn pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..7).prop_flat_map(|k| (Just(k), proptest::collection::vec((0..k, 0..k), 1..40)))
    }

    #[test]
    fn exact_mean_overflow_falls_back() {
        let big = usize::MAX - 58;
        let parts = [(1, big), (1, big - 2), (3, big - 6), (5, big - 12)];
        let float = parts.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / 4.0;
        assert!((exact_mean(&parts) - float).abs() <= 1e-15 * float);
        assert_eq!(exact_mean(&[(2, 3), (4, 5)]), 11.0 / 15.0);
        assert_eq!(exact_mean(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn permutation_invariant((k, mut v) in pairs(), rot in 0usize..40) {
            let (p, l): (Vec<_>, Vec<_>) = v.iter().copied().unzip();
            let a = compute_metrics(&p, &l, k).unwrap();
            let n = v.len();
            v.rotate_left(rot % n);
            v.reverse();
            let (p, l): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let b = compute_metrics(&p, &l, k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn macro_between_extremes((k, v) in pairs()) {
            let (p, l): (Vec<_>, Vec<_>) = v.into_iter().unzip();
            let r = compute_metrics(&p, &l, k).unwrap();
            let present: Vec<f64> = (0..k)
                .filter(|&c| p.contains(&c) || l.contains(&c))
                .map(|c| r.per_class[c].f1)
                .collect();
            let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.macro_f1 >= lo - 1e-12 && r.macro_f1 <= hi + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
        }
    }
}
