use serde::Serialize;

/// Binary classification metrics with covid as the positive class.
///
/// `confusion[true][predicted]`, index 0 = covid, 1 = healthy. Ratios with
/// an empty denominator are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: [[usize; 2]; 2],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Self {
        let [[tp, fn_], [fp, tn]] = confusion;
        Self {
            accuracy: ratio(tp + tn, tp + fn_ + fp + tn),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            confusion,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = [[0usize; 2]; 2];
        for (truth, pred) in pairs {
            c[truth][pred] += 1;
        }
        Self::from_confusion(c)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_classifier() {
        let pairs = (0..10).map(|_| (0, 0)).chain((0..10).map(|_| (1, 1)));
        let m = Metrics::from_pairs(pairs);
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
        assert_eq!(m.total(), 20);
    }

    #[test]
    fn always_covid() {
        let pairs = (0..10).map(|_| (0, 0)).chain((0..10).map(|_| (1, 0)));
        let m = Metrics::from_pairs(pairs);
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.5, 1.0, 0.0));
    }

    #[test]
    fn hand_confusion() {
        let m = Metrics::from_confusion([[8, 2], [1, 9]]);
        assert_abs_diff_eq!(m.sensitivity, 0.8);
        assert_abs_diff_eq!(m.specificity, 0.9);
        assert_abs_diff_eq!(m.accuracy, 0.85);
        assert_eq!(m.total(), 20);
    }
}
