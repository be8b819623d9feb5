//! Proliferation index (percentage of Ki-67⁺ cells among all tumour cells).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiScore {
    pub value: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

impl PiScore {
    pub fn total(&self) -> usize {
        self.pos_count + self.neg_count
    }
}

pub fn compute_pi(pos_count: usize, neg_count: usize) -> Result<PiScore> {
    let total = pos_count + neg_count;
    if total == 0 {
        return Err(Error::ZeroCells);
    }
    Ok(PiScore { value: 100.0 * pos_count as f64 / total as f64, pos_count, neg_count })
}

/// Absolute PI difference in percentage points.
pub fn delta_pi(actual: &PiScore, predicted: &PiScore) -> f64 {
    (actual.value - predicted.value).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(v: f64) -> PiScore {
        PiScore { value: v, pos_count: 0, neg_count: 0 }
    }

    #[test]
    fn worked_values() {
        assert_eq!(compute_pi(20, 80).unwrap().value, 20.0);
        assert_eq!(compute_pi(0, 57).unwrap().value, 0.0);
        assert_eq!(compute_pi(58, 0).unwrap().value, 100.0);
        assert!(matches!(compute_pi(0, 0), Err(Error::ZeroCells)));
    }

    #[test]
    fn delta_values() {
        assert!((delta_pi(&score(20.0), &score(24.8)) - 4.8).abs() < 1e-12);
        assert_eq!(delta_pi(&score(33.3), &score(33.3)), 0.0);
        assert_eq!(delta_pi(&score(7.5), &score(0.0)), 7.5);
    }

    proptest! {
        #[test]
        fn complement_sums_to_100(p in 1usize..10_000, n in 1usize..10_000) {
            let s = compute_pi(p, n).unwrap().value + compute_pi(n, p).unwrap().value;
            prop_assert!((s - 100.0).abs() < 1e-9);
        }

        #[test]
        fn delta_is_a_metric(a in 0.0f64..100.0, b in 0.0f64..100.0, c in 0.0f64..100.0) {
            let (a, b, c) = (score(a), score(b), score(c));
            prop_assert_eq!(delta_pi(&a, &b), delta_pi(&b, &a));
            prop_assert!(delta_pi(&a, &c) <= delta_pi(&a, &b) + delta_pi(&b, &c) + 1e-12);
        }
    }
}
