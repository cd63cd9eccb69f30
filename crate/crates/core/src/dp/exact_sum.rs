/// Exact accumulator for finite `f64` values.
///
/// Keeps the running sum as a list of non-overlapping partials (Shewchuk's
/// algorithm) and rounds once at the end, so the result is the correctly
/// rounded exact sum and therefore independent of the order in which values
/// or other accumulators were added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round half-even correction when the remaining partials push the
        // exact value past the halfway point.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation() {
        let s: ExactSum = [1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 1.0);
        let s: ExactSum = [0.1; 10].into_iter().collect();
        assert_eq!(s.value(), 1.0);
        assert_eq!(ExactSum::new().value(), 0.0);
    }

    #[test]
    fn half_even_rounding() {
        // 1 + 2^-53 + 2^-106: exact value is just above the halfway point.
        let s: ExactSum = [1.0, 2f64.powi(-53), 2f64.powi(-106)].into_iter().collect();
        assert_eq!(s.value(), 1.0 + f64::EPSILON);
    }

    // Scaled integers give an independent exact reference.
    proptest! {
        #[test]
        fn matches_integer_reference(v in prop::collection::vec(-1_000_000_000i64..1_000_000_000, 0..200)) {
            let scale = 2f64.powi(-20);
            let exact: i64 = v.iter().sum();
            let s: ExactSum = v.iter().map(|&x| x as f64 * scale).collect();
            prop_assert_eq!(s.value(), exact as f64 * scale);
        }

        #[test]
        fn order_and_grouping_independent(
            v in prop::collection::vec(-1e12f64..1e12, 0..100),
            split in 0usize..100,
        ) {
            let whole: ExactSum = v.iter().copied().collect();
            let split = split.min(v.len());
            let mut left: ExactSum = v[..split].iter().copied().collect();
            let right: ExactSum = v[split..].iter().rev().copied().collect();
            left.merge(&right);
            prop_assert_eq!(whole.value().to_bits(), left.value().to_bits());
        }
    }
}
