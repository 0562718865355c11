//! Error-free-transformation accumulation.
//!
//! Every pairwise aggregate in the estimator goes through [`Compensated`], which
//! carries the running rounding error of a TwoSum chain alongside the sum.

/// Running sum with a TwoSum compensation term (Kahan–Babuška, branch free).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    pub const ZERO: Compensated = Compensated { sum: 0.0, comp: 0.0 };

    #[inline(always)]
    pub fn add(&mut self, x: f64) {
        let s = self.sum + x;
        let bp = s - self.sum;
        let ap = s - bp;
        self.comp += (self.sum - ap) + (x - bp);
        self.sum = s;
    }

    /// Folds another accumulator into this one, keeping both error terms.
    #[inline]
    pub fn merge(&mut self, other: &Compensated) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for Compensated {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Compensated::ZERO;
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of a slice.
pub fn sum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<Compensated>().value()
}
