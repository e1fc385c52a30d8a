//! Order-independent reductions.
//!
//! Loss terms are summed row by row with Neumaier compensation and the row
//! partials are then combined in row order, so serial and parallel runs
//! produce the same bits.

use rayon::prelude::*;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Sums `f(row)` over `rows` rows, where each call returns a row partial.
/// Row partials are computed in parallel and merged in row order.
pub fn sum_rows<F>(rows: usize, f: F) -> f64
where
    F: Fn(usize) -> CompensatedSum + Sync + Send,
{
    let partials: Vec<CompensatedSum> = (0..rows).into_par_iter().map(f).collect();
    let mut total = CompensatedSum::new();
    for p in partials {
        total.merge(p);
    }
    total.value()
}

/// Compensated sum of a slice.
pub fn sum_slice(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<CompensatedSum>().value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum_slice(&xs), 2.0);
    }

    #[test]
    fn row_sum_matches_serial() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.3).collect();
        let serial = sum_slice(&vals);
        let rows = sum_rows(10, |r| vals[r * 100..(r + 1) * 100].iter().copied().collect());
        assert!((serial - rows).abs() < 1e-12);
        let again = sum_rows(10, |r| vals[r * 100..(r + 1) * 100].iter().copied().collect());
        assert_eq!(rows.to_bits(), again.to_bits());
    }
}
