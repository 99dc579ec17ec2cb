//! Collapsing of repeated input locations.
//!
//! Surveys record many fingerprints at the same spot. With `P` distinct
//! locations among `N` inputs, the indicator matrix `A` (N x P) maps each
//! record to its location and `Q = A C^{-1/2}` (with `C` the diagonal of
//! replicate counts) has orthonormal columns. Any covariance of the form
//! `A K A^T + s I` then splits as
//!
//! ```text
//! s (I - Q Q^T) + Q (s I + C^{1/2} K C^{1/2}) Q^T
//! ```
//!
//! so inverses, determinants and quadratic forms reduce exactly to the P x P
//! matrix `s I + C^{1/2} K C^{1/2}`.

use std::cmp::Ordering;

use nalgebra::DVector;

use crate::data::Position;

#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    /// Distinct locations, sorted by `(x, y)`.
    pub points: Vec<Position>,
    pub counts: Vec<usize>,
    /// For every input, the index of its location in `points`.
    pub member: Vec<usize>,
}

impl Replicates {
    pub fn new(inputs: &[Position]) -> Self {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by(|&a, &b| cmp_pos(&inputs[a], &inputs[b]).then(a.cmp(&b)));
        let mut points: Vec<Position> = Vec::new();
        let mut counts = Vec::new();
        let mut member = vec![0; inputs.len()];
        for i in order {
            let p = inputs[i];
            if points.last().map_or(true, |last| cmp_pos(last, &p) != Ordering::Equal) {
                points.push(p);
                counts.push(0);
            }
            counts[points.len() - 1] += 1;
            member[i] = points.len() - 1;
        }
        Replicates {
            points,
            counts,
            member,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.member.len()
    }

    pub fn n_unique(&self) -> usize {
        self.points.len()
    }

    pub fn sqrt_counts(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.counts.len(),
            self.counts.iter().map(|&c| (c as f64).sqrt()),
        )
    }

    /// `Q^T v`: per-location sums divided by the square root of the count.
    pub fn project(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_unique());
        for (&m, &x) in self.member.iter().zip(v) {
            out[m] += x;
        }
        for (o, &c) in out.iter_mut().zip(&self.counts) {
            *o /= (c as f64).sqrt();
        }
        out
    }

    /// Per-location means of `v`.
    pub fn group_means(&self, v: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_unique()];
        for (&m, &x) in self.member.iter().zip(v) {
            sums[m] += x;
        }
        sums.iter()
            .zip(&self.counts)
            .map(|(s, &c)| s / c as f64)
            .collect()
    }

    /// `|v - Q Q^T v|^2`, the within-location sum of squares.
    pub fn within_sum_of_squares(&self, v: &[f64]) -> f64 {
        let means = self.group_means(v);
        self.member
            .iter()
            .zip(v)
            .map(|(&m, &x)| (x - means[m]).powi(2))
            .sum()
    }
}

fn cmp_pos(a: &Position, b: &Position) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_duplicates() {
        let pts = [
            Position::new(1.0, 0.0),
            Position::new(0.0, 0.0),
            Position::new(1.0, 0.0),
        ];
        let r = Replicates::new(&pts);
        assert_eq!(r.points, vec![Position::new(0.0, 0.0), Position::new(1.0, 0.0)]);
        assert_eq!(r.counts, vec![1, 2]);
        assert_eq!(r.member, vec![1, 0, 1]);
        let v = [3.0, 5.0, 1.0];
        assert_eq!(r.group_means(&v), vec![5.0, 2.0]);
        assert!((r.within_sum_of_squares(&v) - 2.0).abs() < 1e-15);
        let q = r.project(&v);
        assert!((q[1] - 4.0 / 2f64.sqrt()).abs() < 1e-15);
        // |v|^2 = |Q^T v|^2 + within SS
        let total: f64 = v.iter().map(|x| x * x).sum();
        assert!((total - q.norm_squared() - r.within_sum_of_squares(&v)).abs() < 1e-12);
    }
}
