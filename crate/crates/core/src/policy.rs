//! Nonrandomized Markov policies on state grids.

use crate::error::{Error, Result};
use crate::model::{interpolate, Model};

/// Controls `u_t(x_i)` for the decision epochs `first..=last`, one vector
/// per epoch over that epoch's state grid. A policy with no epochs is the
/// (empty) continuation from the last decision epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    first: usize,
    controls: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(first: usize, controls: Vec<Vec<f64>>) -> Self {
        assert!(first >= 1, "epochs are 1-based");
        Self { first, controls }
    }

    /// A full policy for epochs `1..=controls.len()`.
    pub fn full(controls: Vec<Vec<f64>>) -> Self {
        Self::new(1, controls)
    }

    pub fn empty(first: usize) -> Self {
        Self::new(first, Vec::new())
    }

    pub fn first(&self) -> usize {
        self.first
    }

    /// Last decision epoch covered (`first − 1` when empty).
    pub fn last(&self) -> usize {
        self.first + self.controls.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.first && t <= self.last()
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.controls[t - self.first]
    }

    pub fn control(&self, t: usize, i: usize) -> f64 {
        self.controls[t - self.first][i]
    }

    pub fn epochs(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.controls
            .iter()
            .enumerate()
            .map(move |(k, c)| (self.first + k, c.as_slice()))
    }

    /// The continuation from epoch `from` on.
    pub fn tail(&self, from: usize) -> Self {
        assert!(from >= self.first && from <= self.last() + 1);
        Self::new(from, self.controls[from - self.first..].to_vec())
    }

    /// Extends the policy one epoch backwards.
    pub fn prepend(&self, controls: Vec<f64>) -> Self {
        assert!(self.first >= 2);
        let mut all = Vec::with_capacity(self.controls.len() + 1);
        all.push(controls);
        all.extend(self.controls.iter().cloned());
        Self::new(self.first - 1, all)
    }

    /// Copy with `u_t(x_i)` replaced by `u`.
    pub fn with_control(&self, t: usize, i: usize, u: f64) -> Self {
        let mut p = self.clone();
        p.controls[t - self.first][i] = u;
        p
    }

    /// Control at an arbitrary state, linear in the state between nodes and
    /// flat beyond the grid.
    pub fn interpolate(&self, model: &Model, t: usize, x: f64) -> f64 {
        interpolate(model.grids.at(t), self.at(t), x)
    }

    /// Checks shape against the model and that every control is feasible.
    pub fn check(&self, model: &Model) -> Result<()> {
        if !self.is_empty() && self.last() != model.epochs() - 1 {
            return Err(Error::Policy(format!(
                "policy ends at epoch {} but the horizon is {}",
                self.last(),
                model.epochs()
            )));
        }
        for (t, controls) in self.epochs() {
            let grid = model.grids.at(t);
            if controls.len() != grid.len() {
                return Err(Error::Policy(format!(
                    "epoch {t}: {} controls for {} states",
                    controls.len(),
                    grid.len()
                )));
            }
            for (i, (&x, &u)) in grid.iter().zip(controls).enumerate() {
                if !model.constraints.contains(t, x, u) {
                    let (lo, hi) = model.constraints.interval(t, x);
                    return Err(Error::InfeasibleControl { t, node: i, u, lo, hi });
                }
            }
        }
        Ok(())
    }

    /// Largest `|u − v|` over all nodes where both policies are defined.
    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.epochs()
            .filter(|(t, _)| other.covers(*t))
            .flat_map(|(t, a)| a.iter().zip(other.at(t)).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tails_and_prepends() {
        let p = Policy::full(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(p.last(), 3);
        let tail = p.tail(2);
        assert_eq!(tail.first(), 2);
        assert_eq!(tail.at(3), &[5.0, 6.0]);
        assert!(p.tail(4).is_empty());
        assert_eq!(tail.prepend(vec![1.0, 2.0]), p);
        assert_eq!(p.with_control(2, 1, 0.0).control(2, 1), 0.0);
        assert_eq!(p.max_abs_diff(&p.with_control(3, 0, 4.5)), 0.5);
    }
}
