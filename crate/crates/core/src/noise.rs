//! Standardized noise densities and their quadrature rules.
//!
//! Every density here has mean 0 and variance 1, so an additive kernel
//! `x' = μ(x,u) + σ(x,u)·W` has conditional mean μ and variance σ².

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Tail mass left outside the truncated support of trapezoid rules.
pub const DISCRETIZATION_TAIL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDensity {
    /// Standard normal; integrated with Gauss–Hermite.
    #[default]
    Gaussian,
    /// Laplace with unit variance; composite trapezoid on a truncated support.
    Laplace,
}

const LAPLACE_SCALE: f64 = FRAC_1_SQRT_2;

impl NoiseDensity {
    pub fn pdf(&self, w: f64) -> f64 {
        match self {
            Self::Gaussian => (-0.5 * w * w).exp() / (2.0 * PI).sqrt(),
            Self::Laplace => (-w.abs() / LAPLACE_SCALE).exp() / (2.0 * LAPLACE_SCALE),
        }
    }

    pub fn cdf(&self, w: f64) -> f64 {
        match self {
            Self::Gaussian => 0.5 * erfc(-w / SQRT_2),
            Self::Laplace => {
                if w < 0.0 {
                    0.5 * (w / LAPLACE_SCALE).exp()
                } else {
                    1.0 - 0.5 * (-w / LAPLACE_SCALE).exp()
                }
            }
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Self::Gaussian => -SQRT_2 * erfc_inv(2.0 * p),
            Self::Laplace => {
                if p < 0.5 {
                    LAPLACE_SCALE * (2.0 * p).ln()
                } else {
                    -LAPLACE_SCALE * (2.0 * (1.0 - p)).ln()
                }
            }
        }
    }

    /// Half-width `K` with `P(|W| > K) = tail_mass`.
    pub fn truncation(&self, tail_mass: f64) -> f64 {
        self.quantile(1.0 - 0.5 * tail_mass)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => StandardNormal.sample(rng),
            Self::Laplace => {
                let p: f64 = rng.random::<f64>();
                self.quantile(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            }
        }
    }

    /// Quadrature rule for `E[g(W)]` with the declared family for this density.
    pub fn quadrature(&self, order: usize) -> Result<QuadRule> {
        if order < 2 {
            return Err(Error::Kernel(format!("quadrature order must be ≥ 2 (got {order})")));
        }
        let rule = match self {
            Self::Gaussian => {
                let gh = GaussHermite::new(NonZeroUsize::new(order).expect("order ≥ 2"));
                let norm = PI.sqrt();
                let (nodes, weights) = gh
                    .as_node_weight_pairs()
                    .iter()
                    .map(|&(x, w)| (SQRT_2 * x, w / norm))
                    .unzip();
                QuadRule { nodes, weights }
            }
            Self::Laplace => {
                // odd point count so the kink at 0 is a node
                let n = if order.is_multiple_of(2) { order + 1 } else { order };
                let k = self.truncation(DISCRETIZATION_TAIL);
                let h = 2.0 * k / (n - 1) as f64;
                let nodes: Vec<f64> = (0..n).map(|i| -k + h * i as f64).collect();
                let weights = nodes
                    .iter()
                    .enumerate()
                    .map(|(i, &z)| {
                        let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                        end * h * self.pdf(z)
                    })
                    .collect();
                QuadRule { nodes, weights }
            }
        };
        rule.normalized()
    }

    /// Numerical integral of the density over a wide truncated support.
    pub fn total_mass(&self) -> f64 {
        let k = self.truncation(1e-14);
        let panels = 400_000;
        // integrate each half separately; both densities peak at 0
        let half = |a: f64, b: f64| {
            let h = (b - a) / panels as f64;
            let inner: f64 = (1..panels).map(|i| self.pdf(a + h * i as f64)).sum();
            h * (0.5 * (self.pdf(a) + self.pdf(b)) + inner)
        };
        half(-k, 0.0) + half(0.0, k)
    }
}

/// Nodes and nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    fn normalized(mut self) -> Result<Self> {
        let total: f64 = self.weights.iter().sum();
        if !total.is_finite()
            || total <= 0.0
            || self.weights.iter().chain(&self.nodes).any(|v| !v.is_finite())
        {
            return Err(Error::Kernel("quadrature weights non-finite".into()));
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest absolute abscissa.
    pub fn z_max(&self) -> f64 {
        self.nodes.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * g(z)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_integrate_to_one() {
        for d in [NoiseDensity::Gaussian, NoiseDensity::Laplace] {
            assert!((d.total_mass() - 1.0).abs() < 1e-8, "{d:?}: {}", d.total_mass());
        }
    }

    #[test]
    fn gauss_hermite_moments_are_exact() {
        let rule = NoiseDensity::Gaussian.quadrature(8).unwrap();
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(rule.expect(|z| z).abs() < 1e-14);
        assert!((rule.expect(|z| z * z) - 1.0).abs() < 1e-13);
        assert!((rule.expect(|z| z.powi(4)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn laplace_rule_has_unit_variance() {
        let rule = NoiseDensity::Laplace.quadrature(2001).unwrap();
        assert!(rule.expect(|z| z).abs() < 1e-12);
        assert!((rule.expect(|z| z * z) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for d in [NoiseDensity::Gaussian, NoiseDensity::Laplace] {
            for p in [1e-9, 0.01, 0.3, 0.5, 0.77, 0.999] {
                // statrs' inverse erfc carries a relative error of about 1e-11
                let err = (d.cdf(d.quantile(p)) - p).abs() / p.min(1.0 - p);
                assert!(err < 1e-9, "{d:?} p={p} rel err {err:e}");
            }
        }
    }

    #[test]
    fn order_below_two_is_rejected() {
        assert!(NoiseDensity::Gaussian.quadrature(1).is_err());
    }
}
