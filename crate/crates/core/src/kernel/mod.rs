//! Transition kernels on state grids.
//!
//! Additive-noise kernels are discretized by pushing each quadrature
//! abscissa `μ + σ·z_q` onto its two bracketing grid nodes (linear mass
//! interpolation, mass beyond the grid clamped to the edge node).
//! Interpolation inflates the variance, so the abscissae are first
//! contracted toward their mean just enough that the interpolated row has
//! the quadrature variance; quadratic integrands are then reproduced
//! exactly whenever no mass is clamped.

mod cache;
mod continuity;

pub use cache::{read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use continuity::{
    setwise_continuity_probe, tv_distance, Interval, ProbeEntry, ProbeReport, StepFunction,
    DEFAULT_TV_PANELS, TV_TAIL,
};

use crate::error::{Error, Result};
use crate::model::{
    feasibility_slack, locate, AdditiveNoise, ControlConstraint, KernelSpec, Model, StateGrid,
};
use crate::noise::QuadRule;
use crate::par;

/// Row-sum tolerance for discretized and policy rows.
pub const ROW_TOL: f64 = 1e-10;

/// How a control value strictly between two control nodes is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffNodeRule {
    /// Quadrature at the exact control value (additive-noise kernels only).
    #[default]
    Requadrature,
    /// Linear blend of the two bracketing rows.
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscretizeOptions {
    pub quad_order: usize,
    pub off_node: OffNodeRule,
    pub moment_correction: bool,
}

impl DiscretizeOptions {
    pub fn new(quad_order: usize) -> Self {
        Self {
            quad_order,
            off_node: OffNodeRule::Requadrature,
            moment_correction: true,
        }
    }
}

/// A probability row stored as a dense segment starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Borrowed view of a stored row.
#[derive(Debug, Clone, Copy)]
pub struct RowRef<'a> {
    pub start: usize,
    pub weights: &'a [f64],
}

pub trait RowView {
    fn start(&self) -> usize;
    fn weights(&self) -> &[f64];

    /// `Σ_m w_m g_m`.
    fn dot(&self, g: &[f64]) -> f64 {
        let s = self.start();
        self.weights().iter().zip(&g[s..]).map(|(w, v)| w * v).sum()
    }

    fn sum(&self) -> f64 {
        self.weights().iter().sum()
    }

    fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        let s = self.start();
        out[s..s + self.weights().len()].copy_from_slice(self.weights());
        out
    }

    /// `acc[m] += scale · w_m`.
    fn add_scaled(&self, scale: f64, acc: &mut [f64]) {
        let s = self.start();
        for (a, w) in acc[s..].iter_mut().zip(self.weights()) {
            *a += scale * w;
        }
    }
}

impl RowView for KernelRow {
    fn start(&self) -> usize {
        self.start
    }
    fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl RowView for RowRef<'_> {
    fn start(&self) -> usize {
        self.start
    }
    fn weights(&self) -> &[f64] {
        self.weights
    }
}

/// Either a stored row or one computed for an off-node control.
#[derive(Debug, Clone)]
pub enum Row<'a> {
    Stored(RowRef<'a>),
    Computed(KernelRow),
}

impl RowView for Row<'_> {
    fn start(&self) -> usize {
        match self {
            Row::Stored(r) => r.start,
            Row::Computed(r) => r.start,
        }
    }
    fn weights(&self) -> &[f64] {
        match self {
            Row::Stored(r) => r.weights,
            Row::Computed(r) => &r.weights,
        }
    }
}

impl Row<'_> {
    pub fn into_owned(self) -> KernelRow {
        match self {
            Row::Stored(r) => KernelRow {
                start: r.start,
                weights: r.weights.to_vec(),
            },
            Row::Computed(r) => r,
        }
    }
}

/// Sparse storage for one transition epoch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EpochSlice {
    pub n_states: usize,
    pub n_controls: usize,
    pub n_next: usize,
    pub controls: Vec<f64>,
    pub offsets: Vec<usize>,
    pub starts: Vec<usize>,
    pub data: Vec<f64>,
    pub clamped: Vec<f64>,
}

impl EpochSlice {
    pub(crate) fn from_rows(
        n_states: usize,
        n_controls: usize,
        n_next: usize,
        controls: Vec<f64>,
        rows: Vec<(KernelRow, f64)>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut starts = Vec::with_capacity(rows.len());
        let mut clamped = Vec::with_capacity(rows.len());
        let mut data = Vec::new();
        offsets.push(0);
        for (row, c) in rows {
            starts.push(row.start);
            data.extend_from_slice(&row.weights);
            offsets.push(data.len());
            clamped.push(c);
        }
        Self {
            n_states,
            n_controls,
            n_next,
            controls,
            offsets,
            starts,
            data,
            clamped,
        }
    }

    fn row(&self, i: usize, j: usize) -> RowRef<'_> {
        let r = i * self.n_controls + j;
        RowRef {
            start: self.starts[r],
            weights: &self.data[self.offsets[r]..self.offsets[r + 1]],
        }
    }
}

/// Per-epoch transition weights `W[t][i][j][m]` with cached control nodes.
#[derive(Debug, Clone)]
pub struct DiscretizedKernel {
    pub(crate) slices: Vec<EpochSlice>,
    grids: StateGrid,
    constraints: ControlConstraint,
    source: KernelSpec,
    rule: Option<QuadRule>,
    options: DiscretizeOptions,
}

/// Where a control value falls on the control grid of `(t, i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlPosition {
    Node(usize),
    Between(usize, f64),
}

pub fn discretize(
    kernel: &KernelSpec,
    grids: &StateGrid,
    constraints: &ControlConstraint,
    quad_order: usize,
) -> Result<DiscretizedKernel> {
    discretize_with(kernel, grids, constraints, DiscretizeOptions::new(quad_order))
}

pub fn discretize_with(
    kernel: &KernelSpec,
    grids: &StateGrid,
    constraints: &ControlConstraint,
    options: DiscretizeOptions,
) -> Result<DiscretizedKernel> {
    let epochs = grids.epochs();
    let n_controls = constraints.resolution();
    let (rule, slices) = match kernel {
        KernelSpec::AdditiveNoise(spec) => {
            let rule = spec.noise.quadrature(options.quad_order)?;
            let mut slices = Vec::with_capacity(epochs - 1);
            for t in 1..epochs {
                let states = grids.at(t);
                let next = grids.at(t + 1);
                let per_state = par::map_indexed(states.len(), |i| {
                    let x = states[i];
                    let nodes = constraints.nodes(t, x);
                    let rows = nodes
                        .iter()
                        .map(|&u| additive_row_checked(spec, &rule, t, x, u, next, options.moment_correction))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((nodes, rows))
                });
                let mut controls = Vec::with_capacity(states.len() * n_controls);
                let mut rows = Vec::with_capacity(states.len() * n_controls);
                for item in per_state {
                    let (nodes, r) = item?;
                    controls.extend(nodes);
                    rows.extend(r);
                }
                slices.push(EpochSlice::from_rows(states.len(), n_controls, next.len(), controls, rows));
            }
            (Some(rule), slices)
        }
        KernelSpec::DiscreteChain(chain) => {
            let mut slices = Vec::with_capacity(epochs - 1);
            for t in 1..epochs {
                let states = grids.at(t);
                let next = grids.at(t + 1);
                let mut controls = Vec::with_capacity(states.len() * n_controls);
                let mut rows = Vec::with_capacity(states.len() * n_controls);
                for (i, &x) in states.iter().enumerate() {
                    controls.extend(constraints.nodes(t, x));
                    for j in 0..n_controls {
                        let dense = chain.row(t, i, j);
                        crate::model::check_stochastic_row(t, i, j, dense)?;
                        rows.push((trimmed(dense), 0.0));
                    }
                }
                slices.push(EpochSlice::from_rows(states.len(), n_controls, next.len(), controls, rows));
            }
            (None, slices)
        }
    };
    let dk = DiscretizedKernel {
        slices,
        grids: grids.clone(),
        constraints: constraints.clone(),
        source: kernel.clone(),
        rule,
        options,
    };
    dk.check_rows()?;
    Ok(dk)
}

impl Model {
    /// Discretizes the model's kernel with its declared quadrature order.
    pub fn discretize(&self) -> Result<DiscretizedKernel> {
        let order = self.kernel.as_additive().map_or(2, |k| k.quad_order);
        discretize(&self.kernel, &self.grids, &self.constraints, order)
    }
}

fn trimmed(dense: &[f64]) -> KernelRow {
    let first = dense.iter().position(|&w| w != 0.0).unwrap_or(0);
    let last = dense.iter().rposition(|&w| w != 0.0).unwrap_or(first);
    KernelRow {
        start: first,
        weights: dense[first..=last].to_vec(),
    }
}

fn additive_row_checked(
    spec: &AdditiveNoise,
    rule: &QuadRule,
    t: usize,
    x: f64,
    u: f64,
    next: &[f64],
    moment_correction: bool,
) -> Result<(KernelRow, f64)> {
    let sigma = spec.check_floor(t, x, u)?;
    let mean = spec.mean(t, x, u);
    if !mean.is_finite() {
        return Err(Error::Kernel(format!("non-finite drift at t={t}, x={x}, u={u}")));
    }
    Ok(additive_row(rule, mean, sigma, next, moment_correction))
}

/// Row of `mean + sigma·W` on `next`; also returns the clamped mass.
///
/// Linear interpolation keeps mass and mean but adds `λ(1−λ)Δx²` of
/// variance for every quadrature point it splits. With `moment_correction`
/// (and nothing clamped) the quadrature points are first pulled toward their
/// mean by the factor `s ≤ 1` at which the interpolated row has exactly the
/// quadrature variance, so quadratic integrands are integrated exactly.
pub(crate) fn additive_row(
    rule: &QuadRule,
    mean: f64,
    sigma: f64,
    next: &[f64],
    moment_correction: bool,
) -> (KernelRow, f64) {
    let (lo, hi) = (next[0], next[next.len() - 1]);
    let mut clamped = 0.0;
    let mut q_mean = 0.0;
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let y = mean + sigma * z;
        if y < lo || y > hi {
            clamped += w;
        }
        q_mean += w * y;
    }
    let interpolate = |scale: f64| {
        let points = rule.nodes.iter().map(|&z| q_mean + scale * (mean + sigma * z - q_mean));
        interpolate_points(points, &rule.weights, next)
    };
    let mut row = interpolate(1.0);
    if moment_correction && clamped == 0.0 {
        let q_var: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&z, &w)| w * (mean + sigma * z - q_mean).powi(2))
            .sum();
        let excess = |row: &KernelRow| row_variance(row, next, q_mean) - q_var;
        let at_one = excess(&row);
        if at_one > 0.0 {
            let collapsed = interpolate(0.0);
            let at_zero = excess(&collapsed);
            row = if at_zero >= 0.0 {
                // narrower than the grid can represent
                collapsed
            } else {
                let scale = illinois(|s| excess(&interpolate(s)), (0.0, at_zero), (1.0, at_one), 1e-15 * q_var);
                interpolate(scale)
            };
        }
    }
    (row, clamped)
}

fn interpolate_points(points: impl Iterator<Item = f64>, weights: &[f64], next: &[f64]) -> KernelRow {
    let placed: Vec<(usize, f64)> = points.map(|y| locate(next, y)).collect();
    let first = placed.iter().map(|&(k, l)| if l == 1.0 { k + 1 } else { k }).min().expect("non-empty rule");
    let last = placed.iter().map(|&(k, l)| if l == 0.0 { k } else { k + 1 }).max().expect("non-empty rule");
    let mut seg = vec![0.0; last - first + 1];
    for (&(k, lambda), &w) in placed.iter().zip(weights) {
        if lambda == 0.0 {
            seg[k - first] += w;
        } else if lambda == 1.0 {
            seg[k + 1 - first] += w;
        } else {
            seg[k - first] += w * (1.0 - lambda);
            seg[k + 1 - first] += w * lambda;
        }
    }
    let total: f64 = seg.iter().sum();
    seg.iter_mut().for_each(|w| *w /= total);
    KernelRow { start: first, weights: seg }
}

fn row_variance(row: &KernelRow, next: &[f64], center: f64) -> f64 {
    row.weights
        .iter()
        .zip(&next[row.start..])
        .map(|(w, x)| w * (x - center) * (x - center))
        .sum()
}

/// Root of `f` inside a sign-changing bracket by regula falsi with the
/// Illinois halving; returns the iterate with the smallest residual.
fn illinois(f: impl Fn(f64) -> f64, (mut a, mut fa): (f64, f64), (mut b, mut fb): (f64, f64), tol: f64) -> f64 {
    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for _ in 0..100 {
        let c = b - fb * (b - a) / (fb - fa);
        let fc = f(c);
        if fc.abs() < best.1.abs() {
            best = (c, fc);
        }
        if fc.abs() <= tol || (b - a).abs() <= f64::EPSILON {
            break;
        }
        if (fc > 0.0) == (fb > 0.0) {
            fa *= 0.5;
        } else {
            (a, fa) = (b, fb);
        }
        (b, fb) = (c, fc);
    }
    best.0
}

impl DiscretizedKernel {
    pub(crate) fn from_parts(model: &Model, slices: Vec<EpochSlice>, options: DiscretizeOptions) -> Result<Self> {
        let rule = match &model.kernel {
            KernelSpec::AdditiveNoise(spec) => Some(spec.noise.quadrature(options.quad_order)?),
            KernelSpec::DiscreteChain(_) => None,
        };
        let dk = Self {
            slices,
            grids: model.grids.clone(),
            constraints: model.constraints.clone(),
            source: model.kernel.clone(),
            rule,
            options,
        };
        dk.check_rows()?;
        Ok(dk)
    }

    pub fn epochs(&self) -> usize {
        self.grids.epochs()
    }

    pub fn grids(&self) -> &StateGrid {
        &self.grids
    }

    pub fn constraints(&self) -> &ControlConstraint {
        &self.constraints
    }

    pub fn source(&self) -> &KernelSpec {
        &self.source
    }

    pub fn options(&self) -> DiscretizeOptions {
        self.options
    }

    pub fn is_chain(&self) -> bool {
        self.source.is_chain()
    }

    /// Same tabulation, different handling of off-node controls.
    pub fn with_off_node(mut self, rule: OffNodeRule) -> Self {
        self.options.off_node = rule;
        self
    }

    fn slice(&self, t: usize) -> &EpochSlice {
        &self.slices[t - 1]
    }

    pub fn n_controls(&self, t: usize) -> usize {
        self.slice(t).n_controls
    }

    /// Control nodes at `(t, i)`.
    pub fn controls(&self, t: usize, i: usize) -> &[f64] {
        let s = self.slice(t);
        &s.controls[i * s.n_controls..(i + 1) * s.n_controls]
    }

    pub fn row(&self, t: usize, i: usize, j: usize) -> RowRef<'_> {
        self.slice(t).row(i, j)
    }

    /// Mass clamped at the grid edges for row `(t, i, j)`.
    pub fn clamped_mass(&self, t: usize, i: usize, j: usize) -> f64 {
        let s = self.slice(t);
        s.clamped[i * s.n_controls + j]
    }

    /// Worst clamped mass per transition epoch over interior states
    /// (outer 10% of nodes excluded) under the mid-range control node.
    pub fn clamp_diagnostic(&self) -> Vec<f64> {
        (1..self.epochs())
            .map(|t| {
                let s = self.slice(t);
                let skip = s.n_states / 10;
                let j = s.n_controls / 2;
                (skip..s.n_states - skip)
                    .map(|i| s.clamped[i * s.n_controls + j])
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn locate_control(&self, t: usize, i: usize, u: f64) -> Result<ControlPosition> {
        let nodes = self.controls(t, i);
        let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
        let slack = feasibility_slack(lo, hi);
        if !(u >= lo - slack && u <= hi + slack) {
            return Err(Error::InfeasibleControl {
                t,
                node: i,
                u,
                lo,
                hi,
            });
        }
        if hi == lo || u <= lo {
            return Ok(ControlPosition::Node(0));
        }
        if u >= hi {
            return Ok(ControlPosition::Node(nodes.len() - 1));
        }
        let guess = ((u - lo) / (hi - lo) * (nodes.len() - 1) as f64).floor() as usize;
        let mut j = guess.min(nodes.len() - 2);
        // the linspace guess can be off by one near node values
        while j > 0 && u < nodes[j] {
            j -= 1;
        }
        while j + 1 < nodes.len() - 1 && u >= nodes[j + 1] {
            j += 1;
        }
        if u == nodes[j] {
            Ok(ControlPosition::Node(j))
        } else if u == nodes[j + 1] {
            Ok(ControlPosition::Node(j + 1))
        } else {
            Ok(ControlPosition::Between(j, (u - nodes[j]) / (nodes[j + 1] - nodes[j])))
        }
    }

    /// Transition row from node `i` of epoch `t` under control value `u`.
    pub fn row_at(&self, t: usize, i: usize, u: f64) -> Result<Row<'_>> {
        match self.locate_control(t, i, u)? {
            ControlPosition::Node(j) => Ok(Row::Stored(self.row(t, i, j))),
            ControlPosition::Between(j, lambda) => match (&self.source, self.options.off_node) {
                (KernelSpec::AdditiveNoise(spec), OffNodeRule::Requadrature) => {
                    let rule = self.rule.as_ref().expect("additive kernels carry a rule");
                    let x = self.grids.at(t)[i];
                    let next = self.grids.at(t + 1);
                    let (row, _) =
                        additive_row_checked(spec, rule, t, x, u, next, self.options.moment_correction)?;
                    Ok(Row::Computed(row))
                }
                _ => Ok(Row::Computed(blend(self.row(t, i, j), self.row(t, i, j + 1), lambda))),
            },
        }
    }

    /// Row for any control value, feasible or not (additive kernels only);
    /// used to probe sublevel sets beyond the modeled control window.
    pub fn row_unconstrained(&self, t: usize, i: usize, u: f64) -> Result<Row<'_>> {
        match &self.source {
            KernelSpec::AdditiveNoise(spec) => {
                if let Ok(ControlPosition::Node(j)) = self.locate_control(t, i, u) {
                    return Ok(Row::Stored(self.row(t, i, j)));
                }
                let rule = self.rule.as_ref().expect("additive kernels carry a rule");
                let x = self.grids.at(t)[i];
                let (row, _) = additive_row_checked(
                    spec,
                    rule,
                    t,
                    x,
                    u,
                    self.grids.at(t + 1),
                    self.options.moment_correction,
                )?;
                Ok(Row::Computed(row))
            }
            KernelSpec::DiscreteChain(_) => self.row_at(t, i, u),
        }
    }

    fn check_rows(&self) -> Result<()> {
        for (k, s) in self.slices.iter().enumerate() {
            for i in 0..s.n_states {
                for j in 0..s.n_controls {
                    let row = s.row(i, j);
                    let sum = row.sum();
                    if (sum - 1.0).abs() > ROW_TOL || row.weights.iter().any(|w| !(*w >= 0.0)) {
                        return Err(Error::NonStochasticRow {
                            t: k + 1,
                            node: i,
                            control: j,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn blend(a: RowRef<'_>, b: RowRef<'_>, lambda: f64) -> KernelRow {
    let start = a.start.min(b.start);
    let end = (a.start + a.weights.len()).max(b.start + b.weights.len());
    let mut weights = vec![0.0; end - start];
    for (k, w) in a.weights.iter().enumerate() {
        weights[a.start + k - start] += (1.0 - lambda) * w;
    }
    for (k, w) in b.weights.iter().enumerate() {
        weights[b.start + k - start] += lambda * w;
    }
    KernelRow { start, weights }
}

/// One-step transition matrix under a fixed decision rule at epoch `t`.
#[derive(Debug, Clone)]
pub struct PolicyMatrix {
    pub t: usize,
    pub rows: Vec<KernelRow>,
    pub n_next: usize,
}

impl PolicyMatrix {
    pub fn row(&self, i: usize) -> &KernelRow {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.to_dense(self.n_next)).collect()
    }
}

/// Rows `Q[t][i][·]` for the controls `policy_t[i]` at each node.
pub fn policy_matrix(dk: &DiscretizedKernel, t: usize, policy_t: &[f64]) -> Result<PolicyMatrix> {
    let n = dk.grids.at(t).len();
    if policy_t.len() != n {
        return Err(Error::Policy(format!(
            "epoch {t} has {n} nodes but the decision rule has {} entries",
            policy_t.len()
        )));
    }
    let rows = par::map_indexed(n, |i| dk.row_at(t, i, policy_t[i]).map(Row::into_owned))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyMatrix {
        t,
        rows,
        n_next: dk.grids.at(t + 1).len(),
    })
}

/// `Σ_m w_m g_m` for the row at `(t, i)` under control `u`.
pub fn expectation(dk: &DiscretizedKernel, t: usize, i: usize, u: f64, g: &[f64]) -> Result<f64> {
    if let Some(m) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "integrand",
            t: t + 1,
            node: m,
        });
    }
    Ok(dk.row_at(t, i, u)?.dot(g))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::ChainKernel;
    use crate::noise::NoiseDensity;

    fn gaussian(mu: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, sigma: f64) -> KernelSpec {
        KernelSpec::AdditiveNoise(AdditiveNoise::new(
            Arc::new(move |_, x, u| mu(x, u)),
            Arc::new(move |_, _, _| sigma),
            NoiseDensity::Gaussian,
            1e-9,
            16,
        ))
    }

    fn grid_moments(row: &impl RowView, grid: &[f64]) -> (f64, f64) {
        let d = row.to_dense(grid.len());
        let mean: f64 = d.iter().zip(grid).map(|(w, x)| w * x).sum();
        let var: f64 = d.iter().zip(grid).map(|(w, x)| w * (x - mean).powi(2)).sum();
        (mean, var)
    }

    #[test]
    fn point_mass_limit_lands_on_the_node() {
        let k = gaussian(|x, _| x, 1e-7);
        let grids = StateGrid::uniform(2, -2.0, 2.0, 41).unwrap();
        let dk = discretize(&k, &grids, &ControlConstraint::constant(0.0, 1.0, 3), 16).unwrap();
        let row = dk.row(1, 25, 1).to_dense(41);
        assert!((row[25] - 1.0).abs() < 1e-6, "{}", row[25]);
    }

    #[test]
    fn standard_normal_moments() {
        let k = gaussian(|_, _| 0.0, 1.0);
        let grids = StateGrid::uniform(2, -10.0, 10.0, 81).unwrap();
        let dk = discretize(&k, &grids, &ControlConstraint::constant(0.0, 1.0, 2), 16).unwrap();
        let (mean, var) = grid_moments(&dk.row(1, 40, 0), grids.at(2));
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
        // the corrected tabulation is exact up to rounding
        assert!((var - 1.0).abs() < 1e-12, "{var}");
    }

    #[test]
    fn linear_interpolation_alone_overstates_variance() {
        let k = gaussian(|_, _| 0.05, 0.3);
        let grids = StateGrid::uniform(2, -3.0, 3.0, 21).unwrap();
        let mut opts = DiscretizeOptions::new(16);
        opts.moment_correction = false;
        let plain = discretize_with(&k, &grids, &ControlConstraint::constant(0.0, 1.0, 2), opts).unwrap();
        let (mean, var) = grid_moments(&plain.row(1, 10, 0), grids.at(2));
        assert!((mean - 0.05).abs() < 1e-12);
        assert!(var > 0.09 + 1e-4, "{var}");
    }

    #[test]
    fn chain_is_passed_through() {
        let p = vec![vec![
            vec![vec![0.25, 0.75], vec![1.0, 0.0]],
            vec![vec![0.5, 0.5], vec![0.1, 0.9]],
        ]];
        let chain = KernelSpec::DiscreteChain(ChainKernel::new(p.clone()).unwrap());
        let grids = StateGrid::uniform(2, 0.0, 1.0, 2).unwrap();
        let dk = discretize(&chain, &grids, &ControlConstraint::constant(0.0, 1.0, 2), 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(dk.row(1, i, j).to_dense(2), p[0][i][j]);
            }
        }
    }

    #[test]
    fn policy_rows_at_nodes_and_midpoints() {
        let k = gaussian(|x, u| x + u, 0.7);
        let grids = StateGrid::uniform(2, -8.0, 8.0, 33).unwrap();
        let cons = ControlConstraint::constant(-1.0, 1.0, 5);
        let dk = discretize(&k, &grids, &cons, 12).unwrap();
        let at_node = policy_matrix(&dk, 1, &vec![0.5; 33]).unwrap();
        assert_eq!(at_node.row(7).to_dense(33), dk.row(1, 7, 3).to_dense(33));

        let blended = dk.clone().with_off_node(OffNodeRule::Blend);
        let mid = policy_matrix(&blended, 1, &vec![0.25; 33]).unwrap();
        let (a, b) = (dk.row(1, 7, 2).to_dense(33), dk.row(1, 7, 3).to_dense(33));
        for (m, w) in mid.row(7).to_dense(33).iter().enumerate() {
            assert!((w - 0.5 * (a[m] + b[m])).abs() < 1e-15);
        }
        // requadrature keeps the exact mean as well
        let exact = policy_matrix(&dk, 1, &vec![0.25; 33]).unwrap();
        let (mean, _) = grid_moments(exact.row(16), grids.at(2));
        assert!((mean - 0.25).abs() < 1e-12);
    }

    #[test]
    fn chain_policy_matrix_matches_input() {
        let p = vec![vec![
            vec![vec![0.2, 0.8], vec![0.6, 0.4]],
            vec![vec![0.3, 0.7], vec![0.9, 0.1]],
        ]];
        let chain = KernelSpec::DiscreteChain(ChainKernel::new(p).unwrap());
        let grids = StateGrid::uniform(2, 0.0, 1.0, 2).unwrap();
        let dk = discretize(&chain, &grids, &ControlConstraint::constant(0.0, 1.0, 2), 2).unwrap();
        let q = policy_matrix(&dk, 1, &[1.0, 0.0]).unwrap();
        assert_eq!(q.to_dense(), vec![vec![0.6, 0.4], vec![0.3, 0.7]]);
        // off-node chain controls blend
        let q = policy_matrix(&dk, 1, &[0.5, 0.5]).unwrap().to_dense();
        assert!((q[0][0] - 0.4).abs() < 1e-15 && (q[1][1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn infeasible_controls_are_rejected() {
        let k = gaussian(|x, u| x + u, 1.0);
        let grids = StateGrid::uniform(2, -5.0, 5.0, 11).unwrap();
        let dk = discretize(&k, &grids, &ControlConstraint::constant(-1.0, 1.0, 3), 8).unwrap();
        assert!(matches!(
            expectation(&dk, 1, 5, 1.5, &[0.0; 11]),
            Err(Error::InfeasibleControl { .. })
        ));
        assert!(policy_matrix(&dk, 1, &[2.0; 11]).is_err());
    }

    #[test]
    fn expectation_of_one_and_identity() {
        let (a, b) = (0.9, 0.6);
        let k = gaussian(move |x, u| a * x + b * u, 1.0);
        let grids = StateGrid::uniform(2, -15.0, 15.0, 121).unwrap();
        let dk = discretize(&k, &grids, &ControlConstraint::constant(-2.0, 2.0, 9), 16).unwrap();
        let ones = vec![1.0; 121];
        let id = grids.at(2).to_vec();
        for i in [40, 60, 75] {
            for u in [-2.0, -0.3, 0.5, 1.75] {
                assert!((expectation(&dk, 1, i, u, &ones).unwrap() - 1.0).abs() < 1e-10);
                let x = grids.at(1)[i];
                let e = expectation(&dk, 1, i, u, &id).unwrap();
                assert!((e - (a * x + b * u)).abs() < 1e-8, "{e}");
            }
        }
    }

    #[test]
    fn clamp_diagnostic_reports_edge_mass() {
        let k = gaussian(|x, _| x, 1.0);
        let grids = StateGrid::uniform(2, -3.0, 3.0, 31).unwrap();
        let dk = discretize(&k, &grids, &ControlConstraint::constant(0.0, 1.0, 3), 16).unwrap();
        assert!(dk.clamped_mass(1, 0, 1) > 0.4);
        let wide = StateGrid::uniform(2, -30.0, 30.0, 301).unwrap();
        let dk = discretize(&k, &wide, &ControlConstraint::constant(0.0, 1.0, 3), 16).unwrap();
        assert!(dk.clamp_diagnostic()[0] < 0.01);
    }

    proptest::proptest! {
        #[test]
        fn interior_rows_are_stochastic_with_exact_moments(
            mean in -2.0f64..2.0,
            sigma in 0.25f64..3.0,
            order in 4usize..24,
        ) {
            // wide enough that no abscissa of the highest order leaves the grid
            let next: Vec<f64> = (0..=320).map(|k| -40.0 + 0.25 * k as f64).collect();
            let rule = NoiseDensity::Gaussian.quadrature(order).unwrap();
            let (plain, clamped) = additive_row(&rule, mean, sigma, &next, false);
            let (row, _) = additive_row(&rule, mean, sigma, &next, true);
            proptest::prop_assert_eq!(clamped, 0.0);
            for r in [&plain, &row] {
                proptest::prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
                proptest::prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
                let m: f64 = r.weights.iter().zip(&next[r.start..]).map(|(w, x)| w * x).sum();
                proptest::prop_assert!((m - mean).abs() < 1e-12);
            }
            // interpolation only ever adds spread; the correction removes exactly that
            proptest::prop_assert!(row_variance(&plain, &next, mean) >= sigma * sigma - 1e-12);
            let v = row_variance(&row, &next, mean);
            proptest::prop_assert!((v - sigma * sigma).abs() < 1e-12 * (1.0 + sigma * sigma), "{} vs {}", v, sigma * sigma);
        }
    }
}
