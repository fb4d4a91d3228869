//! The shipped model families: a time-inconsistent LQ regulator (and a
//! nonlinear-functional variant), mean-variance portfolio selection with
//! its closed-form equilibrium, exponential utility with hyperbolic
//! discounting, and a two-point mean-variance chain for exact arithmetic.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    linspace, AdditiveNoise, ChainKernel, ControlConstraint, CostSpec, Horizon, KernelSpec, Model, StateGrid,
};
use crate::noise::NoiseDensity;
use crate::search::brent;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
const GRID_PAD: f64 = 0.005;

/// Grid windows shared by the additive-noise families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Bounds of the epoch-1 grid.
    pub lower: f64,
    pub upper: f64,
    /// Node count per epoch.
    pub nodes: usize,
    /// Later grids widen to cover every landing point of the quadrature;
    /// otherwise every epoch reuses `[lower, upper]`.
    pub expanding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
}

/// Per-epoch grids. Expanding grids put `X_{t+1}` over the hull of
/// `μ ± σ·z_max` across all `(x, u)` node pairs of epoch `t`, padded by
/// 0.5%, so no quadrature mass is clamped.
pub fn build_grids(kernel: &AdditiveNoise, constraints: &ControlConstraint, epochs: usize, spec: &GridSpec) -> Result<StateGrid> {
    if !(spec.lower < spec.upper) || spec.nodes < 2 {
        return Err(Error::Grid {
            t: 1,
            reason: format!("invalid window [{}, {}] with {} nodes", spec.lower, spec.upper, spec.nodes),
        });
    }
    let mut grids = vec![linspace(spec.lower, spec.upper, spec.nodes)];
    if !spec.expanding {
        return StateGrid::new(vec![grids[0].clone(); epochs]);
    }
    let z = kernel.noise.quadrature(kernel.quad_order)?.z_max();
    for t in 1..epochs {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in &grids[t - 1] {
            for u in constraints.nodes(t, x) {
                let (m, s) = (kernel.mean(t, x, u), kernel.scale(t, x, u).abs());
                lo = lo.min(m - s * z);
                hi = hi.max(m + s * z);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Grid {
                t: t + 1,
                reason: "non-finite reachable range".into(),
            });
        }
        let pad = GRID_PAD * (hi - lo).max(1e-12);
        grids.push(linspace(lo - pad, hi + pad, spec.nodes));
    }
    StateGrid::new(grids)
}

/// What the LQ terminal cost pulls the state towards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LqAnchor {
    /// `F = (x_T − y)²`: each self wants to return to its own state.
    State,
    /// `F = (x_T − c)²`: a fixed target, time-consistent.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub horizon: usize,
    pub grid: GridSpec,
    pub control: ControlSpec,
    pub noise: NoiseDensity,
    pub quad_order: usize,
    pub anchor: LqAnchor,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 1.0,
            sigma: 1.0,
            horizon: 3,
            grid: GridSpec {
                lower: -5.0,
                upper: 5.0,
                nodes: 121,
                expanding: true,
            },
            control: ControlSpec {
                lower: -5.0,
                upper: 5.0,
                nodes: 101,
            },
            noise: NoiseDensity::Gaussian,
            quad_order: 16,
            anchor: LqAnchor::State,
        }
    }
}

impl LqParams {
    /// Same dynamics with a fixed terminal target: the Bellman principle holds.
    pub fn time_consistent() -> Self {
        Self {
            anchor: LqAnchor::Fixed(0.0),
            ..Self::default()
        }
    }
}

fn lq_parts(p: &LqParams) -> Result<(Horizon, StateGrid, ControlConstraint, KernelSpec)> {
    if !(p.sigma > 0.0) {
        return Err(Error::Config(format!("LQ noise scale must be positive (got {})", p.sigma)));
    }
    let horizon = Horizon::new(p.horizon)?;
    let (a, b, sigma) = (p.a, p.b, p.sigma);
    let kernel = AdditiveNoise::new(
        Arc::new(move |_, x, u| a * x + b * u),
        Arc::new(move |_, _, _| sigma),
        p.noise,
        DEFAULT_SIGMA_FLOOR.min(sigma),
        p.quad_order,
    );
    let constraints = ControlConstraint::constant(p.control.lower, p.control.upper, p.control.nodes);
    let grids = build_grids(&kernel, &constraints, p.horizon, &p.grid)?;
    Ok((horizon, grids, constraints, KernelSpec::AdditiveNoise(kernel)))
}

/// `x' = a x + b u + σW`, `C_k = u²`, `F(s, y, x_T) = (x_T − y)²`, `G = H = 0`.
pub fn lq_model(p: &LqParams) -> Result<Model> {
    let (horizon, grids, constraints, kernel) = lq_parts(p)?;
    let costs = CostSpec::default().with_running(|_, _, _, _, u| u * u);
    let costs = match p.anchor {
        LqAnchor::State => costs.with_terminal(|_, y, x| (x - y) * (x - y)),
        LqAnchor::Fixed(c) => costs.with_terminal(move |_, _, x| (x - c) * (x - c)),
    };
    let name = match p.anchor {
        LqAnchor::State => "lq",
        LqAnchor::Fixed(_) => "lq_time_consistent",
    };
    Model::new(name, horizon, grids, constraints, kernel, costs)
}

/// LQ dynamics with `C_k = u²`, `F = 0`, `H = max(x_T, 0)`, `G(h) = h²`.
pub fn nonlinear_lq_variant(p: &LqParams) -> Result<Model> {
    let (horizon, grids, constraints, kernel) = lq_parts(p)?;
    let costs = CostSpec::default()
        .with_running(|_, _, _, _, u| u * u)
        .with_functional(|x| x.max(0.0))
        .with_nonlinear(|_, _, h| h * h, true);
    Model::new("nonlinear_lq", horizon, grids, constraints, kernel, costs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVarianceParams {
    /// Gross risk-free return `R ≥ 1`.
    pub r: f64,
    /// Mean of the excess return `Z`.
    pub mu: f64,
    /// Standard deviation of `Z`.
    pub sigma: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub grid: GridSpec,
    pub control: ControlSpec,
    pub quad_order: usize,
}

impl Default for MeanVarianceParams {
    fn default() -> Self {
        Self {
            r: 1.02,
            mu: 0.05,
            sigma: 0.1,
            gamma: 1.0,
            horizon: 5,
            grid: GridSpec {
                lower: 0.5,
                upper: 1.5,
                nodes: 201,
                expanding: true,
            },
            control: ControlSpec {
                lower: 0.1,
                upper: 5.0,
                nodes: 401,
            },
            quad_order: 16,
        }
    }
}

impl MeanVarianceParams {
    fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("return variance must be positive (got σ = {})", self.sigma)));
        }
        if !(self.r >= 1.0) {
            return Err(Error::Config(format!("gross return must be ≥ 1 (got {})", self.r)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("risk aversion must be positive (got {})", self.gamma)));
        }
        Horizon::new(self.horizon).map(|_| ())
    }
}

fn wealth_kernel(r: f64, mu: f64, sigma: f64, quad_order: usize) -> AdditiveNoise {
    AdditiveNoise::new(
        Arc::new(move |_, x, u| r * x + mu * u),
        Arc::new(move |_, _, u| sigma * u.abs()),
        NoiseDensity::Gaussian,
        DEFAULT_SIGMA_FLOOR,
        quad_order,
    )
}

/// Wealth `x' = R x + u Z` with `Z ~ N(μ, σ²)`; `F = x_T² − γx_T`,
/// `H = x_T`, `G(h) = −h²`, so `J = Var[x_T] − γE[x_T]`.
pub fn mv_model(p: &MeanVarianceParams) -> Result<Model> {
    p.check()?;
    let kernel = wealth_kernel(p.r, p.mu, p.sigma, p.quad_order);
    let constraints = ControlConstraint::constant(p.control.lower, p.control.upper, p.control.nodes);
    let grids = build_grids(&kernel, &constraints, p.horizon, &p.grid)?;
    let gamma = p.gamma;
    let costs = CostSpec::default()
        .with_terminal(move |_, _, x| x * x - gamma * x)
        .with_functional(|x| x)
        .with_nonlinear(|_, _, h| -h * h, false)
        .nonneg(false);
    Model::new(
        "mean_variance",
        Horizon::new(p.horizon)?,
        grids,
        constraints,
        KernelSpec::AdditiveNoise(kernel),
        costs,
    )
}

/// One decision epoch of the mean-variance closed form. `L(u)` at epoch
/// `t` is `u2·u² + (xu·x + u1)·u + (terms free of u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MvStage {
    pub t: usize,
    pub control: f64,
    /// `h⁰_{t+1} = Σ_{k>t} R^{T−1−k} μ u*_k`.
    pub h0_next: f64,
    /// `a¹_{t+1}`, `a⁰_{t+1}`: `E[x_T² | x_{t+1}] = R^{2(T−t−1)} x² + a¹ x + a⁰`.
    pub a1_next: f64,
    pub a0_next: f64,
    pub u2: f64,
    pub xu: f64,
    pub u1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MvClosedForm {
    pub stages: Vec<MvStage>,
}

impl MvClosedForm {
    pub fn control(&self, t: usize) -> f64 {
        self.stages[t - 1].control
    }

    pub fn stage(&self, t: usize) -> &MvStage {
        &self.stages[t - 1]
    }
}

/// Backward recursion for the constant equilibrium investments.
///
/// With `A = R^{T−t−1}` the tail leaves `h(x) = A x + h⁰` and
/// `E[x_T²|x] = A² x² + a¹ x + a⁰`; integrating `f = x_T² − γ x_T` and
/// `G(h) = −h²` against `x' = R x + u Z` gives `u² · A²σ²` and, for the
/// linear term, `u · μ(a¹ − γA − 2A h⁰)` plus `x·u · (2A²Rμ − 2A²Rμ)`.
/// The stationary point is checked against a numerical minimization of
/// the assembled quadratic before it is returned.
pub fn mv_closed_form(p: &MeanVarianceParams) -> Result<MvClosedForm> {
    p.check()?;
    let (r, mu, var, gamma, t_end) = (p.r, p.mu, p.sigma * p.sigma, p.gamma, p.horizon);
    let pow = |e: usize| r.powi(e as i32);
    let mut controls = vec![0.0; t_end];
    let mut stages = Vec::with_capacity(t_end - 1);
    for t in (1..t_end).rev() {
        let a = pow(t_end - t - 1);
        let tail = t + 1..t_end;
        let h0: f64 = tail.clone().map(|k| pow(t_end - 1 - k) * mu * controls[k]).sum();
        let a1 = 2.0 * a * h0;
        let mut a0 = 0.0;
        for k in tail.clone() {
            for l in tail.clone() {
                let c = pow(t_end - 1 - k) * pow(t_end - 1 - l);
                a0 += if k == l {
                    c * controls[k] * controls[k] * (mu * mu + var)
                } else {
                    c * mu * mu * controls[k] * controls[l]
                };
            }
        }
        let u2 = a * a * (mu * mu + var) - a * a * mu * mu;
        let xu = 2.0 * a * a * r * mu - 2.0 * a * (a * r * mu);
        let u1 = (a1 - gamma * a) * mu - 2.0 * a * mu * h0;
        let u_star = -u1 / (2.0 * u2);

        // the assembled objective at a reference state, straight from the expansion
        let x = 1.0;
        let objective = |u: f64| {
            let m = r * x + mu * u;
            let second = r * r * x * x + 2.0 * r * x * mu * u + (mu * mu + var) * u * u;
            let g = a * m + h0;
            a * a * second + (a1 - gamma * a) * m + a0 - gamma * h0 - g * g
        };
        let width = 10.0 * (1.0 + u_star.abs());
        let numeric = brent(objective, u_star - width, u_star + width, u_star + 0.37 * width, objective(u_star + 0.37 * width), 1e-10, 500);
        if (numeric.x - u_star).abs() > 1e-6 * (1.0 + u_star.abs()) {
            return Err(Error::Policy(format!(
                "closed-form control {u_star} disagrees with numerical minimum {} at t={t}",
                numeric.x
            )));
        }
        controls[t] = u_star;
        stages.push(MvStage {
            t,
            control: u_star,
            h0_next: h0,
            a1_next: a1,
            a0_next: a0,
            u2,
            xu,
            u1,
        });
    }
    stages.reverse();
    Ok(MvClosedForm { stages })
}

/// Two-point mean-variance chain on an integer lattice: `x' = x + u Z`
/// with `Z ∈ {z_lo, z_hi}` equally likely, so `μ = (z_lo + z_hi)/2` and
/// `σ = (z_hi − z_lo)/2`. Controls are the integers `0..=u_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvChainParams {
    pub z_lo: i64,
    pub z_hi: i64,
    pub u_max: i64,
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for MvChainParams {
    fn default() -> Self {
        Self {
            z_lo: -1,
            z_hi: 2,
            u_max: 2,
            gamma: 9.0,
            horizon: 4,
        }
    }
}

pub fn mv_two_point_chain(p: &MvChainParams) -> Result<Model> {
    let horizon = Horizon::new(p.horizon)?;
    if p.z_lo >= p.z_hi || p.u_max < 1 {
        return Err(Error::Config("two-point chain needs z_lo < z_hi and u_max ≥ 1".into()));
    }
    let step_lo = (p.z_lo * p.u_max).min(0);
    let step_hi = (p.z_hi * p.u_max).max(0);
    let mut lattice: Vec<(i64, i64)> = vec![(0, 1)];
    for _ in 1..p.horizon {
        let (lo, hi) = lattice[lattice.len() - 1];
        lattice.push((lo + step_lo, hi + step_hi));
    }
    let grids = StateGrid::new(
        lattice
            .iter()
            .map(|&(lo, hi)| (lo..=hi).map(|v| v as f64).collect())
            .collect(),
    )?;
    let mut matrices = Vec::with_capacity(p.horizon - 1);
    for t in 0..p.horizon - 1 {
        let (lo, _) = lattice[t];
        let (next_lo, next_hi) = lattice[t + 1];
        let width = (next_hi - next_lo + 1) as usize;
        let by_state = (lo..=lattice[t].1)
            .map(|x| {
                (0..=p.u_max)
                    .map(|u| {
                        let mut row = vec![0.0; width];
                        row[(x + u * p.z_lo - next_lo) as usize] += 0.5;
                        row[(x + u * p.z_hi - next_lo) as usize] += 0.5;
                        row
                    })
                    .collect()
            })
            .collect();
        matrices.push(by_state);
    }
    let gamma = p.gamma;
    let costs = CostSpec::default()
        .with_terminal(move |_, _, x| x * x - gamma * x)
        .with_functional(|x| x)
        .with_nonlinear(|_, _, h| -h * h, false)
        .nonneg(false);
    Model::new(
        "mean_variance_chain",
        horizon,
        grids,
        ControlConstraint::constant(0.0, p.u_max as f64, (p.u_max + 1) as usize),
        KernelSpec::DiscreteChain(ChainKernel::new(matrices)?),
        costs,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpUtilityParams {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    /// Hyperbolic discounting `φ(τ) = 1/(1 + βτ)`; `β = 0` is undiscounted.
    pub beta: f64,
    pub horizon: usize,
    pub grid: GridSpec,
    pub control: ControlSpec,
    pub quad_order: usize,
}

impl Default for ExpUtilityParams {
    fn default() -> Self {
        Self {
            r: 1.02,
            mu: 0.05,
            sigma: 0.1,
            gamma: 2.0,
            beta: 0.5,
            horizon: 4,
            grid: GridSpec {
                lower: 0.5,
                upper: 1.5,
                nodes: 101,
                expanding: true,
            },
            control: ControlSpec {
                lower: 0.2,
                upper: 3.0,
                nodes: 61,
            },
            quad_order: 16,
        }
    }
}

impl ExpUtilityParams {
    pub fn discount(&self, tau: usize) -> f64 {
        1.0 / (1.0 + self.beta * tau as f64)
    }
}

/// Wealth dynamics as in mean-variance with `0 < u̲ ≤ u ≤ ū`;
/// `F(s, y, x_T) = φ(T − s) e^{−γ x_T} / γ`, other costs zero.
pub fn exp_utility_model(p: &ExpUtilityParams) -> Result<Model> {
    if !(p.gamma > 0.0) || !(p.beta >= 0.0) || !(p.sigma > 0.0) {
        return Err(Error::Config("exp-utility needs γ > 0, β ≥ 0, σ > 0".into()));
    }
    if !(p.control.lower > 0.0 && p.control.lower <= p.control.upper) {
        return Err(Error::Config(format!(
            "exp-utility controls must satisfy 0 < lower ≤ upper (got [{}, {}])",
            p.control.lower, p.control.upper
        )));
    }
    let kernel = wealth_kernel(p.r, p.mu, p.sigma, p.quad_order);
    let constraints = ControlConstraint::constant(p.control.lower, p.control.upper, p.control.nodes);
    let grids = build_grids(&kernel, &constraints, p.horizon, &p.grid)?;
    let (gamma, beta, t_end) = (p.gamma, p.beta, p.horizon);
    let costs = CostSpec::default().with_terminal(move |s, _, x| {
        let phi = 1.0 / (1.0 + beta * (t_end - s) as f64);
        phi * (-gamma * x).exp() / gamma
    });
    Model::new(
        "exp_utility",
        Horizon::new(p.horizon)?,
        grids,
        constraints,
        KernelSpec::AdditiveNoise(kernel),
        costs,
    )
}

/// `x' = x + u + W` with running cost `C = slope · u` on `[0, 5]` and no
/// other costs: `L` is monotone in `u`, so its sublevel sets run into the
/// edge of any probe window on one side.
pub fn monotone_cost_model(slope: f64) -> Result<Model> {
    let kernel = AdditiveNoise::new(
        Arc::new(|_, x, u| x + u),
        Arc::new(|_, _, _| 1.0),
        NoiseDensity::Gaussian,
        DEFAULT_SIGMA_FLOOR,
        16,
    );
    let constraints = ControlConstraint::constant(0.0, 5.0, 51);
    let grids = build_grids(
        &kernel,
        &constraints,
        2,
        &GridSpec {
            lower: -3.0,
            upper: 3.0,
            nodes: 61,
            expanding: true,
        },
    )?;
    Model::new(
        "monotone_cost",
        Horizon::new(2)?,
        grids,
        constraints,
        KernelSpec::AdditiveNoise(kernel),
        CostSpec::default().with_running(move |_, _, _, _, u| slope * u).nonneg(slope >= 0.0),
    )
}

/// `G` choices for table-driven models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKind {
    #[default]
    Zero,
    /// `G(h) = h²`.
    Square,
    /// `G(h) = −h²`.
    NegSquare,
}

/// Costs given as tables on the grids: `C_t(x_i, u_j)` (bilinear between
/// nodes), `F₀` and `H` on `X_T` (linear between nodes), plus an anchor
/// term `κ (x_T − y)²` that makes `F` depend on the evaluating self.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostTables {
    /// `running[t − 1][i][j]`; empty means zero.
    pub running: Vec<Vec<Vec<f64>>>,
    /// `F₀` on `X_T`; empty means zero.
    pub terminal: Vec<f64>,
    pub anchor_weight: f64,
    /// `H` on `X_T`; empty means zero.
    pub functional: Vec<f64>,
    pub g: GKind,
}

fn bilinear(xs: &[f64], us: &[f64], table: &[Vec<f64>], x: f64, u: f64) -> f64 {
    let (i, lx) = crate::model::locate(xs, x);
    let (j, lu) = crate::model::locate(us, u);
    let at = |a: usize, b: usize| table[a][b];
    let row = |a: usize| if lu == 0.0 { at(a, j) } else { (1.0 - lu) * at(a, j) + lu * at(a, j + 1) };
    if lx == 0.0 {
        row(i)
    } else {
        (1.0 - lx) * row(i) + lx * row(i + 1)
    }
}

impl CostTables {
    pub fn to_cost_spec(&self, grids: &StateGrid, control: &ControlSpec) -> Result<CostSpec> {
        let t_end = grids.epochs();
        let n_end = grids.at(t_end).len();
        let dims = |name: &str, v: &[f64]| -> Result<()> {
            if !v.is_empty() && v.len() != n_end {
                return Err(Error::Config(format!("costs.{name} needs {n_end} entries (one per terminal node)")));
            }
            Ok(())
        };
        dims("terminal", &self.terminal)?;
        dims("functional", &self.functional)?;
        if !self.running.is_empty() {
            let ok = self.running.len() == t_end - 1
                && self.running.iter().enumerate().all(|(k, by_state)| {
                    by_state.len() == grids.at(k + 1).len() && by_state.iter().all(|r| r.len() == control.nodes)
                });
            if !ok {
                return Err(Error::Config("costs.running must be [epoch][state node][control node]".into()));
            }
        }
        let all = grids.all().to_vec();
        let terminal_grid = all[t_end - 1].clone();
        let us = linspace(control.lower, control.upper, control.nodes);
        let mut spec = CostSpec::default();
        if !self.running.is_empty() {
            let table = self.running.clone();
            let (all, us) = (all.clone(), us.clone());
            spec = spec.with_running(move |_, _, t, x, u| bilinear(&all[t - 1], &us, &table[t - 1], x, u));
        }
        let f0 = self.terminal.clone();
        let kappa = self.anchor_weight;
        if !f0.is_empty() || kappa != 0.0 {
            let grid = terminal_grid.clone();
            spec = spec.with_terminal(move |_, y, x| {
                let base = if f0.is_empty() { 0.0 } else { crate::model::interpolate(&grid, &f0, x) };
                base + kappa * (x - y) * (x - y)
            });
        }
        if !self.functional.is_empty() {
            let (grid, h) = (terminal_grid, self.functional.clone());
            spec = spec.with_functional(move |x| crate::model::interpolate(&grid, &h, x));
        }
        spec = match self.g {
            GKind::Zero => spec,
            GKind::Square => spec.with_nonlinear(|_, _, h| h * h, self.functional.iter().all(|&v| v >= 0.0)),
            GKind::NegSquare => spec.with_nonlinear(|_, _, h| -h * h, false),
        };
        let negative = self.running.iter().flatten().flatten().chain(&self.terminal).chain(&self.functional).any(|&v| v < 0.0)
            || kappa < 0.0
            || self.g == GKind::NegSquare;
        Ok(spec.nonneg(!negative))
    }
}

/// Finite chain with explicit matrices `P[t][i][j][m]` and table costs.
pub fn discrete_chain_model(
    states: Vec<Vec<f64>>,
    control: ControlSpec,
    matrices: Vec<Vec<Vec<Vec<f64>>>>,
    costs: &CostTables,
) -> Result<Model> {
    let horizon = Horizon::new(states.len())?;
    let grids = StateGrid::new(states)?;
    let kernel = ChainKernel::new(matrices)?;
    let spec = costs.to_cost_spec(&grids, &control)?;
    Model::new(
        "discrete_chain",
        horizon,
        grids,
        ControlConstraint::constant(control.lower, control.upper, control.nodes),
        KernelSpec::DiscreteChain(kernel),
        spec,
    )
}

/// Additive-noise kernel with tabulated drift and scale, `drift[t − 1][i][j]`
/// at `(x_i, u_j)` and bilinear in between, plus table costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedKernel {
    pub drift: Vec<Vec<Vec<f64>>>,
    pub scale: Vec<Vec<Vec<f64>>>,
    pub noise: NoiseDensity,
    pub sigma_floor: f64,
    pub quad_order: usize,
}

pub fn tabulated_model(states: Vec<Vec<f64>>, control: ControlSpec, kernel: &TabulatedKernel, costs: &CostTables) -> Result<Model> {
    let horizon = Horizon::new(states.len())?;
    let grids = StateGrid::new(states)?;
    for (name, table) in [("drift", &kernel.drift), ("scale", &kernel.scale)] {
        let ok = table.len() == grids.epochs() - 1
            && table.iter().enumerate().all(|(k, by_state)| {
                by_state.len() == grids.at(k + 1).len() && by_state.iter().all(|r| r.len() == control.nodes)
            });
        if !ok {
            return Err(Error::Config(format!("kernel.{name} must be [epoch][state node][control node]")));
        }
    }
    let all = grids.all().to_vec();
    let us = linspace(control.lower, control.upper, control.nodes);
    let (drift, scale) = (kernel.drift.clone(), kernel.scale.clone());
    let (all2, us2) = (all.clone(), us.clone());
    let spec = AdditiveNoise::new(
        Arc::new(move |t, x, u| bilinear(&all[t - 1], &us, &drift[t - 1], x, u)),
        Arc::new(move |t, x, u| bilinear(&all2[t - 1], &us2, &scale[t - 1], x, u)),
        kernel.noise,
        kernel.sigma_floor,
        kernel.quad_order,
    );
    let costs = costs.to_cost_spec(&grids, &control)?;
    Model::new(
        "tabulated",
        horizon,
        grids,
        ControlConstraint::constant(control.lower, control.upper, control.nodes),
        KernelSpec::AdditiveNoise(spec),
        costs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_last_epoch() {
        // R = 1, μ = 1, σ² = 1, γ = 2 ⇒ u*_{T−1} = γμ/(2σ²) = 1
        let p = MeanVarianceParams {
            r: 1.0,
            mu: 1.0,
            sigma: 1.0,
            gamma: 2.0,
            horizon: 4,
            ..MeanVarianceParams::default()
        };
        let cf = mv_closed_form(&p).unwrap();
        assert!((cf.control(3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_coefficients() {
        let p = MeanVarianceParams::default();
        let cf = mv_closed_form(&p).unwrap();
        let t_end = p.horizon;
        for s in &cf.stages {
            let lead = p.r.powi(2 * (t_end - s.t - 1) as i32) * p.sigma * p.sigma;
            assert!((s.u2 - lead).abs() < 1e-12);
            assert!(s.xu.abs() < 1e-12);
            let expected = p.gamma * p.mu / (2.0 * p.sigma * p.sigma * p.r.powi((t_end - s.t - 1) as i32));
            assert!((s.control - expected).abs() < 1e-12);
        }
        assert!(mv_closed_form(&MeanVarianceParams { sigma: 0.0, ..p }).is_err());
    }

    #[test]
    fn mv_model_flags() {
        let m = mv_model(&MeanVarianceParams {
            horizon: 4,
            grid: GridSpec { nodes: 21, ..MeanVarianceParams::default().grid },
            control: ControlSpec { nodes: 11, ..MeanVarianceParams::default().control },
            ..MeanVarianceParams::default()
        })
        .unwrap();
        assert!(!m.costs.g_nondecreasing);
        assert_eq!(m.costs.nonlinear(1, 0.0, 2.0), -4.0);
        assert!(!m.costs.assume_nonneg);
    }

    #[test]
    fn expanding_grids_never_clamp() {
        let m = lq_model(&LqParams::default()).unwrap();
        let dk = m.discretize().unwrap();
        for t in 1..m.epochs() {
            for i in 0..m.grids.at(t).len() {
                for j in 0..m.constraints.resolution() {
                    assert_eq!(dk.clamped_mass(t, i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn chain_lattice_rows_hit_nodes() {
        let m = mv_two_point_chain(&MvChainParams::default()).unwrap();
        assert_eq!(m.grids.at(1), &[0.0, 1.0]);
        assert_eq!(m.grids.at(2).len(), 8);
        let dk = m.discretize().unwrap();
        // from x = 1 with u = 2: lands on −1 and 5
        let row = crate::kernel::RowView::to_dense(&dk.row(1, 1, 2), 8);
        assert_eq!(row[1], 0.5);
        assert_eq!(row[7], 0.5);
    }

    #[test]
    fn exp_utility_needs_positive_lower_bound() {
        let mut p = ExpUtilityParams::default();
        p.control.lower = 0.0;
        assert!(exp_utility_model(&p).is_err());
    }
}
