//! Problem data: horizon, grids, control constraints, transition kernel and
//! the four cost components `C_t(s,y,x,u)`, `F(s,y,x_T)`, `H(x_T)`, `G(s,y,h)`.
//!
//! Epochs are 1-based throughout the public API: states live at `1..=T`,
//! controls at `1..=T-1`.

use std::fmt;
use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::NoiseDensity;

pub type Bounds = Arc<dyn Fn(usize, f64) -> (f64, f64) + Send + Sync>;
pub type StateControlFn = Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync>;
pub type RunningCost = Arc<dyn Fn(usize, f64, usize, f64, f64) -> f64 + Send + Sync>;
pub type TerminalCost = Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync>;
pub type Functional = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Nonlinearity = Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync>;

/// Row-sum tolerance for explicit chains.
pub const CHAIN_ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(epochs: usize) -> Result<Self> {
        if epochs < 2 {
            return Err(Error::Horizon(epochs));
        }
        Ok(Self(epochs))
    }

    /// `T`, the number of state epochs.
    pub fn epochs(&self) -> usize {
        self.0
    }

    /// Epochs at which a control is chosen: `1..=T-1`.
    pub fn decision_epochs(&self) -> RangeInclusive<usize> {
        1..=self.0 - 1
    }
}

/// Strictly increasing state nodes for every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    nodes: Vec<Vec<f64>>,
}

impl StateGrid {
    pub fn new(nodes: Vec<Vec<f64>>) -> Result<Self> {
        for (k, grid) in nodes.iter().enumerate() {
            let t = k + 1;
            if grid.len() < 2 {
                return Err(Error::Grid {
                    t,
                    reason: format!("need ≥ 2 nodes, got {}", grid.len()),
                });
            }
            if grid.iter().any(|x| !x.is_finite()) {
                return Err(Error::Grid {
                    t,
                    reason: "non-finite node".into(),
                });
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Grid {
                    t,
                    reason: "nodes must be strictly increasing".into(),
                });
            }
        }
        Ok(Self { nodes })
    }

    /// The same uniform grid at every epoch.
    pub fn uniform(epochs: usize, lower: f64, upper: f64, count: usize) -> Result<Self> {
        Self::new(vec![linspace(lower, upper, count); epochs])
    }

    pub fn at(&self, t: usize) -> &[f64] {
        &self.nodes[t - 1]
    }

    pub fn epochs(&self) -> usize {
        self.nodes.len()
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.nodes
    }
}

pub fn linspace(lower: f64, upper: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lower],
        _ => {
            let step = (upper - lower) / (count - 1) as f64;
            (0..count)
                .map(|k| if k == count - 1 { upper } else { lower + step * k as f64 })
                .collect()
        }
    }
}

/// Bracketing cell of `x` in a sorted grid: `(k, λ)` with
/// `x = (1-λ)·grid[k] + λ·grid[k+1]`. Values outside are clamped (`λ ∈ {0,1}`).
pub fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let k = grid.partition_point(|&g| g <= x) - 1;
    let k = k.min(n - 2);
    (k, (x - grid[k]) / (grid[k + 1] - grid[k]))
}

/// Linear interpolation on a sorted grid with flat extrapolation.
pub fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let (k, lambda) = locate(grid, x);
    if lambda == 0.0 {
        values[k]
    } else if lambda == 1.0 {
        values[k + 1]
    } else {
        (1.0 - lambda) * values[k] + lambda * values[k + 1]
    }
}

/// Feasible control intervals `[lo(x), hi(x)]` per decision epoch, discretized
/// to `resolution` equally spaced nodes.
#[derive(Clone)]
pub struct ControlConstraint {
    bounds: Bounds,
    resolution: usize,
}

impl fmt::Debug for ControlConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlConstraint")
            .field("resolution", &self.resolution)
            .finish_non_exhaustive()
    }
}

impl ControlConstraint {
    pub fn new(bounds: Bounds, resolution: usize) -> Self {
        Self { bounds, resolution }
    }

    pub fn constant(lower: f64, upper: f64, resolution: usize) -> Self {
        Self::new(Arc::new(move |_, _| (lower, upper)), resolution)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn with_resolution(&self, resolution: usize) -> Self {
        Self {
            bounds: Arc::clone(&self.bounds),
            resolution,
        }
    }

    pub fn interval(&self, t: usize, x: f64) -> (f64, f64) {
        (self.bounds)(t, x)
    }

    pub fn nodes(&self, t: usize, x: f64) -> Vec<f64> {
        let (lo, hi) = self.interval(t, x);
        linspace(lo, hi, self.resolution)
    }

    /// Spacing of the control grid at `(t, x)`.
    pub fn step(&self, t: usize, x: f64) -> f64 {
        let (lo, hi) = self.interval(t, x);
        (hi - lo) / (self.resolution - 1) as f64
    }

    pub fn contains(&self, t: usize, x: f64, u: f64) -> bool {
        let (lo, hi) = self.interval(t, x);
        let slack = feasibility_slack(lo, hi);
        u >= lo - slack && u <= hi + slack
    }
}

pub(crate) fn feasibility_slack(lo: f64, hi: f64) -> f64 {
    1e-12 * (1.0 + lo.abs() + hi.abs())
}

/// `x_{t+1} = μ(t, x, u) + σ(t, x, u)·W` with `W` a standardized noise.
#[derive(Clone)]
pub struct AdditiveNoise {
    drift: StateControlFn,
    scale: StateControlFn,
    pub noise: NoiseDensity,
    pub sigma_floor: f64,
    pub quad_order: usize,
}

impl fmt::Debug for AdditiveNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdditiveNoise")
            .field("noise", &self.noise)
            .field("sigma_floor", &self.sigma_floor)
            .field("quad_order", &self.quad_order)
            .finish_non_exhaustive()
    }
}

impl AdditiveNoise {
    pub fn new(
        drift: StateControlFn,
        scale: StateControlFn,
        noise: NoiseDensity,
        sigma_floor: f64,
        quad_order: usize,
    ) -> Self {
        Self {
            drift,
            scale,
            noise,
            sigma_floor,
            quad_order,
        }
    }

    pub fn mean(&self, t: usize, x: f64, u: f64) -> f64 {
        (self.drift)(t, x, u)
    }

    pub fn scale(&self, t: usize, x: f64, u: f64) -> f64 {
        (self.scale)(t, x, u)
    }

    pub fn with_quad_order(&self, quad_order: usize) -> Self {
        Self {
            quad_order,
            ..self.clone()
        }
    }

    pub fn check_floor(&self, t: usize, x: f64, u: f64) -> Result<f64> {
        let sigma = self.scale(t, x, u);
        if !(sigma >= self.sigma_floor) {
            return Err(Error::SigmaFloor {
                t,
                x,
                u,
                sigma,
                floor: self.sigma_floor,
            });
        }
        Ok(sigma)
    }
}

/// Explicit transition probabilities `P[t][i][j][m]` from state node `i` under
/// control node `j` to next-epoch node `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainKernel {
    matrices: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ChainKernel {
    pub fn new(matrices: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        for (k, by_state) in matrices.iter().enumerate() {
            for (i, by_control) in by_state.iter().enumerate() {
                for (j, row) in by_control.iter().enumerate() {
                    check_stochastic_row(k + 1, i, j, row)?;
                }
            }
        }
        Ok(Self { matrices })
    }

    pub fn row(&self, t: usize, i: usize, j: usize) -> &[f64] {
        &self.matrices[t - 1][i][j]
    }

    pub fn matrices(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.matrices
    }
}

pub(crate) fn check_stochastic_row(t: usize, node: usize, control: usize, row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > CHAIN_ROW_TOL {
        return Err(Error::NonStochasticRow {
            t,
            node,
            control,
            sum,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum KernelSpec {
    AdditiveNoise(AdditiveNoise),
    DiscreteChain(ChainKernel),
}

impl KernelSpec {
    pub fn as_additive(&self) -> Option<&AdditiveNoise> {
        match self {
            Self::AdditiveNoise(k) => Some(k),
            Self::DiscreteChain(_) => None,
        }
    }

    pub fn is_chain(&self) -> bool {
        matches!(self, Self::DiscreteChain(_))
    }
}

/// The four cost components of the objective plus the flags the assumption
/// checks and baselines rely on.
#[derive(Clone)]
pub struct CostSpec {
    running: RunningCost,
    terminal: TerminalCost,
    functional: Functional,
    nonlinear: Nonlinearity,
    /// All four components are expected to be nonnegative.
    pub assume_nonneg: bool,
    /// `G(s, y, ·)` is nondecreasing on the range of `h`.
    pub g_nondecreasing: bool,
    /// `G ≡ 0`; the objective is then linear in the law of the path.
    pub g_vanishes: bool,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("assume_nonneg", &self.assume_nonneg)
            .field("g_nondecreasing", &self.g_nondecreasing)
            .field("g_vanishes", &self.g_vanishes)
            .finish_non_exhaustive()
    }
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            running: Arc::new(|_, _, _, _, _| 0.0),
            terminal: Arc::new(|_, _, _| 0.0),
            functional: Arc::new(|_| 0.0),
            nonlinear: Arc::new(|_, _, _| 0.0),
            assume_nonneg: true,
            g_nondecreasing: true,
            g_vanishes: true,
        }
    }
}

impl CostSpec {
    /// `C_t(s, y, x, u)`, called as `running(s, y, t, x, u)`.
    pub fn with_running(
        mut self,
        f: impl Fn(usize, f64, usize, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running = Arc::new(f);
        self
    }

    pub fn with_terminal(mut self, f: impl Fn(usize, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_functional(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.functional = Arc::new(f);
        self
    }

    /// Sets `G`; `nondecreasing` records the monotonicity flag.
    pub fn with_nonlinear(
        mut self,
        f: impl Fn(usize, f64, f64) -> f64 + Send + Sync + 'static,
        nondecreasing: bool,
    ) -> Self {
        self.nonlinear = Arc::new(f);
        self.g_nondecreasing = nondecreasing;
        self.g_vanishes = false;
        self
    }

    pub fn nonneg(mut self, flag: bool) -> Self {
        self.assume_nonneg = flag;
        self
    }

    #[inline]
    pub fn running(&self, s: usize, y: f64, t: usize, x: f64, u: f64) -> f64 {
        (self.running)(s, y, t, x, u)
    }

    #[inline]
    pub fn terminal(&self, s: usize, y: f64, x_terminal: f64) -> f64 {
        (self.terminal)(s, y, x_terminal)
    }

    #[inline]
    pub fn functional(&self, x_terminal: f64) -> f64 {
        (self.functional)(x_terminal)
    }

    #[inline]
    pub fn nonlinear(&self, s: usize, y: f64, h: f64) -> f64 {
        if self.g_vanishes {
            0.0
        } else {
            (self.nonlinear)(s, y, h)
        }
    }
}

/// A validated problem instance. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub horizon: Horizon,
    pub grids: StateGrid,
    pub constraints: ControlConstraint,
    pub kernel: KernelSpec,
    pub costs: CostSpec,
}

const VALIDATION_SAMPLES: usize = 512;

impl Model {
    pub fn new(
        name: impl Into<String>,
        horizon: Horizon,
        grids: StateGrid,
        constraints: ControlConstraint,
        kernel: KernelSpec,
        costs: CostSpec,
    ) -> Result<Self> {
        let model = Self {
            name: name.into(),
            horizon,
            grids,
            constraints,
            kernel,
            costs,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn epochs(&self) -> usize {
        self.horizon.epochs()
    }

    /// Copy with a different control-grid resolution (re-validated).
    pub fn with_control_resolution(&self, resolution: usize) -> Result<Self> {
        let mut m = self.clone();
        m.constraints = self.constraints.with_resolution(resolution);
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let epochs = self.epochs();
        if self.grids.epochs() != epochs {
            return Err(Error::Grid {
                t: self.grids.epochs(),
                reason: format!("expected {epochs} epoch grids"),
            });
        }
        if self.constraints.resolution() < 2 {
            return Err(Error::Config("control grid needs ≥ 2 nodes".into()));
        }
        for t in self.horizon.decision_epochs() {
            for &x in self.grids.at(t) {
                let (lo, hi) = self.constraints.interval(t, x);
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::EmptyControlInterval { t, x, lo, hi });
                }
            }
        }
        match &self.kernel {
            KernelSpec::AdditiveNoise(k) => {
                if !(k.sigma_floor > 0.0) {
                    return Err(Error::Kernel("sigma floor must be positive".into()));
                }
                k.noise.quadrature(k.quad_order)?;
                let mass = k.noise.total_mass();
                if (mass - 1.0).abs() > 1e-8 {
                    return Err(Error::Kernel(format!("noise density integrates to {mass}")));
                }
                for t in self.horizon.decision_epochs() {
                    for &x in self.grids.at(t) {
                        for u in self.constraints.nodes(t, x) {
                            k.check_floor(t, x, u)?;
                            if !k.mean(t, x, u).is_finite() {
                                return Err(Error::Kernel(format!("non-finite drift at t={t}, x={x}, u={u}")));
                            }
                        }
                    }
                }
            }
            KernelSpec::DiscreteChain(chain) => {
                let m = chain.matrices();
                if m.len() != epochs - 1 {
                    return Err(Error::Kernel(format!(
                        "chain has {} transition epochs, expected {}",
                        m.len(),
                        epochs - 1
                    )));
                }
                for t in self.horizon.decision_epochs() {
                    let by_state = &m[t - 1];
                    let (n, n_next) = (self.grids.at(t).len(), self.grids.at(t + 1).len());
                    let ok = by_state.len() == n
                        && by_state.iter().all(|by_control| {
                            by_control.len() == self.constraints.resolution()
                                && by_control.iter().all(|row| row.len() == n_next)
                        });
                    if !ok {
                        return Err(Error::Kernel(format!(
                            "chain dimensions at t={t} must be {n} x {} x {n_next}",
                            self.constraints.resolution()
                        )));
                    }
                }
            }
        }
        self.check_costs()
    }

    fn check_costs(&self) -> Result<()> {
        let mut fail = None;
        for sample in CostSampler::new(self, 0).take(VALIDATION_SAMPLES) {
            let values = sample.evaluate(&self.costs);
            for (what, v) in values.named() {
                if !v.is_finite() {
                    return Err(Error::Cost(format!("{what} non-finite at {sample:?}")));
                }
                if self.costs.assume_nonneg && v < 0.0 && fail.is_none() {
                    fail = Some(format!("{what} = {v} < 0 at {sample:?} with assume_nonneg set"));
                }
            }
        }
        match fail {
            Some(msg) => Err(Error::Cost(msg)),
            None => Ok(()),
        }
    }

    /// Range of `H` over the terminal grid.
    pub fn functional_range(&self) -> (f64, f64) {
        self.grids
            .at(self.epochs())
            .iter()
            .map(|&x| self.costs.functional(x))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

/// One random evaluation point for the cost components.
#[derive(Debug, Clone, Copy)]
struct CostSample {
    s: usize,
    y: f64,
    t: usize,
    x: f64,
    u: f64,
    x_terminal: f64,
    h: f64,
}

struct CostValues([f64; 4]);

impl CostValues {
    fn named(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        ["C", "F", "H", "G"].into_iter().zip(self.0)
    }
}

impl CostSample {
    fn evaluate(&self, costs: &CostSpec) -> CostValues {
        CostValues([
            costs.running(self.s, self.y, self.t, self.x, self.u),
            costs.terminal(self.s, self.y, self.x_terminal),
            costs.functional(self.x_terminal),
            costs.nonlinear(self.s, self.y, self.h),
        ])
    }
}

struct CostSampler<'a> {
    model: &'a Model,
    rng: ChaCha8Rng,
    h_range: (f64, f64),
}

impl<'a> CostSampler<'a> {
    fn new(model: &'a Model, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            h_range: model.functional_range(),
        }
    }
}

impl Iterator for CostSampler<'_> {
    type Item = CostSample;

    fn next(&mut self) -> Option<CostSample> {
        let m = self.model;
        let last = m.epochs() - 1;
        let t = self.rng.random_range(1..=last);
        let s = self.rng.random_range(1..=t);
        let pick = |rng: &mut ChaCha8Rng, grid: &[f64]| grid[rng.random_range(0..grid.len())];
        let y = pick(&mut self.rng, m.grids.at(s));
        let x = pick(&mut self.rng, m.grids.at(t));
        let (lo, hi) = m.constraints.interval(t, x);
        let u = lo + (hi - lo) * self.rng.random::<f64>();
        let x_terminal = pick(&mut self.rng, m.grids.at(m.epochs()));
        let (h_lo, h_hi) = self.h_range;
        let h = h_lo + (h_hi - h_lo) * self.rng.random::<f64>();
        Some(CostSample {
            s,
            y,
            t,
            x,
            u,
            x_terminal,
            h,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClauseStatus {
    Pass,
    Fail,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clause {
    pub name: &'static str,
    pub status: ClauseStatus,
    pub detail: String,
}

/// Sampled checks of the sufficient conditions for existence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub samples: usize,
    pub clauses: Vec<Clause>,
    pub notes: Vec<String>,
}

impl AssumptionReport {
    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }

    pub fn status(&self, name: &str) -> ClauseStatus {
        self.clause(name).map_or(ClauseStatus::Unknown, |c| c.status)
    }

    /// Every clause passed on the sampled points.
    pub fn all_pass(&self) -> bool {
        self.clauses.iter().all(|c| c.status == ClauseStatus::Pass)
    }
}

pub const CLAUSE_NONNEG: &str = "nonnegativity";
pub const CLAUSE_G_MONOTONE: &str = "g_monotone";
pub const CLAUSE_SIGMA_FLOOR: &str = "sigma_floor";
pub const CLAUSE_COMPACT_CONTROLS: &str = "compact_controls";

/// Sampled verdicts on nonnegativity, `G` monotonicity in `h`, the noise
/// scale floor and compactness of the control intervals. A clause "passes"
/// when sampling found no counterexample.
pub fn validate_assumptions(model: &Model, samples: usize, seed: u64) -> AssumptionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut clauses = Vec::new();
    let mut notes = Vec::new();

    let mut negative: Option<String> = None;
    for sample in CostSampler::new(model, seed).take(samples) {
        if let Some((what, v)) = sample.evaluate(&model.costs).named().find(|(_, v)| *v < 0.0) {
            negative = Some(format!("{what} = {v:.6e} at s={}, y={}, h={}", sample.s, sample.y, sample.h));
            break;
        }
    }
    clauses.push(match negative {
        Some(detail) => {
            notes.push(
                "nonnegativity not satisfied; solver proceeds via direct inf-compactness check".into(),
            );
            Clause {
                name: CLAUSE_NONNEG,
                status: ClauseStatus::Fail,
                detail,
            }
        }
        None => Clause {
            name: CLAUSE_NONNEG,
            status: ClauseStatus::Pass,
            detail: format!("{samples} samples of C, F, H, G all ≥ 0"),
        },
    });

    clauses.push(if model.costs.g_vanishes {
        Clause {
            name: CLAUSE_G_MONOTONE,
            status: ClauseStatus::Pass,
            detail: "G ≡ 0".into(),
        }
    } else {
        let (h_lo, h_hi) = model.functional_range();
        let last = model.epochs() - 1;
        let mut violation = None;
        for _ in 0..samples {
            let s = rng.random_range(1..=last);
            let grid = model.grids.at(s);
            let y = grid[rng.random_range(0..grid.len())];
            let a = h_lo + (h_hi - h_lo) * rng.random::<f64>();
            let b = h_lo + (h_hi - h_lo) * rng.random::<f64>();
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let (ga, gb) = (model.costs.nonlinear(s, y, a), model.costs.nonlinear(s, y, b));
            if gb < ga - 1e-12 * (1.0 + ga.abs()) {
                violation = Some(format!("G({s}, {y}, {b}) = {gb} < G({s}, {y}, {a}) = {ga}"));
                break;
            }
        }
        match violation {
            Some(detail) => Clause {
                name: CLAUSE_G_MONOTONE,
                status: ClauseStatus::Fail,
                detail,
            },
            None => Clause {
                name: CLAUSE_G_MONOTONE,
                status: ClauseStatus::Pass,
                detail: format!("nondecreasing on sampled h in [{h_lo}, {h_hi}]"),
            },
        }
    });

    clauses.push(match &model.kernel {
        KernelSpec::DiscreteChain(_) => Clause {
            name: CLAUSE_SIGMA_FLOOR,
            status: ClauseStatus::Unknown,
            detail: "explicit chain; no density".into(),
        },
        KernelSpec::AdditiveNoise(k) => {
            let last = model.epochs() - 1;
            let mut violation = None;
            for _ in 0..samples {
                let t = rng.random_range(1..=last);
                let grid = model.grids.at(t);
                let x = grid[0] + (grid[grid.len() - 1] - grid[0]) * rng.random::<f64>();
                let (lo, hi) = model.constraints.interval(t, x);
                let u = lo + (hi - lo) * rng.random::<f64>();
                if let Err(e) = k.check_floor(t, x, u) {
                    violation = Some(e.to_string());
                    break;
                }
            }
            match violation {
                Some(detail) => Clause {
                    name: CLAUSE_SIGMA_FLOOR,
                    status: ClauseStatus::Fail,
                    detail,
                },
                None => Clause {
                    name: CLAUSE_SIGMA_FLOOR,
                    status: ClauseStatus::Pass,
                    detail: format!("σ ≥ {} on {samples} samples", k.sigma_floor),
                },
            }
        }
    });

    let mut widest: f64 = 0.0;
    let mut compact = true;
    for t in model.horizon.decision_epochs() {
        for &x in model.grids.at(t) {
            let (lo, hi) = model.constraints.interval(t, x);
            compact &= lo.is_finite() && hi.is_finite() && lo <= hi;
            widest = widest.max(hi - lo);
        }
    }
    clauses.push(Clause {
        name: CLAUSE_COMPACT_CONTROLS,
        status: if compact { ClauseStatus::Pass } else { ClauseStatus::Fail },
        detail: format!("closed bounded intervals, widest {widest}"),
    });

    AssumptionReport {
        samples,
        clauses,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(costs: CostSpec) -> Result<Model> {
        let kernel = AdditiveNoise::new(
            Arc::new(|_, x, u| x + u),
            Arc::new(|_, _, _| 1.0),
            NoiseDensity::Gaussian,
            1e-6,
            8,
        );
        Model::new(
            "toy",
            Horizon::new(3)?,
            StateGrid::uniform(3, -4.0, 4.0, 9)?,
            ControlConstraint::constant(-1.0, 1.0, 5),
            KernelSpec::AdditiveNoise(kernel),
            costs,
        )
    }

    #[test]
    fn horizon_below_two_is_rejected() {
        assert_eq!(Horizon::new(1), Err(Error::Horizon(1)));
        assert_eq!(
            Horizon::new(1).unwrap_err().to_string(),
            "horizon must be ≥ 2 (got 1)"
        );
        assert_eq!(Horizon::new(2).unwrap().decision_epochs(), 1..=1);
    }

    #[test]
    fn grids_must_increase() {
        assert!(StateGrid::new(vec![vec![0.0, 0.0]]).is_err());
        assert!(StateGrid::new(vec![vec![0.0]]).is_err());
        assert!(StateGrid::new(vec![vec![0.0, 1.0, 3.0]]).is_ok());
    }

    #[test]
    fn locate_brackets_and_clamps() {
        let g = [0.0, 1.0, 3.0];
        assert_eq!(locate(&g, -1.0), (0, 0.0));
        assert_eq!(locate(&g, 0.5), (0, 0.5));
        assert_eq!(locate(&g, 1.0), (1, 0.0));
        assert_eq!(locate(&g, 2.0), (1, 0.5));
        assert_eq!(locate(&g, 5.0), (1, 1.0));
        assert_eq!(interpolate(&g, &[0.0, 2.0, 4.0], 2.0), 3.0);
    }

    #[test]
    fn linspace_hits_endpoints() {
        let v = linspace(-5.0, 5.0, 101);
        assert_eq!(v[0], -5.0);
        assert_eq!(v[100], 5.0);
        assert_eq!(v[50], 0.0);
    }

    #[test]
    fn empty_interval_is_rejected() {
        let kernel = AdditiveNoise::new(
            Arc::new(|_, x, _| x),
            Arc::new(|_, _, _| 1.0),
            NoiseDensity::Gaussian,
            1e-6,
            8,
        );
        let err = Model::new(
            "bad",
            Horizon::new(2).unwrap(),
            StateGrid::uniform(2, 0.0, 1.0, 3).unwrap(),
            ControlConstraint::constant(1.0, 0.0, 3),
            KernelSpec::AdditiveNoise(kernel),
            CostSpec::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyControlInterval { .. }));
    }

    #[test]
    fn sigma_floor_is_enforced() {
        let kernel = AdditiveNoise::new(
            Arc::new(|_, x, _| x),
            Arc::new(|_, _, u: f64| u.abs()),
            NoiseDensity::Gaussian,
            1e-3,
            8,
        );
        let err = Model::new(
            "floor",
            Horizon::new(2).unwrap(),
            StateGrid::uniform(2, 0.0, 1.0, 3).unwrap(),
            ControlConstraint::constant(-1.0, 1.0, 3),
            KernelSpec::AdditiveNoise(kernel),
            CostSpec::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SigmaFloor { .. }), "{err}");
    }

    #[test]
    fn negative_costs_need_the_flag_cleared() {
        let neg = CostSpec::default().with_terminal(|_, _, x| x);
        assert!(matches!(toy_model(neg.clone()), Err(Error::Cost(_))));
        assert!(toy_model(neg.nonneg(false)).is_ok());
    }

    #[test]
    fn chain_rows_must_be_stochastic() {
        let err = ChainKernel::new(vec![vec![vec![vec![0.5, 0.4]]]]).unwrap_err();
        assert!(err.to_string().contains("non-stochastic row"), "{err}");
        assert!(ChainKernel::new(vec![vec![vec![vec![0.5, 0.5]]]]).is_ok());
        assert!(ChainKernel::new(vec![vec![vec![vec![1.5, -0.5]]]]).is_err());
    }

    #[test]
    fn monotone_clause_detects_decreasing_g() {
        let costs = CostSpec::default()
            .with_functional(|x| x)
            .with_nonlinear(|_, _, h| -h * h, false)
            .nonneg(false);
        let model = toy_model(costs).unwrap();
        let report = validate_assumptions(&model, 500, 3);
        assert_eq!(report.status(CLAUSE_NONNEG), ClauseStatus::Fail);
        assert_eq!(report.status(CLAUSE_G_MONOTONE), ClauseStatus::Fail);
        assert_eq!(report.status(CLAUSE_SIGMA_FLOOR), ClauseStatus::Pass);
        assert_eq!(report.status(CLAUSE_COMPACT_CONTROLS), ClauseStatus::Pass);
    }
}
