//! Backward induction on the reduced extended Bellman equation
//!
//! ```text
//! V_t(x) = min_u  C_t(t,x,x,u) + Σ_{k>t} E_u[b_k(t,x,·)] + E_u[f(t,x,·)] + G(t, x, E_u[h])
//! ```
//!
//! The auxiliary functions `b_k`, `f`, `h` are conditional expectations
//! under the already-solved tail policy. They are linear in the cost being
//! propagated, so they are evaluated by contracting cost vectors with
//! multi-step flow matrices `M[t+1→k]` instead of one backward sweep per
//! evaluation point `(s, y)`.

use crate::error::{Error, Result};
use crate::kernel::{policy_matrix, DiscretizedKernel, PolicyMatrix, RowView};
use crate::model::{linspace, Model};
use crate::par;
use crate::policy::Policy;
use crate::search::minimize_node;

/// Relative slack used when comparing objective values to the minimum.
const LEVEL_SLACK: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        Self { rows: n, cols: n, data }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.data[n * self.cols + m]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|n| self.row(n).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Q · self` for a sparse-row stochastic matrix `Q`.
    fn left_mul(&self, q: &PolicyMatrix) -> Self {
        let cols = self.cols;
        let rows = par::map_indexed(q.rows.len(), |i| {
            let mut out = vec![0.0; cols];
            let r = q.row(i);
            for (w, &p) in r.weights.iter().enumerate() {
                if p != 0.0 {
                    for (o, v) in out.iter_mut().zip(self.row(r.start + w)) {
                        *o += p * v;
                    }
                }
            }
            out
        });
        Self {
            rows: q.rows.len(),
            cols,
            data: rows.concat(),
        }
    }
}

/// `M[from→k]` for `k = from..=T` under a fixed tail policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrices {
    from: usize,
    mats: Vec<Dense>,
}

impl FlowMatrices {
    /// The trivial flow `M[T→T] = I`.
    pub fn terminal(dk: &DiscretizedKernel) -> Self {
        let t_end = dk.epochs();
        Self {
            from: t_end,
            mats: vec![Dense::identity(dk.grids().at(t_end).len())],
        }
    }

    /// Flows from `tail.first()` by successive left-multiplication of the
    /// policy matrices, starting from the terminal identity.
    pub fn from_tail(dk: &DiscretizedKernel, tail: &Policy) -> Result<Self> {
        let mut flows = Self::terminal(dk);
        for t in (tail.first()..dk.epochs()).rev() {
            let q = policy_matrix(dk, t, tail.at(t))?;
            flows = flows.prepend(&q);
        }
        Ok(flows)
    }

    /// Flows from `q.t` given flows from `q.t + 1`.
    pub fn prepend(&self, q: &PolicyMatrix) -> Self {
        assert_eq!(q.t + 1, self.from, "policy matrix epoch must precede the flows");
        let mut mats = Vec::with_capacity(self.mats.len() + 1);
        mats.push(Dense::identity(q.rows.len()));
        mats.extend(self.mats.iter().map(|m| m.left_mul(q)));
        Self { from: q.t, mats }
    }

    pub fn from(&self) -> usize {
        self.from
    }

    /// `M[from→k]`.
    pub fn get(&self, k: usize) -> &Dense {
        &self.mats[k - self.from]
    }

    pub fn max_abs_diff(&self, other: &FlowMatrices) -> f64 {
        assert_eq!(self.from, other.from);
        self.mats
            .iter()
            .zip(&other.mats)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Auxiliary functions at decision epoch `t`: flows from `t+1` under the
/// tail `π^{t+1,*}` and the tabulated `h` on `X_{t+1}`.
#[derive(Debug, Clone)]
pub struct AuxiliaryBundle {
    t: usize,
    flows: FlowMatrices,
    tail: Policy,
    h_next: Vec<f64>,
}

pub fn build_aux(model: &Model, dk: &DiscretizedKernel, tail: &Policy, t: usize) -> Result<AuxiliaryBundle> {
    if tail.first() != t + 1 || (!tail.is_empty() && tail.last() != model.epochs() - 1) {
        return Err(Error::Policy(format!(
            "tail for epoch {t} must cover {}..{}",
            t + 1,
            model.epochs() - 1
        )));
    }
    tail.check(model)?;
    AuxiliaryBundle::from_flows(model, FlowMatrices::from_tail(dk, tail)?, tail.clone())
}

impl AuxiliaryBundle {
    pub fn from_flows(model: &Model, flows: FlowMatrices, tail: Policy) -> Result<Self> {
        let t_end = model.epochs();
        if flows.from() != tail.first() {
            return Err(Error::Policy("flows and tail start at different epochs".into()));
        }
        let h_terminal: Vec<f64> = model.grids.at(t_end).iter().map(|&x| model.costs.functional(x)).collect();
        let h_next = flows.get(t_end).matvec(&h_terminal);
        if let Some(n) = h_next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "h",
                t: flows.from(),
                node: n,
            });
        }
        Ok(Self {
            t: flows.from() - 1,
            flows,
            tail,
            h_next,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn flows(&self) -> &FlowMatrices {
        &self.flows
    }

    pub fn tail(&self) -> &Policy {
        &self.tail
    }

    pub fn into_parts(self) -> (FlowMatrices, Policy) {
        (self.flows, self.tail)
    }

    /// `h(x_n)` on `X_{t+1}`.
    pub fn h_next(&self) -> &[f64] {
        &self.h_next
    }

    fn running_vector(&self, model: &Model, k: usize, s: usize, y: f64) -> Vec<f64> {
        let controls = self.tail.at(k);
        model
            .grids
            .at(k)
            .iter()
            .zip(controls)
            .map(|(&x, &u)| model.costs.running(s, y, k, x, u))
            .collect()
    }

    fn terminal_vector(&self, model: &Model, s: usize, y: f64) -> Vec<f64> {
        model.grids.at(model.epochs()).iter().map(|&x| model.costs.terminal(s, y, x)).collect()
    }

    /// `b_k(t, y, x_n)` for `k ∈ t+1..T−1`.
    pub fn bk_eval(&self, model: &Model, k: usize, y: f64, n: usize) -> f64 {
        let c = self.running_vector(model, k, self.t, y);
        self.flows.get(k).row(n).iter().zip(&c).map(|(a, b)| a * b).sum()
    }

    /// `f(t, y, x_n)`.
    pub fn f_eval(&self, model: &Model, y: f64, n: usize) -> f64 {
        let f = self.terminal_vector(model, self.t, y);
        self.flows.get(model.epochs()).row(n).iter().zip(&f).map(|(a, b)| a * b).sum()
    }

    /// `Σ_k b_k(s, y, ·) + f(s, y, ·)` on `X_{t+1}` with the evaluation
    /// point `(s, y)` frozen.
    pub fn continuation(&self, model: &Model, s: usize, y: f64) -> Vec<f64> {
        let t_end = model.epochs();
        let mut acc = self.flows.get(t_end).matvec(&self.terminal_vector(model, s, y));
        for k in self.t + 1..t_end {
            let b = self.flows.get(k).matvec(&self.running_vector(model, k, s, y));
            acc.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        }
        acc
    }
}

/// L at `(t, x_i, u)` against a precomputed continuation vector.
fn objective_with<R: RowView>(
    model: &Model,
    aux: &AuxiliaryBundle,
    t: usize,
    y: f64,
    u: f64,
    row: &R,
    continuation: &[f64],
) -> f64 {
    let h = row.dot(aux.h_next());
    model.costs.running(t, y, t, y, u) + row.dot(continuation) + model.costs.nonlinear(t, y, h)
}

/// `L(t, x_i, x_i, u)`: the objective of the one-step deviation `(u, tail)`.
pub fn objective_l(
    model: &Model,
    dk: &DiscretizedKernel,
    aux: &AuxiliaryBundle,
    t: usize,
    i: usize,
    u: f64,
) -> Result<f64> {
    let y = model.grids.at(t)[i];
    let row = dk.row_at(t, i, u)?;
    let value = objective_with(model, aux, t, y, u, &row, &aux.continuation(model, t, y));
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "objective", t, node: i });
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bracketed refinement between control nodes (additive-noise kernels).
    pub refine: bool,
    /// Width of the final refinement bracket.
    pub u_tol: f64,
    pub max_refine_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            refine: true,
            u_tol: 1e-7,
            max_refine_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub controls: Vec<f64>,
    pub values: Vec<f64>,
    pub boundary_hit: Vec<bool>,
    pub levelset_flag: Vec<bool>,
    pub refined: Vec<bool>,
}

struct NodeOutcome {
    u: f64,
    value: f64,
    boundary: bool,
    levelset: bool,
    refined: bool,
}

pub fn bellman_step(
    model: &Model,
    dk: &DiscretizedKernel,
    aux: &AuxiliaryBundle,
    t: usize,
    options: &SolverOptions,
) -> Result<StepResult> {
    if aux.t() != t {
        return Err(Error::Policy(format!("auxiliary bundle is for epoch {}, not {t}", aux.t())));
    }
    let refine = options.refine && !dk.is_chain();
    let states = model.grids.at(t);
    let outcomes = par::map_indexed(states.len(), |i| -> Result<NodeOutcome> {
        let y = states[i];
        let cont = aux.continuation(model, t, y);
        let nodes = dk.controls(t, i);
        let values: Vec<f64> = nodes
            .iter()
            .enumerate()
            .map(|(j, &u)| objective_with(model, aux, t, y, u, &dk.row(t, i, j), &cont))
            .map(|v| if v.is_finite() { v } else { f64::INFINITY })
            .collect();
        let off_node = |u: f64| {
            dk.row_at(t, i, u)
                .map(|row| objective_with(model, aux, t, y, u, &row, &cont))
                .ok()
                .filter(|v| v.is_finite())
                .unwrap_or(f64::INFINITY)
        };
        let found = minimize_node(
            nodes,
            &values,
            refine.then_some((&off_node as &dyn Fn(f64) -> f64, options.u_tol, options.max_refine_iter)),
        )
        .ok_or(Error::NonFinite { what: "objective", t, node: i })?;
        let last = nodes.len() - 1;
        let near = |v: f64| v <= found.value + LEVEL_SLACK * (1.0 + found.value.abs());
        Ok(NodeOutcome {
            u: found.u,
            value: found.value,
            boundary: !found.refined && (found.j == 0 || found.j == last),
            levelset: near(values[0]) || near(values[last]),
            refined: found.refined,
        })
    });
    let mut step = StepResult {
        controls: Vec::with_capacity(states.len()),
        values: Vec::with_capacity(states.len()),
        boundary_hit: Vec::with_capacity(states.len()),
        levelset_flag: Vec::with_capacity(states.len()),
        refined: Vec::with_capacity(states.len()),
    };
    for o in outcomes {
        let o = o?;
        step.controls.push(o.u);
        step.values.push(o.value);
        step.boundary_hit.push(o.boundary);
        step.levelset_flag.push(o.levelset);
        step.refined.push(o.refined);
    }
    Ok(step)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// `(t, node)` where the minimizer sits on the control-interval edge.
    pub boundary_hits: Vec<(usize, usize)>,
    /// Per epoch and node: an interval endpoint lies in the sublevel set at
    /// the attained minimum, so the minimizer may escape the control window.
    pub levelset_flags: Vec<Vec<bool>>,
    /// Per epoch and node: the control came from bracketed refinement.
    pub refined: Vec<Vec<bool>>,
    /// Worst one-step improvement, filled in by verification.
    pub deviation_gap: Option<f64>,
    /// Worst clamped kernel mass per transition epoch.
    pub clamped_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub policy: Policy,
    /// `V_t` on `X_t` for `t = 1..T−1` (index `t − 1`).
    pub values: Vec<Vec<f64>>,
    /// `h_t = E[H(x_T) | x_t]` under the equilibrium tail for `t = 1..T` (index `t − 1`).
    pub h_tabs: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl EquilibriumSolution {
    pub fn value(&self, t: usize, i: usize) -> f64 {
        self.values[t - 1][i]
    }
}

pub fn solve(model: &Model, dk: &DiscretizedKernel, options: &SolverOptions) -> Result<EquilibriumSolution> {
    let t_end = model.epochs();
    let mut flows = FlowMatrices::terminal(dk);
    let mut tail = Policy::empty(t_end);
    let h_terminal: Vec<f64> = model.grids.at(t_end).iter().map(|&x| model.costs.functional(x)).collect();
    let mut h_tabs = vec![h_terminal];
    let mut values = Vec::with_capacity(t_end - 1);
    let mut diagnostics = Diagnostics {
        clamped_mass: dk.clamp_diagnostic(),
        ..Diagnostics::default()
    };
    for t in (1..t_end).rev() {
        let aux = AuxiliaryBundle::from_flows(model, flows, tail)?;
        let step = bellman_step(model, dk, &aux, t, options)?;
        let (old_flows, old_tail) = aux.into_parts();
        let q = policy_matrix(dk, t, &step.controls)?;
        h_tabs.push((0..q.rows.len()).map(|i| q.row(i).dot(&h_tabs[h_tabs.len() - 1])).collect());
        flows = old_flows.prepend(&q);
        tail = old_tail.prepend(step.controls);
        for (i, &hit) in step.boundary_hit.iter().enumerate() {
            if hit {
                diagnostics.boundary_hits.push((t, i));
            }
        }
        diagnostics.levelset_flags.push(step.levelset_flag);
        diagnostics.refined.push(step.refined);
        values.push(step.values);
    }
    values.reverse();
    h_tabs.reverse();
    diagnostics.levelset_flags.reverse();
    diagnostics.refined.reverse();
    diagnostics.boundary_hits.sort_unstable();
    Ok(EquilibriumSolution {
        policy: tail,
        values,
        h_tabs,
        diagnostics,
    })
}

/// Largest `|V_t(x) − [Σ_{k≥t} b_k(t,x,x) + f(t,x,x) + G(t,x,h(x))]|` over
/// the nodes of `X_t`, where the right side is rebuilt from the solved
/// policy with the evaluation point `(s, y) = (t, x)` (so the `k = t` term
/// is the running cost under `u*_t`).
pub fn value_identity_check(
    model: &Model,
    dk: &DiscretizedKernel,
    solution: &EquilibriumSolution,
    t: usize,
) -> Result<f64> {
    let tail = solution.policy.tail(t);
    let aux = AuxiliaryBundle::from_flows(model, FlowMatrices::from_tail(dk, &tail)?, tail)?;
    let residuals = par::map_indexed(model.grids.at(t).len(), |n| {
        let y = model.grids.at(t)[n];
        let cont = aux.continuation(model, t, y);
        let rhs = cont[n] + model.costs.nonlinear(t, y, aux.h_next()[n]);
        (solution.value(t, n) - rhs).abs()
    });
    Ok(residuals.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetReport {
    pub r: f64,
    pub probe: Vec<f64>,
    pub min_value: f64,
    /// Maximal runs of probe indices with `L ≤ r`.
    pub intervals: Vec<(usize, usize)>,
    /// The sublevel set reaches the probe-window boundary.
    pub suspect_non_inf_compact: bool,
}

impl LevelSetReport {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Control-value hull of each run.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.intervals.iter().map(|&(a, b)| (self.probe[a], self.probe[b])).collect()
    }
}

/// Sublevel set `{u : L(t, x_i, x_i, u) ≤ r}` on `points` equally spaced
/// controls in `window`. The window may extend past the modeled control
/// interval for additive-noise kernels; points where the kernel is
/// undefined count as outside the set.
pub fn levelset_probe(
    model: &Model,
    dk: &DiscretizedKernel,
    aux: &AuxiliaryBundle,
    t: usize,
    i: usize,
    r: f64,
    window: (f64, f64),
    points: usize,
) -> LevelSetReport {
    let y = model.grids.at(t)[i];
    let cont = aux.continuation(model, t, y);
    let probe = linspace(window.0, window.1, points.max(2));
    let values: Vec<f64> = probe
        .iter()
        .map(|&u| {
            dk.row_unconstrained(t, i, u)
                .map(|row| objective_with(model, aux, t, y, u, &row, &cont))
                .ok()
                .filter(|v| v.is_finite())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut intervals = Vec::new();
    let mut start = None;
    for (k, &v) in values.iter().enumerate() {
        match (v <= r, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                intervals.push((s, k - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push((s, values.len() - 1));
    }
    let last = probe.len() - 1;
    let suspect = intervals.iter().any(|&(a, b)| a == 0 || b == last);
    LevelSetReport {
        r,
        probe,
        min_value,
        intervals,
        suspect_non_inf_compact: suspect,
    }
}
