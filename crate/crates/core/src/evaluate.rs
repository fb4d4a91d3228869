//! Independent evaluation of `J_t(x; π)`, the one-step deviation test, and
//! the precommitment and naive baselines.
//!
//! Everything here propagates distributions forward from the starting node
//! and never reuses the solver's backward flow products, so agreement with
//! the solver is a genuine cross-check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{policy_matrix, DiscretizedKernel, PolicyMatrix, RowView};
use crate::model::{linspace, Model};
use crate::par;
use crate::policy::Policy;
use crate::search::minimize_node;
use crate::solver::SolverOptions;

/// `J_t(x_i; π)`: push `δ_i` forward through the policy matrices, summing
/// the expected costs with the evaluation point frozen at `(t, x_i)`.
pub fn eval_objective_exact(model: &Model, dk: &DiscretizedKernel, policy: &Policy, t: usize, i: usize) -> Result<f64> {
    let t_end = model.epochs();
    if !(policy.covers(t) && policy.last() == t_end - 1) {
        return Err(Error::Policy(format!("policy must cover epochs {t}..{}", t_end - 1)));
    }
    let y = model.grids.at(t)[i];
    let mut p = vec![0.0; model.grids.at(t).len()];
    p[i] = 1.0;
    let mut total = 0.0;
    for k in t..t_end {
        let grid = model.grids.at(k);
        let controls = policy.at(k);
        let mut next = vec![0.0; model.grids.at(k + 1).len()];
        for (m, &pm) in p.iter().enumerate() {
            if pm == 0.0 {
                continue;
            }
            total += pm * model.costs.running(t, y, k, grid[m], controls[m]);
            dk.row_at(k, m, controls[m])?.add_scaled(pm, &mut next);
        }
        p = next;
    }
    let terminal = model.grids.at(t_end);
    let mut h = 0.0;
    for (m, &pm) in p.iter().enumerate() {
        total += pm * model.costs.terminal(t, y, terminal[m]);
        h += pm * model.costs.functional(terminal[m]);
    }
    let value = total + model.costs.nonlinear(t, y, h);
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "objective", t, node: i });
    }
    Ok(value)
}

/// Laws of `x_k`, `k = t+1..=T`, from every start node of `X_{t+1}` under a
/// fixed tail, built by forward propagation.
#[derive(Debug, Clone)]
pub struct TailLaw {
    from: usize,
    /// `laws[k − from][n]` is the law of `x_k` given `x_from = x_n`.
    laws: Vec<Vec<Vec<f64>>>,
}

impl TailLaw {
    pub fn new(model: &Model, dk: &DiscretizedKernel, policy: &Policy, from: usize) -> Result<Self> {
        let t_end = model.epochs();
        let qs: Vec<PolicyMatrix> = (from..t_end).map(|k| policy_matrix(dk, k, policy.at(k))).collect::<Result<_>>()?;
        let n_from = model.grids.at(from).len();
        let per_start = par::map_indexed(n_from, |n| {
            let mut p = vec![0.0; n_from];
            p[n] = 1.0;
            let mut laws = vec![p.clone()];
            for q in &qs {
                let mut next = vec![0.0; q.n_next];
                for (m, &pm) in p.iter().enumerate() {
                    if pm != 0.0 {
                        q.row(m).add_scaled(pm, &mut next);
                    }
                }
                laws.push(next.clone());
                p = next;
            }
            laws
        });
        let epochs = t_end - from + 1;
        let mut laws = vec![Vec::with_capacity(n_from); epochs];
        for start in per_start {
            for (k, law) in start.into_iter().enumerate() {
                laws[k].push(law);
            }
        }
        Ok(Self { from, laws })
    }

    pub fn law(&self, k: usize, n: usize) -> &[f64] {
        &self.laws[k - self.from][n]
    }

    /// `E[g(x_k) | x_from = x_n]` for every start node.
    fn expect(&self, k: usize, g: &[f64]) -> Vec<f64> {
        self.laws[k - self.from]
            .iter()
            .map(|law| law.iter().zip(g).map(|(p, v)| p * v).sum())
            .collect()
    }
}

/// Where the deviation test probes each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeControls {
    /// The node's own control grid.
    ControlGrid,
    /// This many equally spaced controls across the feasible interval.
    Uniform(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub t: usize,
    #[serde(rename = "node_index")]
    pub node: usize,
    pub state: f64,
    /// The probe achieving the largest gap at this node.
    pub control: f64,
    #[serde(rename = "J_dev")]
    pub j_dev: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// `max (V_t(x) − J_t(x; (u, tail)))` over all probes.
    pub worst_gap: f64,
    /// `(t, node, u)` attaining the worst gap.
    pub argmax: (usize, usize, f64),
    /// Worst gap per decision epoch (index `t − 1`).
    pub per_time: Vec<f64>,
    pub rows: Vec<DeviationRow>,
    pub probes: ProbeControls,
    pub tol: f64,
}

impl DeviationReport {
    pub fn certified(&self) -> bool {
        self.worst_gap <= self.tol
    }
}

/// One-step deviation test: for every `(t, x_i)` and probe control `u`,
/// compares `V_t(x_i) = J_t(x_i; π^{t})` with `J_t(x_i; (u, π^{t+1}))`.
pub fn verify_equilibrium(
    model: &Model,
    dk: &DiscretizedKernel,
    policy: &Policy,
    probes: ProbeControls,
    tol: f64,
) -> Result<DeviationReport> {
    let t_end = model.epochs();
    if policy.first() != 1 {
        return Err(Error::Policy("verification needs a policy from epoch 1".into()));
    }
    policy.check(model)?;
    let mut rows = Vec::new();
    let mut per_time = vec![f64::NEG_INFINITY; t_end - 1];
    for t in 1..t_end {
        let law = TailLaw::new(model, dk, policy, t + 1)?;
        let states = model.grids.at(t);
        let next_h: Vec<f64> = model.grids.at(t_end).iter().map(|&x| model.costs.functional(x)).collect();
        let h = law.expect(t_end, &next_h);
        let node_rows = par::map_indexed(states.len(), |i| -> Result<DeviationRow> {
            let y = states[i];
            let f: Vec<f64> = model.grids.at(t_end).iter().map(|&x| model.costs.terminal(t, y, x)).collect();
            let mut cont = law.expect(t_end, &f);
            for k in t + 1..t_end {
                let c: Vec<f64> = model
                    .grids
                    .at(k)
                    .iter()
                    .zip(policy.at(k))
                    .map(|(&x, &u)| model.costs.running(t, y, k, x, u))
                    .collect();
                cont.iter_mut().zip(law.expect(k, &c)).for_each(|(a, b)| *a += b);
            }
            let j = |u: f64| -> Result<f64> {
                let row = dk.row_at(t, i, u)?;
                Ok(model.costs.running(t, y, t, y, u) + row.dot(&cont) + model.costs.nonlinear(t, y, row.dot(&h)))
            };
            let v = j(policy.control(t, i))?;
            let candidates = match probes {
                ProbeControls::ControlGrid => dk.controls(t, i).to_vec(),
                ProbeControls::Uniform(n) => {
                    let (lo, hi) = model.constraints.interval(t, y);
                    linspace(lo, hi, n.max(2))
                }
            };
            let mut worst = DeviationRow {
                t,
                node: i,
                state: y,
                control: f64::NAN,
                j_dev: f64::NAN,
                v,
                gap: f64::NEG_INFINITY,
            };
            for u in candidates {
                let j_dev = j(u)?;
                let gap = v - j_dev;
                if gap > worst.gap {
                    worst.control = u;
                    worst.j_dev = j_dev;
                    worst.gap = gap;
                }
            }
            if !worst.gap.is_finite() {
                return Err(Error::NonFinite { what: "deviation gap", t, node: i });
            }
            Ok(worst)
        });
        for r in node_rows {
            let r = r?;
            per_time[t - 1] = per_time[t - 1].max(r.gap);
            rows.push(r);
        }
    }
    let worst = rows
        .iter()
        .fold(None::<&DeviationRow>, |best, r| match best {
            Some(b) if b.gap >= r.gap => Some(b),
            _ => Some(r),
        })
        .expect("at least one decision epoch");
    Ok(DeviationReport {
        worst_gap: worst.gap,
        argmax: (worst.t, worst.node, worst.control),
        per_time,
        rows,
        probes,
        tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Delta-method estimate of the plug-in bias `½ G''(h̄) Var(H) / n`.
    pub bias: f64,
    pub n_paths: usize,
    /// Path steps whose interpolated control had to be clamped.
    pub clamped_controls: usize,
}

/// Monte Carlo estimate of `J_t(x; π)` with exact noise sampling. Path `p`
/// draws from stream `p` of a ChaCha8 generator seeded with `seed`, so the
/// result does not depend on scheduling.
pub fn eval_objective_mc(model: &Model, policy: &Policy, t: usize, x: f64, n_paths: usize, seed: u64) -> Result<McEstimate> {
    let spec = model
        .kernel
        .as_additive()
        .ok_or(Error::Unsupported("Monte Carlo evaluation needs an additive-noise kernel"))?;
    if n_paths < 100 {
        return Err(Error::Policy(format!("need at least 100 paths (got {n_paths})")));
    }
    let t_end = model.epochs();
    if !(policy.covers(t) && policy.last() == t_end - 1) {
        return Err(Error::Policy(format!("policy must cover epochs {t}..{}", t_end - 1)));
    }
    let paths = par::map_indexed(n_paths, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut xk = x;
        let mut y = 0.0;
        let mut clamped = 0usize;
        for k in t..t_end {
            let raw = policy.interpolate(model, k, xk);
            let (lo, hi) = model.constraints.interval(k, xk);
            let u = raw.clamp(lo, hi);
            if u != raw {
                clamped += 1;
            }
            y += model.costs.running(t, x, k, xk, u);
            xk = spec.mean(k, xk, u) + spec.scale(k, xk, u) * spec.noise.sample(&mut rng);
        }
        y += model.costs.terminal(t, x, xk);
        (y, model.costs.functional(xk), clamped)
    });
    let n = n_paths as f64;
    let y_bar = paths.iter().map(|p| p.0).sum::<f64>() / n;
    let h_bar = paths.iter().map(|p| p.1).sum::<f64>() / n;
    let g = |h: f64| model.costs.nonlinear(t, x, h);
    let dh = 1e-4 * (1.0 + h_bar.abs());
    let g1 = (g(h_bar + dh) - g(h_bar - dh)) / (2.0 * dh);
    let g2 = (g(h_bar + dh) - 2.0 * g(h_bar) + g(h_bar - dh)) / (dh * dh);
    let z_bar = y_bar + g1 * h_bar;
    let var_z = paths.iter().map(|p| (p.0 + g1 * p.1 - z_bar).powi(2)).sum::<f64>() / (n - 1.0);
    let var_h = paths.iter().map(|p| (p.1 - h_bar).powi(2)).sum::<f64>() / (n - 1.0);
    let estimate = y_bar + g(h_bar);
    if !estimate.is_finite() {
        return Err(Error::NonFinite { what: "Monte Carlo estimate", t, node: 0 });
    }
    Ok(McEstimate {
        estimate,
        stderr: (var_z / n).sqrt(),
        bias: 0.5 * g2 * var_h / n,
        n_paths,
        clamped_controls: paths.iter().map(|p| p.2).sum(),
    })
}

/// Backward DP for `E[Σ C_k(s,y,x_k,u_k) + F(s,y,x_T) + λ H(x_T)]` with
/// `(s, y)` frozen; returns the policy over `t0..T−1`.
fn linear_dp(model: &Model, dk: &DiscretizedKernel, t0: usize, s: usize, y: f64, lambda: f64, options: &SolverOptions) -> Result<Policy> {
    let t_end = model.epochs();
    let refine = options.refine && !dk.is_chain();
    let mut w: Vec<f64> = model
        .grids
        .at(t_end)
        .iter()
        .map(|&x| model.costs.terminal(s, y, x) + lambda * model.costs.functional(x))
        .collect();
    let mut controls = Vec::with_capacity(t_end - t0);
    for k in (t0..t_end).rev() {
        let states = model.grids.at(k);
        let nodes_out = par::map_indexed(states.len(), |i| -> Result<(f64, f64)> {
            let x = states[i];
            let stage = |u: f64, row: &dyn RowView| model.costs.running(s, y, k, x, u) + row.dot(&w);
            let nodes = dk.controls(k, i);
            let values: Vec<f64> = nodes
                .iter()
                .enumerate()
                .map(|(j, &u)| stage(u, &dk.row(k, i, j)))
                .map(|v| if v.is_finite() { v } else { f64::INFINITY })
                .collect();
            let off_node = |u: f64| {
                dk.row_at(k, i, u)
                    .map(|row| stage(u, &row))
                    .ok()
                    .filter(|v| v.is_finite())
                    .unwrap_or(f64::INFINITY)
            };
            let best = minimize_node(
                nodes,
                &values,
                refine.then_some((&off_node as &dyn Fn(f64) -> f64, options.u_tol, options.max_refine_iter)),
            )
            .ok_or(Error::NonFinite { what: "objective", t: k, node: i })?;
            Ok((best.u, best.value))
        });
        let (u, v): (Vec<f64>, Vec<f64>) = nodes_out.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        controls.push(u);
        w = v;
    }
    controls.reverse();
    Ok(Policy::new(t0, controls))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precommitment {
    /// The plan of the `(t0, x0)` self for epochs `t0..T−1`.
    pub policy: Policy,
    /// `J_{t0}(x0; policy)`.
    pub value: f64,
    /// Weight on `H` in the linearized problem that produced the plan.
    pub lambda: f64,
}

const BRACKET_EXPANSIONS: usize = 60;
const BISECTIONS: usize = 60;
/// Relative tolerance on `m`; the plans behind `φ(m)` come from refined
/// minimizations that are themselves only accurate to about this level.
const M_TOL: f64 = 1e-10;

/// Optimal plan of the self at `(t0, x0)`: backward DP on the objective
/// with `G` linearized at a target `m` of `E[H(x_T)]`, with `m` found by
/// regula falsi on `E_{π(m)}[H] − m`. Every candidate plan is scored by its
/// exact objective and the best one is returned.
pub fn solve_precommitment(
    model: &Model,
    dk: &DiscretizedKernel,
    t0: usize,
    x0: usize,
    options: &SolverOptions,
) -> Result<Precommitment> {
    let y = model.grids.at(t0)[x0];
    let score = |lambda: f64| -> Result<(Policy, f64, f64)> {
        let plan = linear_dp(model, dk, t0, t0, y, lambda, options)?;
        let j = eval_objective_exact(model, dk, &plan, t0, x0)?;
        let h = expected_functional(model, dk, &plan, t0, x0)?;
        Ok((plan, j, h))
    };
    let (plan0, j0, h0) = score(0.0)?;
    if model.costs.g_vanishes {
        return Ok(Precommitment {
            policy: plan0,
            value: j0,
            lambda: 0.0,
        });
    }
    let slope = |m: f64| {
        let d = 1e-6 * (1.0 + m.abs());
        (model.costs.nonlinear(t0, y, m + d) - model.costs.nonlinear(t0, y, m - d)) / (2.0 * d)
    };
    let mut best = (plan0, j0, 0.0);
    let consider = |cand: (Policy, f64, f64), lambda: f64, best: &mut (Policy, f64, f64)| {
        if cand.1 < best.1 {
            *best = (cand.0, cand.1, lambda);
        }
        cand.2
    };
    let phi = |m: f64, best: &mut (Policy, f64, f64)| -> Result<f64> {
        let lambda = slope(m);
        let cand = score(lambda)?;
        Ok(consider(cand, lambda, best) - m)
    };

    let mut a = h0;
    let mut fa = phi(a, &mut best)?;
    if fa == 0.0 {
        let (policy, value, lambda) = best;
        return Ok(Precommitment { policy, value, lambda });
    }
    let dir = fa.signum();
    let mut width = 0.1 * (1.0 + h0.abs());
    let mut b = a + dir * width;
    let mut fb = phi(b, &mut best)?;
    let mut expansions = 1;
    while fb.signum() == fa.signum() && fb != 0.0 {
        if expansions >= BRACKET_EXPANSIONS {
            return Err(Error::Bracket(expansions));
        }
        a = b;
        fa = fb;
        width *= 2.0;
        b = a + dir * width;
        fb = phi(b, &mut best)?;
        expansions += 1;
    }
    // regula falsi with the Illinois modification; the bracket always
    // straddles the sign change, so a discontinuous φ still converges
    for _ in 0..BISECTIONS {
        if fb == 0.0 || (b - a).abs() <= M_TOL * (1.0 + a.abs()) {
            break;
        }
        let mut c = b - fb * (b - a) / (fb - fa);
        if !(c - a.min(b) > 0.0 && a.max(b) - c > 0.0) {
            c = 0.5 * (a + b);
        }
        let fc = phi(c, &mut best)?;
        if fc.abs() <= M_TOL * (1.0 + c.abs()) {
            break;
        }
        if fc.signum() == fb.signum() {
            fa *= 0.5;
        } else {
            a = b;
            fa = fb;
        }
        b = c;
        fb = fc;
    }
    let (policy, value, lambda) = best;
    Ok(Precommitment { policy, value, lambda })
}

fn expected_functional(model: &Model, dk: &DiscretizedKernel, policy: &Policy, t: usize, i: usize) -> Result<f64> {
    let t_end = model.epochs();
    let mut p = vec![0.0; model.grids.at(t).len()];
    p[i] = 1.0;
    for k in t..t_end {
        let mut next = vec![0.0; model.grids.at(k + 1).len()];
        for (m, &pm) in p.iter().enumerate() {
            if pm != 0.0 {
                dk.row_at(k, m, policy.control(k, m))?.add_scaled(pm, &mut next);
            }
        }
        p = next;
    }
    Ok(model.grids.at(t_end).iter().zip(&p).map(|(&x, pm)| pm * model.costs.functional(x)).sum())
}

/// At every `(t, x_i)`, the first action of the plan the `(t, x_i)` self
/// would precommit to.
pub fn solve_naive(model: &Model, dk: &DiscretizedKernel, options: &SolverOptions) -> Result<Policy> {
    let controls = (1..model.epochs())
        .map(|t| {
            (0..model.grids.at(t).len())
                .map(|i| solve_precommitment(model, dk, t, i, options).map(|p| p.policy.control(t, i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Policy::full(controls))
}
