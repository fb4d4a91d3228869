//! Shared fixtures: random finite chains and an exhaustive best-response
//! oracle that enumerates every path instead of using flow matrices.

#![allow(dead_code)]

use markov_equilibrium::examples::{discrete_chain_model, ControlSpec, CostTables, GKind};
use markov_equilibrium::model::{linspace, Model};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random chain together with its raw transition tables.
pub struct ChainInstance {
    pub model: Model,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<f64>,
    /// `matrices[t − 1][i][j][m]`.
    pub matrices: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ChainInstance {
    pub fn epochs(&self) -> usize {
        self.states.len()
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.05..1.0) })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    // make the row sum to one exactly in floating point
    let drift: f64 = 1.0 - w.iter().sum::<f64>();
    let k = w.iter().position(|&v| v > 0.0).unwrap();
    w[k] += drift;
    w
}

/// At most three states per epoch, at most three controls, `T ≤ 4`,
/// nonnegative table costs and `G ∈ {0, h², −h²}`.
pub fn random_chain(seed: u64) -> ChainInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(2..=4usize);
    let states: Vec<Vec<f64>> = (0..horizon)
        .map(|_| {
            let n = rng.random_range(2..=3usize);
            let mut x = rng.random_range(-1.0..1.0);
            (0..n)
                .map(|_| {
                    x += rng.random_range(0.5..1.5);
                    x
                })
                .collect()
        })
        .collect();
    let m = rng.random_range(2..=3usize);
    let control = ControlSpec {
        lower: 0.0,
        upper: 1.0,
        nodes: m,
    };
    let matrices: Vec<Vec<Vec<Vec<f64>>>> = (0..horizon - 1)
        .map(|t| {
            (0..states[t].len())
                .map(|_| (0..m).map(|_| random_row(&mut rng, states[t + 1].len())).collect())
                .collect()
        })
        .collect();
    let n_end = states[horizon - 1].len();
    let g = [GKind::Zero, GKind::Square, GKind::NegSquare][rng.random_range(0..3usize)];
    let costs = CostTables {
        running: (0..horizon - 1)
            .map(|t| {
                (0..states[t].len())
                    .map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect()
            })
            .collect(),
        terminal: (0..n_end).map(|_| rng.random_range(0.0..1.0)).collect(),
        anchor_weight: rng.random_range(0.0..1.0),
        functional: (0..n_end).map(|_| rng.random_range(0.0..2.0)).collect(),
        g,
    };
    let model = discrete_chain_model(states.clone(), control, matrices.clone(), &costs)
        .expect("random chain is valid");
    ChainInstance {
        model,
        states,
        controls: linspace(0.0, 1.0, m),
        matrices,
    }
}

/// `J_t(x_i)` when the self at `(t, x_i)` plays control index `first` and
/// later epochs follow `tail[k − 1][node]`, by explicit path enumeration.
pub fn path_objective(c: &ChainInstance, tail: &[Vec<usize>], t: usize, i: usize, first: usize) -> f64 {
    let (s, y) = (t, c.states[t - 1][i]);
    // (expected additive cost, E[H(x_T)]) from (k, node) with given control index
    fn walk(
        c: &ChainInstance,
        tail: &[Vec<usize>],
        s: usize,
        y: f64,
        k: usize,
        node: usize,
        j: usize,
    ) -> (f64, f64) {
        let t_end = c.epochs();
        let costs = &c.model.costs;
        let x = c.states[k - 1][node];
        let mut add = costs.running(s, y, k, x, c.controls[j]);
        let mut h = 0.0;
        for (next, &p) in c.matrices[k - 1][node][j].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if k + 1 == t_end {
                let xt = c.states[t_end - 1][next];
                add += p * costs.terminal(s, y, xt);
                h += p * costs.functional(xt);
            } else {
                let (a, hh) = walk(c, tail, s, y, k + 1, next, tail[k][next]);
                add += p * a;
                h += p * hh;
            }
        }
        (add, h)
    }
    let (add, h) = walk(c, tail, s, y, t, i, first);
    add + c.model.costs.nonlinear(s, y, h)
}

/// Backward best response: at every `(t, x_i)` the control index that
/// minimizes the path objective given the already-chosen later epochs
/// (smallest index on ties). Returns control indices per epoch.
pub fn brute_force_equilibrium(c: &ChainInstance) -> Vec<Vec<usize>> {
    let t_end = c.epochs();
    let mut policy: Vec<Vec<usize>> = vec![Vec::new(); t_end - 1];
    for t in (1..t_end).rev() {
        let chosen: Vec<usize> = (0..c.states[t - 1].len())
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for j in 0..c.controls.len() {
                    let v = path_objective(c, &policy, t, i, j);
                    if v < best.1 {
                        best = (j, v);
                    }
                }
                best.0
            })
            .collect();
        policy[t - 1] = chosen;
    }
    policy
}
