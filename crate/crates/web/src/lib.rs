//! Browser bindings: three small experiments, each returning JSON for the
//! page in `www/` to plot. The plain functions are usable (and tested)
//! natively; the `#[wasm_bindgen]` wrappers only serialize.

use std::sync::Arc;

use markov_equilibrium::error::Result;
use markov_equilibrium::evaluate::{solve_naive, solve_precommitment, verify_equilibrium, ProbeControls};
use markov_equilibrium::examples::{
    lq_model, mv_closed_form, mv_model, ControlSpec, GridSpec, LqAnchor, LqParams, MeanVarianceParams,
};
use markov_equilibrium::kernel::{setwise_continuity_probe, tv_distance, Interval, StepFunction, DEFAULT_TV_PANELS};
use markov_equilibrium::model::AdditiveNoise;
use markov_equilibrium::noise::NoiseDensity;
use markov_equilibrium::solver::{solve, SolverOptions};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Equilibrium against closed-form controls for a small mean–variance problem.
#[derive(Debug, Serialize)]
pub struct MvDemo {
    pub epochs: Vec<usize>,
    /// Equilibrium control at the middle wealth node, per epoch.
    pub equilibrium: Vec<f64>,
    pub closed_form: Vec<f64>,
    /// Spread of the equilibrium control across wealth nodes, per epoch.
    pub spread: Vec<f64>,
}

pub fn mean_variance(r: f64, mu: f64, sigma: f64, gamma: f64, horizon: usize) -> Result<MvDemo> {
    // coarser than the CLI default but still finer than the noise scale σu
    // on the widest epoch; below that the kernel rows collapse onto nodes
    let p = MeanVarianceParams {
        r,
        mu,
        sigma,
        gamma,
        horizon,
        grid: GridSpec {
            nodes: 121,
            ..MeanVarianceParams::default().grid
        },
        // u = 0 would remove the noise entirely
        control: ControlSpec {
            lower: 0.1,
            upper: 10.0,
            nodes: 201,
        },
        ..MeanVarianceParams::default()
    };
    let model = mv_model(&p)?;
    let dk = model.discretize()?;
    let sol = solve(&model, &dk, &SolverOptions::default())?;
    let oracle = mv_closed_form(&p)?;
    let mut out = MvDemo {
        epochs: Vec::new(),
        equilibrium: Vec::new(),
        closed_form: Vec::new(),
        spread: Vec::new(),
    };
    for (t, us) in sol.policy.epochs() {
        let (lo, hi) = us.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)));
        out.epochs.push(t);
        out.equilibrium.push(us[us.len() / 2]);
        out.closed_form.push(oracle.control(t));
        out.spread.push(hi - lo);
    }
    Ok(out)
}

/// First-epoch policies of the three notions of optimality on an LQ problem.
#[derive(Debug, Serialize)]
pub struct LqDemo {
    pub states: Vec<f64>,
    pub equilibrium: Vec<f64>,
    pub precommitment: Vec<f64>,
    pub naive: Vec<f64>,
    /// Largest gain any self finds by deviating from the naive policy.
    pub naive_gap: f64,
}

pub fn lq_policies(a: f64, sigma: f64, drifting_target: bool) -> Result<LqDemo> {
    let p = LqParams {
        a,
        sigma,
        grid: GridSpec {
            nodes: 61,
            ..LqParams::default().grid
        },
        control: ControlSpec {
            nodes: 81,
            ..LqParams::default().control
        },
        anchor: if drifting_target { LqAnchor::State } else { LqAnchor::Fixed(0.0) },
        ..LqParams::default()
    };
    let model = lq_model(&p)?;
    let dk = model.discretize()?;
    let opts = SolverOptions::default();
    let eq = solve(&model, &dk, &opts)?.policy;
    let states = model.grids.at(1).to_vec();
    let pre = solve_precommitment(&model, &dk, 1, states.len() / 2, &opts)?.policy;
    let naive = solve_naive(&model, &dk, &opts)?;
    let naive_gap = verify_equilibrium(&model, &dk, &naive, ProbeControls::ControlGrid, 1e-6)?.worst_gap;
    Ok(LqDemo {
        equilibrium: eq.at(1).to_vec(),
        precommitment: pre.at(1).to_vec(),
        naive: naive.at(1).to_vec(),
        states,
        naive_gap,
    })
}

/// Distance between next-state laws as the control moves toward `u`, in the
/// L1 norm (so between 0 and 2).
#[derive(Debug, Serialize)]
pub struct TvDemo {
    pub offsets: Vec<f64>,
    /// `x' = x/2 + u + σW`: smooth in `u`, distance shrinks with the offset.
    pub additive: Vec<f64>,
    /// `x' = uW` with `V = 1_{0}`: `|E_{u+d} V − E_u V|`, which stays at 1
    /// when `u = 0` (a point mass against laws with a density).
    pub degenerate: Vec<f64>,
}

pub fn tv_profile(sigma: f64, u: f64) -> Result<TvDemo> {
    let model = lq_model(&LqParams {
        sigma,
        ..LqParams::default()
    })?;
    let offsets: Vec<f64> = (0..12).map(|k| 2.0 * 0.5f64.powi(k)).collect();
    let additive = offsets
        .iter()
        .map(|&d| tv_distance(&model.kernel, 1, 0.0, u + d, u, DEFAULT_TV_PANELS))
        .collect::<Result<_>>()?;
    let scaled = AdditiveNoise::new(
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, u: f64| u.abs()),
        NoiseDensity::Gaussian,
        1e-3,
        16,
    );
    let seq: Vec<f64> = offsets.iter().map(|d| u + d).collect();
    let at_zero = [StepFunction::indicator(Interval::point(0.0))];
    let probe = setwise_continuity_probe(&scaled, 1, 0.0, u, &seq, &at_zero, 1.0, DEFAULT_TV_PANELS)?;
    let degenerate = probe.entries.iter().map(|e| e.gap).collect();
    Ok(TvDemo {
        offsets,
        additive,
        degenerate,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = meanVariance)]
pub fn mean_variance_js(r: f64, mu: f64, sigma: f64, gamma: f64, horizon: usize) -> std::result::Result<String, JsError> {
    to_js(mean_variance(r, mu, sigma, gamma, horizon))
}

#[wasm_bindgen(js_name = lqPolicies)]
pub fn lq_policies_js(a: f64, sigma: f64, drifting_target: bool) -> std::result::Result<String, JsError> {
    to_js(lq_policies(a, sigma, drifting_target))
}

#[wasm_bindgen(js_name = tvProfile)]
pub fn tv_profile_js(sigma: f64, u: f64) -> std::result::Result<String, JsError> {
    to_js(tv_profile(sigma, u))
}
