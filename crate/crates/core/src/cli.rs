//! The `meq` command line: `solve`, `verify` and `compare`.
//!
//! Exit codes: 0 success, 2 configuration or I/O error, 3 solver failure,
//! 4 certification failure. CSV headers (fixed):
//!
//! | file              | columns                                                                  |
//! |-------------------|--------------------------------------------------------------------------|
//! | `policy.csv`      | `t,node,state,control`                                                   |
//! | `values.csv`      | `t,node,state,V`                                                         |
//! | `diagnostics.csv` | `t,node,state,refined,boundary_hit,levelset_flag,clamped_mass`           |
//! | `deviation.csv`   | `t,node_index,state,control,J_dev,V,gap`                                 |
//! | `compare.csv`     | `t,node,state,equilibrium,precommitment,naive,naive_gap,J1_equilibrium,J1_precommitment,J1_naive` |
//!
//! The `J1_*` columns are filled on `t = 1` rows only. Floats are written
//! in shortest round-trip form, so reruns with the same inputs produce
//! identical files whatever the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{build_model, canonical_json, load_config, override_key, quad_order};
use crate::error::Error;
use crate::evaluate::{
    eval_objective_exact, eval_objective_mc, solve_naive, solve_precommitment, verify_equilibrium, ProbeControls,
};
use crate::kernel::{read_cache, write_cache, DiscretizedKernel};
use crate::model::{validate_assumptions, AssumptionReport, Model};
use crate::par::with_workers;
use crate::policy::Policy;
use crate::solver::{solve, SolverOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_UNCERTIFIED: u8 = 4;

const ASSUMPTION_SAMPLES: usize = 2000;

#[derive(Debug, Parser)]
#[command(name = "meq", version, about = "Markov equilibrium policies for time-inconsistent control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the equilibrium policy and write policy/value tables.
    Solve(SolveArgs),
    /// Re-check a stored solution with the one-step deviation test.
    Verify(VerifyArgs),
    /// Compare equilibrium, precommitment and naive policies.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model config (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Override the kernel quadrature order.
    #[arg(long)]
    pub quad_order: Option<usize>,
    /// Override the number of control nodes M_u.
    #[arg(long)]
    pub controls: Option<usize>,
    /// Tolerance of the bracketed control refinement.
    #[arg(long, default_value_t = 1e-7)]
    pub u_tol: f64,
    /// Seed for the sampled assumption checks and Monte Carlo spot checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Binary kernel cache; reused when its hash matches the config.
    #[arg(long)]
    pub kernel_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding policy.csv and values.csv.
    #[arg(long)]
    pub solution: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Where deviation.csv goes (default: the solution directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Monte Carlo paths for the value spot check (0 disables it).
    #[arg(long, default_value_t = 2000)]
    pub mc_paths: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Node of X_1 whose self's precommitment plan is reported (default: middle).
    #[arg(long)]
    pub x0_node: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

/// Runs a parsed command line and returns its exit code.
pub fn run(cli: &Cli) -> u8 {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Solver(String),
    Uncertified(String),
}

impl Failure {
    fn report(self) -> u8 {
        let (code, msg) = match self {
            Failure::Config(m) => (EXIT_CONFIG, m),
            Failure::Solver(m) => (EXIT_SOLVER, m),
            Failure::Uncertified(m) => (EXIT_UNCERTIFIED, m),
        };
        eprintln!("error: {msg}");
        code
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn solver_err(e: Error) -> Failure {
    Failure::Solver(e.to_string())
}

fn finish(r: Result<(), Failure>) -> u8 {
    match r {
        Ok(()) => EXIT_OK,
        Err(f) => f.report(),
    }
}

#[derive(Debug, Serialize)]
pub struct SolverSettings {
    pub quad_order: usize,
    /// Largest control-grid size over all epochs.
    pub controls: usize,
    pub u_tol: f64,
    pub tol: Option<f64>,
}

/// Provenance of one CLI run, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config: String,
    /// SHA-256 of the canonical (sorted-key) config after overrides.
    pub config_hash: String,
    pub model: String,
    pub horizon: usize,
    pub solver: SolverSettings,
    /// Seeds the sampled assumption checks and Monte Carlo spot checks.
    pub seed: u64,
    pub workers: usize,
    pub assumptions: AssumptionReport,
    pub timings_ms: BTreeMap<&'static str, f64>,
    pub artifacts: Vec<String>,
}

struct Prepared {
    model: Model,
    dk: DiscretizedKernel,
    hash: [u8; 32],
    assumptions: AssumptionReport,
    timings: BTreeMap<&'static str, f64>,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn load_document(common: &CommonArgs) -> Result<Value, Failure> {
    let mut doc = load_config(&common.config).map_err(config_err)?;
    if let Some(q) = common.quad_order {
        override_key(&mut doc, "kernel", "quad_order", q.into());
    }
    if let Some(m) = common.controls {
        override_key(&mut doc, "control", "nodes", m.into());
    }
    Ok(doc)
}

fn prepare(common: &CommonArgs) -> Result<Prepared, Failure> {
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let doc = load_document(common)?;
    let hash: [u8; 32] = Sha256::digest(canonical_json(&doc).as_bytes()).into();
    let model = build_model(&doc).map_err(config_err)?;
    let assumptions = validate_assumptions(&model, ASSUMPTION_SAMPLES, common.seed);
    for note in &assumptions.notes {
        eprintln!("note: {note}");
    }
    timings.insert("build", elapsed_ms(start));

    let start = Instant::now();
    let order = quad_order(&model);
    let cached = common
        .kernel_cache
        .as_deref()
        .filter(|p| p.exists())
        .map(|p| read_cache(p, &model, &hash, order));
    let dk = match cached {
        Some(Ok(dk)) => dk,
        other => {
            if let Some(Err(e)) = other {
                eprintln!("note: rebuilding kernel ({e})");
            }
            let dk = model.discretize().map_err(config_err)?;
            if let Some(path) = &common.kernel_cache {
                write_cache(&dk, path, &hash).map_err(config_err)?;
            }
            dk
        }
    };
    timings.insert("discretize", elapsed_ms(start));
    Ok(Prepared {
        model,
        dk,
        hash,
        assumptions,
        timings,
    })
}

fn solver_options(common: &CommonArgs) -> Result<SolverOptions, Failure> {
    if !(common.u_tol > 0.0) {
        return Err(Failure::Config(format!("--u-tol must be positive (got {})", common.u_tol)));
    }
    Ok(SolverOptions {
        u_tol: common.u_tol,
        ..SolverOptions::default()
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn max_controls(dk: &DiscretizedKernel) -> usize {
    (1..dk.epochs()).map(|t| dk.n_controls(t)).max().unwrap_or(0)
}

fn manifest(
    command: &'static str,
    common: &CommonArgs,
    prep: &Prepared,
    tol: Option<f64>,
    artifacts: Vec<String>,
) -> RunManifest {
    RunManifest {
        command,
        config: common.config.display().to_string(),
        config_hash: hex(&prep.hash),
        model: prep.model.name.clone(),
        horizon: prep.model.epochs(),
        solver: SolverSettings {
            quad_order: prep.dk.options().quad_order,
            controls: max_controls(&prep.dk),
            u_tol: common.u_tol,
            tol,
        },
        seed: common.seed,
        workers: common.workers,
        assumptions: prep.assumptions.clone(),
        timings_ms: prep.timings.clone(),
        artifacts,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<(), Failure> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRow {
    t: usize,
    node: usize,
    state: f64,
    control: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ValueRow {
    t: usize,
    node: usize,
    state: f64,
    #[serde(rename = "V")]
    v: f64,
}

#[derive(Debug, Serialize)]
struct DiagnosticsRow {
    t: usize,
    node: usize,
    state: f64,
    refined: bool,
    boundary_hit: bool,
    levelset_flag: bool,
    clamped_mass: f64,
}

#[derive(Debug, Serialize)]
struct CompareRow {
    t: usize,
    node: usize,
    state: f64,
    equilibrium: f64,
    precommitment: f64,
    naive: f64,
    naive_gap: f64,
    #[serde(rename = "J1_equilibrium")]
    j1_equilibrium: Option<f64>,
    #[serde(rename = "J1_precommitment")]
    j1_precommitment: Option<f64>,
    #[serde(rename = "J1_naive")]
    j1_naive: Option<f64>,
}

fn node_rows<'a>(model: &'a Model, policy: &'a Policy) -> impl Iterator<Item = (usize, usize, f64, f64)> + 'a {
    policy
        .epochs()
        .flat_map(move |(t, us)| model.grids.at(t).iter().zip(us).enumerate().map(move |(i, (&x, &u))| (t, i, x, u)))
}

/// Solves the configured model and writes `policy.csv`, `values.csv`,
/// `diagnostics.csv` and `manifest.json` into `--out`.
pub fn cmd_solve(args: &SolveArgs) -> u8 {
    finish(with_workers(args.common.workers, || solve_into(args)))
}

fn solve_into(args: &SolveArgs) -> Result<(), Failure> {
    let mut prep = prepare(&args.common)?;
    let options = solver_options(&args.common)?;
    let start = Instant::now();
    let sol = solve(&prep.model, &prep.dk, &options).map_err(solver_err)?;
    prep.timings.insert("solve", elapsed_ms(start));
    let model = &prep.model;

    ensure_dir(&args.out)?;
    write_csv(
        &args.out.join("policy.csv"),
        node_rows(model, &sol.policy).map(|(t, node, state, control)| PolicyRow { t, node, state, control }),
    )?;
    write_csv(
        &args.out.join("values.csv"),
        node_rows(model, &sol.policy).map(|(t, node, state, _)| ValueRow {
            t,
            node,
            state,
            v: sol.value(t, node),
        }),
    )?;
    let diag = &sol.diagnostics;
    write_csv(
        &args.out.join("diagnostics.csv"),
        node_rows(model, &sol.policy).map(|(t, node, state, _)| DiagnosticsRow {
            t,
            node,
            state,
            refined: diag.refined[t - 1][node],
            boundary_hit: diag.boundary_hits.binary_search(&(t, node)).is_ok(),
            levelset_flag: diag.levelset_flags[t - 1][node],
            clamped_mass: diag.clamped_mass[t - 1],
        }),
    )?;
    if !diag.boundary_hits.is_empty() {
        eprintln!("warning: {} node(s) minimize at a control bound", diag.boundary_hits.len());
    }
    let artifacts = ["policy.csv", "values.csv", "diagnostics.csv"].map(String::from).to_vec();
    write_manifest(&args.out, &manifest("solve", &args.common, &prep, None, artifacts))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Places `(t, node, state, value)` rows on the model grids, checking
/// that every decision node appears exactly once at its grid state.
fn tabulate(model: &Model, rows: impl Iterator<Item = (usize, usize, f64, f64)>, what: &str) -> Result<Vec<Vec<f64>>, Failure> {
    let t_end = model.epochs();
    let mut table: Vec<Vec<Option<f64>>> = (1..t_end).map(|t| vec![None; model.grids.at(t).len()]).collect();
    for (t, node, state, value) in rows {
        let slot = table
            .get_mut(t.wrapping_sub(1))
            .and_then(|r| r.get_mut(node))
            .ok_or_else(|| Failure::Config(format!("{what}: no decision node (t={t}, node={node})")))?;
        let x = model.grids.at(t)[node];
        if (x - state).abs() > 1e-9 * (1.0 + x.abs()) {
            return Err(Failure::Config(format!(
                "{what}: state {state} at (t={t}, node={node}) does not match the grid value {x}"
            )));
        }
        if slot.replace(value).is_some() {
            return Err(Failure::Config(format!("{what}: duplicate row (t={t}, node={node})")));
        }
    }
    table
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            r.into_iter()
                .enumerate()
                .map(|(i, v)| v.ok_or_else(|| Failure::Config(format!("{what}: missing row (t={}, node={i})", k + 1))))
                .collect()
        })
        .collect()
}

/// Reads a stored solution, writes `deviation.csv` and certifies the
/// policy at `--tol`.
pub fn cmd_verify(args: &VerifyArgs) -> u8 {
    finish(with_workers(args.common.workers, || verify_into(args)))
}

fn verify_into(args: &VerifyArgs) -> Result<(), Failure> {
    let policy_path = args.solution.join("policy.csv");
    let values_path = args.solution.join("values.csv");
    for p in [&policy_path, &values_path] {
        if !p.is_file() {
            return Err(Failure::Config(format!("missing solution file {}", p.display())));
        }
    }
    let prep = prepare(&args.common)?;
    let model = &prep.model;
    let controls = tabulate(
        model,
        read_rows::<PolicyRow>(&policy_path)?.into_iter().map(|r| (r.t, r.node, r.state, r.control)),
        "policy.csv",
    )?;
    let values = tabulate(
        model,
        read_rows::<ValueRow>(&values_path)?.into_iter().map(|r| (r.t, r.node, r.state, r.v)),
        "values.csv",
    )?;
    let policy = Policy::full(controls);
    policy.check(model).map_err(config_err)?;

    let report = verify_equilibrium(model, &prep.dk, &policy, ProbeControls::ControlGrid, args.tol).map_err(solver_err)?;
    let out = args.out.clone().unwrap_or_else(|| args.solution.clone());
    ensure_dir(&out)?;
    write_csv(&out.join("deviation.csv"), &report.rows)?;

    let stale = report
        .rows
        .iter()
        .map(|r| (r.v - values[r.t - 1][r.node]).abs())
        .fold(0.0, f64::max);
    if stale > 1e-8 {
        eprintln!("warning: values.csv differs from the recomputed values by up to {stale:e}");
    }
    if args.mc_paths > 0 && model.kernel.as_additive().is_some() {
        let i = model.grids.at(1).len() / 2;
        let x = model.grids.at(1)[i];
        let mc = eval_objective_mc(model, &policy, 1, x, args.mc_paths.max(100), args.common.seed).map_err(solver_err)?;
        println!(
            "monte carlo J_1(x={x}): {:.6} ± {:.6} (grid value {:.6})",
            mc.estimate,
            mc.stderr,
            values[0][i]
        );
    }
    let (t, node, u) = report.argmax;
    println!(
        "worst gap {:e} at t={t}, node={node} (probe u={u}); probes: control grid; tol {:e}",
        report.worst_gap, args.tol
    );
    if report.certified() {
        println!("certified");
        Ok(())
    } else {
        Err(Failure::Uncertified(format!(
            "not an equilibrium at tol {:e}: gap {:e} at t={t}, node={node}",
            args.tol, report.worst_gap
        )))
    }
}

/// Solves the equilibrium, the precommitment plan of the `(1, x0)` self
/// and the naive policy, and writes `compare.csv` and `manifest.json`.
pub fn cmd_compare(args: &CompareArgs) -> u8 {
    finish(with_workers(args.common.workers, || compare_into(args)))
}

fn compare_into(args: &CompareArgs) -> Result<(), Failure> {
    let mut prep = prepare(&args.common)?;
    let options = solver_options(&args.common)?;
    let model = &prep.model;
    let dk = &prep.dk;
    let x0 = args.x0_node.unwrap_or(model.grids.at(1).len() / 2);
    if x0 >= model.grids.at(1).len() {
        return Err(Failure::Config(format!("--x0-node {x0} outside X_1")));
    }

    let start = Instant::now();
    let eq = solve(model, dk, &options).map_err(solver_err)?.policy;
    let pre = solve_precommitment(model, dk, 1, x0, &options).map_err(solver_err)?.policy;
    let naive = solve_naive(model, dk, &options).map_err(solver_err)?;
    let naive_report = verify_equilibrium(model, dk, &naive, ProbeControls::ControlGrid, args.tol).map_err(solver_err)?;
    let j1 = |p: &Policy| -> Result<Vec<f64>, Failure> {
        (0..model.grids.at(1).len())
            .map(|i| eval_objective_exact(model, dk, p, 1, i).map_err(solver_err))
            .collect()
    };
    let (j_eq, j_pre, j_naive) = (j1(&eq)?, j1(&pre)?, j1(&naive)?);
    let elapsed = elapsed_ms(start);

    let rows: Vec<CompareRow> = node_rows(model, &eq)
        .zip(&naive_report.rows)
        .map(|((t, node, state, u), dev)| CompareRow {
            t,
            node,
            state,
            equilibrium: u,
            precommitment: pre.control(t, node),
            naive: naive.control(t, node),
            naive_gap: dev.gap,
            j1_equilibrium: (t == 1).then(|| j_eq[node]),
            j1_precommitment: (t == 1).then(|| j_pre[node]),
            j1_naive: (t == 1).then(|| j_naive[node]),
        })
        .collect();
    ensure_dir(&args.out)?;
    write_csv(&args.out.join("compare.csv"), &rows)?;

    let pairs = [
        ("equilibrium", &eq, "precommitment", &pre),
        ("equilibrium", &eq, "naive", &naive),
        ("precommitment", &pre, "naive", &naive),
    ];
    let mut identical = true;
    for (na, a, nb, b) in pairs {
        if let Some((t, node)) = first_difference(dk, a, b) {
            identical = false;
            println!(
                "policies differ at t={t}, node={node}: {na} {} vs {nb} {}",
                a.control(t, node),
                b.control(t, node)
            );
        }
    }
    if identical {
        println!("policies identical");
    }
    println!(
        "J_1 at x0 node {x0}: equilibrium {:.9}, precommitment {:.9}, naive {:.9}; naive worst gap {:e}",
        j_eq[x0], j_pre[x0], j_naive[x0], naive_report.worst_gap
    );

    prep.timings.insert("compare", elapsed);
    let m = manifest("compare", &args.common, &prep, Some(args.tol), vec!["compare.csv".into()]);
    write_manifest(&args.out, &m)
}

/// First `(t, node)` where the policies differ at grid resolution: by
/// more than the local control-grid spacing for additive kernels (whose
/// controls are refined between nodes), at all for chains.
pub fn first_difference(dk: &DiscretizedKernel, a: &Policy, b: &Policy) -> Option<(usize, usize)> {
    a.epochs().find_map(|(t, us)| {
        us.iter().enumerate().find_map(|(i, &u)| {
            let tol = if dk.is_chain() {
                0.0
            } else {
                let nodes = dk.controls(t, i);
                let step = nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
                if step.is_finite() { step } else { 0.0 }
            };
            ((u - b.control(t, i)).abs() > tol + 1e-12).then_some((t, i))
        })
    })
}
