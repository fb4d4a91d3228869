use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("horizon must be ≥ 2 (got {0})")]
    Horizon(usize),

    #[error("state grid at t={t}: {reason}")]
    Grid { t: usize, reason: String },

    #[error("empty control interval at t={t}, x={x}: [{lo}, {hi}]")]
    EmptyControlInterval { t: usize, x: f64, lo: f64, hi: f64 },

    #[error("control {u} infeasible at t={t}, node {node} (interval [{lo}, {hi}])")]
    InfeasibleControl {
        t: usize,
        node: usize,
        u: f64,
        lo: f64,
        hi: f64,
    },

    #[error("noise scale {sigma} below floor {floor} at t={t}, x={x}, u={u}")]
    SigmaFloor {
        t: usize,
        x: f64,
        u: f64,
        sigma: f64,
        floor: f64,
    },

    #[error("non-stochastic row at t={t}, node {node}, control {control}: sum {sum}")]
    NonStochasticRow {
        t: usize,
        node: usize,
        control: usize,
        sum: f64,
    },

    #[error("kernel: {0}")]
    Kernel(String),

    #[error("non-finite {what} at t={t}, node {node}")]
    NonFinite {
        what: &'static str,
        t: usize,
        node: usize,
    },

    #[error("cost check failed: {0}")]
    Cost(String),

    #[error("operation not supported for this kernel: {0}")]
    Unsupported(&'static str),

    #[error("bounded function exceeds |V| ≤ {bound}: |V({x})| = {value}")]
    Unbounded { bound: f64, x: f64, value: f64 },

    #[error("policy: {0}")]
    Policy(String),

    #[error("bracket for m = E[H(x_T)] not found after {0} expansions")]
    Bracket(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("kernel cache: {0}")]
    Cache(String),
}
