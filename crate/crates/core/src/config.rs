//! Structured configuration documents (TOML or JSON).
//!
//! ```toml
//! family = "lq"            # lq | nonlinear_lq | mean_variance | mean_variance_chain
//!                          # | exp_utility | discrete_chain | tabulated
//! horizon = 3
//! [params]                 # family parameters, e.g. a, b, sigma for lq
//! a = 0.5
//! [state_grid]             # lower/upper/nodes/expanding, or explicit `epochs = [[...], ...]`
//! lower = -5.0
//! upper = 5.0
//! nodes = 121
//! [control]
//! lower = -5.0
//! upper = 5.0
//! nodes = 101
//! [kernel]                 # noise, quad_order, sigma_floor; matrices / drift / scale for tables
//! quad_order = 16
//! [costs]                  # family-specific (lq: anchor; tables: running, terminal, ...)
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::examples::{
    discrete_chain_model, exp_utility_model, lq_model, mv_model, mv_two_point_chain, nonlinear_lq_variant,
    tabulated_model, ControlSpec, CostTables, ExpUtilityParams, GridSpec, LqAnchor, LqParams, MeanVarianceParams,
    MvChainParams, TabulatedKernel,
};
use crate::model::{Horizon, Model};
use crate::noise::NoiseDensity;

const TOP_LEVEL_KEYS: [&str; 7] = ["family", "horizon", "params", "state_grid", "control", "kernel", "costs"];

/// Parses a config file; `.json` files are JSON, everything else TOML.
pub fn load_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    parse_config(&text, is_json)
}

pub fn parse_config(text: &str, json: bool) -> Result<Value> {
    let doc: Value = if json {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    };
    if !doc.is_object() {
        return Err(Error::Config("document must be a table".into()));
    }
    Ok(doc)
}

/// Serialization with sorted keys and no whitespace; identical for any
/// key order in the source document.
pub fn canonical_json(doc: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&map[k]))).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(doc).to_string()
}

/// Sets `section.key = value`, creating the section if needed.
pub fn override_key(doc: &mut Value, section: &str, key: &str, value: Value) {
    let root = doc.as_object_mut().expect("config documents are tables");
    let entry = root.entry(section).or_insert_with(|| Value::Object(Default::default()));
    if let Value::Object(map) = entry {
        map.insert(key.to_string(), value);
    }
}

fn section<T: DeserializeOwned>(doc: &Value, name: &str) -> Result<T> {
    let v = doc.get(name).cloned().unwrap_or(Value::Object(Default::default()));
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{name}: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UniformGrid {
    lower: f64,
    upper: f64,
    nodes: usize,
    #[serde(default = "yes")]
    expanding: bool,
}

fn yes() -> bool {
    true
}

impl From<UniformGrid> for GridSpec {
    fn from(g: UniformGrid) -> Self {
        GridSpec {
            lower: g.lower,
            upper: g.upper,
            nodes: g.nodes,
            expanding: g.expanding,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplicitGrid {
    epochs: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlDoc {
    lower: f64,
    upper: f64,
    nodes: usize,
}

impl From<ControlDoc> for ControlSpec {
    fn from(c: ControlDoc) -> Self {
        ControlSpec {
            lower: c.lower,
            upper: c.upper,
            nodes: c.nodes,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseDoc {
    #[serde(default)]
    noise: NoiseDensity,
    #[serde(default = "default_order")]
    quad_order: usize,
}

fn default_order() -> usize {
    16
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LqDoc {
    a: f64,
    b: f64,
    sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LqCosts {
    /// "state", or a number for a fixed terminal target.
    #[serde(default)]
    anchor: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MvDoc {
    r: f64,
    mu: f64,
    sigma: f64,
    gamma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MvChainDoc {
    #[serde(default = "z_lo")]
    z_lo: i64,
    #[serde(default = "z_hi")]
    z_hi: i64,
    #[serde(default = "u_max")]
    u_max: i64,
    gamma: f64,
}

fn z_lo() -> i64 {
    -1
}
fn z_hi() -> i64 {
    2
}
fn u_max() -> i64 {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpDoc {
    r: f64,
    mu: f64,
    sigma: f64,
    gamma: f64,
    #[serde(default)]
    beta: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainKernelDoc {
    matrices: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabulatedKernelDoc {
    drift: Vec<Vec<Vec<f64>>>,
    scale: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    noise: NoiseDensity,
    #[serde(default = "default_order")]
    quad_order: usize,
    #[serde(default = "default_floor")]
    sigma_floor: f64,
}

fn default_floor() -> f64 {
    crate::examples::DEFAULT_SIGMA_FLOOR
}

/// Builds and validates the model described by `doc`.
pub fn build_model(doc: &Value) -> Result<Model> {
    let map = doc.as_object().ok_or_else(|| Error::Config("document must be a table".into()))?;
    if let Some(k) = map.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    let family = map
        .get("family")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("missing string key `family`".into()))?;
    let horizon = map
        .get("horizon")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Config("missing integer key `horizon`".into()))? as usize;
    Horizon::new(horizon)?;

    match family {
        "lq" | "nonlinear_lq" => {
            let p: LqDoc = section(doc, "params")?;
            let k: NoiseDoc = section(doc, "kernel")?;
            let anchor = match section::<LqCosts>(doc, "costs")?.anchor {
                None => LqAnchor::State,
                Some(Value::String(s)) if s == "state" => LqAnchor::State,
                Some(Value::Number(n)) => LqAnchor::Fixed(n.as_f64().unwrap_or(0.0)),
                Some(other) => return Err(Error::Config(format!("costs.anchor: expected \"state\" or a number, got {other}"))),
            };
            let params = LqParams {
                a: p.a,
                b: p.b,
                sigma: p.sigma,
                horizon,
                grid: section::<UniformGrid>(doc, "state_grid")?.into(),
                control: section::<ControlDoc>(doc, "control")?.into(),
                noise: k.noise,
                quad_order: k.quad_order,
                anchor,
            };
            if family == "lq" {
                lq_model(&params)
            } else {
                nonlinear_lq_variant(&params)
            }
        }
        "mean_variance" => {
            let p: MvDoc = section(doc, "params")?;
            let k: NoiseDoc = section(doc, "kernel")?;
            if k.noise != NoiseDensity::Gaussian {
                return Err(Error::Config("mean_variance uses Gaussian returns".into()));
            }
            mv_model(&MeanVarianceParams {
                r: p.r,
                mu: p.mu,
                sigma: p.sigma,
                gamma: p.gamma,
                horizon,
                grid: section::<UniformGrid>(doc, "state_grid")?.into(),
                control: section::<ControlDoc>(doc, "control")?.into(),
                quad_order: k.quad_order,
            })
        }
        "mean_variance_chain" => {
            let p: MvChainDoc = section(doc, "params")?;
            mv_two_point_chain(&MvChainParams {
                z_lo: p.z_lo,
                z_hi: p.z_hi,
                u_max: p.u_max,
                gamma: p.gamma,
                horizon,
            })
        }
        "exp_utility" => {
            let p: ExpDoc = section(doc, "params")?;
            let k: NoiseDoc = section(doc, "kernel")?;
            exp_utility_model(&ExpUtilityParams {
                r: p.r,
                mu: p.mu,
                sigma: p.sigma,
                gamma: p.gamma,
                beta: p.beta,
                horizon,
                grid: section::<UniformGrid>(doc, "state_grid")?.into(),
                control: section::<ControlDoc>(doc, "control")?.into(),
                quad_order: k.quad_order,
            })
        }
        "discrete_chain" => {
            let grid: ExplicitGrid = section(doc, "state_grid")?;
            check_epochs(&grid, horizon)?;
            let k: ChainKernelDoc = section(doc, "kernel")?;
            let costs: CostTables = section(doc, "costs")?;
            discrete_chain_model(grid.epochs, section::<ControlDoc>(doc, "control")?.into(), k.matrices, &costs)
        }
        "tabulated" => {
            let grid: ExplicitGrid = section(doc, "state_grid")?;
            check_epochs(&grid, horizon)?;
            let k: TabulatedKernelDoc = section(doc, "kernel")?;
            let costs: CostTables = section(doc, "costs")?;
            tabulated_model(
                grid.epochs,
                section::<ControlDoc>(doc, "control")?.into(),
                &TabulatedKernel {
                    drift: k.drift,
                    scale: k.scale,
                    noise: k.noise,
                    sigma_floor: k.sigma_floor,
                    quad_order: k.quad_order,
                },
                &costs,
            )
        }
        other => Err(Error::Config(format!("unknown family `{other}`"))),
    }
}

fn check_epochs(grid: &ExplicitGrid, horizon: usize) -> Result<()> {
    if grid.epochs.len() != horizon {
        return Err(Error::Config(format!(
            "state_grid.epochs has {} grids but horizon is {horizon}",
            grid.epochs.len()
        )));
    }
    Ok(())
}

/// Quadrature order declared by the model's kernel (2 for chains).
pub fn quad_order(model: &Model) -> usize {
    model.kernel.as_additive().map_or(2, |k| k.quad_order)
}
