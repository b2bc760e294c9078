//! Experiment configuration files.
//!
//! A file holds one experiment object or an array of them:
//!
//! ```json
//! {
//!   "id": "ou-logcosh",
//!   "seed": 7,
//!   "scenario": { "kind": "gaussian", "dim": 2, "a": [2, 0, 0, 1], "b": [1, 0, 0, 3] }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use heatflow::applications::{Expectation, SetShape};
use heatflow::potentials::{PerturbationSpec, RadialProfile, StructuredPotentialSpec, SubspaceDecomposition};
use heatflow::semigroup::AxisRole;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names the output subdirectory; `[A-Za-z0-9_.-]+`.
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    /// Output root for this experiment; the CLI flag and env var take precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioConfig {
    Semigroup(SemigroupConfig),
    Flow(FlowConfig),
    Brenier1d(BrenierConfig),
    Gaussian(GaussianConfig),
    Correlation(CorrelationConfig),
    AcceptanceSuite(SuiteConfig),
}

impl ScenarioConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioConfig::Semigroup(_) => "semigroup",
            ScenarioConfig::Flow(_) => "flow",
            ScenarioConfig::Brenier1d(_) => "brenier1d",
            ScenarioConfig::Gaussian(_) => "gaussian",
            ScenarioConfig::Correlation(_) => "correlation",
            ScenarioConfig::AcceptanceSuite(_) => "acceptance-suite",
        }
    }
}

pub const KINDS: [&str; 6] = ["semigroup", "flow", "brenier1d", "gaussian", "correlation", "acceptance-suite"];

/// Box `[−extent, extent]` per full axis, `[0, extent]` per radial axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent: f64,
    pub h: f64,
    /// Defaults to one coordinate axis per ambient dimension.
    #[serde(default)]
    pub roles: Vec<AxisRole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupConfig {
    pub u: StructuredPotentialSpec,
    pub v: PerturbationSpec,
    pub grid: GridConfig,
    pub dt: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    #[serde(default)]
    pub tolerances: SemigroupTolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemigroupTolerances {
    pub mass: f64,
    pub max_principle: f64,
    pub bounds: f64,
    /// Defaults to `10h`.
    pub log_concavity: Option<f64>,
    /// Width of the layer next to the reflecting wall left out of the Hessian check.
    pub wall_margin: f64,
}

impl Default for SemigroupTolerances {
    fn default() -> Self {
        Self { mass: 1e-10, max_principle: 1e-12, bounds: 1e-6, log_concavity: None, wall_margin: 2.0 }
    }
}

/// `count` evenly spaced points on `[lo, hi]` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedMesh {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl SeedMesh {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..self.count).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64).collect()
    }

    /// Tensor mesh in `dim` dimensions, row-major.
    pub fn tensor(&self, dim: usize) -> Vec<f64> {
        let p = self.points();
        match dim {
            1 => p,
            _ => p.iter().flat_map(|a| p.iter().flat_map(move |b| [*a, *b])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub u: StructuredPotentialSpec,
    pub v: PerturbationSpec,
    pub grid: GridConfig,
    pub dt: f64,
    #[serde(default = "default_flow_horizon")]
    pub horizon: f64,
    /// Half-widths of the window where the advection field is stored.
    pub window: Vec<f64>,
    pub seeds: SeedMesh,
    #[serde(default)]
    pub forward: Option<SeedMesh>,
    #[serde(default)]
    pub segment_steps: Option<usize>,
    #[serde(default)]
    pub check_every: Option<usize>,
    #[serde(default = "default_pairs")]
    pub lipschitz_pairs: usize,
    #[serde(default)]
    pub tolerances: FlowTolerances,
}

fn default_flow_horizon() -> f64 {
    400.0
}

fn default_pairs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTolerances {
    /// Allowed excess of the Lipschitz constant over 1.
    pub lipschitz: f64,
    pub round_trip: f64,
    pub pushforward: f64,
}

impl Default for FlowTolerances {
    fn default() -> Self {
        Self { lipschitz: 5e-3, round_trip: 1e-6, pushforward: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrenierConfig {
    /// Source `r^{n−1}e^{−ρ}` on the half line (`dim = 1`: the full line).
    pub rho: RadialProfile,
    /// Non-decreasing radial perturbation `v(r)`.
    pub v: RadialProfile,
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub tolerances: BrenierTolerances,
}

fn default_samples() -> usize {
    2001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrenierTolerances {
    pub lipschitz: f64,
    pub identity: f64,
}

impl Default for BrenierTolerances {
    fn default() -> Self {
        Self { lipschitz: 1e-4, identity: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub dim: usize,
    /// Row-major `U = ½⟨Ax, x⟩`.
    pub a: Vec<f64>,
    /// Row-major `V = ½⟨Bx, x⟩`.
    pub b: Vec<f64>,
    #[serde(default = "default_gaussian_dt")]
    pub dt: f64,
    #[serde(default = "default_gaussian_stop")]
    pub stop: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub tolerances: GaussianTolerances,
}

fn default_gaussian_dt() -> f64 {
    1e-3
}

fn default_gaussian_stop() -> f64 {
    1e-8
}

fn default_record_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianTolerances {
    pub invariant: f64,
    pub contraction: f64,
    pub recovery: f64,
}

impl Default for GaussianTolerances {
    fn default() -> Self {
        Self { invariant: 1e-6, contraction: 1e-8, recovery: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    #[serde(default = "default_samples_mc")]
    pub n: usize,
    /// Names from `list-scenarios`, or `"all"`.
    #[serde(default)]
    pub shipped: Vec<String>,
    #[serde(default)]
    pub custom: Vec<CustomCorrelation>,
}

fn default_samples_mc() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCorrelation {
    pub name: String,
    pub potential: StructuredPotentialSpec,
    /// Star-shaped set.
    pub a: SetShape,
    /// Row-major ellipsoid metric on `E₀` for `a`.
    #[serde(default)]
    pub a_metric: Option<Vec<f64>>,
    /// Convex symmetric set.
    pub b: SetShape,
    #[serde(default = "default_expectation")]
    pub expectation: Expectation,
}

fn default_expectation() -> Expectation {
    Expectation::Nonnegative
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Criterion ids; empty runs all.
    #[serde(default)]
    pub criteria: Vec<usize>,
    #[serde(default = "one")]
    pub tolerance_scale: f64,
    /// Per-criterion tolerance factors keyed by criterion id.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl SuiteConfig {
    pub fn override_factors(&self) -> Result<BTreeMap<usize, f64>, String> {
        self.overrides
            .iter()
            .map(|(k, v)| k.trim().parse::<usize>().map(|id| (id, *v)).map_err(|_| format!("override key {k:?} is not a criterion id")))
            .collect()
    }
}

fn one() -> f64 {
    1.0
}

/// Reads a file holding one experiment or an array of experiments.
pub fn load(path: &Path) -> Result<Vec<ExperimentConfig>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Vec<ExperimentConfig>, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("not valid JSON: {e}"))?;
    let list = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    if list.is_empty() {
        return Err("config holds no experiments".into());
    }
    let mut out = Vec::with_capacity(list.len());
    for (k, item) in list.into_iter().enumerate() {
        let exp: ExperimentConfig = serde_json::from_value(item).map_err(|e| format!("experiment {k}: {e}"))?;
        out.push(exp);
    }
    let mut seen = BTreeSet::new();
    for exp in &out {
        if !seen.insert(exp.id.clone()) {
            return Err(format!("duplicate experiment id {:?}", exp.id));
        }
        exp.validate().map_err(|e| format!("experiment {:?}: {e}", exp.id))?;
    }
    Ok(out)
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be positive and finite, got {v}"))
    }
}

impl GridConfig {
    fn validate(&self, dec: &SubspaceDecomposition) -> Result<(), String> {
        positive("grid.extent", self.extent)?;
        positive("grid.h", self.h)?;
        if self.extent / self.h < 4.0 {
            return Err("grid needs at least four cells per axis".into());
        }
        let axes = if self.roles.is_empty() { dec.dim() } else { self.roles.len() };
        if !(1..=2).contains(&axes) {
            return Err(format!("grids have one or two axes, this one needs {axes}"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Schema checks beyond what deserialization enforces; builds every
    /// potential and set once so that errors surface before any output.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c)) {
            return Err(format!("id {:?} must match [A-Za-z0-9_.-]+", self.id));
        }
        let e = |err: heatflow::Error| err.to_string();
        match &self.scenario {
            ScenarioConfig::Semigroup(c) => {
                let u = c.u.build().map_err(e)?;
                c.v.build(u.decomposition()).map_err(e)?;
                c.grid.validate(u.decomposition())?;
                positive("dt", c.dt)?;
                positive("horizon", c.horizon)?;
                if c.times.iter().any(|t| !(t.is_finite() && *t >= 0.0 && *t <= c.horizon)) {
                    return Err("snapshot times must lie in [0, horizon]".into());
                }
                let t = &c.tolerances;
                positive("tolerances.mass", t.mass)?;
                positive("tolerances.max_principle", t.max_principle)?;
                positive("tolerances.bounds", t.bounds)?;
                if let Some(lc) = t.log_concavity {
                    positive("tolerances.log_concavity", lc)?;
                }
                if !(t.wall_margin.is_finite() && t.wall_margin >= 0.0) {
                    return Err("tolerances.wall_margin must be nonnegative".into());
                }
            }
            ScenarioConfig::Flow(c) => {
                let u = c.u.build().map_err(e)?;
                c.v.build(u.decomposition()).map_err(e)?;
                c.grid.validate(u.decomposition())?;
                positive("dt", c.dt)?;
                positive("horizon", c.horizon)?;
                let axes = if c.grid.roles.is_empty() { u.dim() } else { c.grid.roles.len() };
                if c.window.len() != axes {
                    return Err(format!("window needs {axes} half-widths"));
                }
                for w in &c.window {
                    positive("window", *w)?;
                }
                for (name, m) in std::iter::once(("seeds", &c.seeds)).chain(c.forward.iter().map(|f| ("forward", f))) {
                    if m.count == 0 || !(m.lo.is_finite() && m.hi.is_finite() && m.lo <= m.hi) {
                        return Err(format!("{name} needs count > 0 and lo <= hi"));
                    }
                }
                if c.segment_steps == Some(0) || c.check_every == Some(0) {
                    return Err("segment_steps and check_every must be positive".into());
                }
                positive("tolerances.lipschitz", c.tolerances.lipschitz)?;
                positive("tolerances.round_trip", c.tolerances.round_trip)?;
                positive("tolerances.pushforward", c.tolerances.pushforward)?;
            }
            ScenarioConfig::Brenier1d(c) => {
                RadialProfile::new(c.rho.kind, c.rho.scale).map_err(e)?;
                RadialProfile::new(c.v.kind, c.v.scale).map_err(e)?;
                if c.dim == 0 {
                    return Err("dim must be at least 1".into());
                }
                if c.samples < 3 {
                    return Err("samples must be at least 3".into());
                }
                positive("tolerances.lipschitz", c.tolerances.lipschitz)?;
                positive("tolerances.identity", c.tolerances.identity)?;
            }
            ScenarioConfig::Gaussian(c) => {
                heatflow::gaussian::GaussianPair::from_rows(c.dim, &c.a, &c.b).map_err(e)?;
                positive("dt", c.dt)?;
                positive("stop", c.stop)?;
                if c.record_every == 0 {
                    return Err("record_every must be positive".into());
                }
                positive("tolerances.invariant", c.tolerances.invariant)?;
                positive("tolerances.contraction", c.tolerances.contraction)?;
                positive("tolerances.recovery", c.tolerances.recovery)?;
            }
            ScenarioConfig::Correlation(c) => {
                if c.n < 10_000 {
                    return Err("n must be at least 10000".into());
                }
                if c.shipped.is_empty() && c.custom.is_empty() {
                    return Err("name shipped scenarios or give custom ones".into());
                }
                let names: Vec<String> = heatflow::applications::shipped_scenarios().map_err(e)?.into_iter().map(|s| s.name).collect();
                for s in &c.shipped {
                    if s != "all" && !names.contains(s) {
                        return Err(format!("unknown shipped scenario {s:?}"));
                    }
                }
                for s in &c.custom {
                    crate::run::build_custom(s).map_err(e)?;
                }
            }
            ScenarioConfig::AcceptanceSuite(c) => {
                positive("tolerance_scale", c.tolerance_scale)?;
                let n = heatflow::acceptance::CRITERIA;
                let overrides = c.override_factors()?;
                for id in c.criteria.iter().chain(overrides.keys()) {
                    if !(1..=n).contains(id) {
                        return Err(format!("criterion {id} is outside 1..={n}"));
                    }
                }
                for v in c.overrides.values() {
                    positive("overrides", *v)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_json() {
        let text = r#"{"id": "s", "scenario": {"kind": "acceptance-suite", "overrides": {"3": 2.0}}}"#;
        let exps = parse(text).unwrap();
        assert_eq!(exps[0].scenario.kind(), "acceptance-suite");
        let back = serde_json::to_string(&exps[0]).unwrap();
        assert_eq!(parse(&back).unwrap(), exps);
    }

    #[test]
    fn defaults_fill_tolerances() {
        let text = r#"{"id": "g", "scenario": {"kind": "gaussian", "dim": 1, "a": [1], "b": [2]}}"#;
        let ScenarioConfig::Gaussian(g) = &parse(text).unwrap()[0].scenario else { panic!("wrong kind") };
        assert_eq!(g.tolerances, GaussianTolerances::default());
        assert_eq!(g.dt, 1e-3);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let one = r#"{"id": "g", "scenario": {"kind": "gaussian", "dim": 1, "a": [1], "b": [2]}}"#;
        let err = parse(&format!("[{one}, {one}]")).unwrap_err();
        assert!(err.contains("duplicate"));
    }

    #[test]
    fn seed_mesh_tensor_is_row_major() {
        let m = SeedMesh { lo: -1.0, hi: 1.0, count: 2 };
        assert_eq!(m.tensor(2), vec![-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
    }
}
