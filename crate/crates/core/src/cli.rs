//! Batch front end: a strictly validated TOML experiment file, one
//! subcommand per task, CSV artifacts and a run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{CostSpec, Growth};
use crate::error::{Error, Result};
use crate::levy_model::{check_assumptions, JumpSpec, JumpTerm, LevyModel, ProblemSpec, Side};
use crate::pathsim::TimeGrid;
use crate::refraction::Strategy;
use crate::resolvent::{
    resolvent_apply, semi_analytic_threshold, semi_analytic_v_second, semi_analytic_value, solve_two_sided,
    FixedPointConfig, QuadratureConfig, ResolventKernel,
};
use crate::scale::{ScaleFn, SnModel};
use crate::threshold::{
    compare_strategies, coupling_check, estimate_rho_curve, estimate_value, estimate_value_derivative, sandwich_check,
    solve_threshold, write_values_csv, MonteCarloConfig,
};
use crate::verify::{check_hjb_inequality, check_martingale_identities, Candidate};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "LEVY_REFRACT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SolveThreshold,
    RhoCurve,
    Value,
    Vprime,
    Compare,
    VerifyHjb,
    ScaleTable,
    ResolventTable,
    VprimeTable,
    Sandwich,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SolveThreshold => "solve-threshold",
            Task::RhoCurve => "rho-curve",
            Task::Value => "value",
            Task::Vprime => "vprime",
            Task::Compare => "compare",
            Task::VerifyHjb => "verify-hjb",
            Task::ScaleTable => "scale-table",
            Task::ResolventTable => "resolvent-table",
            Task::VprimeTable => "vprime-table",
            Task::Sandwich => "sandwich",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        <Task as ValueEnum>::from_str(s, false).map_err(|_| Error::Config {
            path: "task".into(),
            message: format!("unknown task `{s}`"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpKindName {
    Exponential,
    PointMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub side: Side,
    pub rate: f64,
    pub kind: JumpKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostName {
    Linear,
    Quadratic,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub name: CostName,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub jumps: Vec<JumpConfig>,
    pub q: f64,
    pub beta: f64,
    pub alpha: f64,
    pub cost: CostConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "McConfig::default_paths")]
    pub n_paths: usize,
    #[serde(default = "McConfig::default_dt")]
    pub dt: f64,
    #[serde(default = "McConfig::default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_bar: Option<f64>,
    #[serde(default)]
    pub independent_seeds: bool,
}

impl McConfig {
    fn default_paths() -> usize {
        10_000
    }
    fn default_dt() -> f64 {
        1e-3
    }
    fn default_horizon() -> f64 {
        20.0
    }
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: Self::default_paths(),
            dt: Self::default_dt(),
            horizon: Self::default_horizon(),
            seed: 0,
            theta_bar: None,
            independent_seeds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Either an explicit list or `n` evenly spaced points from `lo` to `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Points {
    List(Vec<f64>),
    Range(RangeSpec),
}

impl Points {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Points::List(v) => v.clone(),
            Points::Range(RangeSpec { lo, hi, n }) => match n {
                0 => Vec::new(),
                1 => vec![*lo],
                _ => (0..*n).map(|k| lo + (hi - lo) * k as f64 / (*n - 1) as f64).collect(),
            },
        }
    }

    fn check(&self, path: &str) -> Result<Vec<f64>> {
        let v = self.values();
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(config_err(path, "needs at least one finite point"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    /// Refraction at the solved threshold.
    Optimal,
    Refraction { b: f64 },
    Constant { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTask {
    #[serde(default = "ThresholdTask::default_tol")]
    pub tol: f64,
}

impl ThresholdTask {
    fn default_tol() -> f64 {
        1e-3
    }
}

impl Default for ThresholdTask {
    fn default() -> Self {
        Self { tol: Self::default_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoCurveTask {
    pub b: Points,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueTask {
    pub x0: Points,
    #[serde(default = "ValueTask::default_strategies")]
    pub strategies: Vec<StrategyConfig>,
}

impl ValueTask {
    fn default_strategies() -> Vec<StrategyConfig> {
        vec![StrategyConfig::Optimal]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VprimeTask {
    pub x0: Points,
    /// Threshold; solved by Monte Carlo when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTask {
    pub x0: Points,
    pub rivals: Vec<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTask {
    pub grid: Points,
    /// Grid points are offsets from the threshold.
    #[serde(default = "yes")]
    pub relative: bool,
    #[serde(default = "VerifyTask::default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

impl VerifyTask {
    fn default_tol() -> f64 {
        1e-3
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleTask {
    pub x: Points,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventTask {
    pub x: Points,
    pub y: Points,
    /// Threshold; the semi-analytic root when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default = "ResolventTask::default_mass_tol")]
    pub mass_tol: f64,
}

impl ResolventTask {
    fn default_mass_tol() -> f64 {
        1e-4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VprimeTableTask {
    pub x: Points,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default = "VprimeTableTask::default_iters")]
    pub max_iters: usize,
    #[serde(default = "VprimeTableTask::default_tol")]
    pub tol: f64,
    #[serde(default = "VprimeTableTask::default_span")]
    pub span: f64,
    #[serde(default = "VprimeTableTask::default_spacing")]
    pub spacing: f64,
}

impl VprimeTableTask {
    fn default_iters() -> usize {
        FixedPointConfig::default().max_iters
    }
    fn default_tol() -> f64 {
        FixedPointConfig::default().tol
    }
    fn default_span() -> f64 {
        FixedPointConfig::default().span
    }
    fn default_spacing() -> f64 {
        FixedPointConfig::default().spacing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichTask {
    pub x0: Points,
    #[serde(default = "SandwichTask::default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

impl SandwichTask {
    fn default_eps() -> f64 {
        0.05
    }
}

/// The experiment file. Task sections other than the one being run are
/// accepted and ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_curve: Option<RhoCurveTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<ValueTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vprime: Option<VprimeTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent: Option<ResolventTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vprime_table: Option<VprimeTableTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandwich: Option<SandwichTask>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn at(path: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config { .. } => e,
        other => config_err(path, other.to_string()),
    }
}

fn required<'a, T>(section: &'a Option<T>, path: &str) -> Result<&'a T> {
    section.as_ref().ok_or_else(|| config_err(path, "section is required for this task"))
}

impl ExperimentConfig {
    /// Parses a TOML document; errors carry the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| config_err("<document>", e.to_string()))?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let mut terms = Vec::with_capacity(p.jumps.len());
        for (i, j) in p.jumps.iter().enumerate() {
            let term = match j.kind {
                JumpKindName::Exponential => {
                    if j.size.is_some() {
                        return Err(config_err(&format!("problem.jumps[{i}].size"), "not used by exponential jumps"));
                    }
                    let decay = j
                        .decay
                        .ok_or_else(|| config_err(&format!("problem.jumps[{i}].decay"), "required"))?;
                    JumpTerm::exponential(j.side, j.rate, decay)
                }
                JumpKindName::PointMass => {
                    if j.decay.is_some() {
                        return Err(config_err(&format!("problem.jumps[{i}].decay"), "not used by point masses"));
                    }
                    let size = j
                        .size
                        .ok_or_else(|| config_err(&format!("problem.jumps[{i}].size"), "required"))?;
                    JumpTerm::point_mass(j.side, j.rate, size)
                }
            };
            terms.push(term);
        }
        let model = LevyModel::new(p.gamma, p.sigma, JumpSpec::new(terms)).map_err(at("problem"))?;
        let cost = self.cost()?;
        ProblemSpec::new(model, cost, p.q, p.beta, p.alpha).map_err(at("problem"))
    }

    fn cost(&self) -> Result<CostSpec> {
        let c = &self.problem.cost;
        let allowed: &[&str] = match c.name {
            CostName::Linear => &["slope"],
            CostName::Quadratic => &["a", "center"],
            CostName::Softplus => &["height", "width", "center"],
        };
        for key in c.params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(config_err(
                    &format!("problem.cost.params.{key}"),
                    format!("unknown parameter, expected one of {allowed:?}"),
                ));
            }
        }
        let get = |k: &str, default: Option<f64>| {
            c.params
                .get(k)
                .copied()
                .or(default)
                .ok_or_else(|| config_err(&format!("problem.cost.params.{k}"), "required"))
        };
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(config_err(&format!("problem.cost.params.{k}"), "must be > 0"))
            }
        };
        Ok(match c.name {
            CostName::Linear => CostSpec::linear(get("slope", None)?),
            CostName::Quadratic => CostSpec::quadratic(positive("a", get("a", None)?)?, get("center", Some(0.0))?),
            CostName::Softplus => CostSpec::softplus(
                positive("height", get("height", None)?)?,
                positive("width", get("width", None)?)?,
                get("center", Some(0.0))?,
            ),
        })
    }

    pub fn monte_carlo(&self) -> Result<MonteCarloConfig> {
        let m = &self.mc;
        let grid = TimeGrid::new(m.dt, m.horizon).map_err(at("mc"))?;
        if m.n_paths == 0 {
            return Err(config_err("mc.n_paths", "must be >= 1"));
        }
        let mut mc = MonteCarloConfig::new(m.n_paths, grid, m.seed);
        mc.theta_bar = m.theta_bar;
        mc.independent_seeds = m.independent_seeds;
        Ok(mc)
    }

    /// Fills in the section of `task` with its defaults where it has them.
    fn resolve(&mut self, task: Task) {
        self.task = Some(task);
        match task {
            Task::SolveThreshold | Task::Value | Task::Vprime | Task::Compare | Task::Sandwich => {
                self.threshold.get_or_insert_with(ThresholdTask::default);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub task: Task,
    pub seed: u64,
    pub seed_source: String,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<CheckOutcome>,
    pub pass: bool,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn pass(&self) -> bool {
        self.manifest.pass
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    spec: ProblemSpec,
    mc: MonteCarloConfig,
    out: PathBuf,
    files: Vec<String>,
    checks: Vec<CheckOutcome>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.out.join(name)
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(CheckOutcome {
            name: name.into(),
            pass,
            detail,
        });
    }

    fn threshold_tol(&self) -> f64 {
        self.cfg.threshold.as_ref().map_or(ThresholdTask::default_tol(), |t| t.tol)
    }

    fn mc_threshold(&mut self, given: Option<f64>) -> Result<f64> {
        match given {
            Some(b) => Ok(b),
            None => {
                let th = solve_threshold(&self.spec, &self.mc, self.threshold_tol())?;
                Ok(th.b_star)
            }
        }
    }

    fn sn(&self) -> Result<SnModel> {
        let (sn, up) = SnModel::split(&self.spec.model)?;
        if up.total_rate() > 0.0 {
            return Err(Error::Unsupported("this task needs a spectrally negative model".into()));
        }
        Ok(sn)
    }

    fn semi_threshold(&self, sn: &SnModel, given: Option<f64>) -> Result<f64> {
        match given {
            Some(b) => Ok(b),
            None => semi_analytic_threshold(
                sn,
                &self.spec.cost,
                self.spec.q,
                self.spec.beta,
                self.spec.alpha,
                1e-9,
                &QuadratureConfig::default(),
            ),
        }
    }

    fn strategy(&mut self, s: &StrategyConfig, b_star: &mut Option<f64>) -> Result<(String, Strategy)> {
        Ok(match s {
            StrategyConfig::Optimal => {
                let b = match *b_star {
                    Some(b) => b,
                    None => {
                        let b = self.mc_threshold(None)?;
                        *b_star = Some(b);
                        b
                    }
                };
                (format!("optimal refraction(b={b})"), Strategy::Refraction { b })
            }
            StrategyConfig::Refraction { b } => {
                let st = Strategy::Refraction { b: *b };
                (st.label(), st)
            }
            StrategyConfig::Constant { rate } => {
                let st = Strategy::Constant { rate: *rate };
                (st.label(), st)
            }
        })
    }

    fn execute(&mut self, task: Task) -> Result<()> {
        let cfg = self.cfg;
        match task {
            Task::SolveThreshold => {
                let th = solve_threshold(&self.spec, &self.mc, self.threshold_tol())?;
                let p = self.path("threshold.csv");
                th.write_csv(&p)?;
            }
            Task::RhoCurve => {
                let t = required(&cfg.rho_curve, "rho_curve")?;
                let b = t.b.check("rho_curve.b")?;
                let curve = estimate_rho_curve(&self.spec, &b, &self.mc)?;
                let p = self.path("rho_curve.csv");
                curve.write_csv(&p)?;
            }
            Task::Value => {
                let t = required(&cfg.value, "value")?;
                let xs = t.x0.check("value.x0")?;
                let mut b_star = None;
                let mut rows = Vec::new();
                for s in &t.strategies {
                    let (label, st) = self.strategy(s, &mut b_star)?;
                    for &x in &xs {
                        rows.push((label.clone(), x, estimate_value(&self.spec, &st, x, &self.mc)?));
                    }
                }
                let p = self.path("values.csv");
                write_values_csv(&p, &rows)?;
            }
            Task::Vprime => {
                let t = required(&cfg.vprime, "vprime")?;
                let xs = t.x0.check("vprime.x0")?;
                let b = self.mc_threshold(t.b)?;
                let label = Strategy::Refraction { b }.label();
                let mut rows = Vec::new();
                for &x in &xs {
                    rows.push((label.clone(), x, estimate_value_derivative(&self.spec, b, x, &self.mc)?));
                }
                let p = self.path("vprime.csv");
                write_values_csv(&p, &rows)?;
            }
            Task::Compare => {
                let t = required(&cfg.compare, "compare")?;
                let xs = t.x0.check("compare.x0")?;
                let b = self.mc_threshold(t.b)?;
                let mut b_opt = Some(b);
                let rivals = t
                    .rivals
                    .iter()
                    .map(|s| self.strategy(s, &mut b_opt).map(|r| r.1))
                    .collect::<Result<Vec<_>>>()?;
                let rep = compare_strategies(&self.spec, b, &xs, &rivals, &self.mc)?;
                let p = self.path("comparison.csv");
                rep.write_csv(&p)?;
                let flagged = rep.rows.iter().filter(|r| r.flagged).count();
                self.check(
                    "no rival beats the threshold strategy by 3 SE",
                    flagged == 0,
                    format!("{flagged} of {} rows flagged", rep.rows.len()),
                );
            }
            Task::VerifyHjb => {
                let t = required(&cfg.verify, "verify")?;
                let sn = self.sn()?;
                if !sn.has_unbounded_variation() {
                    return Err(Error::Unsupported("verify-hjb needs sigma > 0".into()));
                }
                let b = self.semi_threshold(&sn, t.b)?;
                let mut grid = t.grid.check("verify.grid")?;
                if t.relative {
                    grid.iter_mut().for_each(|x| *x += b);
                }
                let spec = &self.spec;
                let kernel = ResolventKernel::new(&sn, spec.q, b, spec.alpha)?;
                let quad = QuadratureConfig::default();
                let nan_on_err = |r: Result<f64>| r.unwrap_or(f64::NAN);
                let v = |x: f64| nan_on_err(semi_analytic_value(&kernel, &spec.cost, spec.beta, x, &quad));
                let v1 = |x: f64| {
                    nan_on_err(resolvent_apply(&kernel, |y| spec.cost.f_prime(y), spec.cost.f_prime_growth(), x, &quad))
                };
                let v2 = |x: f64| nan_on_err(semi_analytic_v_second(&kernel, &spec.cost, x, &quad));
                let cand = Candidate {
                    v: &v,
                    v1: &v1,
                    v2: Some(&v2),
                };
                let mart = check_martingale_identities(spec, b, &cand, &grid, t.tol)?;
                let hjb = check_hjb_inequality(spec, &cand, &grid, t.tol)?;
                let (mp, mm, hp, hm) = (mart.pass, mart.max_abs, hjb.pass, hjb.max_abs);
                let p = self.path("residuals.csv");
                mart.merge(hjb).write_csv(&p)?;
                self.check("martingale identities", mp, format!("max |residual| {mm:e} (tol {})", t.tol));
                self.check("HJB inequality", hp, format!("max violation {hm:e} (tol {})", t.tol));
            }
            Task::ScaleTable => {
                let t = required(&cfg.scale, "scale")?;
                let xs = t.x.check("scale.x")?;
                let sn = self.sn()?;
                let w = ScaleFn::new(&sn, self.spec.q, 0.0)?;
                let ww = ScaleFn::new(&sn, self.spec.q, self.spec.alpha)?;
                let p = self.path("scale.csv");
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "x,W,W_prime,WW,WW_prime")?;
                for &x in &xs {
                    let (a, da) = w.eval_checked(x)?;
                    let (c, dc) = ww.eval_checked(x)?;
                    writeln!(f, "{x},{a},{da},{c},{dc}")?;
                }
                f.flush()?;
            }
            Task::ResolventTable => {
                let t = required(&cfg.resolvent, "resolvent")?;
                let xs = t.x.check("resolvent.x")?;
                let ys = t.y.check("resolvent.y")?;
                let sn = self.sn()?;
                let b = self.semi_threshold(&sn, t.b)?;
                let kernel = ResolventKernel::new(&sn, self.spec.q, b, self.spec.alpha)?;
                let p = self.path("resolvent.csv");
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "x,y,R,dR_dx")?;
                for &x in &xs {
                    for &y in &ys {
                        writeln!(f, "{x},{y},{},{}", kernel.density(x, y), kernel.density_dx(x, y))?;
                    }
                }
                f.flush()?;
                let one = Growth { k1: 1.0, k2: 0.0, n: 0 };
                let worst = xs
                    .iter()
                    .map(|&x| {
                        resolvent_apply(&kernel, |_| 1.0, one, x, &QuadratureConfig::default())
                            .map(|m| (m - 1.0 / self.spec.q).abs())
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                self.check(
                    "resolvent mass equals 1/q",
                    worst <= t.mass_tol,
                    format!("max error {worst:e} (tol {})", t.mass_tol),
                );
            }
            Task::VprimeTable => {
                let t = required(&cfg.vprime_table, "vprime_table")?;
                let xs = t.x.check("vprime_table.x")?;
                let (sn, up) = SnModel::split(&self.spec.model)?;
                if !sn.has_unbounded_variation() {
                    return Err(Error::Unsupported("vprime-table needs sigma > 0".into()));
                }
                let b = match t.b {
                    Some(b) => b,
                    None if up.total_rate() > 0.0 => self.mc_threshold(None)?,
                    None => self.semi_threshold(&sn, None)?,
                };
                let kernel = ResolventKernel::new(&sn, self.spec.q, b, self.spec.alpha)?;
                let cost = &self.spec.cost.clone();
                let vals: Vec<f64> = if up.total_rate() > 0.0 {
                    let fp = FixedPointConfig {
                        max_iters: t.max_iters,
                        tol: t.tol,
                        span: t.span,
                        spacing: t.spacing,
                    };
                    let sol = solve_two_sided(&kernel, cost, &up, &fp)?;
                    let ratio_ok = sol.max_ratio() <= sol.contraction + 0.05;
                    self.check(
                        "Picard update ratio within contraction + 0.05",
                        ratio_ok,
                        format!(
                            "max ratio {:.4}, contraction {:.4}, {} iterations",
                            sol.max_ratio(),
                            sol.contraction,
                            sol.iterations
                        ),
                    );
                    xs.iter()
                        .map(|&x| sol.eval(&kernel, cost, &up, x))
                        .collect::<Result<_>>()?
                } else {
                    let quad = QuadratureConfig::default();
                    xs.iter()
                        .map(|&x| resolvent_apply(&kernel, |y| cost.f_prime(y), cost.f_prime_growth(), x, &quad))
                        .collect::<Result<_>>()?
                };
                let p = self.path("vprime_table.csv");
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "x,v_prime_semianalytic")?;
                for (x, v) in xs.iter().zip(&vals) {
                    writeln!(f, "{x},{v}")?;
                }
                f.flush()?;
                let mut order: Vec<(f64, f64)> = xs.iter().copied().zip(vals.iter().copied()).collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0));
                let monotone = order.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-8);
                self.check("v' non-decreasing", monotone, format!("{} points", xs.len()));
            }
            Task::Sandwich => {
                let t = required(&cfg.sandwich, "sandwich")?;
                let xs = t.x0.check("sandwich.x0")?;
                if !(t.eps > 0.0) {
                    return Err(config_err("sandwich.eps", "must be > 0"));
                }
                let b = self.mc_threshold(t.b)?;
                let p = self.path("sandwich.csv");
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(
                    f,
                    "x0,b,eps,lower,chord,upper_coupled,upper_shift,difference_quotient,difference_quotient_se,sandwich_violations,coupling_violations,coupling_checked"
                )?;
                let (mut chain, mut coupled) = (true, 0usize);
                for &x in &xs {
                    let s = sandwich_check(&self.spec, b, x, t.eps, &self.mc)?;
                    let c = coupling_check(&self.spec, b, x, t.eps, &self.mc)?;
                    writeln!(
                        f,
                        "{x},{b},{},{},{},{},{},{},{},{},{},{}",
                        t.eps,
                        s.lower.mean,
                        s.chord.mean,
                        s.upper_coupled.mean,
                        s.upper_shift.mean,
                        s.difference_quotient.mean,
                        s.difference_quotient.se,
                        s.violations,
                        c.violations,
                        c.checked
                    )?;
                    chain &= s.chain_holds();
                    coupled += c.violations;
                }
                f.flush()?;
                self.check("sandwich chain holds on every path", chain, format!("{} starting points", xs.len()));
                self.check("coupling invariants", coupled == 0, format!("{coupled} violations"));
            }
        }
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Runs one task and writes its artifacts, `resolved_config.toml` and
/// `manifest.json` to the output directory.
pub fn run_experiment(config: &ExperimentConfig, task: Task, opts: &RunOptions) -> Result<RunOutcome> {
    if let Some(t) = config.task {
        if t != task {
            return Err(config_err("task", format!("file says `{}` but `{}` was requested", t.name(), task.name())));
        }
    }
    let mut cfg = config.clone();
    let seed_source = if let Some(s) = opts.seed {
        cfg.mc.seed = s;
        "flag"
    } else if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.mc.seed = v
            .trim()
            .parse()
            .map_err(|_| config_err(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        "env"
    } else {
        "config"
    };
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    cfg.out_dir = Some(out.clone());
    cfg.resolve(task);

    let spec = cfg.problem_spec()?;
    let mc = cfg.monte_carlo()?;
    let theta_bar = mc
        .theta_bar
        .unwrap_or_else(|| 0.5 * spec.model.jumps.moment_abscissa().min(2.0));
    let probe: Vec<f64> = (0..=80).map(|k| -20.0 + 0.5 * k as f64).collect();
    check_assumptions(&spec, theta_bar, &probe).map_err(at("problem"))?;

    std::fs::create_dir_all(&out)?;
    let mut run = Run {
        cfg: &cfg,
        spec,
        mc,
        out: out.clone(),
        files: Vec::new(),
        checks: Vec::new(),
    };
    run.execute(task)?;
    let Run { files, checks, .. } = run;

    let resolved = out.join("resolved_config.toml");
    std::fs::write(&resolved, cfg.to_toml())?;
    let mut artifacts = Vec::new();
    for name in files.iter().map(String::as_str).chain(["resolved_config.toml"]) {
        let (sha256, bytes) = sha256_file(&out.join(name))?;
        artifacts.push(Artifact {
            file: name.to_string(),
            sha256,
            bytes,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task,
        seed: cfg.mc.seed,
        seed_source: seed_source.into(),
        threads: opts.threads,
        config: serde_json::to_value(&cfg).expect("config serialises"),
        artifacts,
        checks,
        pass,
    };
    let mut f = std::fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(std::io::Error::other)?;
    writeln!(f)?;
    Ok(RunOutcome { manifest, out_dir: out })
}

#[derive(Debug, Parser)]
#[command(name = "levy-refract", version, about = "Optimal refraction thresholds for Lévy processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed; overrides the environment and the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for path simulation.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo threshold b* (threshold.csv).
    SolveThreshold(CommonArgs),
    /// rho_hat on a grid of thresholds (rho_curve.csv).
    RhoCurve(CommonArgs),
    /// Strategy values (values.csv).
    Value(CommonArgs),
    /// Pathwise value derivatives (vprime.csv).
    Vprime(CommonArgs),
    /// Threshold strategy against rivals under common paths (comparison.csv).
    Compare(CommonArgs),
    /// Martingale and HJB residuals of the semi-analytic value (residuals.csv).
    VerifyHjb(CommonArgs),
    /// Scale functions W and WW (scale.csv).
    ScaleTable(CommonArgs),
    /// Resolvent density and its x-derivative (resolvent.csv).
    ResolventTable(CommonArgs),
    /// Semi-analytic v' (vprime_table.csv).
    VprimeTable(CommonArgs),
    /// Difference-quotient sandwich and coupling checks (sandwich.csv).
    Sandwich(CommonArgs),
}

impl Command {
    pub fn split(&self) -> (Task, &CommonArgs) {
        match self {
            Command::SolveThreshold(a) => (Task::SolveThreshold, a),
            Command::RhoCurve(a) => (Task::RhoCurve, a),
            Command::Value(a) => (Task::Value, a),
            Command::Vprime(a) => (Task::Vprime, a),
            Command::Compare(a) => (Task::Compare, a),
            Command::VerifyHjb(a) => (Task::VerifyHjb, a),
            Command::ScaleTable(a) => (Task::ScaleTable, a),
            Command::ResolventTable(a) => (Task::ResolventTable, a),
            Command::VprimeTable(a) => (Task::VprimeTable, a),
            Command::Sandwich(a) => (Task::Sandwich, a),
        }
    }
}

/// Exit code: 0 when every embedded check passes, 1 when a check fails,
/// 2 on configuration or runtime errors.
pub fn main_with(cli: Cli) -> i32 {
    let (task, args) = cli.command.split();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 2;
        }
    }
    let opts = RunOptions {
        out_dir: args.out.clone(),
        seed: args.seed,
        threads: args.threads,
    };
    let result = ExperimentConfig::load(&args.config).and_then(|cfg| run_experiment(&cfg, task, &opts));
    match result {
        Ok(outcome) => {
            for c in &outcome.manifest.checks {
                let verdict = if c.pass { "pass" } else { "FAIL" };
                eprintln!("{verdict}: {} ({})", c.name, c.detail);
            }
            eprintln!("wrote {}", outcome.out_dir.join("manifest.json").display());
            if outcome.pass() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
