//! Experiment manifests: JSON documents `{kind, parameters, output_dir}`.
//! Validation turns the loosely typed parameters into a [`Plan`] of core
//! objects, so a plan that exists can run without further input checks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;
use xformlab_core::carleman::{doubling_grid, Bump};
use xformlab_core::corelab::{CoefficientField, CoefficientRole, Sigma, SpaceGrid, TimeGrid};
use xformlab_core::evolve::{BoundaryCondition, BoundaryConditionSpec};
use xformlab_core::recon::{Anchor, DeskFixture, InverseProblemSpec, ReconstructOptions};

use crate::expr::{parse_expression, Expression};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Forward,
    Kernel,
    Intertwine,
    Reconstruct,
    Carleman,
    Distinguish,
    LocalChain,
    UcpDemo,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Forward,
        Kind::Kernel,
        Kind::Intertwine,
        Kind::Reconstruct,
        Kind::Carleman,
        Kind::Distinguish,
        Kind::LocalChain,
        Kind::UcpDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Forward => "forward",
            Kind::Kernel => "kernel",
            Kind::Intertwine => "intertwine",
            Kind::Reconstruct => "reconstruct",
            Kind::Carleman => "carleman",
            Kind::Distinguish => "distinguish",
            Kind::LocalChain => "local-chain",
            Kind::UcpDemo => "ucp-demo",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub kind: Kind,
    #[serde(default)]
    pub parameters: BTreeMap<String, Value>,
    pub output_dir: PathBuf,
}

/// A rejected manifest; `field` names the offending parameter when known.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}{message}", field.as_ref().map(|f| format!("{f}: ")).unwrap_or_default())]
pub struct ValidationError {
    pub field: Option<String>,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            field: Some(field.into()),
            message: message.to_string(),
        }
    }

    pub fn general(message: impl fmt::Display) -> Self {
        Self {
            field: None,
            message: message.to_string(),
        }
    }
}

/// A manifest read from disk, with relative paths resolved against its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: ExperimentManifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.manifest.output_dir)
    }
}

/// Reads and parses a manifest. On failure, also returns the output directory
/// if the document named one, so a summary can still be written.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest, (ValidationError, Option<PathBuf>)> {
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| (ValidationError::general(format!("cannot read {}: {e}", path.display())), None))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| (ValidationError::general(format!("invalid JSON: {e}")), None))?;
    let out = raw.get("output_dir").and_then(Value::as_str).map(|s| base_dir.join(s));
    if let Some(kind) = raw.get("kind").and_then(Value::as_str) {
        if !Kind::ALL.iter().any(|k| k.name() == kind) {
            let known: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
            return Err((
                ValidationError::new("kind", format!("unknown kind '{kind}', expected one of {}", known.join(", "))),
                out,
            ));
        }
    }
    let manifest: ExperimentManifest = serde_json::from_value(raw).map_err(|e| (ValidationError::general(e), out.clone()))?;
    Ok(LoadedManifest { manifest, base_dir })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum CoefficientSource {
    Constant(f64),
    Expression(String),
    Csv { csv: PathBuf },
}

impl CoefficientSource {
    fn resolve(&self, field: &str, base: &Path) -> Result<Source, ValidationError> {
        match self {
            CoefficientSource::Constant(c) => Ok(Source::Expression(
                parse_expression(&format!("{c:?}")).map_err(|e| ValidationError::new(field, e))?,
            )),
            CoefficientSource::Expression(text) => Ok(Source::Expression(
                parse_expression(text).map_err(|e| ValidationError::new(field, e))?,
            )),
            CoefficientSource::Csv { csv } => read_profile(&base.join(csv)).map_err(|e| ValidationError::new(field, e)),
        }
    }
}

/// A resolved scalar profile of `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Expression(Expression),
    /// Sorted `(x, value)` samples, linearly interpolated.
    Table(Vec<(f64, f64)>),
}

impl Source {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Source::Expression(e) => e.eval(x),
            Source::Table(rows) => {
                let i = rows.partition_point(|r| r.0 <= x).clamp(1, rows.len() - 1);
                let ((x0, y0), (x1, y1)) = (rows[i - 1], rows[i]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Source::Expression(e) => e.is_constant(),
            Source::Table(rows) => rows.iter().all(|r| r.1 == rows[0].1),
        }
    }

    fn covers(&self, ell: f64) -> bool {
        match self {
            Source::Expression(_) => true,
            Source::Table(rows) => rows[0].0 <= 1e-12 * ell.max(1.0) && rows[rows.len() - 1].0 >= ell * (1.0 - 1e-12),
        }
    }

    pub fn sample(&self, field: &str, grid: SpaceGrid, role: CoefficientRole) -> Result<CoefficientField, ValidationError> {
        if !self.covers(grid.ell()) {
            return Err(ValidationError::new(field, format!("table does not cover [0, {}]", grid.ell())));
        }
        CoefficientField::sample(|x| self.eval(x), grid, role).map_err(|e| ValidationError::new(field, e))
    }
}

fn read_profile(path: &Path) -> Result<Source, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let parse = |i: usize| {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| format!("{}: row {} needs two numeric columns x,value", path.display(), line + 1))
        };
        rows.push((parse(0)?, parse(1)?));
    }
    if rows.len() < 2 {
        return Err(format!("{}: need at least two rows", path.display()));
    }
    if rows.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(format!("{}: x column must increase strictly", path.display()));
    }
    Ok(Source::Table(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
enum SigmaSource {
    Named(SigmaName),
    Value { re: f64, im: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SigmaName {
    Parabolic,
    Schrodinger,
}

impl Default for SigmaSource {
    fn default() -> Self {
        SigmaSource::Named(SigmaName::Parabolic)
    }
}

impl SigmaSource {
    fn resolve(self) -> Result<Sigma, ValidationError> {
        match self {
            SigmaSource::Named(SigmaName::Parabolic) => Ok(Sigma::parabolic()),
            SigmaSource::Named(SigmaName::Schrodinger) => Ok(Sigma::schrodinger()),
            SigmaSource::Value { re, im } => Sigma::new(re, im).map_err(|e| ValidationError::new("sigma", e)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum BcSide {
    #[default]
    Dirichlet,
    Neumann,
    /// Constant Dirichlet value.
    Value(f64),
}

impl BcSide {
    fn resolve(self, tgrid: &TimeGrid) -> BoundaryCondition {
        match self {
            BcSide::Dirichlet => BoundaryCondition::DirichletZero,
            BcSide::Neumann => BoundaryCondition::NeumannZero,
            BcSide::Value(v) => BoundaryCondition::PrescribedTrace(vec![Complex64::new(v, 0.0); tgrid.len()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BcSource {
    #[serde(default)]
    left: BcSide,
    #[serde(default)]
    right: BcSide,
}

impl BcSource {
    fn resolve(self, tgrid: &TimeGrid) -> BoundaryConditionSpec {
        BoundaryConditionSpec {
            left: self.left.resolve(tgrid),
            right: self.right.resolve(tgrid),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSource {
    #[serde(default = "one")]
    ell: f64,
    #[serde(default = "one")]
    horizon: f64,
    n: usize,
    m: Option<usize>,
}

impl GridSource {
    fn space(&self) -> Result<SpaceGrid, ValidationError> {
        SpaceGrid::new(self.ell, self.n).map_err(|e| ValidationError::new("grid", e))
    }

    fn time(&self) -> Result<TimeGrid, ValidationError> {
        TimeGrid::new(self.horizon, self.m.unwrap_or(self.n)).map_err(|e| ValidationError::new("grid", e))
    }
}

fn coefficient(
    source: &CoefficientSource,
    name: &str,
    grid: SpaceGrid,
    role: CoefficientRole,
    base: &Path,
) -> Result<(Source, CoefficientField), ValidationError> {
    let resolved = source.resolve(name, base)?;
    let field = resolved.sample(name, grid, role)?;
    Ok((resolved, field))
}

fn default_a() -> CoefficientSource {
    CoefficientSource::Constant(1.0)
}

fn default_zero() -> CoefficientSource {
    CoefficientSource::Constant(0.0)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForwardParams {
    grid: GridSource,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    b: Option<CoefficientSource>,
    #[serde(default)]
    bc: BcSource,
    mode: Option<u32>,
    tolerance: Option<f64>,
    #[serde(default)]
    write_field: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardPlan {
    pub sigma: Sigma,
    pub a: CoefficientField,
    pub p: CoefficientField,
    pub b: CoefficientField,
    pub bc: BoundaryConditionSpec,
    pub tgrid: TimeGrid,
    /// `(k, tolerance)`: compare with `exp(-(a k^2 pi^2 + p) t / sigma) sin(k pi x / ell)`.
    pub mode: Option<(u32, f64)>,
    pub write_field: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelParams {
    #[serde(default = "one")]
    ell: f64,
    n: usize,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    q: CoefficientSource,
    #[serde(default)]
    characteristics: Vec<f64>,
    #[serde(default = "default_diagonal_tolerance")]
    diagonal_tolerance: f64,
    #[serde(default = "default_vanish_tolerance")]
    vanish_tolerance: f64,
}

fn default_diagonal_tolerance() -> f64 {
    1e-8
}

fn default_vanish_tolerance() -> f64 {
    1e-12
}

#[derive(Debug, Clone)]
pub struct KernelPlan {
    pub a: CoefficientField,
    pub p: CoefficientField,
    pub q: CoefficientField,
    pub sources: [Source; 3],
    pub characteristics: Vec<f64>,
    pub diagonal_tolerance: f64,
    pub vanish_tolerance: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntertwineParams {
    grid: GridSource,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    q: CoefficientSource,
    b: CoefficientSource,
    #[serde(default)]
    bc: BcSource,
    #[serde(default = "yes")]
    refine: bool,
    #[serde(default = "default_slope_constant")]
    slope_constant: f64,
}

fn yes() -> bool {
    true
}

fn default_slope_constant() -> f64 {
    4.0
}

/// Sources are kept so the refined run can resample them.
#[derive(Debug, Clone)]
pub struct IntertwinePlan {
    pub sigma: Sigma,
    pub grid: (f64, f64, usize, usize),
    pub a: Source,
    pub p: Source,
    pub q: Source,
    pub b: Source,
    bc: BcSource,
    pub refine: bool,
    pub slope_constant: f64,
}

impl IntertwinePlan {
    /// Coefficients and boundary data on the grid refined `factor` times.
    #[allow(clippy::type_complexity)]
    pub fn sampled(
        &self,
        factor: usize,
    ) -> Result<(CoefficientField, CoefficientField, CoefficientField, CoefficientField, BoundaryConditionSpec, TimeGrid), ValidationError> {
        let (ell, horizon, n, m) = self.grid;
        let s = SpaceGrid::new(ell, n * factor).map_err(|e| ValidationError::new("grid", e))?;
        let t = TimeGrid::new(horizon, m * factor).map_err(|e| ValidationError::new("grid", e))?;
        Ok((
            self.a.sample("a", s, CoefficientRole::Diffusion)?,
            self.p.sample("p", s, CoefficientRole::PotentialP)?,
            self.q.sample("q", s, CoefficientRole::PotentialQ)?,
            self.b.sample("b", s, CoefficientRole::Initial)?,
            self.bc.resolve(&t),
            t,
        ))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsSource {
    reg_weight: Option<f64>,
    max_iters: Option<usize>,
    gtol: Option<f64>,
    ftol: Option<f64>,
    memory: Option<usize>,
    smoothing_length: Option<f64>,
    constant_warm_start: Option<bool>,
}

impl OptionsSource {
    fn resolve(&self) -> Result<ReconstructOptions, ValidationError> {
        let d = ReconstructOptions::default();
        let o = ReconstructOptions {
            reg_weight: self.reg_weight.unwrap_or(d.reg_weight),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            gtol: self.gtol.unwrap_or(d.gtol),
            ftol: self.ftol.unwrap_or(d.ftol),
            memory: self.memory.unwrap_or(d.memory),
            smoothing_length: self.smoothing_length.unwrap_or(d.smoothing_length),
            constant_warm_start: self.constant_warm_start.unwrap_or(d.constant_warm_start),
        };
        for (name, v) in [
            ("reg_weight", o.reg_weight),
            ("gtol", o.gtol),
            ("ftol", o.ftol),
            ("smoothing_length", o.smoothing_length),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ValidationError::new(format!("options.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        if o.memory == 0 {
            return Err(ValidationError::new("options.memory", "must be at least 1"));
        }
        Ok(o)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconstructParams {
    fixture: Option<DeskFixture>,
    grid: Option<GridSource>,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    b: Option<CoefficientSource>,
    #[serde(default)]
    bc: BcSource,
    p_true: Option<CoefficientSource>,
    #[serde(default = "default_zero")]
    p_init: CoefficientSource,
    #[serde(default)]
    anchor: Anchor,
    #[serde(default)]
    noise: f64,
    seed: Option<u64>,
    #[serde(default)]
    options: OptionsSource,
    layers: Option<Vec<f64>>,
    threshold: Option<f64>,
    baseline: Option<f64>,
    #[serde(default = "default_baseline_slack")]
    baseline_slack: f64,
}

fn default_baseline_slack() -> f64 {
    0.1
}

#[derive(Debug, Clone)]
pub struct ReconstructPlan {
    pub fixture: Option<DeskFixture>,
    pub spec: InverseProblemSpec,
    pub p_true: CoefficientField,
    pub p_init: CoefficientField,
    pub options: ReconstructOptions,
    pub layers: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    pub baseline: Option<f64>,
    pub baseline_slack: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BumpSource {
    #[serde(default = "default_bump_count")]
    count: usize,
    #[serde(default = "default_bump_seed")]
    seed: u64,
}

fn default_bump_count() -> usize {
    5
}

fn default_bump_seed() -> u64 {
    11
}

impl Default for BumpSource {
    fn default() -> Self {
        Self {
            count: default_bump_count(),
            seed: default_bump_seed(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CarlemanParams {
    grid: GridSource,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    #[serde(default = "default_lambda")]
    lambda: f64,
    t0: Option<f64>,
    #[serde(default)]
    bumps: BumpSource,
    tau_grid: Option<Vec<f64>>,
    #[serde(default)]
    lambda_sweep: Vec<f64>,
}

fn default_lambda() -> f64 {
    2.0
}

#[derive(Debug, Clone)]
pub struct CarlemanPlan {
    pub sigma: Sigma,
    pub sgrid: SpaceGrid,
    pub tgrid: TimeGrid,
    pub a: CoefficientField,
    pub p: CoefficientField,
    pub lambda: f64,
    pub t0: f64,
    pub bumps: Vec<Bump>,
    /// Fixed grid; `None` selects `tau_1` and doubles it three times.
    pub tau_grid: Option<Vec<f64>>,
    pub lambda_sweep: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistinguishParams {
    grid: GridSource,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    b: CoefficientSource,
    #[serde(default)]
    bc: BcSource,
    p: CoefficientSource,
    q: CoefficientSource,
    #[serde(default)]
    anchor: Anchor,
}

#[derive(Debug, Clone)]
pub struct DistinguishPlan {
    pub spec: InverseProblemSpec,
    pub p: CoefficientField,
    pub q: CoefficientField,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalChainParams {
    #[serde(default = "one")]
    ell: f64,
    n: usize,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    q: CoefficientSource,
    b: CoefficientSource,
    #[serde(default)]
    expect_violation: bool,
}

#[derive(Debug, Clone)]
pub struct LocalChainPlan {
    pub a: CoefficientField,
    pub p: CoefficientField,
    pub q: CoefficientField,
    pub b: CoefficientField,
    pub expect_violation: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsSource {
    c4: f64,
    c5: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UcpParams {
    #[serde(default = "one")]
    ell: f64,
    #[serde(default = "one")]
    horizon: f64,
    x0: f64,
    delta: f64,
    t0: Option<f64>,
    #[serde(default = "default_ucp_n")]
    n: usize,
    #[serde(default)]
    sigma: SigmaSource,
    #[serde(default = "default_a")]
    a: CoefficientSource,
    #[serde(default = "default_zero")]
    p: CoefficientSource,
    tau_grid: Option<Vec<f64>>,
    constants: Option<ConstantsSource>,
}

fn default_ucp_n() -> usize {
    128
}

#[derive(Debug, Clone)]
pub struct UcpPlan {
    pub sigma: Sigma,
    pub sgrid: SpaceGrid,
    pub tgrid: TimeGrid,
    pub a: CoefficientField,
    pub p: CoefficientField,
    pub x0: f64,
    pub delta: f64,
    pub t0: f64,
    pub tau_grid: Vec<f64>,
    pub constants: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub enum Plan {
    Forward(ForwardPlan),
    Kernel(KernelPlan),
    Intertwine(IntertwinePlan),
    Reconstruct(Box<ReconstructPlan>),
    Carleman(CarlemanPlan),
    Distinguish(Box<DistinguishPlan>),
    LocalChain(LocalChainPlan),
    UcpDemo(UcpPlan),
}

fn params<T: DeserializeOwned>(map: &BTreeMap<String, Value>) -> Result<T, ValidationError> {
    let value = Value::Object(map.clone().into_iter().collect());
    serde_json::from_value(value).map_err(|e| ValidationError::new("parameters", e))
}

fn positive(name: &str, v: f64) -> Result<f64, ValidationError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ValidationError::new(name, format!("must be positive, got {v}")))
    }
}

fn tau_list(name: &str, taus: &[f64]) -> Result<(), ValidationError> {
    if taus.is_empty() {
        return Err(ValidationError::new(name, "must not be empty"));
    }
    for &t in taus {
        positive(name, t)?;
    }
    Ok(())
}

/// Checks a manifest and builds the core objects it describes.
pub fn validate(loaded: &LoadedManifest) -> Result<Plan, ValidationError> {
    let m = &loaded.manifest;
    let base = loaded.base_dir.as_path();
    let map = &m.parameters;
    match m.kind {
        Kind::Forward => {
            let pr: ForwardParams = params(map)?;
            let (s, t) = (pr.grid.space()?, pr.grid.time()?);
            let sigma = pr.sigma.resolve()?;
            let (a_src, a) = coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?;
            let (p_src, p) = coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?;
            let bc = pr.bc.resolve(&t);
            let (b, mode) = match (pr.mode, &pr.b) {
                (Some(_), Some(_)) => return Err(ValidationError::new("b", "give either b or mode, not both")),
                (None, None) => return Err(ValidationError::new("b", "missing initial value (or mode)")),
                (None, Some(src)) => (coefficient(src, "b", s, CoefficientRole::Initial, base)?.1, None),
                (Some(k), None) => {
                    if k == 0 {
                        return Err(ValidationError::new("mode", "must be at least 1"));
                    }
                    if !(a_src.is_constant() && p_src.is_constant()) {
                        return Err(ValidationError::new("mode", "analytic mode needs constant a and p"));
                    }
                    if bc != BoundaryConditionSpec::dirichlet() {
                        return Err(ValidationError::new("mode", "analytic mode needs zero Dirichlet data at both ends"));
                    }
                    let ell = s.ell();
                    let b = CoefficientField::sample(
                        |x| (k as f64 * std::f64::consts::PI * x / ell).sin(),
                        s,
                        CoefficientRole::Initial,
                    )
                    .map_err(|e| ValidationError::new("mode", e))?;
                    let tol = positive("tolerance", pr.tolerance.unwrap_or(1e-3))?;
                    (b, Some((k, tol)))
                }
            };
            if sigma.re < 0.0 {
                return Err(ValidationError::new("sigma", "real part must be >= 0 for forward simulation"));
            }
            Ok(Plan::Forward(ForwardPlan {
                sigma,
                a,
                p,
                b,
                bc,
                tgrid: t,
                mode,
                write_field: pr.write_field,
            }))
        }
        Kind::Kernel => {
            let pr: KernelParams = params(map)?;
            let s = SpaceGrid::new(pr.ell, pr.n).map_err(|e| ValidationError::new("n", e))?;
            let (a_src, a) = coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?;
            let (p_src, p) = coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?;
            let (q_src, q) = coefficient(&pr.q, "q", s, CoefficientRole::PotentialQ, base)?;
            for &x0 in &pr.characteristics {
                if !(x0 > 0.0 && x0 < s.ell()) {
                    return Err(ValidationError::new("characteristics", format!("start {x0} outside (0, {})", s.ell())));
                }
            }
            Ok(Plan::Kernel(KernelPlan {
                a,
                p,
                q,
                sources: [a_src, p_src, q_src],
                characteristics: pr.characteristics,
                diagonal_tolerance: positive("diagonal_tolerance", pr.diagonal_tolerance)?,
                vanish_tolerance: positive("vanish_tolerance", pr.vanish_tolerance)?,
            }))
        }
        Kind::Intertwine => {
            let pr: IntertwineParams = params(map)?;
            let plan = IntertwinePlan {
                sigma: pr.sigma.resolve()?,
                grid: (pr.grid.ell, pr.grid.horizon, pr.grid.n, pr.grid.m.unwrap_or(pr.grid.n)),
                a: pr.a.resolve("a", base)?,
                p: pr.p.resolve("p", base)?,
                q: pr.q.resolve("q", base)?,
                b: pr.b.resolve("b", base)?,
                bc: pr.bc,
                refine: pr.refine,
                slope_constant: positive("slope_constant", pr.slope_constant)?,
            };
            plan.sampled(1)?;
            if plan.refine {
                plan.sampled(2)?;
            }
            Ok(Plan::Intertwine(plan))
        }
        Kind::Reconstruct => {
            let pr: ReconstructParams = params(map)?;
            if !(pr.noise >= 0.0 && pr.noise.is_finite()) {
                return Err(ValidationError::new("noise", format!("must be finite and >= 0, got {}", pr.noise)));
            }
            if pr.noise > 0.0 && pr.seed.is_none() {
                return Err(ValidationError::new("seed", "required when noise > 0"));
            }
            let options = pr.options.resolve()?;
            let (mut spec, p_true, p_init, threshold) = match pr.fixture {
                Some(f) => {
                    if pr.grid.is_some() || pr.b.is_some() || pr.p_true.is_some() {
                        return Err(ValidationError::new("fixture", "a fixture fixes grid, b and p_true"));
                    }
                    let (spec, truth, init) = f.build().map_err(|e| ValidationError::new("fixture", e))?;
                    (spec, truth, init, Some(pr.threshold.unwrap_or(f.threshold())))
                }
                None => {
                    let grid = pr.grid.ok_or_else(|| ValidationError::new("grid", "required without a fixture"))?;
                    let (s, t) = (grid.space()?, grid.time()?);
                    let b_src = pr.b.as_ref().ok_or_else(|| ValidationError::new("b", "required without a fixture"))?;
                    let p_src = pr.p_true.as_ref().ok_or_else(|| ValidationError::new("p_true", "required without a fixture"))?;
                    let a = coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?.1;
                    let b = coefficient(b_src, "b", s, CoefficientRole::Initial, base)?.1;
                    let truth = coefficient(p_src, "p_true", s, CoefficientRole::PotentialP, base)?.1;
                    let init = coefficient(&pr.p_init, "p_init", s, CoefficientRole::PotentialP, base)?.1;
                    let spec = InverseProblemSpec::new(pr.sigma.resolve()?, a, b, pr.bc.resolve(&t), t);
                    (spec, truth, init, pr.threshold)
                }
            };
            spec.anchor = pr.anchor;
            spec.noise_level = pr.noise;
            spec.seed = pr.seed.unwrap_or(0);
            spec.validate().map_err(|e| ValidationError::new("parameters", e))?;
            if let Some(layers) = &pr.layers {
                let ell = spec.sgrid().ell();
                if layers.is_empty() || layers.windows(2).any(|w| !(w[1] > w[0])) || layers[0] <= 0.0 || layers[layers.len() - 1] > ell {
                    return Err(ValidationError::new("layers", format!("breakpoints must increase within (0, {ell}]")));
                }
            }
            if let Some(t) = threshold {
                positive("threshold", t)?;
            }
            if let Some(b) = pr.baseline {
                positive("baseline", b)?;
            }
            Ok(Plan::Reconstruct(Box::new(ReconstructPlan {
                fixture: pr.fixture,
                spec,
                p_true,
                p_init,
                options,
                layers: pr.layers,
                threshold,
                baseline: pr.baseline,
                baseline_slack: pr.baseline_slack.max(0.0),
            })))
        }
        Kind::Carleman => {
            let pr: CarlemanParams = params(map)?;
            let (s, t) = (pr.grid.space()?, pr.grid.time()?);
            let sigma = pr.sigma.resolve()?;
            let a = coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?.1;
            let p = coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?.1;
            let t0 = pr.t0.unwrap_or(0.5 * t.horizon());
            if !(t0 > 0.0 && t0 < t.horizon()) {
                return Err(ValidationError::new("t0", format!("must lie in (0, {})", t.horizon())));
            }
            positive("lambda", pr.lambda)?;
            for &l in &pr.lambda_sweep {
                positive("lambda_sweep", l)?;
            }
            if let Some(taus) = &pr.tau_grid {
                tau_list("tau_grid", taus)?;
            }
            if pr.bumps.count == 0 {
                return Err(ValidationError::new("bumps.count", "must be at least 1"));
            }
            Ok(Plan::Carleman(CarlemanPlan {
                sigma,
                sgrid: s,
                tgrid: t,
                a,
                p,
                lambda: pr.lambda,
                t0,
                bumps: Bump::random_family(pr.bumps.count, pr.bumps.seed, s.ell(), t.horizon()),
                tau_grid: pr.tau_grid,
                lambda_sweep: pr.lambda_sweep,
            }))
        }
        Kind::Distinguish => {
            let pr: DistinguishParams = params(map)?;
            let (s, t) = (pr.grid.space()?, pr.grid.time()?);
            let a = coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?.1;
            let b = coefficient(&pr.b, "b", s, CoefficientRole::Initial, base)?.1;
            let p = coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?.1;
            let q = coefficient(&pr.q, "q", s, CoefficientRole::PotentialQ, base)?.1;
            let mut spec = InverseProblemSpec::new(pr.sigma.resolve()?, a, b, pr.bc.resolve(&t), t);
            spec.anchor = pr.anchor;
            spec.validate().map_err(|e| ValidationError::new("parameters", e))?;
            Ok(Plan::Distinguish(Box::new(DistinguishPlan { spec, p, q })))
        }
        Kind::LocalChain => {
            let pr: LocalChainParams = params(map)?;
            let s = SpaceGrid::new(pr.ell, pr.n).map_err(|e| ValidationError::new("n", e))?;
            Ok(Plan::LocalChain(LocalChainPlan {
                a: coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?.1,
                p: coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?.1,
                q: coefficient(&pr.q, "q", s, CoefficientRole::PotentialQ, base)?.1,
                b: coefficient(&pr.b, "b", s, CoefficientRole::Initial, base)?.1,
                expect_violation: pr.expect_violation,
            }))
        }
        Kind::UcpDemo => {
            let pr: UcpParams = params(map)?;
            let s = SpaceGrid::new(pr.ell, pr.n).map_err(|e| ValidationError::new("n", e))?;
            let t = TimeGrid::new(pr.horizon, pr.n).map_err(|e| ValidationError::new("n", e))?;
            if !(pr.x0 > 0.0 && pr.x0 < pr.ell) {
                return Err(ValidationError::new("x0", format!("must lie in (0, {})", pr.ell)));
            }
            let max = 0.5 * (pr.ell - pr.x0);
            if !(pr.delta > 0.0 && pr.delta <= max * (1.0 + 1e-12)) {
                return Err(ValidationError::new("delta", format!("must lie in (0, {max}]")));
            }
            let t0 = pr.t0.unwrap_or(0.5 * pr.horizon);
            if !(t0 > 0.0 && t0 < pr.horizon) {
                return Err(ValidationError::new("t0", format!("must lie in (0, {})", pr.horizon)));
            }
            let tau_grid = pr.tau_grid.unwrap_or_else(|| doubling_grid(0.5, 7));
            tau_list("tau_grid", &tau_grid)?;
            let constants = match pr.constants {
                Some(c) => Some((positive("constants.c4", c.c4)?, positive("constants.c5", c.c5)?)),
                None => None,
            };
            if constants.is_none() && pr.delta >= max {
                return Err(ValidationError::new("delta", "fitting constants needs delta strictly below (ell - x0)/2"));
            }
            Ok(Plan::UcpDemo(UcpPlan {
                sigma: pr.sigma.resolve()?,
                sgrid: s,
                tgrid: t,
                a: coefficient(&pr.a, "a", s, CoefficientRole::Diffusion, base)?.1,
                p: coefficient(&pr.p, "p", s, CoefficientRole::PotentialP, base)?.1,
                x0: pr.x0,
                delta: pr.delta,
                t0,
                tau_grid,
                constants,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn loaded(value: Value) -> LoadedManifest {
        LoadedManifest {
            manifest: serde_json::from_value(value).unwrap(),
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn forward_mode_builds_sine() {
        let plan = validate(&loaded(json!({
            "kind": "forward",
            "parameters": {"grid": {"n": 16}, "mode": 2},
            "output_dir": "out"
        })))
        .unwrap();
        let Plan::Forward(f) = plan else { panic!() };
        assert_eq!(f.mode, Some((2, 1e-3)));
        assert!((f.b.values()[4] - (2.0 * std::f64::consts::PI * 0.25).sin()).abs() < 1e-15);
    }

    #[test]
    fn noise_needs_seed() {
        let err = validate(&loaded(json!({
            "kind": "reconstruct",
            "parameters": {"fixture": "positive_initial", "noise": 0.01},
            "output_dir": "out"
        })))
        .unwrap_err();
        assert_eq!(err.field.as_deref(), Some("seed"));
    }

    #[test]
    fn expression_errors_carry_field_and_column() {
        let err = validate(&loaded(json!({
            "kind": "kernel",
            "parameters": {"n": 16, "q": "sin("},
            "output_dir": "out"
        })))
        .unwrap_err();
        assert_eq!(err.to_string(), "q: column 4: unexpected end of expression");
    }

    #[test]
    fn unknown_parameter_rejected() {
        let err = validate(&loaded(json!({
            "kind": "local-chain",
            "parameters": {"n": 16, "q": 1, "b": "x", "bogus": 3},
            "output_dir": "out"
        })))
        .unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
    }

    #[test]
    fn sigma_and_boundary_forms() {
        let plan = validate(&loaded(json!({
            "kind": "distinguish",
            "parameters": {
                "grid": {"n": 16, "m": 8},
                "sigma": {"re": 0.0, "im": 1.0},
                "b": "x", "p": 0, "q": 1,
                "bc": {"left": {"value": 0.0}, "right": "neumann"}
            },
            "output_dir": "out"
        })))
        .unwrap();
        let Plan::Distinguish(d) = plan else { panic!() };
        assert_eq!(d.spec.sigma, Sigma::schrodinger());
        assert_eq!(d.spec.bc.right, BoundaryCondition::NeumannZero);
        assert!(matches!(d.spec.bc.left, BoundaryCondition::PrescribedTrace(ref v) if v.len() == 9));
    }

    #[test]
    fn ucp_delta_range() {
        let base = json!({"kind": "ucp-demo", "parameters": {"x0": 0.5, "delta": 0.3}, "output_dir": "o"});
        assert_eq!(validate(&loaded(base)).unwrap_err().field.as_deref(), Some("delta"));
        let limit = json!({"kind": "ucp-demo", "parameters": {"x0": 0.5, "delta": 0.25, "constants": {"c4": 1.0, "c5": 1.0}}, "output_dir": "o"});
        assert!(validate(&loaded(limit)).is_ok());
    }

    #[test]
    fn table_profile_interpolates() {
        let src = Source::Table(vec![(0.0, 1.0), (0.5, 2.0), (1.0, 0.0)]);
        assert_eq!(src.eval(0.25), 1.5);
        assert_eq!(src.eval(0.75), 1.0);
        assert_eq!(src.eval(1.0), 0.0);
        assert!(!Source::Table(vec![(0.1, 1.0), (1.0, 1.0)]).covers(1.0));
    }
}
