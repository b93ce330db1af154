//! Numerical checks of the weighted estimate
//!
//! ```text
//! int_Q (tau |z_x|^2 + tau^3 |z|^2) e^{2 tau alpha}  <=  C int_Q |P z|^2 e^{2 tau alpha},
//! P z = sigma z_t - a(x) z_xx + p(x) z,
//! ```
//!
//! with `alpha = exp(lambda psi)` and `psi(t, x) = ell + 2 - x - N (t - t0)^2`,
//! plus the exponential separation argument used for unique continuation.
//!
//! Weighted integrals are returned scaled by `exp(-s)`, where `s` is the
//! largest exponent `2 tau w` over nodes with a nonzero integrand, and `s` is
//! reported as `log_scale`. Ratios of the two sides do not depend on it.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corelab::{left_derivative, second_difference, CoefficientField, EvolutionField, GridMismatch, Sigma, SpaceGrid, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CarlemanError {
    #[error(transparent)]
    Grid(#[from] GridMismatch),
    #[error("anchor time t0 = {t0} must lie strictly inside (0, {horizon})")]
    AnchorTime { t0: f64, horizon: f64 },
    #[error("lambda = {lambda} must be positive")]
    Lambda { lambda: f64 },
    #[error("weight sign condition fails at t = {t}, x = {x}: psi = {psi}")]
    WeightSign { t: f64, x: f64, psi: f64 },
    #[error("cutoff thresholds out of order: {lower} >= {upper}")]
    CutoffOrder { lower: f64, upper: f64 },
    #[error("delta = {delta} outside (0, {max}]")]
    DeltaRange { delta: f64, max: f64 },
    #[error("x0 = {x0} must lie in (0, {ell})")]
    PointOutOfRange { x0: f64, ell: f64 },
    #[error("support condition violated ({part}) at t = {t}, x = {x}: |value| = {value}")]
    Support { part: &'static str, t: f64, x: f64, value: f64 },
    #[error("constants must be positive: C4 = {c4}, C5 = {c5}")]
    Constants { c4: f64, c5: f64 },
}

/// Sampled weight `psi` and `alpha = exp(lambda psi)` on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    lambda: f64,
    t0: f64,
    n_coef: f64,
    sgrid: SpaceGrid,
    tgrid: TimeGrid,
    psi: Vec<f64>,
    alpha: Vec<f64>,
}

impl WeightSpec {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// The coefficient `N = (ell + 3) / min((T - t0)^2, t0^2)`.
    pub fn n_coef(&self) -> f64 {
        self.n_coef
    }

    pub fn sgrid(&self) -> &SpaceGrid {
        &self.sgrid
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    /// Row-major samples, time index outermost.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn psi_at(&self, k: usize, j: usize) -> f64 {
        self.psi[k * self.sgrid.len() + j]
    }

    pub fn alpha_at(&self, k: usize, j: usize) -> f64 {
        self.alpha[k * self.sgrid.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,psi,alpha\n");
        for k in 0..self.tgrid.len() {
            for j in 0..self.sgrid.len() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    self.tgrid.node(k),
                    self.sgrid.node(j),
                    self.psi_at(k, j),
                    self.alpha_at(k, j)
                ));
            }
        }
        out
    }
}

pub fn build_weight(t0: f64, lambda: f64, sgrid: SpaceGrid, tgrid: TimeGrid) -> Result<WeightSpec, CarlemanError> {
    let horizon = tgrid.horizon();
    if !(t0 > 0.0 && t0 < horizon) {
        return Err(CarlemanError::AnchorTime { t0, horizon });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CarlemanError::Lambda { lambda });
    }
    let ell = sgrid.ell();
    let n_coef = (ell + 3.0) / (horizon - t0).powi(2).min(t0 * t0);
    let mut psi = Vec::with_capacity(sgrid.len() * tgrid.len());
    for k in 0..tgrid.len() {
        let t = tgrid.node(k);
        psi.extend(sgrid.nodes().into_iter().map(|x| ell + 2.0 - x - n_coef * (t - t0).powi(2)));
    }
    for &k in &[0, tgrid.m()] {
        for j in 0..sgrid.len() {
            let value = psi[k * sgrid.len() + j];
            if value >= 0.0 {
                return Err(CarlemanError::WeightSign {
                    t: tgrid.node(k),
                    x: sgrid.node(j),
                    psi: value,
                });
            }
        }
    }
    let alpha = psi.iter().map(|&s| (lambda * s).exp()).collect();
    Ok(WeightSpec {
        lambda,
        t0,
        n_coef,
        sgrid,
        tgrid,
        psi,
        alpha,
    })
}

/// Quintic smoothstep `mu`: `0` below `lower`, `1` above `upper`, `C^2` in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cutoff {
    lower: f64,
    upper: f64,
}

impl Cutoff {
    pub fn new(lower: f64, upper: f64) -> Result<Self, CarlemanError> {
        if !(lower < upper) {
            return Err(CarlemanError::CutoffOrder { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn value(&self, s: f64) -> f64 {
        if s <= self.lower {
            return 0.0;
        }
        if s >= self.upper {
            return 1.0;
        }
        let r = (s - self.lower) / (self.upper - self.lower);
        r * r * r * (10.0 + r * (-15.0 + 6.0 * r))
    }

    /// `mu(psi)` at every node of the weight grid.
    pub fn sample(&self, weight: &WeightSpec) -> Vec<f64> {
        weight.psi.iter().map(|&s| self.value(s)).collect()
    }
}

/// Cutoff with `mu = 0` below `2 + delta` and `mu = 1` above `ell + 2 - x0 - delta`.
pub fn cutoff_mu(delta: f64, x0: f64, ell: f64) -> Result<Cutoff, CarlemanError> {
    if !(x0 > 0.0 && x0 < ell) {
        return Err(CarlemanError::PointOutOfRange { x0, ell });
    }
    Cutoff::new(2.0 + delta, ell + 2.0 - x0 - delta)
}

/// Smooth compactly supported bump `A phi((t - tc)/rt) phi((x - xc)/rx)`,
/// `phi(s) = exp(1 - 1/(1 - s^2))` on `|s| < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bump {
    pub t_center: f64,
    pub t_radius: f64,
    pub x_center: f64,
    pub x_radius: f64,
    pub amplitude: Complex64,
}

impl Bump {
    /// Bump supported in `(t_lo, t_hi) x (x_lo, x_hi)` with unit amplitude.
    pub fn on_box(t_lo: f64, t_hi: f64, x_lo: f64, x_hi: f64) -> Self {
        Self {
            t_center: 0.5 * (t_lo + t_hi),
            t_radius: 0.5 * (t_hi - t_lo),
            x_center: 0.5 * (x_lo + x_hi),
            x_radius: 0.5 * (x_hi - x_lo),
            amplitude: Complex64::new(1.0, 0.0),
        }
    }

    pub fn value(&self, t: f64, x: f64) -> Complex64 {
        self.amplitude * phi((t - self.t_center) / self.t_radius) * phi((x - self.x_center) / self.x_radius)
    }

    pub fn field(&self, sgrid: SpaceGrid, tgrid: TimeGrid) -> EvolutionField {
        EvolutionField::from_fn(sgrid, tgrid, |t, x| self.value(t, x))
    }

    /// `count` bumps with supports inside `[0.1, 0.9]` of both axes.
    pub fn random_family(count: usize, seed: u64, ell: f64, horizon: f64) -> Vec<Bump> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x_radius = ell * rng.random_range(0.1..0.25);
                let t_radius = horizon * rng.random_range(0.1..0.3);
                let x_center = rng.random_range(0.1 * ell + x_radius..0.9 * ell - x_radius);
                let t_center = rng.random_range(0.1 * horizon + t_radius..0.9 * horizon - t_radius);
                let amplitude = Complex64::from_polar(rng.random_range(0.5..2.0), rng.random_range(0.0..std::f64::consts::TAU));
                Bump {
                    t_center,
                    t_radius,
                    x_center,
                    x_radius,
                    amplitude,
                }
            })
            .collect()
    }
}

fn phi(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Tolerance, relative to the field maximum, for boundary values.
pub const SUPPORT_TOLERANCE: f64 = 1e-8;

/// `z = z_x = 0` at `x = 0`; `z = 0` on `x = ell`, `t = 0` and `t = T`.
/// The one-sided slope at `x = 0` carries an `O(h^2)` error, so it is
/// compared with `max(SUPPORT_TOLERANCE, 4h)` times the largest interior slope.
pub fn check_support(z: &EvolutionField) -> Result<(), CarlemanError> {
    let (s, t) = (*z.sgrid(), *z.tgrid());
    let (n, m, h) = (s.n(), t.m(), s.h());
    let tol = SUPPORT_TOLERANCE * z.max_abs();
    let max_slope = z
        .rows()
        .flat_map(|row| (1..n).map(move |j| d_dx(row, j, h).norm()))
        .fold(0.0, f64::max);
    let slope_tol = SUPPORT_TOLERANCE.max(4.0 * h) * max_slope;
    let mut worst: Option<(&'static str, usize, usize, f64)> = None;
    let mut consider = |part, k, j, value: f64, bound: f64| {
        if value > bound && worst.is_none_or(|w| value > w.3) {
            worst = Some((part, k, j, value));
        }
    };
    for k in 0..=m {
        consider("value at x = 0", k, 0, z.at(k, 0).norm(), tol);
        consider("value at x = ell", k, n, z.at(k, n).norm(), tol);
        let slope = left_derivative(z.at(k, 0), z.at(k, 1), z.at(k, 2), h).norm();
        consider("slope at x = 0", k, 0, slope, slope_tol);
    }
    for j in 0..=n {
        consider("value at t = 0", 0, j, z.at(0, j).norm(), tol);
        consider("value at t = T", m, j, z.at(m, j).norm(), tol);
    }
    match worst {
        None => Ok(()),
        Some((part, k, j, value)) => Err(CarlemanError::Support {
            part,
            t: t.node(k),
            x: s.node(j),
            value,
        }),
    }
}

fn d_dx(row: &[Complex64], j: usize, h: f64) -> Complex64 {
    let n = row.len() - 1;
    if j == 0 {
        left_derivative(row[0], row[1], row[2], h)
    } else if j == n {
        -left_derivative(row[n], row[n - 1], row[n - 2], h)
    } else {
        (row[j + 1] - row[j - 1]) * (0.5 / h)
    }
}

fn d2_dx2(row: &[Complex64], j: usize, h: f64) -> Complex64 {
    let n = row.len() - 1;
    let one_sided = |u0: Complex64, u1: Complex64, u2: Complex64, u3: Complex64| (u0 * 2.0 - u1 * 5.0 + u2 * 4.0 - u3) / (h * h);
    if j == 0 {
        one_sided(row[0], row[1], row[2], row[3])
    } else if j == n {
        one_sided(row[n], row[n - 1], row[n - 2], row[n - 3])
    } else {
        second_difference(row[j - 1], row[j], row[j + 1], h)
    }
}

/// Per-node `z_x` and `P z`.
fn derivatives(z: &EvolutionField, sigma: Sigma, a: &CoefficientField, p: &CoefficientField) -> (Vec<Complex64>, Vec<Complex64>) {
    let (s, t) = (*z.sgrid(), *z.tgrid());
    let (h, dt, width, m) = (s.h(), t.dt(), s.len(), t.m());
    let sig = sigma.value();
    let mut zx = Vec::with_capacity(z.values().len());
    let mut pz = Vec::with_capacity(z.values().len());
    for k in 0..=m {
        let row = z.row(k);
        for j in 0..width {
            let column = |kk: usize| z.at(kk, j);
            let zt = if k == 0 {
                left_derivative(column(0), column(1), column(2), dt)
            } else if k == m {
                -left_derivative(column(m), column(m - 1), column(m - 2), dt)
            } else {
                (column(k + 1) - column(k - 1)) * (0.5 / dt)
            };
            zx.push(d_dx(row, j, h));
            pz.push(sig * zt - d2_dx2(row, j, h) * a.values()[j] + row[j] * p.values()[j]);
        }
    }
    (zx, pz)
}

/// Node integrands of one test function, independent of `tau`.
#[derive(Debug, Clone)]
struct Integrands {
    grad: Vec<f64>,
    mass: Vec<f64>,
    op: Vec<f64>,
    quad: Vec<f64>,
}

impl Integrands {
    fn new(z: &EvolutionField, sigma: Sigma, a: &CoefficientField, p: &CoefficientField) -> Result<Self, CarlemanError> {
        z.sgrid().ensure_same(a.grid(), "diffusion")?;
        z.sgrid().ensure_same(p.grid(), "potential")?;
        check_support(z)?;
        let (zx, pz) = derivatives(z, sigma, a, p);
        Ok(Self {
            grad: zx.iter().map(|v| v.norm_sqr()).collect(),
            mass: z.values().iter().map(|v| v.norm_sqr()).collect(),
            op: pz.iter().map(|v| v.norm_sqr()).collect(),
            quad: quadrature_weights(z.sgrid(), z.tgrid()),
        })
    }

    fn sides(&self, exponent: &[f64], tau: f64) -> CarlemanSides {
        let live = |i: usize| self.grad[i] > 0.0 || self.mass[i] > 0.0 || self.op[i] > 0.0;
        let log_scale = (0..exponent.len())
            .filter(|&i| live(i))
            .map(|i| 2.0 * tau * exponent[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if log_scale == f64::NEG_INFINITY {
            return CarlemanSides {
                tau,
                lhs: 0.0,
                rhs: 0.0,
                log_scale: 0.0,
            };
        }
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for i in 0..exponent.len() {
            if !live(i) {
                continue;
            }
            let w = self.quad[i] * (2.0 * tau * exponent[i] - log_scale).exp();
            lhs += w * (tau * self.grad[i] + tau.powi(3) * self.mass[i]);
            rhs += w * self.op[i];
        }
        CarlemanSides { tau, lhs, rhs, log_scale }
    }
}

fn quadrature_weights(s: &SpaceGrid, t: &TimeGrid) -> Vec<f64> {
    let end = |i: usize, last: usize| if i == 0 || i == last { 0.5 } else { 1.0 };
    let mut out = Vec::with_capacity(s.len() * t.len());
    for k in 0..t.len() {
        for j in 0..s.len() {
            out.push(end(k, t.m()) * end(j, s.n()) * s.h() * t.dt());
        }
    }
    out
}

/// Both sides of the weighted estimate, scaled by `exp(-log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanSides {
    pub tau: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub log_scale: f64,
}

impl CarlemanSides {
    /// `lhs / rhs`, undefined when both vanish.
    pub fn ratio(&self) -> Option<f64> {
        match (self.lhs, self.rhs) {
            (l, r) if l == 0.0 && r == 0.0 => None,
            (l, r) if r == 0.0 => Some(if l > 0.0 { f64::INFINITY } else { 0.0 }),
            (l, r) => Some(l / r),
        }
    }
}

pub fn carleman_sides(
    z: &EvolutionField,
    weight: &WeightSpec,
    tau: f64,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<CarlemanSides, CarlemanError> {
    z.sgrid().ensure_same(weight.sgrid(), "weight")?;
    z.tgrid().ensure_same(weight.tgrid(), "weight")?;
    Ok(Integrands::new(z, sigma, a, p)?.sides(&weight.alpha, tau))
}

/// Sweep of one test function over the `tau` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberSweep {
    pub sides: Vec<CarlemanSides>,
}

impl MemberSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,lhs,rhs,ratio,log_scale\n");
        for s in &self.sides {
            let ratio = s.ratio().map_or_else(|| "nan".to_string(), |r| r.to_string());
            out.push_str(&format!("{},{},{},{},{}\n", s.tau, s.lhs, s.rhs, ratio, s.log_scale));
        }
        out
    }
}

/// Ratios over a family and `tau` grid. `fitted_c` is the largest ratio at the
/// first `tau`; `max_ratio` the largest at the others.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarlemanReport {
    pub lambda: f64,
    pub tau_grid: Vec<f64>,
    pub members: Vec<MemberSweep>,
    pub fitted_c: Option<f64>,
    pub max_ratio: Option<f64>,
    pub degenerate: bool,
    pub flagged: bool,
}

/// Allowed growth of the ratio beyond the fitted constant.
pub const RATIO_SLACK: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarlemanSummary {
    pub lambda: f64,
    pub tau_grid: Vec<f64>,
    pub fitted_c: Option<f64>,
    pub max_ratio: Option<f64>,
    pub degenerate: bool,
    pub flagged: bool,
}

impl CarlemanReport {
    fn from_members(lambda: f64, tau_grid: Vec<f64>, members: Vec<MemberSweep>) -> Self {
        let fold = |acc: Option<f64>, r: Option<f64>| match (acc, r) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        };
        let fitted_c = members.iter().map(|m| m.sides.first().and_then(|s| s.ratio())).fold(None, fold);
        let max_ratio = members
            .iter()
            .flat_map(|m| m.sides.iter().skip(1).map(|s| s.ratio()))
            .fold(None, fold);
        let degenerate = match fitted_c {
            None => true,
            Some(c) => !(c > 0.0 && c.is_finite()),
        };
        let flagged = degenerate || max_ratio.is_some_and(|r| r > RATIO_SLACK * fitted_c.unwrap_or(0.0));
        Self {
            lambda,
            tau_grid,
            members,
            fitted_c,
            max_ratio,
            degenerate,
            flagged,
        }
    }

    pub fn summary(&self) -> CarlemanSummary {
        CarlemanSummary {
            lambda: self.lambda,
            tau_grid: self.tau_grid.clone(),
            fitted_c: self.fitted_c,
            max_ratio: self.max_ratio,
            degenerate: self.degenerate,
            flagged: self.flagged,
        }
    }
}

fn prepare(
    family: &[EvolutionField],
    weight: &WeightSpec,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<Vec<Integrands>, CarlemanError> {
    family
        .par_iter()
        .map(|z| {
            z.sgrid().ensure_same(weight.sgrid(), "weight")?;
            z.tgrid().ensure_same(weight.tgrid(), "weight")?;
            Integrands::new(z, sigma, a, p)
        })
        .collect()
}

pub fn carleman_study(
    family: &[EvolutionField],
    weight: &WeightSpec,
    tau_grid: &[f64],
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<CarlemanReport, CarlemanError> {
    let prepared = prepare(family, weight, sigma, a, p)?;
    let members = prepared
        .par_iter()
        .map(|ints| MemberSweep {
            sides: tau_grid.iter().map(|&tau| ints.sides(&weight.alpha, tau)).collect(),
        })
        .collect();
    Ok(CarlemanReport::from_members(weight.lambda, tau_grid.to_vec(), members))
}

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// Start of the ratio decay: the candidate maximising the family-wide ratio.
/// `None` when every ratio is undefined.
pub fn select_tau1(
    family: &[EvolutionField],
    weight: &WeightSpec,
    candidates: &[f64],
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<Option<f64>, CarlemanError> {
    let prepared = prepare(family, weight, sigma, a, p)?;
    let best = candidates
        .par_iter()
        .filter_map(|&tau| {
            prepared
                .iter()
                .filter_map(|ints| ints.sides(&weight.alpha, tau).ratio())
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |x| x.max(r))))
                .map(|r| (tau, r))
        })
        .collect::<Vec<_>>();
    Ok(best
        .into_iter()
        .fold(None, |acc: Option<(f64, f64)>, (tau, r)| match acc {
            Some((_, br)) if br >= r => acc,
            _ => Some((tau, r)),
        })
        .map(|(tau, _)| tau))
}

/// `[tau1, 2 tau1, 4 tau1, ...]` with `count` entries.
pub fn doubling_grid(tau1: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| tau1 * 2f64.powi(i as i32)).collect()
}

/// Default candidates for [`select_tau1`].
pub fn default_tau_candidates() -> Vec<f64> {
    log_spaced(1e-3, 2.0, 45)
}

/// For each `lambda`: weight, `tau1` and a doubling study over four values.
pub fn lambda_sweep(
    family: &[EvolutionField],
    lambdas: &[f64],
    t0: f64,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<Vec<CarlemanReport>, CarlemanError> {
    let Some(first) = family.first() else {
        return Ok(Vec::new());
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let weight = build_weight(t0, lambda, *first.sgrid(), *first.tgrid())?;
            match select_tau1(family, &weight, &default_tau_candidates(), sigma, a, p)? {
                Some(tau1) => carleman_study(family, &weight, &doubling_grid(tau1, 4), sigma, a, p),
                None => Ok(CarlemanReport::from_members(lambda, Vec::new(), Vec::new())),
            }
        })
        .collect()
}

/// Weighted integrals behind the constants `C4`, `C5`, in logarithmic form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UcpFit {
    pub tau_grid: Vec<f64>,
    /// `ln int |[mu, P] z|^2 e^{2 tau psi}`.
    pub log_commutator: Vec<f64>,
    /// `ln int (tau |v_x|^2 + tau^3 |v|^2) e^{2 tau psi}`, `v = mu(psi) z`.
    pub log_energy: Vec<f64>,
    pub c4: f64,
    pub c5: f64,
}

fn ucp_exponents(ell: f64, x0: f64, delta: f64) -> Result<(f64, f64), CarlemanError> {
    if !(x0 > 0.0 && x0 < ell) {
        return Err(CarlemanError::PointOutOfRange { x0, ell });
    }
    let max = 0.5 * (ell - x0);
    if !(delta > 0.0 && delta <= max * (1.0 + 1e-12)) {
        return Err(CarlemanError::DeltaRange { delta, max });
    }
    Ok((2.0 + delta, ell + 2.0 - x0 - delta))
}

/// Default function for the separation demo: `z = x^2 (1 + sin(pi t / T) / 2)`,
/// so `z = z_x = 0` at `x = 0`.
pub fn ucp_test_function(sgrid: SpaceGrid, tgrid: TimeGrid) -> EvolutionField {
    let horizon = tgrid.horizon();
    EvolutionField::from_fn(sgrid, tgrid, |t, x| {
        Complex64::new(x * x * (1.0 + 0.5 * (std::f64::consts::PI * t / horizon).sin()), 0.0)
    })
}

/// Fits `C4 = max_tau I4 e^{-2 tau (2 + delta)}` and
/// `C5 = min_tau I5 e^{-2 tau (ell + 2 - x0 - delta)}` on the weight `e^{2 tau psi}`.
/// The cutoff switches on across `psi in [2, 2 + delta]`, which keeps the
/// commutator inside `psi < 2 + delta`.
#[allow(clippy::too_many_arguments)]
pub fn fit_ucp_constants(
    z: &EvolutionField,
    t0: f64,
    x0: f64,
    delta: f64,
    tau_grid: &[f64],
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
) -> Result<UcpFit, CarlemanError> {
    let (s, t) = (*z.sgrid(), *z.tgrid());
    let (low, high) = ucp_exponents(s.ell(), x0, delta)?;
    if high <= low {
        return Err(CarlemanError::CutoffOrder { lower: low, upper: high });
    }
    s.ensure_same(a.grid(), "diffusion")?;
    s.ensure_same(p.grid(), "potential")?;
    let weight = build_weight(t0, 1.0, s, t)?;
    let mu = Cutoff::new(2.0, low)?.sample(&weight);
    let v_values: Vec<Complex64> = z.values().iter().zip(&mu).map(|(v, m)| v * *m).collect();
    let v = EvolutionField::from_values(s, t, v_values)?;
    check_support(&v)?;
    let (vx, pv) = derivatives(&v, sigma, a, p);
    let (_, pz) = derivatives(z, sigma, a, p);
    let commutator: Vec<f64> = pv.iter().zip(&pz).zip(&mu).map(|((a, b), m)| (a - b * *m).norm_sqr()).collect();
    let quad = quadrature_weights(&s, &t);
    let log_integral = |tau: f64, f: &dyn Fn(usize) -> f64| {
        let live: Vec<usize> = (0..quad.len()).filter(|&i| f(i) > 0.0).collect();
        let scale = live.iter().map(|&i| 2.0 * tau * weight.psi[i]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = live.iter().map(|&i| quad[i] * f(i) * (2.0 * tau * weight.psi[i] - scale).exp()).sum();
        scale + sum.ln()
    };
    let mut log_commutator = Vec::with_capacity(tau_grid.len());
    let mut log_energy = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        log_commutator.push(log_integral(tau, &|i| commutator[i]));
        log_energy.push(log_integral(tau, &|i| tau * vx[i].norm_sqr() + tau.powi(3) * v.values()[i].norm_sqr()));
    }
    let ln_c4 = tau_grid
        .iter()
        .zip(&log_commutator)
        .map(|(tau, l)| l - 2.0 * tau * low)
        .fold(f64::NEG_INFINITY, f64::max);
    let ln_c5 = tau_grid
        .iter()
        .zip(&log_energy)
        .map(|(tau, l)| l - 2.0 * tau * high)
        .fold(f64::INFINITY, f64::min);
    Ok(UcpFit {
        tau_grid: tau_grid.to_vec(),
        log_commutator,
        log_energy,
        c4: ln_c4.exp(),
        c5: ln_c5.exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UcpRow {
    pub tau: f64,
    /// `ln(C4 e^{2 tau (2 + delta)})`.
    pub log_commutator_bound: f64,
    /// `ln(C5 e^{2 tau (ell + 2 - x0 - delta)})`.
    pub log_energy_bound: f64,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UcpTable {
    pub ell: f64,
    pub x0: f64,
    pub delta: f64,
    pub commutator_exponent: f64,
    pub energy_exponent: f64,
    pub c4: f64,
    pub c5: f64,
    /// Beyond this `tau` the lower bound exceeds the upper one.
    pub tau_star: Option<f64>,
    pub rows: Vec<UcpRow>,
    pub verdict: bool,
}

impl UcpTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,log_commutator_bound,log_energy_bound,separated\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.tau, r.log_commutator_bound, r.log_energy_bound, r.separated));
        }
        out
    }
}

pub fn ucp_separation_demo(ell: f64, x0: f64, delta: f64, tau_grid: &[f64], c4: f64, c5: f64) -> Result<UcpTable, CarlemanError> {
    let (low, high) = ucp_exponents(ell, x0, delta)?;
    if !(c4 > 0.0 && c5 > 0.0 && c4.is_finite() && c5.is_finite()) {
        return Err(CarlemanError::Constants { c4, c5 });
    }
    let gap = high - low;
    let tau_star = (gap > 1e-12).then(|| (c4 / c5).ln() / (2.0 * gap));
    let rows: Vec<UcpRow> = tau_grid
        .iter()
        .map(|&tau| {
            let log_commutator_bound = c4.ln() + 2.0 * tau * low;
            let log_energy_bound = c5.ln() + 2.0 * tau * high;
            UcpRow {
                tau,
                log_commutator_bound,
                log_energy_bound,
                separated: log_energy_bound > log_commutator_bound,
            }
        })
        .collect();
    let verdict = tau_star.is_some() && rows.last().is_some_and(|r| r.separated);
    Ok(UcpTable {
        ell,
        x0,
        delta,
        commutator_exponent: low,
        energy_exponent: high,
        c4,
        c5,
        tau_star,
        rows,
        verdict,
    })
}
