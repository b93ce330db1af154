//! Grids, sampled coefficients, admissibility checks and the shared
//! quadrature / stencil primitives used by every other module.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest interval / step count accepted for either grid axis.
pub const MIN_INTERVALS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("length must be positive and finite, got {0}")]
    NonpositiveLength(f64),
    #[error("time horizon must be positive and finite, got {0}")]
    NonpositiveHorizon(f64),
    #[error("{axis} count {count} is below the minimum of {MIN_INTERVALS}")]
    TooFewIntervals { axis: &'static str, count: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("diffusion coefficient must be positive: value {value} at node {node} (x = {x})")]
    NonpositiveDiffusion { node: usize, x: f64, value: f64 },
    #[error("non-finite coefficient value {value} at node {node} (x = {x})")]
    NonFinite { node: usize, x: f64, value: f64 },
    #[error("expected {expected} samples for the grid, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigmaError {
    #[error("sigma must be nonzero and finite, got {re} + {im}i")]
    Zero { re: f64, im: f64 },
}

/// Raised whenever two objects that must share a grid do not.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("grid mismatch: {0}")]
pub struct GridMismatch(pub String);

/// The complex evolution constant in front of the time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma {
    pub re: f64,
    pub im: f64,
}

impl Sigma {
    pub fn new(re: f64, im: f64) -> Result<Self, SigmaError> {
        if !(re.is_finite() && im.is_finite()) || re * re + im * im == 0.0 {
            return Err(SigmaError::Zero { re, im });
        }
        Ok(Self { re, im })
    }

    /// Heat equation.
    pub fn parabolic() -> Self {
        Self { re: 1.0, im: 0.0 }
    }

    /// Schrödinger equation.
    pub fn schrodinger() -> Self {
        Self { re: 0.0, im: 1.0 }
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    pub fn is_real(&self) -> bool {
        self.im == 0.0
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:+}i", self.re, self.im)
    }
}

/// Uniform grid `x_j = j * ell / n` on `[0, ell]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    ell: f64,
    n: usize,
}

impl SpaceGrid {
    pub fn new(ell: f64, n: usize) -> Result<Self, GridError> {
        if !(ell.is_finite() && ell > 0.0) {
            return Err(GridError::NonpositiveLength(ell));
        }
        if n < MIN_INTERVALS {
            return Err(GridError::TooFewIntervals { axis: "space", count: n });
        }
        Ok(Self { ell, n })
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Number of intervals; there are `n + 1` nodes.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        self.ell / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        self.ell * j as f64 / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|j| self.node(j)).collect()
    }

    /// Grid on `[0, x_n0]` sharing this grid's spacing.
    pub fn prefix(&self, n0: usize) -> Result<Self, GridError> {
        Self::new(self.node(n0), n0)
    }

    pub fn ensure_same(&self, other: &SpaceGrid, what: &str) -> Result<(), GridMismatch> {
        if self == other {
            Ok(())
        } else {
            Err(GridMismatch(format!(
                "{what}: space grid (ell={}, n={}) vs (ell={}, n={})",
                self.ell, self.n, other.ell, other.n
            )))
        }
    }
}

/// Uniform grid `t_k = k * horizon / m` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    m: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, m: usize) -> Result<Self, GridError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::NonpositiveHorizon(horizon));
        }
        if m < MIN_INTERVALS {
            return Err(GridError::TooFewIntervals { axis: "time", count: m });
        }
        Ok(Self { horizon, m })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.m as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.m as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.m).map(|k| self.node(k)).collect()
    }

    pub fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<(), GridMismatch> {
        if self == other {
            Ok(())
        } else {
            Err(GridMismatch(format!(
                "{what}: time grid (T={}, m={}) vs (T={}, m={})",
                self.horizon, self.m, other.horizon, other.m
            )))
        }
    }
}

pub fn make_grids(ell: f64, horizon: f64, n: usize, m: usize) -> Result<(SpaceGrid, TimeGrid), GridError> {
    Ok((SpaceGrid::new(ell, n)?, TimeGrid::new(horizon, m)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientRole {
    Diffusion,
    PotentialP,
    PotentialQ,
    Initial,
}

/// A real function sampled at the nodes of a [`SpaceGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    grid: SpaceGrid,
    values: Vec<f64>,
    role: CoefficientRole,
}

impl CoefficientField {
    pub fn sample<F>(f: F, grid: SpaceGrid, role: CoefficientRole) -> Result<Self, CoefficientError>
    where
        F: Fn(f64) -> f64,
    {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::from_values(grid, values, role)
    }

    pub fn from_values(grid: SpaceGrid, values: Vec<f64>, role: CoefficientRole) -> Result<Self, CoefficientError> {
        if values.len() != grid.len() {
            return Err(CoefficientError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        for (j, &value) in values.iter().enumerate() {
            let x = grid.node(j);
            if !value.is_finite() {
                return Err(CoefficientError::NonFinite { node: j, x, value });
            }
            if role == CoefficientRole::Diffusion && value <= 0.0 {
                return Err(CoefficientError::NonpositiveDiffusion { node: j, x, value });
            }
        }
        Ok(Self { grid, values, role })
    }

    pub fn constant(c: f64, grid: SpaceGrid, role: CoefficientRole) -> Result<Self, CoefficientError> {
        Self::sample(|_| c, grid, role)
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> CoefficientRole {
        self.role
    }

    pub fn with_role(&self, role: CoefficientRole) -> Result<Self, CoefficientError> {
        Self::from_values(self.grid, self.values.clone(), role)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Restriction to the first `n0 + 1` nodes.
    pub fn prefix(&self, n0: usize) -> Result<Self, GridError> {
        let grid = self.grid.prefix(n0)?;
        Ok(Self {
            grid,
            values: self.values[..=n0].to_vec(),
            role: self.role,
        })
    }

    /// Piecewise-cubic (Catmull-Rom) interpolant, clamped outside `[0, ell]`.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.grid.n();
        let h = self.grid.h();
        let s = (x / h).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let u = s - i as f64;
        let v = &self.values;
        let p1 = v[i];
        let p2 = v[i + 1];
        // one-sided tangents at the ends keep linear data exact
        let p0 = if i == 0 { 2.0 * p1 - p2 } else { v[i - 1] };
        let p3 = if i + 1 == n { 2.0 * p2 - p1 } else { v[i + 2] };
        let m1 = 0.5 * (p2 - p0);
        let m2 = 0.5 * (p3 - p1);
        let u2 = u * u;
        let u3 = u2 * u;
        (2.0 * u3 - 3.0 * u2 + 1.0) * p1 + (u3 - 2.0 * u2 + u) * m1 + (-2.0 * u3 + 3.0 * u2) * p2 + (u3 - u2) * m2
    }

    /// CSV with header `x,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,value\n");
        for (j, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.grid.node(j), v));
        }
        out
    }
}

/// One detected zero of a sampled initial value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectedZero {
    pub location: f64,
    pub slope: f64,
    /// Within one grid spacing of `x = 0` or `x = ell`.
    pub near_endpoint: bool,
    pub simple: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroReport {
    pub zeros: Vec<DetectedZero>,
    pub slope_tol: f64,
    pub admissible: bool,
}

impl ZeroReport {
    pub fn endpoint_zeros(&self) -> impl Iterator<Item = &DetectedZero> {
        self.zeros.iter().filter(|z| z.near_endpoint)
    }
}

/// Locates the zeros of a sampled initial value and decides whether every
/// one of them is simple.
///
/// Zeros come from three sources: exact (or round-off sized) node values,
/// sign changes between neighbouring nodes, and local minima of `|b|` whose
/// fitted parabola touches zero without a sign change (double zeros that fall
/// between nodes). Slopes are local least-squares fits; a zero is simple when
/// `|slope| > 1e-6 * max|b| / ell`.
pub fn check_b_admissible(b: &CoefficientField) -> ZeroReport {
    let grid = b.grid();
    let v = b.values();
    let n = grid.n();
    let h = grid.h();
    let scale = b.max_abs();
    let slope_tol = 1e-6 * scale / grid.ell();
    if scale == 0.0 {
        // b identically zero: every point is a zero of infinite order
        return ZeroReport {
            zeros: vec![DetectedZero {
                location: 0.0,
                slope: 0.0,
                near_endpoint: true,
                simple: false,
            }],
            slope_tol,
            admissible: false,
        };
    }
    let node_tol = 1e-12 * scale;
    let on_node: Vec<bool> = v.iter().map(|x| x.abs() <= node_tol).collect();

    let mut zeros = Vec::new();
    let mut push = |location: f64, slope: f64| {
        let near_endpoint = location <= h || location >= grid.ell() - h;
        zeros.push(DetectedZero {
            location,
            slope,
            near_endpoint,
            simple: slope.abs() > slope_tol,
        });
    };

    for j in 0..=n {
        if on_node[j] {
            push(grid.node(j), fitted_slope(v, h, j.saturating_sub(1), (j + 1).min(n)));
            continue;
        }
        if j < n && !on_node[j + 1] && v[j] * v[j + 1] < 0.0 {
            let frac = v[j] / (v[j] - v[j + 1]);
            let loc = grid.node(j) + frac * h;
            let lo = j.saturating_sub(1);
            let hi = (j + 2).min(n);
            push(loc, fitted_slope(v, h, lo, hi));
            continue;
        }
        // touching zero between nodes: local minimum of |b| with no sign change
        if j > 0 && j < n && !on_node[j - 1] && !on_node[j + 1] {
            let (l, c, r) = (v[j - 1], v[j], v[j + 1]);
            let same_sign = l * c > 0.0 && c * r > 0.0;
            if same_sign && c.abs() <= l.abs() && c.abs() < r.abs() {
                let curv = (l - 2.0 * c + r) / (h * h);
                let lin = (r - l) / (2.0 * h);
                if curv != 0.0 {
                    let offset = -lin / curv;
                    let extreme = c - 0.5 * lin * lin / curv;
                    if offset.abs() <= h && extreme * c.signum() <= 1e-8 * scale {
                        push(grid.node(j) + offset, 0.0);
                    }
                }
            }
        }
    }
    zeros.sort_by(|a, b| a.location.total_cmp(&b.location));
    let admissible = zeros.iter().all(|z| z.simple);
    ZeroReport {
        zeros,
        slope_tol,
        admissible,
    }
}

/// Least-squares slope of the samples `lo..=hi`.
fn fitted_slope(v: &[f64], h: f64, lo: usize, hi: usize) -> f64 {
    let count = (hi - lo + 1) as f64;
    let mean_s = (lo + hi) as f64 / 2.0;
    let mean_v = v[lo..=hi].iter().sum::<f64>() / count;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &val) in v[lo..=hi].iter().enumerate() {
        let ds = (lo + i) as f64 - mean_s;
        num += ds * (val - mean_v);
        den += ds * ds;
    }
    num / den / h
}

/// Complex solution values on a space-time grid, stored row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionField {
    sgrid: SpaceGrid,
    tgrid: TimeGrid,
    values: Vec<Complex64>,
}

impl EvolutionField {
    pub fn from_values(sgrid: SpaceGrid, tgrid: TimeGrid, values: Vec<Complex64>) -> Result<Self, GridMismatch> {
        if values.len() != sgrid.len() * tgrid.len() {
            return Err(GridMismatch(format!(
                "field has {} entries, grid needs {}",
                values.len(),
                sgrid.len() * tgrid.len()
            )));
        }
        Ok(Self { sgrid, tgrid, values })
    }

    pub fn from_fn<F>(sgrid: SpaceGrid, tgrid: TimeGrid, f: F) -> Self
    where
        F: Fn(f64, f64) -> Complex64,
    {
        let xs = sgrid.nodes();
        let mut values = Vec::with_capacity(sgrid.len() * tgrid.len());
        for k in 0..tgrid.len() {
            let t = tgrid.node(k);
            values.extend(xs.iter().map(|&x| f(t, x)));
        }
        Self { sgrid, tgrid, values }
    }

    pub fn zeros(sgrid: SpaceGrid, tgrid: TimeGrid) -> Self {
        Self {
            sgrid,
            tgrid,
            values: vec![Complex64::new(0.0, 0.0); sgrid.len() * tgrid.len()],
        }
    }

    pub fn sgrid(&self) -> &SpaceGrid {
        &self.sgrid
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn at(&self, k: usize, j: usize) -> Complex64 {
        self.values[k * self.sgrid.len() + j]
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        let w = self.sgrid.len();
        &self.values[k * w..(k + 1) * w]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Complex64] {
        let w = self.sgrid.len();
        &mut self.values[k * w..(k + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.values.chunks(self.sgrid.len())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            sgrid: self.sgrid,
            tgrid: self.tgrid,
            values: self.values.iter().map(|z| z * c).collect(),
        }
    }

    /// CSV with header `t,x,re,im`.
    pub fn to_csv(&self) -> String {
        let xs = self.sgrid.nodes();
        let mut out = String::from("t,x,re,im\n");
        for (k, row) in self.rows().enumerate() {
            let t = self.tgrid.node(k);
            for (x, z) in xs.iter().zip(row) {
                out.push_str(&format!("{},{},{},{}\n", t, x, z.re, z.im));
            }
        }
        out
    }
}

/// Lateral Cauchy data at `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyTrace {
    pub tgrid: TimeGrid,
    pub u0: Vec<Complex64>,
    pub ux0: Vec<Complex64>,
}

impl CauchyTrace {
    pub fn new(tgrid: TimeGrid, u0: Vec<Complex64>, ux0: Vec<Complex64>) -> Result<Self, GridMismatch> {
        if u0.len() != tgrid.len() || ux0.len() != tgrid.len() {
            return Err(GridMismatch(format!(
                "trace lengths ({}, {}) do not match {} time nodes",
                u0.len(),
                ux0.len(),
                tgrid.len()
            )));
        }
        Ok(Self { tgrid, u0, ux0 })
    }

    /// CSV with header `t,re_u0,im_u0,re_ux0,im_ux0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,re_u0,im_u0,re_ux0,im_ux0\n");
        for k in 0..self.tgrid.len() {
            let (u, d) = (self.u0[k], self.ux0[k]);
            out.push_str(&format!("{},{},{},{},{}\n", self.tgrid.node(k), u.re, u.im, d.re, d.im));
        }
        out
    }
}

/// Composite trapezoid rule on uniform samples.
pub fn trapezoid<T>(values: &[T], h: f64) -> T
where
    T: Copy + num_traits::Zero + std::ops::Mul<f64, Output = T>,
{
    match values.len() {
        0 | 1 => T::zero(),
        len => {
            let inner = values[1..len - 1].iter().fold(T::zero(), |acc, &v| acc + v);
            (values[0] * 0.5 + inner + values[len - 1] * 0.5) * h
        }
    }
}

/// Running trapezoid integral; `out[0] = 0`.
pub fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Running integral with cubic-interpolation cell weights, fourth-order
/// accurate; `out[0] = 0`. Needs at least four samples, otherwise falls back
/// to [`cumulative_trapezoid`].
pub fn cumulative_quadrature4(values: &[f64], h: f64) -> Vec<f64> {
    let len = values.len();
    if len < 4 {
        return cumulative_trapezoid(values, h);
    }
    let f = values;
    let w = h / 24.0;
    let mut out = Vec::with_capacity(len);
    let mut acc = 0.0;
    out.push(0.0);
    for j in 0..len - 1 {
        let cell = if j == 0 {
            w * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3])
        } else if j == len - 2 {
            w * (9.0 * f[j + 1] + 19.0 * f[j] - 5.0 * f[j - 1] + f[j - 2])
        } else {
            w * (13.0 * (f[j] + f[j + 1]) - f[j - 1] - f[j + 2])
        };
        acc += cell;
        out.push(acc);
    }
    out
}

/// Second-order one-sided derivative at the left end: `(-3u0 + 4u1 - u2) / (2h)`.
pub fn left_derivative<T>(u0: T, u1: T, u2: T, h: f64) -> T
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + std::ops::Sub<Output = T>,
{
    (u1 * 4.0 - u0 * 3.0 - u2) * (0.5 / h)
}

/// Central second difference `(u_{j-1} - 2u_j + u_{j+1}) / h^2`.
pub fn second_difference<T>(um: T, u: T, up: T, h: f64) -> T
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + std::ops::Sub<Output = T>,
{
    (um + up - u * 2.0) * (1.0 / (h * h))
}
