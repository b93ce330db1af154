//! The transformation kernel `K(x, y)` on the triangle `0 <= y <= x <= ell`:
//!
//! ```text
//! a(x) K_xx - (a(y) K)_yy = K (q(x) - p(y)),
//! 2 a(x) d/dx K(x,x) + a'(x) K(x,x) = q(x) - p(x),   K(0,0) = 0,
//! a(0) K_y(x,0) + a'(0) K(x,0) = 0.
//! ```
//!
//! The solver works with `L = a(y) K`, for which the equation reads
//! `a(x) L_xx - a(y) L_yy = L (q(x) - p(y))` and the boundary condition at
//! `y = 0` becomes `L_y = 0`. Columns of increasing `x` are filled by an
//! explicit leapfrog stencil; the node just below the diagonal is closed by
//! integrating the equation over a small rectangle in characteristic
//! coordinates `u = x + y`, `v = x - y`.

use thiserror::Error;

use crate::corelab::{cumulative_quadrature4, CoefficientField, GridMismatch, SpaceGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GoursatError {
    #[error(transparent)]
    Grid(#[from] GridMismatch),
    #[error(
        "mesh condition violated: sqrt(a(y)/a(x)) = {speed} > 1 at x = {x}, y = {y}; \
         the square-mesh march needs a(y) <= a(x) for y <= x"
    )]
    MeshCondition { speed: f64, x: f64, y: f64 },
    #[error("non-finite kernel value in column {column} (x = {x})")]
    NonFinite { column: usize, x: f64 },
    #[error("characteristic start x0 = {x0} must lie in (0, {ell})")]
    StartOutOfRange { x0: f64, ell: f64 },
    #[error("characteristic from x0 = {x0} did not reach y = 0 within {steps} steps")]
    AxisNotReached { x0: f64, steps: usize },
}

/// Nodes `(x_i, y_j)`, `0 <= j <= i <= n`, of a uniform square mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleGrid {
    base: SpaceGrid,
}

impl TriangleGrid {
    pub fn new(base: SpaceGrid) -> Self {
        Self { base }
    }

    pub fn base(&self) -> &SpaceGrid {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn h(&self) -> f64 {
        self.base.h()
    }

    pub fn node_count(&self) -> usize {
        let n = self.n();
        (n + 1) * (n + 2) / 2
    }

    /// Row-major position of node `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i <= self.n());
        i * (i + 1) / 2 + j
    }
}

/// Kernel values on a [`TriangleGrid`], stored column by column in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    tri: TriangleGrid,
    values: Vec<f64>,
}

impl Kernel {
    pub fn zeros(tri: TriangleGrid) -> Self {
        Self {
            tri,
            values: vec![0.0; tri.node_count()],
        }
    }

    /// Samples `f(x, y)` at every triangle node.
    pub fn from_fn(tri: TriangleGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(tri.node_count());
        for i in 0..=tri.n() {
            let x = tri.base.node(i);
            for j in 0..=i {
                values.push(f(x, tri.base.node(j)));
            }
        }
        Self { tri, values }
    }

    pub fn tri(&self) -> &TriangleGrid {
        &self.tri
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.tri.index(i, j)]
    }

    /// `K(x_i, y_j)` for `j = 0..=i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let start = self.tri.index(i, 0);
        &self.values[start..=start + i]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..=self.tri.n()).map(|i| self.at(i, i)).collect()
    }

    /// `K(x_i, 0)` for every column.
    pub fn bottom(&self) -> Vec<f64> {
        (0..=self.tri.n()).map(|i| self.at(i, 0)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// The kernel on the sub-triangle over `[0, x_{n0}]`.
    pub fn restrict(&self, n0: usize) -> Result<Self, GridMismatch> {
        let base = self
            .tri
            .base
            .prefix(n0)
            .map_err(|e| GridMismatch(format!("cannot restrict kernel to {n0} intervals: {e}")))?;
        let tri = TriangleGrid::new(base);
        Ok(Self {
            tri,
            values: self.values[..tri.node_count()].to_vec(),
        })
    }

    /// CSV with header `x,y,K`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,K\n");
        for i in 0..=self.tri.n() {
            let x = self.tri.base.node(i);
            for (j, v) in self.row(i).iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", x, self.tri.base.node(j), v));
            }
        }
        out
    }
}

fn shared_grid(a: &CoefficientField, p: &CoefficientField, q: &CoefficientField) -> Result<SpaceGrid, GridMismatch> {
    a.grid().ensure_same(p.grid(), "diffusion vs p")?;
    a.grid().ensure_same(q.grid(), "diffusion vs q")?;
    Ok(*a.grid())
}

/// `K(x, x) = a(x)^{-1/2} int_0^x (q - p) / (2 sqrt(a)) ds`, integrated to fourth order.
pub fn diagonal_kernel(
    a: &CoefficientField,
    p: &CoefficientField,
    q: &CoefficientField,
) -> Result<Vec<f64>, GoursatError> {
    let grid = shared_grid(a, p, q)?;
    let integrand: Vec<f64> = (0..grid.len())
        .map(|j| (q.values()[j] - p.values()[j]) / (2.0 * a.values()[j].sqrt()))
        .collect();
    let running = cumulative_quadrature4(&integrand, grid.h());
    Ok(running
        .iter()
        .zip(a.values())
        .map(|(s, av)| s / av.sqrt())
        .collect())
}

/// Solves the kernel system on `tri`.
pub fn solve_kernel(
    a: &CoefficientField,
    p: &CoefficientField,
    q: &CoefficientField,
    tri: &TriangleGrid,
) -> Result<Kernel, GoursatError> {
    let diagonal = diagonal_kernel(a, p, q)?;
    solve_kernel_with_source(a, p, q, tri, &diagonal, |_, _| 0.0)
}

/// General Goursat solve with prescribed diagonal values and a forcing
/// `s(x, y)` added to the equation:
/// `a(x) K_xx - (a(y) K)_yy - K (q(x) - p(y)) = s(x, y)`.
///
/// Returned diagonal entries are `diagonal` verbatim.
pub fn solve_kernel_with_source<S>(
    a: &CoefficientField,
    p: &CoefficientField,
    q: &CoefficientField,
    tri: &TriangleGrid,
    diagonal: &[f64],
    source: S,
) -> Result<Kernel, GoursatError>
where
    S: Fn(f64, f64) -> f64,
{
    let grid = shared_grid(a, p, q)?;
    grid.ensure_same(tri.base(), "coefficients vs triangle")?;
    if diagonal.len() != grid.len() {
        return Err(GridMismatch(format!("diagonal has {} values for {} nodes", diagonal.len(), grid.len())).into());
    }
    check_mesh_condition(a)?;

    let n = grid.n();
    let h = grid.h();
    let h2 = h * h;
    let av = a.values();
    let (pv, qv) = (p.values(), q.values());
    let ell: Vec<f64> = diagonal.iter().zip(av).map(|(g, a)| g * a).collect();
    // right-hand side of the L equation at node (i, j) for a given L value
    let forcing = |i: usize, j: usize, l: f64| l * (qv[i] - pv[j]) + av[j] * source(grid.node(i), grid.node(j));

    let mut l = vec![0.0; tri.node_count()];
    let idx = |i: usize, j: usize| i * (i + 1) / 2 + j;
    l[0] = ell[0];
    // column 1: Taylor expansion about the origin, even in y
    l[idx(1, 1)] = ell[1];
    l[idx(1, 0)] = ell[1] - (ell[2] - 2.0 * ell[1] + ell[0]) / 4.0 + h2 * forcing(0, 0, ell[0]) / (4.0 * av[0]);

    for i in 1..n {
        let (prev, cur, next) = (idx(i - 1, 0), idx(i, 0), idx(i + 1, 0));
        for j in 0..i {
            let below = if j == 0 { l[cur + 1] } else { l[cur + j - 1] };
            let lap_y = l[cur + j + 1] - 2.0 * l[cur + j] + below;
            l[next + j] =
                2.0 * l[cur + j] - l[prev + j] + (av[j] * lap_y + h2 * forcing(i, j, l[cur + j])) / av[i];
        }

        // rectangle A=(i+1,i), D=(i,i-1) and diagonal nodes B=(i,i), C=(i+1,i+1)
        let l_d = l[cur + i - 1];
        let f_center =
            0.5 * forcing(i, i - 1, l_d) + 0.25 * forcing(i, i, ell[i]) + 0.25 * forcing(i + 1, i + 1, ell[i + 1]);
        let two_below = if i >= 2 { l[cur + i - 2] } else { l[cur + 1] };
        let l_yy = (ell[i] - 2.0 * l_d + two_below) / h2;
        let l_xx = (av[i] * l_yy + f_center) / av[i];
        let a_diff = 0.25 * (av[i + 1] - av[i - 1]);
        let a_sum = 2.0 * av[i];
        let l_uv = (f_center - 0.5 * a_diff * (l_xx + l_yy)) / (2.0 * a_sum);
        l[next + i] = l_d + 0.5 * (ell[i + 1] - ell[i - 1]) + 2.0 * h2 * l_uv;
        l[next + i + 1] = ell[i + 1];

        if l[next..=next + i + 1].iter().any(|v| !v.is_finite()) {
            return Err(GoursatError::NonFinite {
                column: i + 1,
                x: grid.node(i + 1),
            });
        }
    }

    let mut kernel = Kernel { tri: *tri, values: l };
    for i in 0..=n {
        let start = idx(i, 0);
        for j in 0..i {
            kernel.values[start + j] /= av[j];
        }
        kernel.values[start + i] = diagonal[i];
    }
    Ok(kernel)
}

fn check_mesh_condition(a: &CoefficientField) -> Result<(), GoursatError> {
    let av = a.values();
    let grid = a.grid();
    let mut running = (0usize, av[0]);
    for (i, &ai) in av.iter().enumerate() {
        if av[i] > running.1 {
            running = (i, ai);
        }
        if running.1 > ai * (1.0 + 1e-12) {
            return Err(GoursatError::MeshCondition {
                speed: (running.1 / ai).sqrt(),
                x: grid.node(i),
                y: grid.node(running.0),
            });
        }
    }
    Ok(())
}

/// Empirical constant in `sup_y |K(x, y)| <= C x max_{s <= x} |p(s) - q(s)|`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct KernelBound {
    pub constant: f64,
    /// Set when `p = q` everywhere, so the bound says nothing.
    pub vacuous: bool,
    pub columns_used: usize,
}

pub fn kernel_bound_fit(kernel: &Kernel, p: &CoefficientField, q: &CoefficientField) -> Result<KernelBound, GoursatError> {
    p.grid().ensure_same(q.grid(), "p vs q")?;
    p.grid().ensure_same(kernel.tri().base(), "potentials vs kernel")?;
    let grid = p.grid();
    let mut contrast = 0.0_f64;
    let mut constant = 0.0_f64;
    let mut used = 0;
    for i in 0..=grid.n() {
        contrast = contrast.max((p.values()[i] - q.values()[i]).abs());
        let denom = grid.node(i) * contrast;
        if denom < 1e-14 {
            continue;
        }
        let sup = kernel.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        constant = constant.max(sup / denom);
        used += 1;
    }
    Ok(KernelBound {
        constant,
        vacuous: used == 0,
        columns_used: used,
    })
}

/// The curve `dy/dx = -sqrt(a(y) / a(x))` through `(x0, x0)`, followed to `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicCurve {
    pub start: f64,
    /// `(x, y)` pairs with `x` increasing and `y` decreasing; the last one lies on `y = 0`.
    pub samples: Vec<(f64, f64)>,
    /// The `x` where the curve meets `y = 0`.
    pub axis_hit: f64,
    /// Set when the curve runs past `x = ell`, where `a` is extended by its end value.
    pub left_domain: bool,
}

impl CharacteristicCurve {
    /// CSV with header `x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in &self.samples {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

/// Integrates the characteristic through `(x0, x0)` with 512 RK4 steps per `x0`.
pub fn characteristic_curve(a: &CoefficientField, x0: f64) -> Result<CharacteristicCurve, GoursatError> {
    let ell = a.grid().ell();
    characteristic_curve_with(|x| a.interpolate(x), ell, x0, x0 / 512.0)
}

/// [`characteristic_curve`] for an arbitrary positive `a` and RK4 step.
pub fn characteristic_curve_with<A>(a: A, ell: f64, x0: f64, step: f64) -> Result<CharacteristicCurve, GoursatError>
where
    A: Fn(f64) -> f64,
{
    if !(x0 > 0.0 && x0 < ell) {
        return Err(GoursatError::StartOutOfRange { x0, ell });
    }
    let slope = |x: f64, y: f64| -(a(y.max(0.0)) / a(x)).sqrt();
    let rk4 = |x: f64, y: f64, s: f64| {
        let k1 = slope(x, y);
        let k2 = slope(x + 0.5 * s, y + 0.5 * s * k1);
        let k3 = slope(x + 0.5 * s, y + 0.5 * s * k2);
        let k4 = slope(x + s, y + s * k3);
        y + s * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    };
    let max_steps = 100_000_000usize.min((1e3 * ell / step) as usize + 16);
    let mut samples = vec![(x0, x0)];
    let (mut x, mut y) = (x0, x0);
    for _ in 0..max_steps {
        let y_next = rk4(x, y, step);
        if y_next > 0.0 {
            x += step;
            y = y_next;
            samples.push((x, y));
            continue;
        }
        // secant (regula falsi) on the step length for the axis crossing
        let (mut s_lo, mut f_lo) = (0.0, y);
        let (mut s_hi, mut f_hi) = (step, y_next);
        let mut s = step;
        for _ in 0..100 {
            s = s_lo - f_lo * (s_hi - s_lo) / (f_hi - f_lo);
            let f = rk4(x, y, s);
            if f.abs() <= 1e-15 * x0 {
                break;
            }
            if f > 0.0 {
                s_lo = s;
                f_lo = f;
            } else {
                s_hi = s;
                f_hi = f;
            }
        }
        let axis_hit = x + s;
        samples.push((axis_hit, 0.0));
        return Ok(CharacteristicCurve {
            start: x0,
            samples,
            axis_hit,
            left_domain: axis_hit > ell,
        });
    }
    Err(GoursatError::AxisNotReached { x0, steps: max_steps })
}
