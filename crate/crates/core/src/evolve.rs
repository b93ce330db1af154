//! Crank–Nicolson solver for `sigma u_t = a(x) u_xx - p(x) u`, Cauchy-trace
//! extraction at `x = 0`, and the centred-stencil PDE residual.

use num_complex::Complex64;
use thiserror::Error;

use crate::corelab::{
    left_derivative, second_difference, CauchyTrace, CoefficientField, EvolutionField, GridMismatch, Sigma,
    SpaceGrid, TimeGrid,
};
use crate::tridiag::{Tridiag, TridiagLu};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error("sigma = {0} has negative real part; forward simulation would be backward parabolic")]
    InadmissibleSigma(Sigma),
    #[error("singular Crank-Nicolson system at step {step} (pivot row {row})")]
    SingularSystem { step: usize, row: usize },
    #[error("prescribed {side} trace has {got} samples, time grid needs {expected}")]
    TraceLength {
        side: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite solution value at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Grid(#[from] GridMismatch),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum BoundaryCondition {
    #[default]
    DirichletZero,
    NeumannZero,
    /// Dirichlet values `u(t_k, boundary)` for every time node.
    PrescribedTrace(Vec<Complex64>),
}

impl BoundaryCondition {
    /// True when the boundary value is imposed, so the node is not an unknown.
    pub fn fixes_value(&self) -> bool {
        !matches!(self, BoundaryCondition::NeumannZero)
    }

    fn value_at(&self, k: usize) -> Complex64 {
        match self {
            BoundaryCondition::PrescribedTrace(series) => series[k],
            _ => Complex64::new(0.0, 0.0),
        }
    }

    fn check_len(&self, side: &'static str, tgrid: &TimeGrid) -> Result<(), EvolveError> {
        if let BoundaryCondition::PrescribedTrace(series) = self {
            if series.len() != tgrid.len() {
                return Err(EvolveError::TraceLength {
                    side,
                    got: series.len(),
                    expected: tgrid.len(),
                });
            }
        }
        Ok(())
    }

    /// The same condition seen on a reversed, conjugated time axis.
    pub fn time_reversed(&self) -> Self {
        match self {
            BoundaryCondition::PrescribedTrace(series) => {
                BoundaryCondition::PrescribedTrace(series.iter().rev().map(|z| z.conj()).collect())
            }
            other => other.clone(),
        }
    }
}

/// Boundary conditions at `x = 0` (left) and `x = ell` (right).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryConditionSpec {
    pub left: BoundaryCondition,
    pub right: BoundaryCondition,
}

impl BoundaryConditionSpec {
    pub fn dirichlet() -> Self {
        Self::default()
    }

    /// Zero flux at `x = 0`, Dirichlet at `x = ell`.
    pub fn neumann_left() -> Self {
        Self {
            left: BoundaryCondition::NeumannZero,
            right: BoundaryCondition::DirichletZero,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        !matches!(self.left, BoundaryCondition::PrescribedTrace(_))
            && !matches!(self.right, BoundaryCondition::PrescribedTrace(_))
    }

    pub fn time_reversed(&self) -> Self {
        Self {
            left: self.left.time_reversed(),
            right: self.right.time_reversed(),
        }
    }
}

/// The theta = 1/2 discretisation on a fixed grid: `M+ u^{k+1} = M- u^k + g`,
/// with `M± = sigma/dt ± A/2` acting on the unknown nodes.
#[derive(Debug, Clone)]
pub(crate) struct CrankNicolson {
    /// Index of the first / last unknown node.
    pub first: usize,
    pub last: usize,
    pub plus: Tridiag,
    pub minus: Tridiag,
    pub lu: TridiagLu,
    /// Coupling of the first / last unknown to a fixed boundary value.
    pub left_coupling: f64,
    pub right_coupling: f64,
}

impl CrankNicolson {
    pub fn new(
        sigma: Sigma,
        a: &CoefficientField,
        p: &CoefficientField,
        bc: &BoundaryConditionSpec,
        dt: f64,
    ) -> Result<Self, EvolveError> {
        if sigma.re < 0.0 {
            return Err(EvolveError::InadmissibleSigma(sigma));
        }
        a.grid().ensure_same(p.grid(), "diffusion vs potential")?;
        let grid = a.grid();
        let n = grid.n();
        let h2 = grid.h() * grid.h();
        let av = a.values();
        let pv = p.values();
        let first = if bc.left.fixes_value() { 1 } else { 0 };
        let last = if bc.right.fixes_value() { n - 1 } else { n };
        let size = last - first + 1;
        let zero = Complex64::new(0.0, 0.0);
        // spatial operator A = -a D^2 + p on the unknown nodes
        let mut op = Tridiag {
            lower: vec![zero; size],
            diag: vec![zero; size],
            upper: vec![zero; size],
        };
        for (r, j) in (first..=last).enumerate() {
            let c = av[j] / h2;
            op.diag[r] = Complex64::new(2.0 * c + pv[j], 0.0);
            if j == 0 {
                // ghost node u_{-1} = u_1
                op.upper[r] = Complex64::new(-2.0 * c, 0.0);
            } else if j == n {
                op.lower[r] = Complex64::new(-2.0 * c, 0.0);
            } else {
                if r > 0 {
                    op.lower[r] = Complex64::new(-c, 0.0);
                }
                if r + 1 < size {
                    op.upper[r] = Complex64::new(-c, 0.0);
                }
            }
        }
        let sigma_over_dt = sigma.value() / dt;
        let shift = |sign: f64| Tridiag {
            lower: op.lower.iter().map(|v| v * (0.5 * sign)).collect(),
            diag: op.diag.iter().map(|v| sigma_over_dt + v * (0.5 * sign)).collect(),
            upper: op.upper.iter().map(|v| v * (0.5 * sign)).collect(),
        };
        let plus = shift(1.0);
        let minus = shift(-1.0);
        let lu = plus
            .factor()
            .map_err(|e| EvolveError::SingularSystem { step: 1, row: e.row })?;
        let left_coupling = if first == 1 { av[1] / h2 } else { 0.0 };
        let right_coupling = if last == n - 1 { av[n - 1] / h2 } else { 0.0 };
        Ok(Self {
            first,
            last,
            plus,
            minus,
            lu,
            left_coupling,
            right_coupling,
        })
    }

    pub fn unknowns(&self) -> usize {
        self.last - self.first + 1
    }

    /// Advances one full-grid row. `prev` holds step k, `next` receives step
    /// k+1; its fixed boundary entries must already be set.
    pub fn step(&self, prev: &[Complex64], next: &mut [Complex64], scratch: &mut [Complex64]) {
        let (f, l) = (self.first, self.last);
        self.minus.mul_vec(&prev[f..=l], scratch);
        let size = self.unknowns();
        if f == 1 {
            scratch[0] += (prev[0] + next[0]) * (0.5 * self.left_coupling);
        }
        if l + 1 < prev.len() {
            scratch[size - 1] += (prev[l + 1] + next[l + 1]) * (0.5 * self.right_coupling);
        }
        self.lu.solve(scratch);
        next[f..=l].copy_from_slice(scratch);
    }
}

/// Solves the forward problem from `u(0, .) = b` over `tgrid`.
pub fn forward_solve(
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
    b: &CoefficientField,
    bc: &BoundaryConditionSpec,
    tgrid: &TimeGrid,
) -> Result<EvolutionField, EvolveError> {
    let initial: Vec<Complex64> = b.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward_solve_complex(sigma, a, p, &initial, b.grid(), bc, tgrid)
}

/// [`forward_solve`] with complex initial data.
pub fn forward_solve_complex(
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
    initial: &[Complex64],
    sgrid: &SpaceGrid,
    bc: &BoundaryConditionSpec,
    tgrid: &TimeGrid,
) -> Result<EvolutionField, EvolveError> {
    a.grid().ensure_same(sgrid, "diffusion vs initial value")?;
    if initial.len() != sgrid.len() {
        return Err(GridMismatch(format!("initial value has {} samples", initial.len())).into());
    }
    bc.left.check_len("left", tgrid)?;
    bc.right.check_len("right", tgrid)?;
    let scheme = CrankNicolson::new(sigma, a, p, bc, tgrid.dt())?;
    let n = sgrid.n();
    let mut field = EvolutionField::zeros(*sgrid, *tgrid);
    field.row_mut(0).copy_from_slice(initial);
    let mut scratch = vec![Complex64::new(0.0, 0.0); scheme.unknowns()];
    let mut next = vec![Complex64::new(0.0, 0.0); sgrid.len()];
    for k in 1..tgrid.len() {
        if bc.left.fixes_value() {
            next[0] = bc.left.value_at(k);
        }
        if bc.right.fixes_value() {
            next[n] = bc.right.value_at(k);
        }
        scheme.step(field.row(k - 1), &mut next, &mut scratch);
        if next.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(EvolveError::NonFinite { step: k });
        }
        field.row_mut(k).copy_from_slice(&next);
    }
    Ok(field)
}

/// Algebraic residual `max |M+ u^{k+1} - M- u^k - g_k| dt / |sigma|` of the
/// discrete system, i.e. how exactly a field satisfies the scheme.
pub fn scheme_residual(
    u: &EvolutionField,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
    bc: &BoundaryConditionSpec,
) -> Result<f64, EvolveError> {
    u.sgrid().ensure_same(a.grid(), "field vs diffusion")?;
    let tgrid = u.tgrid();
    let scheme = CrankNicolson::new(sigma, a, p, bc, tgrid.dt())?;
    let (f, l) = (scheme.first, scheme.last);
    let size = scheme.unknowns();
    let zero = Complex64::new(0.0, 0.0);
    let (mut lhs, mut rhs) = (vec![zero; size], vec![zero; size]);
    let scale = tgrid.dt() / sigma.value().norm();
    let mut worst = 0.0_f64;
    for k in 1..tgrid.len() {
        let (prev, next) = (u.row(k - 1), u.row(k));
        scheme.plus.mul_vec(&next[f..=l], &mut lhs);
        scheme.minus.mul_vec(&prev[f..=l], &mut rhs);
        if f == 1 {
            rhs[0] += (prev[0] + next[0]) * (0.5 * scheme.left_coupling);
        }
        if l + 1 < prev.len() {
            rhs[size - 1] += (prev[l + 1] + next[l + 1]) * (0.5 * scheme.right_coupling);
        }
        for (x, y) in lhs.iter().zip(&rhs) {
            worst = worst.max((x - y).norm() * scale);
        }
    }
    Ok(worst)
}

/// Reads `u(t, 0)` and the one-sided second-order `u_x(t, 0)`.
pub fn extract_cauchy_trace(u: &EvolutionField) -> CauchyTrace {
    let h = u.sgrid().h();
    let (u0, ux0) = u
        .rows()
        .map(|row| (row[0], left_derivative(row[0], row[1], row[2], h)))
        .unzip();
    CauchyTrace {
        tgrid: *u.tgrid(),
        u0,
        ux0,
    }
}

/// Max over interior nodes of `|sigma D_t u - a D_x^2 u + p u|` with centred stencils.
pub fn pde_residual(u: &EvolutionField, sigma: Sigma, a: &CoefficientField, p: &CoefficientField) -> f64 {
    pde_residual_with(u, sigma, a, p, |_, _| Complex64::new(0.0, 0.0))
}

/// Residual with an extra forcing term `f(k, j)` added inside the modulus.
pub(crate) fn pde_residual_with<F>(
    u: &EvolutionField,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
    forcing: F,
) -> f64
where
    F: Fn(usize, usize) -> Complex64,
{
    let h = u.sgrid().h();
    let dt = u.tgrid().dt();
    let n = u.sgrid().n();
    let m = u.tgrid().m();
    let s = sigma.value();
    let (av, pv) = (a.values(), p.values());
    let mut worst = 0.0_f64;
    for k in 1..m {
        let (prev, row, next) = (u.row(k - 1), u.row(k), u.row(k + 1));
        for j in 1..n {
            let ut = (next[j] - prev[j]) / (2.0 * dt);
            let uxx = second_difference(row[j - 1], row[j], row[j + 1], h);
            let r = s * ut - uxx * av[j] + row[j] * pv[j] + forcing(k, j);
            worst = worst.max(r.norm());
        }
    }
    worst
}

/// Size of the leading truncation terms, `|sigma| max|D_t^3 u|/6 + max|a D_x^4 u|/12`,
/// used to scale PDE-residual gates.
pub fn truncation_scale(u: &EvolutionField, sigma: Sigma, a: &CoefficientField) -> f64 {
    let h = u.sgrid().h();
    let dt = u.tgrid().dt();
    let n = u.sgrid().n();
    let m = u.tgrid().m();
    let mut utt = 0.0_f64;
    for k in 1..m.saturating_sub(2) {
        for j in 1..n {
            let d3 = u.at(k + 2, j) - u.at(k + 1, j) * 3.0 + u.at(k, j) * 3.0 - u.at(k - 1, j);
            utt = utt.max(d3.norm() / (dt * dt * dt));
        }
    }
    let mut uxxxx = 0.0_f64;
    let av = a.values();
    for k in 0..=m {
        let row = u.row(k);
        for j in 2..n.saturating_sub(1) {
            let d4 = row[j - 2] - row[j - 1] * 4.0 + row[j] * 6.0 - row[j + 1] * 4.0 + row[j + 2];
            uxxxx = uxxxx.max(av[j] * d4.norm() / (h * h * h * h));
        }
    }
    sigma.value().norm() * utt / 6.0 + uxxxx / 12.0
}

/// `sum_j |u_j|^2 w_j h` at one time row, with trapezoid end weights.
pub fn weighted_l2_norm(row: &[Complex64], h: f64, weight: impl Fn(usize) -> f64) -> f64 {
    let n = row.len() - 1;
    let mut acc = 0.0;
    for (j, z) in row.iter().enumerate() {
        let end = if j == 0 || j == n { 0.5 } else { 1.0 };
        acc += end * weight(j) * z.norm_sqr();
    }
    (acc * h).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corelab::{make_grids, CoefficientRole};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    struct Setup {
        s: SpaceGrid,
        t: TimeGrid,
        a: CoefficientField,
        p: CoefficientField,
        b: CoefficientField,
    }

    fn setup(n: usize, m: usize, horizon: f64, pc: f64) -> Setup {
        let (s, t) = make_grids(1.0, horizon, n, m).unwrap();
        Setup {
            s,
            t,
            a: CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap(),
            p: CoefficientField::constant(pc, s, CoefficientRole::PotentialP).unwrap(),
            b: CoefficientField::sample(|x| (PI * x).sin(), s, CoefficientRole::Initial).unwrap(),
        }
    }

    #[test]
    fn solved_fields_satisfy_the_scheme() {
        let (s, t) = make_grids(1.0, 0.5, 64, 64).unwrap();
        let a = CoefficientField::sample(|x| 1.0 + x, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::sample(|x| x * x, s, CoefficientRole::PotentialP).unwrap();
        let b = CoefficientField::sample(|x| (PI * x).sin(), s, CoefficientRole::Initial).unwrap();
        for sigma in [Sigma::parabolic(), Sigma::schrodinger()] {
            for bc in [BoundaryConditionSpec::dirichlet(), BoundaryConditionSpec::neumann_left()] {
                let u = forward_solve(sigma, &a, &p, &b, &bc, &t).unwrap();
                assert!(scheme_residual(&u, sigma, &a, &p, &bc).unwrap() < 1e-13);
                let exact = EvolutionField::from_fn(s, t, |tt, x| Complex64::new((-PI * PI * tt).exp() * (PI * x).sin(), 0.0));
                assert!(scheme_residual(&exact, sigma, &a, &p, &bc).unwrap() > 1e-6);
            }
        }
    }

    #[test]
    fn heat_mode_decay() {
        let st = setup(100, 100, 0.1, 0.0);
        let u = forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &BoundaryConditionSpec::dirichlet(), &st.t)
            .unwrap();
        assert_eq!(u.row(0)[37].re, st.b.values()[37]);
        let exact = (-0.1 * PI * PI).exp();
        let got = u.at(100, 50);
        assert!((got.re - exact).abs() < 1e-4, "{} vs {}", got.re, exact);
        assert!(got.im.abs() < 1e-15);
    }

    #[test]
    fn potential_shifts_decay_rate() {
        let st = setup(100, 100, 0.1, 2.0);
        let u = forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &BoundaryConditionSpec::dirichlet(), &st.t)
            .unwrap();
        let exact = (-(PI * PI + 2.0) * 0.1).exp();
        assert!((u.at(100, 50).re - exact).abs() < 1e-4);
    }

    #[test]
    fn schrodinger_mode_modulus_is_preserved() {
        let st = setup(100, 200, 1.0, 0.0);
        let u = forward_solve(Sigma::schrodinger(), &st.a, &st.p, &st.b, &BoundaryConditionSpec::dirichlet(), &st.t)
            .unwrap();
        for k in (0..=200).step_by(20) {
            for j in [10, 50, 77] {
                let expect = (PI * st.s.node(j)).sin();
                assert!((u.at(k, j).norm() - expect).abs() < 1e-3 * expect.max(0.1));
            }
        }
    }

    #[test]
    fn rejects_backward_parabolic() {
        let st = setup(16, 16, 0.1, 0.0);
        let err = forward_solve(
            Sigma::new(-1.0, 0.0).unwrap(),
            &st.a,
            &st.p,
            &st.b,
            &BoundaryConditionSpec::dirichlet(),
            &st.t,
        )
        .unwrap_err();
        assert!(matches!(err, EvolveError::InadmissibleSigma(_)));
    }

    #[test]
    fn prescribed_trace_length_checked() {
        let st = setup(16, 16, 0.1, 0.0);
        let bc = BoundaryConditionSpec {
            left: BoundaryCondition::PrescribedTrace(vec![Complex64::new(0.0, 0.0); 3]),
            right: BoundaryCondition::DirichletZero,
        };
        assert!(matches!(
            forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &bc, &st.t),
            Err(EvolveError::TraceLength { side: "left", .. })
        ));
    }

    #[test]
    fn prescribed_trace_is_imposed() {
        let st = setup(32, 32, 0.2, 0.0);
        let series: Vec<Complex64> = st.t.nodes().iter().map(|&t| Complex64::new(t, 0.0)).collect();
        let bc = BoundaryConditionSpec {
            left: BoundaryCondition::PrescribedTrace(series.clone()),
            right: BoundaryCondition::DirichletZero,
        };
        let u = forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &bc, &st.t).unwrap();
        for k in 1..=32 {
            assert_eq!(u.at(k, 0), series[k]);
        }
    }

    #[test]
    fn cauchy_trace_of_mode() {
        let st = setup(128, 128, 0.2, 0.0);
        let u = forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &BoundaryConditionSpec::dirichlet(), &st.t)
            .unwrap();
        let tr = extract_cauchy_trace(&u);
        for k in 0..=128 {
            let t = st.t.node(k);
            let exact = PI * (-PI * PI * t).exp();
            assert!((tr.ux0[k].re - exact).abs() < 2e-3, "k={k}");
        }
    }

    #[test]
    fn neumann_left_trace_slope_vanishes() {
        let (s, t) = make_grids(1.0, 0.2, 64, 64).unwrap();
        let a = CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::constant(0.0, s, CoefficientRole::PotentialP).unwrap();
        let b = CoefficientField::sample(|x| (0.5 * PI * x).cos(), s, CoefficientRole::Initial).unwrap();
        let u = forward_solve(Sigma::parabolic(), &a, &p, &b, &BoundaryConditionSpec::neumann_left(), &t).unwrap();
        let tr = extract_cauchy_trace(&u);
        let h = s.h();
        for z in &tr.ux0 {
            assert!(z.norm() <= 5.0 * h * h, "{}", z.norm());
        }
    }

    #[test]
    fn stencil_matches_fine_grid_central_difference() {
        // smooth non-polynomial field; oracle: centred difference on a much finer grid
        let f = |t: f64, x: f64| (1.3 * x + 0.2).sin() * (-t).exp() + 0.3 * (2.1 * x).cos() * t;
        let fx = |t: f64, x: f64| 1.3 * (1.3 * x + 0.2).cos() * (-t).exp() - 0.63 * (2.1 * x).sin() * t;
        for n in [32usize, 64] {
            let (s, t) = make_grids(1.0, 1.0, n, 8).unwrap();
            let u = EvolutionField::from_fn(s, t, |t, x| Complex64::new(f(t, x), 0.0));
            let tr = extract_cauchy_trace(&u);
            let hf = 1e-5;
            for (k, d) in tr.ux0.iter().enumerate() {
                let tk = t.node(k);
                // the ghost-extended fine grid evaluates f at -hf
                let oracle = (f(tk, hf) - f(tk, -hf)) / (2.0 * hf);
                assert!((oracle - fx(tk, 0.0)).abs() < 1e-8);
                let h = s.h();
                assert!((d.re - oracle).abs() < 2.0 * h * h, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn residual_zero_field_and_exact_mode() {
        let st = setup(64, 64, 0.2, 0.0);
        let zero = EvolutionField::zeros(st.s, st.t);
        assert_eq!(pde_residual(&zero, Sigma::parabolic(), &st.a, &st.p), 0.0);
        let exact = |n: usize| {
            let st = setup(n, n, 0.2, 0.0);
            let u = EvolutionField::from_fn(st.s, st.t, |t, x| {
                Complex64::new((-PI * PI * t).exp() * (PI * x).sin(), 0.0)
            });
            pde_residual(&u, Sigma::parabolic(), &st.a, &st.p)
        };
        let ratio = exact(32) / exact(64);
        assert!((3.2..4.8).contains(&ratio), "{ratio}");
    }

    #[test]
    fn residual_converges_second_order() {
        let res = |n: usize| {
            let st = setup(n, n, 0.2, 0.0);
            let u =
                forward_solve(Sigma::parabolic(), &st.a, &st.p, &st.b, &BoundaryConditionSpec::dirichlet(), &st.t)
                    .unwrap();
            pde_residual(&u, Sigma::parabolic(), &st.a, &st.p)
        };
        let ratio = res(64) / res(128);
        assert!((3.2..=4.8).contains(&ratio), "{ratio}");
    }

    #[test]
    fn parabolic_maximum_nonincreasing() {
        let (s, t) = make_grids(1.0, 0.5, 64, 64).unwrap();
        let a = CoefficientField::sample(|x| 1.0 + 0.5 * x, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::sample(|x| 2.0 * x * x, s, CoefficientRole::PotentialP).unwrap();
        let b = CoefficientField::sample(|x| (PI * x).sin() + 0.2 * (2.0 * PI * x).sin(), s, CoefficientRole::Initial)
            .unwrap();
        let u = forward_solve(Sigma::parabolic(), &a, &p, &b, &BoundaryConditionSpec::dirichlet(), &t).unwrap();
        let maxes: Vec<f64> = u.rows().map(|r| r.iter().fold(0.0_f64, |m, z| m.max(z.norm()))).collect();
        for w in maxes.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn schrodinger_weighted_norm_conserved() {
        let (s, t) = make_grids(1.0, 1.0, 64, 64).unwrap();
        let a = CoefficientField::sample(|x| 1.0 + x * x, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::sample(|x| 3.0 * x - 1.0, s, CoefficientRole::PotentialP).unwrap();
        let b = CoefficientField::sample(|x| x * (1.0 - x) * (1.0 + 4.0 * x), s, CoefficientRole::Initial).unwrap();
        let u = forward_solve(Sigma::schrodinger(), &a, &p, &b, &BoundaryConditionSpec::dirichlet(), &t).unwrap();
        let av = a.values().to_vec();
        let n0 = weighted_l2_norm(u.row(0), s.h(), |j| 1.0 / av[j]);
        let n1 = weighted_l2_norm(u.row(64), s.h(), |j| 1.0 / av[j]);
        assert!((n0 - n1).abs() <= 1e-10 * t.horizon());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn forward_solve_is_linear(alpha in -3.0..3.0f64, beta in -3.0..3.0f64, c1 in 0.5..3.0f64, c2 in 0.5..6.0f64, neumann in any::<bool>(), im in 0.0..1.0f64) {
            let (s, t) = make_grids(1.0, 0.3, 24, 24).unwrap();
            let a = CoefficientField::sample(|x| 1.0 + 0.3 * x, s, CoefficientRole::Diffusion).unwrap();
            let p = CoefficientField::sample(|x| (3.0 * x).cos(), s, CoefficientRole::PotentialP).unwrap();
            let b1 = CoefficientField::sample(|x| (c1 * x).sin(), s, CoefficientRole::Initial).unwrap();
            let b2 = CoefficientField::sample(|x| (c2 * x * x).cos(), s, CoefficientRole::Initial).unwrap();
            let comb = CoefficientField::sample(|x| alpha * (c1 * x).sin() + beta * (c2 * x * x).cos(), s, CoefficientRole::Initial).unwrap();
            let bc = if neumann { BoundaryConditionSpec::neumann_left() } else { BoundaryConditionSpec::dirichlet() };
            let sigma = Sigma::new(1.0, im).unwrap();
            let u1 = forward_solve(sigma, &a, &p, &b1, &bc, &t).unwrap();
            let u2 = forward_solve(sigma, &a, &p, &b2, &bc, &t).unwrap();
            let u = forward_solve(sigma, &a, &p, &comb, &bc, &t).unwrap();
            for ((z, z1), z2) in u.values().iter().zip(u1.values()).zip(u2.values()) {
                prop_assert!((z - (z1 * alpha + z2 * beta)).norm() < 1e-12);
            }
        }
    }
}
