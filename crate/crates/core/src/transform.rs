//! The Volterra map `v = u + K u` and discrete checks of what it does to
//! solutions of the p-equation.

use num_traits::Zero;
use serde::Serialize;
use thiserror::Error;

use crate::corelab::{left_derivative, trapezoid, CoefficientField, EvolutionField, GridMismatch, Sigma};
use crate::evolve::{extract_cauchy_trace, pde_residual, pde_residual_with, truncation_scale};
use crate::goursat::Kernel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error(transparent)]
    Grid(#[from] GridMismatch),
    #[error(
        "input field fails its own PDE residual gate: residual {residual:e} exceeds \
         10 (dt^2 + h^2) scale = {tolerance:e}"
    )]
    ResidualGate { residual: f64, tolerance: f64 },
}

/// `(K v)(x_i) = int_0^{x_i} K(x_i, y) v(y) dy` by the trapezoid rule on each row.
pub fn apply_kernel<T>(kernel: &Kernel, v: &[T]) -> Result<Vec<T>, GridMismatch>
where
    T: Copy + Zero + std::ops::Mul<f64, Output = T>,
{
    let n = kernel.tri().n();
    if v.len() != n + 1 {
        return Err(GridMismatch(format!("vector has {} samples, kernel grid has {}", v.len(), n + 1)));
    }
    let h = kernel.tri().h();
    let mut products = Vec::with_capacity(n + 1);
    Ok((0..=n)
        .map(|i| {
            products.clear();
            products.extend(kernel.row(i).iter().zip(v).map(|(&k, &w)| w * k));
            trapezoid(&products, h)
        })
        .collect())
}

/// `v(t_k, .) = u(t_k, .) + K u(t_k, .)` for every time row.
pub fn transform_field(u: &EvolutionField, kernel: &Kernel) -> Result<EvolutionField, GridMismatch> {
    u.sgrid().ensure_same(kernel.tri().base(), "field vs kernel")?;
    let mut out = u.clone();
    for k in 0..u.tgrid().len() {
        let ku = apply_kernel(kernel, u.row(k))?;
        for (z, w) in out.row_mut(k).iter_mut().zip(ku) {
            *z += w;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntertwiningReport {
    /// `max |sigma D_t v - a D_x^2 v + q v + a(0) K(x,0) u_x(t,0)|` over interior nodes.
    pub interior_residual: f64,
    pub trace_gap_value: f64,
    pub trace_gap_slope: f64,
    /// Coarse-to-fine residual ratio, when a finer run is supplied.
    pub refinement_ratio: Option<f64>,
}

impl IntertwiningReport {
    pub fn with_refinement(mut self, finer: &IntertwiningReport) -> Self {
        self.refinement_ratio = Some(self.interior_residual / finer.interior_residual);
        self
    }

    /// One-row CSV `interior_residual,trace_gap_value,trace_gap_slope`.
    pub fn to_csv(&self) -> String {
        format!(
            "interior_residual,trace_gap_value,trace_gap_slope\n{},{},{}\n",
            self.interior_residual, self.trace_gap_value, self.trace_gap_slope
        )
    }
}

/// Tolerance `10 (dt^2 + h^2) scale` for the field's own residual.
pub fn residual_gate(u: &EvolutionField, sigma: Sigma, a: &CoefficientField) -> f64 {
    let (h, dt) = (u.sgrid().h(), u.tgrid().dt());
    10.0 * (dt * dt + h * h) * truncation_scale(u, sigma, a)
}

/// Transforms `u` (a solution of the p-equation) and measures how well the
/// result solves the q-equation with boundary forcing `-a(0) K(x,0) u_x(t,0)`.
pub fn intertwining_residual(
    u: &EvolutionField,
    kernel: &Kernel,
    sigma: Sigma,
    a: &CoefficientField,
    p: &CoefficientField,
    q: &CoefficientField,
) -> Result<IntertwiningReport, TransformError> {
    u.sgrid().ensure_same(a.grid(), "field vs diffusion")?;
    a.grid().ensure_same(p.grid(), "diffusion vs p")?;
    a.grid().ensure_same(q.grid(), "diffusion vs q")?;
    let own = pde_residual(u, sigma, a, p);
    let tolerance = residual_gate(u, sigma, a);
    if own > tolerance {
        return Err(TransformError::ResidualGate { residual: own, tolerance });
    }
    let v = transform_field(u, kernel)?;
    let trace = extract_cauchy_trace(u);
    let bottom = kernel.bottom();
    let a0 = a.values()[0];
    let interior_residual = pde_residual_with(&v, sigma, a, q, |k, j| trace.ux0[k] * (a0 * bottom[j]));
    let h = u.sgrid().h();
    let mut trace_gap_value = 0.0_f64;
    let mut trace_gap_slope = 0.0_f64;
    for k in 0..u.tgrid().len() {
        let (ur, vr) = (u.row(k), v.row(k));
        trace_gap_value = trace_gap_value.max((vr[0] - ur[0]).norm());
        let du = left_derivative(ur[0], ur[1], ur[2], h);
        let dv = left_derivative(vr[0], vr[1], vr[2], h);
        trace_gap_slope = trace_gap_slope.max((dv - du).norm());
    }
    Ok(IntertwiningReport {
        interior_residual,
        trace_gap_value,
        trace_gap_slope,
        refinement_ratio: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityProfile {
    /// `x_i -> int_0^{x_i} K(x_i, y) w(y) dy`
    pub profile: Vec<f64>,
    pub max_abs: f64,
}

pub fn data_orthogonality(kernel: &Kernel, w: &[f64]) -> Result<OrthogonalityProfile, GridMismatch> {
    let profile = apply_kernel(kernel, w)?;
    let max_abs = profile.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(OrthogonalityProfile { profile, max_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use crate::corelab::{make_grids, CoefficientRole, SpaceGrid, TimeGrid};
    use crate::evolve::{forward_solve, BoundaryConditionSpec};
    use crate::goursat::{solve_kernel, TriangleGrid};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tri(n: usize) -> TriangleGrid {
        TriangleGrid::new(SpaceGrid::new(1.0, n).unwrap())
    }

    #[test]
    fn zero_and_unit_kernels() {
        let t = tri(16);
        let ones = vec![1.0; 17];
        assert!(apply_kernel(&Kernel::zeros(t), &ones).unwrap().iter().all(|&v| v == 0.0));
        let out = apply_kernel(&Kernel::from_fn(t, |_, _| 1.0), &ones).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert!((v - i as f64 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn polynomial_kernel_against_symbolic_value() {
        // int_0^x (x y) y dy = x^4 / 3
        let err = |n: usize| {
            let t = tri(n);
            let v: Vec<f64> = t.base().nodes();
            let out = apply_kernel(&Kernel::from_fn(t, |x, y| x * y), &v).unwrap();
            (out[n] - 1.0 / 3.0).abs()
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-3);
        assert!((e1 / e2 - 4.0).abs() < 0.05);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(apply_kernel(&Kernel::zeros(tri(16)), &[1.0; 5]).is_err());
    }

    fn mode_problem(n: usize, q_level: f64) -> (EvolutionField, Kernel, CoefficientField, CoefficientField, CoefficientField) {
        let (s, t) = make_grids(1.0, 0.25, n, n).unwrap();
        let a = CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::constant(0.0, s, CoefficientRole::PotentialP).unwrap();
        let q = CoefficientField::constant(q_level, s, CoefficientRole::PotentialQ).unwrap();
        let b = CoefficientField::sample(|x| (PI * x).sin(), s, CoefficientRole::Initial).unwrap();
        let u = forward_solve(Sigma::parabolic(), &a, &p, &b, &BoundaryConditionSpec::dirichlet(), &t).unwrap();
        let k = solve_kernel(&a, &p, &q, &TriangleGrid::new(s)).unwrap();
        (u, k, a, p, q)
    }

    #[test]
    fn transform_preserves_value_trace_and_composes() {
        let (u, k, ..) = mode_problem(64, 1.0);
        let v = transform_field(&u, &k).unwrap();
        for step in 0..=64 {
            assert_eq!(v.at(step, 0), u.at(step, 0));
            let manual = apply_kernel(&k, u.row(step)).unwrap();
            for j in 0..=64 {
                assert_eq!(v.at(step, j), u.at(step, j) + manual[j]);
            }
        }
        let diff = v.values().iter().zip(u.values()).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm()));
        assert!(diff > 0.01 && diff < 0.5, "{diff}");
        assert!(transform_field(&u, &Kernel::zeros(tri(64))).unwrap() == u);
    }

    #[test]
    fn identity_transform_reproduces_own_residual() {
        let (u, _, a, p, _) = mode_problem(64, 0.0);
        let q = p.with_role(CoefficientRole::PotentialQ).unwrap();
        let r = intertwining_residual(&u, &Kernel::zeros(tri(64)), Sigma::parabolic(), &a, &p, &q).unwrap();
        assert_eq!(r.interior_residual, pde_residual(&u, Sigma::parabolic(), &a, &p));
        assert_eq!(r.trace_gap_value, 0.0);
        assert_eq!(r.trace_gap_slope, 0.0);
    }

    #[test]
    fn intertwining_second_order() {
        let reports: Vec<IntertwiningReport> = [32, 64, 128]
            .into_iter()
            .map(|n| {
                let (u, k, a, p, q) = mode_problem(n, 1.0);
                intertwining_residual(&u, &k, Sigma::parabolic(), &a, &p, &q).unwrap()
            })
            .collect();
        for w in reports.windows(2) {
            let r = w[0].clone().with_refinement(&w[1]);
            let ratio = r.refinement_ratio.unwrap();
            assert!((3.2..=4.8).contains(&ratio), "{ratio}");
        }
        for (n, r) in [32.0_f64, 64.0, 128.0].iter().zip(&reports) {
            assert!(r.trace_gap_value <= 1e-12);
            assert!(r.trace_gap_slope <= 4.0 / (n * n), "{}", r.trace_gap_slope);
        }
        assert!(reports[0].to_csv().starts_with("interior_residual,trace_gap_value,trace_gap_slope\n"));
    }

    #[test]
    fn neumann_case_has_no_boundary_forcing() {
        let n = 64;
        let (s, t) = make_grids(1.0, 0.25, n, n).unwrap();
        let a = CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::constant(0.0, s, CoefficientRole::PotentialP).unwrap();
        let q = CoefficientField::constant(1.0, s, CoefficientRole::PotentialQ).unwrap();
        let b = CoefficientField::sample(|x| (0.5 * PI * x).cos(), s, CoefficientRole::Initial).unwrap();
        let u = forward_solve(Sigma::parabolic(), &a, &p, &b, &BoundaryConditionSpec::neumann_left(), &t).unwrap();
        let k = solve_kernel(&a, &p, &q, &TriangleGrid::new(s)).unwrap();
        let with_forcing = intertwining_residual(&u, &k, Sigma::parabolic(), &a, &p, &q).unwrap();
        let v = transform_field(&u, &k).unwrap();
        let homogeneous = pde_residual(&v, Sigma::parabolic(), &a, &q);
        let h2 = s.h() * s.h();
        assert!(homogeneous <= 10.0 * h2 * 10.0, "{homogeneous}");
        assert!((homogeneous - with_forcing.interior_residual).abs() <= 10.0 * h2);
    }

    #[test]
    fn gate_rejects_non_solutions() {
        let (s, t): (SpaceGrid, TimeGrid) = make_grids(1.0, 0.25, 32, 32).unwrap();
        let a = CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::constant(0.0, s, CoefficientRole::PotentialP).unwrap();
        // time-independent sin(pi x) is not a heat solution
        let u = EvolutionField::from_fn(s, t, |_, x| Complex64::new((PI * x).sin(), 0.0));
        let err = intertwining_residual(&u, &Kernel::zeros(tri(32)), Sigma::parabolic(), &a, &p, &p).unwrap_err();
        assert!(matches!(err, TransformError::ResidualGate { .. }));
    }

    #[test]
    fn orthogonality_profiles() {
        let (_, k, ..) = mode_problem(64, 1.0);
        let b: Vec<f64> = SpaceGrid::new(1.0, 64).unwrap().nodes().iter().map(|x| (PI * x).sin()).collect();
        assert!(data_orthogonality(&k, &b).unwrap().max_abs > 1e3 * f64::EPSILON);
        assert_eq!(data_orthogonality(&k, &[0.0; 65]).unwrap().max_abs, 0.0);
        assert_eq!(data_orthogonality(&Kernel::zeros(tri(64)), &b).unwrap().max_abs, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn apply_kernel_bilinear(s1 in -3.0..3.0f64, s2 in -3.0..3.0f64, f1 in 0.1..5.0f64, f2 in 0.1..5.0f64) {
            let t = tri(20);
            let xs = t.base().nodes();
            let k1 = Kernel::from_fn(t, |x, y| (f1 * x * y).sin());
            let k2 = Kernel::from_fn(t, |x, y| x - f2 * y);
            let kc = Kernel::from_fn(t, |x, y| s1 * (f1 * x * y).sin() + s2 * (x - f2 * y));
            let v: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(x.cos(), f2 * x)).collect();
            let w: Vec<Complex64> = xs.iter().map(|&x| Complex64::new(x * x, -1.0)).collect();
            let vc: Vec<Complex64> = v.iter().zip(&w).map(|(a, b)| a * s1 + b * s2).collect();
            let lhs = apply_kernel(&kc, &v).unwrap();
            let (a1, a2) = (apply_kernel(&k1, &v).unwrap(), apply_kernel(&k2, &v).unwrap());
            for ((l, x), y) in lhs.iter().zip(&a1).zip(&a2) {
                prop_assert!((l - (x * s1 + y * s2)).norm() < 1e-12);
            }
            let lhs = apply_kernel(&k1, &vc).unwrap();
            let (b1, b2) = (apply_kernel(&k1, &v).unwrap(), apply_kernel(&k1, &w).unwrap());
            for ((l, x), y) in lhs.iter().zip(&b1).zip(&b2) {
                prop_assert!((l - (x * s1 + y * s2)).norm() < 1e-12);
            }
        }
    }
}
