//! Inverse problem: recover `p(x)` from lateral Cauchy data at `x = 0`.
//!
//! Data simulation, a discrete-adjoint gradient of the output least-squares
//! misfit, an L-BFGS driver (optionally layer by layer), and the two
//! diagnostic checks on the uniqueness argument: the local chain inequality
//! near `x = 0` and the trace gap between two distinct potentials.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corelab::{
    check_b_admissible, left_derivative, trapezoid, CauchyTrace, CoefficientError, CoefficientField, CoefficientRole,
    EvolutionField, GridMismatch, Sigma, SpaceGrid, TimeGrid, ZeroReport,
};
use crate::evolve::{
    extract_cauchy_trace, forward_solve_complex, BoundaryCondition, BoundaryConditionSpec, CrankNicolson, EvolveError,
};
use crate::goursat::{solve_kernel, GoursatError, TriangleGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Goursat(#[from] GoursatError),
    #[error(transparent)]
    Grid(#[from] GridMismatch),
    #[error(transparent)]
    Coefficient(#[from] CoefficientError),
    #[error("final-time anchor needs a purely imaginary sigma (got {0}); otherwise the backward problem is ill-posed")]
    AnchorNeedsUnitarySigma(Sigma),
    #[error("noise level must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("hypothesis violated: b(x)/x is not bounded away from zero near x = 0 (kappa = {kappa:e})")]
    HypothesisViolated { kappa: f64 },
    #[error("layer breakpoints must increase within (0, ell]")]
    InvalidLayers,
}

/// Time at which the initial value `b` is prescribed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `u(0, x) = b(x)`.
    #[default]
    Initial,
    /// `u(T, x) = b(x)`.
    Final,
}

/// Which boundary trace at `x = 0` carries information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Value,
    Slope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseProblemSpec {
    pub sigma: Sigma,
    pub a: CoefficientField,
    pub b: CoefficientField,
    pub bc: BoundaryConditionSpec,
    pub tgrid: TimeGrid,
    pub anchor: Anchor,
    pub noise_level: f64,
    pub seed: u64,
}

impl InverseProblemSpec {
    pub fn new(sigma: Sigma, a: CoefficientField, b: CoefficientField, bc: BoundaryConditionSpec, tgrid: TimeGrid) -> Self {
        Self {
            sigma,
            a,
            b,
            bc,
            tgrid,
            anchor: Anchor::Initial,
            noise_level: 0.0,
            seed: 0,
        }
    }

    pub fn sgrid(&self) -> &SpaceGrid {
        self.a.grid()
    }

    /// Checks the spec; the returned zero report is advisory (an
    /// inadmissible `b` is allowed but voids the uniqueness guarantee).
    pub fn validate(&self) -> Result<ZeroReport, ReconError> {
        self.a.grid().ensure_same(self.b.grid(), "diffusion vs initial value")?;
        if self.anchor == Anchor::Final && self.sigma.re != 0.0 {
            return Err(ReconError::AnchorNeedsUnitarySigma(self.sigma));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(ReconError::InvalidNoise(self.noise_level));
        }
        Ok(check_b_admissible(&self.b))
    }

    /// The trace not already fixed by the left boundary condition.
    pub fn fitted_trace(&self) -> TraceKind {
        if self.bc.left.fixes_value() {
            TraceKind::Slope
        } else {
            TraceKind::Value
        }
    }

    /// Equivalent initial-anchored spec and data (time reversal plus
    /// conjugation; exact for the discrete scheme when `Re sigma = 0`).
    fn normalized(&self, data: &[Complex64]) -> (InverseProblemSpec, Vec<Complex64>) {
        match self.anchor {
            Anchor::Initial => (self.clone(), data.to_vec()),
            Anchor::Final => {
                let mut spec = self.clone();
                spec.anchor = Anchor::Initial;
                spec.bc = self.bc.time_reversed();
                (spec, data.iter().rev().map(|z| z.conj()).collect())
            }
        }
    }
}

fn initial_row(b: &CoefficientField) -> Vec<Complex64> {
    b.values().iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Noise-free solution of the forward problem for potential `p`.
pub fn simulate_field(spec: &InverseProblemSpec, p: &CoefficientField) -> Result<EvolutionField, ReconError> {
    spec.validate()?;
    let p = p.with_role(CoefficientRole::PotentialP)?;
    match spec.anchor {
        Anchor::Initial => Ok(forward_solve_complex(
            spec.sigma,
            &spec.a,
            &p,
            &initial_row(&spec.b),
            spec.sgrid(),
            &spec.bc,
            &spec.tgrid,
        )?),
        Anchor::Final => {
            let w = forward_solve_complex(
                spec.sigma,
                &spec.a,
                &p,
                &initial_row(&spec.b),
                spec.sgrid(),
                &spec.bc.time_reversed(),
                &spec.tgrid,
            )?;
            let m = spec.tgrid.m();
            let mut u = EvolutionField::zeros(*spec.sgrid(), spec.tgrid);
            for k in 0..=m {
                for (z, w) in u.row_mut(k).iter_mut().zip(w.row(m - k)) {
                    *z = w.conj();
                }
            }
            Ok(u)
        }
    }
}

/// Cauchy data for `p_true`, with seeded Gaussian noise of standard
/// deviation `noise_level * max |trace|` added to each trace.
pub fn simulate_cauchy_data(spec: &InverseProblemSpec, p_true: &CoefficientField) -> Result<CauchyTrace, ReconError> {
    let field = simulate_field(spec, p_true)?;
    let mut trace = extract_cauchy_trace(&field);
    if spec.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let complex = !spec.sigma.is_real();
        for series in [&mut trace.u0, &mut trace.ux0] {
            let peak = series.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
            let std = spec.noise_level * peak;
            if std == 0.0 {
                continue;
            }
            if complex {
                let normal = Normal::new(0.0, std / 2f64.sqrt()).expect("finite std");
                for z in series.iter_mut() {
                    *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                }
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                for z in series.iter_mut() {
                    z.re += normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(trace)
}

fn fitted_series(trace: &CauchyTrace, kind: TraceKind) -> &[Complex64] {
    match kind {
        TraceKind::Value => &trace.u0,
        TraceKind::Slope => &trace.ux0,
    }
}

/// `sum_j (p_{j+1} - p_j)^2 / h`
fn roughness(p: &[f64], h: f64) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / h
}

/// Misfit `sum_k dt |trace_sim - data|^2 + reg * sum_j (p_{j+1} - p_j)^2 / h`
/// and its gradient with respect to the nodal values of `p`.
pub fn objective_and_gradient(
    p: &CoefficientField,
    data: &CauchyTrace,
    spec: &InverseProblemSpec,
    reg_weight: f64,
) -> Result<(f64, Vec<f64>), ReconError> {
    spec.validate()?;
    data.tgrid.ensure_same(&spec.tgrid, "data vs spec")?;
    p.grid().ensure_same(spec.sgrid(), "candidate vs spec")?;
    let kind = spec.fitted_trace();
    let (spec, target) = spec.normalized(fitted_series(data, kind));
    let p = p.with_role(CoefficientRole::PotentialP)?;
    let grid = *spec.sgrid();
    let (h, dt) = (grid.h(), spec.tgrid.dt());
    let m = spec.tgrid.m();

    let u = forward_solve_complex(spec.sigma, &spec.a, &p, &initial_row(&spec.b), &grid, &spec.bc, &spec.tgrid)?;
    let scheme = CrankNicolson::new(spec.sigma, &spec.a, &p, &spec.bc, dt)?;
    let (first, last) = (scheme.first, scheme.last);
    let size = scheme.unknowns();

    // trace_sim^k = c . U^k + (fixed boundary part)
    let mut c = vec![0.0; size];
    match kind {
        TraceKind::Value => c[0] = 1.0,
        TraceKind::Slope => {
            c[0] = 2.0 / h;
            c[1] = -0.5 / h;
        }
    }
    let residual: Vec<Complex64> = (0..=m)
        .map(|k| {
            let row = u.row(k);
            let sim = match kind {
                TraceKind::Value => row[0],
                TraceKind::Slope => left_derivative(row[0], row[1], row[2], h),
            };
            sim - target[k]
        })
        .collect();
    let misfit: f64 = residual.iter().map(|r| dt * r.norm_sqr()).sum();
    let pv = p.values();
    let objective = misfit + reg_weight * roughness(pv, h);

    let mut grad = vec![0.0; grid.len()];
    let plus_h = scheme
        .plus
        .conj_transpose()
        .factor()
        .map_err(|e| EvolveError::SingularSystem { step: m, row: e.row })?;
    let minus_h = scheme.minus.conj_transpose();
    let zero = Complex64::new(0.0, 0.0);
    let mut lambda = vec![zero; size];
    let mut carried = vec![zero; size];
    for k in (1..=m).rev() {
        // M+^H lambda^k = g_k + M-^H lambda^{k+1}
        let mut rhs: Vec<Complex64> = c.iter().map(|&ci| residual[k] * (2.0 * dt * ci)).collect();
        if k < m {
            minus_h.mul_vec(&lambda, &mut carried);
            for (r, v) in rhs.iter_mut().zip(&carried) {
                *r += v;
            }
        }
        plus_h.solve(&mut rhs);
        lambda = rhs;
        let (now, before) = (&u.row(k)[first..=last], &u.row(k - 1)[first..=last]);
        for r in 0..size {
            grad[first + r] -= 0.5 * (lambda[r].conj() * (now[r] + before[r])).re;
        }
    }
    if reg_weight != 0.0 {
        for j in 0..grid.len() {
            let mut g = 0.0;
            if j > 0 {
                g += pv[j] - pv[j - 1];
            }
            if j < grid.n() {
                g -= pv[j + 1] - pv[j];
            }
            grad[j] += 2.0 * reg_weight * g / h;
        }
    }
    Ok((objective, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub reg_weight: f64,
    pub max_iters: usize,
    /// Stop once `|grad| <= gtol * max(|grad_0|, 1e-300)`.
    pub gtol: f64,
    /// Stop once an accepted step lowers the objective by less than `ftol * J`.
    pub ftol: f64,
    pub memory: usize,
    /// Length `l` of the smoothing preconditioner `(I - l^2 D^2)^{-1}` applied
    /// to quasi-Newton steps; `0` gives the plain nodal metric.
    #[serde(default)]
    pub smoothing_length: f64,
    /// Before the nodal fit, fit the best constant shift of `p_init` over
    /// the active nodes.
    #[serde(default)]
    pub constant_warm_start: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            reg_weight: 1e-13,
            max_iters: 1500,
            gtol: 1e-10,
            ftol: 1e-15,
            memory: 10,
            smoothing_length: 0.1,
            constant_warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub p_estimate: CoefficientField,
    pub objective_history: Vec<f64>,
    pub relative_l2_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionSummary {
    pub iterations: usize,
    pub converged: bool,
    pub relative_l2_error: Option<f64>,
    pub objective_history: Vec<f64>,
}

/// `|f - g|_{L2} / |g|_{L2}` with trapezoid weights.
pub fn relative_l2_error(estimate: &CoefficientField, truth: &CoefficientField) -> f64 {
    let h = truth.grid().h();
    let diff: Vec<f64> = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(e, t)| (e - t).powi(2))
        .collect();
    let norm: Vec<f64> = truth.values().iter().map(|t| t * t).collect();
    (trapezoid(&diff, h) / trapezoid(&norm, h)).sqrt()
}

impl ReconstructionResult {
    pub fn with_truth(mut self, truth: &CoefficientField) -> Self {
        self.relative_l2_error = Some(relative_l2_error(&self.p_estimate, truth));
        self
    }

    pub fn summary(&self) -> ReconstructionSummary {
        ReconstructionSummary {
            iterations: self.iterations,
            converged: self.converged,
            relative_l2_error: self.relative_l2_error,
            objective_history: self.objective_history.clone(),
        }
    }

    /// CSV with header `x,p_true,p_estimate`; `p_true` is left empty when unknown.
    pub fn to_csv(&self, truth: Option<&CoefficientField>) -> String {
        let mut out = String::from("x,p_true,p_estimate\n");
        let grid = self.p_estimate.grid();
        for (j, est) in self.p_estimate.values().iter().enumerate() {
            let t = truth.map(|t| t.values()[j].to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", grid.node(j), t, est));
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies `(I - l^2 D^2)^{-1}`, with `D^2` the symmetric free-end second
/// difference, by a real Thomas solve.
fn smooth(v: &mut [f64], length: f64, h: f64) {
    let n = v.len();
    if length <= 0.0 || n < 2 {
        return;
    }
    let c = (length / h).powi(2);
    let diag = |i: usize| if i == 0 || i == n - 1 { 1.0 + c } else { 1.0 + 2.0 * c };
    let mut cp = vec![0.0; n];
    let mut piv = diag(0);
    cp[0] = -c / piv;
    v[0] /= piv;
    for i in 1..n {
        piv = diag(i) + c * cp[i - 1];
        cp[i] = -c / piv;
        v[i] = (v[i] + c * v[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        v[i] -= cp[i] * v[i + 1];
    }
}

/// L-BFGS with Armijo backtracking over the nodes where `active` is set.
fn minimize<F>(
    mut x: Vec<f64>,
    active: &[bool],
    options: &ReconstructOptions,
    h: f64,
    mut eval: F,
) -> Result<(Vec<f64>, Vec<f64>, usize, bool, f64), ReconError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), ReconError>,
{
    let mask = |g: &mut Vec<f64>| {
        for (v, &on) in g.iter_mut().zip(active) {
            if !on {
                *v = 0.0;
            }
        }
    };
    let (mut f, mut g) = eval(&x)?;
    mask(&mut g);
    let g0 = dot(&g, &g).sqrt().max(1e-300);
    let mut history = vec![f];
    let mut pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    loop {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= options.gtol * g0 || gnorm == 0.0 {
            return Ok((x, history, iterations, true, gnorm));
        }
        if iterations >= options.max_iters {
            return Ok((x, history, iterations, false, gnorm));
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let alpha = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= alpha * yi);
            alphas.push(alpha);
        }
        let precondition = |v: &mut Vec<f64>| {
            smooth(v, options.smoothing_length, h);
            mask(v);
        };
        let gamma = match pairs.back() {
            Some((s, y, _)) => {
                let mut py = y.clone();
                precondition(&mut py);
                dot(s, y) / dot(y, &py)
            }
            None => {
                let mut pg = g.clone();
                precondition(&mut pg);
                1.0 / dot(&g, &pg).sqrt()
            }
        };
        precondition(&mut d);
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), alpha) in pairs.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (alpha - beta) * si);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        mask(&mut d);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            pairs.clear();
            d = g.iter().map(|v| -v / gnorm).collect();
            precondition(&mut d);
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            match eval(&trial) {
                Ok((ft, gt)) if ft.is_finite() && ft <= f + 1e-4 * step * slope => {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((x_new, f_new, mut g_new)) = accepted else {
            if pairs.is_empty() {
                return Ok((x, history, iterations, false, gnorm));
            }
            pairs.clear();
            continue;
        };
        mask(&mut g_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == options.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
        if decrease <= options.ftol * f.abs().max(1e-300) {
            let gnorm = dot(&g, &g).sqrt();
            return Ok((x, history, iterations, true, gnorm));
        }
    }
}

/// Regularized output least squares starting from `p_init`.
pub fn reconstruct(
    data: &CauchyTrace,
    spec: &InverseProblemSpec,
    options: &ReconstructOptions,
    p_init: &CoefficientField,
) -> Result<ReconstructionResult, ReconError> {
    let active = vec![true; spec.sgrid().len()];
    reconstruct_masked(data, spec, options, p_init, &active)
}

fn reconstruct_masked(
    data: &CauchyTrace,
    spec: &InverseProblemSpec,
    options: &ReconstructOptions,
    p_init: &CoefficientField,
    active: &[bool],
) -> Result<ReconstructionResult, ReconError> {
    spec.validate()?;
    data.tgrid.ensure_same(&spec.tgrid, "data vs spec")?;
    p_init.grid().ensure_same(spec.sgrid(), "initial guess vs spec")?;
    let grid = *spec.sgrid();
    let eval = |x: &[f64]| {
        let p = CoefficientField::from_values(grid, x.to_vec(), CoefficientRole::PotentialP)?;
        objective_and_gradient(&p, data, spec, options.reg_weight)
    };
    let mut start = p_init.values().to_vec();
    let mut history = Vec::new();
    let mut iterations = 0;
    if options.constant_warm_start {
        let shifted = |c: f64| -> Vec<f64> {
            start.iter().zip(active).map(|(v, &on)| if on { v + c } else { *v }).collect()
        };
        let eval_shift = |c: &[f64]| {
            let (f, g) = eval(&shifted(c[0]))?;
            let total = g.iter().zip(active).filter(|(_, &on)| on).map(|(v, _)| v).sum();
            Ok((f, vec![total]))
        };
        let scalar = ReconstructOptions {
            smoothing_length: 0.0,
            ..options.clone()
        };
        let (c, h0, it0, ..) = minimize(vec![0.0], &[true], &scalar, grid.h(), eval_shift)?;
        start = shifted(c[0]);
        history = h0;
        iterations = it0;
    }
    let (x, nodal_history, nodal_iterations, converged, gradient_norm) =
        minimize(start, active, options, grid.h(), eval)?;
    let skip = usize::from(!history.is_empty());
    history.extend(nodal_history.into_iter().skip(skip));
    let objective_history = history;
    let iterations = iterations + nodal_iterations;
    Ok(ReconstructionResult {
        p_estimate: CoefficientField::from_values(grid, x, CoefficientRole::PotentialP)?,
        objective_history,
        relative_l2_error: None,
        iterations,
        converged,
        gradient_norm,
    })
}

/// Reconstructs on growing prefixes `[0, breakpoints[i]]`, freezing each
/// recovered head before extending; nodes beyond the current prefix keep
/// their `p_init` values. The last breakpoint is taken to be `ell`.
pub fn reconstruct_layered(
    data: &CauchyTrace,
    spec: &InverseProblemSpec,
    options: &ReconstructOptions,
    p_init: &CoefficientField,
    breakpoints: &[f64],
) -> Result<ReconstructionResult, ReconError> {
    let grid = *spec.sgrid();
    let ell = grid.ell();
    if breakpoints.is_empty()
        || breakpoints.windows(2).any(|w| w[1] <= w[0])
        || breakpoints[0] <= 0.0
        || *breakpoints.last().unwrap() > ell * (1.0 + 1e-12)
    {
        return Err(ReconError::InvalidLayers);
    }
    let mut ends: Vec<usize> = breakpoints
        .iter()
        .map(|&b| ((b / grid.h()).round() as usize).min(grid.n()))
        .collect();
    *ends.last_mut().unwrap() = grid.n();
    let mut current = p_init.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = true;
    let mut gradient_norm = 0.0;
    let mut start = 0;
    for end in ends {
        if end < start {
            continue;
        }
        let active: Vec<bool> = (0..grid.len()).map(|j| j >= start && j <= end).collect();
        let stage = reconstruct_masked(data, spec, options, &current, &active)?;
        history.extend(stage.objective_history.iter().skip(usize::from(!history.is_empty())));
        iterations += stage.iterations;
        converged &= stage.converged;
        gradient_norm = stage.gradient_norm;
        current = stage.p_estimate;
        start = end + 1;
    }
    Ok(ReconstructionResult {
        p_estimate: current,
        objective_history: history,
        relative_l2_error: None,
        iterations,
        converged,
        gradient_norm,
    })
}

/// The two desk-scale reconstruction benchmarks: `sigma = 1`, `a = 1`,
/// `ell = T = 1`, a 64 x 64 grid, `p_true = 1 + sin(2 pi x) / 2`, and no noise.
/// The left trace takes the constant value `b(0)`; the far end `x = ell` is
/// insulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeskFixture {
    /// `b = sin(pi x)`, positive inside the interval.
    PositiveInitial,
    /// `b = x - 0.4`, one simple interior zero.
    InteriorZero,
}

impl DeskFixture {
    pub const ALL: [DeskFixture; 2] = [DeskFixture::PositiveInitial, DeskFixture::InteriorZero];

    pub fn name(self) -> &'static str {
        match self {
            DeskFixture::PositiveInitial => "positive_initial",
            DeskFixture::InteriorZero => "interior_zero",
        }
    }

    /// Acceptance bound on the relative L2 error.
    pub fn threshold(self) -> f64 {
        match self {
            DeskFixture::PositiveInitial => 0.05,
            DeskFixture::InteriorZero => 0.10,
        }
    }

    pub fn initial_value(self, x: f64) -> f64 {
        match self {
            DeskFixture::PositiveInitial => (std::f64::consts::PI * x).sin(),
            DeskFixture::InteriorZero => x - 0.4,
        }
    }

    pub fn true_potential(x: f64) -> f64 {
        1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin()
    }

    /// Spec, true potential and the zero initial guess.
    pub fn build(self) -> Result<(InverseProblemSpec, CoefficientField, CoefficientField), ReconError> {
        let sgrid = SpaceGrid::new(1.0, 64).map_err(|e| GridMismatch(e.to_string()))?;
        let tgrid = TimeGrid::new(1.0, 64).map_err(|e| GridMismatch(e.to_string()))?;
        let a = CoefficientField::constant(1.0, sgrid, CoefficientRole::Diffusion)?;
        let b = CoefficientField::sample(|x| self.initial_value(x), sgrid, CoefficientRole::Initial)?;
        let left = match b.values()[0] {
            v if v == 0.0 => BoundaryCondition::DirichletZero,
            v => BoundaryCondition::PrescribedTrace(vec![Complex64::new(v, 0.0); tgrid.len()]),
        };
        let bc = BoundaryConditionSpec {
            left,
            right: BoundaryCondition::NeumannZero,
        };
        let spec = InverseProblemSpec::new(Sigma::parabolic(), a, b, bc, tgrid);
        let truth = CoefficientField::sample(Self::true_potential, sgrid, CoefficientRole::PotentialP)?;
        let init = CoefficientField::constant(0.0, sgrid, CoefficientRole::PotentialP)?;
        Ok((spec, truth, init))
    }

    /// Simulates the data and reconstructs with default options.
    pub fn run(self) -> Result<ReconstructionResult, ReconError> {
        let (spec, truth, init) = self.build()?;
        let data = simulate_cauchy_data(&spec, &truth)?;
        Ok(reconstruct(&data, &spec, &ReconstructOptions::default(), &init)?.with_truth(&truth))
    }
}

/// Both sides of the local chain inequality near `x = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalChainReport {
    pub x: Vec<f64>,
    /// `min |b~|` over `[0, ell/4]`, where `b = x b~`.
    pub kappa: f64,
    /// `kappa |q - p| x`
    pub lhs: Vec<f64>,
    /// `|q - p| x |b~(x)|`
    pub rhs: Vec<f64>,
    /// Bound of the integral terms through the computed kernel:
    /// `sup_y|K(x,.)| (x^2 sup_y|q(x)-p(y)| |b~|_C + x |a|_C |b''|_C)`.
    pub majorant: Vec<f64>,
    /// Largest `x` with `lhs <= rhs` on all of `[0, x]`.
    pub epsilon_star: f64,
    /// Smallest `C` with `majorant(x) <= C x^2 |p - q|_{C[0,x]}`.
    pub chain_constant: f64,
    /// `min(kappa / C, ell)`: below this radius the chain forces `p = q`.
    pub uniqueness_radius: f64,
    /// `b(0) != 0`: the factor `b~` is replaced by `b` itself.
    pub nonvanishing_initial_value: bool,
}

pub fn local_uniqueness_check(
    a: &CoefficientField,
    p: &CoefficientField,
    q: &CoefficientField,
    b: &CoefficientField,
) -> Result<LocalChainReport, ReconError> {
    a.grid().ensure_same(b.grid(), "diffusion vs initial value")?;
    let grid = *a.grid();
    let (n, h) = (grid.n(), grid.h());
    let bv = b.values();
    let scale = b.max_abs().max(f64::MIN_POSITIVE);
    let nonvanishing = bv[0].abs() > 1e-10 * scale;
    let b_tilde: Vec<f64> = if nonvanishing {
        bv.to_vec()
    } else {
        (0..=n)
            .map(|j| {
                if j == 0 {
                    left_derivative(bv[0], bv[1], bv[2], h)
                } else {
                    bv[j] / grid.node(j)
                }
            })
            .collect()
    };
    let near = (n / 4).max(1);
    let kappa = b_tilde[..=near].iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let bt_scale = b_tilde.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(kappa > 1e-8 * bt_scale.max(f64::MIN_POSITIVE)) {
        return Err(ReconError::HypothesisViolated { kappa });
    }

    let kernel = solve_kernel(a, p, q, &TriangleGrid::new(grid))?;
    let (pv, qv) = (p.values(), q.values());
    let a_sup = a.max_abs();
    let bt_sup = bt_scale;
    let b2_sup = (1..n)
        .map(|j| ((bv[j - 1] - 2.0 * bv[j] + bv[j + 1]) / (h * h)).abs())
        .fold(0.0_f64, f64::max);
    let xs = grid.nodes();
    let mut lhs = Vec::with_capacity(n + 1);
    let mut rhs = Vec::with_capacity(n + 1);
    let mut majorant = Vec::with_capacity(n + 1);
    let mut chain_constant = 0.0_f64;
    let mut contrast_sup = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let d = (qv[i] - pv[i]).abs();
        contrast_sup = contrast_sup.max(d);
        lhs.push(kappa * d * x);
        rhs.push(d * x * b_tilde[i].abs());
        let k_sup = kernel.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mixed = (0..=i).map(|j| (qv[i] - pv[j]).abs()).fold(0.0_f64, f64::max);
        let maj = k_sup * (x * x * mixed * bt_sup + x * a_sup * b2_sup);
        majorant.push(maj);
        let denom = x * x * contrast_sup;
        if denom > 1e-14 {
            chain_constant = chain_constant.max(maj / denom);
        }
    }
    let ok = |i: usize| lhs[i] <= rhs[i] * (1.0 + 1e-12) + 1e-300;
    let last_ok = (0..=n).take_while(|&i| ok(i)).last().unwrap_or(0);
    let ell = grid.ell();
    let uniqueness_radius = if chain_constant > 0.0 { (kappa / chain_constant).min(ell) } else { ell };
    Ok(LocalChainReport {
        x: xs.clone(),
        kappa,
        lhs,
        rhs,
        majorant,
        epsilon_star: xs[last_ok],
        chain_constant,
        uniqueness_radius,
        nonvanishing_initial_value: nonvanishing,
    })
}

/// `max_t |trace_p - trace_q|` in the trace not fixed by the left boundary condition.
pub fn distinguishability_gap(
    p: &CoefficientField,
    q: &CoefficientField,
    spec: &InverseProblemSpec,
) -> Result<f64, ReconError> {
    let kind = spec.fitted_trace();
    let mut clean = spec.clone();
    clean.noise_level = 0.0;
    let tp = extract_cauchy_trace(&simulate_field(&clean, p)?);
    let tq = extract_cauchy_trace(&simulate_field(&clean, q)?);
    Ok(fitted_series(&tp, kind)
        .iter()
        .zip(fitted_series(&tq, kind))
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).norm())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corelab::make_grids;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn spec(n: usize, m: usize, horizon: f64, sigma: Sigma, b: impl Fn(f64) -> f64) -> InverseProblemSpec {
        let (s, t) = make_grids(1.0, horizon, n, m).unwrap();
        InverseProblemSpec::new(
            sigma,
            CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap(),
            CoefficientField::sample(b, s, CoefficientRole::Initial).unwrap(),
            BoundaryConditionSpec::dirichlet(),
            t,
        )
    }

    fn potential(s: &InverseProblemSpec, f: impl Fn(f64) -> f64) -> CoefficientField {
        CoefficientField::sample(f, *s.sgrid(), CoefficientRole::PotentialP).unwrap()
    }

    #[test]
    fn clean_mode_trace_is_analytic() {
        let sp = spec(128, 128, 0.2, Sigma::parabolic(), |x| (PI * x).sin());
        let tr = simulate_cauchy_data(&sp, &potential(&sp, |_| 0.0)).unwrap();
        for (k, z) in tr.ux0.iter().enumerate() {
            let exact = PI * (-PI * PI * sp.tgrid.node(k)).exp();
            assert!((z.re - exact).abs() < 2e-3);
            assert_eq!(tr.u0[k], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn noise_is_deterministic_and_calibrated() {
        let mut sp = spec(32, 64, 0.2, Sigma::parabolic(), |x| (PI * x).sin());
        sp.noise_level = 0.01;
        sp.seed = 7;
        let p = potential(&sp, |_| 0.0);
        assert_eq!(simulate_cauchy_data(&sp, &p).unwrap(), simulate_cauchy_data(&sp, &p).unwrap());
        let mut clean = sp.clone();
        clean.noise_level = 0.0;
        let reference = simulate_cauchy_data(&clean, &p).unwrap();
        let peak = reference.ux0.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for seed in 0..100 {
            sp.seed = seed;
            let noisy = simulate_cauchy_data(&sp, &p).unwrap();
            for (z, r) in noisy.ux0.iter().zip(&reference.ux0) {
                sum_sq += (z - r).norm_sqr();
                count += 1.0;
            }
        }
        let std = (sum_sq / count).sqrt();
        assert!((std / (0.01 * peak) - 1.0).abs() < 0.2, "{std}");
    }

    #[test]
    fn complex_noise_has_requested_modulus_spread() {
        let mut sp = spec(32, 64, 0.5, Sigma::schrodinger(), |x| (PI * x).sin());
        sp.noise_level = 0.05;
        let p = potential(&sp, |_| 0.0);
        let mut clean = sp.clone();
        clean.noise_level = 0.0;
        let reference = simulate_cauchy_data(&clean, &p).unwrap();
        let peak = reference.ux0.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        let (mut sum_sq, mut count) = (0.0, 0.0);
        for seed in 0..50 {
            sp.seed = seed;
            for (z, r) in simulate_cauchy_data(&sp, &p).unwrap().ux0.iter().zip(&reference.ux0) {
                sum_sq += (z - r).norm_sqr();
                count += 1.0;
            }
        }
        assert!(((sum_sq / count).sqrt() / (0.05 * peak) - 1.0).abs() < 0.2);
    }

    #[test]
    fn exact_candidate_leaves_only_regularization() {
        let sp = spec(32, 32, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let p = potential(&sp, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(&sp, &p).unwrap();
        let reg = 1e-3;
        let (j, _) = objective_and_gradient(&p, &data, &sp, reg).unwrap();
        let expected = reg * roughness(p.values(), sp.sgrid().h());
        assert!((j - expected).abs() <= 1e-10 * expected);
    }

    fn gradient_check(sp: &InverseProblemSpec, seed: u64) {
        let truth = potential(sp, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(sp, &truth).unwrap();
        let p = potential(sp, |x| 0.5 + x * x);
        let reg = 1e-4;
        let (_, grad) = objective_and_gradient(&p, &data, sp, reg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = 1e-5;
        for _ in 0..5 {
            let dir: Vec<f64> = (0..p.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shifted = |s: f64| {
                let v = p.values().iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                let c = CoefficientField::from_values(*p.grid(), v, CoefficientRole::PotentialP).unwrap();
                objective_and_gradient(&c, &data, sp, reg).unwrap().0
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let adj = dot(&grad, &dir);
            assert!((fd - adj).abs() <= 1e-4 * adj.abs(), "fd {fd} adjoint {adj}");
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        gradient_check(&spec(32, 32, 1.0, Sigma::parabolic(), |x| (PI * x).sin()), 1);
        gradient_check(&spec(32, 32, 1.0, Sigma::schrodinger(), |x| x - 0.4), 2);
        gradient_check(&spec(32, 32, 0.5, Sigma::new(1.0, 2.0).unwrap(), |x| x * (1.0 - x)), 3);
        let mut neumann = spec(32, 32, 0.5, Sigma::parabolic(), |x| (0.5 * PI * x).cos());
        neumann.bc = BoundaryConditionSpec::neumann_left();
        gradient_check(&neumann, 4);
        let mut fin = spec(32, 32, 1.0, Sigma::schrodinger(), |x| (PI * x).sin());
        fin.anchor = Anchor::Final;
        gradient_check(&fin, 5);
    }

    #[test]
    fn misfit_is_quadratic_in_perturbation() {
        let sp = spec(32, 32, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let truth = potential(&sp, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(&sp, &truth).unwrap();
        let j_at = |eps: f64| {
            let mut v = truth.values().to_vec();
            v[10] += eps;
            let c = CoefficientField::from_values(*truth.grid(), v, CoefficientRole::PotentialP).unwrap();
            objective_and_gradient(&c, &data, &sp, 0.0).unwrap().0
        };
        let epsilons: [f64; 4] = [1e-3, 2e-3, 4e-3, 8e-3];
        let logs: Vec<(f64, f64)> = epsilons.iter().map(|&e| (e.ln(), j_at(e).ln())).collect();
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() <= 0.1, "{slope}");
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let sp = spec(32, 32, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let zero = potential(&sp, |_| 0.0);
        let data = simulate_cauchy_data(&sp, &zero).unwrap();
        let r = reconstruct(&data, &sp, &ReconstructOptions::default(), &zero).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn objective_history_never_increases() {
        let sp = spec(32, 32, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let truth = potential(&sp, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(&sp, &truth).unwrap();
        let opts = ReconstructOptions {
            max_iters: 40,
            ..Default::default()
        };
        let r = reconstruct(&data, &sp, &opts, &potential(&sp, |_| 1.0)).unwrap();
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.objective_history.last().unwrap() < &r.objective_history[0]);
        let csv = r.clone().with_truth(&truth).to_csv(Some(&truth));
        assert!(csv.starts_with("x,p_true,p_estimate\n0,1,"));
    }

    #[test]
    fn final_anchor_equals_reversed_initial_anchor() {
        let mut fin = spec(32, 32, 1.0, Sigma::schrodinger(), |x| (PI * x).sin());
        fin.anchor = Anchor::Final;
        let truth = potential(&fin, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(&fin, &truth).unwrap();
        let mut init = fin.clone();
        init.anchor = Anchor::Initial;
        let reversed = CauchyTrace::new(
            data.tgrid,
            data.u0.iter().rev().map(|z| z.conj()).collect(),
            data.ux0.iter().rev().map(|z| z.conj()).collect(),
        )
        .unwrap();
        // the reversed data is what the initial-anchored problem produces
        let direct = simulate_cauchy_data(&init, &truth).unwrap();
        for (a, b) in reversed.ux0.iter().zip(&direct.ux0) {
            assert!((a - b).norm() <= 1e-12);
        }
        let opts = ReconstructOptions {
            max_iters: 25,
            ..Default::default()
        };
        let start = potential(&fin, |_| 1.0);
        let r1 = reconstruct(&data, &fin, &opts, &start).unwrap();
        let r2 = reconstruct(&reversed, &init, &opts, &start).unwrap();
        for (a, b) in r1.p_estimate.values().iter().zip(r2.p_estimate.values()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn final_anchor_rejected_for_parabolic() {
        let mut sp = spec(16, 16, 1.0, Sigma::parabolic(), |x| (PI * x).sin());
        sp.anchor = Anchor::Final;
        let p = potential(&sp, |_| 0.0);
        assert!(matches!(
            simulate_cauchy_data(&sp, &p),
            Err(ReconError::AnchorNeedsUnitarySigma(_))
        ));
    }

    #[test]
    fn neumann_spec_fits_value_trace() {
        let mut sp = spec(16, 16, 1.0, Sigma::parabolic(), |x| x);
        assert_eq!(sp.fitted_trace(), TraceKind::Slope);
        sp.bc.left = BoundaryCondition::NeumannZero;
        assert_eq!(sp.fitted_trace(), TraceKind::Value);
    }

    #[test]
    fn chain_for_linear_initial_value() {
        let (s, _) = make_grids(1.0, 1.0, 64, 8).unwrap();
        let a = CoefficientField::constant(1.0, s, CoefficientRole::Diffusion).unwrap();
        let p = CoefficientField::constant(0.0, s, CoefficientRole::PotentialP).unwrap();
        let q = CoefficientField::constant(0.5, s, CoefficientRole::PotentialQ).unwrap();
        let b = CoefficientField::sample(|x| x, s, CoefficientRole::Initial).unwrap();
        let r = local_uniqueness_check(&a, &p, &q, &b).unwrap();
        assert!((r.kappa - 1.0).abs() < 1e-12);
        assert!(r.epsilon_star > 0.0);
        assert!(r.rhs[1] / r.lhs[1] >= 1.0 - 1e-12);
        assert!(r.chain_constant > 0.0 && r.uniqueness_radius > 0.0);
        assert!(!r.nonvanishing_initial_value);

        let same = local_uniqueness_check(&a, &p, &p, &b).unwrap();
        assert!(same.lhs.iter().all(|&v| v == 0.0));
        assert_eq!(same.epsilon_star, 1.0);

        let square = CoefficientField::sample(|x| x * x, s, CoefficientRole::Initial).unwrap();
        assert!(matches!(
            local_uniqueness_check(&a, &p, &q, &square),
            Err(ReconError::HypothesisViolated { .. })
        ));

        let positive = CoefficientField::sample(|x| 1.0 + x, s, CoefficientRole::Initial).unwrap();
        assert!(local_uniqueness_check(&a, &p, &q, &positive).unwrap().nonvanishing_initial_value);
    }

    #[test]
    fn distinguishability() {
        let sp = spec(64, 64, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let p = potential(&sp, |_| 0.0);
        let q = potential(&sp, |_| 1.0);
        let gap = distinguishability_gap(&p, &q, &sp).unwrap();
        assert!(gap > 1e-2, "{gap}");
        assert_eq!(gap, distinguishability_gap(&q, &p, &sp).unwrap());
        assert!(distinguishability_gap(&p, &p, &sp).unwrap() <= 1e-12);
    }

    #[test]
    fn distant_perturbation_still_visible() {
        let gaps: Vec<f64> = [0.2, 0.1, 0.05]
            .into_iter()
            .map(|t| {
                let sp = spec(128, 128, t, Sigma::parabolic(), |x| (PI * x).sin());
                let p = potential(&sp, |_| 0.0);
                let q = potential(&sp, |x| if x >= 0.8 { 1.0 } else { 0.0 });
                distinguishability_gap(&p, &q, &sp).unwrap()
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        assert!(gaps[2] > 10.0 * f64::EPSILON);
    }

    #[test]
    fn layered_driver_respects_frozen_head() {
        let sp = spec(32, 32, 0.5, Sigma::parabolic(), |x| (PI * x).sin());
        let truth = potential(&sp, |x| 1.0 + 0.5 * (2.0 * PI * x).sin());
        let data = simulate_cauchy_data(&sp, &truth).unwrap();
        let opts = ReconstructOptions {
            max_iters: 15,
            ..Default::default()
        };
        let start = potential(&sp, |_| 1.0);
        let r = reconstruct_layered(&data, &sp, &opts, &start, &[0.25, 0.5, 1.0]).unwrap();
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(matches!(
            reconstruct_layered(&data, &sp, &opts, &start, &[0.5, 0.25]),
            Err(ReconError::InvalidLayers)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn gradient_property(seed in 0u64..1000, im in 0.0..1.5f64) {
            let sp = spec(32, 32, 0.5, Sigma::new(1.0, im).unwrap(), |x| (PI * x).sin() + 0.3 * x);
            gradient_check(&sp, seed);
        }
    }
}
