//! Executes validated plans, writes artifacts and `summary.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use xformlab_core::carleman::{
    build_weight, carleman_study, default_tau_candidates, doubling_grid, fit_ucp_constants, lambda_sweep, select_tau1,
    ucp_separation_demo, ucp_test_function,
};
use xformlab_core::corelab::{CauchyTrace, EvolutionField, SpaceGrid};
use xformlab_core::evolve::{extract_cauchy_trace, forward_solve, scheme_residual};
use xformlab_core::goursat::{characteristic_curve, kernel_bound_fit, solve_kernel, TriangleGrid};
use xformlab_core::recon::{
    distinguishability_gap, local_uniqueness_check, reconstruct, reconstruct_layered, simulate_cauchy_data, simulate_field,
    ReconError, TraceKind,
};
use xformlab_core::transform::{intertwining_residual, transform_field, IntertwiningReport};

use crate::manifest::{
    load_manifest, validate, CarlemanPlan, DistinguishPlan, ForwardPlan, IntertwinePlan, KernelPlan, LoadedManifest, LocalChainPlan,
    Plan, ReconstructPlan, UcpPlan, ValidationError,
};
use crate::plot::{LinePlot, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    ChecksFailed,
    ValidationError,
    NumericalFailure,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::ChecksFailed => 1,
            Status::ValidationError => 2,
            Status::NumericalFailure => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub kind: Option<String>,
    pub status: Status,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
    pub failing_stage: Option<String>,
    pub error: Option<String>,
}

impl Summary {
    fn validation(kind: Option<String>, err: &ValidationError) -> Self {
        Self {
            kind,
            status: Status::ValidationError,
            pass: false,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
            failing_stage: Some("validate".into()),
            error: Some(err.to_string()),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Outcome of one manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: Status,
    pub summary: Summary,
    pub output_dir: Option<PathBuf>,
}

impl Outcome {
    /// Single-line, machine-parseable description of a failure.
    pub fn reason_line(&self) -> Option<String> {
        let error = self.summary.error.as_ref()?;
        Some(
            serde_json::json!({
                "status": self.status,
                "stage": self.summary.failing_stage,
                "reason": error,
            })
            .to_string(),
        )
    }
}

#[derive(Debug)]
struct StageError {
    stage: &'static str,
    message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        message: e.to_string(),
    }
}

/// Artifacts, checks and metrics of a run in progress.
struct Run {
    dir: PathBuf,
    artifacts: BTreeSet<String>,
    checks: Vec<Check>,
    metrics: BTreeMap<String, Value>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), StageError> {
        std::fs::write(self.dir.join(name), contents).map_err(stage("write"))?;
        self.artifacts.insert(name.to_string());
        Ok(())
    }

    fn plot(&mut self, name: &str, plot: LinePlot) -> Result<(), StageError> {
        self.write(name, &plot.render())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), StageError> {
        let text = serde_json::to_string_pretty(value).map_err(stage("write"))?;
        self.write(name, &(text + "\n"))
    }

    fn check(&mut self, name: &str, pass: bool, value: Option<f64>, limit: Option<f64>) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            value,
            limit,
        });
    }

    fn at_most(&mut self, name: &str, value: f64, limit: f64) {
        self.check(name, value <= limit, Some(value), Some(limit));
    }

    fn at_least(&mut self, name: &str, value: f64, limit: f64) {
        self.check(name, value >= limit, Some(value), Some(limit));
    }

    fn metric<T: Serialize>(&mut self, name: &str, value: T) {
        self.metrics
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

fn trace_csv_and_plot(run: &mut Run, name: &str, trace: &CauchyTrace, complex: bool) -> Result<(), StageError> {
    run.write(&format!("{name}.csv"), &trace.to_csv())?;
    let t = trace.tgrid.nodes();
    let series = |label: &str, f: &dyn Fn(usize) -> f64| Series::new(label, (0..t.len()).map(|k| (t[k], f(k))).collect());
    let mut plot = LinePlot::new("Cauchy trace at x = 0", "t", "value")
        .with_series(series("Re u(t,0)", &|k| trace.u0[k].re))
        .with_series(series("Re u_x(t,0)", &|k| trace.ux0[k].re));
    if complex {
        plot = plot
            .with_series(series("Im u(t,0)", &|k| trace.u0[k].im))
            .with_series(series("Im u_x(t,0)", &|k| trace.ux0[k].im));
    }
    run.plot(&format!("{name}.svg"), plot)
}

fn run_forward(run: &mut Run, plan: &ForwardPlan) -> Result<(), StageError> {
    let u = forward_solve(plan.sigma, &plan.a, &plan.p, &plan.b, &plan.bc, &plan.tgrid).map_err(stage("solve"))?;
    let trace = extract_cauchy_trace(&u);
    trace_csv_and_plot(run, "trace", &trace, !plan.sigma.is_real())?;
    if plan.write_field {
        run.write("field.csv", &u.to_csv())?;
    }
    let residual = scheme_residual(&u, plan.sigma, &plan.a, &plan.p, &plan.bc).map_err(stage("solve"))?;
    run.metric("scheme_residual", residual);
    run.metric("max_abs", u.max_abs());
    run.check("finite", u.is_finite(), None, None);
    if let Some((k, tol)) = plan.mode {
        let s = *u.sgrid();
        let wave = k as f64 * std::f64::consts::PI / s.ell();
        let rate = plan.a.values()[0] * wave * wave + plan.p.values()[0];
        let sigma = plan.sigma.value();
        let exact = EvolutionField::from_fn(s, *u.tgrid(), |t, x| (-rate * t / sigma).exp() * (wave * x).sin());
        let err = u
            .values()
            .iter()
            .zip(exact.values())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        run.at_most("mode_error", err, tol);
    }
    Ok(())
}

/// `a^{-1/2}(x) int_0^x (q - p) / (2 sqrt a)` by composite Simpson with 64
/// panels per grid cell, evaluated on the source functions.
fn diagonal_oracle(plan: &KernelPlan, grid: &SpaceGrid) -> Vec<f64> {
    let [a, p, q] = &plan.sources;
    let f = |s: f64| (q.eval(s) - p.eval(s)) / (2.0 * a.eval(s).sqrt());
    let panels = 64;
    let h = grid.h();
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for j in 0..grid.n() {
        let (x0, hs) = (grid.node(j), h / (2 * panels) as f64);
        let mut cell = f(x0) + f(x0 + h);
        for i in 1..2 * panels {
            cell += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x0 + i as f64 * hs);
        }
        acc += cell * hs / 3.0;
        out.push(acc / a.eval(grid.node(j + 1)).sqrt());
    }
    out
}

fn run_kernel(run: &mut Run, plan: &KernelPlan) -> Result<(), StageError> {
    let grid = *plan.a.grid();
    let kernel = solve_kernel(&plan.a, &plan.p, &plan.q, &TriangleGrid::new(grid)).map_err(stage("solve"))?;
    run.write("kernel.csv", &kernel.to_csv())?;
    let diagonal = kernel.diagonal();
    let oracle = diagonal_oracle(plan, &grid);
    let mut csv = String::from("x,computed,closed_form\n");
    for j in 0..grid.len() {
        csv.push_str(&format!("{},{},{}\n", grid.node(j), diagonal[j], oracle[j]));
    }
    run.write("diagonal.csv", &csv)?;
    let xs = grid.nodes();
    run.plot(
        "diagonal.svg",
        LinePlot::new("Kernel on the diagonal", "x", "K(x,x)")
            .with_series(Series::new("computed", xs.iter().copied().zip(diagonal.iter().copied()).collect()))
            .with_series(Series::new("closed form", xs.iter().copied().zip(oracle.iter().copied()).collect())),
    )?;
    run.plot(
        "bottom.svg",
        LinePlot::new("Kernel on y = 0", "x", "K(x,0)").with_series(Series::new("K(x,0)", xs.iter().copied().zip(kernel.bottom()).collect())),
    )?;
    let gap = diagonal.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    run.metric("max_abs_kernel", kernel.max_abs());
    run.check("finite", kernel.is_finite(), None, None);
    run.at_most("diagonal_closed_form", gap, plan.diagonal_tolerance);
    if plan.p.values() == plan.q.values() {
        run.at_most("vanishes_for_equal_potentials", kernel.max_abs(), plan.vanish_tolerance);
    }
    let bound = kernel_bound_fit(&kernel, &plan.p, &plan.q).map_err(stage("bound"))?;
    run.metric("bound", &bound);
    if !plan.characteristics.is_empty() {
        let mut plot = LinePlot::new("Characteristics", "x", "y");
        let mut hits = Vec::new();
        for (i, &x0) in plan.characteristics.iter().enumerate() {
            let curve = characteristic_curve(&plan.a, x0).map_err(stage("characteristic"))?;
            run.write(&format!("characteristic_{i}.csv"), &curve.to_csv())?;
            plot = plot.with_series(Series::new(format!("x0 = {x0}"), curve.samples.clone()));
            hits.push(curve.axis_hit);
        }
        run.plot("characteristics.svg", plot)?;
        run.metric("characteristic_axis_hits", hits);
    }
    Ok(())
}

fn run_intertwine(run: &mut Run, plan: &IntertwinePlan) -> Result<(), StageError> {
    let levels: &[usize] = if plan.refine { &[1, 2] } else { &[1] };
    let mut reports: Vec<(usize, f64, IntertwiningReport)> = Vec::new();
    for &factor in levels {
        let (a, p, q, b, bc, t) = plan.sampled(factor).map_err(stage("sample"))?;
        let s = *a.grid();
        let u = forward_solve(plan.sigma, &a, &p, &b, &bc, &t).map_err(stage("solve"))?;
        let kernel = solve_kernel(&a, &p, &q, &TriangleGrid::new(s)).map_err(stage("kernel"))?;
        let report = intertwining_residual(&u, &kernel, plan.sigma, &a, &p, &q).map_err(stage("intertwine"))?;
        if factor == 1 {
            let v = transform_field(&u, &kernel).map_err(stage("intertwine"))?;
            let (tu, tv) = (extract_cauchy_trace(&u), extract_cauchy_trace(&v));
            let tn = t.nodes();
            let pts = |tr: &CauchyTrace| tn.iter().zip(&tr.ux0).map(|(&x, z)| (x, z.re)).collect();
            run.write("trace_u.csv", &tu.to_csv())?;
            run.write("trace_v.csv", &tv.to_csv())?;
            run.plot(
                "trace.svg",
                LinePlot::new("Slope traces at x = 0", "t", "Re d/dx")
                    .with_series(Series::new("u", pts(&tu)))
                    .with_series(Series::new("transformed", pts(&tv))),
            )?;
        }
        reports.push((s.n(), s.h(), report));
    }
    let mut csv = String::from("n,interior_residual,trace_gap_value,trace_gap_slope\n");
    for (n, _, r) in &reports {
        csv.push_str(&format!("{n},{},{},{}\n", r.interior_residual, r.trace_gap_value, r.trace_gap_slope));
    }
    run.write("residuals.csv", &csv)?;
    let (_, h, coarse) = &reports[0];
    run.metric("interior_residual", coarse.interior_residual);
    run.at_most("trace_gap_value", coarse.trace_gap_value, 1e-12);
    run.at_most("trace_gap_slope", coarse.trace_gap_slope, plan.slope_constant * h * h);
    if let Some((_, _, fine)) = reports.get(1) {
        let refined = coarse.clone().with_refinement(fine);
        let order = refined.refinement_ratio.unwrap_or(f64::NAN).log2();
        run.metric("refinement_ratio", refined.refinement_ratio);
        run.check("residual_order", (1.6..=2.4).contains(&order), Some(order), Some(2.0));
    }
    Ok(())
}

fn run_reconstruct(run: &mut Run, plan: &ReconstructPlan) -> Result<(), StageError> {
    let data = simulate_cauchy_data(&plan.spec, &plan.p_true).map_err(stage("simulate"))?;
    run.write("data.csv", &data.to_csv())?;
    let result = match &plan.layers {
        Some(layers) => reconstruct_layered(&data, &plan.spec, &plan.options, &plan.p_init, layers),
        None => reconstruct(&data, &plan.spec, &plan.options, &plan.p_init),
    }
    .map_err(stage("reconstruct"))?
    .with_truth(&plan.p_true);
    run.write("profile.csv", &result.to_csv(Some(&plan.p_true)))?;
    let mut history = String::from("iteration,objective\n");
    for (i, j) in result.objective_history.iter().enumerate() {
        history.push_str(&format!("{i},{j}\n"));
    }
    run.write("history.csv", &history)?;
    let xs = plan.p_true.grid().nodes();
    run.plot(
        "profile.svg",
        LinePlot::new("Potential", "x", "p")
            .with_series(Series::new("true", xs.iter().copied().zip(plan.p_true.values().iter().copied()).collect()))
            .with_series(Series::new(
                "estimate",
                xs.iter().copied().zip(result.p_estimate.values().iter().copied()).collect(),
            )),
    )?;
    run.plot(
        "history.svg",
        LinePlot::new("Objective", "iteration", "log10 J").with_series(Series::new(
            "J",
            result
                .objective_history
                .iter()
                .enumerate()
                .map(|(i, j)| (i as f64, j.max(1e-300).log10()))
                .collect(),
        )),
    )?;
    let err = result.relative_l2_error.unwrap_or(f64::NAN);
    run.metric("relative_l2_error", err);
    run.metric("iterations", result.iterations);
    run.metric("converged", result.converged);
    run.metric("gradient_norm", result.gradient_norm);
    run.metric("final_objective", result.objective_history.last().copied());
    if let Some(f) = plan.fixture {
        run.metric("fixture", f.name());
    }
    run.check(
        "objective_monotone",
        result.objective_history.windows(2).all(|w| w[1] <= w[0]),
        None,
        None,
    );
    if let Some(t) = plan.threshold {
        run.at_most("relative_l2_error", err, t);
    }
    if let Some(b) = plan.baseline {
        run.at_most("regression_baseline", err, b * (1.0 + plan.baseline_slack) + 1e-4);
    }
    Ok(())
}

fn run_carleman(run: &mut Run, plan: &CarlemanPlan) -> Result<(), StageError> {
    let family: Vec<EvolutionField> = plan.bumps.iter().map(|b| b.field(plan.sgrid, plan.tgrid)).collect();
    run.json("bumps.json", &plan.bumps)?;
    let weight = build_weight(plan.t0, plan.lambda, plan.sgrid, plan.tgrid).map_err(stage("weight"))?;
    let tau_grid = match &plan.tau_grid {
        Some(g) => g.clone(),
        None => {
            let tau1 = select_tau1(&family, &weight, &default_tau_candidates(), plan.sigma, &plan.a, &plan.p)
                .map_err(stage("tau1"))?
                .ok_or_else(|| StageError {
                    stage: "tau1",
                    message: "no test function gives a defined ratio".into(),
                })?;
            run.metric("tau1", tau1);
            doubling_grid(tau1, 4)
        }
    };
    let report = carleman_study(&family, &weight, &tau_grid, plan.sigma, &plan.a, &plan.p).map_err(stage("study"))?;
    let mut plot = LinePlot::new("lhs / rhs", "tau", "ratio");
    for (i, m) in report.members.iter().enumerate() {
        run.write(&format!("member_{i}.csv"), &m.to_csv())?;
        plot = plot.with_series(Series::new(
            format!("bump {i}"),
            m.sides.iter().filter_map(|s| s.ratio().map(|r| (s.tau, r))).collect(),
        ));
    }
    run.plot("ratios.svg", plot)?;
    run.json("report.json", &report.summary())?;
    run.metric("fitted_c", report.fitted_c);
    run.metric("max_ratio", report.max_ratio);
    run.metric("tau_grid", &tau_grid);
    run.check("not_degenerate", !report.degenerate, None, None);
    run.check(
        "ratio_within_slack",
        !report.flagged,
        report.max_ratio.zip(report.fitted_c).map(|(m, c)| m / c),
        Some(xformlab_core::carleman::RATIO_SLACK),
    );
    if !plan.lambda_sweep.is_empty() {
        let sweep = lambda_sweep(&family, &plan.lambda_sweep, plan.t0, plan.sigma, &plan.a, &plan.p).map_err(stage("lambda_sweep"))?;
        let summaries: Vec<_> = sweep.iter().map(|r| r.summary()).collect();
        run.json("lambda_sweep.json", &summaries)?;
    }
    Ok(())
}

fn fitted(trace: &CauchyTrace, kind: TraceKind) -> &[Complex64] {
    match kind {
        TraceKind::Value => &trace.u0,
        TraceKind::Slope => &trace.ux0,
    }
}

fn run_distinguish(run: &mut Run, plan: &DistinguishPlan) -> Result<(), StageError> {
    let spec = &plan.spec;
    let gap = |p, q| distinguishability_gap(p, q, spec).map_err(stage("simulate"));
    let (pq, qp, pp) = (gap(&plan.p, &plan.q)?, gap(&plan.q, &plan.p)?, gap(&plan.p, &plan.p)?);
    let up = simulate_field(spec, &plan.p).map_err(stage("simulate"))?;
    let uq = simulate_field(spec, &plan.q).map_err(stage("simulate"))?;
    let residual = scheme_residual(&up, spec.sigma, &spec.a, &plan.p, &spec.bc)
        .map_err(stage("residual"))?
        .max(scheme_residual(&uq, spec.sigma, &spec.a, &plan.q, &spec.bc).map_err(stage("residual"))?);
    let tolerance = residual.max(1e-12);
    let kind = spec.fitted_trace();
    let (tp, tq) = (extract_cauchy_trace(&up), extract_cauchy_trace(&uq));
    let tn = spec.tgrid.nodes();
    let diff: Vec<(f64, f64)> = fitted(&tp, kind)
        .iter()
        .zip(fitted(&tq, kind))
        .zip(&tn)
        .map(|((a, b), &t)| (t, (a - b).norm()))
        .collect();
    let mut csv = String::from("t,gap\n");
    for (t, g) in &diff {
        csv.push_str(&format!("{t},{g}\n"));
    }
    run.write("gap.csv", &csv)?;
    run.plot(
        "gap.svg",
        LinePlot::new("Trace difference", "t", "|trace_p - trace_q|").with_series(Series::new("gap", diff)),
    )?;
    run.metric("gap", pq);
    run.metric("trace", if kind == TraceKind::Slope { "slope" } else { "value" });
    run.metric("solver_residual", residual);
    run.check("symmetric", pq == qp, Some((pq - qp).abs()), Some(0.0));
    run.at_most("self_gap", pp, 1e-12);
    if plan.p.values() == plan.q.values() {
        run.at_most("equal_potentials_gap", pq, 1e-12);
    } else {
        run.at_least("gap_over_tolerance", pq / tolerance, 100.0);
    }
    Ok(())
}

fn run_local_chain(run: &mut Run, plan: &LocalChainPlan) -> Result<(), StageError> {
    match local_uniqueness_check(&plan.a, &plan.p, &plan.q, &plan.b) {
        Err(ReconError::HypothesisViolated { kappa }) => {
            run.metric("kappa", kappa);
            run.metric("hypothesis_violated", true);
            run.check("hypothesis_outcome", plan.expect_violation, None, None);
            Ok(())
        }
        Err(e) => Err(stage("chain")(e)),
        Ok(report) => {
            let mut csv = String::from("x,lhs,rhs,majorant\n");
            for i in 0..report.x.len() {
                csv.push_str(&format!("{},{},{},{}\n", report.x[i], report.lhs[i], report.rhs[i], report.majorant[i]));
            }
            run.write("chain.csv", &csv)?;
            let pts = |v: &[f64]| report.x.iter().copied().zip(v.iter().copied()).collect();
            run.plot(
                "chain.svg",
                LinePlot::new("Local chain", "x", "value")
                    .with_series(Series::new("lhs", pts(&report.lhs)))
                    .with_series(Series::new("rhs", pts(&report.rhs)))
                    .with_series(Series::new("majorant", pts(&report.majorant))),
            )?;
            run.json("chain.json", &report)?;
            run.metric("kappa", report.kappa);
            run.metric("epsilon_star", report.epsilon_star);
            run.metric("chain_constant", report.chain_constant);
            run.metric("uniqueness_radius", report.uniqueness_radius);
            run.metric("hypothesis_violated", false);
            run.check("hypothesis_outcome", !plan.expect_violation, None, None);
            run.check("epsilon_star_positive", report.epsilon_star > 0.0, Some(report.epsilon_star), Some(0.0));
            Ok(())
        }
    }
}

fn run_ucp(run: &mut Run, plan: &UcpPlan) -> Result<(), StageError> {
    let (c4, c5) = match plan.constants {
        Some(c) => c,
        None => {
            let z = ucp_test_function(plan.sgrid, plan.tgrid);
            let fit = fit_ucp_constants(&z, plan.t0, plan.x0, plan.delta, &plan.tau_grid, plan.sigma, &plan.a, &plan.p)
                .map_err(stage("fit"))?;
            let mut csv = String::from("tau,log_commutator_integral,log_energy_integral\n");
            for i in 0..fit.tau_grid.len() {
                csv.push_str(&format!("{},{},{}\n", fit.tau_grid[i], fit.log_commutator[i], fit.log_energy[i]));
            }
            run.write("fit.csv", &csv)?;
            (fit.c4, fit.c5)
        }
    };
    let table = ucp_separation_demo(plan.sgrid.ell(), plan.x0, plan.delta, &plan.tau_grid, c4, c5).map_err(stage("demo"))?;
    run.write("table.csv", &table.to_csv())?;
    run.plot(
        "bounds.svg",
        LinePlot::new("Separation of the two bounds", "tau", "log bound")
            .with_series(Series::new(
                "C4 exp(2 tau (2 + delta))",
                table.rows.iter().map(|r| (r.tau, r.log_commutator_bound)).collect(),
            ))
            .with_series(Series::new(
                "C5 exp(2 tau (ell + 2 - x0 - delta))",
                table.rows.iter().map(|r| (r.tau, r.log_energy_bound)).collect(),
            )),
    )?;
    run.json("table.json", &table)?;
    run.metric("commutator_exponent", table.commutator_exponent);
    run.metric("energy_exponent", table.energy_exponent);
    run.metric("c4", c4);
    run.metric("c5", c5);
    run.metric("tau_star", table.tau_star);
    run.check(
        "exponent_gap",
        table.energy_exponent > table.commutator_exponent,
        Some(table.energy_exponent - table.commutator_exponent),
        Some(0.0),
    );
    run.check("tau_star_finite", table.tau_star.is_some_and(f64::is_finite), table.tau_star, None);
    run.check("separated", table.verdict, None, None);
    Ok(())
}

fn execute(run: &mut Run, plan: &Plan) -> Result<(), StageError> {
    match plan {
        Plan::Forward(p) => run_forward(run, p),
        Plan::Kernel(p) => run_kernel(run, p),
        Plan::Intertwine(p) => run_intertwine(run, p),
        Plan::Reconstruct(p) => run_reconstruct(run, p),
        Plan::Carleman(p) => run_carleman(run, p),
        Plan::Distinguish(p) => run_distinguish(run, p),
        Plan::LocalChain(p) => run_local_chain(run, p),
        Plan::UcpDemo(p) => run_ucp(run, p),
    }
}

fn write_summary(dir: &Path, summary: &Summary) {
    if std::fs::create_dir_all(dir).is_ok() {
        if let Ok(text) = serde_json::to_string_pretty(summary) {
            let _ = std::fs::write(dir.join("summary.json"), text + "\n");
        }
    }
}

/// Validates and runs a parsed manifest; always writes `summary.json`.
pub fn run_loaded(loaded: &LoadedManifest) -> Outcome {
    let dir = loaded.output_dir();
    let kind = Some(loaded.manifest.kind.name().to_string());
    let plan = match validate(loaded) {
        Ok(plan) => plan,
        Err(e) => {
            let summary = Summary::validation(kind, &e);
            write_summary(&dir, &summary);
            return Outcome {
                status: Status::ValidationError,
                summary,
                output_dir: Some(dir),
            };
        }
    };
    let mut run = Run {
        dir: dir.clone(),
        artifacts: BTreeSet::new(),
        checks: Vec::new(),
        metrics: BTreeMap::new(),
    };
    let result = std::fs::create_dir_all(&dir).map_err(stage("write")).and_then(|_| execute(&mut run, &plan));
    let (status, failing_stage, error) = match result {
        Err(e) => (Status::NumericalFailure, Some(e.stage.to_string()), Some(e.message)),
        Ok(()) if run.checks.iter().all(|c| c.pass) => (Status::Pass, None, None),
        Ok(()) => {
            let failed: Vec<&str> = run.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            (Status::ChecksFailed, Some("checks".into()), Some(format!("failed checks: {}", failed.join(", "))))
        }
    };
    let mut artifacts: Vec<String> = run.artifacts.into_iter().collect();
    artifacts.push("summary.json".into());
    artifacts.sort();
    let summary = Summary {
        kind,
        status,
        pass: status == Status::Pass,
        checks: run.checks,
        metrics: run.metrics,
        artifacts,
        failing_stage,
        error,
    };
    write_summary(&dir, &summary);
    Outcome {
        status,
        summary,
        output_dir: Some(dir),
    }
}

pub fn run_manifest(path: &Path) -> Outcome {
    match load_manifest(path) {
        Ok(loaded) => run_loaded(&loaded),
        Err((e, dir)) => {
            let summary = Summary::validation(None, &e);
            if let Some(d) = &dir {
                write_summary(d, &summary);
            }
            Outcome {
                status: Status::ValidationError,
                summary,
                output_dir: dir,
            }
        }
    }
}

/// Parses and validates without running.
pub fn validate_manifest(path: &Path) -> Result<Kind, ValidationError> {
    let loaded = load_manifest(path).map_err(|(e, _)| e)?;
    validate(&loaded)?;
    Ok(loaded.manifest.kind)
}

use crate::manifest::Kind;

/// Runs every `*.json` manifest in `dir` (sorted by name) on up to `threads`
/// workers. Manifests sharing an output directory are rejected.
pub fn run_batch(dir: &Path, threads: Option<usize>) -> std::io::Result<Vec<(PathBuf, Outcome)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    let loaded: Vec<_> = paths.iter().map(|p| load_manifest(p)).collect();
    let mut owners: BTreeMap<PathBuf, usize> = BTreeMap::new();
    for l in loaded.iter().flatten() {
        *owners.entry(l.output_dir()).or_default() += 1;
    }
    let job = |(path, l): (&PathBuf, &Result<LoadedManifest, (ValidationError, Option<PathBuf>)>)| {
        let outcome = match l {
            Ok(l) if owners[&l.output_dir()] > 1 => {
                let e = ValidationError::new("output_dir", format!("{} is shared with another manifest", l.manifest.output_dir.display()));
                Outcome {
                    status: Status::ValidationError,
                    summary: Summary::validation(Some(l.manifest.kind.name().into()), &e),
                    output_dir: None,
                }
            }
            Ok(l) => run_loaded(l),
            Err(_) => run_manifest(path),
        };
        (path.clone(), outcome)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(std::io::Error::other)?;
    Ok(pool.install(|| paths.par_iter().zip(loaded.par_iter()).map(job).collect()))
}

/// Worst status of a batch, by exit-code severity.
pub fn batch_status(outcomes: &[(PathBuf, Outcome)]) -> Status {
    outcomes.iter().map(|(_, o)| o.status).max().unwrap_or(Status::Pass)
}
