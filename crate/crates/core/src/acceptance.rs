//! The acceptance suite: eleven numbered checks, each producing one
//! [`CriterionOutcome`].

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::applications::{check_correlation, shipped_scenarios, Expectation};
use crate::brenier::{lipschitz_estimate, radial_brenier, transport_point, verify_logderiv_identity, Density1D};
use crate::error::Result;
use crate::flow::{limit_map, pairwise_lipschitz, pushforward_residual_1d, LimitMapConfig};
use crate::gaussian::{brenier_linear, contraction_certificate, integrate_matrix_flow, mehler_quadratic, GaussianPair};
use crate::potentials::{ProfileKind, RadialProfile};
use crate::semigroup::{
    evolve, neg_log_hessian_min_interior, quadratic_fit_hessian, quantitative_bounds_report, Axis, BoundaryCondition, Generator, Grid, GridField,
    GridPotential, Solver,
};

pub const CRITERIA: usize = 11;

#[derive(Debug, Clone)]
pub struct AcceptanceOptions {
    pub seed: u64,
    /// Multiplies every tolerance.
    pub tolerance_scale: f64,
    /// Extra per-criterion tolerance factors (fault injection).
    pub overrides: BTreeMap<usize, f64>,
}

impl Default for AcceptanceOptions {
    fn default() -> Self {
        Self { seed: 20_240_601, tolerance_scale: 1.0, overrides: BTreeMap::new() }
    }
}

impl AcceptanceOptions {
    fn scale(&self, id: usize) -> f64 {
        self.tolerance_scale * self.overrides.get(&id).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: usize,
    pub title: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub details: Vec<String>,
    pub note: Option<String>,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<44} measured {:<12.4e} tolerance {:<10.3e} {:>7.1}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.measured,
            self.tolerance,
            self.seconds
        )
    }

    fn failed(id: usize, title: &str, err: crate::Error, start: Instant) -> Self {
        Self {
            id,
            title: title.into(),
            passed: false,
            measured: f64::NAN,
            tolerance: f64::NAN,
            seconds: start.elapsed().as_secs_f64(),
            details: vec![format!("aborted: {err}")],
            note: None,
        }
    }
}

pub const TITLES: [&str; CRITERIA] = [
    "gaussian matrix-flow invariant",
    "gaussian transport contraction",
    "commuting pairs recover the brenier map",
    "mehler oracle vs grid semigroup",
    "1D flow map equals quantile map",
    "log-concavity preserved on grids",
    "semigroup conservation and bounds",
    "flow contraction certificates",
    "radial brenier contraction",
    "correlation suite",
    "refinement convergence",
];

/// Results shared between the flow criteria and the refinement check.
#[derive(Debug, Default)]
pub struct FlowCache {
    runs: Vec<(usize, f64, FlowRun)>,
}

impl FlowCache {
    /// Flow run for scenario `k` at step `h`, computed once.
    fn run(&mut self, k: usize, h: f64, seed: u64) -> Result<FlowRun> {
        if let Some((_, _, r)) = self.runs.iter().find(|(kk, hh, _)| *kk == k && *hh == h) {
            return Ok(r.clone());
        }
        let r = run_flow(&FLOW_SCENARIOS[k], h, seed.wrapping_add(k as u64))?;
        self.runs.push((k, h, r.clone()));
        Ok(r)
    }
}

pub fn run_all(opts: &AcceptanceOptions) -> Vec<CriterionOutcome> {
    let mut cache = FlowCache::default();
    (1..=CRITERIA).map(|id| run_criterion(id, opts, &mut cache)).collect()
}

pub fn run_criterion(id: usize, opts: &AcceptanceOptions, cache: &mut FlowCache) -> CriterionOutcome {
    let start = Instant::now();
    let title = TITLES[id - 1];
    let result = match id {
        1 => criterion_1(opts),
        2 => criterion_2(opts),
        3 => criterion_3(opts),
        4 => criterion_4(opts),
        5 => criterion_5(opts, cache),
        6 => criterion_6(opts),
        7 => criterion_7(opts),
        8 => criterion_8(opts, cache),
        9 => criterion_9(opts),
        10 => criterion_10(opts),
        11 => criterion_11(opts, cache),
        _ => unreachable!("criterion ids run from 1 to {CRITERIA}"),
    };
    match result {
        Ok(mut o) => {
            o.id = id;
            o.title = title.into();
            o.seconds = start.elapsed().as_secs_f64();
            o
        }
        Err(e) => CriterionOutcome::failed(id, title, e, start),
    }
}

fn outcome(passed: bool, measured: f64, tolerance: f64, details: Vec<String>) -> CriterionOutcome {
    CriterionOutcome { id: 0, title: String::new(), passed, measured, tolerance, seconds: 0.0, details, note: None }
}

fn random_pairs(seed: u64) -> Vec<(GaussianPair, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|k| {
            let commuting = k < 5;
            let n = 2 + k % 2;
            (GaussianPair::random(&mut rng, n, commuting, 0.5, 3.0), commuting)
        })
        .collect()
}

fn criterion_1(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let start = Instant::now();
    let tol = 1e-6 * opts.scale(1);
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (k, (pair, commuting)) in random_pairs(opts.seed).iter().enumerate() {
        let flow = integrate_matrix_flow(pair, 1e-3, 1e-8, 1000)?;
        worst = worst.max(flow.max_residual);
        details.push(format!("pair {k} n={} commuting={commuting} t_end={:.2} residual={:.2e}", pair.dim(), flow.t_final, flow.max_residual));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("runtime {secs:.2}s (limit 10s)"));
    Ok(outcome(worst <= tol && secs < 10.0, worst, tol, details))
}

fn criterion_2(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let excess_tol = 1e-8 * opts.scale(2);
    let mut worst = f64::NEG_INFINITY;
    let mut details = Vec::new();
    for (k, (pair, commuting)) in random_pairs(opts.seed).iter().enumerate() {
        let flow = integrate_matrix_flow(pair, 1e-3, 1e-8, 1000)?;
        let sigma = contraction_certificate(&flow.transport);
        worst = worst.max(sigma);
        details.push(format!("pair {k} commuting={commuting} sigma_max={sigma:.10}"));
    }
    Ok(outcome(worst <= 1.0 + excess_tol, worst, 1.0 + excess_tol, details))
}

fn criterion_3(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let tol = 1e-6 * opts.scale(3);
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (k, (pair, commuting)) in random_pairs(opts.seed).iter().enumerate() {
        if !commuting {
            continue;
        }
        let flow = integrate_matrix_flow(pair, 1e-3, 1e-8, 1000)?;
        let copt = brenier_linear(pair)?;
        let gap = (&flow.transport - &copt).norm();
        worst = worst.max(gap);
        details.push(format!("pair {k} |T - C_opt|_F = {gap:.3e}"));
    }
    Ok(outcome(worst <= tol, worst, tol, details))
}

fn quadratic_potential(a: [f64; 4]) -> GridPotential {
    GridPotential::new(
        move |c| 0.5 * (a[0] * c[0] * c[0] + 2.0 * a[1] * c[0] * c[1] + a[3] * c[1] * c[1]),
        move |c| vec![a[0] * c[0] + a[1] * c[1], a[1] * c[0] + a[3] * c[1]],
    )
}

fn criterion_4(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let start = Instant::now();
    let tol = 1e-4 * opts.scale(4);
    let times = [0.1, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();

    let pair = GaussianPair::from_rows(1, &[1.0], &[1.0])?;
    let grid = Arc::new(Grid::line(Axis::full_with_spacing(8.0, 0.005))?);
    let pot = GridPotential::new(|c| 0.5 * c[0] * c[0], |c| vec![c[0]]);
    let mut solver = Solver::new(Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting)?, 1e-3)?;
    let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |c| (-0.5 * c[0] * c[0]).exp())?;
    let ev = evolve(&mut solver, &f0, 1.0, &times)?;
    for s in &ev.snapshots {
        let fit = quadratic_fit_hessian(s, 3.0)?;
        let err = (fit[0] - mehler_quadratic(&pair, s.t)?[(0, 0)]).abs();
        worst = worst.max(err);
        details.push(format!("1D t={:.1} error={err:.2e}", s.t));
    }

    // 2D: Richardson extrapolation of the fitted Hessians over h and h/2
    let a = [2.0, 0.5, 0.5, 1.5];
    let b = [0.8, -0.3, -0.3, 2.0];
    let pair = GaussianPair::from_rows(2, &a, &b)?;
    let fits = |h: f64| -> Result<Vec<Vec<f64>>> {
        let axis = Axis::full_with_spacing(6.5, h);
        let grid = Arc::new(Grid::plane(axis, axis)?);
        let mut solver = Solver::new(Generator::build(grid.clone(), &quadratic_potential(a), BoundaryCondition::Reflecting)?, 2.5e-3)?;
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |c| {
            (-0.5 * (b[0] * c[0] * c[0] + 2.0 * b[1] * c[0] * c[1] + b[3] * c[1] * c[1])).exp()
        })?;
        let ev = evolve(&mut solver, &f0, 1.0, &times)?;
        ev.snapshots.iter().map(|s| quadratic_fit_hessian(s, 2.5)).collect()
    };
    let coarse = fits(0.05)?;
    let fine = fits(0.025)?;
    for (k, t) in times.iter().enumerate() {
        let m = mehler_quadratic(&pair, *t)?;
        let mut err: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let extrapolated = (4.0 * fine[k][2 * i + j] - coarse[k][2 * i + j]) / 3.0;
                err = err.max((extrapolated - m[(i, j)]).abs());
            }
        }
        worst = worst.max(err);
        details.push(format!("2D t={t:.1} extrapolated error={err:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("runtime {secs:.1}s (limit 60s)"));
    Ok(outcome(worst <= tol && secs < 60.0, worst, tol, details))
}

/// A 1D flow experiment: `U`, `V` and the box half-width.
#[derive(Clone, Copy)]
struct FlowScenario {
    name: &'static str,
    u: fn(f64) -> f64,
    du: fn(f64) -> f64,
    v: fn(f64) -> f64,
    extent: f64,
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

const FLOW_SCENARIOS: [FlowScenario; 3] = [
    FlowScenario { name: "logcosh-quadratic", u: log_cosh, du: f64::tanh, v: |x| 0.5 * x * x, extent: 24.0 },
    FlowScenario { name: "quadratic-logcosh", u: |x| 0.5 * x * x, du: |x| x, v: log_cosh, extent: 10.0 },
    FlowScenario {
        name: "sqrt-quartic",
        u: |x| (1.0 + x * x).sqrt() - 1.0,
        du: |x| x / (1.0 + x * x).sqrt(),
        v: |x| x.powi(4) / 16.0 + 0.25 * x * x,
        extent: 26.0,
    },
];

#[derive(Debug, Clone)]
struct FlowRun {
    t_star: f64,
    sup_vs_quantile: f64,
    lipschitz: f64,
    round_trip: f64,
    residual: f64,
    escaped: usize,
    seconds: f64,
}

fn run_flow(sc: &FlowScenario, h: f64, seed: u64) -> Result<FlowRun> {
    let start = Instant::now();
    let grid = Arc::new(Grid::line(Axis::full_with_spacing(sc.extent, h))?);
    let (u, du, v) = (sc.u, sc.du, sc.v);
    let pot = GridPotential::new(move |c| u(c[0]), move |c| vec![du(c[0])]);
    let mut solver = Solver::new(Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting)?, h)?;
    let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, move |c| (-v(c[0])).exp())?;
    let seeds: Vec<f64> = (0..=120).map(|i| -3.0 + 0.05 * i as f64).collect();
    let forward: Vec<f64> = (0..=12).map(|i| -1.5 + 0.25 * i as f64).collect();
    let mut cfg = LimitMapConfig::new(h, 400.0, vec![3.5]);
    cfg.segment_steps = 2000;
    cfg.check_every = 50;
    let lm = limit_map(&mut solver, &f0, &seeds, &forward, &cfg)?;
    let source = Density1D::on_line(move |x| -u(x))?;
    let target = Density1D::on_line(move |x| -u(x) - v(x))?;
    let samples: Vec<(f64, f64)> = lm.samples().into_iter().map(|(x, t)| (x[0], t[0])).collect();
    let mut sup: f64 = 0.0;
    for (x, t) in &samples {
        sup = sup.max((transport_point(&source, &target, *x)? - t).abs());
    }
    let (xs, ts): (Vec<f64>, Vec<f64>) = samples.iter().copied().unzip();
    Ok(FlowRun {
        t_star: lm.t_star,
        sup_vs_quantile: sup,
        lipschitz: pairwise_lipschitz(&xs, &ts, 1, 200, seed),
        round_trip: lm.max_round_trip(),
        residual: pushforward_residual_1d(&samples, &source, &target),
        escaped: lm.escaped_map_seeds() + lm.forward.escaped_count(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

const C5_FINE: f64 = 1e-3;
const C5_COARSE: f64 = 2e-3;
const C8_FINE: f64 = 2e-3;
const C8_COARSE: f64 = 4e-3;

fn criterion_5(opts: &AcceptanceOptions, cache: &mut FlowCache) -> Result<CriterionOutcome> {
    let tol = 1e-3 * opts.scale(5);
    let run = cache.run(0, C5_FINE, opts.seed)?;
    let details = vec![
        format!("h=dt={C5_FINE:e} t*={:.2} escaped={} sup|T - T_opt| on [-3,3] = {:.3e}", run.t_star, run.escaped, run.sup_vs_quantile),
        format!("runtime {:.1}s (limit 120s)", run.seconds),
    ];
    Ok(outcome(run.sup_vs_quantile <= tol && run.escaped == 0 && run.seconds < 120.0, run.sup_vs_quantile, tol, details))
}

const WALL_MARGIN: f64 = 2.0;

fn criterion_6(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let start = Instant::now();
    let times = [0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0];
    let mut details = Vec::new();
    // worst min-eigenvalue relative to its grid tolerance
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut worst_eig = f64::INFINITY;
    let mut passed = true;
    type Scalar = fn(&[f64]) -> f64;
    type Vector = fn(&[f64]) -> Vec<f64>;
    let cases: [(&str, usize, f64, f64, Scalar, Vector, Scalar); 6] = [
        ("quadratic/quartic 1D", 1, 24.0, 0.01, |c| 0.5 * c[0] * c[0], |c| vec![c[0]], |c| 0.25 * c[0].powi(4)),
        ("logcosh/convex 1D", 1, 20.0, 0.01, |c| log_cosh(c[0]), |c| vec![c[0].tanh()], |c| log_cosh(2.0 * c[0]) + 0.25 * c[0] * c[0]),
        (
            "sqrt/quadratic 1D",
            1,
            24.0,
            0.01,
            |c| (1.0 + c[0] * c[0]).sqrt() - 1.0,
            |c| vec![c[0] / (1.0 + c[0] * c[0]).sqrt()],
            |c| 0.5 * c[0] * c[0],
        ),
        (
            "logcosh blocks 2D",
            2,
            11.0,
            0.05,
            |c| log_cosh(c[0]) + log_cosh(c[1]),
            |c| vec![c[0].tanh(), c[1].tanh()],
            |c| (1.0 + c[0] * c[0] + 2.0 * c[1] * c[1]).sqrt() + 0.25 * (c[0] * c[0] + c[1] * c[1]),
        ),
        (
            "sqrt radial 2D",
            2,
            11.0,
            0.05,
            |c| (1.0 + c[0] * c[0] + c[1] * c[1]).sqrt() - 1.0,
            |c| {
                let s = (1.0 + c[0] * c[0] + c[1] * c[1]).sqrt();
                vec![c[0] / s, c[1] / s]
            },
            |c| {
                let r2 = c[0] * c[0] + c[1] * c[1];
                log_cosh(r2.sqrt()) + 0.25 * r2
            },
        ),
        (
            "quadratic E0 + logcosh block 2D",
            2,
            14.0,
            0.05,
            |c| 0.75 * c[0] * c[0] + log_cosh(c[1]),
            |c| vec![1.5 * c[0], c[1].tanh()],
            |c| 0.5 * (c[0] - 1.0).powi(2) + 2.0 * log_cosh(c[1]),
        ),
    ];
    for (name, dim, extent, h, u, du, v) in cases {
        let axis = Axis::full_with_spacing(extent, h);
        let grid = Arc::new(if dim == 1 { Grid::line(axis)? } else { Grid::plane(axis, axis)? });
        let pot = GridPotential::new(u, du);
        let dt = if dim == 1 { 5e-3 } else { 1e-2 };
        let mut solver = Solver::new(Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting)?, dt)?;
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, move |c| (-v(c)).exp())?;
        let ev = evolve(&mut solver, &f0, 2.0, &times)?;
        let tol = 10.0 * h * opts.scale(6);
        // nodes in the core on the reflecting wall; the check skips a layer of width WALL_MARGIN
        let wall: usize = ev
            .snapshots
            .iter()
            .map(|s| s.core_mask().iter().enumerate().filter(|(p, c)| **c && s.grid.is_boundary(*p)).count())
            .sum();
        let checks: Vec<_> = ev.snapshots.iter().map(|s| neg_log_hessian_min_interior(s, WALL_MARGIN)).collect();
        let worst = checks.iter().min_by(|a, b| a.min_eigenvalue.total_cmp(&b.min_eigenvalue)).expect("snapshots recorded");
        let min = worst.min_eigenvalue;
        passed &= min >= -tol;
        worst_ratio = worst_ratio.max(-min / tol);
        worst_eig = worst_eig.min(min);
        details.push(format!(
            "{name}: h={h} min eigenvalue {min:.3e} at t={:.2} x={:?} (tol -{tol:.2e}), wall nodes in core {wall}",
            worst.t,
            &worst.location[..dim]
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("runtime {secs:.1}s (limit 300s)"));
    let mut o = outcome(passed && secs < 300.0, worst_eig, -10.0, details);
    o.note = Some(format!("tolerance is -10h per case; worst min/tol ratio {worst_ratio:.3}"));
    Ok(o)
}

fn criterion_7(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let s = opts.scale(7);
    let times = [0.1, 0.25, 0.5, 1.0, 1.5, 2.0];
    let mut details = Vec::new();
    let mut passed = true;
    let mut worst_mass: f64 = 0.0;
    type Scalar = fn(&[f64]) -> f64;
    type Vector = fn(&[f64]) -> Vec<f64>;
    let cases: [(&str, usize, f64, f64, Scalar, Vector, Scalar, Vector); 2] = [
        (
            "logcosh 1D",
            1,
            24.0,
            0.01,
            |c| log_cosh(c[0]),
            |c| vec![c[0].tanh()],
            |c| (1.0 + c[0] * c[0]).sqrt(),
            |c| vec![c[0] / (1.0 + c[0] * c[0]).sqrt()],
        ),
        (
            "quadratic 2D",
            2,
            7.0,
            0.05,
            |c| 0.5 * (1.5 * c[0] * c[0] + 0.6 * c[0] * c[1] + c[1] * c[1]),
            |c| vec![1.5 * c[0] + 0.3 * c[1], 0.3 * c[0] + c[1]],
            |c| (1.0 + c[0] * c[0] + c[1] * c[1]).sqrt(),
            |c| {
                let r = (1.0 + c[0] * c[0] + c[1] * c[1]).sqrt();
                vec![c[0] / r, c[1] / r]
            },
        ),
    ];
    for (name, dim, extent, h, u, du, v, dv) in cases {
        let axis = Axis::full_with_spacing(extent, h);
        let grid = Arc::new(if dim == 1 { Grid::line(axis)? } else { Grid::plane(axis, axis)? });
        let mut solver = Solver::new(Generator::build(grid.clone(), &GridPotential::new(u, du), BoundaryCondition::Reflecting)?, 5e-3)?;
        let f0 = GridField::from_fn(grid.clone(), BoundaryCondition::Reflecting, move |c| (-v(c)).exp())?;
        let grad_v0 = (0..grid.len()).map(|p| dv(&grid.coords(p)).iter().map(|g| g * g).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let f0_sup = f0.max();
        let ev = evolve(&mut solver, &f0, 2.0, &times)?;
        let bounds = quantitative_bounds_report(&ev.snapshots, grad_v0, f0_sup);
        let grad_ok = bounds.entries.iter().all(|e| e.grad_log <= grad_v0 * (1.0 + 1e-6 * s));
        let smooth_ok = bounds.entries.iter().all(|e| e.grad_f_scaled <= f0_sup * (1.0 + 1e-6 * s));
        let mass_ok = ev.mass_drift <= 1e-10 * s;
        let max_ok = ev.max_increase <= 1e-12 * s * f0_sup;
        passed &= grad_ok && smooth_ok && mass_ok && max_ok;
        worst_mass = worst_mass.max(ev.mass_drift);
        let g = bounds.entries.iter().map(|e| e.grad_log).fold(0.0, f64::max);
        let sm = bounds.entries.iter().map(|e| e.grad_f_scaled).fold(0.0, f64::max);
        details.push(format!(
            "{name}: mass drift {:.2e}, max increase {:.2e}, |grad log f| {g:.6} <= {grad_v0:.6}, |grad f| sqrt(2t) {sm:.6} <= {f0_sup:.6}",
            ev.mass_drift, ev.max_increase
        ));
    }
    Ok(outcome(passed, worst_mass, 1e-10 * s, details))
}

fn criterion_8(opts: &AcceptanceOptions, cache: &mut FlowCache) -> Result<CriterionOutcome> {
    let s = opts.scale(8);
    let (lip_tol, rt_tol, res_tol) = (1.0 + 5e-3 * s, 1e-6 * s, 5e-3 * s);
    let mut details = Vec::new();
    let mut passed = true;
    let mut worst_res: f64 = 0.0;
    for (k, sc) in FLOW_SCENARIOS.iter().enumerate() {
        let h = if k == 0 { C5_FINE } else { C8_FINE };
        let run = cache.run(k, h, opts.seed)?;
        let ok = run.lipschitz <= lip_tol && run.round_trip <= rt_tol && run.residual <= res_tol && run.escaped == 0;
        passed &= ok;
        worst_res = worst_res.max(run.residual);
        details.push(format!(
            "{}: h={h:e} t*={:.2} lipschitz={:.6} round-trip={:.2e} push-forward={:.2e} ({:.1}s)",
            sc.name, run.t_star, run.lipschitz, run.round_trip, run.residual, run.seconds
        ));
    }
    let (lip, rt) = gaussian_flow_2d(opts.seed)?;
    passed &= lip <= lip_tol && rt <= rt_tol;
    details.push(format!("commuting gaussian 2D: lipschitz={lip:.6} round-trip={rt:.2e}"));
    Ok(outcome(passed, worst_res, res_tol, details))
}

/// Lipschitz constant and round-trip error of the 2D commuting Gaussian flow.
fn gaussian_flow_2d(seed: u64) -> Result<(f64, f64)> {
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = |d0: f64, d1: f64| [c * c * d0 + s * s * d1, c * s * (d0 - d1), c * s * (d0 - d1), s * s * d0 + c * c * d1];
    let a = rot(1.0, 2.0);
    let b = rot(1.0, 0.5);
    let axis = Axis::full_with_spacing(7.0, 0.05);
    let grid = Arc::new(Grid::plane(axis, axis)?);
    let mut solver = Solver::new(Generator::build(grid.clone(), &quadratic_potential(a), BoundaryCondition::Reflecting)?, 5e-3)?;
    let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, move |x| {
        (-0.5 * (b[0] * x[0] * x[0] + 2.0 * b[1] * x[0] * x[1] + b[3] * x[1] * x[1])).exp()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<f64> = (0..400).map(|_| rng.random_range(-2.0..2.0)).collect();
    let forward: Vec<f64> = (0..40).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut cfg = LimitMapConfig::new(5e-3, 60.0, vec![2.5, 2.5]);
    cfg.segment_steps = 500;
    let lm = limit_map(&mut solver, &f0, &seeds, &forward, &cfg)?;
    let (xs, ts): (Vec<Vec<f64>>, Vec<Vec<f64>>) = lm.samples().into_iter().unzip();
    let xs: Vec<f64> = xs.concat();
    let ts: Vec<f64> = ts.concat();
    Ok((pairwise_lipschitz(&xs, &ts, 2, 200, seed), lm.max_round_trip()))
}

fn criterion_9(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let s = opts.scale(9);
    let (lip_tol, res_tol) = (1.0 + 1e-4 * s, 1e-4 * s);
    let mut details = Vec::new();
    let mut passed = true;
    let mut worst_res: f64 = 0.0;
    let vs: [(&str, fn(f64) -> f64); 2] = [("r", |r| r), ("r^2/2", |r| 0.5 * r * r)];
    for n in [2usize, 3, 5] {
        for rho in [RadialProfile::quadratic(), RadialProfile::log_cosh()] {
            for (vname, v) in vs {
                let rb = radial_brenier(rho, v, n, 2001)?;
                let lip = lipschitz_estimate(&rb.map);
                let k = (n - 1) as f64;
                let res = verify_logderiv_identity(&rb.map, move |r| rho.value(r) - k * r.ln(), v)?;
                passed &= lip <= lip_tol && rb.contracts_to_origin && res <= res_tol;
                worst_res = worst_res.max(res);
                let rname = match rho.kind {
                    ProfileKind::Quadratic => "r^2/2",
                    _ => "log cosh",
                };
                details.push(format!(
                    "n={n} rho={rname} v={vname}: lipschitz={lip:.8} max(T(x)-x)={:.2e} identity residual={res:.2e}",
                    rb.max_excess
                ));
            }
        }
    }
    Ok(outcome(passed, worst_res, res_tol, details))
}

fn criterion_10(opts: &AcceptanceOptions) -> Result<CriterionOutcome> {
    let start = Instant::now();
    let n = 1_000_000;
    let mut details = Vec::new();
    let mut passed = true;
    let mut worst_z = f64::INFINITY;
    for sc in shipped_scenarios()? {
        let verdict = check_correlation(&sc, n, opts.seed)?;
        let e = &verdict.estimate;
        let z = match sc.expectation {
            Expectation::Oracle { value } => -(e.gap - value).abs() / e.stderr,
            Expectation::Independent => -e.gap.abs() / e.stderr,
            Expectation::Nonnegative => e.gap / e.stderr,
        };
        worst_z = worst_z.min(z);
        passed &= verdict.passed && !e.degenerate;
        details.push(format!(
            "{}: gap={:.4e} stderr={:.2e} z={z:.2}{} {}",
            sc.name,
            e.gap,
            e.stderr,
            if verdict.reran { " (rerun at 4N)" } else { "" },
            if verdict.passed { "pass" } else { "fail" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    details.push(format!("runtime {secs:.1}s (limit 180s)"));
    let mut o = outcome(passed && secs < 180.0, worst_z, -2.0, details);
    o.note = Some("measured is the worst signed z-score; thresholds are 2 or 3 stderr by scenario kind".into());
    Ok(o)
}

fn criterion_11(opts: &AcceptanceOptions, cache: &mut FlowCache) -> Result<CriterionOutcome> {
    let min_ratio = 1.8 / opts.scale(11);
    let mut details = Vec::new();
    let mut ratios = Vec::new();
    let fine = cache.run(0, C5_FINE, opts.seed)?.sup_vs_quantile;
    let coarse = cache.run(0, C5_COARSE, opts.seed)?.sup_vs_quantile;
    ratios.push(coarse / fine);
    details.push(format!("flow vs quantile map: h={C5_COARSE:e} {coarse:.3e} -> h={C5_FINE:e} {fine:.3e}, ratio {:.2}", coarse / fine));
    for (k, sc) in FLOW_SCENARIOS.iter().enumerate() {
        let (hf, hc) = if k == 0 { (C5_FINE, C5_COARSE) } else { (C8_FINE, C8_COARSE) };
        let rf = cache.run(k, hf, opts.seed)?.residual;
        let rc = cache.run(k, hc, opts.seed)?.residual;
        ratios.push(rc / rf);
        details.push(format!("{} push-forward residual: h={hc:e} {rc:.3e} -> h={hf:e} {rf:.3e}, ratio {:.2}", sc.name, rc / rf));
    }
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(outcome(worst >= min_ratio, worst, min_ratio, details))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_criteria_pass() {
        let opts = AcceptanceOptions::default();
        let mut cache = FlowCache::default();
        for id in [1, 2, 3, 9] {
            let o = run_criterion(id, &opts, &mut cache);
            assert!(o.passed, "{}\n{:#?}", o.line(), o.details);
        }
    }

    #[test]
    fn injected_tolerance_isolates_failure() {
        let mut opts = AcceptanceOptions::default();
        opts.overrides.insert(3, 1e-12);
        let mut cache = FlowCache::default();
        assert!(!run_criterion(3, &opts, &mut cache).passed);
        assert!(run_criterion(2, &opts, &mut cache).passed);
    }

    #[test]
    fn outcome_line_format() {
        let o = CriterionOutcome {
            id: 4,
            title: "x".into(),
            passed: false,
            measured: 1.0,
            tolerance: 0.5,
            seconds: 0.1,
            details: Vec::new(),
            note: None,
        };
        assert!(o.line().starts_with("[FAIL]  4 x"));
    }

    #[test]
    fn flow_pairs_cover_both_kinds() {
        let pairs = random_pairs(1);
        assert_eq!(pairs.iter().filter(|p| p.1).count(), 5);
        assert!(pairs.iter().filter(|p| !p.1).all(|p| p.0.commutator_norm() > 1e-3));
    }
}
