//! The advection field `W_t = ∇Z_t`, `Z_t = −log P_t^U(e^{−V})`, its forward
//! flow `S_t`, the backward maps `T_t` and the certificates attached to them.
//!
//! Fields are stored on a rectangular window of grid nodes. Long runs are
//! driven segment by segment: the semigroup is checkpointed on the way
//! forward and replayed one segment at a time on the way back, so only one
//! segment of snapshots is ever held in memory.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::brenier::Density1D;
use crate::error::{Error, Result};
use crate::numerics::catmull_rom_weights;
use crate::semigroup::{neg_log_hessian_min, AxisKind, ConvergenceDiagnostics, Grid, GridField, HessianCheck, Solver, CORE_LEVEL};

/// Node box `lo..=hi` per axis where advection data is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub lo: [usize; 2],
    pub hi: [usize; 2],
    dim: usize,
}

impl Window {
    /// Whole grid minus the outer boundary nodes of full axes.
    pub fn full(grid: &Grid) -> Self {
        let mut lo = [0; 2];
        let mut hi = [0; 2];
        for (ax, a) in grid.axes().iter().enumerate() {
            match a.kind {
                AxisKind::Full => {
                    lo[ax] = 1;
                    hi[ax] = a.nodes - 2;
                }
                AxisKind::Radial { .. } => {
                    lo[ax] = 0;
                    hi[ax] = a.nodes - 2;
                }
            }
        }
        Self { lo, hi, dim: grid.dim() }
    }

    /// Nodes within `half_width[ax]` of the origin along each axis, plus a
    /// two-node margin for the interpolation stencil.
    pub fn around(grid: &Grid, half_width: &[f64]) -> Result<Self> {
        if half_width.len() != grid.dim() {
            return Err(Error::InvalidArgument("window needs one half-width per axis".into()));
        }
        let mut w = Self::full(grid);
        for (ax, a) in grid.axes().iter().enumerate() {
            let h = a.spacing();
            let cells = (half_width[ax] / h).ceil() as usize + 2;
            match a.kind {
                AxisKind::Full => {
                    let mid = (a.nodes - 1) / 2;
                    w.lo[ax] = mid.saturating_sub(cells).max(1);
                    w.hi[ax] = (mid + cells).min(a.nodes - 2);
                }
                AxisKind::Radial { .. } => {
                    w.hi[ax] = cells.min(a.nodes - 2);
                }
            }
        }
        Ok(w)
    }

    pub fn shape(&self) -> [usize; 2] {
        let n0 = self.hi[0] - self.lo[0] + 1;
        let n1 = if self.dim == 2 { self.hi[1] - self.lo[1] + 1 } else { 1 };
        [n0, n1]
    }

    pub fn len(&self) -> usize {
        let s = self.shape();
        s[0] * s[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn local(&self, i: usize, j: usize) -> usize {
        (i - self.lo[0]) * self.shape()[1] + if self.dim == 2 { j - self.lo[1] } else { 0 }
    }
}

/// `W` and the symmetrized `B = D²Z` on the window at one time.
#[derive(Debug, Clone)]
pub struct AdvectionSnapshot {
    pub t: f64,
    /// `dim` components per window node.
    pub w: Vec<f64>,
    /// `[B₀₀]` or `[B₀₀, B₀₁, B₁₁]` per window node.
    pub b: Vec<f64>,
    pub core: Vec<bool>,
}

fn sym_len(dim: usize) -> usize {
    if dim == 1 {
        1
    } else {
        3
    }
}

/// Grid neighbour of `(i, j)` along `ax`, mirrored through a radial origin.
/// Returns the node and whether it was mirrored.
fn neighbour(grid: &Grid, ax: usize, i: usize, j: usize, delta: isize) -> Option<(usize, usize, bool)> {
    let a = &grid.axes()[ax];
    let idx = if ax == 0 { i } else { j } as isize + delta;
    let (k, mirrored) = if idx < 0 {
        match a.kind {
            AxisKind::Radial { .. } => ((-idx - 1) as usize, true),
            AxisKind::Full => return None,
        }
    } else if idx as usize >= a.nodes {
        return None;
    } else {
        (idx as usize, false)
    };
    Some(if ax == 0 { (k, j, mirrored) } else { (i, k, mirrored) })
}

/// Computes the window snapshot of a field with values `f` at time `t`.
pub fn advection_snapshot(grid: &Grid, window: &Window, f: &[f64], t: f64) -> AdvectionSnapshot {
    let dim = grid.dim();
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = CORE_LEVEL * max;
    let n = window.len();
    let mut w = vec![0.0; n * dim];
    let mut b = vec![0.0; n * sym_len(dim)];
    let mut core = vec![false; n];
    let g = |i: usize, j: usize| -> Option<f64> {
        let v = f[grid.index(i, j)];
        (v >= level && v > 0.0).then(|| -v.ln())
    };
    let [s0, s1] = window.shape();
    for li in 0..s0 {
        for lj in 0..s1 {
            let i = window.lo[0] + li;
            let j = if dim == 2 { window.lo[1] + lj } else { 0 };
            let q = window.local(i, j);
            let Some(g0) = g(i, j) else { continue };
            let mut ok = true;
            let mut first = [0.0; 2];
            let mut second = [0.0; 2];
            for ax in 0..dim {
                let h = grid.axes()[ax].spacing();
                let (Some(p), Some(m)) = (neighbour(grid, ax, i, j, 1), neighbour(grid, ax, i, j, -1)) else {
                    ok = false;
                    break;
                };
                let (Some(gp), Some(gm)) = (g(p.0, p.1), g(m.0, m.1)) else {
                    ok = false;
                    break;
                };
                first[ax] = (gp - gm) / (2.0 * h);
                second[ax] = (gp - 2.0 * g0 + gm) / (h * h);
            }
            if !ok {
                continue;
            }
            let mut cross = 0.0;
            if dim == 2 {
                let corner = |d0: isize, d1: isize| -> Option<f64> {
                    let (a, _, _) = neighbour(grid, 0, i, j, d0)?;
                    let (_, c, _) = neighbour(grid, 1, a, j, d1)?;
                    g(a, c)
                };
                let (Some(pp), Some(pm), Some(mp), Some(mm)) = (corner(1, 1), corner(1, -1), corner(-1, 1), corner(-1, -1)) else {
                    continue;
                };
                let (h0, h1) = (grid.axes()[0].spacing(), grid.axes()[1].spacing());
                cross = (pp - pm - mp + mm) / (4.0 * h0 * h1);
            }
            core[q] = true;
            w[q * dim..q * dim + dim].copy_from_slice(&first[..dim]);
            if dim == 1 {
                b[q] = second[0];
            } else {
                b[3 * q] = second[0];
                b[3 * q + 1] = cross;
                b[3 * q + 2] = second[1];
            }
        }
    }
    AdvectionSnapshot { t, w, b, core }
}

/// Interpolated `W` and `B` at one space-time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub w: [f64; 2],
    /// Row-major `2×2` (only `[0]` used in 1D).
    pub b: [f64; 4],
}

/// Piecewise-linear-in-time, Catmull-Rom-in-space advection field.
#[derive(Debug, Clone)]
pub struct AdvectionField {
    grid: Arc<Grid>,
    window: Window,
    snapshots: Vec<AdvectionSnapshot>,
    /// Sup-norm continuity residual per snapshot interval (when densities were supplied).
    pub continuity: Vec<f64>,
}

struct Stencil {
    nodes: [usize; 4],
    signs: [f64; 4],
    weights: [f64; 4],
}

impl AdvectionField {
    pub fn new(grid: Arc<Grid>, window: Window, snapshots: Vec<AdvectionSnapshot>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::InvalidArgument("advection field needs at least one snapshot".into()));
        }
        if snapshots.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidArgument("snapshot times must increase".into()));
        }
        if snapshots.iter().all(|s| !s.core.iter().any(|c| *c)) {
            return Err(Error::Precondition("advection field has an empty core".into()));
        }
        Ok(Self { grid, window, snapshots, continuity: Vec::new() })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn snapshots(&self) -> &[AdvectionSnapshot] {
        &self.snapshots
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.snapshots[0].t, self.snapshots[self.snapshots.len() - 1].t)
    }

    fn stencil(&self, ax: usize, x: f64) -> Option<Stencil> {
        let a = &self.grid.axes()[ax];
        let h = a.spacing();
        let (s, radial) = match a.kind {
            AxisKind::Full => ((x + a.extent) / h, false),
            AxisKind::Radial { .. } => (x / h - 0.5, true),
        };
        if !s.is_finite() {
            return None;
        }
        let base = s.floor();
        let frac = s - base;
        let base = base as isize;
        let (lo, hi) = (self.window.lo[ax] as isize, self.window.hi[ax] as isize);
        let mut nodes = [0; 4];
        let mut signs = [1.0; 4];
        for k in 0..4 {
            let idx = base - 1 + k as isize;
            let (m, sign) = if idx < 0 {
                if !radial {
                    return None;
                }
                (-idx - 1, -1.0)
            } else {
                (idx, 1.0)
            };
            if m < lo || m > hi {
                return None;
            }
            nodes[k] = (m - lo) as usize;
            signs[k] = sign;
        }
        Some(Stencil { nodes, signs, weights: catmull_rom_weights(frac) })
    }

    /// Locates `t` among the snapshots: `(k, θ)` with `t = (1−θ)t_k + θt_{k+1}`.
    fn locate_time(&self, t: f64) -> Option<(usize, f64)> {
        let n = self.snapshots.len();
        let (t0, t1) = self.time_span();
        let slack = 1e-9 * (1.0 + t1.abs());
        if t < t0 - slack || t > t1 + slack {
            return None;
        }
        if n == 1 {
            return Some((0, 0.0));
        }
        let k = self.snapshots.partition_point(|s| s.t <= t).clamp(1, n - 1) - 1;
        let (a, b) = (self.snapshots[k].t, self.snapshots[k + 1].t);
        Some((k, ((t - a) / (b - a)).clamp(0.0, 1.0)))
    }

    fn spatial(&self, snap: &AdvectionSnapshot, st: &[Stencil]) -> Option<FieldSample> {
        let dim = self.grid.dim();
        let mut out = FieldSample { w: [0.0; 2], b: [0.0; 4] };
        let cols = self.window.shape()[1];
        let mut acc = |q: usize, weight: f64, m0: f64, m1: f64| -> bool {
            if !snap.core[q] {
                return false;
            }
            if dim == 1 {
                out.w[0] += weight * m0 * snap.w[q];
                out.b[0] += weight * snap.b[q];
            } else {
                out.w[0] += weight * m0 * snap.w[2 * q];
                out.w[1] += weight * m1 * snap.w[2 * q + 1];
                out.b[0] += weight * snap.b[3 * q];
                out.b[1] += weight * m0 * m1 * snap.b[3 * q + 1];
                out.b[3] += weight * snap.b[3 * q + 2];
            }
            true
        };
        if dim == 1 {
            for k in 0..4 {
                if !acc(st[0].nodes[k], st[0].weights[k], st[0].signs[k], 1.0) {
                    return None;
                }
            }
        } else {
            for a in 0..4 {
                for c in 0..4 {
                    let q = st[0].nodes[a] * cols + st[1].nodes[c];
                    if !acc(q, st[0].weights[a] * st[1].weights[c], st[0].signs[a], st[1].signs[c]) {
                        return None;
                    }
                }
            }
            out.b[2] = out.b[1];
        }
        Some(out)
    }

    /// `W(t, x)` and `B(t, x)`; `None` outside the window or core.
    pub fn sample(&self, t: f64, x: &[f64]) -> Option<FieldSample> {
        let dim = self.grid.dim();
        let (k, theta) = self.locate_time(t)?;
        let st: Vec<Stencil> = (0..dim).map(|ax| self.stencil(ax, x[ax])).collect::<Option<_>>()?;
        let a = self.spatial(&self.snapshots[k], &st)?;
        if theta == 0.0 || self.snapshots.len() == 1 {
            return Some(a);
        }
        let b = self.spatial(&self.snapshots[k + 1], &st)?;
        let mix = |u: f64, v: f64| (1.0 - theta) * u + theta * v;
        Some(FieldSample {
            w: [mix(a.w[0], b.w[0]), mix(a.w[1], b.w[1])],
            b: [mix(a.b[0], b.b[0]), mix(a.b[1], b.b[1]), mix(a.b[2], b.b[2]), mix(a.b[3], b.b[3])],
        })
    }
}

/// `W = ∇(−log f)` from snapshots, with the continuity residual
/// `∂ₜρ + ∇·(ρW)` (`ρ = f e^{−U}` times the radial Jacobian) per interval.
pub fn build_advection(fields: &[GridField], mass_density: &[f64], window: Window) -> Result<AdvectionField> {
    if fields.len() < 2 {
        return Err(Error::Precondition("need at least two snapshots".into()));
    }
    let grid = fields[0].grid.clone();
    if mass_density.len() != grid.len() {
        return Err(Error::InvalidArgument("density length does not match the grid".into()));
    }
    let snaps: Vec<AdvectionSnapshot> = fields.iter().map(|f| advection_snapshot(&grid, &window, &f.values, f.t)).collect();
    let mut field = AdvectionField::new(grid.clone(), window, snaps)?;
    field.continuity = fields
        .windows(2)
        .zip(field.snapshots.windows(2))
        .map(|(f, s)| continuity_residual(&grid, &window, mass_density, (&f[0], &f[1]), (&s[0], &s[1])))
        .collect();
    Ok(field)
}

fn continuity_residual(
    grid: &Grid,
    window: &Window,
    density: &[f64],
    f: (&GridField, &GridField),
    s: (&AdvectionSnapshot, &AdvectionSnapshot),
) -> f64 {
    let dim = grid.dim();
    let dt = f.1.t - f.0.t;
    let [s0, s1] = window.shape();
    let flux = |i: usize, j: usize, ax: usize| -> Option<f64> {
        let q = window.local(i, j);
        if !(s.0.core[q] && s.1.core[q]) {
            return None;
        }
        let p = grid.index(i, j);
        let rho0 = f.0.values[p] * density[p];
        let rho1 = f.1.values[p] * density[p];
        Some(0.5 * (rho0 * s.0.w[q * dim + ax] + rho1 * s.1.w[q * dim + ax]))
    };
    let mut worst: f64 = 0.0;
    for li in 0..s0 {
        for lj in 0..s1 {
            let i = window.lo[0] + li;
            let j = if dim == 2 { window.lo[1] + lj } else { 0 };
            let q = window.local(i, j);
            if !(s.0.core[q] && s.1.core[q]) {
                continue;
            }
            let p = grid.index(i, j);
            let mut r = (f.1.values[p] - f.0.values[p]) * density[p] / dt;
            let mut ok = true;
            for ax in 0..dim {
                let h = grid.axes()[ax].spacing();
                let side = |d: isize| -> Option<f64> {
                    let (a, c, mirrored) = neighbour(grid, ax, i, j, d)?;
                    let inside = (window.lo[0]..=window.hi[0]).contains(&a) && (dim == 1 || (window.lo[1]..=window.hi[1]).contains(&c));
                    if !inside {
                        return None;
                    }
                    let v = flux(a, c, ax)?;
                    Some(if mirrored { -v } else { v })
                };
                match (side(1), side(-1)) {
                    (Some(fp), Some(fm)) => r += (fp - fm) / (2.0 * h),
                    _ => ok = false,
                }
            }
            if ok {
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `S_t`, pushing `ν` onto `ν_t`.
    Forward,
    /// `T_t`, pulling `ν_t` back onto `ν`.
    Backward,
}

/// One stored time of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleFrame {
    pub t: f64,
    pub positions: Vec<f64>,
    pub jacobians: Vec<f64>,
}

/// Particles `x_j` with their Jacobians, advanced along an advection field.
#[derive(Debug, Clone)]
pub struct FlowEnsemble {
    pub direction: Direction,
    pub dim: usize,
    pub t: f64,
    pub seeds: Vec<f64>,
    pub positions: Vec<f64>,
    /// Row-major `dim×dim` per particle.
    pub jacobians: Vec<f64>,
    pub escaped: Vec<bool>,
    pub history: Vec<EnsembleFrame>,
    /// Radial dimension per axis (tangential stretch enters the certificates).
    radial: [usize; 2],
}

impl FlowEnsemble {
    pub fn new(direction: Direction, grid: &Grid, seeds: Vec<f64>, t: f64) -> Result<Self> {
        let dim = grid.dim();
        if seeds.len() % dim != 0 {
            return Err(Error::InvalidArgument("seed array length is not a multiple of the dimension".into()));
        }
        let n = seeds.len() / dim;
        let mut jac = vec![0.0; n * dim * dim];
        for p in 0..n {
            for d in 0..dim {
                jac[p * dim * dim + d * dim + d] = 1.0;
            }
        }
        let mut radial = [1; 2];
        for (ax, a) in grid.axes().iter().enumerate() {
            if let AxisKind::Radial { dim } = a.kind {
                radial[ax] = dim;
            }
        }
        let frame = EnsembleFrame { t, positions: seeds.clone(), jacobians: jac.clone() };
        Ok(Self {
            direction,
            dim,
            t,
            positions: seeds.clone(),
            seeds,
            jacobians: jac,
            escaped: vec![false; n],
            history: vec![frame],
            radial,
        })
    }

    pub fn len(&self) -> usize {
        self.escaped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.escaped.is_empty()
    }

    pub fn escaped_count(&self) -> usize {
        self.escaped.iter().filter(|e| **e).count()
    }

    pub fn position(&self, p: usize) -> &[f64] {
        &self.positions[p * self.dim..(p + 1) * self.dim]
    }

    /// Eigenvalues of `JᵀJ − I` (plus tangential stretches on radial axes) for particle `p`.
    fn stretch_eigenvalues(&self, p: usize) -> Vec<f64> {
        let d = self.dim;
        let j = &self.jacobians[p * d * d..(p + 1) * d * d];
        let mut out = if d == 1 {
            vec![j[0] * j[0] - 1.0]
        } else {
            let a = j[0] * j[0] + j[2] * j[2];
            let b = j[0] * j[1] + j[2] * j[3];
            let c = j[1] * j[1] + j[3] * j[3];
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            vec![mean - rad - 1.0, mean + rad - 1.0]
        };
        for ax in 0..d {
            let seed = self.seeds[p * d + ax];
            if self.radial[ax] >= 2 && seed > 0.0 {
                let ratio = self.positions[p * d + ax] / seed;
                out.push(ratio * ratio - 1.0);
            }
        }
        out
    }

    /// `min eig(JᵀJ − I)` over non-escaped particles (≥ −tol certifies local expansion).
    pub fn expansion_certificate(&self) -> f64 {
        (0..self.len())
            .filter(|p| !self.escaped[*p])
            .flat_map(|p| self.stretch_eigenvalues(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// `max eig(JᵀJ − I)` over non-escaped particles (≤ tol certifies contraction).
    pub fn contraction_certificate(&self) -> f64 {
        (0..self.len())
            .filter(|p| !self.escaped[*p])
            .flat_map(|p| self.stretch_eigenvalues(p))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV rows `seed,t,x[,y],J..` for every stored frame.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.dim;
        let coords = if d == 1 { "x" } else { "x,y" };
        let jac = if d == 1 { "j00" } else { "j00,j01,j10,j11" };
        writeln!(out, "seed,t,{coords},{jac}")?;
        for frame in &self.history {
            for p in 0..self.len() {
                write!(out, "{p},{:.10e}", frame.t)?;
                for v in &frame.positions[p * d..(p + 1) * d] {
                    write!(out, ",{v:.17e}")?;
                }
                for v in &frame.jacobians[p * d * d..(p + 1) * d * d] {
                    write!(out, ",{v:.17e}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn certificate(&self, tol: f64) -> FlowCertificate {
        let value = match self.direction {
            Direction::Forward => self.expansion_certificate(),
            Direction::Backward => self.contraction_certificate(),
        };
        let passed = match self.direction {
            Direction::Forward => value >= -tol,
            Direction::Backward => value <= tol,
        };
        FlowCertificate {
            direction: self.direction,
            t: self.t,
            particles: self.len(),
            escaped: self.escaped_count(),
            value,
            tolerance: tol,
            passed,
        }
    }
}

/// JSON-ready summary of an ensemble certificate.
#[derive(Debug, Clone, Serialize)]
pub struct FlowCertificate {
    pub direction: Direction,
    pub t: f64,
    pub particles: usize,
    pub escaped: usize,
    /// `min eig(JᵀJ − I)` forward, `max eig(JᵀJ − I)` backward.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type State = ([f64; 2], [f64; 4]);

fn rhs(field: &AdvectionField, t: f64, x: &[f64; 2], j: &[f64; 4], dim: usize) -> Option<State> {
    let s = field.sample(t, &x[..dim])?;
    let mut dj = [0.0; 4];
    if dim == 1 {
        dj[0] = s.b[0] * j[0];
    } else {
        for r in 0..2 {
            for c in 0..2 {
                dj[2 * r + c] = s.b[2 * r] * j[c] + s.b[2 * r + 1] * j[2 + c];
            }
        }
    }
    Some((s.w, dj))
}

fn rk4(field: &AdvectionField, t: f64, h: f64, x: [f64; 2], j: [f64; 4], dim: usize) -> Option<State> {
    let add = |x: &[f64; 2], j: &[f64; 4], k: &State, c: f64| -> State {
        ([x[0] + c * k.0[0], x[1] + c * k.0[1]], [j[0] + c * k.1[0], j[1] + c * k.1[1], j[2] + c * k.1[2], j[3] + c * k.1[3]])
    };
    let k1 = rhs(field, t, &x, &j, dim)?;
    let s2 = add(&x, &j, &k1, 0.5 * h);
    let k2 = rhs(field, t + 0.5 * h, &s2.0, &s2.1, dim)?;
    let s3 = add(&x, &j, &k2, 0.5 * h);
    let k3 = rhs(field, t + 0.5 * h, &s3.0, &s3.1, dim)?;
    let s4 = add(&x, &j, &k3, h);
    let k4 = rhs(field, t + h, &s4.0, &s4.1, dim)?;
    let mut xo = x;
    let mut jo = j;
    for d in 0..2 {
        xo[d] += h / 6.0 * (k1.0[d] + 2.0 * k2.0[d] + 2.0 * k3.0[d] + k4.0[d]);
    }
    for d in 0..4 {
        jo[d] += h / 6.0 * (k1.1[d] + 2.0 * k2.1[d] + 2.0 * k3.1[d] + k4.1[d]);
    }
    Some((xo, jo))
}

/// Advances every particle along `dx/dt = W_t(x)`, `dJ/dt = B_t J` from
/// `ensemble.t` to `t_end` with RK4 steps of size at most `dt` (time runs
/// backwards when `t_end < ensemble.t`). Particles leaving the window or
/// core are marked escaped and frozen.
pub fn integrate(field: &AdvectionField, ensemble: &mut FlowEnsemble, t_end: f64, dt: f64, record: bool) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let dim = ensemble.dim;
    if dim != field.grid.dim() {
        return Err(Error::InvalidArgument("ensemble and field dimensions differ".into()));
    }
    let span = t_end - ensemble.t;
    let steps = (span.abs() / dt).round().max(if span == 0.0 { 0.0 } else { 1.0 }) as usize;
    let t0 = ensemble.t;
    if steps > 0 {
        let h = span / steps as f64;
        let dd = dim * dim;
        let updated: Vec<Option<State>> = (0..ensemble.len())
            .into_par_iter()
            .map(|p| {
                if ensemble.escaped[p] {
                    return None;
                }
                let mut x = [0.0; 2];
                x[..dim].copy_from_slice(&ensemble.positions[p * dim..(p + 1) * dim]);
                let mut j = [0.0; 4];
                if dim == 1 {
                    j[0] = ensemble.jacobians[p];
                } else {
                    j.copy_from_slice(&ensemble.jacobians[p * 4..p * 4 + 4]);
                }
                for s in 0..steps {
                    let t = t0 + s as f64 * h;
                    let (xn, jn) = rk4(field, t, h, x, j, dim)?;
                    x = xn;
                    j = jn;
                }
                Some((x, j))
            })
            .collect();
        for (p, u) in updated.into_iter().enumerate() {
            match u {
                Some((x, j)) => {
                    ensemble.positions[p * dim..(p + 1) * dim].copy_from_slice(&x[..dim]);
                    ensemble.jacobians[p * dd..(p + 1) * dd].copy_from_slice(&j[..dd]);
                }
                None => ensemble.escaped[p] = true,
            }
        }
    }
    ensemble.t = t_end;
    if record {
        ensemble.history.push(EnsembleFrame { t: t_end, positions: ensemble.positions.clone(), jacobians: ensemble.jacobians.clone() });
    }
    Ok(())
}

/// `S_t` from `ensemble.t` up to `t_end`.
pub fn integrate_forward(field: &AdvectionField, ensemble: &mut FlowEnsemble, t_end: f64, dt: f64) -> Result<()> {
    if ensemble.direction != Direction::Forward || t_end < ensemble.t {
        return Err(Error::InvalidArgument("forward integration runs forward in time".into()));
    }
    integrate(field, ensemble, t_end, dt, true)
}

/// `T_t` from `ensemble.t` down to `t_end`.
pub fn integrate_backward(field: &AdvectionField, ensemble: &mut FlowEnsemble, t_end: f64, dt: f64) -> Result<()> {
    if ensemble.direction != Direction::Backward || t_end > ensemble.t {
        return Err(Error::InvalidArgument("backward integration runs backward in time".into()));
    }
    integrate(field, ensemble, t_end, dt, true)
}

/// Settings of the segmented limit-map driver.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitMapConfig {
    /// Semigroup time step.
    pub dt: f64,
    /// RK4 steps per semigroup step.
    #[serde(default = "one_usize")]
    pub rk_substeps: usize,
    /// Semigroup steps per checkpoint segment.
    #[serde(default = "default_segment")]
    pub segment_steps: usize,
    pub horizon: f64,
    #[serde(default = "default_stop_w")]
    pub stop_w: f64,
    #[serde(default = "default_stop_l2")]
    pub stop_l2: f64,
    /// Steps between stopping-rule evaluations.
    #[serde(default = "default_check")]
    pub check_every: usize,
    /// Stop at this time instead of applying the stopping rule.
    #[serde(default)]
    pub fixed_time: Option<f64>,
    /// Window half-widths per axis.
    pub window: Vec<f64>,
}

fn one_usize() -> usize {
    1
}

fn default_segment() -> usize {
    400
}

fn default_stop_w() -> f64 {
    1e-4
}

fn default_stop_l2() -> f64 {
    1e-6
}

fn default_check() -> usize {
    10
}

impl LimitMapConfig {
    pub fn new(dt: f64, horizon: f64, window: Vec<f64>) -> Self {
        Self {
            dt,
            rk_substeps: 1,
            segment_steps: default_segment(),
            horizon,
            stop_w: default_stop_w(),
            stop_l2: default_stop_l2(),
            check_every: default_check(),
            fixed_time: None,
            window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AdvectionSup,
    L2Distance,
    FixedTime,
    HorizonExhausted,
}

/// Stopping-rule quantities at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopSample {
    pub t: f64,
    /// `‖W_t‖∞` over the core of the whole grid.
    pub w_sup: f64,
    /// `L₂(μ)` distance of `f_t` to its mean.
    pub l2: f64,
}

/// Output of [`limit_map`].
#[derive(Debug, Clone)]
pub struct LimitMap {
    pub t_star: f64,
    pub reason: StopReason,
    pub partial: bool,
    pub final_stop: StopSample,
    pub stop_history: Vec<StopSample>,
    /// `T_{t*}` at the map seeds (backward ensemble, first `map_seeds` particles).
    pub backward: FlowEnsemble,
    pub map_seeds: usize,
    /// `S_{t*}` at the forward seeds.
    pub forward: FlowEnsemble,
    /// `|T(S(x)) − x|` per forward seed (`NaN` when escaped).
    pub round_trip: Vec<f64>,
    pub steps: usize,
}

impl LimitMap {
    /// `(seed, T(seed))` pairs, escaped seeds removed (1D: scalars).
    pub fn samples(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let d = self.backward.dim;
        (0..self.map_seeds)
            .filter(|p| !self.backward.escaped[*p])
            .map(|p| (self.backward.seeds[p * d..(p + 1) * d].to_vec(), self.backward.positions[p * d..(p + 1) * d].to_vec()))
            .collect()
    }

    pub fn escaped_map_seeds(&self) -> usize {
        self.backward.escaped[..self.map_seeds].iter().filter(|e| **e).count()
    }

    pub fn max_round_trip(&self) -> f64 {
        self.round_trip.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
    }
}

fn stop_sample(solver: &Solver, f: &[f64], t: f64, mean0: f64) -> StopSample {
    let grid = solver.generator().grid();
    let win = Window::full(grid);
    let snap = advection_snapshot(grid, &win, f, t);
    let w_sup = snap
        .core
        .iter()
        .enumerate()
        .filter(|(_, c)| **c)
        .map(|(q, _)| {
            let d = grid.dim();
            snap.w[q * d..(q + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    let l2 = ConvergenceDiagnostics::measure(solver.generator(), f, t, mean0).l2;
    StopSample { t, w_sup, l2 }
}

/// Runs the semigroup from `f0` until the stopping rule (or `fixed_time`),
/// integrating `S_t` at `forward_seeds` on the way, then replays the run
/// backwards to obtain `T_{t*}` at `map_seeds` and at `S_{t*}(forward_seeds)`.
pub fn limit_map(solver: &mut Solver, f0: &GridField, map_seeds: &[f64], forward_seeds: &[f64], cfg: &LimitMapConfig) -> Result<LimitMap> {
    let grid = solver.generator().grid().clone();
    let dim = grid.dim();
    if (solver.dt() - cfg.dt).abs() > 1e-15 * cfg.dt {
        return Err(Error::InvalidArgument("solver step differs from the configured dt".into()));
    }
    if cfg.segment_steps == 0 || cfg.check_every == 0 || cfg.rk_substeps == 0 {
        return Err(Error::InvalidArgument("segment, check and substep counts must be positive".into()));
    }
    if f0.values.iter().any(|v| *v < 0.0) {
        return Err(Error::Precondition("initial data must be nonnegative".into()));
    }
    let window = Window::around(&grid, &cfg.window)?;
    let dt = cfg.dt;
    let rk_dt = dt / cfg.rk_substeps as f64;
    let t0 = f0.t;
    let time = |k: usize| t0 + k as f64 * dt;
    let max_steps = (cfg.horizon / dt).round() as usize;
    let fixed_steps = cfg.fixed_time.map(|t| (t / dt).round() as usize);
    let scale = f0.max().max(1.0);

    solver.set_steps_taken(0);
    let mut f = f0.values.clone();
    let mean0 = solver.mean(&f);
    let mut checkpoints: Vec<(usize, Vec<f64>)> = vec![(0, f.clone())];
    let mut buffer = vec![advection_snapshot(&grid, &window, &f, time(0))];
    let mut forward = FlowEnsemble::new(Direction::Forward, &grid, forward_seeds.to_vec(), t0)?;
    let mut history = Vec::new();
    let mut k = 0;
    let mut last;
    let reason = loop {
        if let Some(n) = fixed_steps {
            if k >= n {
                last = stop_sample(solver, &f, time(k), mean0);
                history.push(last);
                break StopReason::FixedTime;
            }
        } else if k % cfg.check_every == 0 {
            last = stop_sample(solver, &f, time(k), mean0);
            history.push(last);
            if last.w_sup < cfg.stop_w {
                break StopReason::AdvectionSup;
            }
            if last.l2 < cfg.stop_l2 {
                break StopReason::L2Distance;
            }
        }
        if k >= max_steps {
            last = stop_sample(solver, &f, time(k), mean0);
            history.push(last);
            break StopReason::HorizonExhausted;
        }
        solver.advance(&mut f)?;
        k += 1;
        let min = f.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-12 * scale {
            return Err(Error::Numerical(format!("positivity violated at t = {:.4}: {min:.3e}", time(k))));
        }
        buffer.push(advection_snapshot(&grid, &window, &f, time(k)));
        if k % cfg.segment_steps == 0 {
            let field = AdvectionField::new(grid.clone(), window, std::mem::take(&mut buffer))?;
            integrate(&field, &mut forward, time(k), rk_dt, true)?;
            buffer = vec![field.snapshots.last().cloned().expect("segment has snapshots")];
            checkpoints.push((k, f.clone()));
        }
    };
    let k_star = k;
    if buffer.len() > 1 {
        let field = AdvectionField::new(grid.clone(), window, std::mem::take(&mut buffer))?;
        integrate(&field, &mut forward, time(k_star), rk_dt, true)?;
    }
    let mut bounds: Vec<usize> = checkpoints.iter().map(|c| c.0).collect();
    if *bounds.last().expect("checkpoint list is non-empty") != k_star {
        bounds.push(k_star);
    }

    // backward pass over the replayed segments
    let mut seeds = map_seeds.to_vec();
    seeds.extend_from_slice(&forward.positions);
    let n_map = map_seeds.len() / dim.max(1);
    let mut backward = FlowEnsemble::new(Direction::Backward, &grid, seeds, time(k_star))?;
    for (p, esc) in forward.escaped.iter().enumerate() {
        if *esc {
            backward.escaped[n_map + p] = true;
        }
    }
    for seg in (0..bounds.len().saturating_sub(1)).rev() {
        let (ka, kb) = (bounds[seg], bounds[seg + 1]);
        let mut g = checkpoints[seg].1.clone();
        solver.set_steps_taken(ka);
        let mut snaps = Vec::with_capacity(kb - ka + 1);
        snaps.push(advection_snapshot(&grid, &window, &g, time(ka)));
        for kk in ka + 1..=kb {
            solver.advance(&mut g)?;
            snaps.push(advection_snapshot(&grid, &window, &g, time(kk)));
        }
        let field = AdvectionField::new(grid.clone(), window, snaps)?;
        integrate(&field, &mut backward, time(ka), rk_dt, true)?;
    }
    solver.set_steps_taken(k_star);
    if bounds.len() == 1 {
        backward.history.push(EnsembleFrame { t: t0, positions: backward.positions.clone(), jacobians: backward.jacobians.clone() });
    }

    let round_trip = (0..forward.len())
        .map(|p| {
            let b = n_map + p;
            if backward.escaped[b] || forward.escaped[p] {
                return f64::NAN;
            }
            let x = &forward.seeds[p * dim..(p + 1) * dim];
            let y = &backward.positions[b * dim..(b + 1) * dim];
            x.iter().zip(y).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(LimitMap {
        t_star: time(k_star),
        reason,
        partial: reason == StopReason::HorizonExhausted,
        final_stop: last,
        stop_history: history,
        backward,
        map_seeds: n_map,
        forward,
        round_trip,
        steps: k_star,
    })
}

/// `sup |F_target(T(x)) − F_source(x)|` over map samples.
pub fn pushforward_residual_1d(samples: &[(f64, f64)], source: &Density1D, target: &Density1D) -> f64 {
    samples
        .iter()
        .map(|(x, t)| {
            let (fs, ss) = source.tail(*x);
            let (ft, st) = target.tail(*t);
            // compare on the side with more relative precision
            if fs <= 0.5 {
                (ft - fs).abs()
            } else {
                (st - ss).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Two-sample statistics comparing pushed samples with reference samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PushforwardStatistics {
    /// Largest Kolmogorov-Smirnov distance over the projection directions.
    pub ks_max: f64,
    /// Energy distance `2E|X−Y| − E|X−X′| − E|Y−Y′|`.
    pub energy: f64,
}

fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn mean_distance(a: &[f64], b: &[f64], dim: usize, same: bool) -> f64 {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..na {
        let start = if same { i + 1 } else { 0 };
        for j in start..nb {
            let d2: f64 = (0..dim).map(|k| (a[i * dim + k] - b[j * dim + k]).powi(2)).sum();
            sum += d2.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// KS on `directions` equally spaced projections plus the energy distance.
pub fn pushforward_statistics(pushed: &[f64], reference: &[f64], dim: usize, directions: usize) -> PushforwardStatistics {
    let mut ks_max: f64 = 0.0;
    for k in 0..directions.max(1) {
        let angle = std::f64::consts::PI * k as f64 / directions.max(1) as f64;
        let dir = if dim == 1 { vec![1.0] } else { vec![angle.cos(), angle.sin()] };
        let proj = |s: &[f64]| s.chunks(dim).map(|p| p.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
        ks_max = ks_max.max(ks_two_sample(proj(pushed), proj(reference)));
        if dim == 1 {
            break;
        }
    }
    let energy = 2.0 * mean_distance(pushed, reference, dim, false)
        - mean_distance(pushed, pushed, dim, true)
        - mean_distance(reference, reference, dim, true);
    PushforwardStatistics { ks_max, energy }
}

/// Minimum discrete-Hessian eigenvalue of `−log f_t` per snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct LogConcavityReport {
    pub series: Vec<HessianCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn logconcavity_monitor(snapshots: &[GridField], tolerance: f64) -> Result<LogConcavityReport> {
    let series: Vec<HessianCheck> = snapshots.iter().map(neg_log_hessian_min).collect();
    if series.iter().any(|s| s.core_nodes == 0) {
        return Err(Error::Precondition("a snapshot has an empty core".into()));
    }
    let passed = series.iter().all(|s| s.min_eigenvalue >= -tolerance);
    Ok(LogConcavityReport { series, tolerance, passed })
}

/// `max |T(x_a) − T(x_b)| / |x_a − x_b|` over `pairs` random index pairs.
pub fn pairwise_lipschitz(inputs: &[f64], outputs: &[f64], dim: usize, pairs: usize, seed: u64) -> f64 {
    let n = inputs.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let dist = |v: &[f64], a: usize, b: usize| (0..dim).map(|k| (v[a * dim + k] - v[b * dim + k]).powi(2)).sum::<f64>().sqrt();
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let dx = dist(inputs, a, b);
        if dx > 0.0 {
            worst = worst.max(dist(outputs, a, b) / dx);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{mehler_quadratic, GaussianPair};
    use crate::semigroup::{evolve, Axis, BoundaryCondition, Generator, GridPotential};

    fn ou_problem(h: f64, dt: f64, b: f64) -> (Solver, GridField) {
        let grid = Arc::new(Grid::line(Axis::full_with_spacing(8.0, h)).unwrap());
        let pot = GridPotential::new(|c| 0.5 * c[0] * c[0], |c| vec![c[0]]);
        let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
        let solver = Solver::new(gen, dt).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, move |c| (-0.5 * b * c[0] * c[0]).exp()).unwrap();
        (solver, f0)
    }

    #[test]
    fn zero_perturbation_gives_zero_field() {
        let (mut solver, f0) = ou_problem(0.02, 0.01, 0.0);
        let ev = evolve(&mut solver, &f0, 0.5, &[0.0, 0.1, 0.5]).unwrap();
        let density: Vec<f64> = (0..f0.grid.len()).map(|p| solver.generator().mass()[p] / f0.grid.cell_volume(p)).collect();
        let field = build_advection(&ev.snapshots, &density, Window::around(&f0.grid, &[3.0]).unwrap()).unwrap();
        let s = field.sample(0.3, &[1.2]).unwrap();
        assert!(s.w[0].abs() < 1e-12 && s.b[0].abs() < 1e-10);
        let mut ens = FlowEnsemble::new(Direction::Forward, &f0.grid, vec![-1.0, 0.0, 2.0], 0.0).unwrap();
        integrate_forward(&field, &mut ens, 0.5, 1e-3).unwrap();
        for (p, x) in ens.positions.iter().zip([-1.0, 0.0, 2.0]) {
            assert!((p - x).abs() < 1e-10);
        }
        assert!(ens.jacobians.iter().all(|j| (j - 1.0).abs() < 1e-9));
    }

    #[test]
    fn ou_field_matches_closed_form() {
        let (mut solver, f0) = ou_problem(0.01, 0.005, 1.0);
        let ev = evolve(&mut solver, &f0, 0.2, &[0.0, 0.1, 0.2]).unwrap();
        let density: Vec<f64> = (0..f0.grid.len()).map(|p| solver.generator().mass()[p] / f0.grid.cell_volume(p)).collect();
        let field = build_advection(&ev.snapshots, &density, Window::around(&f0.grid, &[3.0]).unwrap()).unwrap();
        let pair = GaussianPair::from_rows(1, &[1.0], &[1.0]).unwrap();
        let w0 = field.sample(0.0, &[1.0]).unwrap().w[0];
        assert!((w0 - 1.0).abs() < 1e-4, "{w0}");
        let m = mehler_quadratic(&pair, 0.1).unwrap()[(0, 0)];
        let s = field.sample(0.1, &[0.7]).unwrap();
        assert!((s.w[0] - 0.7 * m).abs() < 1e-4);
        assert!((s.b[0] - m).abs() < 1e-4);
        assert!(field.continuity.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn continuity_residual_refines() {
        let measure = |h: f64, dt: f64| {
            let (mut solver, f0) = ou_problem(h, dt, 1.0);
            let ev = evolve(&mut solver, &f0, 0.2, &[0.1, 0.1 + dt]).unwrap();
            let density: Vec<f64> = (0..f0.grid.len()).map(|p| solver.generator().mass()[p] / f0.grid.cell_volume(p)).collect();
            build_advection(&ev.snapshots, &density, Window::around(&f0.grid, &[3.0]).unwrap()).unwrap().continuity[0]
        };
        let coarse = measure(0.04, 0.004);
        let fine = measure(0.02, 0.002);
        assert!(fine < 0.6 * coarse, "{coarse} {fine}");
    }

    #[test]
    fn ou_flow_matches_matrix_flow() {
        let (mut solver, f0) = ou_problem(0.01, 1e-3, 1.0);
        let mut cfg = LimitMapConfig::new(1e-3, 1.0, vec![4.0]);
        cfg.fixed_time = Some(1.0);
        cfg.segment_steps = 250;
        let seeds: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
        let fwd: Vec<f64> = vec![-1.0, -0.3, 0.5, 1.0];
        let lm = limit_map(&mut solver, &f0, &seeds, &fwd, &cfg).unwrap();
        let pair = GaussianPair::from_rows(1, &[1.0], &[1.0]).unwrap();
        let flow = crate::gaussian::integrate_matrix_flow(&pair, 1e-3, 1e-8, 1).unwrap();
        let l1 = flow.states[1000].l[(0, 0)];
        for p in 0..fwd.len() {
            let ratio = lm.forward.positions[p] / fwd[p];
            assert!((ratio - l1).abs() < 1e-4, "{ratio} vs {l1}");
        }
        for (x, t) in lm.samples() {
            assert!((t[0] - x[0] / l1).abs() < 1e-4 * (1.0 + x[0].abs()));
        }
        assert!(lm.max_round_trip() < 1e-6, "{}", lm.max_round_trip());
        assert!(lm.forward.certificate(1e-6).passed);
        assert!(lm.backward.certificate(1e-6).passed);
        assert!(pairwise_lipschitz(&seeds, &lm.backward.positions[..seeds.len()], 1, 200, 1) <= 1.0);
    }

    #[test]
    fn identity_when_v_vanishes() {
        let (mut solver, f0) = ou_problem(0.02, 0.01, 0.0);
        let cfg = LimitMapConfig::new(0.01, 5.0, vec![3.0]);
        let seeds = vec![-1.0, 0.5, 2.0];
        let lm = limit_map(&mut solver, &f0, &seeds, &[], &cfg).unwrap();
        assert_eq!(lm.t_star, 0.0);
        assert_eq!(lm.reason, StopReason::AdvectionSup);
        assert_eq!(&lm.backward.positions[..3], &seeds[..]);
    }

    #[test]
    fn statistics_detect_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let same = pushforward_statistics(&a, &b, 1, 1);
        let shifted: Vec<f64> = b.iter().map(|v| v + 0.5).collect();
        let diff = pushforward_statistics(&a, &shifted, 1, 1);
        assert!(same.ks_max < 0.08 && diff.ks_max > 0.15);
        assert!(diff.energy > same.energy);
    }

    #[test]
    fn pushforward_residual_detects_offset() {
        let d = Density1D::on_line(|x| -0.5 * x * x).unwrap();
        let xs: Vec<(f64, f64)> = (0..61).map(|i| -3.0 + 0.1 * i as f64).map(|x| (x, x)).collect();
        assert!(pushforward_residual_1d(&xs, &d, &d) < 1e-12);
        let shifted: Vec<(f64, f64)> = xs.iter().map(|(x, t)| (*x, t + 0.1)).collect();
        assert!(pushforward_residual_1d(&shifted, &d, &d) > 0.01);
    }

    #[test]
    fn trajectory_csv() {
        let grid = Grid::line(Axis::full(4.0, 41)).unwrap();
        let ens = FlowEnsemble::new(Direction::Forward, &grid, vec![0.1, 0.2], 0.0).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("seed,t,x,j00\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
