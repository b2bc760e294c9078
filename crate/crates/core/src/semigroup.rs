//! Discretization of the diffusion semigroup `P_t = exp(tL)` with
//! `L = Δ − ⟨∇U, ∇⟩ = e^{U} ∇·(e^{−U} ∇)`.
//!
//! The generator is assembled in flux form: every face carries a conductance
//! built from the density `e^{−U}` (times the radial Jacobian `r^{d−1}` on
//! radial axes), so that `Σₚ mₚ (Lf)ₚ = 0` holds exactly under reflecting
//! boundary conditions. Time stepping is Crank-Nicolson in 1D and
//! Peaceman-Rachford alternating directions in 2D; the first step is replaced
//! by two implicit half steps to damp rough initial data.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adaptive_simpson, gauss_legendre_composite, TridiagonalLu};
use crate::potentials::{RadialProfile, StructuredPotential, SubspaceDecomposition, SymmetricConvexPotential};

/// Storage floor for field values.
pub const VALUE_FLOOR: f64 = 1e-300;
/// Relative level defining the evaluation core `{f ≥ CORE_LEVEL · max f}`.
pub const CORE_LEVEL: f64 = 1e-9;
/// Maximum admissible μ-mass outside the computational box.
pub const TAIL_MASS_LIMIT: f64 = 1e-10;
/// Smallest admissible node count per axis.
pub const MIN_NODES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxisKind {
    /// Vertex-centred nodes on `[−R, R]`.
    Full,
    /// Cell-centred nodes `rᵢ = (i + ½)h` on `[0, R]` for a radial block of dimension `dim`.
    Radial { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub kind: AxisKind,
    pub extent: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn full(extent: f64, nodes: usize) -> Self {
        Self { kind: AxisKind::Full, extent, nodes }
    }

    pub fn radial(dim: usize, extent: f64, nodes: usize) -> Self {
        Self { kind: AxisKind::Radial { dim }, extent, nodes }
    }

    /// Full axis with spacing as close as possible to `h`.
    pub fn full_with_spacing(extent: f64, h: f64) -> Self {
        let nodes = (2.0 * extent / h).round() as usize + 1;
        Self::full(extent, nodes)
    }

    pub fn spacing(&self) -> f64 {
        match self.kind {
            AxisKind::Full => 2.0 * self.extent / (self.nodes - 1) as f64,
            AxisKind::Radial { .. } => self.extent / self.nodes as f64,
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        let h = self.spacing();
        match self.kind {
            AxisKind::Full => -self.extent + i as f64 * h,
            AxisKind::Radial { .. } => (i as f64 + 0.5) * h,
        }
    }

    /// Position of the face between nodes `i` and `i + 1`.
    pub fn face(&self, i: usize) -> f64 {
        0.5 * (self.coord(i) + self.coord(i + 1))
    }

    /// Control-volume width of node `i`.
    pub fn width(&self, i: usize) -> f64 {
        let h = self.spacing();
        match self.kind {
            AxisKind::Full if i == 0 || i + 1 == self.nodes => 0.5 * h,
            _ => h,
        }
    }

    /// Radial Jacobian `r^{d−1}` (1 on full axes).
    pub fn jacobian(&self, coord: f64) -> f64 {
        match self.kind {
            AxisKind::Full => 1.0,
            AxisKind::Radial { dim } => coord.abs().powi(dim as i32 - 1),
        }
    }

    pub fn log_jacobian(&self, coord: f64) -> f64 {
        match self.kind {
            AxisKind::Full => 0.0,
            AxisKind::Radial { dim } => (dim as f64 - 1.0) * coord.abs().ln(),
        }
    }

    /// Node index on the outer boundary(ies) for Dirichlet conditions.
    fn is_boundary(&self, i: usize) -> bool {
        match self.kind {
            AxisKind::Full => i == 0 || i + 1 == self.nodes,
            AxisKind::Radial { .. } => i + 1 == self.nodes,
        }
    }
}

/// Rectangular grid with one or two axes; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidArgument(format!("grids have 1 or 2 axes, got {}", axes.len())));
        }
        for a in &axes {
            if a.nodes < MIN_NODES {
                return Err(Error::InvalidArgument(format!("axis has {} nodes, need at least {MIN_NODES}", a.nodes)));
            }
            if !(a.extent > 0.0) || !a.extent.is_finite() {
                return Err(Error::InvalidArgument(format!("axis extent must be positive, got {}", a.extent)));
            }
            if let AxisKind::Radial { dim } = a.kind {
                if dim == 0 {
                    return Err(Error::InvalidArgument("radial axis of dimension 0".into()));
                }
            }
        }
        Ok(Self { axes })
    }

    pub fn line(axis: Axis) -> Result<Self> {
        Self::new(vec![axis])
    }

    pub fn plane(a: Axis, b: Axis) -> Result<Self> {
        Self::new(vec![a, b])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn shape(&self) -> (usize, usize) {
        match self.axes.len() {
            1 => (self.axes[0].nodes, 1),
            _ => (self.axes[0].nodes, self.axes[1].nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.shape().1 + j
    }

    pub fn unindex(&self, p: usize) -> (usize, usize) {
        let n1 = self.shape().1;
        (p / n1, p % n1)
    }

    /// Grid coordinates of node `p` (length = number of axes).
    pub fn coords(&self, p: usize) -> Vec<f64> {
        let (i, j) = self.unindex(p);
        match self.axes.len() {
            1 => vec![self.axes[0].coord(i)],
            _ => vec![self.axes[0].coord(i), self.axes[1].coord(j)],
        }
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::spacing).collect()
    }

    /// Finest spacing over all axes.
    pub fn h(&self) -> f64 {
        self.spacing().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self, p: usize) -> f64 {
        let (i, j) = self.unindex(p);
        match self.axes.len() {
            1 => self.axes[0].width(i),
            _ => self.axes[0].width(i) * self.axes[1].width(j),
        }
    }

    pub fn is_boundary(&self, p: usize) -> bool {
        let (i, j) = self.unindex(p);
        self.axes[0].is_boundary(i) || (self.axes.len() == 2 && self.axes[1].is_boundary(j))
    }

    /// μ-mass outside the box relative to the total, by quadrature on an enlarged box.
    pub fn tail_mass(&self, potential: &GridPotential) -> f64 {
        let dens = |c: &[f64]| -> f64 {
            let jac: f64 = self.axes.iter().zip(c).map(|(a, x)| a.jacobian(*x)).product();
            (-(potential.value(c) - potential.reference)).exp() * jac
        };
        let far: Vec<(f64, f64)> = self.axes.iter().map(|a| far_interval(a, 4.0)).collect();
        let inside: Vec<(f64, f64)> = self
            .axes
            .iter()
            .map(|a| match a.kind {
                AxisKind::Full => (-a.extent, a.extent),
                AxisKind::Radial { .. } => (0.0, a.extent),
            })
            .collect();
        if self.axes.len() == 1 {
            let f = |x: f64| dens(&[x]);
            let (flo, fhi) = far[0];
            let (lo, hi) = inside[0];
            let scale = adaptive_simpson(&f, lo, hi, 1e-300, 1e-13);
            let tol = 1e-16 * scale;
            let mut tail = adaptive_simpson(&f, hi, fhi, tol, 1e-10);
            if lo > flo {
                tail += adaptive_simpson(&f, flo, lo, tol, 1e-10);
            }
            return tail / (scale + tail);
        }
        let integrate = |box_: &[(f64, f64)]| -> f64 {
            let (a0, b0) = box_[0];
            let (a1, b1) = box_[1];
            let outer = |x: f64| gauss_legendre_composite(&|y: f64| dens(&[x, y]), a1, b1, 64, 8);
            gauss_legendre_composite(&outer, a0, b0, 64, 8)
        };
        let total = integrate(&far);
        let box_mass = integrate(&inside);
        ((total - box_mass) / total).max(0.0)
    }
}

fn far_interval(a: &Axis, factor: f64) -> (f64, f64) {
    match a.kind {
        AxisKind::Full => (-factor * a.extent, factor * a.extent),
        AxisKind::Radial { .. } => (0.0, factor * a.extent),
    }
}

/// What a grid axis represents in the ambient space `ℝⁿ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum AxisRole {
    /// Ambient coordinate `j`.
    Coordinate { index: usize },
    /// Norm of radial block `i` (0-based over `E₁…E_k`).
    Block { index: usize },
}

/// Maps grid coordinates to ambient points for potentials defined on `ℝⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    decomposition: SubspaceDecomposition,
    roles: Vec<AxisRole>,
}

impl Embedding {
    pub fn new(decomposition: SubspaceDecomposition, roles: Vec<AxisRole>, grid: &Grid) -> Result<Self> {
        if roles.len() != grid.dim() {
            return Err(Error::InvalidArgument("one axis role per grid axis required".into()));
        }
        let mut covered = vec![false; decomposition.dim()];
        for (role, axis) in roles.iter().zip(grid.axes()) {
            match (*role, axis.kind) {
                (AxisRole::Coordinate { index }, AxisKind::Full) => {
                    if index >= covered.len() {
                        return Err(Error::InvalidArgument(format!("coordinate {index} out of range")));
                    }
                    covered[index] = true;
                }
                (AxisRole::Block { index }, AxisKind::Radial { dim }) => {
                    if index >= decomposition.num_blocks() || decomposition.block_dims()[index] != dim {
                        return Err(Error::InvalidArgument(format!("radial axis does not match block {index}")));
                    }
                    for j in decomposition.block_range(index) {
                        covered[j] = true;
                    }
                }
                _ => return Err(Error::InvalidArgument("axis kind does not match its role".into())),
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::InvalidArgument("grid axes do not cover every ambient coordinate".into()));
        }
        // a 1-dimensional full-axis coordinate inside a radial block is allowed
        // only when the block itself is one dimensional
        for role in &roles {
            if let AxisRole::Coordinate { index } = role {
                for b in 0..decomposition.num_blocks() {
                    if decomposition.block_range(b).contains(index) && decomposition.block_dims()[b] != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "coordinate {index} lies in a block of dimension > 1; use a radial axis"
                        )));
                    }
                }
            }
        }
        Ok(Self { decomposition, roles })
    }

    /// Identity embedding for `ℝ` or `ℝ²` on full axes.
    pub fn cartesian(decomposition: SubspaceDecomposition, grid: &Grid) -> Result<Self> {
        let roles = (0..grid.dim()).map(|index| AxisRole::Coordinate { index }).collect();
        Self::new(decomposition, roles, grid)
    }

    pub fn roles(&self) -> &[AxisRole] {
        &self.roles
    }

    pub fn decomposition(&self) -> &SubspaceDecomposition {
        &self.decomposition
    }

    pub fn embed(&self, coords: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.decomposition.dim()];
        for (role, c) in self.roles.iter().zip(coords) {
            match *role {
                AxisRole::Coordinate { index } => x[index] = *c,
                AxisRole::Block { index } => x[self.decomposition.block_range(index).start] = *c,
            }
        }
        x
    }
}

type CoordFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type CoordVecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The potential `U` expressed in grid coordinates (radial Jacobians excluded).
#[derive(Clone)]
pub struct GridPotential {
    value: CoordFn,
    gradient: CoordVecFn,
    reference: f64,
}

impl std::fmt::Debug for GridPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridPotential").field("reference", &self.reference).finish()
    }
}

impl GridPotential {
    pub fn new(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { value: Arc::new(value), gradient: Arc::new(gradient), reference: 0.0 }
    }

    /// `U ∘ embed` for a structured potential.
    pub fn from_structured(u: &StructuredPotential, embedding: &Embedding) -> Result<Self> {
        if u.decomposition() != embedding.decomposition() {
            return Err(Error::InvalidArgument("potential and embedding disagree on the decomposition".into()));
        }
        if !u.is_smooth() {
            return Err(Error::Precondition("non-smooth profiles are excluded from grid solvers".into()));
        }
        let (uv, ug) = (u.clone(), u.clone());
        let (ev, eg) = (embedding.clone(), embedding.clone());
        Ok(Self::new(
            move |c| uv.value(&ev.embed(c)).unwrap_or(f64::INFINITY),
            move |c| {
                let x = eg.embed(c);
                let g = ug.gradient(&x).unwrap_or_else(|_| nalgebra::DVector::from_element(x.len(), f64::NAN));
                eg.roles
                    .iter()
                    .map(|role| match *role {
                        AxisRole::Coordinate { index } => g[index],
                        AxisRole::Block { index } => g[eg.decomposition.block_range(index).start],
                    })
                    .collect()
            },
        ))
    }

    /// Shifts by a constant so that `e^{−U}` stays representable on the grid.
    fn normalized_on(mut self, grid: &Grid) -> Self {
        let min = (0..grid.len()).map(|p| self.value(&grid.coords(p))).fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            self.reference = min;
        }
        self
    }

    pub fn value(&self, c: &[f64]) -> f64 {
        (self.value)(c)
    }

    pub fn gradient(&self, c: &[f64]) -> Vec<f64> {
        (self.gradient)(c)
    }
}

/// Effective one-dimensional drift of the radial heat operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialDrift {
    pub profile: RadialProfile,
    pub ambient_dim: usize,
}

impl RadialDrift {
    /// `ρ′(r) − (n−1)/r`.
    pub fn drift(&self, r: f64) -> f64 {
        self.profile.d1(r) - (self.ambient_dim as f64 - 1.0) / r
    }

    /// `ρ₁(r) = ρ(r) − (n−1) log r`.
    pub fn effective_potential(&self, r: f64) -> f64 {
        self.profile.value(r) - (self.ambient_dim as f64 - 1.0) * r.ln()
    }

    /// `[ρ₁, ρ₁′, ρ₁″, ρ₁‴]`.
    pub fn effective_derivatives(&self, r: f64) -> [f64; 4] {
        let m = self.ambient_dim as f64 - 1.0;
        let [v, d1, d2, d3] = self.profile.derivatives(r);
        [v - m * r.ln(), d1 - m / r, d2 + m / (r * r), d3 - 2.0 * m / (r * r * r)]
    }

    /// Radial axis on `[0, R]` with `r_min = h/2`.
    pub fn axis(&self, extent: f64, nodes: usize) -> Axis {
        Axis::radial(self.ambient_dim, extent, nodes)
    }

    /// The profile as a grid potential for a radial axis; the Jacobian is
    /// supplied by the axis itself.
    pub fn grid_potential(&self) -> GridPotential {
        let (pv, pg) = (self.profile, self.profile);
        GridPotential::new(move |c| pv.value(c[0]), move |c| vec![pg.d1(c[0])])
    }
}

/// Reduces `U(x) = ρ(|x|)` on `ℝⁿ` to a drift on the half line.
pub fn radial_reduce(profile: RadialProfile, ambient_dim: usize) -> Result<RadialDrift> {
    if ambient_dim < 1 {
        return Err(Error::InvalidArgument("ambient dimension must be at least 1".into()));
    }
    if !profile.is_smooth() {
        return Err(Error::Precondition("radial reduction needs a smooth profile".into()));
    }
    Ok(RadialDrift { profile, ambient_dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Reflecting,
    DirichletCutoff,
}

/// Nonnegative scalar samples on a grid at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub t: f64,
    pub bc: BoundaryCondition,
    pub floor: f64,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, t: f64, bc: BoundaryCondition) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument("field length does not match the grid".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("field values must be finite and nonnegative".into()));
        }
        let mut f = Self { grid, values, t, bc, floor: VALUE_FLOOR };
        if bc == BoundaryCondition::DirichletCutoff {
            for p in 0..f.values.len() {
                if f.grid.is_boundary(p) {
                    f.values[p] = 0.0;
                }
            }
        }
        Ok(f)
    }

    pub fn from_fn(grid: Arc<Grid>, bc: BoundaryCondition, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|p| f(&grid.coords(p))).collect();
        Self::new(grid, values, 0.0, bc)
    }

    /// `e^{−V ∘ embed}` on the grid.
    pub fn exp_neg(grid: Arc<Grid>, bc: BoundaryCondition, v: &SymmetricConvexPotential, embedding: &Embedding) -> Result<Self> {
        Self::from_fn(grid, bc, |c| (-v.value(&embedding.embed(c))).exp())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn core_mask(&self) -> Vec<bool> {
        let level = CORE_LEVEL * self.max();
        self.values.iter().map(|v| *v >= level && *v > self.floor).collect()
    }

    /// CSV dump: one row per node with axis coordinates, value and time.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let names = ["x", "y"];
        let header: Vec<&str> = names[..self.grid.dim()].to_vec();
        writeln!(out, "{},value,t", header.join(","))?;
        for (p, v) in self.values.iter().enumerate() {
            let c = self.grid.coords(p);
            let coords: Vec<String> = c.iter().map(|x| format!("{x:.12e}")).collect();
            writeln!(out, "{},{v:.17e},{:.12e}", coords.join(","), self.t)?;
        }
        Ok(())
    }
}

/// Flux-form discretization of `L` on a grid.
#[derive(Debug, Clone)]
pub struct Generator {
    grid: Arc<Grid>,
    bc: BoundaryCondition,
    mass: Vec<f64>,
    /// Conductances per axis; face `(p, p + stride)` stored at `p`.
    conductance: Vec<Vec<f64>>,
    peclet_faces: usize,
}

impl Generator {
    /// Assembles the operator. Faces whose cell Péclet number `|ΔU|/2`
    /// exceeds 1 switch from midpoint weights to exponential fitting.
    pub fn build(grid: Arc<Grid>, potential: &GridPotential, bc: BoundaryCondition) -> Result<Self> {
        let potential = potential.clone().normalized_on(&grid);
        let n = grid.len();
        let axes = grid.axes().to_vec();
        let eff = |c: &[f64]| -> f64 {
            potential.value(c) - potential.reference - axes.iter().zip(c).map(|(a, x)| a.log_jacobian(*x)).sum::<f64>()
        };
        let node_eff: Vec<f64> = (0..n).map(|p| eff(&grid.coords(p))).collect();
        if node_eff.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("potential is not finite on the grid".into()));
        }
        let mass: Vec<f64> = (0..n).map(|p| (-node_eff[p]).exp() * grid.cell_volume(p)).collect();
        if mass.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Numerical("μ-density underflows on the grid; shrink the box".into()));
        }
        let (n0, n1) = grid.shape();
        let mut conductance = Vec::with_capacity(axes.len());
        let mut peclet_faces = 0;
        for (ax, axis) in axes.iter().enumerate() {
            let h = axis.spacing();
            let mut cond = vec![0.0; n];
            for p in 0..n {
                let (i, j) = grid.unindex(p);
                let (idx, last) = if ax == 0 { (i, n0) } else { (j, n1) };
                if idx + 1 >= last {
                    continue;
                }
                let q = if ax == 0 { grid.index(i + 1, j) } else { grid.index(i, j + 1) };
                let mut face = grid.coords(p);
                face[ax] = axis.face(idx);
                let transverse = if axes.len() == 1 {
                    1.0
                } else if ax == 0 {
                    axes[1].width(j)
                } else {
                    axes[0].width(i)
                };
                let (up, uq) = (node_eff[p], node_eff[q]);
                let du = uq - up;
                let weight = if 0.5 * du.abs() > 1.0 {
                    peclet_faces += 1;
                    (-up).exp() * bernoulli(du)
                } else {
                    (-eff(&face)).exp()
                };
                cond[p] = weight * transverse / h;
            }
            conductance.push(cond);
        }
        Ok(Self { grid, bc, mass, conductance, peclet_faces })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    /// Node masses of the discrete invariant measure (unnormalized).
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Faces that used exponential fitting (a Péclet warning when nonzero).
    pub fn peclet_faces(&self) -> usize {
        self.peclet_faces
    }

    fn stride(&self, ax: usize) -> usize {
        if ax == 0 {
            self.grid.shape().1
        } else {
            1
        }
    }

    /// `K f` along one axis, where `Lf = M⁻¹ K f`.
    fn apply_axis(&self, ax: usize, f: &[f64], out: &mut [f64]) {
        let stride = self.stride(ax);
        let cond = &self.conductance[ax];
        for p in 0..f.len() {
            let c = cond[p];
            if c != 0.0 {
                let q = p + stride;
                let flux = c * (f[q] - f[p]);
                out[p] += flux;
                out[q] -= flux;
            }
        }
    }

    /// `(Lf)ₚ` at every node (boundary rows included, reflecting form).
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        for ax in 0..self.grid.dim() {
            self.apply_axis(ax, f, &mut out);
        }
        out.iter_mut().zip(&self.mass).for_each(|(o, m)| *o /= m);
        out
    }

    /// Column sums of `M·L` (zero for the flux form).
    pub fn adjoint_column_sums(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut sums = vec![0.0; n];
        let mut e = vec![0.0; n];
        for p in 0..n {
            e[p] = 1.0;
            let mut out = vec![0.0; n];
            for ax in 0..self.grid.dim() {
                self.apply_axis(ax, &e, &mut out);
            }
            sums[p] = out.iter().sum();
            e[p] = 0.0;
        }
        sums
    }

    /// Largest `dt` for which Crank-Nicolson keeps nonnegative data nonnegative.
    pub fn positivity_dt_threshold(&self) -> f64 {
        let n = self.grid.len();
        let mut diag = vec![0.0; n];
        for ax in 0..self.grid.dim() {
            let stride = self.stride(ax);
            for p in 0..n {
                let c = self.conductance[ax][p];
                if c != 0.0 {
                    diag[p] += c;
                    diag[p + stride] += c;
                }
            }
        }
        diag.iter().zip(&self.mass).map(|(d, m)| 2.0 * m / d).fold(f64::INFINITY, f64::min)
    }

    /// Tridiagonal factors of `M − θ K_axis` along every grid line of one axis.
    fn line_factors(&self, ax: usize, theta: f64) -> Result<Vec<TridiagonalLu>> {
        let (n0, n1) = self.grid.shape();
        let (lines, len) = if ax == 0 { (n1, n0) } else { (n0, n1) };
        let stride = self.stride(ax);
        let dirichlet = self.bc == BoundaryCondition::DirichletCutoff;
        let mut out = Vec::with_capacity(lines);
        for line in 0..lines {
            let node = |k: usize| if ax == 0 { self.grid.index(k, line) } else { self.grid.index(line, k) };
            let mut lower = vec![0.0; len - 1];
            let mut upper = vec![0.0; len - 1];
            let mut diag = vec![0.0; len];
            for k in 0..len {
                let p = node(k);
                if dirichlet && self.grid.is_boundary(p) {
                    diag[k] = 1.0;
                    continue;
                }
                diag[k] = self.mass[p];
                if k + 1 < len {
                    let c = self.conductance[ax][p];
                    diag[k] += theta * c;
                    upper[k] = -theta * c;
                }
                if k > 0 {
                    let c = self.conductance[ax][p - stride];
                    diag[k] += theta * c;
                    lower[k - 1] = -theta * c;
                }
            }
            out.push(TridiagonalLu::factor(&lower, &diag, &upper)?);
        }
        Ok(out)
    }
}

fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// `χ(s)`: 1 on `[0, ½]`, `exp(1 − 1/(1 − (2s−1)²))` on `(½, 1)`, 0 from 1 on.
pub fn cutoff(s: f64) -> f64 {
    let s = s.abs();
    if s <= 0.5 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let u = 2.0 * s - 1.0;
        (1.0 - 1.0 / (1.0 - u * u)).exp()
    }
}

/// Multiplies a field by `χ(|x|/R)`.
pub fn apply_cutoff(field: &GridField, radius: f64) -> Result<GridField> {
    let reach = field
        .grid
        .axes()
        .iter()
        .map(|a| a.extent)
        .fold(f64::INFINITY, f64::min);
    if !(radius > 0.0) || radius > reach * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("cutoff radius {radius} outside the grid (reach {reach})")));
    }
    let mut out = field.clone();
    for (p, v) in out.values.iter_mut().enumerate() {
        let r = field.grid.coords(p).iter().map(|c| c * c).sum::<f64>().sqrt();
        *v *= cutoff(r / radius);
    }
    Ok(out)
}

/// Time stepper for `∂ₜf = Lf` with a fixed step.
#[derive(Debug, Clone)]
pub struct Solver {
    generator: Generator,
    dt: f64,
    factors: Vec<Vec<TridiagonalLu>>,
    startup_steps: usize,
    steps_taken: usize,
    scratch: Vec<f64>,
}

impl Solver {
    pub fn new(generator: Generator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let factors = (0..generator.grid.dim())
            .map(|ax| generator.line_factors(ax, 0.5 * dt))
            .collect::<Result<Vec<_>>>()?;
        let n = generator.grid.len();
        Ok(Self { generator, dt, factors, startup_steps: 1, steps_taken: 0, scratch: vec![0.0; n] })
    }

    /// Number of initial steps done as two implicit half steps (default 1).
    pub fn with_startup_steps(mut self, steps: usize) -> Self {
        self.startup_steps = steps;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Resets the step counter, e.g. before replaying from a checkpoint.
    pub fn set_steps_taken(&mut self, steps: usize) {
        self.steps_taken = steps;
    }

    fn is_dirichlet_node(&self, p: usize) -> bool {
        self.generator.bc == BoundaryCondition::DirichletCutoff && self.generator.grid.is_boundary(p)
    }

    /// `rhs = (M + θ K_axis) f` with Dirichlet rows zeroed.
    fn explicit_part(&self, ax: usize, theta: f64, f: &[f64], rhs: &mut [f64]) {
        for (r, (m, v)) in rhs.iter_mut().zip(self.generator.mass.iter().zip(f)) {
            *r = m * v;
        }
        if theta != 0.0 {
            let stride = self.generator.stride(ax);
            let cond = &self.generator.conductance[ax];
            for p in 0..f.len() {
                let c = cond[p];
                if c != 0.0 {
                    let q = p + stride;
                    let flux = theta * c * (f[q] - f[p]);
                    rhs[p] += flux;
                    rhs[q] -= flux;
                }
            }
        }
        for (p, r) in rhs.iter_mut().enumerate() {
            if self.is_dirichlet_node(p) {
                *r = 0.0;
            }
        }
    }

    fn implicit_sweep(&self, ax: usize, data: &mut [f64]) {
        let (n0, n1) = self.generator.grid.shape();
        if ax == 0 {
            for (line, lu) in self.factors[0].iter().enumerate() {
                lu.solve_strided(data, line, n1);
            }
        } else {
            for (line, lu) in self.factors[1].iter().enumerate() {
                lu.solve_in_place(&mut data[line * n1..(line + 1) * n1]);
            }
            let _ = n0;
        }
    }

    /// Advances `f` by one step in place.
    pub fn advance(&mut self, f: &mut [f64]) -> Result<()> {
        let theta = 0.5 * self.dt;
        let dim = self.generator.grid.dim();
        let mut rhs = std::mem::take(&mut self.scratch);
        if self.steps_taken < self.startup_steps {
            // two implicit half steps (split along axes in 2D)
            for _ in 0..2 {
                for ax in 0..dim {
                    self.explicit_part(ax, 0.0, f, &mut rhs);
                    self.implicit_sweep(ax, &mut rhs);
                    f.copy_from_slice(&rhs);
                }
            }
        } else if dim == 1 {
            self.explicit_part(0, theta, f, &mut rhs);
            self.implicit_sweep(0, &mut rhs);
            f.copy_from_slice(&rhs);
        } else {
            self.explicit_part(1, theta, f, &mut rhs);
            self.implicit_sweep(0, &mut rhs);
            f.copy_from_slice(&rhs);
            self.explicit_part(0, theta, f, &mut rhs);
            self.implicit_sweep(1, &mut rhs);
            f.copy_from_slice(&rhs);
        }
        self.scratch = rhs;
        self.steps_taken += 1;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value after time step".into()));
        }
        Ok(())
    }

    /// One step on a field; positivity loss beyond `−1e−12` is an error.
    pub fn step(&mut self, field: &GridField) -> Result<GridField> {
        if !Arc::ptr_eq(&field.grid, &self.generator.grid) && *field.grid != *self.generator.grid {
            return Err(Error::InvalidArgument("field and solver live on different grids".into()));
        }
        let mut values = field.values.clone();
        self.advance(&mut values)?;
        let scale = field.max().max(1.0);
        check_positivity(&values, scale)?;
        Ok(self.snapshot(values, field.t + self.dt, field.floor))
    }

    /// Wraps raw solver state as a field (tiny negative round-off clipped to the floor).
    pub fn snapshot(&self, mut values: Vec<f64>, t: f64, floor: f64) -> GridField {
        for v in values.iter_mut() {
            if *v < floor {
                *v = if *v < 0.0 { 0.0 } else { *v };
            }
        }
        GridField { grid: self.generator.grid.clone(), values, t, bc: self.generator.bc, floor }
    }

    /// `∫f dμ` with μ normalized on the grid.
    pub fn mean(&self, f: &[f64]) -> f64 {
        weighted_mean(&self.generator.mass, f)
    }
}

/// `(∫|x| dμ)^{−2}` on the grid, the scale a spectral-gap estimate is read against.
pub fn moment_scale(generator: &Generator) -> f64 {
    let grid = &generator.grid;
    let first: Vec<f64> = (0..grid.len()).map(|p| grid.coords(p).iter().map(|c| c * c).sum::<f64>().sqrt()).collect();
    let m = weighted_mean(&generator.mass, &first);
    1.0 / (m * m)
}

/// Least-squares `λ` in `‖f_t − mean‖₂ ≈ C e^{−λt}` over the recorded positive times.
pub fn fitted_decay_rate(diagnostics: &[ConvergenceDiagnostics]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = diagnostics.iter().filter(|d| d.t > 0.0 && d.l2 > 1e-14).map(|d| (d.t, d.l2.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mt, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    Some(-sxy / sxx)
}

fn weighted_mean(mass: &[f64], f: &[f64]) -> f64 {
    let total: f64 = mass.iter().sum();
    mass.iter().zip(f).map(|(m, v)| m * v).sum::<f64>() / total
}

fn check_positivity(values: &[f64], scale: f64) -> Result<()> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-12 * scale {
        return Err(Error::Numerical(format!("positivity violated: min value {min:.3e}")));
    }
    Ok(())
}

/// Distances of `f_t` to its μ-mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub l1: f64,
    pub l2: f64,
    pub sup_core: f64,
    pub max: f64,
    pub min: f64,
}

impl ConvergenceDiagnostics {
    pub fn measure(generator: &Generator, f: &[f64], t: f64, reference_mean: f64) -> Self {
        let mass = &generator.mass;
        let total: f64 = mass.iter().sum();
        let mean = weighted_mean(mass, f);
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (m, v) in mass.iter().zip(f) {
            let d = v - reference_mean;
            l1 += m * d.abs();
            l2 += m * d * d;
        }
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = f.iter().copied().fold(f64::INFINITY, f64::min);
        let level = CORE_LEVEL * max;
        let sup_core = f
            .iter()
            .filter(|v| **v >= level)
            .map(|v| (v - reference_mean).abs())
            .fold(0.0, f64::max);
        Self { t, mass: mean, l1: l1 / total, l2: (l2 / total).sqrt(), sup_core, max, min }
    }
}

/// Snapshots and per-snapshot diagnostics of a run.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub snapshots: Vec<GridField>,
    pub diagnostics: Vec<ConvergenceDiagnostics>,
    /// Largest one-step increase of `max f` seen (should be ≤ 0 up to round-off).
    pub max_increase: f64,
    /// Largest relative change of `∫f dμ` over the run.
    pub mass_drift: f64,
}

/// Runs `∂ₜf = Lf` from `f0` to `horizon`, recording the requested times
/// (rounded to the step grid). Aborts if `max f` grows by more than `1e−8`.
pub fn evolve(solver: &mut Solver, f0: &GridField, horizon: f64, snapshot_times: &[f64]) -> Result<Evolution> {
    if f0.values.iter().any(|v| *v < 0.0) {
        return Err(Error::Precondition("initial data must be nonnegative".into()));
    }
    let dt = solver.dt();
    let steps = (horizon / dt).round() as usize;
    let mut wanted: Vec<usize> = snapshot_times.iter().map(|t| (t / dt).round() as usize).filter(|k| *k <= steps).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let mut f = f0.values.clone();
    let mean0 = solver.mean(&f);
    let mut out = Evolution { snapshots: Vec::new(), diagnostics: Vec::new(), max_increase: f64::NEG_INFINITY, mass_drift: 0.0 };
    let record = |out: &mut Evolution, f: &[f64], k: usize, solver: &Solver| {
        let t = f0.t + k as f64 * dt;
        out.snapshots.push(solver.snapshot(f.to_vec(), t, f0.floor));
        out.diagnostics.push(ConvergenceDiagnostics::measure(solver.generator(), f, t, mean0));
    };
    let mut next = 0;
    if wanted.first() == Some(&0) {
        record(&mut out, &f, 0, solver);
        next = 1;
    }
    let mut prev_max = f0.max();
    let scale = prev_max.max(1.0);
    for k in 1..=steps {
        solver.advance(&mut f)?;
        let new_max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.max_increase = out.max_increase.max(new_max - prev_max);
        if new_max > prev_max + 1e-8 * scale {
            return Err(Error::Numerical(format!(
                "instability at t = {:.4}: max grew from {prev_max:.6e} to {new_max:.6e}",
                k as f64 * dt
            )));
        }
        check_positivity(&f, scale)?;
        prev_max = new_max;
        if mean0 > 0.0 {
            out.mass_drift = out.mass_drift.max(((solver.mean(&f) - mean0) / mean0).abs());
        }
        while next < wanted.len() && wanted[next] == k {
            record(&mut out, &f, k, solver);
            next += 1;
        }
    }
    Ok(out)
}

/// Centred-difference gradient of `values` at node `p` (one-sided at edges,
/// mirrored at the radial origin).
pub fn discrete_gradient(grid: &Grid, values: &[f64], p: usize) -> Vec<f64> {
    let (i, j) = grid.unindex(p);
    let (n0, n1) = grid.shape();
    let mut g = Vec::with_capacity(grid.dim());
    for (ax, axis) in grid.axes().iter().enumerate() {
        let (idx, len) = if ax == 0 { (i, n0) } else { (j, n1) };
        let at = |k: usize| if ax == 0 { values[grid.index(k, j)] } else { values[grid.index(i, k)] };
        let h = axis.spacing();
        let d = if idx == 0 {
            match axis.kind {
                AxisKind::Radial { .. } => (at(1) - at(0)) / (2.0 * h),
                AxisKind::Full => (at(1) - at(0)) / h,
            }
        } else if idx + 1 == len {
            (at(idx) - at(idx - 1)) / h
        } else {
            (at(idx + 1) - at(idx - 1)) / (2.0 * h)
        };
        g.push(d);
    }
    g
}

/// Minimum eigenvalue of the discrete Hessian of `−log f` over the core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HessianCheck {
    pub t: f64,
    pub min_eigenvalue: f64,
    pub core_nodes: usize,
    /// Node where the minimum occurs (grid coordinates).
    pub location: [f64; 2],
}

/// Discrete Hessian of `g = −log f` at interior core nodes whose stencil lies in the core.
///
/// Radial axes of dimension `d ≥ 2` contribute the tangential eigenvalue `g′/r`.
pub fn neg_log_hessian_min(field: &GridField) -> HessianCheck {
    neg_log_hessian_min_interior(field, 0.0)
}

/// As [`neg_log_hessian_min`], skipping nodes closer than `margin` to the outer wall.
pub fn neg_log_hessian_min_interior(field: &GridField, margin: f64) -> HessianCheck {
    let grid = &field.grid;
    let mut core = field.core_mask();
    if margin > 0.0 {
        for (p, c) in core.iter_mut().enumerate() {
            let x = grid.coords(p);
            if grid.axes().iter().zip(&x).any(|(a, v)| a.extent - v.abs() < margin) {
                *c = false;
            }
        }
    }
    let g: Vec<f64> = field.values.iter().map(|v| -(v.max(field.floor)).ln()).collect();
    let (n0, n1) = grid.shape();
    let axes = grid.axes();
    let mut best = HessianCheck { t: field.t, min_eigenvalue: f64::INFINITY, core_nodes: 0, location: [0.0; 2] };
    // neighbour index along an axis, mirrored through the radial origin
    let nb = |ax: usize, i: usize, j: usize, delta: isize| -> Option<usize> {
        let (idx, len) = if ax == 0 { (i, n0) } else { (j, n1) };
        let k = idx as isize + delta;
        let k = if k < 0 {
            match axes[ax].kind {
                AxisKind::Radial { .. } => (-k - 1) as usize,
                AxisKind::Full => return None,
            }
        } else if k as usize >= len {
            return None;
        } else {
            k as usize
        };
        Some(if ax == 0 { grid.index(k, j) } else { grid.index(i, k) })
    };
    for p in 0..grid.len() {
        if !core[p] {
            continue;
        }
        let (i, j) = grid.unindex(p);
        let mut ok = true;
        let mut second = [0.0; 2];
        let mut first = [0.0; 2];
        for ax in 0..grid.dim() {
            match (nb(ax, i, j, 1), nb(ax, i, j, -1)) {
                (Some(a), Some(b)) if core[a] && core[b] => {
                    let h = axes[ax].spacing();
                    second[ax] = (g[a] - 2.0 * g[p] + g[b]) / (h * h);
                    first[ax] = (g[a] - g[b]) / (2.0 * h);
                }
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let mut eig = if grid.dim() == 1 {
            second[0]
        } else {
            let corners = [nb(0, i, j, 1).and_then(|q| {
                let (a, _) = grid.unindex(q);
                nb(1, a, j, 1)
            }), nb(0, i, j, 1).and_then(|q| {
                let (a, _) = grid.unindex(q);
                nb(1, a, j, -1)
            }), nb(0, i, j, -1).and_then(|q| {
                let (a, _) = grid.unindex(q);
                nb(1, a, j, 1)
            }), nb(0, i, j, -1).and_then(|q| {
                let (a, _) = grid.unindex(q);
                nb(1, a, j, -1)
            })];
            let [Some(pp), Some(pm), Some(mp), Some(mm)] = corners else { continue };
            if !(core[pp] && core[pm] && core[mp] && core[mm]) {
                continue;
            }
            let (hx, hy) = (axes[0].spacing(), axes[1].spacing());
            let cross = (g[pp] - g[pm] - g[mp] + g[mm]) / (4.0 * hx * hy);
            let (a, b, c) = (second[0], second[1], cross);
            let mean = 0.5 * (a + b);
            let rad = (0.25 * (a - b) * (a - b) + c * c).sqrt();
            mean - rad
        };
        for (ax, axis) in axes.iter().enumerate() {
            if let AxisKind::Radial { dim } = axis.kind {
                if dim >= 2 {
                    let r = axis.coord(if ax == 0 { i } else { j });
                    eig = eig.min(first[ax] / r);
                }
            }
        }
        best.core_nodes += 1;
        if eig < best.min_eigenvalue {
            best.min_eigenvalue = eig;
            let c = grid.coords(p);
            best.location = [c[0], c.get(1).copied().unwrap_or(0.0)];
        }
    }
    best
}

/// One time slice of the gradient and smoothing bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsEntry {
    pub t: f64,
    /// `‖∇(−log f_t)‖∞` on the core.
    pub grad_log: f64,
    /// `‖∇f_t‖∞ √(2t)`.
    pub grad_f_scaled: f64,
    pub excluded_nodes: usize,
    pub gradient_bound_ok: bool,
    pub smoothing_bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub grad_v0_sup: f64,
    pub f0_sup: f64,
    pub tolerance: f64,
    pub entries: Vec<BoundsEntry>,
}

impl BoundsReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.gradient_bound_ok && e.smoothing_bound_ok)
    }
}

/// Checks `‖∇(−log f_t)‖∞ ≤ ‖∇V₀‖∞` and `‖∇f_t‖∞ √(2t) ≤ ‖f₀‖∞` (relative
/// tolerance `1e−6`). Nodes below the core level are excluded from the first.
pub fn quantitative_bounds_report(snapshots: &[GridField], grad_v0_sup: f64, f0_sup: f64) -> BoundsReport {
    let tolerance = 1e-6;
    let mut entries = Vec::new();
    for s in snapshots {
        let grid = &s.grid;
        let core = s.core_mask();
        let logs: Vec<f64> = s.values.iter().map(|v| -(v.max(s.floor)).ln()).collect();
        let mut grad_log: f64 = 0.0;
        let mut grad_f: f64 = 0.0;
        let mut excluded = 0;
        for p in 0..grid.len() {
            let gf = discrete_gradient(grid, &s.values, p);
            grad_f = grad_f.max(gf.iter().map(|c| c * c).sum::<f64>().sqrt());
            if !core[p] {
                excluded += 1;
                continue;
            }
            let gl = discrete_gradient(grid, &logs, p);
            grad_log = grad_log.max(gl.iter().map(|c| c * c).sum::<f64>().sqrt());
        }
        let grad_f_scaled = grad_f * (2.0 * s.t).sqrt();
        entries.push(BoundsEntry {
            t: s.t,
            grad_log,
            grad_f_scaled,
            excluded_nodes: excluded,
            gradient_bound_ok: grad_log <= grad_v0_sup * (1.0 + tolerance),
            smoothing_bound_ok: s.t == 0.0 || grad_f_scaled <= f0_sup * (1.0 + tolerance),
        });
    }
    BoundsReport { grad_v0_sup, f0_sup, tolerance, entries }
}

/// `sup |∇V|` over grid nodes, evaluated analytically through the embedding.
pub fn gradient_sup_on_grid(v: &SymmetricConvexPotential, grid: &Grid, embedding: &Embedding) -> f64 {
    (0..grid.len())
        .map(|p| {
            let g = v.gradient(&embedding.embed(&grid.coords(p)));
            g.iter().map(|c| c * c).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Fits `g(x) ≈ c + ⟨b, x⟩ + ½⟨Hx, x⟩` to `−log f` over nodes with `|x| ≤ radius`
/// by least squares and returns the symmetric Hessian `H` (row-major).
pub fn quadratic_fit_hessian(field: &GridField, radius: f64) -> Result<Vec<f64>> {
    let grid = &field.grid;
    let d = grid.dim();
    let nb = match d {
        1 => 3,
        _ => 6,
    };
    let mut ata = nalgebra::DMatrix::<f64>::zeros(nb, nb);
    let mut atb = nalgebra::DVector::<f64>::zeros(nb);
    let mut count = 0;
    for p in 0..grid.len() {
        let c = grid.coords(p);
        if c.iter().map(|v| v * v).sum::<f64>().sqrt() > radius || field.values[p] <= field.floor {
            continue;
        }
        let row: Vec<f64> = if d == 1 {
            vec![1.0, c[0], 0.5 * c[0] * c[0]]
        } else {
            vec![1.0, c[0], c[1], 0.5 * c[0] * c[0], c[0] * c[1], 0.5 * c[1] * c[1]]
        };
        let y = -field.values[p].ln();
        for a in 0..nb {
            atb[a] += row[a] * y;
            for b in 0..nb {
                ata[(a, b)] += row[a] * row[b];
            }
        }
        count += 1;
    }
    if count < nb * 2 {
        return Err(Error::Precondition("too few nodes inside the fitting radius".into()));
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::Numerical("singular least-squares system in quadratic fit".into()))?;
    Ok(if d == 1 { vec![sol[2]] } else { vec![sol[3], sol[4], sol[4], sol[5]] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_line(extent: f64, nodes: usize) -> (Arc<Grid>, GridPotential) {
        let grid = Arc::new(Grid::line(Axis::full(extent, nodes)).unwrap());
        let pot = GridPotential::new(|c| 0.5 * c[0] * c[0], |c| vec![c[0]]);
        (grid, pot)
    }

    #[test]
    fn constant_is_in_the_kernel() {
        let (grid, pot) = ou_line(8.0, 161);
        let gen = Generator::build(grid, &pot, BoundaryCondition::Reflecting).unwrap();
        let lf = gen.apply(&vec![1.0; 161]);
        assert!(lf.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn adjoint_annihilates_constants() {
        let (grid, pot) = ou_line(8.0, 81);
        let gen = Generator::build(grid, &pot, BoundaryCondition::Reflecting).unwrap();
        let sums = gen.adjoint_column_sums();
        let scale: f64 = gen.mass().iter().sum();
        assert!(sums.iter().all(|s| s.abs() < 1e-12 * scale.max(1.0)));
    }

    #[test]
    fn ou_generator_on_linear_function() {
        // Lf = −x for f = x; leading flux-form error is h²/24 · (3x − x³)
        let mut errs = Vec::new();
        for nodes in [401, 801] {
            let (grid, pot) = ou_line(8.0, nodes);
            let h = grid.axes()[0].spacing();
            let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
            let f: Vec<f64> = (0..nodes).map(|p| grid.coords(p)[0]).collect();
            let lf = gen.apply(&f);
            let mut err: f64 = 0.0;
            for p in 1..nodes - 1 {
                let x = f[p];
                if x.abs() > 4.0 {
                    continue;
                }
                let lead = h * h / 24.0 * (3.0 * x - x.powi(3));
                assert!((lf[p] + x - lead).abs() < 0.05 * h * h * (1.0 + x.abs().powi(5)), "x={x}");
                err = err.max((lf[p] + x).abs());
            }
            errs.push(err);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!((order - 2.0).abs() < 0.05, "order {order}");
    }

    #[test]
    fn radial_reduction_drift() {
        let d = radial_reduce(RadialProfile::quadratic(), 3).unwrap();
        assert!((d.drift(2.0) - (2.0 - 1.0)).abs() < 1e-15);
        let d1 = radial_reduce(RadialProfile::log_cosh(), 1).unwrap();
        assert_eq!(d1.drift(0.7), RadialProfile::log_cosh().d1(0.7));
        let d5 = radial_reduce(RadialProfile::log_cosh(), 5).unwrap();
        let r = 1.3;
        assert!((d5.effective_derivatives(r)[3] - (RadialProfile::log_cosh().d3(r) - 8.0 / r.powi(3))).abs() < 1e-14);
        assert!(radial_reduce(RadialProfile::quadratic(), 0).is_err());
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.3), 1.0);
        assert_eq!(cutoff(0.5), 1.0);
        assert_eq!(cutoff(1.0), 0.0);
        // −log χ convex and non-decreasing on (½, 1)
        let g = |s: f64| -cutoff(s).ln();
        let h = 1e-3;
        let mut s = 0.5 + 2.0 * h;
        while s < 0.99 {
            assert!(g(s + h) - 2.0 * g(s) + g(s - h) >= -1e-9);
            assert!(g(s + h) >= g(s));
            s += 0.01;
        }
    }

    #[test]
    fn constant_field_is_stationary() {
        let (grid, pot) = ou_line(8.0, 161);
        let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
        let mut solver = Solver::new(gen, 1e-2).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |_| 1.0).unwrap();
        let mut f = f0.clone();
        for _ in 0..5 {
            f = solver.step(&f).unwrap();
        }
        assert!(f.values.iter().all(|v| (v - 1.0).abs() < 1e-13));
    }

    #[test]
    fn mass_is_conserved_with_reflection() {
        let (grid, pot) = ou_line(8.0, 321);
        let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
        let mut solver = Solver::new(gen, 5e-3).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |c| (-(c[0] - 1.0).powi(2)).exp()).unwrap();
        let ev = evolve(&mut solver, &f0, 1.0, &[0.5, 1.0]).unwrap();
        assert!(ev.mass_drift < 1e-12, "{}", ev.mass_drift);
        assert!(ev.max_increase <= 1e-12);
    }

    #[test]
    fn dirichlet_cutoff_loses_mass() {
        let (grid, pot) = ou_line(4.0, 161);
        let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::DirichletCutoff).unwrap();
        let mut solver = Solver::new(gen, 5e-3).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::DirichletCutoff, |c| cutoff(c[0].abs() / 4.0)).unwrap();
        let mut f = f0.clone();
        let mut prev = solver.mean(&f.values);
        for _ in 0..50 {
            f = solver.step(&f).unwrap();
            let m = solver.mean(&f.values);
            assert!(m <= prev + 1e-15);
            prev = m;
        }
        assert!(prev < solver.mean(&f0.values));
    }

    #[test]
    fn reflection_symmetry_is_preserved() {
        let (grid, pot) = ou_line(6.0, 241);
        let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
        let mut solver = Solver::new(gen, 1e-2).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |c| (-(c[0] * c[0]) - 0.5 * c[0].powi(4)).exp()).unwrap();
        let ev = evolve(&mut solver, &f0, 0.5, &[0.5]).unwrap();
        let v = &ev.snapshots[0].values;
        let n = v.len();
        let asym = (0..n).map(|p| (v[p] - v[n - 1 - p]).abs()).fold(0.0, f64::max);
        assert!(asym < 1e-12, "{asym}");
    }

    #[test]
    fn cutoff_keeps_log_concavity() {
        let (grid, _) = ou_line(6.0, 601);
        let f = GridField::from_fn(grid, BoundaryCondition::Reflecting, |c| (-0.5 * c[0] * c[0]).exp()).unwrap();
        let g = apply_cutoff(&f, 5.0).unwrap();
        // inside R/2 unchanged
        for p in 0..601 {
            let x = g.grid.coords(p)[0];
            if x.abs() <= 2.5 {
                assert_eq!(g.values[p], f.values[p]);
            }
            if (x.abs() - 5.0).abs() < 1e-12 {
                assert_eq!(g.values[p], 0.0);
            }
        }
        assert!(neg_log_hessian_min(&g).min_eigenvalue >= -1e-8);
    }

    #[test]
    fn decay_rate_and_moment_scale() {
        let (grid, pot) = ou_line(7.0, 1401);
        let g = Generator::build(grid, &pot, BoundaryCondition::Reflecting).unwrap();
        let want = std::f64::consts::FRAC_PI_2;
        assert!((moment_scale(&g) - want).abs() < 1e-4, "{}", moment_scale(&g));
        let d = |t: f64| ConvergenceDiagnostics { t, mass: 0.0, l1: 0.0, l2: 3.0 * (-2.0 * t).exp(), sup_core: 0.0, max: 0.0, min: 0.0 };
        let diags: Vec<_> = [0.0, 0.5, 1.0, 2.0].into_iter().map(d).collect();
        assert!((fitted_decay_rate(&diags).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(fitted_decay_rate(&diags[..2]), None);
    }

    #[test]
    fn tail_mass_rule() {
        let pot = GridPotential::new(|c| 0.5 * c[0] * c[0], |c| vec![c[0]]);
        let small = Grid::line(Axis::full(4.0, 81)).unwrap();
        let big = Grid::line(Axis::full(7.0, 141)).unwrap();
        assert!(small.tail_mass(&pot) > TAIL_MASS_LIMIT);
        assert!(big.tail_mass(&pot) < TAIL_MASS_LIMIT);
        let plane = Grid::plane(Axis::full(7.0, 41), Axis::full(7.0, 41)).unwrap();
        let pot2 = GridPotential::new(|c| 0.5 * (c[0] * c[0] + c[1] * c[1]), |c| c.to_vec());
        let tail = plane.tail_mass(&pot2);
        assert!(tail < TAIL_MASS_LIMIT && tail > 1e-13, "{tail}");
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let (grid, _) = ou_line(2.0, 17);
        let f = GridField::from_fn(grid, BoundaryCondition::Reflecting, |_| 1.0).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,value,t\n"));
        assert_eq!(text.lines().count(), 18);
    }
}
