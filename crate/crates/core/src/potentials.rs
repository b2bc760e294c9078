//! Structured potentials `U(x) = Q(P₀x) + Σ ρᵢ(|Pᵢx|)` and symmetric convex
//! perturbations `V`, together with the third-derivative sign machinery used to
//! certify that the heat flow preserves log-concavity.
//!
//! Coordinates are axis aligned: the first `dim_e0` coordinates span `E₀`,
//! followed by the blocks `E₁, …, E_k` in order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for certifying analytic sign conditions on a mesh.
pub const SIGN_TOL: f64 = 1e-10;

/// Radii below this are treated as the block origin.
const ORIGIN_RADIUS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceDecomposition {
    dim_e0: usize,
    block_dims: Vec<usize>,
}

impl SubspaceDecomposition {
    pub fn new(dim_e0: usize, block_dims: Vec<usize>) -> Result<Self> {
        if block_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("block dimensions must be positive".into()));
        }
        if dim_e0 + block_dims.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidArgument("decomposition of a zero-dimensional space".into()));
        }
        Ok(Self { dim_e0, block_dims })
    }

    /// `E₀ = ℝⁿ`, no radial blocks.
    pub fn euclidean(n: usize) -> Result<Self> {
        Self::new(n, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim_e0 + self.block_dims.iter().sum::<usize>()
    }

    pub fn dim_e0(&self) -> usize {
        self.dim_e0
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn num_blocks(&self) -> usize {
        self.block_dims.len()
    }

    /// Coordinate range of block `i` (0-based over `E₁…E_k`).
    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.dim_e0 + self.block_dims[..i].iter().sum::<usize>();
        start..start + self.block_dims[i]
    }

    pub fn block_norm(&self, x: &[f64], i: usize) -> f64 {
        x[self.block_range(i)].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(P₀x, |P₁x|, …, |P_kx|)`.
    pub fn reduce(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x[..self.dim_e0].to_vec();
        out.extend((0..self.num_blocks()).map(|i| self.block_norm(x, i)));
        out
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "point has dimension {}, decomposition has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `Q(y) = ½⟨Ay, y⟩ + ⟨b, y⟩ + c` on `E₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl QuadraticForm {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::InvalidArgument("quadratic form dimensions disagree".into()));
        }
        let asym = (&a - a.transpose()).norm();
        if asym > 1e-12 * (1.0 + a.norm()) {
            return Err(Error::InvalidArgument(format!("quadratic matrix is not symmetric (residual {asym:.3e})")));
        }
        let min_eig = a.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidArgument(format!("quadratic matrix is not positive definite (min eig {min_eig:.3e})")));
        }
        Ok(Self { a, b, c })
    }

    pub fn centered(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, DVector::zeros(n), 0.0)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let y = DVector::from_column_slice(y);
        0.5 * y.dot(&(&self.a * &y)) + self.b.dot(&y) + self.c
    }

    pub fn gradient(&self, y: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(y) + &self.b
    }
}

/// The shipped radial profile families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProfileKind {
    /// `r²/2`
    Quadratic,
    /// `log cosh r`
    LogCosh,
    /// `√(1 + r²) − 1`
    SqrtOnePlus,
    /// `|r|^p`, `p ∈ [1, 2]`; not smooth at the origin.
    Power { p: f64 },
}

/// `ρ(r) = scale · base(r)` for one of the shipped families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    #[serde(flatten)]
    pub kind: ProfileKind,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
}

fn one() -> f64 {
    1.0
}

fn default_r_max() -> f64 {
    1e6
}

impl RadialProfile {
    pub fn new(kind: ProfileKind, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("profile scale must be finite and non-negative, got {scale}")));
        }
        if let ProfileKind::Power { p } = kind {
            if !(1.0..=2.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("power profile exponent {p} outside [1, 2]")));
            }
        }
        Ok(Self { kind, scale, r_max: default_r_max() })
    }

    pub fn quadratic() -> Self {
        Self { kind: ProfileKind::Quadratic, scale: 1.0, r_max: default_r_max() }
    }

    pub fn log_cosh() -> Self {
        Self { kind: ProfileKind::LogCosh, scale: 1.0, r_max: default_r_max() }
    }

    pub fn sqrt_one_plus() -> Self {
        Self { kind: ProfileKind::SqrtOnePlus, scale: 1.0, r_max: default_r_max() }
    }

    pub fn power(p: f64) -> Result<Self> {
        Self::new(ProfileKind::Power { p }, 1.0)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_r_max(mut self, r_max: f64) -> Self {
        self.r_max = r_max;
        self
    }

    /// Smooth at the origin (usable in grid/PDE paths).
    pub fn is_smooth(&self) -> bool {
        match self.kind {
            ProfileKind::Power { p } => p == 2.0,
            _ => true,
        }
    }

    pub fn check_domain(&self, r: f64) -> Result<()> {
        if !(r >= 0.0) || r > self.r_max {
            return Err(Error::Domain(format!("radius {r} outside [0, {}]", self.r_max)));
        }
        Ok(())
    }

    /// `[ρ, ρ′, ρ″, ρ‴]` at `r ≥ 0` (no domain check).
    pub fn derivatives(&self, r: f64) -> [f64; 4] {
        let base = match self.kind {
            ProfileKind::Quadratic => [0.5 * r * r, r, 1.0, 0.0],
            ProfileKind::LogCosh => {
                let a = r.abs();
                // log cosh r = |r| + log(1 + e^{-2|r|}) - log 2
                let value = a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
                let th = r.tanh();
                let ch = r.cosh();
                let sech2 = 1.0 / (ch * ch);
                [value, th, sech2, -2.0 * sech2 * th]
            }
            ProfileKind::SqrtOnePlus => {
                let s = (1.0 + r * r).sqrt();
                let value = r * r / (s + 1.0);
                [value, r / s, 1.0 / (s * s * s), -3.0 * r / (s * s * s * s * s)]
            }
            ProfileKind::Power { p } => {
                let a = r.abs();
                if a == 0.0 {
                    let d1 = if p == 1.0 { 1.0 } else { 0.0 };
                    let d2 = if p == 2.0 { 2.0 } else { f64::INFINITY };
                    let d3 = if p == 2.0 { 0.0 } else { f64::NEG_INFINITY };
                    [0.0, d1, d2, d3]
                } else {
                    [a.powf(p), p * a.powf(p - 1.0), p * (p - 1.0) * a.powf(p - 2.0), p * (p - 1.0) * (p - 2.0) * a.powf(p - 3.0)]
                }
            }
        };
        base.map(|v| self.scale * v)
    }

    pub fn value(&self, r: f64) -> f64 {
        self.derivatives(r)[0]
    }

    pub fn d1(&self, r: f64) -> f64 {
        self.derivatives(r)[1]
    }

    pub fn d2(&self, r: f64) -> f64 {
        self.derivatives(r)[2]
    }

    pub fn d3(&self, r: f64) -> f64 {
        self.derivatives(r)[3]
    }

    /// Checks `ρ′(0) = 0`, `ρ″ ≥ 0`, `ρ‴ ≤ 0` and `ρ″(t) ≤ ρ′(t)/t` on `mesh`.
    pub fn validate(&self, mesh: &[f64], tol: f64) -> Result<()> {
        let d0 = self.derivatives(0.0);
        if d0[1].abs() > tol {
            return Err(Error::Validation(format!("profile {:?}: ρ′(0) = {} ≠ 0", self.kind, d0[1])));
        }
        for &t in mesh {
            let [_, d1, d2, d3] = self.derivatives(t);
            if d2 < -tol {
                return Err(Error::Validation(format!("profile {:?}: ρ″({t}) = {d2} < 0", self.kind)));
            }
            if d3 > tol {
                return Err(Error::Validation(format!("profile {:?}: ρ‴({t}) = {d3} > 0", self.kind)));
            }
            if t > 0.0 && d2 - d1 / t > tol {
                return Err(Error::Validation(format!("profile {:?}: ρ″({t}) exceeds ρ′/t by {}", self.kind, d2 - d1 / t)));
            }
        }
        Ok(())
    }
}

/// Derivative of requested order returned by [`StructuredPotential::eval_derivatives`].
#[derive(Debug, Clone, PartialEq)]
pub enum Derivative {
    Value(f64),
    Gradient(DVector<f64>),
    Hessian(DMatrix<f64>),
}

/// `U(x) = Q(P₀x) + Σᵢ ρᵢ(|Pᵢx|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPotential {
    decomposition: SubspaceDecomposition,
    quad: Option<QuadraticForm>,
    profiles: Vec<RadialProfile>,
}

impl StructuredPotential {
    pub fn new(decomposition: SubspaceDecomposition, quad: Option<QuadraticForm>, profiles: Vec<RadialProfile>) -> Result<Self> {
        if profiles.len() != decomposition.num_blocks() {
            return Err(Error::InvalidArgument(format!(
                "{} profiles for {} blocks",
                profiles.len(),
                decomposition.num_blocks()
            )));
        }
        match (&quad, decomposition.dim_e0()) {
            (None, 0) => {}
            (Some(q), d) if q.dim() == d => {}
            _ => return Err(Error::InvalidArgument("quadratic part does not match dim E₀".into())),
        }
        Ok(Self { decomposition, quad, profiles })
    }

    /// `½|x|²` on `ℝⁿ` with `E₀ = ℝⁿ`.
    pub fn standard_gaussian(n: usize) -> Result<Self> {
        Self::new(SubspaceDecomposition::euclidean(n)?, Some(QuadraticForm::centered(DMatrix::identity(n, n))?), Vec::new())
    }

    /// `ρ(|x|)` on `ℝⁿ` (a single radial block).
    pub fn radial(n: usize, profile: RadialProfile) -> Result<Self> {
        Self::new(SubspaceDecomposition::new(0, vec![n])?, None, vec![profile])
    }

    /// `Σ ρ(|xⱼ|)`: product measure with one-dimensional blocks.
    pub fn product(profiles: Vec<RadialProfile>) -> Result<Self> {
        let dec = SubspaceDecomposition::new(0, vec![1; profiles.len()])?;
        Self::new(dec, None, profiles)
    }

    pub fn decomposition(&self) -> &SubspaceDecomposition {
        &self.decomposition
    }

    pub fn quad(&self) -> Option<&QuadraticForm> {
        self.quad.as_ref()
    }

    pub fn profiles(&self) -> &[RadialProfile] {
        &self.profiles
    }

    pub fn dim(&self) -> usize {
        self.decomposition.dim()
    }

    /// Every profile smooth: the potential may enter PDE paths.
    pub fn is_smooth(&self) -> bool {
        self.profiles.iter().all(RadialProfile::is_smooth)
    }

    fn block_radii(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decomposition.check_point(x)?;
        (0..self.decomposition.num_blocks())
            .map(|i| {
                let r = self.decomposition.block_norm(x, i);
                self.profiles[i].check_domain(r)?;
                Ok(r)
            })
            .collect()
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let radii = self.block_radii(x)?;
        let d0 = self.decomposition.dim_e0();
        let mut u = self.quad.as_ref().map_or(0.0, |q| q.value(&x[..d0]));
        for (p, r) in self.profiles.iter().zip(radii) {
            u += p.value(r);
        }
        Ok(u)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let radii = self.block_radii(x)?;
        let d0 = self.decomposition.dim_e0();
        let mut g = DVector::zeros(self.dim());
        if let Some(q) = &self.quad {
            g.rows_mut(0, d0).copy_from(&q.gradient(&x[..d0]));
        }
        for (i, (p, r)) in self.profiles.iter().zip(radii).enumerate() {
            if r == 0.0 {
                continue;
            }
            let scale = p.d1(r) / r;
            for j in self.decomposition.block_range(i) {
                g[j] = scale * x[j];
            }
        }
        Ok(g)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let radii = self.block_radii(x)?;
        let d0 = self.decomposition.dim_e0();
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        if let Some(q) = &self.quad {
            h.view_mut((0, 0), (d0, d0)).copy_from(q.matrix());
        }
        for (i, (p, r)) in self.profiles.iter().zip(radii).enumerate() {
            let range = self.decomposition.block_range(i);
            if r < ORIGIN_RADIUS {
                let d2 = p.d2(0.0);
                if !d2.is_finite() {
                    return Err(Error::Domain(format!("profile {:?} has no second derivative at the origin", p.kind)));
                }
                for j in range {
                    h[(j, j)] = d2;
                }
                continue;
            }
            let [_, d1, d2, _] = p.derivatives(r);
            let tangential = d1 / r;
            for a in range.clone() {
                for b in range.clone() {
                    let uu = x[a] * x[b] / (r * r);
                    let id = if a == b { 1.0 } else { 0.0 };
                    h[(a, b)] = d2 * uu + tangential * (id - uu);
                }
            }
        }
        Ok(h)
    }

    /// `U`, `∇U` or `D²U` at `x` for `order ∈ {0, 1, 2}`.
    pub fn eval_derivatives(&self, x: &[f64], order: usize) -> Result<Derivative> {
        match order {
            0 => self.value(x).map(Derivative::Value),
            1 => self.gradient(x).map(Derivative::Gradient),
            2 => self.hessian(x).map(Derivative::Hessian),
            _ => Err(Error::InvalidArgument(format!("derivative order {order} not supported"))),
        }
    }

    /// `D³U|ₓ(ξ, ξ, θ)`, assembled blockwise; the quadratic part contributes nothing.
    pub fn third_form(&self, x: &[f64], xi: &[f64], theta: &[f64]) -> Result<f64> {
        let radii = self.block_radii(x)?;
        if xi.len() != x.len() || theta.len() != x.len() {
            return Err(Error::InvalidArgument("direction dimension mismatch".into()));
        }
        let xi_norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (xi_norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("ξ must be a unit vector (|ξ| = {xi_norm})")));
        }
        let mut total = 0.0;
        for (i, (p, r)) in self.profiles.iter().zip(radii).enumerate() {
            let range = self.decomposition.block_range(i);
            if r < ORIGIN_RADIUS {
                if !p.is_smooth() && theta[range].iter().any(|v| *v != 0.0) {
                    return Err(Error::Domain(format!("profile {:?} has no third derivative at the origin", p.kind)));
                }
                // smooth even profiles have D³ϱ(0) = 0
                continue;
            }
            let [_, d1, d2, d3] = p.derivatives(r);
            let beta = (d2 - d1 / r) / r;
            let gamma = d3 - 3.0 * beta;
            let (mut ua, mut ut, mut aa, mut at) = (0.0, 0.0, 0.0, 0.0);
            for j in range {
                let u = x[j] / r;
                ua += u * xi[j];
                ut += u * theta[j];
                aa += xi[j] * xi[j];
                at += xi[j] * theta[j];
            }
            total += gamma * ua * ua * ut + beta * (aa * ut + 2.0 * at * ua);
        }
        if !total.is_finite() {
            return Err(Error::Numerical("third derivative form is not finite".into()));
        }
        Ok(total)
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A convex `V` meant to satisfy `V(x) = Φ(P₀x, |P₁x|, …, |P_kx|)`.
///
/// Evaluators act on full points so that symmetry can be audited rather
/// than assumed; [`Self::general`] admits deliberately broken examples.
#[derive(Clone)]
pub struct SymmetricConvexPotential {
    decomposition: SubspaceDecomposition,
    value: ScalarFn,
    gradient: VectorFn,
    hessian: Option<MatrixFn>,
}

impl std::fmt::Debug for SymmetricConvexPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricConvexPotential")
            .field("decomposition", &self.decomposition)
            .field("has_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl SymmetricConvexPotential {
    /// Arbitrary evaluators; symmetry is not guaranteed.
    pub fn general(
        decomposition: SubspaceDecomposition,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { decomposition, value: Arc::new(value), gradient: Arc::new(gradient), hessian: None }
    }

    pub fn with_hessian(mut self, hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    /// Builds `V` from a reduced function `Φ` and its partial derivatives.
    pub fn from_reduced(
        decomposition: SubspaceDecomposition,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        let dec_v = decomposition.clone();
        let dec_g = decomposition.clone();
        let value = move |x: &[f64]| phi(&dec_v.reduce(x));
        let gradient = move |x: &[f64]| {
            let reduced = dec_g.reduce(x);
            let partials = dphi(&reduced);
            let d0 = dec_g.dim_e0();
            let mut g = vec![0.0; x.len()];
            g[..d0].copy_from_slice(&partials[..d0]);
            for i in 0..dec_g.num_blocks() {
                let r = reduced[d0 + i];
                if r > 0.0 {
                    for j in dec_g.block_range(i) {
                        g[j] = partials[d0 + i] * x[j] / r;
                    }
                }
            }
            g
        };
        Self::general(decomposition, value, gradient)
    }

    pub fn zero(decomposition: SubspaceDecomposition) -> Self {
        let n = decomposition.dim();
        Self::general(decomposition, |_| 0.0, move |_| vec![0.0; n]).with_hessian(move |_| DMatrix::zeros(n, n))
    }

    /// A structured potential is itself convex and symmetric.
    pub fn from_structured(u: StructuredPotential) -> Self {
        let dec = u.decomposition().clone();
        let (uv, ug, uh) = (u.clone(), u.clone(), u);
        Self::general(dec, move |x| uv.value(x).unwrap_or(f64::INFINITY), move |x| {
            ug.gradient(x).map(|g| g.as_slice().to_vec()).unwrap_or_else(|_| vec![f64::NAN; x.len()])
        })
        .with_hessian(move |x| uh.hessian(x).unwrap_or_else(|_| DMatrix::from_element(x.len(), x.len(), f64::NAN)))
    }

    /// `½⟨B₀x₀, x₀⟩ + Σ cᵢ|xᵢ|²/2`.
    pub fn quadratic(decomposition: SubspaceDecomposition, e0: DMatrix<f64>, block_coeffs: Vec<f64>) -> Result<Self> {
        let d0 = decomposition.dim_e0();
        if e0.nrows() != d0 || e0.ncols() != d0 || block_coeffs.len() != decomposition.num_blocks() {
            return Err(Error::InvalidArgument("quadratic V does not match the decomposition".into()));
        }
        let n = decomposition.dim();
        let mut full = DMatrix::zeros(n, n);
        full.view_mut((0, 0), (d0, d0)).copy_from(&e0);
        for (i, c) in block_coeffs.iter().enumerate() {
            for j in decomposition.block_range(i) {
                full[(j, j)] = *c;
            }
        }
        Ok(Self::full_quadratic(decomposition, full))
    }

    /// `½⟨Bx, x⟩` for an arbitrary symmetric `B` (may break the symmetry).
    pub fn full_quadratic(decomposition: SubspaceDecomposition, b: DMatrix<f64>) -> Self {
        let (bv, bg, bh) = (b.clone(), b.clone(), b);
        Self::general(
            decomposition,
            move |x| {
                let v = DVector::from_column_slice(x);
                0.5 * v.dot(&(&bv * &v))
            },
            move |x| (&bg * DVector::from_column_slice(x)).as_slice().to_vec(),
        )
        .with_hessian(move |_| bh.clone())
    }

    /// `√(1 + ⟨Bx, x⟩) − 1`, convex for PSD `B`.
    pub fn sqrt_quadratic(decomposition: SubspaceDecomposition, b: DMatrix<f64>) -> Self {
        let (bv, bg, bh) = (b.clone(), b.clone(), b);
        Self::general(
            decomposition,
            move |x| {
                let v = DVector::from_column_slice(x);
                (1.0 + v.dot(&(&bv * &v))).sqrt() - 1.0
            },
            move |x| {
                let v = DVector::from_column_slice(x);
                let bx = &bg * &v;
                let s = (1.0 + v.dot(&bx)).sqrt();
                (bx / s).as_slice().to_vec()
            },
        )
        .with_hessian(move |x| {
            let v = DVector::from_column_slice(x);
            let bx = &bh * &v;
            let s = (1.0 + v.dot(&bx)).sqrt();
            &bh / s - (&bx * bx.transpose()) / (s * s * s)
        })
    }

    /// `⟨c, x⟩`: convex but breaks symmetry whenever `c` has a block component.
    pub fn linear(decomposition: SubspaceDecomposition, c: Vec<f64>) -> Self {
        let n = c.len();
        let (cv, cg) = (c.clone(), c);
        Self::general(decomposition, move |x| cv.iter().zip(x).map(|(a, b)| a * b).sum(), move |_| cg.clone())
            .with_hessian(move |_| DMatrix::zeros(n, n))
    }

    pub fn sum(self, other: Self) -> Result<Self> {
        if self.decomposition != other.decomposition {
            return Err(Error::InvalidArgument("cannot add potentials over different decompositions".into()));
        }
        let (av, ag, ah) = (self.value.clone(), self.gradient.clone(), self.hessian.clone());
        let (bv, bg, bh) = (other.value.clone(), other.gradient.clone(), other.hessian.clone());
        let mut out = Self::general(self.decomposition, move |x| av(x) + bv(x), move |x| {
            ag(x).into_iter().zip(bg(x)).map(|(a, b)| a + b).collect()
        });
        if let (Some(ah), Some(bh)) = (ah, bh) {
            out.hessian = Some(Arc::new(move |x| ah(x) + bh(x)));
        }
        Ok(out)
    }

    pub fn decomposition(&self) -> &SubspaceDecomposition {
        &self.decomposition
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }

    /// Analytic Hessian when available, otherwise central differences of the gradient.
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        if let Some(h) = &self.hessian {
            return h(x);
        }
        let n = x.len();
        let step = 1e-5;
        let mut h = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for j in 0..n {
            xp[j] = x[j] + step;
            let gp = self.gradient(&xp);
            xp[j] = x[j] - step;
            let gm = self.gradient(&xp);
            xp[j] = x[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        0.5 * (&h + h.transpose())
    }

    /// Smallest Hessian eigenvalue over `points`; convex iff ≥ `-tol`.
    pub fn validate_convexity(&self, points: &[Vec<f64>], tol: f64) -> Result<f64> {
        let mut min_eig = f64::INFINITY;
        for x in points {
            let h = self.hessian(x);
            let e = h.symmetric_eigen().eigenvalues.min();
            min_eig = min_eig.min(e);
            if e < -tol {
                return Err(Error::Validation(format!("V is not convex near {x:?}: Hessian eigenvalue {e:.3e}")));
            }
        }
        Ok(min_eig)
    }
}

/// Elements of `O(E₁,…,E_k)` (identity on `E₀`).
#[derive(Debug, Clone, PartialEq)]
pub enum GroupElement {
    /// One orthogonal matrix per block.
    BlockRotation(Vec<DMatrix<f64>>),
    /// `Rᵢ(x) = x − 2Pᵢx` for block `i` (0-based over `E₁…E_k`).
    Reflection(usize),
}

impl GroupElement {
    /// Haar-random block rotations (QR of Gaussian matrices with sign fix).
    pub fn random_rotation<R: Rng + ?Sized>(decomposition: &SubspaceDecomposition, rng: &mut R) -> Self {
        let blocks = decomposition
            .block_dims()
            .iter()
            .map(|&d| {
                let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let qr = g.qr();
                let mut q = qr.q();
                let r = qr.r();
                for j in 0..d {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                q
            })
            .collect();
        GroupElement::BlockRotation(blocks)
    }

    /// Rotation by `angle` in the first two coordinates of a block of dimension ≥ 2.
    pub fn planar_rotation(decomposition: &SubspaceDecomposition, block: usize, angle: f64) -> Result<Self> {
        let dims = decomposition.block_dims();
        if block >= dims.len() || dims[block] < 2 {
            return Err(Error::InvalidArgument("planar rotation needs a block of dimension ≥ 2".into()));
        }
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut m = DMatrix::identity(d, d);
                if i == block {
                    let (s, c) = angle.sin_cos();
                    m[(0, 0)] = c;
                    m[(0, 1)] = -s;
                    m[(1, 0)] = s;
                    m[(1, 1)] = c;
                }
                m
            })
            .collect();
        Ok(GroupElement::BlockRotation(blocks))
    }

    pub fn apply(&self, decomposition: &SubspaceDecomposition, x: &[f64]) -> Result<Vec<f64>> {
        decomposition.check_point(x)?;
        let mut y = x.to_vec();
        match self {
            GroupElement::BlockRotation(blocks) => {
                if blocks.len() != decomposition.num_blocks() {
                    return Err(Error::InvalidArgument("rotation does not match the block structure".into()));
                }
                for (i, q) in blocks.iter().enumerate() {
                    let range = decomposition.block_range(i);
                    if q.nrows() != range.len() || !q.is_square() {
                        return Err(Error::InvalidArgument(format!("block {i} rotation has the wrong size")));
                    }
                    let xi = DVector::from_column_slice(&x[range.clone()]);
                    let yi = q * xi;
                    y[range].copy_from_slice(yi.as_slice());
                }
            }
            GroupElement::Reflection(i) => {
                if *i >= decomposition.num_blocks() {
                    return Err(Error::InvalidArgument(format!("no block {i} to reflect")));
                }
                for j in decomposition.block_range(*i) {
                    y[j] = -y[j];
                }
            }
        }
        Ok(y)
    }
}

/// `max |F(gx) − F(x)|` over the sample points.
pub fn invariance_residual<F: Fn(&[f64]) -> f64>(
    f: F,
    decomposition: &SubspaceDecomposition,
    g: &GroupElement,
    points: &[Vec<f64>],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in points {
        let gx = g.apply(decomposition, x)?;
        worst = worst.max((f(&gx) - f(x)).abs());
    }
    Ok(worst)
}

/// Outcome of the blockwise alignment test `Pᵢ∇V(x) = aᵢ Pᵢx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `None` for blocks where `Pᵢx = 0`.
    pub coefficients: Vec<Option<f64>>,
    pub violations: Vec<String>,
}

impl Alignment {
    pub fn is_aligned(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recovers `aᵢ ≥ 0` with `Pᵢ∇V(x) = aᵢPᵢx`, reporting violations.
pub fn gradient_alignment(v: &SymmetricConvexPotential, x: &[f64]) -> Result<Alignment> {
    let dec = v.decomposition();
    dec.check_point(x)?;
    let g = v.gradient(x);
    if g.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("∇V is not finite".into()));
    }
    let mut coefficients = Vec::with_capacity(dec.num_blocks());
    let mut violations = Vec::new();
    for i in 0..dec.num_blocks() {
        let range = dec.block_range(i);
        let r2: f64 = x[range.clone()].iter().map(|c| c * c).sum();
        let g2: f64 = g[range.clone()].iter().map(|c| c * c).sum();
        let gnorm = g2.sqrt();
        let tol = SIGN_TOL * (1.0 + gnorm);
        if r2.sqrt() < ORIGIN_RADIUS {
            if gnorm > tol {
                return Err(Error::SymmetryViolation(format!(
                    "block {i}: Pᵢx = 0 but |Pᵢ∇V(x)| = {gnorm:.3e}"
                )));
            }
            coefficients.push(None);
            continue;
        }
        let dot: f64 = range.clone().map(|j| x[j] * g[j]).sum();
        let a = dot / r2;
        let residual: f64 = range.map(|j| (g[j] - a * x[j]).powi(2)).sum::<f64>().sqrt();
        if residual > tol {
            violations.push(format!("block {i}: gradient has orthogonal component {residual:.3e}"));
        }
        if a < -SIGN_TOL {
            violations.push(format!("block {i}: negative radial coefficient {a:.3e}"));
        }
        coefficients.push(Some(a));
    }
    Ok(Alignment { coefficients, violations })
}

/// Result of certifying `D³U(ξ, ξ, ∇V) ≤ 0` on a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SignReport {
    pub max_value: f64,
    pub worst_point: Vec<f64>,
    pub worst_direction: Vec<f64>,
    pub alignment_violations: usize,
    pub samples: usize,
    pub tolerance: f64,
}

impl SignReport {
    pub fn passed(&self) -> bool {
        self.max_value <= self.tolerance && self.alignment_violations == 0
    }
}

/// Deterministic direction mesh: axes, pairwise diagonals and fixed pseudo-random directions.
pub fn direction_mesh(n: usize, random: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    let mut dirs = Vec::new();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        dirs.push(e);
        for j in i + 1..n {
            for s in [1.0, -1.0] {
                let mut d = vec![0.0; n];
                d[i] = std::f64::consts::FRAC_1_SQRT_2;
                d[j] = s * std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(d);
            }
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-12 {
            dirs.push(v.into_iter().map(|c| c / norm).collect());
        }
    }
    dirs
}

/// Maximizes `D³U|ₓ(ξ, ξ, ∇V(x))` over samples and a direction mesh.
pub fn check_sign_condition(u: &StructuredPotential, v: &SymmetricConvexPotential, points: &[Vec<f64>]) -> Result<SignReport> {
    let n = u.dim();
    if v.decomposition() != u.decomposition() {
        return Err(Error::InvalidArgument("U and V use different decompositions".into()));
    }
    let dirs = direction_mesh(n, 32, 0x5eed);
    let mut report = SignReport {
        max_value: f64::NEG_INFINITY,
        worst_point: Vec::new(),
        worst_direction: Vec::new(),
        alignment_violations: 0,
        samples: points.len(),
        tolerance: SIGN_TOL,
    };
    for x in points {
        match gradient_alignment(v, x) {
            Ok(a) if a.is_aligned() => {}
            Ok(_) | Err(Error::SymmetryViolation(_)) => report.alignment_violations += 1,
            Err(e) => return Err(e),
        }
        let theta = v.gradient(x);
        for xi in &dirs {
            let val = u.third_form(x, xi, &theta)?;
            if val > report.max_value {
                report.max_value = val;
                report.worst_point = x.clone();
                report.worst_direction = xi.clone();
            }
        }
    }
    Ok(report)
}

/// Serializable description of a structured potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredPotentialSpec {
    #[serde(default)]
    pub dim_e0: usize,
    #[serde(default)]
    pub block_dims: Vec<usize>,
    /// Row-major `dim_e0 × dim_e0` matrix of the quadratic part.
    #[serde(default)]
    pub quad_matrix: Vec<f64>,
    #[serde(default)]
    pub quad_linear: Vec<f64>,
    #[serde(default)]
    pub profiles: Vec<RadialProfile>,
}

impl StructuredPotentialSpec {
    pub fn build(&self) -> Result<StructuredPotential> {
        let dec = SubspaceDecomposition::new(self.dim_e0, self.block_dims.clone())?;
        let quad = if self.dim_e0 == 0 {
            None
        } else {
            let d = self.dim_e0;
            if self.quad_matrix.len() != d * d {
                return Err(Error::InvalidArgument(format!("quad_matrix needs {} entries", d * d)));
            }
            let a = DMatrix::from_row_slice(d, d, &self.quad_matrix);
            let b = if self.quad_linear.is_empty() {
                DVector::zeros(d)
            } else if self.quad_linear.len() == d {
                DVector::from_column_slice(&self.quad_linear)
            } else {
                return Err(Error::InvalidArgument(format!("quad_linear needs {d} entries")));
            };
            Some(QuadraticForm::new(a, b, 0.0)?)
        };
        for p in &self.profiles {
            RadialProfile::new(p.kind, p.scale)?;
        }
        StructuredPotential::new(dec, quad, self.profiles.clone())
    }
}

/// Serializable description of a convex perturbation `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    Zero,
    /// `½⟨Bx, x⟩` with `B` row-major `n × n`.
    Quadratic { matrix: Vec<f64> },
    /// `√(1 + ⟨Bx, x⟩) − 1`.
    SqrtQuadratic { matrix: Vec<f64> },
    /// A structured potential used as `V`.
    Structured { potential: StructuredPotentialSpec },
    /// `⟨c, x⟩`.
    Linear { coefficients: Vec<f64> },
    Sum { terms: Vec<PerturbationSpec> },
}

impl PerturbationSpec {
    pub fn build(&self, decomposition: &SubspaceDecomposition) -> Result<SymmetricConvexPotential> {
        let n = decomposition.dim();
        let square = |m: &Vec<f64>| -> Result<DMatrix<f64>> {
            if m.len() != n * n {
                return Err(Error::InvalidArgument(format!("matrix needs {} entries", n * n)));
            }
            Ok(DMatrix::from_row_slice(n, n, m))
        };
        Ok(match self {
            PerturbationSpec::Zero => SymmetricConvexPotential::zero(decomposition.clone()),
            PerturbationSpec::Quadratic { matrix } => SymmetricConvexPotential::full_quadratic(decomposition.clone(), square(matrix)?),
            PerturbationSpec::SqrtQuadratic { matrix } => SymmetricConvexPotential::sqrt_quadratic(decomposition.clone(), square(matrix)?),
            PerturbationSpec::Structured { potential } => {
                let u = potential.build()?;
                if u.decomposition() != decomposition {
                    return Err(Error::InvalidArgument("structured V uses a different decomposition".into()));
                }
                SymmetricConvexPotential::from_structured(u)
            }
            PerturbationSpec::Linear { coefficients } => {
                if coefficients.len() != n {
                    return Err(Error::InvalidArgument(format!("linear V needs {n} coefficients")));
                }
                SymmetricConvexPotential::linear(decomposition.clone(), coefficients.clone())
            }
            PerturbationSpec::Sum { terms } => {
                let mut acc = SymmetricConvexPotential::zero(decomposition.clone());
                for t in terms {
                    acc = acc.sum(t.build(decomposition)?)?;
                }
                acc
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn log_cosh_1d() -> StructuredPotential {
        StructuredPotential::product(vec![RadialProfile::log_cosh()]).unwrap()
    }

    #[test]
    fn pure_quadratic_derivatives() {
        let u = StructuredPotential::standard_gaussian(2).unwrap();
        let g = u.gradient(&[1.0, 2.0]).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
        assert_eq!(u.hessian(&[1.0, 2.0]).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn log_cosh_gradient_matches_finite_differences() {
        let u = log_cosh_1d();
        let h = 1e-5;
        let fd = (u.value(&[1.0 + h]).unwrap() - u.value(&[1.0 - h]).unwrap()) / (2.0 * h);
        let g = u.gradient(&[1.0]).unwrap()[0];
        assert!((g - fd).abs() < 1e-9, "{g} vs {fd}");
        assert!((g - 0.761_594_155_955_764_9).abs() < 1e-12);
    }

    #[test]
    fn third_form_log_cosh_scalar_block() {
        let u = log_cosh_1d();
        let h = 1e-4;
        let fd = (u.profiles()[0].d2(1.0 + h) - u.profiles()[0].d2(1.0 - h)) / (2.0 * h);
        let v = u.third_form(&[1.0], &[1.0], &[1.0]).unwrap();
        assert!((v - fd).abs() < 1e-7, "{v} vs {fd}");
        assert!((v + 0.6397).abs() < 1e-3);
    }

    #[test]
    fn third_form_quadratic_vanishes() {
        let u = StructuredPotential::new(
            SubspaceDecomposition::new(1, vec![2]).unwrap(),
            Some(QuadraticForm::centered(DMatrix::from_element(1, 1, 2.0)).unwrap()),
            vec![RadialProfile::quadratic()],
        )
        .unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = u.third_form(&[0.3, -1.0, 2.0], &[0.0, s, s], &[1.0, 5.0, -3.0]).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn third_form_matches_finite_differences_of_hessian() {
        let dec = SubspaceDecomposition::new(1, vec![3, 2]).unwrap();
        let u = StructuredPotential::new(
            dec,
            Some(QuadraticForm::centered(DMatrix::from_element(1, 1, 1.0)).unwrap()),
            vec![RadialProfile::log_cosh(), RadialProfile::sqrt_one_plus().with_scale(2.0)],
        )
        .unwrap();
        let x = [0.2, 0.7, -0.4, 1.1, -0.3, 0.9];
        let xi_raw = [0.1, -0.5, 0.3, 0.2, 0.7, -0.4];
        let norm: f64 = xi_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xi: Vec<f64> = xi_raw.iter().map(|v| v / norm).collect();
        let theta = [0.3, 1.0, 0.2, -0.5, 0.6, 0.1];
        let step = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&theta).map(|(a, b)| a + step * b).collect();
        let xm: Vec<f64> = x.iter().zip(&theta).map(|(a, b)| a - step * b).collect();
        let dh = (u.hessian(&xp).unwrap() - u.hessian(&xm).unwrap()) / (2.0 * step);
        let xiv = DVector::from_column_slice(&xi);
        let fd = xiv.dot(&(&dh * &xiv));
        let v = u.third_form(&x, &xi, &theta).unwrap();
        assert!((v - fd).abs() < 1e-7, "{v} vs {fd}");
    }

    #[test]
    fn hessian_at_block_origin_uses_limit() {
        let u = StructuredPotential::radial(2, RadialProfile::log_cosh()).unwrap();
        assert_eq!(u.hessian(&[0.0, 0.0]).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(u.third_form(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn outside_cap_is_a_domain_error() {
        let u = StructuredPotential::radial(1, RadialProfile::log_cosh().with_r_max(5.0)).unwrap();
        assert!(matches!(u.value(&[6.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn shipped_profiles_satisfy_their_invariants() {
        let mesh: Vec<f64> = (1..=4000).map(|i| i as f64 * 5e-3).collect();
        for p in [RadialProfile::quadratic(), RadialProfile::log_cosh(), RadialProfile::sqrt_one_plus()] {
            p.validate(&mesh, SIGN_TOL).unwrap();
        }
        // |r|^p is not C¹ at 0 for p = 1
        assert!(RadialProfile::power(1.0).unwrap().validate(&mesh, SIGN_TOL).is_err());
        assert!(!RadialProfile::power(1.5).unwrap().is_smooth());
    }

    #[test]
    fn alignment_for_radial_quadratic() {
        let dec = SubspaceDecomposition::new(1, vec![2, 1]).unwrap();
        let v = SymmetricConvexPotential::quadratic(dec, DMatrix::from_element(1, 1, 1.0), vec![1.0, 1.0]).unwrap();
        let a = gradient_alignment(&v, &[0.5, 1.0, -2.0, 0.3]).unwrap();
        assert!(a.is_aligned());
        for c in a.coefficients {
            assert!((c.unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn alignment_flags_symmetry_breaking_gradient() {
        let dec = SubspaceDecomposition::new(0, vec![2]).unwrap();
        let v = SymmetricConvexPotential::linear(dec, vec![1.0, 0.0]);
        let a = gradient_alignment(&v, &[0.0, 1.0]).unwrap();
        assert!(!a.is_aligned());
        assert!(matches!(gradient_alignment(&v, &[0.0, 0.0]), Err(Error::SymmetryViolation(_))));
    }

    #[test]
    fn sign_condition_quadratic_u_is_zero() {
        let u = StructuredPotential::standard_gaussian(2).unwrap();
        let v = SymmetricConvexPotential::sqrt_quadratic(u.decomposition().clone(), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        let pts = vec![vec![0.3, -1.0], vec![2.0, 1.5]];
        let r = check_sign_condition(&u, &v, &pts).unwrap();
        assert_eq!(r.max_value, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn sign_condition_flags_counterexample() {
        let u = StructuredPotential::radial(2, RadialProfile::log_cosh()).unwrap();
        let v = SymmetricConvexPotential::linear(u.decomposition().clone(), vec![1.0, 0.0]);
        let r = check_sign_condition(&u, &v, &[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert!(!r.passed());
        assert!(r.max_value > 0.0);
        assert!(r.alignment_violations > 0);
    }

    #[test]
    fn rotations_leave_structured_potential_invariant() {
        let u = StructuredPotential::new(
            SubspaceDecomposition::new(1, vec![2, 3]).unwrap(),
            Some(QuadraticForm::centered(DMatrix::from_element(1, 1, 1.0)).unwrap()),
            vec![RadialProfile::log_cosh(), RadialProfile::sqrt_one_plus()],
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let g = GroupElement::random_rotation(u.decomposition(), &mut rng);
        let res = invariance_residual(|x| u.value(x).unwrap(), u.decomposition(), &g, &pts).unwrap();
        assert!(res < 1e-12, "{res}");
        let refl = GroupElement::Reflection(1);
        assert!(invariance_residual(|x| u.value(x).unwrap(), u.decomposition(), &refl, &pts).unwrap() < 1e-14);
    }

    #[test]
    fn coordinate_function_is_not_invariant() {
        let dec = SubspaceDecomposition::new(0, vec![2]).unwrap();
        let g = GroupElement::planar_rotation(&dec, 0, std::f64::consts::FRAC_PI_2).unwrap();
        let res = invariance_residual(|x| x[0], &dec, &g, &[vec![1.0, 0.0]]).unwrap();
        assert!(res > 0.5);
    }

    #[test]
    fn spec_round_trip_builds_potential() {
        let spec: StructuredPotentialSpec = serde_json_like();
        let u = spec.build().unwrap();
        assert_eq!(u.dim(), 3);
        assert_eq!(u.profiles()[0].kind, ProfileKind::LogCosh);
    }

    fn serde_json_like() -> StructuredPotentialSpec {
        StructuredPotentialSpec {
            dim_e0: 1,
            block_dims: vec![2],
            quad_matrix: vec![1.5],
            quad_linear: vec![],
            profiles: vec![RadialProfile::log_cosh()],
        }
    }
}
