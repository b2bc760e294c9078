//! Quadratic potentials `U = ½⟨Ax, x⟩`, `V = ½⟨Bx, x⟩`: closed-form Hessian
//! `M_t` of `−log P_t(e^{−V})`, the linear flow `dL/dt = M_t L`, and the
//! linear Brenier map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Eigenvalues below this are clipped before taking roots.
pub const EIGEN_CLIP: f64 = 1e-14;

/// Abort threshold for `‖Lᵀ(A + M)L − (A + B)‖_F`.
pub const INVARIANT_ABORT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(format!("{name} is not square")));
    }
    let res = (m - m.transpose()).norm();
    if res > 1e-12 * (1.0 + m.norm()) {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric (residual {res:.3e})")));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `f(S)` for symmetric `S` through its eigendecomposition.
pub fn spectral_apply(s: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(s));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Square root of a symmetric PSD matrix (eigenvalues clipped at `EIGEN_CLIP`).
pub fn sqrt_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    spectral_apply(s, |l| if l < EIGEN_CLIP { 0.0 } else { l.sqrt() })
}

impl GaussianPair {
    /// `A` must be positive definite; `B` positive semi-definite.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&a, "A")?;
        check_symmetric(&b, "B")?;
        if a.nrows() != b.nrows() {
            return Err(Error::InvalidArgument("A and B have different sizes".into()));
        }
        let amin = a.clone().symmetric_eigen().eigenvalues.min();
        if !(amin > 0.0) {
            return Err(Error::InvalidArgument(format!("A is not positive definite (min eig {amin:.3e})")));
        }
        let bmin = b.clone().symmetric_eigen().eigenvalues.min();
        if bmin < -1e-12 {
            return Err(Error::InvalidArgument(format!("B is not positive semi-definite (min eig {bmin:.3e})")));
        }
        Ok(Self { a: symmetrize(&a), b: symmetrize(&b) })
    }

    pub fn from_rows(n: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != n * n || b.len() != n * n {
            return Err(Error::InvalidArgument(format!("expected {} entries per matrix", n * n)));
        }
        Self::new(DMatrix::from_row_slice(n, n, a), DMatrix::from_row_slice(n, n, b))
    }

    /// Random pair sharing an eigenbasis (commuting) or with independent
    /// bases, eigenvalues drawn from `[lo, hi]`.
    pub fn random<R: Rng>(rng: &mut R, n: usize, commuting: bool, lo: f64, hi: f64) -> Self {
        let q1 = random_orthogonal(rng, n);
        let q2 = if commuting { q1.clone() } else { random_orthogonal(rng, n) };
        let mut diag = |q: &DMatrix<f64>| {
            let d = DVector::from_fn(n, |_, _| rng.random_range(lo..hi));
            symmetrize(&(q * DMatrix::from_diagonal(&d) * q.transpose()))
        };
        let a = diag(&q1);
        let b = diag(&q2);
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn commutator_norm(&self) -> f64 {
        commutator(&self.a, &self.b).norm()
    }

    /// Precomputed pieces for repeated `M_t` evaluation.
    pub fn mehler(&self) -> Mehler {
        let eig = SymmetricEigen::new(self.a.clone());
        let b_half = sqrt_psd(&self.b);
        Mehler { q: eig.eigenvectors, lambda: eig.eigenvalues, b_half, n: self.dim() }
    }
}

fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the distribution is Haar
    let signs = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| r[(i, i)].signum()));
    q * signs
}

pub fn commutator(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x * y - y * x
}

/// Evaluator for `M_t = E B^{½}(I + B^{½} Σ_t B^{½})⁻¹ B^{½} E` with
/// `E = e^{−At}` and `Σ_t = A⁻¹(I − e^{−2At})`.
#[derive(Debug, Clone)]
pub struct Mehler {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    b_half: DMatrix<f64>,
    n: usize,
}

impl Mehler {
    fn in_eigenbasis(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.lambda.map(f));
        &self.q * d * self.q.transpose()
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let e = self.in_eigenbasis(|l| (-l * t).exp());
        let sigma = self.in_eigenbasis(|l| -(-2.0 * l * t).exp_m1() / l);
        let inner = DMatrix::identity(self.n, self.n) + &self.b_half * sigma * &self.b_half;
        let inv = match inner.clone().cholesky() {
            Some(c) => c.inverse(),
            None => inner.try_inverse().unwrap_or_else(|| DMatrix::identity(self.n, self.n)),
        };
        let core = &self.b_half * inv * &self.b_half;
        symmetrize(&(&e * core * &e))
    }
}

/// `M_t`, the Hessian of `−log P_t^U(e^{−V})` for the quadratic pair.
pub fn mehler_quadratic(pair: &GaussianPair, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(pair.b.clone());
    }
    let m = pair.mehler().at(t);
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-10 * (1.0 + m.norm()) {
        return Err(Error::Numerical(format!("M_t lost semi-definiteness (min eig {min:.3e})")));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixFlowState {
    pub t: f64,
    #[serde(serialize_with = "ser_matrix")]
    pub m: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub l: DMatrix<f64>,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

#[derive(Debug, Clone)]
pub struct MatrixFlow {
    /// States every `record_every` steps plus the final one.
    pub states: Vec<MatrixFlowState>,
    pub l_inf: DMatrix<f64>,
    /// `T = L_∞⁻¹`.
    pub transport: DMatrix<f64>,
    pub max_residual: f64,
    pub steps: usize,
    pub t_final: f64,
}

impl MatrixFlow {
    pub fn residual(pair: &GaussianPair, state: &MatrixFlowState) -> f64 {
        let lhs = state.l.transpose() * (&pair.a + &state.m) * &state.l;
        (lhs - (&pair.a + &pair.b)).norm()
    }
}

/// RK4 on `dL/dt = M_t L`, `L₀ = I`, until `‖M_t‖_F < stop_tol`.
pub fn integrate_matrix_flow(pair: &GaussianPair, dt: f64, stop_tol: f64, record_every: usize) -> Result<MatrixFlow> {
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(Error::InvalidArgument(format!("dt must lie in (0, 1e-2], got {dt}")));
    }
    if !(stop_tol > 0.0) {
        return Err(Error::InvalidArgument("stop tolerance must be positive".into()));
    }
    let n = pair.dim();
    let mehler = pair.mehler();
    let target = &pair.a + &pair.b;
    let lambda_min = pair.a.clone().symmetric_eigen().eigenvalues.min();
    // ‖M_t‖ ≤ ‖B‖e^{−2λt}; give generous headroom
    let t_cap = 10.0 + ((pair.b.norm() + 1.0) / stop_tol).ln() / lambda_min;
    let max_steps = (t_cap / dt).ceil() as usize;
    let record_every = record_every.max(1);

    let mut l = DMatrix::<f64>::identity(n, n);
    let mut m_now = pair.b.clone();
    let mut t = 0.0;
    let mut states = vec![MatrixFlowState { t, m: m_now.clone(), l: l.clone() }];
    let mut max_residual = (l.transpose() * (&pair.a + &m_now) * &l - &target).norm();
    let mut steps = 0;
    while m_now.norm() >= stop_tol {
        if steps >= max_steps {
            return Err(Error::Numerical(format!("‖M_t‖ did not fall below {stop_tol:e} by t = {t:.2}")));
        }
        let m_half = mehler.at(t + 0.5 * dt);
        let m_next = mehler.at(t + dt);
        let k1 = &m_now * &l;
        let k2 = &m_half * (&l + &k1 * (0.5 * dt));
        let k3 = &m_half * (&l + &k2 * (0.5 * dt));
        let k4 = &m_next * (&l + &k3 * dt);
        l += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        t += dt;
        steps += 1;
        m_now = m_next;
        let res = (l.transpose() * (&pair.a + &m_now) * &l - &target).norm();
        max_residual = max_residual.max(res);
        if !(res <= INVARIANT_ABORT) {
            return Err(Error::Numerical(format!("flow invariant residual {res:.3e} at t = {t:.4}")));
        }
        if steps % record_every == 0 {
            states.push(MatrixFlowState { t, m: m_now.clone(), l: l.clone() });
        }
    }
    if states.last().map(|s| s.t) != Some(t) {
        states.push(MatrixFlowState { t, m: m_now.clone(), l: l.clone() });
    }
    let transport = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("L_∞ is singular".into()))?;
    if !(l.determinant() > 0.0) {
        return Err(Error::Numerical("det L_t lost positivity".into()));
    }
    Ok(MatrixFlow { states, l_inf: l, transport, max_residual, steps, t_final: t })
}

/// `C_opt = A^{½}(A^{½}(A+B)A^{½})^{−½}A^{½}`, checked via `C A⁻¹ Cᵀ = (A+B)⁻¹`.
pub fn brenier_linear(pair: &GaussianPair) -> Result<DMatrix<f64>> {
    let a_half = sqrt_psd(&pair.a);
    let inner = &a_half * (&pair.a + &pair.b) * &a_half;
    let inner_isqrt = spectral_apply(&inner, |l| 1.0 / l.max(EIGEN_CLIP).sqrt());
    let c = symmetrize(&(&a_half * inner_isqrt * &a_half));
    let a_inv = pair.a.clone().try_inverse().ok_or_else(|| Error::Numerical("A is singular".into()))?;
    let ab_inv = (&pair.a + &pair.b)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("A + B is singular".into()))?;
    let res = (&c * a_inv * c.transpose() - &ab_inv).norm();
    if res > 1e-10 * (1.0 + ab_inv.norm()) {
        return Err(Error::Validation(format!("C_opt fails the covariance identity (residual {res:.3e})")));
    }
    Ok(c)
}

/// Largest singular value.
pub fn contraction_certificate(t: &DMatrix<f64>) -> f64 {
    t.singular_values().max()
}

#[derive(Debug, Clone, Serialize)]
pub struct CommutatorReport {
    pub max_commutator: f64,
    /// `(t, ‖L_t − L_tᵀ‖_F)`.
    pub asymmetry: Vec<(f64, f64)>,
    pub final_gap: f64,
    pub l_inf_asymmetry: f64,
    /// `|asym(dt) − asym(dt/2)|`, a step-size error bar on `l_inf_asymmetry`.
    pub l_inf_asymmetry_error: f64,
}

/// Commutators of `M_t` over the mesh, asymmetry of `L_t`, and `‖L_∞⁻¹ − C_opt‖_F`.
pub fn commutator_diagnostics(pair: &GaussianPair, time_mesh: &[f64], dt: f64, stop_tol: f64) -> Result<CommutatorReport> {
    if time_mesh.len() < 2 {
        return Err(Error::InvalidArgument("time mesh needs at least two points".into()));
    }
    let ms = time_mesh.iter().map(|t| mehler_quadratic(pair, *t)).collect::<Result<Vec<_>>>()?;
    let mut max_commutator: f64 = 0.0;
    for i in 0..ms.len() {
        for j in i + 1..ms.len() {
            max_commutator = max_commutator.max(commutator(&ms[i], &ms[j]).norm());
        }
    }
    let flow = integrate_matrix_flow(pair, dt, stop_tol, 1)?;
    let mut asymmetry = Vec::with_capacity(time_mesh.len());
    for &t in time_mesh {
        let idx = ((t / dt).round() as usize).min(flow.states.len() - 1);
        let s = &flow.states[idx];
        asymmetry.push((s.t, (&s.l - s.l.transpose()).norm()));
    }
    let half = integrate_matrix_flow(pair, 0.5 * dt, stop_tol, usize::MAX)?;
    let asym = |l: &DMatrix<f64>| (l - l.transpose()).norm();
    let c_opt = brenier_linear(pair)?;
    Ok(CommutatorReport {
        max_commutator,
        asymmetry,
        final_gap: (&flow.transport - c_opt).norm(),
        l_inf_asymmetry: asym(&flow.l_inf),
        l_inf_asymmetry_error: (asym(&flow.l_inf) - asym(&half.l_inf)).abs(),
    })
}

/// Non-centred pair: `μ ∝ e^{−½⟨A(x−m_μ), x−m_μ⟩}`, `ν = N(m_ν, (A+B)⁻¹)`.
/// The flow is run on the centred pair and the shift restored afterwards.
#[derive(Debug, Clone)]
pub struct AffineGaussian {
    pub pair: GaussianPair,
    pub mean_mu: DVector<f64>,
    pub mean_nu: DVector<f64>,
}

impl AffineGaussian {
    pub fn transport(&self, linear: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.mean_nu + linear * (x - &self.mean_mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn initial_value_and_decay() {
        let pair = GaussianPair::from_rows(2, &[2.0, 0.3, 0.3, 1.0], &[1.0, -0.2, -0.2, 0.5]).unwrap();
        assert_eq!(mehler_quadratic(&pair, 0.0).unwrap(), *pair.b());
        assert!((pair.mehler().at(1e-12) - pair.b()).norm() < 1e-10);
        let m10 = mehler_quadratic(&pair, 10.0).unwrap();
        assert!(m10.norm() <= 1e-6);
    }

    #[test]
    fn scalar_closed_form() {
        let pair = GaussianPair::from_rows(1, &[1.0], &[1.0]).unwrap();
        let t = std::f64::consts::LN_2 / 2.0;
        assert!((mehler_quadratic(&pair, t).unwrap()[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
        for t in [0.1, 0.7, 3.0] {
            let e = (-2.0 * t as f64).exp();
            assert!((mehler_quadratic(&pair, t).unwrap()[(0, 0)] - e / (2.0 - e)).abs() < 1e-14);
        }
    }

    /// Independent oracle: Gauss–Hermite evaluation of
    /// `P_t f(x) = E f(e^{−at}x + √(σ²) Z)` in 1D, then a second difference of `−log`.
    #[test]
    fn mehler_against_gauss_hermite() {
        let (a, b) = (1.7, 0.6);
        let pair = GaussianPair::from_rows(1, &[a], &[b]).unwrap();
        let (nodes, weights) = crate::numerics::gauss_legendre(200);
        let pt = |x: f64, t: f64| {
            let e = (-a * t).exp();
            let s = ((1.0 - (-2.0 * a * t).exp()) / a).sqrt();
            // integrate over z ∈ [−12, 12]
            nodes
                .iter()
                .zip(&weights)
                .map(|(u, w)| {
                    let z = 12.0 * u;
                    let y = e * x + s * z;
                    12.0 * w * (-0.5 * z * z).exp() * (-0.5 * b * y * y).exp()
                })
                .sum::<f64>()
                / (2.0 * std::f64::consts::PI).sqrt()
        };
        for t in [0.05, 0.4, 1.5] {
            let h = 1e-2;
            let z = |x: f64| -pt(x, t).ln();
            let second = (z(h) - 2.0 * z(0.0) + z(-h)) / (h * h);
            let m = mehler_quadratic(&pair, t).unwrap()[(0, 0)];
            assert!((second - m).abs() < 1e-8, "t={t}: {second} vs {m}");
        }
    }

    #[test]
    fn commuting_example_limit() {
        let pair = GaussianPair::from_rows(2, &[1.0, 0.0, 0.0, 2.0], &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let flow = integrate_matrix_flow(&pair, 1e-3, 1e-8, 1000).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.5f64.sqrt()]);
        assert!((&flow.l_inf - expect).norm() < 1e-7);
        assert!(flow.max_residual < 1e-9);
        let c = brenier_linear(&pair).unwrap();
        assert!((flow.transport - c).norm() < 1e-7);
    }

    #[test]
    fn brenier_examples() {
        let id = GaussianPair::from_rows(2, &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = brenier_linear(&id).unwrap();
        assert!((c - DMatrix::identity(2, 2) / 2f64.sqrt()).norm() < 1e-14);
        let eps = GaussianPair::from_rows(2, &[1.0, 0.0, 0.0, 1.0], &[1e-9, 0.0, 0.0, 1e-9]).unwrap();
        assert!((brenier_linear(&eps).unwrap() - DMatrix::identity(2, 2)).norm() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = GaussianPair::random(&mut rng, 2, false, 0.5, 3.0);
        let c = brenier_linear(&pair).unwrap();
        assert!((&c - c.transpose()).norm() < 1e-14);
        assert!(c.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn non_commuting_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = GaussianPair::random(&mut rng, 2, false, 0.5, 3.0);
        assert!(pair.commutator_norm() > 1e-3);
        let report = commutator_diagnostics(&pair, &[0.0, 0.25, 0.5, 1.0, 2.0], 1e-3, 1e-8).unwrap();
        assert!(report.max_commutator > 1e-6);
        assert!(report.asymmetry.iter().any(|(_, a)| *a > 1e-6));
        let scalar = GaussianPair::from_rows(1, &[1.3], &[0.4]).unwrap();
        let r1 = commutator_diagnostics(&scalar, &[0.0, 1.0], 1e-3, 1e-8).unwrap();
        assert_eq!(r1.max_commutator, 0.0);
        assert!(r1.final_gap < 1e-7);
    }

    #[test]
    fn certificate_values() {
        assert!((contraction_certificate(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-15);
        let s = contraction_certificate(&(DMatrix::identity(2, 2) / 2f64.sqrt()));
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GaussianPair::from_rows(2, &[1.0, 0.5, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(GaussianPair::from_rows(1, &[-1.0], &[1.0]).is_err());
        let pair = GaussianPair::from_rows(1, &[1.0], &[1.0]).unwrap();
        assert!(integrate_matrix_flow(&pair, 0.1, 1e-8, 1).is_err());
        assert!(mehler_quadratic(&pair, -1.0).is_err());
    }
}
