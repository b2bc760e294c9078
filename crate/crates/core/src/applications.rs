//! Correlation inequalities for structured measures, checked by Monte Carlo
//! and quadrature, with transport maps used to move expectations between
//! measures.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::brenier::{Density1D, MonotoneMap1D};
use crate::error::{Error, Result};
use crate::numerics::{gauss_legendre_composite, Pchip};
use crate::potentials::{GroupElement, RadialProfile, StructuredPotential, SubspaceDecomposition};

/// Nodes of each radial inverse-CDF table.
pub const INVERSE_CDF_NODES: usize = 100_000;
/// Samples per Monte-Carlo batch (each batch has its own RNG stream).
pub const BATCH: usize = 1 << 14;
/// Default number of levels in the layer-cake reduction.
pub const LAYER_LEVELS: usize = 32;

/// Membership primitives. Subspace `0` is `E₀`, subspace `i ≥ 1` is `Eᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetShape {
    /// `|x| ≤ radius`.
    Ball { radius: f64 },
    /// `|⟨normal, x⟩| ≤ half_width`.
    Slab { normal: Vec<f64>, half_width: f64 },
    /// `|xⱼ| ≤ half_widths[j]`.
    Box { half_widths: Vec<f64> },
    /// `xᵀMx ≤ 1` with `M` row-major.
    Ellipsoid { matrix: Vec<f64> },
    /// `|Proj x| ≤ radius` on one subspace; on `E₀` an optional row-major
    /// metric turns the norm into `√(yᵀMy)`.
    BlockBall {
        subspace: usize,
        radius: f64,
        #[serde(default)]
        metric: Option<Vec<f64>>,
    },
    Intersection { parts: Vec<SetShape> },
    Union { parts: Vec<SetShape> },
}

impl SetShape {
    fn check(&self, dec: &SubspaceDecomposition) -> Result<()> {
        let n = dec.dim();
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be positive and finite")))
            }
        };
        match self {
            SetShape::Ball { radius } => positive(*radius, "ball radius"),
            SetShape::Slab { normal, half_width } => {
                if normal.len() != n || normal.iter().all(|v| *v == 0.0) {
                    return Err(Error::InvalidArgument("slab normal must be a nonzero vector of the ambient dimension".into()));
                }
                positive(*half_width, "slab half-width")
            }
            SetShape::Box { half_widths } => {
                if half_widths.len() != n {
                    return Err(Error::InvalidArgument("box needs one half-width per coordinate".into()));
                }
                half_widths.iter().try_for_each(|w| positive(*w, "box half-width"))
            }
            SetShape::Ellipsoid { matrix } => {
                if matrix.len() != n * n {
                    return Err(Error::InvalidArgument("ellipsoid matrix has the wrong size".into()));
                }
                check_pd(&DMatrix::from_row_slice(n, n, matrix), "ellipsoid matrix")
            }
            SetShape::BlockBall { subspace, radius, metric } => {
                if *subspace > dec.num_blocks() || (*subspace == 0 && dec.dim_e0() == 0) {
                    return Err(Error::InvalidArgument(format!("subspace {subspace} does not exist")));
                }
                if let Some(m) = metric {
                    let d = dec.dim_e0();
                    if *subspace != 0 || m.len() != d * d {
                        return Err(Error::InvalidArgument("a metric is only allowed on E₀ and must be dim E₀ squared".into()));
                    }
                    check_pd(&DMatrix::from_row_slice(d, d, m), "block metric")?;
                }
                positive(*radius, "block radius")
            }
            SetShape::Intersection { parts } | SetShape::Union { parts } => {
                if parts.is_empty() {
                    return Err(Error::InvalidArgument("set combination needs at least one part".into()));
                }
                parts.iter().try_for_each(|p| p.check(dec))
            }
        }
    }

    fn contains(&self, dec: &SubspaceDecomposition, x: &[f64]) -> bool {
        match self {
            SetShape::Ball { radius } => x.iter().map(|v| v * v).sum::<f64>() <= radius * radius,
            SetShape::Slab { normal, half_width } => normal.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs() <= *half_width,
            SetShape::Box { half_widths } => x.iter().zip(half_widths).all(|(v, w)| v.abs() <= *w),
            SetShape::Ellipsoid { matrix } => quad_form(matrix, x) <= 1.0,
            SetShape::BlockBall { subspace, radius, metric } => {
                let sq = if *subspace == 0 {
                    let y = &x[..dec.dim_e0()];
                    match metric {
                        Some(m) => quad_form(m, y),
                        None => y.iter().map(|v| v * v).sum(),
                    }
                } else {
                    dec.block_norm(x, subspace - 1).powi(2)
                };
                sq <= radius * radius
            }
            SetShape::Intersection { parts } => parts.iter().all(|p| p.contains(dec, x)),
            SetShape::Union { parts } => parts.iter().any(|p| p.contains(dec, x)),
        }
    }
}

fn quad_form(m: &[f64], y: &[f64]) -> f64 {
    let d = y.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += y[i] * m[i * d + j] * y[j];
        }
    }
    s
}

fn check_pd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if (m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm()) {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    if !(m.clone().symmetric_eigen().eigenvalues.min() > 0.0) {
        return Err(Error::InvalidArgument(format!("{what} is not positive definite")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    /// Convex, centrally symmetric, depending on `Eᵢ` only through `|Pᵢx|`.
    ConvexSymmetricB,
    /// Centrally symmetric and closed under the block shrinkings.
    StarShapedA,
}

/// A set with its hypothesis class.
#[derive(Debug, Clone)]
pub struct SymmetricSet {
    pub name: String,
    pub shape: SetShape,
    pub kind: SetKind,
    decomposition: SubspaceDecomposition,
    /// Metric of the ellipsoid norm on `E₀` used by the shrinking audit.
    ellipsoid: Option<DMatrix<f64>>,
}

impl SymmetricSet {
    pub fn new(name: impl Into<String>, shape: SetShape, kind: SetKind, decomposition: SubspaceDecomposition) -> Result<Self> {
        shape.check(&decomposition)?;
        Ok(Self { name: name.into(), shape, kind, decomposition, ellipsoid: None })
    }

    /// Ellipsoid norm on `E₀` for the shrinking structure (Euclidean by default).
    pub fn with_ellipsoid(mut self, metric: DMatrix<f64>) -> Result<Self> {
        let d = self.decomposition.dim_e0();
        if metric.nrows() != d || metric.ncols() != d {
            return Err(Error::InvalidArgument("ellipsoid metric must act on E₀".into()));
        }
        check_pd(&metric, "ellipsoid metric")?;
        self.ellipsoid = Some(metric);
        Ok(self)
    }

    pub fn decomposition(&self) -> &SubspaceDecomposition {
        &self.decomposition
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.shape.contains(&self.decomposition, x)
    }

    fn e0_norm(&self, y: &[f64]) -> f64 {
        match &self.ellipsoid {
            Some(m) => quad_form(m.as_slice(), y).sqrt(),
            None => y.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Random witnesses for the defining symmetries, taken at member points
    /// among `points` (row-major, `dim` per point).
    pub fn audit(&self, points: &[f64], seed: u64) -> SetAudit {
        let dec = &self.decomposition;
        let n = dec.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = SetAudit::default();
        let members: Vec<&[f64]> = points.chunks(n).filter(|x| self.contains(x)).collect();
        for (k, x) in points.chunks(n).enumerate() {
            report.checked += 1;
            let inside = self.contains(x);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            if self.contains(&neg) != inside {
                report.symmetry += 1;
            }
            if self.kind == SetKind::ConvexSymmetricB && dec.num_blocks() > 0 {
                let g = GroupElement::random_rotation(dec, &mut rng);
                if let Ok(y) = g.apply(dec, x) {
                    if self.contains(&y) != inside {
                        report.rotation += 1;
                    }
                }
            }
            if !inside {
                continue;
            }
            match self.kind {
                SetKind::ConvexSymmetricB => {
                    if members.len() > 1 {
                        let other = members[(k * 7919 + 1) % members.len()];
                        let s: f64 = rng.random();
                        let z: Vec<f64> = x.iter().zip(other).map(|(a, b)| (1.0 - s) * a + s * b).collect();
                        if !self.contains(&z) {
                            report.convexity += 1;
                        }
                    }
                }
                SetKind::StarShapedA => {
                    let mut y = x.to_vec();
                    let d0 = dec.dim_e0();
                    if d0 > 0 {
                        let bound = self.e0_norm(&x[..d0]);
                        let dir: Vec<f64> = (0..d0).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = self.e0_norm(&dir);
                        let scale = if norm > 0.0 { rng.random::<f64>() * bound / norm } else { 0.0 };
                        for (yi, di) in y[..d0].iter_mut().zip(&dir) {
                            *yi = scale * di;
                        }
                    }
                    for i in 0..dec.num_blocks() {
                        let t: f64 = rng.random_range(-1.0..=1.0);
                        for c in dec.block_range(i) {
                            y[c] *= t;
                        }
                    }
                    if !self.contains(&y) {
                        report.shrinking += 1;
                    }
                }
            }
        }
        report
    }
}

/// Violation counts of [`SymmetricSet::audit`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SetAudit {
    pub checked: usize,
    pub symmetry: usize,
    pub rotation: usize,
    pub convexity: usize,
    pub shrinking: usize,
}

impl SetAudit {
    pub fn passed(&self) -> bool {
        self.symmetry + self.rotation + self.convexity + self.shrinking == 0
    }
}

#[derive(Debug, Clone)]
struct RadiusTable {
    density: Arc<Density1D>,
    table: Pchip,
    u_max: f64,
}

impl RadiusTable {
    fn new(dim: usize, profile: RadialProfile) -> Result<Self> {
        let density = Density1D::radial(dim, move |r| profile.value(r))?;
        let m = INVERSE_CDF_NODES;
        let us: Vec<f64> = (0..m).map(|k| k as f64 / m as f64).collect();
        let rs = us
            .par_iter()
            .map(|&u| if u == 0.0 { Ok(density.domain().0) } else { density.quantile(u) })
            .collect::<Result<Vec<f64>>>()?;
        let u_max = us[m - 1];
        Ok(Self { density: Arc::new(density), table: Pchip::new(us, rs)?, u_max })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u <= self.u_max {
            self.table.eval(u)
        } else {
            self.density.quantile(u).unwrap_or(self.density.domain().1)
        }
    }
}

/// Exact sampler for `e^{−U}` with `U` structured: Gaussian on `E₀`,
/// uniform direction times tabulated radius on each block.
#[derive(Debug, Clone)]
pub struct ProductSampler {
    decomposition: SubspaceDecomposition,
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    radii: Vec<RadiusTable>,
    pub seed: u64,
}

impl ProductSampler {
    pub fn new(potential: &StructuredPotential, seed: u64) -> Result<Self> {
        let dec = potential.decomposition().clone();
        let d0 = dec.dim_e0();
        let (mean, chol) = match potential.quad() {
            Some(q) => {
                let a = q.matrix().clone();
                let cov = a.clone().try_inverse().ok_or_else(|| Error::Numerical("quadratic part is singular".into()))?;
                let chol = cov.cholesky().ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?.l();
                let mean = -(a.lu().solve(q.linear()).ok_or_else(|| Error::Numerical("quadratic part is singular".into()))?);
                (mean, chol)
            }
            None => (DVector::zeros(d0), DMatrix::zeros(d0, d0)),
        };
        let radii = dec
            .block_dims()
            .iter()
            .zip(potential.profiles())
            .map(|(&d, p)| RadiusTable::new(d, *p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { decomposition: dec, mean, chol, radii, seed })
    }

    pub fn decomposition(&self) -> &SubspaceDecomposition {
        &self.decomposition
    }

    pub fn dim(&self) -> usize {
        self.decomposition.dim()
    }

    /// RNG of batch `batch` under `seed`.
    pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(batch);
        rng
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let dec = &self.decomposition;
        let d0 = dec.dim_e0();
        if d0 > 0 {
            let z: Vec<f64> = (0..d0).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..d0 {
                out[i] = self.mean[i] + (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum::<f64>();
            }
        }
        for (b, table) in self.radii.iter().enumerate() {
            let range = dec.block_range(b);
            let r = table.draw(rng);
            let mut norm = 0.0;
            while norm == 0.0 {
                for c in range.clone() {
                    out[c] = rng.sample(StandardNormal);
                }
                norm = out[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for c in range {
                out[c] *= r / norm;
            }
        }
    }

    /// `n` samples, row-major; batches follow `seed` and their index.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(BATCH * d).enumerate().for_each(|(b, chunk)| {
            let mut rng = Self::batch_rng(seed, b as u64);
            for x in chunk.chunks_mut(d) {
                self.draw(&mut rng, x);
            }
        });
        out
    }

    /// Reduces `n` samples batch by batch in a fixed order.
    fn fold_batches<T: Send, F, G>(&self, n: usize, seed: u64, map: F, reduce: G) -> T
    where
        F: Fn(&[f64]) -> T + Sync + Send,
        G: Fn(T, T) -> T,
    {
        let d = self.dim();
        let batches = n.div_ceil(BATCH);
        let parts: Vec<T> = (0..batches)
            .into_par_iter()
            .map(|b| {
                let len = BATCH.min(n - b * BATCH);
                let mut rng = Self::batch_rng(seed, b as u64);
                let mut buf = vec![0.0; len * d];
                for x in buf.chunks_mut(d) {
                    self.draw(&mut rng, x);
                }
                map(&buf)
            })
            .collect();
        let mut it = parts.into_iter();
        let first = it.next().expect("at least one batch");
        it.fold(first, reduce)
    }

    /// Kolmogorov-Smirnov distance per `E₀` coordinate and per block radius
    /// against quadrature CDFs.
    pub fn ks_audit(&self, n: usize, seed: u64) -> Result<SamplerAudit> {
        let dec = &self.decomposition;
        let d = self.dim();
        let xs = self.sample(n, seed);
        let mut stats = Vec::new();
        for i in 0..dec.dim_e0() {
            let sd = (0..=i).map(|j| self.chol[(i, j)].powi(2)).sum::<f64>().sqrt();
            let normal = Normal::new(self.mean[i], sd).map_err(|e| Error::Numerical(e.to_string()))?;
            let col: Vec<f64> = xs.chunks(d).map(|x| x[i]).collect();
            stats.push(("e0".to_string() + &i.to_string(), ks_one_sample(col, |v| normal.cdf(v))));
        }
        for (b, table) in self.radii.iter().enumerate() {
            let col: Vec<f64> = xs.chunks(d).map(|x| dec.block_norm(x, b)).collect();
            stats.push((format!("radius{}", b + 1), ks_one_sample(col, |v| table.density.cdf(v))));
        }
        let threshold = 2.0 / (n as f64).sqrt();
        let passed = stats.iter().all(|(_, s)| *s <= threshold);
        Ok(SamplerAudit { n, threshold, statistics: stats, passed })
    }
}

/// KS statistics of a sampler audit.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerAudit {
    pub n: usize,
    pub threshold: f64,
    pub statistics: Vec<(String, f64)>,
    pub passed: bool,
}

fn ks_one_sample(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `μ̂(A∩B) − μ̂(A)μ̂(B)` with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationEstimate {
    pub n: usize,
    pub p_a: f64,
    pub p_b: f64,
    pub p_ab: f64,
    pub gap: f64,
    pub stderr: f64,
    /// Either set has empirical measure 0 or 1.
    pub degenerate: bool,
}

impl CorrelationEstimate {
    /// Four-cell counts `[A∩B, A∖B, B∖A, neither]`.
    pub fn from_counts(c: [u64; 4]) -> Self {
        let n = c.iter().sum::<u64>() as f64;
        let p_ab = c[0] as f64 / n;
        let p_a = (c[0] + c[1]) as f64 / n;
        let p_b = (c[0] + c[2]) as f64 / n;
        // Z = 1_A 1_B − p_B 1_A − p_A 1_B
        let z = [1.0 - p_a - p_b, -p_b, -p_a, 0.0];
        let mean: f64 = (0..4).map(|k| z[k] * c[k] as f64).sum::<f64>() / n;
        let var: f64 = (0..4).map(|k| (z[k] - mean).powi(2) * c[k] as f64).sum::<f64>() / (n - 1.0).max(1.0);
        let degenerate = p_a == 0.0 || p_a == 1.0 || p_b == 0.0 || p_b == 1.0;
        Self { n: n as usize, p_a, p_b, p_ab, gap: p_ab - p_a * p_b, stderr: (var / n).sqrt(), degenerate }
    }

    /// `gap ≥ −k·stderr`.
    pub fn nonnegative_within(&self, k: f64) -> bool {
        self.gap >= -k * self.stderr
    }
}

pub fn estimate_correlation(a: &SymmetricSet, b: &SymmetricSet, sampler: &ProductSampler, n: usize, seed: u64) -> Result<CorrelationEstimate> {
    if n < 10_000 {
        return Err(Error::InvalidArgument("correlation estimates need at least 1e4 samples".into()));
    }
    if a.decomposition().dim() != sampler.dim() || b.decomposition().dim() != sampler.dim() {
        return Err(Error::InvalidArgument("set and sampler dimensions differ".into()));
    }
    let d = sampler.dim();
    let counts = sampler.fold_batches(
        n,
        seed,
        |xs| {
            let mut c = [0u64; 4];
            for x in xs.chunks(d) {
                let (ia, ib) = (a.contains(x), b.contains(x));
                c[match (ia, ib) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                }] += 1;
            }
            c
        },
        |x, y| [x[0] + y[0], x[1] + y[1], x[2] + y[2], x[3] + y[3]],
    );
    Ok(CorrelationEstimate::from_counts(counts))
}

/// What a scenario is expected to show.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// `gap ≥ −2·stderr`.
    Nonnegative,
    /// Independent sets: `|gap| ≤ 2·stderr`.
    Independent,
    /// `|gap − value| ≤ 3·stderr` against a quadrature value.
    Oracle { value: f64 },
}

/// Verdict of a scenario, with the rerun at `4N` applied on failure.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationVerdict {
    pub scenario: String,
    pub expectation: Expectation,
    pub estimate: CorrelationEstimate,
    pub reran: bool,
    pub passed: bool,
}

impl Expectation {
    pub fn holds(&self, e: &CorrelationEstimate) -> bool {
        match *self {
            Expectation::Nonnegative => e.nonnegative_within(2.0),
            Expectation::Independent => e.gap.abs() <= 2.0 * e.stderr,
            Expectation::Oracle { value } => (e.gap - value).abs() <= 3.0 * e.stderr,
        }
    }
}

pub fn check_correlation(scenario: &CorrelationScenario, n: usize, seed: u64) -> Result<CorrelationVerdict> {
    let sampler = ProductSampler::new(&scenario.potential, seed)?;
    let mut estimate = estimate_correlation(&scenario.a, &scenario.b, &sampler, n, seed)?;
    let mut reran = false;
    if !scenario.expectation.holds(&estimate) {
        estimate = estimate_correlation(&scenario.a, &scenario.b, &sampler, 4 * n, seed.wrapping_add(1))?;
        reran = true;
    }
    Ok(CorrelationVerdict {
        scenario: scenario.name.clone(),
        expectation: scenario.expectation,
        passed: scenario.expectation.holds(&estimate),
        estimate,
        reran,
    })
}

/// Header of the correlation results CSV.
pub const CORRELATION_CSV_HEADER: &str = "scenario,N,mu_A,mu_B,mu_AB,gap,stderr,verdict";

impl CorrelationVerdict {
    pub fn csv_row(&self) -> String {
        let e = &self.estimate;
        format!(
            "{},{},{:.10},{:.10},{:.10},{:.6e},{:.6e},{}",
            self.scenario,
            e.n,
            e.p_a,
            e.p_b,
            e.p_ab,
            e.gap,
            e.stderr,
            if self.passed { "pass" } else { "fail" }
        )
    }
}

/// `∫fg dμ − ∫f dμ ∫g dμ` directly and through the layer-cake levels.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionCorrelation {
    pub n: usize,
    pub gap: f64,
    pub stderr: f64,
    pub levels: usize,
    /// Smallest `gap / stderr` over non-degenerate level pairs.
    pub min_level_z: f64,
}

impl FunctionCorrelation {
    pub fn passed(&self) -> bool {
        self.gap >= -2.0 * self.stderr && self.min_level_z >= -2.0 - 2.0 * (self.levels as f64).ln().max(1.0)
    }
}

fn quantile_levels(vals: &[f64], levels: usize) -> Vec<f64> {
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = (1..=levels).map(|k| sorted[(k * sorted.len() / (levels + 1)).min(sorted.len() - 1)]).collect();
    out.dedup();
    out
}

pub fn function_correlation(
    f: impl Fn(&[f64]) -> f64 + Sync,
    g: impl Fn(&[f64]) -> f64 + Sync,
    sampler: &ProductSampler,
    n: usize,
    levels: usize,
    seed: u64,
) -> Result<FunctionCorrelation> {
    if n < 10_000 || levels == 0 {
        return Err(Error::InvalidArgument("need at least 1e4 samples and one level".into()));
    }
    let d = sampler.dim();
    let xs = sampler.sample(n, seed);
    let fv: Vec<f64> = xs.par_chunks(d).map(&f).collect();
    let gv: Vec<f64> = xs.par_chunks(d).map(&g).collect();
    let nf = n as f64;
    let mf = fv.iter().sum::<f64>() / nf;
    let mg = gv.iter().sum::<f64>() / nf;
    let mfg = fv.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>() / nf;
    let z: Vec<f64> = fv.iter().zip(&gv).map(|(a, b)| a * b - mg * a - mf * b).collect();
    let mz = z.iter().sum::<f64>() / nf;
    let var = z.iter().map(|v| (v - mz).powi(2)).sum::<f64>() / (nf - 1.0);
    let fl = quantile_levels(&fv, levels);
    let gl = quantile_levels(&gv, levels);
    let mut min_z = f64::INFINITY;
    for s in &fl {
        for u in &gl {
            let mut c = [0u64; 4];
            for (a, b) in fv.iter().zip(&gv) {
                c[match (*a > *s, *b > *u) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                }] += 1;
            }
            let e = CorrelationEstimate::from_counts(c);
            if !e.degenerate && e.stderr > 0.0 {
                min_z = min_z.min(e.gap / e.stderr);
            }
        }
    }
    Ok(FunctionCorrelation { n, gap: mfg - mf * mg, stderr: (var / nf).sqrt(), levels, min_level_z: min_z })
}

/// Monte-Carlo estimates of `∫Γ dν` (through the map) and `∫Γ dμ`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransferReport {
    pub n: usize,
    pub nu: f64,
    pub nu_stderr: f64,
    pub mu: f64,
    pub mu_stderr: f64,
    /// Samples where the map was undefined.
    pub dropped: usize,
    pub passed: bool,
}

/// Realizes `ν = T_*μ` from `map` and compares expectations of `gamma`.
pub fn transfer_expectation(
    gamma: impl Fn(&[f64]) -> f64 + Sync,
    sampler: &ProductSampler,
    map: impl Fn(&[f64]) -> Option<Vec<f64>> + Sync,
    n: usize,
    seed: u64,
) -> Result<TransferReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let d = sampler.dim();
    let xs = sampler.sample(n, seed);
    let pairs: Vec<(f64, Option<f64>)> = xs.par_chunks(d).map(|x| (gamma(x), map(x).map(|y| gamma(&y)))).collect();
    let stats = |v: &mut dyn Iterator<Item = f64>| {
        let (mut s, mut s2, mut k) = (0.0, 0.0, 0.0);
        for x in v {
            s += x;
            s2 += x * x;
            k += 1.0;
        }
        let mean = s / k;
        let var = ((s2 - k * mean * mean) / (k - 1.0)).max(0.0);
        (mean, (var / k).sqrt())
    };
    let (mu, mu_se) = stats(&mut pairs.iter().map(|p| p.0));
    let (nu, nu_se) = stats(&mut pairs.iter().filter_map(|p| p.1));
    let dropped = pairs.iter().filter(|p| p.1.is_none()).count();
    let combined = (mu_se * mu_se + nu_se * nu_se).sqrt();
    Ok(TransferReport { n, nu, nu_stderr: nu_se, mu, mu_stderr: mu_se, dropped, passed: nu <= mu + 2.0 * combined })
}

/// Whether a map keeps a set inside itself and shrinks every block projection.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvarianceReport {
    pub members: usize,
    pub mapped_inside: usize,
    pub escaped: usize,
    pub fraction: f64,
    pub projection_violations: usize,
    pub max_projection_excess: f64,
    pub passed: bool,
}

pub fn set_invariance_audit(set: &SymmetricSet, points: &[f64], map: impl Fn(&[f64]) -> Option<Vec<f64>> + Sync, tol: f64) -> InvarianceReport {
    let dec = set.decomposition();
    let d = dec.dim();
    let d0 = dec.dim_e0();
    let e0_norm = |x: &[f64]| x[..d0].iter().map(|v| v * v).sum::<f64>().sqrt();
    let results: Vec<Option<(bool, f64)>> = points
        .par_chunks(d)
        .filter(|x| set.contains(x))
        .map(|x| {
            let y = map(x)?;
            let mut excess = if d0 > 0 { e0_norm(&y) - e0_norm(x) } else { f64::NEG_INFINITY };
            for b in 0..dec.num_blocks() {
                excess = excess.max(dec.block_norm(&y, b) - dec.block_norm(x, b));
            }
            Some((set.contains(&y), excess))
        })
        .collect();
    let members = results.len();
    let escaped = results.iter().filter(|r| r.is_none()).count();
    let mapped_inside = results.iter().flatten().filter(|r| r.0).count();
    let projection_violations = results.iter().flatten().filter(|r| r.1 > tol).count();
    let max_projection_excess = results.iter().flatten().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let kept = members - escaped;
    let fraction = if kept == 0 { 1.0 } else { mapped_inside as f64 / kept as f64 };
    InvarianceReport {
        members,
        mapped_inside,
        escaped,
        fraction,
        projection_violations,
        max_projection_excess,
        passed: mapped_inside == kept && projection_violations == 0,
    }
}

/// Range of `Tᵢ(r)/r` of radial maps over a mesh.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoefficientAudit {
    pub min: f64,
    pub max: f64,
    pub passed: bool,
}

pub fn radial_coefficient_audit(maps: &[&MonotoneMap1D], mesh: &[f64], tol: f64) -> CoefficientAudit {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in maps {
        for &r in mesh.iter().filter(|r| **r > 0.0) {
            let a = m.eval(r) / r;
            min = min.min(a);
            max = max.max(a);
        }
    }
    CoefficientAudit { min, max, passed: min >= 0.0 && max <= 1.0 + tol }
}

/// `(γ₂(disk), γ₂(slab), γ₂(disk ∩ slab))` for the disk `|x| ≤ r` and the
/// slab `|x₁| ≤ w`, from a polar quadrature.
pub fn gaussian_disk_slab(r: f64, w: f64) -> (f64, f64, f64) {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let p_disk = -(-0.5 * r * r).exp_m1();
    let p_slab = 2.0 * std.cdf(w) - 1.0;
    // angular fraction of the circle of radius ρ inside the slab
    let frac = |rho: f64| if rho <= w { 1.0 } else { 1.0 - 2.0 / std::f64::consts::PI * (w / rho).acos() };
    let radial = |rho: f64| rho * (-0.5 * rho * rho).exp() * frac(rho);
    let split = w.min(r);
    let mut p_both = gauss_legendre_composite(&radial, 0.0, split, 64, 20);
    if r > split {
        // ρ = w cosh s removes the square-root singularity at ρ = w
        let top = (r / w).acosh();
        p_both += gauss_legendre_composite(&|s: f64| radial(w * s.cosh()) * w * s.sinh(), 0.0, top, 64, 20);
    }
    (p_disk, p_slab, p_both)
}

/// A shipped correlation experiment.
#[derive(Debug, Clone)]
pub struct CorrelationScenario {
    pub name: String,
    pub potential: StructuredPotential,
    pub a: SymmetricSet,
    pub b: SymmetricSet,
    pub expectation: Expectation,
}

fn diag(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut m = vec![0.0; n * n];
    for (i, x) in v.iter().enumerate() {
        m[i * n + i] = *x;
    }
    m
}

/// The shipped suite. `mixed-e0-radial` and `sqrt-radial` have
/// `0 < dim E₀ < n`.
pub fn shipped_scenarios() -> Result<Vec<CorrelationScenario>> {
    use crate::potentials::QuadraticForm;
    use SetKind::{ConvexSymmetricB as B, StarShapedA as A};
    let mut out = Vec::new();
    let mut push = |name: &str, potential: StructuredPotential, a: (SetShape, Option<DMatrix<f64>>), b: SetShape, expectation: Expectation| -> Result<()> {
        let dec = potential.decomposition().clone();
        let mut sa = SymmetricSet::new(format!("{name}/A"), a.0, A, dec.clone())?;
        if let Some(m) = a.1 {
            sa = sa.with_ellipsoid(m)?;
        }
        let sb = SymmetricSet::new(format!("{name}/B"), b, B, dec)?;
        out.push(CorrelationScenario { name: name.into(), potential, a: sa, b: sb, expectation });
        Ok(())
    };

    let (pa, pb, pab) = gaussian_disk_slab(1.0, 1.0);
    push(
        "gaussian-disk-slab",
        StructuredPotential::standard_gaussian(2)?,
        (SetShape::Ball { radius: 1.0 }, None),
        SetShape::Slab { normal: vec![1.0, 0.0], half_width: 1.0 },
        Expectation::Oracle { value: pab - pa * pb },
    )?;

    push(
        "independent-slabs",
        StructuredPotential::product(vec![RadialProfile::log_cosh(), RadialProfile::log_cosh()])?,
        (SetShape::BlockBall { subspace: 1, radius: 1.0, metric: None }, None),
        SetShape::BlockBall { subspace: 2, radius: 0.7, metric: None },
        Expectation::Independent,
    )?;

    let ell = vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 0.6];
    push(
        "gaussian-ellipsoid-box",
        StructuredPotential::standard_gaussian(3)?,
        (SetShape::Ellipsoid { matrix: ell.clone() }, Some(DMatrix::from_row_slice(3, 3, &ell))),
        SetShape::Box { half_widths: vec![0.6, 1.5, 0.9] },
        Expectation::Nonnegative,
    )?;

    push(
        "logcosh-blocks",
        StructuredPotential::new(SubspaceDecomposition::new(0, vec![2, 2])?, None, vec![RadialProfile::log_cosh(), RadialProfile::log_cosh()])?,
        (
            SetShape::Union {
                parts: vec![
                    SetShape::BlockBall { subspace: 1, radius: 0.8, metric: None },
                    SetShape::BlockBall { subspace: 2, radius: 0.6, metric: None },
                ],
            },
            None,
        ),
        SetShape::Ball { radius: 2.0 },
        Expectation::Nonnegative,
    )?;

    let q = QuadraticForm::centered(DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]))?;
    let metric = vec![1.0, 0.3, 0.3, 2.0];
    push(
        "mixed-e0-radial",
        StructuredPotential::new(
            SubspaceDecomposition::new(2, vec![2, 1])?,
            Some(q),
            vec![RadialProfile::log_cosh(), RadialProfile::sqrt_one_plus()],
        )?,
        (
            SetShape::Union {
                parts: vec![
                    SetShape::Intersection {
                        parts: vec![
                            SetShape::BlockBall { subspace: 0, radius: 1.0, metric: Some(metric.clone()) },
                            SetShape::BlockBall { subspace: 1, radius: 1.5, metric: None },
                        ],
                    },
                    SetShape::BlockBall { subspace: 2, radius: 0.4, metric: None },
                ],
            },
            Some(DMatrix::from_row_slice(2, 2, &metric)),
        ),
        SetShape::Intersection {
            parts: vec![
                SetShape::Slab { normal: vec![1.0, -1.0, 0.0, 0.0, 0.0], half_width: 1.0 },
                SetShape::Ellipsoid { matrix: diag(&[0.4, 0.6, 0.25, 0.25, 0.8]) },
            ],
        },
        Expectation::Nonnegative,
    )?;

    push(
        "sqrt-radial",
        StructuredPotential::new(
            SubspaceDecomposition::new(1, vec![3])?,
            Some(QuadraticForm::centered(DMatrix::from_element(1, 1, 1.0))?),
            vec![RadialProfile::sqrt_one_plus()],
        )?,
        (
            SetShape::Intersection {
                parts: vec![
                    SetShape::BlockBall { subspace: 0, radius: 0.7, metric: None },
                    SetShape::BlockBall { subspace: 1, radius: 2.5, metric: None },
                ],
            },
            None,
        ),
        SetShape::Intersection {
            parts: vec![SetShape::Ball { radius: 2.5 }, SetShape::Slab { normal: vec![1.0, 0.0, 0.0, 0.0], half_width: 1.0 }],
        },
        Expectation::Nonnegative,
    )?;

    push(
        "self-correlation",
        StructuredPotential::standard_gaussian(2)?,
        (SetShape::Ball { radius: 1.2 }, None),
        SetShape::Ball { radius: 1.2 },
        Expectation::Nonnegative,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian2() -> (StructuredPotential, SubspaceDecomposition) {
        let p = StructuredPotential::standard_gaussian(2).unwrap();
        let d = p.decomposition().clone();
        (p, d)
    }

    #[test]
    fn same_set_gap_is_variance() {
        let (p, dec) = gaussian2();
        let s = SymmetricSet::new("ball", SetShape::Ball { radius: 1.0 }, SetKind::StarShapedA, dec).unwrap();
        let sampler = ProductSampler::new(&p, 3).unwrap();
        let e = estimate_correlation(&s, &s, &sampler, 50_000, 3).unwrap();
        assert!((e.gap - e.p_a * (1.0 - e.p_a)).abs() < 1e-12);
        assert_eq!(e.p_ab, e.p_a);
    }

    #[test]
    fn degenerate_sets_are_flagged() {
        let (p, dec) = gaussian2();
        let big = SymmetricSet::new("big", SetShape::Ball { radius: 100.0 }, SetKind::StarShapedA, dec.clone()).unwrap();
        let s = SymmetricSet::new("ball", SetShape::Ball { radius: 1.0 }, SetKind::ConvexSymmetricB, dec).unwrap();
        let sampler = ProductSampler::new(&p, 1).unwrap();
        let e = estimate_correlation(&big, &s, &sampler, 20_000, 1).unwrap();
        assert!(e.degenerate);
        assert!(estimate_correlation(&big, &s, &sampler, 100, 1).is_err());
    }

    #[test]
    fn estimates_are_deterministic() {
        let (p, dec) = gaussian2();
        let a = SymmetricSet::new("a", SetShape::Ball { radius: 1.0 }, SetKind::StarShapedA, dec.clone()).unwrap();
        let b = SymmetricSet::new("b", SetShape::Slab { normal: vec![1.0, 1.0], half_width: 0.8 }, SetKind::ConvexSymmetricB, dec).unwrap();
        let sampler = ProductSampler::new(&p, 9).unwrap();
        let e1 = estimate_correlation(&a, &b, &sampler, 40_000, 9).unwrap();
        let e2 = estimate_correlation(&a, &b, &sampler, 40_000, 9).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn audits_catch_broken_structure() {
        let dec = SubspaceDecomposition::new(1, vec![2]).unwrap();
        let p = StructuredPotential::new(
            dec.clone(),
            Some(crate::potentials::QuadraticForm::centered(DMatrix::from_element(1, 1, 1.0)).unwrap()),
            vec![RadialProfile::log_cosh()],
        )
        .unwrap();
        let pts = ProductSampler::new(&p, 2).unwrap().sample(2000, 2);
        let good = SymmetricSet::new("g", SetShape::BlockBall { subspace: 1, radius: 1.0, metric: None }, SetKind::StarShapedA, dec.clone()).unwrap();
        assert!(good.audit(&pts, 1).passed());
        // a slab across a radial block is not rotation invariant
        let slab = SetShape::Slab { normal: vec![0.0, 1.0, 0.0], half_width: 0.5 };
        let bad = SymmetricSet::new("b", slab, SetKind::ConvexSymmetricB, dec.clone()).unwrap();
        assert!(bad.audit(&pts, 1).rotation > 0);
        // mixing E₀ with a block coordinate breaks the shrinking structure
        let tilted = SetShape::Slab { normal: vec![1.0, 1.0, 0.0], half_width: 0.3 };
        let bad = SymmetricSet::new("t", tilted, SetKind::StarShapedA, dec).unwrap();
        assert!(bad.audit(&pts, 5).shrinking > 0);
    }

    #[test]
    fn invariance_audit_flags_shift() {
        let (p, dec) = gaussian2();
        let s = SymmetricSet::new("ball", SetShape::Ball { radius: 1.0 }, SetKind::StarShapedA, dec).unwrap();
        let pts = ProductSampler::new(&p, 4).unwrap().sample(5000, 4);
        let id = set_invariance_audit(&s, &pts, |x| Some(x.to_vec()), 1e-12);
        assert!(id.passed && id.fraction == 1.0);
        let half = set_invariance_audit(&s, &pts, |x| Some(x.iter().map(|v| 0.5 * v).collect()), 1e-12);
        assert!(half.passed);
        let shifted = set_invariance_audit(&s, &pts, |x| Some(x.iter().map(|v| v + 0.3).collect()), 1e-12);
        assert!(!shifted.passed && shifted.fraction < 1.0);
    }

    #[test]
    fn transfer_of_constant_is_equal() {
        let (p, _) = gaussian2();
        let sampler = ProductSampler::new(&p, 6).unwrap();
        let r = transfer_expectation(|_| 2.0, &sampler, |x| Some(x.iter().map(|v| 0.3 * v).collect()), 10_000, 6).unwrap();
        assert_eq!(r.mu, r.nu);
        assert!(r.passed);
    }

    #[test]
    fn coefficient_audit_bounds() {
        let m = MonotoneMap1D::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 1.2]).unwrap();
        let a = radial_coefficient_audit(&[&m], &[0.0, 0.5, 1.0, 2.0], 1e-4);
        assert!(a.passed && a.max <= 0.6 + 1e-12);
        let grow = MonotoneMap1D::new(vec![0.0, 1.0], vec![0.0, 1.1]).unwrap();
        assert!(!radial_coefficient_audit(&[&grow], &[1.0], 1e-4).passed);
    }

    #[test]
    fn scenario_sets_satisfy_their_hypotheses() {
        for sc in shipped_scenarios().unwrap() {
            let pts = ProductSampler::new(&sc.potential, 8).unwrap().sample(4000, 8);
            assert!(sc.a.audit(&pts, 1).passed(), "{}", sc.name);
            assert!(sc.b.audit(&pts, 2).passed(), "{}", sc.name);
        }
        let mixed = shipped_scenarios().unwrap().into_iter().filter(|s| {
            let d = s.potential.decomposition();
            d.dim_e0() > 0 && d.dim_e0() < d.dim()
        });
        assert!(mixed.count() >= 1);
    }

    #[test]
    fn config_shapes_round_trip() {
        let json = r#"{"shape":"intersection","parts":[{"shape":"ball","radius":1.0},{"shape":"block_ball","subspace":1,"radius":0.5}]}"#;
        let s: SetShape = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::from_str::<SetShape>(&serde_json::to_string(&s).unwrap()).unwrap(), s);
        assert!(serde_json::from_str::<SetShape>(r#"{"shape":"ball","radius":1.0,"extra":2}"#).is_err());
    }
}
