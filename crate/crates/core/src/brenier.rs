//! One-dimensional optimal transport by CDF inversion, with the radial
//! reduction `r^{n−1}e^{−ρ(r)}dr` and the checks that go with it.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{adaptive_simpson, gauss_legendre, Pchip};
use crate::potentials::RadialProfile;

/// Panels of the cumulative table.
const CDF_PANELS: usize = 2048;

/// Relative tolerance of each adaptive Simpson call (tails stay accurate).
const SIMPSON_REL_TOL: f64 = 1e-13;

/// Log-density drop (≈ e^{−46} ≈ 1e−20) used to truncate unbounded domains.
const LOG_TAIL_DROP: f64 = 46.0;

type LogFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Normalized density `e^{ℓ(x)} / Z` on `[lo, hi]`, with cumulative tables
/// from both ends so that both tails invert accurately.
#[derive(Clone)]
pub struct Density1D {
    log_density: LogFn,
    lo: f64,
    hi: f64,
    shift: f64,
    breaks: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    total: f64,
    normalization_residual: f64,
}

impl std::fmt::Debug for Density1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Density1D")
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("normalization_residual", &self.normalization_residual)
            .finish()
    }
}

impl Density1D {
    pub fn new(log_density: impl Fn(f64) -> f64 + Send + Sync + 'static, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("density domain [{lo}, {hi}] is not a bounded interval")));
        }
        let log_density: LogFn = Arc::new(log_density);
        let probe = 4 * CDF_PANELS;
        let shift = (0..=probe)
            .map(|i| log_density(lo + (hi - lo) * i as f64 / probe as f64))
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::Domain("log-density is not finite anywhere on the domain".into()));
        }
        let breaks: Vec<f64> = (0..=CDF_PANELS).map(|i| lo + (hi - lo) * i as f64 / CDF_PANELS as f64).collect();
        let ld = log_density.clone();
        let pdf = move |x: f64| {
            let v = (ld(x) - shift).exp();
            if v.is_finite() {
                v
            } else {
                0.0
            }
        };
        let panel_tol = 1e-16 / CDF_PANELS as f64;
        let pieces: Vec<f64> = breaks
            .windows(2)
            .map(|w| adaptive_simpson(&pdf, w[0], w[1], panel_tol, SIMPSON_REL_TOL))
            .collect();
        let mut left = vec![0.0; CDF_PANELS + 1];
        for i in 0..CDF_PANELS {
            left[i + 1] = left[i] + pieces[i];
        }
        let mut right = vec![0.0; CDF_PANELS + 1];
        for i in (0..CDF_PANELS).rev() {
            right[i] = right[i + 1] + pieces[i];
        }
        let total = left[CDF_PANELS];
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numerical("density has no finite positive mass".into()));
        }
        // independent check by a fixed Gauss-Legendre rule
        let (nodes, weights) = gauss_legendre(12);
        let gl: f64 = breaks
            .windows(2)
            .map(|w| {
                let (c, r) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
                nodes.iter().zip(&weights).map(|(u, wt)| wt * r * pdf(c + r * u)).sum::<f64>()
            })
            .sum();
        let normalization_residual = ((gl - total) / total).abs();
        if normalization_residual > 1e-10 {
            return Err(Error::Validation(format!("normalization residual {normalization_residual:.3e} exceeds 1e-10")));
        }
        Ok(Self { log_density, lo, hi, shift, breaks, left, right, total, normalization_residual })
    }

    /// Density on the line, truncated where it has dropped by `e^{−46}` from its peak.
    pub fn on_line(log_density: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let (lo, hi) = tail_bounds(&log_density, -1e3, 1e3)?;
        Self::new(log_density, lo, hi)
    }

    /// Density on `[0, ∞)`, truncated the same way.
    pub fn on_half_line(log_density: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let (_, hi) = tail_bounds(&log_density, 0.0, 1e3)?;
        Self::new(log_density, 0.0, hi)
    }

    /// `r^{n−1} e^{−ρ(r) − v(r)}` on `[0, ∞)`.
    pub fn radial(n: usize, rho: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidArgument("radial dimension must be at least 1".into()));
        }
        let k = (n - 1) as f64;
        Self::on_half_line(move |r| if k == 0.0 { -rho(r) } else { k * r.ln() - rho(r) })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn normalization_residual(&self) -> f64 {
        self.normalization_residual
    }

    pub fn log_density(&self, x: f64) -> f64 {
        (self.log_density)(x)
    }

    /// Normalized density.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        let v = ((self.log_density)(x) - self.shift).exp() / self.total;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }

    fn raw(&self, x: f64) -> f64 {
        self.pdf(x) * self.total
    }

    fn panel(&self, x: f64) -> usize {
        let s = (x - self.lo) / (self.hi - self.lo) * CDF_PANELS as f64;
        (s.floor().max(0.0) as usize).min(CDF_PANELS - 1)
    }

    fn partial(&self, a: f64, b: f64) -> f64 {
        let f = |x: f64| self.raw(x);
        adaptive_simpson(&f, a, b, 1e-16 / CDF_PANELS as f64, SIMPSON_REL_TOL)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.tail(x).0
    }

    /// `(F(x), 1 − F(x))`, each computed from its own end.
    pub fn tail(&self, x: f64) -> (f64, f64) {
        if x <= self.lo {
            return (0.0, 1.0);
        }
        if x >= self.hi {
            return (1.0, 0.0);
        }
        let i = self.panel(x);
        let (a, b) = (self.breaks[i], self.breaks[i + 1]);
        if x - a <= b - x {
            let part = self.partial(a, x);
            ((self.left[i] + part) / self.total, (self.right[i] - part) / self.total)
        } else {
            let rest = self.partial(x, b);
            ((self.left[i + 1] - rest) / self.total, (self.right[i + 1] + rest) / self.total)
        }
    }

    /// `F⁻¹(u)`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if u <= 0.5 {
            self.invert(u, false)
        } else {
            self.invert(1.0 - u, true)
        }
    }

    /// Solves `F(x) = p` (or `1 − F(x) = p` when `upper`), to `1e−12` in
    /// probability or machine resolution in `x`.
    pub fn invert(&self, p: f64, upper: bool) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 {
            return Ok(if upper { self.hi } else { self.lo });
        }
        let target = p * self.total;
        // bracket from the table
        let i = if upper {
            // right[i] is decreasing in i
            let k = self.right.partition_point(|v| *v >= target);
            k.saturating_sub(1).min(CDF_PANELS - 1)
        } else {
            let k = self.left.partition_point(|v| *v < target);
            k.saturating_sub(1).min(CDF_PANELS - 1)
        };
        let (mut a, mut b) = (self.breaks[i], self.breaks[i + 1]);
        let g = |x: f64| -> f64 {
            let (l, r) = self.tail(x);
            if upper {
                p - r
            } else {
                l - p
            }
        };
        let mut x = 0.5 * (a + b);
        for _ in 0..200 {
            let gx = g(x);
            if gx.abs() <= 1e-12 * p.min(1.0).max(1e-300) || gx == 0.0 {
                return Ok(x);
            }
            if gx > 0.0 {
                b = x;
            } else {
                a = x;
            }
            let d = self.pdf(x);
            let newton = x - gx / d;
            x = if d > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if b - a <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
                return Ok(x);
            }
        }
        Ok(x)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).unwrap_or(0.5 * (self.lo + self.hi))
    }
}

fn tail_bounds(log_density: &impl Fn(f64) -> f64, min: f64, max: f64) -> Result<(f64, f64)> {
    // locate the peak on a coarse scan, then walk out until the drop is reached
    let mut best = (f64::NEG_INFINITY, 0.0);
    let (scan_lo, scan_hi) = (min.max(-200.0), max.min(200.0));
    let n = 8000;
    for k in 0..=n {
        let x = scan_lo + (scan_hi - scan_lo) * k as f64 / n as f64;
        let v = log_density(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Domain("log-density is not finite on the scan range".into()));
    }
    let walk = |dir: f64, stop: f64| -> Result<f64> {
        let mut x = best.1;
        let mut step = 0.25;
        loop {
            let next = x + dir * step;
            if (dir > 0.0 && next >= stop) || (dir < 0.0 && next <= stop) {
                if dir < 0.0 && stop == 0.0 {
                    return Ok(0.0);
                }
                return Err(Error::Domain("density tail does not decay within the search range".into()));
            }
            x = next;
            let v = log_density(x);
            if !(v > best.0 - LOG_TAIL_DROP) {
                return Ok(x);
            }
            step *= 1.05;
        }
    };
    let lo = if min >= 0.0 { 0.0 } else { walk(-1.0, min)? };
    let hi = walk(1.0, max)?;
    Ok((lo, hi))
}

/// Non-decreasing sampled map with a monotone cubic interpolant.
#[derive(Debug)]
pub struct MonotoneMap1D {
    interp: Pchip,
    /// Source median, used to fix the constant in the log-derivative identity.
    pub source_median: Option<f64>,
}

impl MonotoneMap1D {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("map samples are not non-decreasing".into()));
        }
        Ok(Self { interp: Pchip::new(xs, ys)?, source_median: None })
    }

    pub fn xs(&self) -> &[f64] {
        self.interp.xs()
    }

    pub fn ys(&self) -> &[f64] {
        self.interp.ys()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.interp.eval(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.interp.derivative(x)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,T")?;
        for (x, y) in self.xs().iter().zip(self.ys()) {
            writeln!(out, "{x:.17e},{y:.17e}")?;
        }
        Ok(())
    }
}

/// `T = F_target⁻¹ ∘ F_source` at `xs` (inverted from the nearer tail).
pub fn quantile_map(source: &Density1D, target: &Density1D, xs: &[f64]) -> Result<MonotoneMap1D> {
    let ys = xs.iter().map(|&x| transport_point(source, target, x)).collect::<Result<Vec<_>>>()?;
    let mut map = MonotoneMap1D::new(xs.to_vec(), ys)?;
    map.source_median = Some(source.median());
    Ok(map)
}

pub fn transport_point(source: &Density1D, target: &Density1D, x: f64) -> Result<f64> {
    let (l, r) = source.tail(x);
    if l <= r {
        target.invert(l, false)
    } else {
        target.invert(r, true)
    }
}

/// Max over samples of `|log T′(x) + ρ(x) − ρ(T(x)) − v(T(x)) − c|`, `c`
/// fixed at the source median; `T′` from centred differences of the samples.
pub fn verify_logderiv_identity(map: &MonotoneMap1D, rho: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> Result<f64> {
    let (xs, ys) = (map.xs(), map.ys());
    if ys.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("map samples are not non-decreasing".into()));
    }
    let mut pts = Vec::new();
    for i in 1..xs.len() - 1 {
        let slope = (ys[i + 1] - ys[i - 1]) / (xs[i + 1] - xs[i - 1]);
        let (x, t) = (xs[i], ys[i]);
        if x <= 0.0 && xs[0] >= 0.0 || !(slope > 0.0) {
            continue;
        }
        let g = slope.ln() + rho(x) - rho(t) - v(t);
        if g.is_finite() {
            pts.push((x, g));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Precondition("too few usable samples for the identity check".into()));
    }
    let median = map.source_median.unwrap_or(xs[xs.len() / 2]);
    let k = pts.partition_point(|(x, _)| *x < median).clamp(1, pts.len() - 1);
    let (x0, g0) = pts[k - 1];
    let (x1, g1) = pts[k];
    let c = g0 + (g1 - g0) * ((median - x0) / (x1 - x0)).clamp(0.0, 1.0);
    Ok(pts.iter().map(|(_, g)| (g - c).abs()).fold(0.0, f64::max))
}

/// Largest slope between consecutive samples.
pub fn lipschitz_estimate(map: &MonotoneMap1D) -> f64 {
    let (xs, ys) = (map.xs(), map.ys());
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug)]
pub struct RadialBrenier {
    pub map: MonotoneMap1D,
    pub dim: usize,
    /// `max (T(x) − x)` over the mesh; `≤ 0` certifies contraction to the origin.
    pub max_excess: f64,
    pub contracts_to_origin: bool,
}

/// Brenier map between `r^{n−1}e^{−ρ}` and `r^{n−1}e^{−ρ−v}`, sampled at
/// `samples` points spanning the source bulk.
pub fn radial_brenier(rho: RadialProfile, v: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static, n: usize, samples: usize) -> Result<RadialBrenier> {
    if n < 1 {
        return Err(Error::InvalidArgument("radial dimension must be at least 1".into()));
    }
    if samples < 3 {
        return Err(Error::InvalidArgument("need at least three samples".into()));
    }
    let source = Density1D::radial(n, move |r| rho.value(r))?;
    let vv = v.clone();
    let target = Density1D::radial(n, move |r| rho.value(r) + vv(r))?;
    let r_max = source.quantile(1.0 - 1e-10)?;
    let xs: Vec<f64> = (0..samples).map(|i| r_max * i as f64 / (samples - 1) as f64).collect();
    if xs.windows(2).any(|w| v(w[1]) < v(w[0]) - 1e-14 * (1.0 + v(w[0]).abs())) {
        return Err(Error::Precondition("v must be non-decreasing on the mesh".into()));
    }
    let map = quantile_map(&source, &target, &xs)?;
    let max_excess = xs.iter().zip(map.ys()).map(|(x, y)| y - x).fold(f64::NEG_INFINITY, f64::max);
    Ok(RadialBrenier { map, dim: n, max_excess, contracts_to_origin: max_excess <= 1e-12 })
}

/// `W₂²` via the quantile coupling, computed as `∫(x − T(x))² dμ_source`.
pub fn wasserstein2_1d(source: &Density1D, target: &Density1D) -> Result<f64> {
    let estimate = |panels: usize| -> Result<f64> {
        let (lo, hi) = source.domain();
        let (nodes, weights) = gauss_legendre(8);
        let mut sum = 0.0;
        for k in 0..panels {
            let a = lo + (hi - lo) * k as f64 / panels as f64;
            let b = lo + (hi - lo) * (k + 1) as f64 / panels as f64;
            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
            for (u, w) in nodes.iter().zip(&weights) {
                let x = c + r * u;
                let t = transport_point(source, target, x)?;
                sum += w * r * source.pdf(x) * (x - t) * (x - t);
            }
        }
        Ok(sum)
    };
    let coarse = estimate(256)?;
    let fine = estimate(512)?;
    if (fine - coarse).abs() > 1e-8 * (1.0 + fine.abs()) {
        return Err(Error::Numerical(format!("W2 quadrature does not settle ({coarse:.12e} vs {fine:.12e})")));
    }
    Ok(fine)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// Per block: `(min aᵢ, max aᵢ)` with `aᵢ(r) = Tᵢ(r)/r`.
    pub ranges: Vec<(f64, f64)>,
    pub violations: usize,
    pub tolerance: f64,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `0 ≤ aᵢ(r) ≤ 1 + tol` for blockwise radial maps on a mesh.
pub fn coordinate_monotonicity_check(maps: &[&MonotoneMap1D], mesh: &[f64], tol: f64) -> MonotonicityReport {
    let mut ranges = Vec::with_capacity(maps.len());
    let mut violations = 0;
    for map in maps {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in mesh.iter().filter(|r| **r > 0.0) {
            let a = map.eval(r) / r;
            lo = lo.min(a);
            hi = hi.max(a);
            if a > 1.0 + tol || a < -tol {
                violations += 1;
            }
        }
        ranges.push((lo, hi));
    }
    MonotonicityReport { ranges, violations, tolerance: tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(var: f64) -> Density1D {
        Density1D::on_line(move |x| -0.5 * x * x / var).unwrap()
    }

    #[test]
    fn cdf_matches_erf_values() {
        let d = normal(1.0);
        // Φ(1) and Φ(−2)
        assert!((d.cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((d.cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-12);
        assert!(d.normalization_residual() < 1e-10);
        let (l, r) = d.tail(6.0);
        assert!(((r - 9.865_876_450_376_946e-10) / r).abs() < 1e-9);
        assert!((l + r - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_scaling() {
        let map = quantile_map(&normal(1.0), &normal(0.5), &[-2.0, 0.0, 1.0, 3.0]).unwrap();
        assert!((map.ys()[2] - 0.5f64.sqrt()).abs() < 1e-10);
        assert!((map.ys()[3] - 3.0 * 0.5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn identity_map() {
        let d = Density1D::on_line(|x: f64| -x.cosh().ln()).unwrap();
        let xs: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let map = quantile_map(&d, &d, &xs).unwrap();
        assert!(xs.iter().zip(map.ys()).all(|(x, y)| (x - y).abs() < 1e-10));
        assert!((lipschitz_estimate(&map) - 1.0).abs() < 1e-8);
        let res = verify_logderiv_identity(&map, |x: f64| x.cosh().ln(), |_| 0.0).unwrap();
        assert!(res < 1e-8);
    }

    #[test]
    fn logderiv_on_gaussian_scaling() {
        let xs: Vec<f64> = (0..801).map(|i| -4.0 + 0.01 * i as f64).collect();
        let map = quantile_map(&normal(1.0), &normal(0.5), &xs).unwrap();
        let res = verify_logderiv_identity(&map, |x| 0.5 * x * x, |x| 0.5 * x * x).unwrap();
        assert!(res < 1e-6, "{res}");
        assert!((lipschitz_estimate(&map) - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn logderiv_converges_under_refinement() {
        let src = Density1D::on_line(|x: f64| -x.cosh().ln()).unwrap();
        let tgt = Density1D::on_line(|x: f64| -x.cosh().ln() - 0.5 * x * x).unwrap();
        let rho = |x: f64| x.cosh().ln();
        let v = |x: f64| 0.5 * x * x;
        let res = |n: usize| {
            let xs: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();
            verify_logderiv_identity(&quantile_map(&src, &tgt, &xs).unwrap(), rho, v).unwrap()
        };
        let coarse = res(100);
        let fine = res(199);
        assert!(fine < 0.5 * coarse, "{coarse} {fine}");
        assert!(res(2001) < 1e-4);
    }

    #[test]
    fn wasserstein_examples() {
        let w = wasserstein2_1d(&normal(1.0), &normal(0.5)).unwrap();
        assert!((w - (1.0 - 0.5f64.sqrt()).powi(2)).abs() < 1e-9, "{w}");
        let shifted = Density1D::on_line(|x| -0.5 * (x - 0.3) * (x - 0.3)).unwrap();
        assert!((wasserstein2_1d(&normal(1.0), &shifted).unwrap() - 0.09).abs() < 1e-9);
        assert!(wasserstein2_1d(&normal(1.0), &normal(1.0)).unwrap() < 1e-18);
    }

    /// Oracle: trapezoid CDFs on 10⁶ nodes and bisection.
    #[test]
    fn half_line_example_against_trapezoid() {
        let src = Density1D::on_half_line(|r| -0.5 * r * r).unwrap();
        let tgt = Density1D::on_half_line(|r| -0.5 * r * r - r).unwrap();
        let (n, top) = (1_000_000usize, 12.0);
        let h = top / n as f64;
        let cum = |f: &dyn Fn(f64) -> f64| {
            let mut c = vec![0.0; n + 1];
            for i in 0..n {
                c[i + 1] = c[i] + 0.5 * h * (f(i as f64 * h) + f((i + 1) as f64 * h));
            }
            let z = c[n];
            c.iter_mut().for_each(|v| *v /= z);
            c
        };
        let cs = cum(&|r: f64| (-0.5 * r * r).exp());
        let ct = cum(&|r: f64| (-0.5 * r * r - r).exp());
        let at = |c: &[f64], x: f64| {
            let i = ((x / h) as usize).min(n - 1);
            c[i] + (c[i + 1] - c[i]) * (x / h - i as f64)
        };
        for x in [0.25, 0.5, 1.0, 2.0, 3.0] {
            let u = at(&cs, x);
            let (mut a, mut b) = (0.0, top);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                if at(&ct, m) < u {
                    a = m
                } else {
                    b = m
                }
            }
            let t = transport_point(&src, &tgt, x).unwrap();
            assert!((t - 0.5 * (a + b)).abs() < 1e-9, "x={x}: {t} vs {}", 0.5 * (a + b));
            assert!(t <= x);
        }
    }

    #[test]
    fn radial_contraction_example() {
        let rb = radial_brenier(RadialProfile::quadratic(), |r: f64| r, 3, 2001).unwrap();
        assert!(rb.contracts_to_origin);
        assert!(lipschitz_estimate(&rb.map) <= 1.0 + 1e-4);
        let id = radial_brenier(RadialProfile::log_cosh(), |_| 0.0, 2, 201).unwrap();
        assert!(id.map.xs().iter().zip(id.map.ys()).all(|(x, y)| (x - y).abs() < 1e-9));
        assert!(radial_brenier(RadialProfile::quadratic(), |r: f64| -r, 2, 101).is_err());
    }

    #[test]
    fn monotonicity_report() {
        let rb = radial_brenier(RadialProfile::log_cosh(), |r: f64| 0.5 * r * r, 5, 501).unwrap();
        let mesh: Vec<f64> = (1..100).map(|i| 0.05 * i as f64).collect();
        let rep = coordinate_monotonicity_check(&[&rb.map], &mesh, 1e-4);
        assert!(rep.passed());
        let grow = MonotoneMap1D::new(mesh.clone(), mesh.iter().map(|r| 1.2 * r).collect()).unwrap();
        assert!(!coordinate_monotonicity_check(&[&grow], &mesh, 1e-4).passed());
    }

    #[test]
    fn csv_dump() {
        let map = MonotoneMap1D::new(vec![0.0, 1.0], vec![0.0, 0.5]).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,T\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
