use heatflow::applications::gaussian_disk_slab;

/// Cartesian form: slice the slab at `x = r sin θ` and integrate the
/// Gaussian mass of each vertical chord with Simpson's rule.
fn cartesian(r: f64, w: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    let top = (w.min(r) / r).asin();
    let g = |th: f64| {
        let x = r * th.sin();
        let chord = r * th.cos();
        pdf(x) * (2.0 * cdf(chord) - 1.0) * r * th.cos()
    };
    let n = 20_000;
    let h = 2.0 * top / n as f64;
    let mut s = g(-top) + g(top);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * g(-top + h * k as f64);
    }
    s * h / 3.0
}

#[test]
fn polar_quadrature_matches_cartesian_slices() {
    for (r, w) in [(1.0, 0.5), (1.5, 0.3), (0.8, 2.0), (2.5, 1.0), (1.2, 1.2)] {
        let (disk, slab, both) = gaussian_disk_slab(r, w);
        let exact = cartesian(r, w);
        assert!((both - exact).abs() < 1e-12, "r={r} w={w}: {both} vs {exact}");
        assert!(both <= disk.min(slab) + 1e-15);
        assert!(both >= disk * slab, "gaussian correlation fails for r={r} w={w}");
    }
}

