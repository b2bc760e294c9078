use std::sync::Arc;

use heatflow::flow::{limit_map, LimitMapConfig};
use heatflow::gaussian::{brenier_linear, GaussianPair};
use heatflow::semigroup::{Axis, BoundaryCondition, Generator, Grid, GridField, GridPotential, Solver};

const A: [f64; 2] = [1.0, 2.0];
const B: [f64; 2] = [1.0, 0.5];

fn seeds() -> Vec<f64> {
    let mut s = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            s.push(-1.5 + 0.75 * i as f64);
            s.push(-1.5 + 0.75 * j as f64);
        }
    }
    s
}

fn flow_map(h: f64) -> Vec<f64> {
    let axis = Axis::full_with_spacing(7.0, h);
    let grid = Arc::new(Grid::plane(axis, axis).unwrap());
    let pot = GridPotential::new(
        |c| 0.5 * (A[0] * c[0] * c[0] + A[1] * c[1] * c[1]),
        |c| vec![A[0] * c[0], A[1] * c[1]],
    );
    let gen = Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap();
    let dt = h / 10.0;
    let mut solver = Solver::new(gen, dt).unwrap();
    let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, |x| (-0.5 * (B[0] * x[0] * x[0] + B[1] * x[1] * x[1])).exp()).unwrap();
    let mut cfg = LimitMapConfig::new(dt, 60.0, vec![2.5, 2.5]);
    cfg.segment_steps = 1000;
    cfg.check_every = 20;
    let lm = limit_map(&mut solver, &f0, &seeds(), &[], &cfg).unwrap();
    assert_eq!(lm.escaped_map_seeds(), 0);
    lm.backward.positions[..seeds().len()].to_vec()
}

#[test]
fn commuting_flow_matches_linear_brenier_map() {
    let pair = GaussianPair::from_rows(2, &[A[0], 0.0, 0.0, A[1]], &[B[0], 0.0, 0.0, B[1]]).unwrap();
    let c = brenier_linear(&pair).unwrap();
    let coarse = flow_map(0.1);
    let fine = flow_map(0.05);
    let x = seeds();
    let mut raw: f64 = 0.0;
    let mut extrapolated: f64 = 0.0;
    for k in 0..x.len() / 2 {
        for r in 0..2 {
            let exact = c[(r, 0)] * x[2 * k] + c[(r, 1)] * x[2 * k + 1];
            let rich = (4.0 * fine[2 * k + r] - coarse[2 * k + r]) / 3.0;
            raw = raw.max((fine[2 * k + r] - exact).abs());
            extrapolated = extrapolated.max((rich - exact).abs());
        }
    }
    assert!(raw < 1e-3, "h=0.05 error {raw:.3e}");
    assert!(extrapolated < 1e-4, "extrapolated error {extrapolated:.3e}");
}
