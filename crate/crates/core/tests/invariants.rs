use std::sync::Arc;

use heatflow::applications::{CorrelationEstimate, SetKind, SetShape, SymmetricSet};
use heatflow::brenier::{quantile_map, Density1D};
use heatflow::gaussian::{brenier_linear, contraction_certificate, mehler_quadratic, GaussianPair};
use heatflow::potentials::SubspaceDecomposition;
use heatflow::semigroup::{Axis, BoundaryCondition, Generator, Grid, GridField, GridPotential, Solver};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn semigroup_keeps_positivity_mass_and_bounds(a in 0.5f64..3.0, b in 0.1f64..4.0, c in 0.0f64..1.0, steps in 1usize..40) {
        let grid = Arc::new(Grid::line(Axis::full_with_spacing(6.0, 0.05)).unwrap());
        let pot = GridPotential::new(move |x| 0.5 * a * x[0] * x[0], move |x| vec![a * x[0]]);
        let mut solver = Solver::new(Generator::build(grid.clone(), &pot, BoundaryCondition::Reflecting).unwrap(), 1e-2).unwrap();
        let f0 = GridField::from_fn(grid, BoundaryCondition::Reflecting, move |x| (-0.5 * b * x[0] * x[0] - c * x[0].abs()).exp()).unwrap();
        let m0 = solver.mean(&f0.values);
        let hi = f0.max();
        let mut f = f0.values.clone();
        for _ in 0..steps {
            solver.advance(&mut f).unwrap();
        }
        let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(lo >= -1e-12);
        prop_assert!(f.iter().all(|v| *v <= hi * (1.0 + 1e-12)));
        prop_assert!((solver.mean(&f) - m0).abs() <= 1e-11 * m0);
    }

    #[test]
    fn mehler_matrix_starts_at_b_and_shrinks(seed in any::<u64>(), n in 1usize..4, commuting in any::<bool>(), t in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = GaussianPair::random(&mut rng, n, commuting, 0.5, 3.0);
        let m0 = mehler_quadratic(&pair, 0.0).unwrap();
        prop_assert!((&m0 - pair.b()).norm() <= 1e-10 * pair.b().norm());
        let m1 = mehler_quadratic(&pair, t).unwrap();
        let m2 = mehler_quadratic(&pair, 2.0 * t).unwrap();
        let eig = m1.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-12);
        prop_assert!(m2.norm() <= m1.norm() + 1e-12);
    }

    #[test]
    fn linear_brenier_map_is_a_symmetric_contraction(seed in any::<u64>(), n in 1usize..5, commuting in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = GaussianPair::random(&mut rng, n, commuting, 0.5, 3.0);
        let c = brenier_linear(&pair).unwrap();
        prop_assert!((&c - c.transpose()).norm() <= 1e-12 * c.norm());
        prop_assert!(c.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        prop_assert!(contraction_certificate(&c) <= 1.0 + 1e-10);
        let a_inv = pair.a().clone().try_inverse().unwrap();
        let target: DMatrix<f64> = (pair.a() + pair.b()).try_inverse().unwrap();
        prop_assert!((&c * a_inv * &c - &target).norm() <= 1e-9 * target.norm());
    }

    #[test]
    fn self_correlation_gap_is_bernoulli_variance(inside in 1u64..100_000, outside in 1u64..100_000) {
        let e = CorrelationEstimate::from_counts([inside, 0, 0, outside]);
        let p = inside as f64 / (inside + outside) as f64;
        prop_assert!((e.gap - p * (1.0 - p)).abs() <= 1e-12);
        prop_assert!(e.nonnegative_within(0.0));
    }

    #[test]
    fn correlation_gap_is_symmetric(c in prop::array::uniform4(0u64..10_000)) {
        prop_assume!(c.iter().sum::<u64>() > 0);
        let ab = CorrelationEstimate::from_counts(c);
        let ba = CorrelationEstimate::from_counts([c[0], c[2], c[1], c[3]]);
        prop_assert!((ab.gap - ba.gap).abs() <= 1e-15);
        prop_assert!((ab.stderr - ba.stderr).abs() <= 1e-12 * (1.0 + ab.stderr));
        prop_assert!(ab.gap.abs() <= 0.25 + 1e-15);
    }

    #[test]
    fn gaussian_quantile_map_is_monotone_and_affine(m1 in -1.0f64..1.0, s1 in 0.5f64..2.0, m2 in -1.0f64..1.0, s2 in 0.5f64..2.0) {
        let src = Density1D::on_line(move |x| -0.5 * ((x - m1) / s1).powi(2)).unwrap();
        let dst = Density1D::on_line(move |x| -0.5 * ((x - m2) / s2).powi(2)).unwrap();
        let xs: Vec<f64> = (0..41).map(|k| m1 - 2.0 * s1 + 0.1 * s1 * k as f64).collect();
        let map = quantile_map(&src, &dst, &xs).unwrap();
        for w in map.ys().windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for (x, y) in xs.iter().zip(map.ys()) {
            prop_assert!((y - (m2 + s2 / s1 * (x - m1))).abs() <= 1e-6);
        }
    }

    #[test]
    fn convex_symmetric_sets_are_symmetric_and_convex(
        r in 0.2f64..2.0,
        w in 0.1f64..1.5,
        x in prop::array::uniform3(-2.0f64..2.0),
        y in prop::array::uniform3(-2.0f64..2.0),
        lambda in 0.0f64..1.0,
    ) {
        let dec = SubspaceDecomposition::new(1, vec![2]).unwrap();
        let shape = SetShape::Intersection {
            parts: vec![
                SetShape::Slab { normal: vec![1.0, 0.5, -0.25], half_width: w },
                SetShape::BlockBall { subspace: 1, radius: r, metric: None },
            ],
        };
        let set = SymmetricSet::new("probe", shape, SetKind::ConvexSymmetricB, dec).unwrap();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(set.contains(&x), set.contains(&neg));
        if set.contains(&x) && set.contains(&y) {
            let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            prop_assert!(set.contains(&z));
        }
    }
}
