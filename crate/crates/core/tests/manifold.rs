use asapp_core::manifold::{
    inner, orthonormality_residual, project_tangent, random_frame, random_liftvec, random_stiefel,
    random_tangent_frame, retract, retraction_displacement_bound, validate_retraction_constant, BlockKind, BlockValue,
    ManifoldPoint, TangentVector,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=3).prop_flat_map(|d| (Just(d), d..=10usize))
}

fn point(rng: &mut ChaCha8Rng, d: usize, r: usize) -> ManifoldPoint {
    ManifoldPoint::new(vec![
        (
            BlockKind::Stiefel { d, r },
            BlockValue::Matrix(random_stiefel(rng, d, r)),
        ),
        (BlockKind::Euclidean { r }, BlockValue::Vector(random_liftvec(rng, r))),
    ])
    .unwrap()
}

fn ambient(rng: &mut ChaCha8Rng, d: usize, r: usize, scale: f64) -> TangentVector {
    TangentVector {
        blocks: vec![
            BlockValue::Matrix(random_frame(rng, d, r) * scale),
            BlockValue::Vector(random_liftvec(rng, r) * scale),
        ],
    }
}

fn frame(v: &TangentVector) -> asapp_core::manifold::Frame {
    match v.blocks[0] {
        BlockValue::Matrix(m) => m,
        _ => unreachable!(),
    }
}

proptest! {
    #[test]
    fn projection_is_tangent_and_idempotent((d, r) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = point(&mut rng, d, r);
        let v = ambient(&mut rng, d, r, 1.0);
        let t = project_tangent(&x, &v).unwrap();
        let y = match x.values()[0] { BlockValue::Matrix(m) => m, _ => unreachable!() };
        let yt = y.transpose() * frame(&t);
        let s = yt + yt.transpose();
        prop_assert!(s.norm() < 1e-10);
        let tt = project_tangent(&x, &t).unwrap();
        prop_assert!((frame(&tt) - frame(&t)).norm() < 1e-12);
        // orthogonal projection: <v - Pv, Pv> = 0
        let resid = TangentVector { blocks: vec![BlockValue::Matrix(frame(&v) - frame(&t)), v.blocks[1]] };
        let cross = inner(&resid, &t).unwrap()
            - match (resid.blocks[1], t.blocks[1]) { (BlockValue::Vector(a), BlockValue::Vector(b)) => a.dot(&b), _ => 0.0 };
        prop_assert!(cross.abs() < 1e-10);
    }

    #[test]
    fn retraction_stays_on_manifold((d, r) in dims(), seed in any::<u64>(), log_scale in -4.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = point(&mut rng, d, r);
        let eta = project_tangent(&x, &ambient(&mut rng, d, r, 10f64.powf(log_scale))).unwrap();
        let moved = retract(&x, &eta).unwrap();
        prop_assert!(moved.validate().is_ok());
        let y = match moved.values()[0] { BlockValue::Matrix(m) => m, _ => unreachable!() };
        prop_assert!(orthonormality_residual(&y, d) < 1e-12);
    }

    #[test]
    fn retraction_displacement_is_bounded_by_step((d, r) in dims(), seed in any::<u64>(), log_scale in -4.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = point(&mut rng, d, r);
        let eta = project_tangent(&x, &ambient(&mut rng, d, r, 10f64.powf(log_scale))).unwrap();
        prop_assert!(retraction_displacement_bound(&x, &eta).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn retraction_is_first_order((d, r) in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_stiefel(&mut rng, d, r);
        let xi = random_tangent_frame(&mut rng, &y, d, r);
        let x = ManifoldPoint::new(vec![(BlockKind::Stiefel { d, r }, BlockValue::Matrix(y))]).unwrap();
        let t = 1e-5;
        let eta = TangentVector { blocks: vec![BlockValue::Matrix(xi * t)] };
        let moved = match retract(&x, &eta).unwrap().values()[0] { BlockValue::Matrix(m) => m, _ => unreachable!() };
        // R(tξ) = Y + tξ + O(t²)
        prop_assert!((moved - y - xi * t).norm() <= 10.0 * t * t * (1.0 + xi.norm_squared()));
    }

    #[test]
    fn inner_is_bilinear_and_positive((d, r) in dims(), seed in any::<u64>(), s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ambient(&mut rng, d, r, 1.0);
        let b = ambient(&mut rng, d, r, 1.0);
        prop_assert!(inner(&a, &a).unwrap() > 0.0);
        let lhs = inner(&a.scaled(s), &b).unwrap();
        prop_assert!((lhs - s * inner(&a, &b).unwrap()).abs() < 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((inner(&a, &a).unwrap().sqrt() - a.norm()).abs() < 1e-12);
    }
}

#[test]
fn rotation_blocks_reject_reflections() {
    let mut y = asapp_core::manifold::Frame::zeros();
    y[(0, 0)] = 1.0;
    y[(1, 1)] = -1.0;
    assert!(ManifoldPoint::new(vec![(BlockKind::Rotation { d: 2 }, BlockValue::Matrix(y))]).is_err());
    y[(1, 1)] = 1.0;
    assert!(ManifoldPoint::new(vec![(BlockKind::Rotation { d: 2 }, BlockValue::Matrix(y))]).is_ok());
}

#[test]
fn unit_retraction_constant_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (d, r) in [(2, 2), (2, 4), (3, 3), (3, 5), (3, 10)] {
        let worst = validate_retraction_constant(1.0, d, r, 500, &mut rng).unwrap();
        assert!(worst > 0.5, "ratio {worst} suspiciously small");
    }
    assert!(validate_retraction_constant(0.1, 3, 5, 200, &mut rng).is_err());
}
