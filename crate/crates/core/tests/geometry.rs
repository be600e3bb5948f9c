use planet_core::geometry::*;
use planet_core::{BinMask, Grid, Image};
use proptest::prelude::*;

const SIDE: usize = 64;

fn params() -> impl Strategy<Value = AffineParams> {
    (-45.0..45.0f64, -0.1..0.1f64, -0.1..0.1f64, 0.8..1.0f64).prop_map(|(r, sx, sy, s)| AffineParams {
        rotation_deg: r,
        shift_x: sx,
        shift_y: sy,
        scale: s,
    })
}

fn disk(side: usize, radius: f64) -> BinMask {
    let c = (side as f64 - 1.0) / 2.0;
    Grid::from_fn(side, side, |r, col| {
        u8::from((r as f64 - c).powi(2) + (col as f64 - c).powi(2) <= radius * radius)
    })
}

fn max_abs(m: &Affine) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

proptest! {
    #[test]
    fn inverse_cancels_forward(p in params()) {
        let m = to_matrix(&p, 256);
        let residual = invert(&m).unwrap() * m - Affine::identity();
        prop_assert!(max_abs(&residual) < 1e-9);
    }

    #[test]
    fn matrix_product_matches_pointwise_composition(a in params(), b in params(), x in 0.0..255.0f64, y in 0.0..255.0f64) {
        let (ma, mb) = (to_matrix(&a, 256), to_matrix(&b, 256));
        let (x1, y1) = apply(&ma, x, y);
        let (x2, y2) = apply(&mb, x1, y1);
        let (x3, y3) = apply(&(mb * ma), x, y);
        prop_assert!((x2 - x3).abs() < 1e-9 && (y2 - y3).abs() < 1e-9);
    }

    #[test]
    fn center_is_fixed_without_shift(rot in -45.0..45.0f64, scale in 0.8..1.0f64) {
        let p = AffineParams { rotation_deg: rot, shift_x: 0.0, shift_y: 0.0, scale };
        let c = 127.5;
        let (x, y) = apply(&to_matrix(&p, 256), c, c);
        prop_assert!((x - c).abs() < 1e-9 && (y - c).abs() < 1e-9);
    }

    #[test]
    fn mask_warp_scales_area_by_determinant(p in params()) {
        let m = to_matrix(&p, SIDE);
        let src = disk(SIDE, 12.0);
        let warped = warp_mask(&src, &m).unwrap();
        let expected = src.area() as f64 * p.scale * p.scale;
        let rel = (warped.area() as f64 - expected).abs() / expected;
        prop_assert!(rel < 0.08, "area {} vs expected {expected}", warped.area());
    }

    #[test]
    fn bilinear_round_trip_recovers_interior_disk(p in params()) {
        let side = 128;
        let src = disk(side, 30.0);
        let field: Image = src.map(f32::from);
        let m = to_matrix(&p, side);
        let back = warp(&warp(&field, &m, Interp::Bilinear, 0.0).unwrap(), &invert(&m).unwrap(), Interp::Bilinear, 0.0).unwrap();
        let interior = disk(side, 28.0);
        let kept = (0..side * side)
            .filter(|&i| interior.data()[i] == 1 && back.data()[i] >= 0.5)
            .count();
        prop_assert!(kept as f64 >= 0.99 * interior.area() as f64);
    }

    #[test]
    fn successive_warps_match_the_product_matrix(a in params(), b in params()) {
        let side = 128;
        let c = (side as f64 - 1.0) / 2.0;
        let field: Image = Grid::from_fn(side, side, |r, col| {
            let (y, x) = ((r as f64 - c) / side as f64, (col as f64 - c) / side as f64);
            let v = 0.5 + 0.3 * (5.0 * x).sin() * (4.0 * y).cos() - 0.15 * (x * x + y * y);
            ((v * 255.0).round() / 255.0) as f32
        });
        let (ma, mb) = (to_matrix(&a, side), to_matrix(&b, side));
        let twice = warp(&warp(&field, &ma, Interp::Bilinear, 0.0).unwrap(), &mb, Interp::Bilinear, 0.0).unwrap();
        let once = warp(&field, &(mb * ma), Interp::Bilinear, 0.0).unwrap();
        let (inv_b, inv_ab) = (invert(&mb).unwrap(), invert(&(mb * ma)).unwrap());
        let inside = |(x, y): (f64, f64)| x >= 2.0 && y >= 2.0 && x <= side as f64 - 3.0 && y <= side as f64 - 3.0;
        let interior = |i: usize| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            inside(apply(&inv_b, x, y)) && inside(apply(&inv_ab, x, y))
        };
        for i in (0..side * side).filter(|&i| interior(i)) {
            let diff = (twice.data()[i] - once.data()[i]).abs();
            prop_assert!(diff <= 2.0 / 255.0, "pixel {i}: {} vs {}", twice.data()[i], once.data()[i]);
        }
    }

    #[test]
    fn pure_rotation_keeps_disk_area(rot in -45.0..45.0f64) {
        let side = 128;
        let src = disk(side, 40.0);
        let p = AffineParams { rotation_deg: rot, ..AffineParams::IDENTITY };
        let rotated = warp_mask(&src, &to_matrix(&p, side)).unwrap();
        prop_assert!(rotated.is_binary());
        let rel = (rotated.area() as f64 - src.area() as f64).abs() / src.area() as f64;
        prop_assert!(rel <= 0.03, "area {} vs {}", rotated.area(), src.area());
    }

    #[test]
    fn sampled_params_stay_in_range(seed in any::<u64>()) {
        use rand::SeedableRng;
        let cfg = AffineRangeConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = sample_affine(&mut rng, &cfg);
            prop_assert!(cfg.rotation_deg.contains(p.rotation_deg));
            prop_assert!(cfg.scale.contains(p.scale));
            prop_assert!(cfg.shift.contains(p.shift_x.abs()) && cfg.shift.contains(p.shift_y.abs()));
        }
    }
}

#[test]
fn identity_warp_is_exact() {
    let field: Image = Grid::from_fn(SIDE, SIDE, |r, c| ((r * 31 + c * 7) % 13) as f32 / 13.0);
    let m = to_matrix(&AffineParams::IDENTITY, SIDE);
    assert_eq!(warp(&field, &m, Interp::Bilinear, 0.0).unwrap(), field);
    let mask = disk(SIDE, 10.0);
    assert_eq!(warp_mask(&mask, &m).unwrap(), mask);
    let ones = Image::filled(SIDE, SIDE, 1.0);
    assert_eq!(warp(&ones, &m, Interp::Nearest, 0.0).unwrap(), ones);
    assert_eq!(warp(&ones, &m, Interp::Bilinear, 0.0).unwrap(), ones);
}

#[test]
fn quarter_turn_maps_axes() {
    let p = AffineParams {
        rotation_deg: 90.0,
        ..AffineParams::IDENTITY
    };
    let m = to_matrix(&p, 5);
    let (x, y) = apply(&m, 4.0, 2.0);
    assert!((x - 2.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
}

#[test]
fn singular_matrix_is_rejected() {
    let p = AffineParams {
        scale: 0.0,
        ..AffineParams::IDENTITY
    };
    assert!(invert(&to_matrix(&p, 8)).is_err());
}

#[test]
fn identity_ranges_only_draw_identity() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        assert!(sample_affine(&mut rng, &AffineRangeConfig::identity()).is_identity());
    }
}
