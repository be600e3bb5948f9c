//! Affine transforms about the image center: sampling, matrices, inversion and
//! backward warping of images, probability maps and masks.
//!
//! Coordinates are `(x, y) = (column, row)` in pixel units; the anchor of every
//! transform is the grid center `((side - 1) / 2, (side - 1) / 2)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinMask, Grid};

/// 3×3 homogeneous matrix mapping input coordinates to output coordinates.
pub type Affine = Matrix3<f64>;

const SINGULAR_TOL: f64 = 1e-12;
/// Slack allowed when a bilinear sample lands a hair outside the grid.
const EDGE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Signed shift as a fraction of the image side.
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            // keep the stream aligned with the non-degenerate case
            let _: f64 = rng.gen();
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Ranges from which augmentation transforms are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRangeConfig {
    pub rotation_deg: Interval,
    /// Shift magnitude, fraction of the image side.
    pub shift: Interval,
    pub scale: Interval,
    /// Apply a random sign to each sampled shift magnitude.
    pub signed_shift: bool,
}

impl Default for AffineRangeConfig {
    fn default() -> Self {
        Self {
            rotation_deg: Interval::new(-45.0, 45.0),
            shift: Interval::new(0.0, 0.1),
            scale: Interval::new(0.8, 1.0),
            signed_shift: true,
        }
    }
}

impl AffineRangeConfig {
    /// Every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Interval::point(0.0),
            shift: Interval::point(0.0),
            scale: Interval::point(1.0),
            signed_shift: true,
        }
    }

    /// The literal shift bound of one full image side.
    pub fn full_shift() -> Self {
        Self {
            shift: Interval::new(0.0, 1.0),
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == Interval::point(0.0)
            && self.shift == Interval::point(0.0)
            && self.scale == Interval::point(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [
            ("rotation_deg", self.rotation_deg),
            ("shift", self.shift),
            ("scale", self.scale),
        ] {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return Err(Error::Validation(format!(
                    "{name} interval [{}, {}] is empty or not finite",
                    iv.lo, iv.hi
                )));
            }
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::Validation(format!(
                "scale interval must be strictly positive, got lower bound {}",
                self.scale.lo
            )));
        }
        if self.shift.lo < 0.0 {
            return Err(Error::Validation(
                "shift interval holds magnitudes and must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Draws rotation, shift and scale independently and uniformly from `config`.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, config: &AffineRangeConfig) -> AffineParams {
    let rotation_deg = config.rotation_deg.sample(rng);
    let mut shift_x = config.shift.sample(rng);
    let mut shift_y = config.shift.sample(rng);
    let scale = config.scale.sample(rng);
    let sign_x: bool = rng.gen();
    let sign_y: bool = rng.gen();
    if config.signed_shift {
        if sign_x {
            shift_x = -shift_x;
        }
        if sign_y {
            shift_y = -shift_y;
        }
    }
    AffineParams {
        rotation_deg,
        shift_x: shift_x + 0.0,
        shift_y: shift_y + 0.0,
        scale,
    }
}

fn translation(tx: f64, ty: f64) -> Affine {
    Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

/// `T(center) · R(rotation) · S(scale) · T(shift · side) · T(−center)`.
pub fn to_matrix(params: &AffineParams, image_side: usize) -> Affine {
    let c = (image_side as f64 - 1.0) / 2.0;
    let side = image_side as f64;
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let rotate = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
    let scale = Matrix3::new(
        params.scale,
        0.0,
        0.0,
        0.0,
        params.scale,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    translation(c, c)
        * rotate
        * scale
        * translation(params.shift_x * side, params.shift_y * side)
        * translation(-c, -c)
}

pub fn invert(matrix: &Affine) -> Result<Affine> {
    let det = matrix.determinant();
    if !det.is_finite() || det.abs() < SINGULAR_TOL {
        return Err(Error::Singular(det));
    }
    matrix.try_inverse().ok_or(Error::Singular(det))
}

/// Maps a point through `matrix`.
pub fn apply(matrix: &Affine, x: f64, y: f64) -> (f64, f64) {
    let v = matrix * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bilinear,
    Nearest,
}

fn bilinear_at(field: &Grid<f32>, x: f64, y: f64, fill: f32) -> f32 {
    let (h, w) = field.dims();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    if x < -EDGE_TOL || y < -EDGE_TOL || x > max_x + EDGE_TOL || y > max_y + EDGE_TOL {
        return fill;
    }
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    if fx == 0.0 && fy == 0.0 {
        return field.get(y0, x0);
    }
    let top = f64::from(field.get(y0, x0)) * (1.0 - fx) + f64::from(field.get(y0, x1)) * fx;
    let bottom = f64::from(field.get(y1, x0)) * (1.0 - fx) + f64::from(field.get(y1, x1)) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest_index(v: f64, len: usize) -> Option<usize> {
    let r = v.round();
    if r < 0.0 || r > (len - 1) as f64 {
        None
    } else {
        Some(r as usize)
    }
}

fn warp_with<T: Copy + Send + Sync>(
    field: &Grid<T>,
    matrix: &Affine,
    sample: impl Fn(f64, f64) -> T,
) -> Result<Grid<T>> {
    let inverse = invert(matrix)?;
    let (h, w) = field.dims();
    Ok(Grid::from_fn(h, w, |row, col| {
        let (sx, sy) = apply(&inverse, col as f64, row as f64);
        sample(sx, sy)
    }))
}

/// Backward warp: each output pixel samples the input at the inverse-mapped
/// location. Samples falling outside the input take `fill`.
pub fn warp(field: &Grid<f32>, matrix: &Affine, interp: Interp, fill: f32) -> Result<Grid<f32>> {
    if field.is_empty() {
        return Ok(field.clone());
    }
    match interp {
        Interp::Bilinear => warp_with(field, matrix, |x, y| bilinear_at(field, x, y, fill)),
        Interp::Nearest => warp_with(field, matrix, |x, y| {
            match (nearest_index(x, field.width()), nearest_index(y, field.height())) {
                (Some(c), Some(r)) => field.get(r, c),
                _ => fill,
            }
        }),
    }
}

/// Nearest-neighbour warp of a binary mask; uncovered pixels are background.
pub fn warp_mask(mask: &BinMask, matrix: &Affine) -> Result<BinMask> {
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    warp_with(mask, matrix, |x, y| {
        match (nearest_index(x, mask.width()), nearest_index(y, mask.height())) {
            (Some(c), Some(r)) => mask.get(r, c),
            _ => 0,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Affine, b: &Affine) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn identity_params_give_identity_matrix() {
        let m = to_matrix(&AffineParams::IDENTITY, 256);
        assert!(max_abs_diff(&m, &Affine::identity()) < 1e-15);
    }

    #[test]
    fn rotation_fixes_center() {
        let p = AffineParams {
            rotation_deg: 33.0,
            ..AffineParams::IDENTITY
        };
        let m = to_matrix(&p, 256);
        let (x, y) = apply(&m, 127.5, 127.5);
        assert!((x - 127.5).abs() < 1e-12 && (y - 127.5).abs() < 1e-12);
    }

    #[test]
    fn scaled_corner_matches_hand_multiplication() {
        // scale 0.8 about c = 127.5: x' = c + 0.8 (x - c) -> 25.5 for x = 0
        let p = AffineParams {
            scale: 0.8,
            ..AffineParams::IDENTITY
        };
        let (x, y) = apply(&to_matrix(&p, 256), 0.0, 0.0);
        assert!((x - 25.5).abs() < 1e-12);
        assert!((y - 25.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_inverse_is_negated_rotation() {
        let fwd = to_matrix(
            &AffineParams {
                rotation_deg: 20.0,
                ..AffineParams::IDENTITY
            },
            64,
        );
        let back = to_matrix(
            &AffineParams {
                rotation_deg: -20.0,
                ..AffineParams::IDENTITY
            },
            64,
        );
        assert!(max_abs_diff(&invert(&fwd).unwrap(), &back) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(invert(&m), Err(Error::Singular(_))));
        let field = Grid::filled(4, 4, 1.0f32);
        assert!(warp(&field, &m, Interp::Bilinear, 0.0).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Grid::from_fn(17, 17, |_, _| rng.gen::<f32>());
        let id = Affine::identity();
        assert_eq!(warp(&field, &id, Interp::Nearest, 0.0).unwrap(), field);
        let bl = warp(&field, &id, Interp::Bilinear, 0.0).unwrap();
        for (a, b) in bl.data().iter().zip(field.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let ones = Grid::filled(9, 9, 1.0f32);
        assert_eq!(warp(&ones, &id, Interp::Bilinear, 0.0).unwrap(), ones);
    }

    #[test]
    fn collapsed_config_samples_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert!(sample_affine(&mut rng, &AffineRangeConfig::identity()).is_identity());
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cfg = AffineRangeConfig::default();
        let a = sample_affine(&mut ChaCha8Rng::seed_from_u64(11), &cfg);
        let b = sample_affine(&mut ChaCha8Rng::seed_from_u64(11), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn default_ranges_bound_the_draws() {
        let cfg = AffineRangeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut rmin, mut rmax, mut smin, mut smax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut negative_shift = false;
        for _ in 0..100_000 {
            let p = sample_affine(&mut rng, &cfg);
            rmin = rmin.min(p.rotation_deg);
            rmax = rmax.max(p.rotation_deg);
            smin = smin.min(p.scale);
            smax = smax.max(p.scale);
            assert!(p.shift_x.abs() <= 0.1 && p.shift_y.abs() <= 0.1);
            negative_shift |= p.shift_x < 0.0;
        }
        assert!(rmin >= -45.0 && rmax <= 45.0);
        assert!(smin >= 0.8 && smax <= 1.0);
        // the ranges are actually explored
        assert!(rmin < -44.0 && rmax > 44.0 && smin < 0.801 && smax > 0.999);
        assert!(negative_shift);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = AffineRangeConfig::default();
        cfg.scale = Interval::new(0.0, 1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = AffineRangeConfig::default();
        cfg.rotation_deg = Interval::new(5.0, -5.0);
        assert!(cfg.validate().is_err());
        assert!(AffineRangeConfig::full_shift().validate().is_ok());
    }

    #[test]
    fn mask_warp_stays_binary() {
        let mask = Grid::from_fn(32, 32, |r, c| u8::from((r + c) % 3 == 0));
        let m = to_matrix(
            &AffineParams {
                rotation_deg: 17.0,
                shift_x: 0.05,
                shift_y: -0.03,
                scale: 0.9,
            },
            32,
        );
        assert!(warp_mask(&mask, &m).unwrap().is_binary());
    }
}
