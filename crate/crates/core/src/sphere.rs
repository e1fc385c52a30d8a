//! Equirectangular (ERP) conventions, inverse-depth hypotheses, bilinear
//! sampling and spherical sweeping.
//!
//! ERP pixel centres sit at half-integers: row `mu` has elevation
//! `pi/2 - (mu + 0.5) * pi / H` and column `nu` has azimuth
//! `-pi + (nu + 0.5) * 2 pi / W`. With `W` divisible by 4 a quarter yaw turn
//! is an exact column shift.

use nalgebra::{Vector2, Vector3};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rig::{project_fisheye, world_to_camera, CameraRig, FisheyeIntrinsics};

/// Rig-frame point at `elevation`, `azimuth` (rad) and distance `d` (m):
/// `d * [cos e cos a, sin e, cos e sin a]`.
#[inline]
pub fn spherical_point(elevation: f64, azimuth: f64, d: f64) -> Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(d * ce * ca, d * se, d * ce * sa)
}

/// Elevation and azimuth of a rig-frame direction.
pub fn direction_angles(dir: &Vector3<f64>) -> (f64, f64) {
    let horiz = dir.x.hypot(dir.z);
    (dir.y.atan2(horiz), dir.z.atan2(dir.x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErpGrid {
    pub height: usize,
    pub width: usize,
}

impl ErpGrid {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty ERP grid");
        Self { height, width }
    }

    /// Latitude sampling interval `pi / H`.
    pub fn delta_elevation(&self) -> f64 {
        std::f64::consts::PI / self.height as f64
    }

    /// Longitude sampling interval `2 pi / W`.
    pub fn delta_azimuth(&self) -> f64 {
        std::f64::consts::TAU / self.width as f64
    }

    #[inline]
    pub fn elevation(&self, row: usize) -> f64 {
        std::f64::consts::FRAC_PI_2 - (row as f64 + 0.5) * self.delta_elevation()
    }

    #[inline]
    pub fn azimuth(&self, col: usize) -> f64 {
        -std::f64::consts::PI + (col as f64 + 0.5) * self.delta_azimuth()
    }

    /// Unit direction of a pixel centre.
    #[inline]
    pub fn direction(&self, row: usize, col: usize) -> Vector3<f64> {
        spherical_point(self.elevation(row), self.azimuth(col), 1.0)
    }

    /// Unit directions of all pixel centres, row-major.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut dirs = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                dirs.push(self.direction(r, c));
            }
        }
        dirs
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inverse-depth hypotheses, equally spaced from `1/d_min` down to `1/d_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub inverse_depths: Vec<f64>,
}

/// Builds `n` hypotheses spaced linearly in inverse depth.
pub fn make_hypotheses(n: usize, d_min: f64, d_max: f64) -> Result<HypothesisSet> {
    if n < 2 {
        return Err(Error::InvalidHypotheses(format!("need at least 2, got {n}")));
    }
    if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
        return Err(Error::InvalidHypotheses(format!(
            "require 0 < d_min < d_max < inf, got [{d_min}, {d_max}]"
        )));
    }
    let first = 1.0 / d_min;
    let last = 1.0 / d_max;
    let mut inverse_depths: Vec<f64> = (0..n)
        .map(|k| first + (last - first) * k as f64 / (n - 1) as f64)
        .collect();
    inverse_depths[n - 1] = last;
    Ok(HypothesisSet { inverse_depths })
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.inverse_depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverse_depths.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.inverse_depths[0]
    }

    pub fn last(&self) -> f64 {
        self.inverse_depths[self.len() - 1]
    }

    /// Inverse-depth change per unit index (negative).
    pub fn step(&self) -> f64 {
        (self.last() - self.first()) / (self.len() - 1) as f64
    }

    pub fn depth(&self, n: usize) -> f64 {
        1.0 / self.inverse_depths[n]
    }

    /// Continuous index to inverse depth (linear map).
    #[inline]
    pub fn index_to_inverse_depth(&self, index: f64) -> f64 {
        self.first() + index * self.step()
    }

    /// Inverse depth to continuous index (not clamped).
    #[inline]
    pub fn inverse_depth_to_index(&self, inverse_depth: f64) -> f64 {
        (inverse_depth - self.first()) / self.step()
    }

    pub fn index_to_depth(&self, index: f64) -> f64 {
        1.0 / self.index_to_inverse_depth(index)
    }

    pub fn depth_to_index(&self, depth: f64) -> f64 {
        self.inverse_depth_to_index(1.0 / depth)
    }

    /// Inverse-depth bounds `(1/d_max, 1/d_min)`.
    pub fn inverse_depth_bounds(&self) -> (f64, f64) {
        (self.last(), self.first())
    }
}

/// Four bilinear taps with pixel-centre alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Taps {
    /// `None` when any tap would fall outside a `rows x cols` image, i.e.
    /// unless `u in [0, cols-1]` and `v in [0, rows-1]`.
    #[inline]
    pub fn new(rows: usize, cols: usize, u: f64, v: f64) -> Option<Self> {
        if !(u >= 0.0 && v >= 0.0 && u <= (cols - 1) as f64 && v <= (rows - 1) as f64) {
            return None;
        }
        let mut x0 = u.floor() as usize;
        let mut y0 = v.floor() as usize;
        // On the last row/column use the cell to the left/above.
        if x0 + 1 >= cols && cols > 1 {
            x0 = cols - 2;
        }
        if y0 + 1 >= rows && rows > 1 {
            y0 = rows - 2;
        }
        let x1 = (x0 + 1).min(cols - 1);
        let y1 = (y0 + 1).min(rows - 1);
        Some(Self {
            x0,
            y0,
            x1,
            y1,
            fx: u - x0 as f64,
            fy: v - y0 as f64,
        })
    }

    /// As [`Taps::new`], additionally requiring all four tap pixels to lie
    /// inside the field of view of `intr`.
    #[inline]
    pub fn in_fov(intr: &FisheyeIntrinsics, u: f64, v: f64) -> Option<Self> {
        let (rows, cols) = intr.image_size;
        let t = Self::new(rows, cols, u, v)?;
        let corners = [(t.x0, t.y0), (t.x1, t.y0), (t.x0, t.y1), (t.x1, t.y1)];
        corners
            .iter()
            .all(|&(x, y)| intr.pixel_in_fov(x as f64, y as f64))
            .then_some(t)
    }

    #[inline]
    pub fn sample(&self, img: &ArrayView2<f64>) -> f64 {
        let a = img[[self.y0, self.x0]];
        let b = img[[self.y0, self.x1]];
        let c = img[[self.y1, self.x0]];
        let d = img[[self.y1, self.x1]];
        let top = a + self.fx * (b - a);
        let bot = c + self.fx * (d - c);
        top + self.fy * (bot - top)
    }

    /// `(d/du, d/dv)`; right-continuous on cell boundaries.
    #[inline]
    pub fn gradient(&self, img: &ArrayView2<f64>) -> (f64, f64) {
        let a = img[[self.y0, self.x0]];
        let b = img[[self.y0, self.x1]];
        let c = img[[self.y1, self.x0]];
        let d = img[[self.y1, self.x1]];
        let du = (1.0 - self.fy) * (b - a) + self.fy * (d - c);
        let dv = (1.0 - self.fx) * (c - a) + self.fx * (d - b);
        (du, dv)
    }
}

/// Bilinear sample of every channel at `pixel = (u, v)`.
///
/// Out-of-bounds samples return zeros with `valid = false`.
pub fn sample_bilinear(image: &ArrayView3<f64>, pixel: Vector2<f64>) -> (Array1<f64>, bool) {
    let (c, rows, cols) = image.dim();
    match Taps::new(rows, cols, pixel.x, pixel.y) {
        Some(t) => (
            Array1::from_iter(image.outer_iter().map(|ch| t.sample(&ch))),
            true,
        ),
        None => (Array1::zeros(c), false),
    }
}

/// `d value / d(u, v)` as a `C x 2` matrix; zeros for invalid samples.
///
/// Exactly on a tap boundary the right-hand (and lower) cell is used.
pub fn sample_bilinear_grad(image: &ArrayView3<f64>, pixel: Vector2<f64>) -> Array2<f64> {
    let (c, rows, cols) = image.dim();
    let mut g = Array2::zeros((c, 2));
    if let Some(t) = Taps::new(rows, cols, pixel.x, pixel.y) {
        for (k, ch) in image.outer_iter().enumerate() {
            let (du, dv) = t.gradient(&ch);
            g[[k, 0]] = du;
            g[[k, 1]] = dv;
        }
    }
    g
}

/// Per-camera stack of ERP slices, one per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepVolume {
    /// 0-based camera index.
    pub camera: usize,
    /// `N x C x H x W`.
    pub values: Array4<f64>,
    /// `N x H x W`.
    pub valid: Array3<bool>,
}

impl SweepVolume {
    pub fn hypotheses(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn grid(&self) -> ErpGrid {
        let (_, _, h, w) = self.values.dim();
        ErpGrid::new(h, w)
    }
}

/// Warps `source` (`C x rows x cols`, sampled at `1/scale` of the calibrated
/// resolution) of camera `camera` onto every hypothesis sphere.
pub fn sweep_warp(
    source: &ArrayView3<f64>,
    scale: usize,
    rig: &CameraRig,
    camera: usize,
    grid: &ErpGrid,
    hyp: &HypothesisSet,
) -> Result<SweepVolume> {
    let cam = &rig.cameras[camera];
    let intr = if scale == 1 {
        cam.intrinsics.clone()
    } else {
        cam.intrinsics.scaled(scale)
    };
    let (channels, rows, cols) = source.dim();
    if (rows, cols) != intr.image_size {
        return Err(Error::ScaleMismatch {
            source_dims: (rows, cols),
            expected: intr.image_size,
            scale,
        });
    }
    let n = hyp.len();
    let dirs = grid.directions();
    let mut values = Array4::<f64>::zeros((n, channels, grid.height, grid.width));
    let mut valid = Array3::<bool>::from_elem((n, grid.height, grid.width), false);

    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(valid.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(k, (mut slice, mut mask))| {
            let d = hyp.depth(k);
            for (idx, dir) in dirs.iter().enumerate() {
                let (r, c) = (idx / grid.width, idx % grid.width);
                let p_cam = world_to_camera(&(dir * d), &cam.extrinsics);
                let proj = project_fisheye(&p_cam, &intr);
                if !proj.valid {
                    continue;
                }
                if let Some(t) = Taps::in_fov(&intr, proj.pixel.x, proj.pixel.y) {
                    for ch in 0..channels {
                        slice[[ch, r, c]] = t.sample(&source.index_axis(Axis(0), ch));
                    }
                    mask[[r, c]] = true;
                }
            }
        });

    Ok(SweepVolume {
        camera,
        values,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::FisheyeIntrinsics;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn spherical_point_examples() {
        assert_relative_eq!(spherical_point(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(
            spherical_point(FRAC_PI_2, 1.234, 2.0),
            Vector3::new(0.0, 2.0, 0.0),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            spherical_point(0.0, FRAC_PI_2, 3.0),
            Vector3::new(0.0, 0.0, 3.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn erp_conventions() {
        let g = ErpGrid::new(320, 640);
        assert_relative_eq!(g.delta_elevation(), PI / 320.0);
        assert_relative_eq!(g.delta_azimuth(), 2.0 * PI / 640.0);
        assert!(g.elevation(0) < FRAC_PI_2 && g.elevation(319) > -FRAC_PI_2);
        assert!((0..319).all(|r| g.elevation(r) > g.elevation(r + 1)));
        assert!(g.azimuth(0) > -PI && g.azimuth(639) < PI);
        assert_relative_eq!(g.azimuth(320), 0.5 * g.delta_azimuth(), epsilon = 1e-15);
    }

    #[test]
    fn hypothesis_examples() {
        let h = make_hypotheses(32, 0.55, 1e5).unwrap();
        assert_eq!(h.len(), 32);
        assert_eq!(h.first(), 1.0 / 0.55);
        assert_eq!(h.last(), 1e-5);
        assert!(h.inverse_depths.windows(2).all(|w| w[0] > w[1]));

        let h = make_hypotheses(2, 1.0, 2.0).unwrap();
        assert_eq!(h.inverse_depths, vec![1.0, 0.5]);

        let h = make_hypotheses(3, 1.0, 1e12).unwrap();
        assert!((h.inverse_depths[1] - 0.5).abs() < 1e-6);

        assert!(make_hypotheses(1, 1.0, 2.0).is_err());
        assert!(make_hypotheses(4, 2.0, 1.0).is_err());
        assert!(make_hypotheses(4, 0.0, 1.0).is_err());
    }

    #[test]
    fn index_map_roundtrip() {
        let h = make_hypotheses(32, 0.55, 1e5).unwrap();
        for k in 0..32 {
            assert_relative_eq!(h.index_to_inverse_depth(k as f64), h.inverse_depths[k], epsilon = 1e-12);
            assert_relative_eq!(h.inverse_depth_to_index(h.inverse_depths[k]), k as f64, epsilon = 1e-9);
        }
    }

    fn img(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Array3<f64> {
        Array3::from_shape_fn((1, rows, cols), |(_, r, c)| f(r, c))
    }

    #[test]
    fn bilinear_examples() {
        let a = img(4, 5, |r, c| (r * 10 + c) as f64);
        let (v, ok) = sample_bilinear(&a.view(), Vector2::new(3.0, 2.0));
        assert!(ok);
        assert_eq!(v[0], 23.0);
        // Last row and column are reachable.
        let (v, ok) = sample_bilinear(&a.view(), Vector2::new(4.0, 3.0));
        assert!(ok);
        assert_eq!(v[0], 34.0);

        let b = img(1, 2, |_, c| c as f64);
        let (v, ok) = sample_bilinear(&b.view(), Vector2::new(0.5, 0.0));
        assert!(ok);
        assert_eq!(v[0], 0.5);

        let (_, ok) = sample_bilinear(&a.view(), Vector2::new(-0.7, 3.0));
        assert!(!ok);
        let (_, ok) = sample_bilinear(&a.view(), Vector2::new(f64::NAN, 1.0));
        assert!(!ok);
    }

    #[test]
    fn bilinear_gradient_examples() {
        let flat = img(6, 6, |_, _| 0.3);
        let g = sample_bilinear_grad(&flat.view(), Vector2::new(2.3, 3.7));
        assert!(g.iter().all(|&x| x == 0.0));
        let ramp = img(6, 6, |_, c| c as f64);
        let g = sample_bilinear_grad(&ramp.view(), Vector2::new(2.3, 3.7));
        assert_eq!((g[[0, 0]], g[[0, 1]]), (1.0, 0.0));
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array3::from_shape_fn((3, 9, 11), |_| rng.random::<f64>());
        let h = 1e-3;
        for _ in 0..200 {
            let u: f64 = rng.random_range(0.01..9.99);
            let v: f64 = rng.random_range(0.01..7.99);
            // Keep the stencil inside one cell.
            if (u - u.round()).abs() < 2.0 * h || (v - v.round()).abs() < 2.0 * h {
                continue;
            }
            let g = sample_bilinear_grad(&a.view(), Vector2::new(u, v));
            for ch in 0..3 {
                let s = |du: f64, dv: f64| sample_bilinear(&a.view(), Vector2::new(u + du, v + dv)).0[ch];
                let fd_u = (s(h, 0.0) - s(-h, 0.0)) / (2.0 * h);
                let fd_v = (s(0.0, h) - s(0.0, -h)) / (2.0 * h);
                assert!((g[[ch, 0]] - fd_u).abs() <= 1e-3 * fd_u.abs().max(1e-9) + 1e-12);
                assert!((g[[ch, 1]] - fd_v).abs() <= 1e-3 * fd_v.abs().max(1e-9) + 1e-12);
            }
        }
    }

    fn test_rig() -> CameraRig {
        let intr = FisheyeIntrinsics::new(vec![48.0], (95.5, 95.5), (192, 192), 220.0, 1).unwrap();
        CameraRig::cardinal(intr, 0.2).unwrap()
    }

    #[test]
    fn constant_source_gives_constant_sweep() {
        let rig = test_rig();
        let src = Array3::from_elem((2, 192, 192), 0.25);
        let hyp = make_hypotheses(4, 0.55, 100.0).unwrap();
        let grid = ErpGrid::new(16, 32);
        let sv = sweep_warp(&src.view(), 1, &rig, 1, &grid, &hyp).unwrap();
        assert!(sv.valid.iter().any(|&v| v));
        for k in 0..4 {
            for r in 0..16 {
                for c in 0..32 {
                    if sv.valid[[k, r, c]] {
                        assert_eq!(sv.values[[k, 0, r, c]], 0.25);
                        assert_eq!(sv.values[[k, 1, r, c]], 0.25);
                    } else {
                        assert_eq!(sv.values[[k, 0, r, c]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn scale_mismatch_is_reported() {
        let rig = test_rig();
        let src = Array3::zeros((1, 50, 48));
        let hyp = make_hypotheses(2, 1.0, 2.0).unwrap();
        let err = sweep_warp(&src.view(), 4, &rig, 0, &ErpGrid::new(4, 8), &hyp).unwrap_err();
        assert!(matches!(err, Error::ScaleMismatch { .. }));
        let ok = Array3::zeros((1, 48, 48));
        assert!(sweep_warp(&ok.view(), 4, &rig, 0, &ErpGrid::new(4, 8), &hyp).is_ok());
    }

    #[test]
    fn far_hypothesis_matches_infinity() {
        // Tap locations at d = 1e5 vs the pure-rotation limit.
        let rig = test_rig();
        let grid = ErpGrid::new(40, 80);
        for cam in &rig.cameras {
            assert!(cam.extrinsics.translation.norm() <= 0.3);
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let dir = grid.direction(r, c);
                    let far = project_fisheye(&world_to_camera(&(dir * 1e5), &cam.extrinsics), &cam.intrinsics);
                    let inf = project_fisheye(&(cam.extrinsics.rotation * dir), &cam.intrinsics);
                    if far.valid && inf.valid {
                        assert!((far.pixel - inf.pixel).norm() < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn back_to_back_masks_cover_equator() {
        let rig = test_rig();
        let src = Array3::from_elem((1, 192, 192), 1.0);
        let hyp = make_hypotheses(3, 0.55, 1e5).unwrap();
        let grid = ErpGrid::new(32, 64);
        let sweeps: Vec<_> = (0..4)
            .map(|i| sweep_warp(&src.view(), 1, &rig, i, &grid, &hyp).unwrap())
            .collect();
        let eq = grid.height / 2;
        for pair in 0..2 {
            for k in 0..3 {
                for c in 0..grid.width {
                    assert!(sweeps[pair].valid[[k, eq, c]] || sweeps[pair + 2].valid[[k, eq, c]]);
                }
            }
        }
        // Each camera covers at least its 220 deg field of view... of which the
        // equatorial span exceeds 180 deg.
        for sv in &sweeps {
            let covered = (0..grid.width).filter(|&c| sv.valid[[2, eq, c]]).count();
            assert!(covered as f64 >= grid.width as f64 * 0.5);
        }
    }

    #[test]
    fn tap_motion_between_hypotheses_is_bounded() {
        let rig = test_rig();
        let hyp = make_hypotheses(8, 0.55, 1e5).unwrap();
        let grid = ErpGrid::new(20, 40);
        let (_, s_max) = hyp.inverse_depth_bounds();
        for cam in &rig.cameras {
            let t = cam.extrinsics.translation.norm();
            // The ray from the camera is along dir - s * C with s = 1/d: its
            // angular speed in s is at most |C| / (1 - s_max |C|).
            let angle_per_step = t * hyp.step().abs() / (1.0 - s_max * t);
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let dir = grid.direction(r, c);
                    for k in 0..7 {
                        let q0 = world_to_camera(&(dir * hyp.depth(k)), &cam.extrinsics);
                        let q1 = world_to_camera(&(dir * hyp.depth(k + 1)), &cam.extrinsics);
                        let p0 = project_fisheye(&q0, &cam.intrinsics);
                        let p1 = project_fisheye(&q1, &cam.intrinsics);
                        let theta = (q0.z / q0.norm()).acos().max((q1.z / q1.norm()).acos());
                        if p0.valid && p1.valid && theta < 1.4 {
                            // Equidistant stretch: radial slope, tangential r / sin.
                            let stretch = cam.intrinsics.max_radius_slope() * (theta / theta.sin().max(1e-9)).max(1.0);
                            assert!((p0.pixel - p1.pixel).norm() <= angle_per_step * stretch * 1.001 + 1e-9);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn world_translation_invariance(sx in -4i32..4, sy in -4i32..4, sz in -4i32..4) {
            // Shifting world points by s and every T by -R s leaves camera
            // coordinates unchanged; dyadic values keep it exact.
            let rig = test_rig();
            let s = Vector3::new(sx as f64 * 0.25, sy as f64 * 0.25, sz as f64 * 0.25);
            let p = Vector3::new(1.5, -0.75, 2.25);
            for cam in &rig.cameras {
                let mut moved = cam.extrinsics.clone();
                moved.translation -= moved.rotation * s;
                let a = world_to_camera(&p, &cam.extrinsics);
                let b = world_to_camera(&(p + s), &moved);
                prop_assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
