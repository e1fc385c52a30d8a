//! Pseudo-stereo supervision.
//!
//! Each fisheye is projected to the rig centre using a depth map, the
//! back-to-back pairs are stitched into two panoramas, and the panoramas,
//! which differ by a quarter yaw turn, are compared photometrically.
//!
//! Panorama `k` is stored in its own frame: column `nu` of panorama `k`
//! holds world column `nu - t_k * W / 4`, where `t_k` is
//! [`PanoramaPair::frame_turns`]. Panorama 1 uses the world frame and
//! panorama 2 is anchored one quarter turn away, facing camera 4, so
//! rotating panorama 1 by `+1` turn aligns it with panorama 2.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::config::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::cost::{column_owners, seam_columns, DisparityMap};
use crate::error::{Error, Result};
use crate::rig::{CameraRig, Camera};
use crate::sphere::{ErpGrid, Taps};
use crate::sum::{sum_rows, CompensatedSum};

/// SSIM stabilizers for unit-range images.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Default half-width in pixels of the band excluded around each seam.
pub const DEFAULT_SEAM_WIDTH: usize = 2;

/// Grayscale ERP image with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pub data: Array2<f64>,
    pub mask: Array2<bool>,
}

impl ErpImage {
    pub fn new(data: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if data.dim() != mask.dim() {
            return Err(Error::DimensionMismatch(format!(
                "image {:?} vs mask {:?}",
                data.dim(),
                mask.dim()
            )));
        }
        Ok(Self { data, mask })
    }

    /// Image with every pixel valid.
    pub fn full(data: Array2<f64>) -> Self {
        let mask = Array2::from_elem(data.raw_dim(), true);
        Self { data, mask }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaPair {
    /// Stitched from cameras 1 and 3.
    pub i_o1: ErpImage,
    /// Stitched from cameras 2 and 4.
    pub i_o2: ErpImage,
    /// Contributing camera per column, in each panorama's own frame.
    pub owners: (Vec<usize>, Vec<usize>),
    /// Yaw of each panorama frame relative to the world ERP, in quarter turns.
    pub frame_turns: (i32, i32),
}

impl PanoramaPair {
    /// Quarter turns taking panorama 1 into the frame of panorama 2.
    pub fn alignment_turns(&self) -> i32 {
        self.frame_turns.1 - self.frame_turns.0
    }
}

/// Terms of the pseudo-stereo objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub l_total: f64,
    /// Pixels in the photometric mask.
    pub pixels: usize,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_p={:.9e} L_s={:.9e} L_g={:.9e} L_total={:.9e} pixels={}",
            self.l_p, self.l_s, self.l_g, self.l_total, self.pixels
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// SSIM weight in the photometric term.
    pub alpha: f64,
    /// Weights of `(L_p, L_s, L_g)`.
    pub beta: (f64, f64, f64),
    /// Columns excluded on each side of a stitch seam.
    pub seam_width: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seam_width: DEFAULT_SEAM_WIDTH,
        }
    }
}

/// Bilinear sample of `camera`'s fisheye at world point `p`; `None` unless
/// every tap lies inside the field of view.
#[inline]
pub(crate) fn sample_at(image: &ArrayView2<f64>, camera: &Camera, p: &nalgebra::Vector3<f64>) -> Option<f64> {
    let proj = camera.project_world(p);
    if !proj.valid {
        return None;
    }
    Taps::in_fov(&camera.intrinsics, proj.pixel.x, proj.pixel.y).map(|t| t.sample(image))
}

fn check_depth(depth: &ArrayView2<f64>) -> Result<()> {
    if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::InvalidDepth(format!("depth must be positive and finite, found {bad}")));
    }
    Ok(())
}

/// Projects every fisheye to the rig centre on the ERP grid of `depth`:
/// pixel `(mu, nu)` samples camera `i` at `spherical_point(e, a, depth)`.
pub fn project_to_center(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    depth: &ArrayView2<f64>,
) -> Result<[ErpImage; 4]> {
    check_depth(depth)?;
    let (h, w) = depth.dim();
    let grid = ErpGrid::new(h, w);
    let out: Vec<ErpImage> = (0..4)
        .map(|i| {
            let cam = &rig.cameras[i];
            let img = fisheyes[i].view();
            let mut data = Array2::zeros((h, w));
            let mut mask = Array2::from_elem((h, w), false);
            data.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(mask.axis_iter_mut(Axis(0)).into_par_iter())
                .enumerate()
                .for_each(|(r, (mut drow, mut mrow))| {
                    for c in 0..w {
                        let p = grid.direction(r, c) * depth[[r, c]];
                        if let Some(v) = sample_at(&img, cam, &p) {
                            drow[c] = v;
                            mrow[c] = true;
                        }
                    }
                });
            ErpImage { data, mask }
        })
        .collect();
    Ok(out.try_into().expect("four images"))
}

/// Circular column shift by `quarter_turns * W / 4`: column `nu` moves to
/// `nu + quarter_turns * W / 4`.
pub fn yaw_rotate_array<T: Clone>(a: &ArrayView2<T>, quarter_turns: i32) -> Result<Array2<T>> {
    let (h, w) = a.dim();
    if w % 4 != 0 {
        return Err(Error::WidthNotDivisibleBy4(w));
    }
    let shift = (quarter_turns as i64 * (w / 4) as i64).rem_euclid(w as i64) as usize;
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        a[[r, (c + w - shift) % w]].clone()
    }))
}

pub fn yaw_rotate(pano: &ErpImage, quarter_turns: i32) -> Result<ErpImage> {
    Ok(ErpImage {
        data: yaw_rotate_array(&pano.data.view(), quarter_turns)?,
        mask: yaw_rotate_array(&pano.mask.view(), quarter_turns)?,
    })
}

pub(crate) fn rotate_columns<T: Clone>(v: &[T], quarter_turns: i32) -> Vec<T> {
    let w = v.len();
    let shift = (quarter_turns as i64 * (w / 4) as i64).rem_euclid(w as i64) as usize;
    (0..w).map(|c| v[(c + w - shift) % w].clone()).collect()
}

fn stitch_world(s: &[ErpImage; 4], owner: &[usize]) -> ErpImage {
    let (h, w) = s[0].dim();
    let mut data = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for (c, &cam) in owner.iter().enumerate() {
        data.column_mut(c).assign(&s[cam].data.column(c));
        mask.column_mut(c).assign(&s[cam].mask.column(c));
    }
    ErpImage { data, mask }
}

/// Hard-seam stitching: `I_o1` from cameras (1, 3), `I_o2` from (2, 4),
/// each camera contributing the 180 degree band it faces.
pub fn stitch_pair(s: &[ErpImage; 4], rig: &CameraRig) -> Result<PanoramaPair> {
    let dim = s[0].dim();
    if s.iter().any(|im| im.dim() != dim || im.mask.dim() != dim) {
        return Err(Error::DimensionMismatch("projected images differ in size".into()));
    }
    let w = dim.1;
    if w % 4 != 0 {
        return Err(Error::WidthNotDivisibleBy4(w));
    }
    let frame_turns = (0, 1);
    let o1 = column_owners(w, rig, (0, 2));
    let o2 = column_owners(w, rig, (1, 3));
    let i_o1 = yaw_rotate(&stitch_world(s, &o1), frame_turns.0)?;
    let i_o2 = yaw_rotate(&stitch_world(s, &o2), frame_turns.1)?;
    Ok(PanoramaPair {
        i_o1,
        i_o2,
        owners: (rotate_columns(&o1, frame_turns.0), rotate_columns(&o2, frame_turns.1)),
        frame_turns,
    })
}

/// 3x3 erosion; azimuth wraps and rows outside the image count as invalid,
/// so the first and last rows are always dropped.
pub fn erode_3x3(mask: &ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if r == 0 || r + 1 >= h {
            return false;
        }
        (r - 1..=r + 1).all(|rr| (0..3).all(|j| mask[[rr, (c + w + j - 1) % w]]))
    })
}

/// Joint mask minus `seam_width` columns either side of each seam, eroded.
pub fn loss_mask(
    a: &ArrayView2<bool>,
    b: &ArrayView2<bool>,
    seams: &[usize],
    seam_width: usize,
) -> Array2<bool> {
    let (_, w) = a.dim();
    let mut joint = ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x && y);
    for &s in seams {
        for k in 0..2 * seam_width {
            let c = (s + w + k - seam_width) % w;
            joint.column_mut(c).fill(false);
        }
    }
    erode_3x3(&joint.view())
}

/// Moments of the 3x3 windows around a pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub mu_a: f64,
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

#[inline]
pub(crate) fn window(a: &ArrayView2<f64>, b: &ArrayView2<f64>, r: usize, c: usize) -> Window {
    let (h, w) = a.dim();
    let mut sa = 0.0;
    let mut sb = 0.0;
    let idx = |i: usize, j: usize| {
        let rr = (r + i).saturating_sub(1).min(h - 1);
        (rr, (c + w + j - 1) % w)
    };
    for i in 0..3 {
        for j in 0..3 {
            let q = idx(i, j);
            sa += a[q];
            sb += b[q];
        }
    }
    let (mu_a, mu_b) = (sa / 9.0, sb / 9.0);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let q = idx(i, j);
            let (da, db) = (a[q] - mu_a, b[q] - mu_b);
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    Window {
        mu_a,
        mu_b,
        var_a: vaa / 9.0,
        var_b: vbb / 9.0,
        cov: vab / 9.0,
    }
}

impl Window {
    #[inline]
    pub(crate) fn ssim(&self) -> f64 {
        let n1 = 2.0 * self.mu_a * self.mu_b + SSIM_C1;
        let n2 = 2.0 * self.cov + SSIM_C2;
        let d1 = self.mu_a * self.mu_a + self.mu_b * self.mu_b + SSIM_C1;
        let d2 = self.var_a + self.var_b + SSIM_C2;
        n1 * n2 / (d1 * d2)
    }
}

/// SSIM of the 3x3 windows at `(r, c)`.
pub fn ssim_at(a: &ArrayView2<f64>, b: &ArrayView2<f64>, r: usize, c: usize) -> f64 {
    window(a, b, r, c).ssim()
}

/// Forward differences `(dx, dy)`; `dx` wraps in azimuth, `dy` is zero on
/// the last row.
#[inline]
pub(crate) fn forward_diff(a: &ArrayView2<f64>, r: usize, c: usize) -> (f64, f64) {
    let (h, w) = a.dim();
    let v = a[[r, c]];
    let dx = a[[r, (c + 1) % w]] - v;
    let dy = if r + 1 < h { a[[r + 1, c]] - v } else { 0.0 };
    (dx, dy)
}

fn check_pair(a: &ErpImage, b: &ErpImage) -> Result<()> {
    if a.dim() != b.dim() || a.mask.dim() != a.dim() || b.mask.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "images {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Sums of the photometric and gradient terms over `mask`, and its count.
pub(crate) fn masked_terms(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    mask: &ArrayView2<bool>,
    alpha: f64,
) -> (f64, f64, usize) {
    let (h, w) = a.dim();
    let count = mask.iter().filter(|&&m| m).count();
    let lp = sum_rows(h, |r| {
        let mut acc = CompensatedSum::new();
        for c in 0..w {
            if mask[[r, c]] {
                let s = window(a, b, r, c).ssim();
                acc.add(alpha * 0.5 * (1.0 - s) + (1.0 - alpha) * (a[[r, c]] - b[[r, c]]).abs());
            }
        }
        acc
    });
    let lg = sum_rows(h, |r| {
        let mut acc = CompensatedSum::new();
        for c in 0..w {
            if mask[[r, c]] {
                let (ax, ay) = forward_diff(a, r, c);
                let (bx, by) = forward_diff(b, r, c);
                acc.add((ax - bx).abs() + (ay - by).abs());
            }
        }
        acc
    });
    (lp, lg, count)
}

fn mean_or_empty(sum: f64, count: usize, what: &'static str) -> Result<f64> {
    if count == 0 {
        return Err(Error::EmptyMask(what));
    }
    Ok(sum / count as f64)
}

/// Mean over the eroded joint mask of
/// `alpha/2 * (1 - SSIM) + (1 - alpha) * |a - b|`.
pub fn photometric_loss(a: &ErpImage, b: &ErpImage, alpha: f64) -> Result<f64> {
    check_pair(a, b)?;
    let mask = loss_mask(&a.mask.view(), &b.mask.view(), &[], 0);
    let (lp, _, n) = masked_terms(&a.data.view(), &b.data.view(), &mask.view(), alpha);
    mean_or_empty(lp, n, "photometric loss")
}

/// Mean over the eroded joint mask of `|dx a - dx b| + |dy a - dy b|`.
pub fn gradient_loss(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    check_pair(a, b)?;
    let mask = loss_mask(&a.mask.view(), &b.mask.view(), &[], 0);
    let (_, lg, n) = masked_terms(&a.data.view(), &b.data.view(), &mask.view(), 0.0);
    mean_or_empty(lg, n, "gradient loss")
}

/// Edge-aware smoothness of a disparity field: the mean over all pixels of
/// `|dx d| exp(-|dx I|)` plus the mean over all vertical differences of
/// `|dy d| exp(-|dy I|)`.
pub fn smoothness_loss(disp: &ArrayView2<f64>, guide: &ArrayView2<f64>) -> Result<f64> {
    if disp.dim() != guide.dim() {
        return Err(Error::DimensionMismatch(format!(
            "disparity {:?} vs guide {:?}",
            disp.dim(),
            guide.dim()
        )));
    }
    let (h, w) = disp.dim();
    let sx = sum_rows(h, |r| {
        (0..w)
            .map(|c| {
                let (dx, _) = forward_diff(disp, r, c);
                let (gx, _) = forward_diff(guide, r, c);
                dx.abs() * (-gx.abs()).exp()
            })
            .collect()
    });
    let sy = sum_rows(h.saturating_sub(1), |r| {
        (0..w)
            .map(|c| {
                let (_, dy) = forward_diff(disp, r, c);
                let (_, gy) = forward_diff(guide, r, c);
                dy.abs() * (-gy.abs()).exp()
            })
            .collect()
    });
    let my = if h > 1 { sy / ((h - 1) * w) as f64 } else { 0.0 };
    Ok(sx / (h * w) as f64 + my)
}

/// Seam columns of both panoramas expressed in the frame of panorama 2.
pub fn aligned_seams(pair: &PanoramaPair) -> Vec<usize> {
    let mut seams = seam_columns(&rotate_columns(&pair.owners.0, pair.alignment_turns()));
    seams.extend(seam_columns(&pair.owners.1));
    seams.sort_unstable();
    seams.dedup();
    seams
}

/// `L_total = b1 L_p + b2 L_s + b3 L_g` after rotating `I_o1` into the frame
/// of `I_o2`. `L_s` sums the smoothness of the disparity against both
/// panoramas, each in its own frame.
pub fn total_loss(pair: &PanoramaPair, disp: &DisparityMap, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_pair(&pair.i_o1, &pair.i_o2)?;
    if disp.values.dim() != pair.i_o1.dim() {
        return Err(Error::DimensionMismatch(format!(
            "disparity {:?} vs panoramas {:?}",
            disp.values.dim(),
            pair.i_o1.dim()
        )));
    }
    let a = yaw_rotate(&pair.i_o1, pair.alignment_turns())?;
    let b = &pair.i_o2;
    let mask = loss_mask(&a.mask.view(), &b.mask.view(), &aligned_seams(pair), cfg.seam_width);
    let (lp, lg, n) = masked_terms(&a.data.view(), &b.data.view(), &mask.view(), cfg.alpha);
    let l_p = mean_or_empty(lp, n, "pseudo-stereo loss")?;
    let l_g = lg / n as f64;
    let d1 = yaw_rotate_array(&disp.values.view(), pair.frame_turns.0)?;
    let d2 = yaw_rotate_array(&disp.values.view(), pair.frame_turns.1)?;
    let l_s = smoothness_loss(&d1.view(), &pair.i_o1.data.view())?
        + smoothness_loss(&d2.view(), &pair.i_o2.data.view())?;
    let (b1, b2, b3) = cfg.beta;
    Ok(LossBreakdown {
        l_p,
        l_s,
        l_g,
        l_total: b1 * l_p + b2 * l_s + b3 * l_g,
        pixels: n,
    })
}

/// Projects, stitches and evaluates the objective for a world-frame
/// disparity map.
pub fn evaluate_disparity(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    disp: &DisparityMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let depth = disp.depth();
    let projected = project_to_center(fisheyes, rig, &depth.view())?;
    let pair = stitch_pair(&projected, rig)?;
    total_loss(&pair, disp, cfg)
}
