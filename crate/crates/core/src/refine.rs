//! Per-scene depth refinement by minimizing the pseudo-stereo objective
//! over the inverse-depth field.
//!
//! The gradient is computed analytically in the world ERP frame, where both
//! panoramas share columns. The objective is invariant under a common yaw
//! rotation of the two panoramas, so this equals the gradient of
//! [`total_loss`](crate::pseudo_stereo::total_loss) evaluated in the
//! panorama frames. The absolute values in the L1, gradient and smoothness
//! terms use the subgradient `sign(0) = 0`.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::cost::{column_owners, seam_columns};
use crate::error::{Error, Result};
use crate::pseudo_stereo::{
    forward_diff, loss_mask, masked_terms, window, LossBreakdown, LossConfig, SSIM_C1, SSIM_C2,
};
use crate::rig::{project_fisheye, project_fisheye_jacobian, world_to_camera, Camera, CameraRig};
use crate::sphere::{ErpGrid, HypothesisSet, Taps};
use crate::sum::{sum_rows, CompensatedSum};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// First and second moment decays.
    pub decays: (f64, f64),
    /// Added to the root second moment.
    pub epsilon: f64,
    /// Stop once `L_total` changes by less than this fraction over `window` iterations.
    pub tolerance: f64,
    pub window: usize,
    pub loss: LossConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            max_iters: 300,
            decays: (0.9, 0.999),
            epsilon: 1e-12,
            tolerance: 1e-5,
            window: 10,
            loss: LossConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.decays;
        let ok = self.step_size >= 0.0
            && self.step_size.is_finite()
            && b1 > 0.0
            && b1 < 1.0
            && b2 > 0.0
            && b2 < 1.0
            && self.epsilon > 0.0
            && self.tolerance >= 0.0
            && self.window > 0
            && (0.0..=1.0).contains(&self.loss.alpha);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("refinement {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    Converged,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    /// Loss at each evaluated iterate, starting with the initial field.
    pub losses: Vec<LossBreakdown>,
    pub inverse_depth: Array2<f64>,
    /// Descent steps taken.
    pub iterations: usize,
    pub termination: Termination,
}

impl RefineTrace {
    /// CSV with header `iter,L_total,L_p,L_s,L_g`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,L_total,L_p,L_s,L_g\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!(
                "{i},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                l.l_total, l.l_p, l.l_s, l.l_g
            ));
        }
        s
    }
}

/// A panorama pixel sampled from one camera, with `d value / d inverse depth`.
#[derive(Debug, Clone, Copy, Default)]
struct Sample {
    value: f64,
    slope: f64,
    valid: bool,
}

#[inline]
fn sample_with_slope(image: &ArrayView2<f64>, cam: &Camera, dir: &Vector3<f64>, inv: f64) -> Sample {
    let p_cam = world_to_camera(&(dir / inv), &cam.extrinsics);
    let proj = project_fisheye(&p_cam, &cam.intrinsics);
    if !proj.valid {
        return Sample::default();
    }
    let Some(t) = Taps::in_fov(&cam.intrinsics, proj.pixel.x, proj.pixel.y) else {
        return Sample::default();
    };
    let (du, dv) = t.gradient(image);
    let jac = project_fisheye_jacobian(&p_cam, &cam.intrinsics);
    let dp = cam.extrinsics.rotation * (-dir / (inv * inv));
    let duv = jac * dp;
    Sample {
        value: t.sample(image),
        slope: du * duv.x + dv * duv.y,
        valid: true,
    }
}

/// World-frame panoramas for an inverse-depth field.
struct Panoramas {
    a: Array2<f64>,
    b: Array2<f64>,
    mask_a: Array2<bool>,
    mask_b: Array2<bool>,
    slope_a: Array2<f64>,
    slope_b: Array2<f64>,
    seams: Vec<usize>,
}

fn check_inputs(fisheyes: &[Array2<f64>; 4], rig: &CameraRig, inv: &ArrayView2<f64>) -> Result<()> {
    let (_, w) = inv.dim();
    if w % 4 != 0 {
        return Err(Error::WidthNotDivisibleBy4(w));
    }
    for (i, img) in fisheyes.iter().enumerate() {
        if img.dim() != rig.cameras[i].intrinsics.image_size {
            return Err(Error::DimensionMismatch(format!(
                "fisheye {} is {:?}, calibration says {:?}",
                i + 1,
                img.dim(),
                rig.cameras[i].intrinsics.image_size
            )));
        }
    }
    if let Some(bad) = inv.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidDepth(format!("inverse depth must be positive, found {bad}")));
    }
    Ok(())
}

fn panoramas(fisheyes: &[Array2<f64>; 4], rig: &CameraRig, inv: &ArrayView2<f64>) -> Panoramas {
    let (h, w) = inv.dim();
    let grid = ErpGrid::new(h, w);
    let o1 = column_owners(w, rig, (0, 2));
    let o2 = column_owners(w, rig, (1, 3));
    let rows: Vec<Vec<(Sample, Sample)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    let dir = grid.direction(r, c);
                    let v = inv[[r, c]];
                    let sa = sample_with_slope(&fisheyes[o1[c]].view(), &rig.cameras[o1[c]], &dir, v);
                    let sb = sample_with_slope(&fisheyes[o2[c]].view(), &rig.cameras[o2[c]], &dir, v);
                    (sa, sb)
                })
                .collect()
        })
        .collect();
    let at = |r: usize, c: usize| rows[r][c];
    let mut seams = seam_columns(&o1);
    seams.extend(seam_columns(&o2));
    seams.sort_unstable();
    seams.dedup();
    Panoramas {
        a: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).0.value),
        b: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).1.value),
        mask_a: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).0.valid),
        mask_b: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).1.valid),
        slope_a: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).0.slope),
        slope_b: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).1.slope),
        seams,
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L_s` for one guide and its gradients with respect to the disparity and
/// the guide.
fn smoothness_with_grad(d: &ArrayView2<f64>, g: &ArrayView2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let (h, w) = d.dim();
    let nx = (h * w) as f64;
    let ny = if h > 1 { ((h - 1) * w) as f64 } else { f64::INFINITY };
    // Per pixel: (dx d, dx g, dy d, dy g) and the weights.
    let sx = sum_rows(h, |r| {
        (0..w)
            .map(|c| {
                let (dx, _) = forward_diff(d, r, c);
                let (gx, _) = forward_diff(g, r, c);
                dx.abs() * (-gx.abs()).exp()
            })
            .collect()
    });
    let sy = sum_rows(h.saturating_sub(1), |r| {
        (0..w)
            .map(|c| {
                let (_, dy) = forward_diff(d, r, c);
                let (_, gy) = forward_diff(g, r, c);
                dy.abs() * (-gy.abs()).exp()
            })
            .collect()
    });
    let loss = sx / nx + if h > 1 { sy / ny } else { 0.0 };

    // Coefficients of the forward difference at each pixel.
    let mut cdx = Array2::zeros((h, w));
    let mut cgx = Array2::zeros((h, w));
    let mut cdy = Array2::zeros((h, w));
    let mut cgy = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (dx, dy) = forward_diff(d, r, c);
            let (gx, gy) = forward_diff(g, r, c);
            let ex = (-gx.abs()).exp();
            cdx[[r, c]] = sign(dx) * ex / nx;
            cgx[[r, c]] = -dx.abs() * ex * sign(gx) / nx;
            if r + 1 < h {
                let ey = (-gy.abs()).exp();
                cdy[[r, c]] = sign(dy) * ey / ny;
                cgy[[r, c]] = -dy.abs() * ey * sign(gy) / ny;
            }
        }
    }
    // A forward difference at p adds +coef to p + 1 and -coef to p.
    let scatter = |cx: &Array2<f64>, cy: &Array2<f64>| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut v = cx[[r, (c + w - 1) % w]] - cx[[r, c]] - cy[[r, c]];
            if r > 0 {
                v += cy[[r - 1, c]];
            }
            v
        })
    };
    (loss, scatter(&cdx, &cdy), scatter(&cgx, &cgy))
}

/// Loss breakdown and `dL_total / d inverse depth` for a world-frame field.
pub fn loss_and_gradient(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    inv: &ArrayView2<f64>,
    hypotheses: &HypothesisSet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_inputs(fisheyes, rig, inv)?;
    let (h, w) = inv.dim();
    let p = panoramas(fisheyes, rig, inv);
    let (av, bv) = (p.a.view(), p.b.view());
    let mask = loss_mask(&p.mask_a.view(), &p.mask_b.view(), &p.seams, cfg.seam_width);
    let (lp_sum, lg_sum, n) = masked_terms(&av, &bv, &mask.view(), cfg.alpha);
    if n == 0 {
        return Err(Error::EmptyMask("pseudo-stereo loss"));
    }
    let m = n as f64;
    let (b1, b2, b3) = cfg.beta;
    let alpha = cfg.alpha;

    // SSIM partials per masked pixel: (mu_a, mu_b, dS/dmu_a, dS/dmu_b,
    // dS/dvar_a, dS/dvar_b, dS/dcov).
    let mut partials = Array2::from_elem((h, w), [0.0f64; 7]);
    partials
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            for c in 0..w {
                if !mask[[r, c]] {
                    continue;
                }
                let win = window(&av, &bv, r, c);
                let n1 = 2.0 * win.mu_a * win.mu_b + SSIM_C1;
                let n2 = 2.0 * win.cov + SSIM_C2;
                let d1 = win.mu_a * win.mu_a + win.mu_b * win.mu_b + SSIM_C1;
                let d2 = win.var_a + win.var_b + SSIM_C2;
                let s = n1 * n2 / (d1 * d2);
                row[c] = [
                    win.mu_a,
                    win.mu_b,
                    2.0 * win.mu_b * n2 / (d1 * d2) - s * 2.0 * win.mu_a / d1,
                    2.0 * win.mu_a * n2 / (d1 * d2) - s * 2.0 * win.mu_b / d1,
                    -s / d2,
                    -s / d2,
                    2.0 * n1 / (d1 * d2),
                ];
            }
        });

    let ssim_scale = -b1 * alpha * 0.5 / m;
    let l1_scale = b1 * (1.0 - alpha) / m;
    let g_scale = b3 / m;
    let mut grad_a = Array2::zeros((h, w));
    let mut grad_b = Array2::zeros((h, w));
    grad_a
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(grad_b.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(r, (mut ga_row, mut gb_row))| {
            for c in 0..w {
                let (aq, bq) = (av[[r, c]], bv[[r, c]]);
                let mut ga = 0.0;
                let mut gb = 0.0;
                // SSIM windows containing q: centres in q's 3x3 neighbourhood.
                for i in 0..3 {
                    let Some(pr) = (r + i).checked_sub(1) else { continue };
                    if pr >= h {
                        continue;
                    }
                    for j in 0..3 {
                        let pc = (c + w + j - 1) % w;
                        if !mask[[pr, pc]] {
                            continue;
                        }
                        let [mu_a, mu_b, s_ma, s_mb, s_va, s_vb, s_cov] = partials[[pr, pc]];
                        ga += s_ma / 9.0 + 2.0 / 9.0 * (aq - mu_a) * s_va + (bq - mu_b) / 9.0 * s_cov;
                        gb += s_mb / 9.0 + 2.0 / 9.0 * (bq - mu_b) * s_vb + (aq - mu_a) / 9.0 * s_cov;
                    }
                }
                ga *= ssim_scale;
                gb *= ssim_scale;
                if mask[[r, c]] {
                    let s = sign(aq - bq) * l1_scale;
                    ga += s;
                    gb -= s;
                }
                // Gradient term: differences at q (as the base) and at its
                // left and upper neighbours (q as the far end).
                let mut gterm = 0.0;
                if mask[[r, c]] {
                    let (ax, ay) = forward_diff(&av, r, c);
                    let (bx, by) = forward_diff(&bv, r, c);
                    gterm -= sign(ax - bx) + sign(ay - by);
                }
                let lc = (c + w - 1) % w;
                if mask[[r, lc]] {
                    let (ax, _) = forward_diff(&av, r, lc);
                    let (bx, _) = forward_diff(&bv, r, lc);
                    gterm += sign(ax - bx);
                }
                if r > 0 && mask[[r - 1, c]] {
                    let (_, ay) = forward_diff(&av, r - 1, c);
                    let (_, by) = forward_diff(&bv, r - 1, c);
                    gterm += sign(ay - by);
                }
                ga += g_scale * gterm;
                gb -= g_scale * gterm;
                ga_row[c] = ga;
                gb_row[c] = gb;
            }
        });

    // Smoothness of the disparity against both panoramas.
    let disp = inv.mapv(|v| hypotheses.inverse_depth_to_index(v));
    let (ls_a, gd_a, gg_a) = smoothness_with_grad(&disp.view(), &av);
    let (ls_b, gd_b, gg_b) = smoothness_with_grad(&disp.view(), &bv);
    let l_s = ls_a + ls_b;
    let dd_dinv = 1.0 / hypotheses.step();

    let mut grad = Array2::zeros((h, w));
    Zip::indexed(&mut grad).par_for_each(|(r, c), g| {
        let ga = grad_a[[r, c]] + b2 * gg_a[[r, c]];
        let gb = grad_b[[r, c]] + b2 * gg_b[[r, c]];
        *g = ga * p.slope_a[[r, c]]
            + gb * p.slope_b[[r, c]]
            + b2 * (gd_a[[r, c]] + gd_b[[r, c]]) * dd_dinv;
    });

    let l_p = lp_sum / m;
    let l_g = lg_sum / m;
    Ok((
        LossBreakdown {
            l_p,
            l_s,
            l_g,
            l_total: b1 * l_p + b2 * l_s + b3 * l_g,
            pixels: n,
        },
        grad,
    ))
}

/// `dL_total / d inverse depth`; pixels outside every mask get zero
/// photometric gradient.
pub fn loss_gradient(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    inv: &ArrayView2<f64>,
    hypotheses: &HypothesisSet,
    cfg: &LossConfig,
) -> Result<Array2<f64>> {
    loss_and_gradient(fisheyes, rig, inv, hypotheses, cfg).map(|(_, g)| g)
}

/// Loss only, evaluated on the world-frame panoramas.
pub fn world_loss(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    inv: &ArrayView2<f64>,
    hypotheses: &HypothesisSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_inputs(fisheyes, rig, inv)?;
    let p = panoramas(fisheyes, rig, inv);
    let mask = loss_mask(&p.mask_a.view(), &p.mask_b.view(), &p.seams, cfg.seam_width);
    let (lp, lg, n) = masked_terms(&p.a.view(), &p.b.view(), &mask.view(), cfg.alpha);
    if n == 0 {
        return Err(Error::EmptyMask("pseudo-stereo loss"));
    }
    let disp = inv.mapv(|v| hypotheses.inverse_depth_to_index(v));
    let l_s = crate::pseudo_stereo::smoothness_loss(&disp.view(), &p.a.view())?
        + crate::pseudo_stereo::smoothness_loss(&disp.view(), &p.b.view())?;
    let (b1, b2, b3) = cfg.beta;
    let (l_p, l_g) = (lp / n as f64, lg / n as f64);
    Ok(LossBreakdown {
        l_p,
        l_s,
        l_g,
        l_total: b1 * l_p + b2 * l_s + b3 * l_g,
        pixels: n,
    })
}

/// Adaptive-moment descent on the inverse depth, clamped to the hypothesis
/// range after every step.
pub fn refine(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    init: &ArrayView2<f64>,
    hypotheses: &HypothesisSet,
    cfg: &RefineConfig,
) -> Result<RefineTrace> {
    cfg.validate()?;
    let (lo, hi) = hypotheses.inverse_depth_bounds();
    let mut x = init.mapv(|v| v.clamp(lo, hi));
    let mut m1 = Array2::<f64>::zeros(x.raw_dim());
    let mut m2 = Array2::<f64>::zeros(x.raw_dim());
    let (d1, d2) = cfg.decays;
    let mut losses = Vec::with_capacity(cfg.max_iters + 1);
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    let mut p1 = 1.0;
    let mut p2 = 1.0;
    for t in 0..=cfg.max_iters {
        let (loss, grad) = loss_and_gradient(fisheyes, rig, &x.view(), hypotheses, &cfg.loss)?;
        if !loss.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            termination = Termination::Diverged;
            break;
        }
        losses.push(loss);
        if t == cfg.max_iters {
            break;
        }
        if losses.len() > cfg.window {
            let old = losses[losses.len() - 1 - cfg.window].l_total;
            if old > 0.0 && ((old - loss.l_total) / old).abs() < cfg.tolerance {
                termination = Termination::Converged;
                break;
            }
        }
        p1 *= d1;
        p2 *= d2;
        let lr = cfg.step_size;
        let eps = cfg.epsilon;
        Zip::from(&mut x)
            .and(&mut m1)
            .and(&mut m2)
            .and(&grad)
            .par_for_each(|x, m, v, &g| {
                *m = d1 * *m + (1.0 - d1) * g;
                *v = d2 * *v + (1.0 - d2) * g * g;
                let mh = *m / (1.0 - p1);
                let vh = *v / (1.0 - p2);
                *x = (*x - lr * mh / (vh.sqrt() + eps)).clamp(lo, hi);
            });
        iterations += 1;
    }
    Ok(RefineTrace {
        losses,
        inverse_depth: x,
        iterations,
        termination,
    })
}

/// Root mean square of a field.
pub fn rms(a: &ArrayView2<f64>) -> f64 {
    let (h, w) = a.dim();
    let s = sum_rows(h, |r| {
        let mut acc = CompensatedSum::new();
        for c in 0..w {
            acc.add(a[[r, c]] * a[[r, c]]);
        }
        acc
    });
    (s / (h * w) as f64).sqrt()
}
