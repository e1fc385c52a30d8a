//! Cost volumes and disparity regression.
//!
//! Four per-camera sweeps are cropped to the 180 degree band around each
//! optical axis and stitched into two 360 degree feature volumes, cameras
//! (1, 3) and (2, 4). Their per-cell variance is the matching cost; a
//! channel-mean plus separable smoothing regularizes it, and a softargmin
//! over hypotheses gives a continuous disparity (hypothesis index).

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rig::CameraRig;
use crate::sphere::{ErpGrid, HypothesisSet, SweepVolume};

/// Stitched 360 degree feature volume from one back-to-back camera pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoFeatureVolume {
    /// `C x N x H x W`.
    pub values: Array4<f64>,
    /// `N x H x W`.
    pub valid: Array3<bool>,
    /// 0-based camera indices `(i, i + 2)`.
    pub pair: (usize, usize),
    /// Contributing camera for every column.
    pub owner: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Variance,
    Concat4C,
    Concat2C,
    Regularized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    /// `C x N x H x W`; `C = 1` for [`CostKind::Regularized`].
    pub values: Array4<f64>,
    /// `N x H x W`.
    pub valid: Array3<bool>,
    pub kind: CostKind,
}

impl CostVolume {
    pub fn element_count(&self) -> usize {
        self.values.len()
    }

    pub fn hypotheses(&self) -> usize {
        self.values.dim().1
    }
}

/// Angular distance between two azimuths.
fn angle_between(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Owner of each ERP column for a back-to-back pair: the camera whose
/// optical axis is nearer in azimuth (ties to the first). Every column has
/// exactly one owner.
pub fn column_owners(width: usize, rig: &CameraRig, pair: (usize, usize)) -> Vec<usize> {
    let grid = ErpGrid::new(1, width);
    let (ya, yb) = (rig.yaw(pair.0), rig.yaw(pair.1));
    (0..width)
        .map(|c| {
            let a = grid.azimuth(c);
            if angle_between(a, ya) <= angle_between(a, yb) {
                pair.0
            } else {
                pair.1
            }
        })
        .collect()
}

/// Columns `c` whose owner differs from that of column `c - 1` (circular).
pub fn seam_columns(owner: &[usize]) -> Vec<usize> {
    let w = owner.len();
    (0..w)
        .filter(|&c| owner[c] != owner[(c + w - 1) % w])
        .collect()
}

fn check_sweeps(sweeps: &[SweepVolume; 4]) -> Result<()> {
    let d0 = sweeps[0].values.dim();
    for (i, sv) in sweeps.iter().enumerate() {
        if sv.values.dim() != d0 || sv.valid.dim() != (d0.0, d0.2, d0.3) {
            return Err(Error::DimensionMismatch(format!(
                "sweep {} has dims {:?}, expected {:?}",
                i + 1,
                sv.values.dim(),
                d0
            )));
        }
        if sv.camera != i {
            return Err(Error::DimensionMismatch(format!(
                "sweep in slot {} belongs to camera {}",
                i + 1,
                sv.camera + 1
            )));
        }
    }
    Ok(())
}

fn stitch(sweeps: &[SweepVolume; 4], rig: &CameraRig, pair: (usize, usize)) -> PanoFeatureVolume {
    let (n, c, h, w) = sweeps[0].values.dim();
    let owner = column_owners(w, rig, pair);
    let mut values = Array4::zeros((c, n, h, w));
    let mut valid = Array3::from_elem((n, h, w), false);
    for (col, &cam) in owner.iter().enumerate() {
        let src = &sweeps[cam];
        for k in 0..n {
            for ch in 0..c {
                values
                    .slice_mut(s![ch, k, .., col])
                    .assign(&src.values.slice(s![k, ch, .., col]));
            }
            valid
                .slice_mut(s![k, .., col])
                .assign(&src.valid.slice(s![k, .., col]));
        }
    }
    PanoFeatureVolume {
        values,
        valid,
        pair,
        owner,
    }
}

/// Hard-seam stitching of cameras (1, 3) and (2, 4), each contributing the
/// 180 degree azimuth band around its optical axis.
pub fn crop_and_stitch(
    sweeps: &[SweepVolume; 4],
    rig: &CameraRig,
) -> Result<(PanoFeatureVolume, PanoFeatureVolume)> {
    check_sweeps(sweeps)?;
    Ok((stitch(sweeps, rig, (0, 2)), stitch(sweeps, rig, (1, 3))))
}

/// `C x C x 3 x 3` kernel averaging each channel over its 3x3 neighbourhood.
pub fn box_gather_kernel(channels: usize) -> Array4<f64> {
    let mut k = Array4::zeros((channels, channels, 3, 3));
    for c in 0..channels {
        k.slice_mut(s![c, c, .., ..]).fill(1.0 / 9.0);
    }
    k
}

/// `C x C x 3 x 3` identity kernel.
pub fn identity_gather_kernel(channels: usize) -> Array4<f64> {
    let mut k = Array4::zeros((channels, channels, 3, 3));
    for c in 0..channels {
        k[[c, c, 1, 1]] = 1.0;
    }
    k
}

/// 3x3 correlation of every hypothesis slice with `kernel`
/// (`C_out x C_in x 3 x 3`). Azimuth wraps around, elevation is clamped. An
/// output cell is valid only if every tap the kernel actually uses is valid.
pub fn gather_3x3(v: &PanoFeatureVolume, kernel: &Array4<f64>) -> Result<PanoFeatureVolume> {
    let (c_in, n, h, w) = v.values.dim();
    let (c_out, kc_in, kh, kw) = kernel.dim();
    if kc_in != c_in || kh != 3 || kw != 3 {
        return Err(Error::DimensionMismatch(format!(
            "gather kernel {:?} incompatible with {c_in} channels",
            kernel.dim()
        )));
    }
    let used: Vec<(usize, usize)> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|&(i, j)| kernel.slice(s![.., .., i, j]).iter().any(|&x| x != 0.0))
        .collect();
    let row = |y: usize, i: usize| (y as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
    let col = |x: usize, j: usize| (x + w + j - 1) % w;

    let mut values = Array4::zeros((c_out, n, h, w));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(co, mut out)| {
            for k in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for &(i, j) in &used {
                                acc += kernel[[co, ci, i, j]] * v.values[[ci, k, row(y, i), col(x, j)]];
                            }
                        }
                        out[[k, y, x]] = acc;
                    }
                }
            }
        });
    let valid = Array3::from_shape_fn((n, h, w), |(k, y, x)| {
        used.iter().all(|&(i, j)| v.valid[[k, row(y, i), col(x, j)]])
    });
    Ok(PanoFeatureVolume {
        values,
        valid,
        pair: v.pair,
        owner: v.owner.clone(),
    })
}

/// Two-sample population variance per cell, `((a-m)^2 + (b-m)^2) / 2`.
///
/// Cells where either input is invalid receive the largest cost observed in
/// their `(channel, hypothesis)` slice, so they never win the regression.
pub fn build_variance_volume(v1: &PanoFeatureVolume, v2: &PanoFeatureVolume) -> Result<CostVolume> {
    if v1.values.dim() != v2.values.dim() || v1.valid.dim() != v2.valid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "variance inputs {:?} vs {:?}",
            v1.values.dim(),
            v2.values.dim()
        )));
    }
    let valid = Zip::from(&v1.valid).and(&v2.valid).map_collect(|&a, &b| a && b);
    let mut values = Array4::zeros(v1.values.raw_dim());
    Zip::from(values.axis_iter_mut(Axis(0)))
        .and(v1.values.axis_iter(Axis(0)))
        .and(v2.values.axis_iter(Axis(0)))
        .par_for_each(|mut out, a, b| {
            for (k, mut slice) in out.outer_iter_mut().enumerate() {
                let mask = valid.index_axis(Axis(0), k);
                let (sa, sb) = (a.index_axis(Axis(0), k), b.index_axis(Axis(0), k));
                let mut worst = f64::NEG_INFINITY;
                Zip::from(&mut slice)
                    .and(&sa)
                    .and(&sb)
                    .and(&mask)
                    .for_each(|o, &x, &y, &m| {
                        if m {
                            let mean = 0.5 * (x + y);
                            *o = 0.5 * ((x - mean) * (x - mean) + (y - mean) * (y - mean));
                            worst = worst.max(*o);
                        }
                    });
                let fill = if worst.is_finite() { worst } else { 0.0 };
                Zip::from(&mut slice).and(&mask).for_each(|o, &m| {
                    if !m {
                        *o = fill;
                    }
                });
            }
        });
    Ok(CostVolume {
        values,
        valid,
        kind: CostKind::Variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatMode {
    /// All four sweeps stacked: `4C` channels.
    FourC,
    /// 180 degree crops stitched per pair and channel-interleaved: `2C`.
    TwoCInterleaved,
}

/// Concatenation baselines, used only for size and throughput comparisons.
pub fn build_concat_volume(
    sweeps: &[SweepVolume; 4],
    rig: &CameraRig,
    mode: ConcatMode,
) -> Result<CostVolume> {
    check_sweeps(sweeps)?;
    let (n, c, h, w) = sweeps[0].values.dim();
    match mode {
        ConcatMode::FourC => {
            let mut values = Array4::zeros((4 * c, n, h, w));
            let mut valid = Array3::from_elem((n, h, w), true);
            for (i, sv) in sweeps.iter().enumerate() {
                for ch in 0..c {
                    values
                        .index_axis_mut(Axis(0), i * c + ch)
                        .assign(&sv.values.index_axis(Axis(1), ch));
                }
                Zip::from(&mut valid).and(&sv.valid).for_each(|v, &m| *v &= m);
            }
            Ok(CostVolume {
                values,
                valid,
                kind: CostKind::Concat4C,
            })
        }
        ConcatMode::TwoCInterleaved => {
            let (p1, p2) = crop_and_stitch(sweeps, rig)?;
            let mut values = Array4::zeros((2 * c, n, h, w));
            for ch in 0..c {
                values
                    .index_axis_mut(Axis(0), 2 * ch)
                    .assign(&p1.values.index_axis(Axis(0), ch));
                values
                    .index_axis_mut(Axis(0), 2 * ch + 1)
                    .assign(&p2.values.index_axis(Axis(0), ch));
            }
            let valid = Zip::from(&p1.valid).and(&p2.valid).map_collect(|&a, &b| a && b);
            Ok(CostVolume {
                values,
                valid,
                kind: CostKind::Concat2C,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizeParams {
    /// Number of smoothing passes `K`.
    pub passes: usize,
    /// Odd box window along elevation and azimuth.
    pub window: usize,
    /// Odd box window along the hypothesis axis.
    pub hypothesis_window: usize,
    /// Edge sensitivity of the guide weights `exp(-edge_weight * |dI|)`;
    /// ignored without a guide.
    pub edge_weight: f64,
    /// Output `(H, W)`.
    pub output: (usize, usize),
}

impl Default for RegularizeParams {
    fn default() -> Self {
        Self {
            passes: 32,
            window: 5,
            hypothesis_window: 1,
            edge_weight: 10.0,
            output: (crate::config::DEFAULT_HEIGHT, crate::config::DEFAULT_WIDTH),
        }
    }
}

/// Box-downsamples (or nearest-samples when not an integer factor) a guide
/// image to the cost-volume grid.
fn resample_guide(guide: &ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (gh, gw) = guide.dim();
    if gh % h == 0 && gw % w == 0 {
        let (fy, fx) = (gh / h, gw / w);
        let inv = 1.0 / (fy * fx) as f64;
        Array2::from_shape_fn((h, w), |(y, x)| {
            guide.slice(s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]).sum() * inv
        })
    } else {
        Array2::from_shape_fn((h, w), |(y, x)| guide[[y * gh / h, x * gw / w]])
    }
}

/// Weighted 1D box pass along `axis` (0 = hypothesis, 1 = row, 2 = column).
fn box_pass(
    vol: &Array3<f64>,
    axis: usize,
    radius: usize,
    guide: Option<&Array2<f64>>,
    edge_weight: f64,
) -> Array3<f64> {
    let (n, h, w) = vol.dim();
    let r = radius as isize;
    let mut out = Array3::zeros((n, h, w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(k, mut slice)| {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for o in -r..=r {
                        let (kk, yy, xx) = match axis {
                            0 => ((k as isize + o).clamp(0, n as isize - 1) as usize, y, x),
                            1 => (k, (y as isize + o).clamp(0, h as isize - 1) as usize, x),
                            _ => (k, y, (x as isize + o).rem_euclid(w as isize) as usize),
                        };
                        let wt = match (axis, guide) {
                            (1 | 2, Some(g)) => (-edge_weight * (g[[yy, xx]] - g[[y, x]]).abs()).exp(),
                            _ => 1.0,
                        };
                        acc += wt * vol[[kk, yy, xx]];
                        wsum += wt;
                    }
                    slice[[y, x]] = acc / wsum;
                }
            }
        });
    out
}

/// Bilinear resize of each slice with pixel-centre alignment; azimuth wraps,
/// elevation clamps.
fn upsample(vol: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (n, h, w) = vol.dim();
    if (h, w) == (out_h, out_w) {
        return vol.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Array3::zeros((n, out_h, out_w));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(k, mut slice)| {
            for y in 0..out_h {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = (fy.floor() as usize).min(h.saturating_sub(2));
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f64;
                for x in 0..out_w {
                    let fx = (x as f64 + 0.5) * sx - 0.5;
                    let x0f = fx.floor();
                    let tx = fx - x0f;
                    let x0 = (x0f as isize).rem_euclid(w as isize) as usize;
                    let x1 = (x0 + 1) % w;
                    let top = vol[[k, y0, x0]] * (1.0 - tx) + vol[[k, y0, x1]] * tx;
                    let bot = vol[[k, y1, x0]] * (1.0 - tx) + vol[[k, y1, x1]] * tx;
                    slice[[y, x]] = top * (1.0 - ty) + bot * ty;
                }
            }
        });
    out
}

/// Non-learned regularizer: channel mean, `K` separable box passes
/// (optionally edge-aware from `guide`), bilinear upsampling to the output
/// size.
pub fn regularize(
    cost: &CostVolume,
    guide: Option<&ArrayView2<f64>>,
    params: &RegularizeParams,
) -> Result<CostVolume> {
    if cost.kind != CostKind::Variance {
        return Err(Error::DimensionMismatch(format!(
            "regularize expects a variance volume, got {:?}",
            cost.kind
        )));
    }
    if params.window % 2 == 0 || params.hypothesis_window % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "smoothing windows must be odd, got {} and {}",
            params.window, params.hypothesis_window
        )));
    }
    let (_, n, h, w) = cost.values.dim();
    let mut vol = cost.values.mean_axis(Axis(0)).expect("non-empty channel axis");
    let guide = guide.map(|g| resample_guide(g, h, w));
    for _ in 0..params.passes {
        for axis in 0..3 {
            let radius = if axis == 0 { params.hypothesis_window } else { params.window } / 2;
            if radius > 0 {
                vol = box_pass(&vol, axis, radius, guide.as_ref(), params.edge_weight);
            }
        }
    }
    let (oh, ow) = params.output;
    let up = upsample(&vol, oh, ow);
    let valid = Array3::from_shape_fn((n, oh, ow), |(k, y, x)| {
        cost.valid[[k, (y * h / oh).min(h - 1), (x * w / ow).min(w - 1)]]
    });
    Ok(CostVolume {
        values: up.insert_axis(Axis(0)),
        valid,
        kind: CostKind::Regularized,
    })
}

/// Continuous hypothesis-index field with its inverse-depth mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    /// `H x W`, each in `[0, N-1]`.
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
    pub hypotheses: HypothesisSet,
}

impl DisparityMap {
    /// From an inverse-depth field; indices are clamped to `[0, N-1]`.
    pub fn from_inverse_depth(inv: &ArrayView2<f64>, hypotheses: &HypothesisSet) -> Self {
        let max = (hypotheses.len() - 1) as f64;
        Self {
            values: inv.mapv(|v| hypotheses.inverse_depth_to_index(v).clamp(0.0, max)),
            valid: Array2::from_elem(inv.raw_dim(), true),
            hypotheses: hypotheses.clone(),
        }
    }

    pub fn from_depth(depth: &ArrayView2<f64>, hypotheses: &HypothesisSet) -> Self {
        Self::from_inverse_depth(&depth.mapv(|d| 1.0 / d).view(), hypotheses)
    }

    pub fn inverse_depth(&self) -> Array2<f64> {
        self.values.mapv(|d| self.hypotheses.index_to_inverse_depth(d))
    }

    pub fn depth(&self) -> Array2<f64> {
        self.values.mapv(|d| self.hypotheses.index_to_depth(d))
    }

    pub fn grid(&self) -> ErpGrid {
        let (h, w) = self.values.dim();
        ErpGrid::new(h, w)
    }
}

fn single_channel(v: &CostVolume) -> Result<ArrayView3<'_, f64>> {
    if v.values.dim().0 != 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected a single-channel volume, got {} channels",
            v.values.dim().0
        )));
    }
    Ok(v.values.index_axis(Axis(0), 0))
}

/// `D = sum_n n * softmax(-V / temperature)_n` per pixel.
///
/// A pixel is valid when at least one hypothesis was valid.
pub fn softargmin_regress(
    v_star: &CostVolume,
    temperature: f64,
    hypotheses: &HypothesisSet,
) -> Result<DisparityMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let vol = single_channel(v_star)?;
    let (n, h, w) = vol.dim();
    if n != hypotheses.len() {
        return Err(Error::DimensionMismatch(format!(
            "volume has {n} hypotheses, set has {}",
            hypotheses.len()
        )));
    }
    let mut values = Array2::zeros((h, w));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(y, mut row)| {
            for x in 0..w {
                let costs = vol.slice(s![.., y, x]);
                let min = costs.fold(f64::INFINITY, |m, &c| m.min(c));
                let mut num = 0.0;
                let mut den = 0.0;
                for (k, &c) in costs.iter().enumerate() {
                    let p = (-(c - min) / temperature).exp();
                    num += k as f64 * p;
                    den += p;
                }
                row[x] = num / den;
            }
        });
    let valid = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..n).any(|k| v_star.valid[[k, y, x]])
    });
    Ok(DisparityMap {
        values,
        valid,
        hypotheses: hypotheses.clone(),
    })
}

/// Hard argmin per pixel, ties to the smaller index.
pub fn argmin_indices(v_star: &CostVolume) -> Result<Array2<usize>> {
    let vol = single_channel(v_star)?;
    let (_, h, w) = vol.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for (k, &c) in vol.slice(s![.., y, x]).iter().enumerate() {
            if c < vol[[best, y, x]] {
                best = k;
            }
        }
        best
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::FisheyeIntrinsics;
    use crate::sphere::make_hypotheses;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        let intr = FisheyeIntrinsics::new(vec![60.0], (95.5, 95.5), (192, 192), 220.0, 1).unwrap();
        CameraRig::cardinal(intr, 0.2).unwrap()
    }

    fn constant_sweeps(vals: [f64; 4], n: usize, c: usize, h: usize, w: usize) -> [SweepVolume; 4] {
        std::array::from_fn(|i| SweepVolume {
            camera: i,
            values: Array4::from_elem((n, c, h, w), vals[i]),
            valid: Array3::from_elem((n, h, w), true),
        })
    }

    fn pano(values: Array4<f64>) -> PanoFeatureVolume {
        let (_, n, h, w) = values.dim();
        PanoFeatureVolume {
            values,
            valid: Array3::from_elem((n, h, w), true),
            pair: (0, 2),
            owner: vec![0; w],
        }
    }

    #[test]
    fn stitch_two_bands() {
        let sweeps = constant_sweeps([1.0, 2.0, 3.0, 4.0], 2, 1, 4, 16);
        let (p1, p2) = crop_and_stitch(&sweeps, &rig()).unwrap();
        let row1: Vec<f64> = p1.values.slice(s![0, 0, 0, ..]).to_vec();
        let row2: Vec<f64> = p2.values.slice(s![0, 0, 0, ..]).to_vec();
        // Pair (1, 3): camera 1 owns |azimuth| < 90 deg, columns [W/4, 3W/4).
        let expect1: Vec<f64> = (0..16).map(|c| if (4..12).contains(&c) { 1.0 } else { 3.0 }).collect();
        // Pair (2, 4): camera 2 owns azimuth in (0, 180), columns [W/2, W).
        let expect2: Vec<f64> = (0..16).map(|c| if c >= 8 { 2.0 } else { 4.0 }).collect();
        assert_eq!(row1, expect1);
        assert_eq!(row2, expect2);
    }

    #[test]
    fn seams_partition_columns() {
        let r = rig();
        for w in [16, 64, 160, 640] {
            for pair in [(0, 2), (1, 3)] {
                let owner = column_owners(w, &r, pair);
                let a = owner.iter().filter(|&&o| o == pair.0).count();
                let b = owner.iter().filter(|&&o| o == pair.1).count();
                assert_eq!(a + b, w);
                assert_eq!(a, w / 2);
                assert_eq!(seam_columns(&owner).len(), 2);
            }
            let o2 = column_owners(w, &r, (1, 3));
            assert_eq!(seam_columns(&o2), vec![0, w / 2]);
        }
    }

    #[test]
    fn stitch_rejects_mismatched_dims() {
        let mut sweeps = constant_sweeps([1.0; 4], 2, 1, 4, 16);
        sweeps[2].values = Array4::zeros((2, 1, 4, 8));
        assert!(crop_and_stitch(&sweeps, &rig()).is_err());
    }

    #[test]
    fn gather_identity_and_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = pano(Array4::from_shape_fn((2, 3, 5, 8), |_| rng.random::<f64>()));
        let same = gather_3x3(&v, &identity_gather_kernel(2)).unwrap();
        assert_eq!(same.values, v.values);
        assert_eq!(same.valid, v.valid);

        let flat = pano(Array4::from_elem((2, 3, 5, 8), 0.7));
        let avg = gather_3x3(&flat, &box_gather_kernel(2)).unwrap();
        assert!(avg.values.iter().all(|x| (x - 0.7).abs() < 1e-15));
    }

    #[test]
    fn gather_impulse_plateau() {
        let mut vals = Array4::zeros((1, 1, 7, 9));
        vals[[0, 0, 3, 0]] = 1.0;
        let out = gather_3x3(&pano(vals), &box_gather_kernel(1)).unwrap();
        // Oracle: direct enumeration of the 3x3 footprint, wrapping in azimuth.
        for y in 0..7 {
            for x in 0..9 {
                let inside = (2..=4).contains(&y) && [8, 0, 1].contains(&x);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((out.values[[0, 0, y, x]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gather_erodes_mask() {
        let mut v = pano(Array4::from_elem((1, 1, 6, 6), 1.0));
        v.valid[[0, 2, 2]] = false;
        let out = gather_3x3(&v, &box_gather_kernel(1)).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let near = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(out.valid[[0, y, x]], !near);
            }
        }
    }

    /// Brute-force population variance of a sample.
    fn population_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn variance_examples() {
        let a = pano(Array4::from_elem((1, 1, 1, 1), 3.0));
        let b = pano(Array4::from_elem((1, 1, 1, 1), 1.0));
        let v = build_variance_volume(&a, &b).unwrap();
        assert_eq!(v.values[[0, 0, 0, 0]], 1.0);
        assert_eq!(v.kind, CostKind::Variance);
        let same = build_variance_volume(&a, &a).unwrap();
        assert_eq!(same.values[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn variance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = pano(Array4::from_shape_fn((4, 4, 8, 8), |_| rng.random_range(-3.0..3.0)));
        let b = pano(Array4::from_shape_fn((4, 4, 8, 8), |_| rng.random_range(-3.0..3.0)));
        let v = build_variance_volume(&a, &b).unwrap();
        for (idx, &got) in v.values.indexed_iter() {
            let want = population_variance(&[a.values[idx], b.values[idx]]);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_fills_invalid_with_slice_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = pano(Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random::<f64>()));
        let mut b = pano(Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random::<f64>()));
        b.valid[[1, 2, 3]] = false;
        let v = build_variance_volume(&a, &b).unwrap();
        assert!(!v.valid[[1, 2, 3]]);
        for ch in 0..2 {
            let mut max = f64::NEG_INFINITY;
            for y in 0..4 {
                for x in 0..4 {
                    if (y, x) != (2, 3) {
                        max = max.max(v.values[[ch, 1, y, x]]);
                    }
                }
            }
            assert_eq!(v.values[[ch, 1, 2, 3]], max);
        }
    }

    #[test]
    fn concat_channel_counts_and_footprint() {
        let sweeps = constant_sweeps([1.0, 2.0, 3.0, 4.0], 3, 5, 4, 16);
        let r = rig();
        let c4 = build_concat_volume(&sweeps, &r, ConcatMode::FourC).unwrap();
        let c2 = build_concat_volume(&sweeps, &r, ConcatMode::TwoCInterleaved).unwrap();
        let (p1, p2) = crop_and_stitch(&sweeps, &r).unwrap();
        let var = build_variance_volume(&p1, &p2).unwrap();
        assert_eq!(c4.values.dim().0, 20);
        assert_eq!(c2.values.dim().0, 10);
        assert_eq!(c4.element_count(), 4 * var.element_count());
        assert_eq!(c2.element_count(), 2 * var.element_count());
        // Interleaving: even channels from pair (1, 3), odd from (2, 4).
        assert_eq!(c2.values.slice(s![0, 0, 0, ..]), p1.values.slice(s![0, 0, 0, ..]));
        assert_eq!(c2.values.slice(s![1, 0, 0, ..]), p2.values.slice(s![0, 0, 0, ..]));
    }

    fn variance_kind(values: Array4<f64>) -> CostVolume {
        let (_, n, h, w) = values.dim();
        CostVolume {
            values,
            valid: Array3::from_elem((n, h, w), true),
            kind: CostKind::Variance,
        }
    }

    #[test]
    fn regularize_identity_without_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = variance_kind(Array4::from_shape_fn((1, 4, 6, 8), |_| rng.random::<f64>()));
        let params = RegularizeParams {
            passes: 0,
            output: (6, 8),
            ..Default::default()
        };
        let out = regularize(&v, None, &params).unwrap();
        assert_eq!(out.kind, CostKind::Regularized);
        assert_eq!(out.values, v.values);
    }

    #[test]
    fn regularize_impulse_gives_27_cell_plateau() {
        let mut vals = Array4::zeros((1, 5, 7, 9));
        vals[[0, 2, 3, 4]] = 27.0;
        let params = RegularizeParams {
            passes: 1,
            window: 3,
            hypothesis_window: 3,
            output: (7, 9),
            ..Default::default()
        };
        let out = regularize(&variance_kind(vals), None, &params).unwrap();
        let mut plateau = 0;
        for ((_, k, y, x), &v) in out.values.indexed_iter() {
            let inside = (1..=3).contains(&k) && (2..=4).contains(&y) && (3..=5).contains(&x);
            if inside {
                assert!((v - 1.0).abs() < 1e-12);
                plateau += 1;
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
        assert_eq!(plateau, 27);
    }

    #[test]
    fn regularize_keeps_constant_slices() {
        let costs = [9.0, 9.0, 9.0, 0.0, 9.0, 9.0, 9.0];
        let v = variance_kind(Array4::from_shape_fn((2, 7, 5, 8), |(_, k, _, _)| costs[k]));
        let guide = Array2::from_shape_fn((10, 16), |(y, x)| ((x * 7 + y * 3) % 5) as f64);
        let params = RegularizeParams {
            passes: 3,
            output: (10, 16),
            ..Default::default()
        };
        let out = regularize(&v, Some(&guide.view()), &params).unwrap();
        let arg = argmin_indices(&out).unwrap();
        assert!(arg.iter().all(|&k| k == 3));
    }

    fn regularized(values: Array3<f64>) -> CostVolume {
        let (n, h, w) = values.dim();
        CostVolume {
            values: values.insert_axis(Axis(0)),
            valid: Array3::from_elem((n, h, w), true),
            kind: CostKind::Regularized,
        }
    }

    #[test]
    fn softargmin_examples() {
        let hyp = make_hypotheses(32, 0.55, 1e5).unwrap();
        let mut spike = Array3::zeros((32, 1, 1));
        spike[[5, 0, 0]] = -1e9;
        let d = softargmin_regress(&regularized(spike), 1.0, &hyp).unwrap();
        assert!((d.values[[0, 0]] - 5.0).abs() < 1e-6);

        let flat = Array3::from_elem((32, 1, 2), 0.3);
        let d = softargmin_regress(&regularized(flat), 1.0, &hyp).unwrap();
        assert_eq!(d.values[[0, 0]], 15.5);

        let mut two = Array3::from_elem((32, 1, 1), 1e9);
        two[[3, 0, 0]] = 0.0;
        two[[7, 0, 0]] = 0.0;
        let d = softargmin_regress(&regularized(two), 1.0, &hyp).unwrap();
        assert!((d.values[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn argmin_ties_break_low() {
        let mut v = Array3::from_elem((6, 1, 1), 2.0);
        v[[4, 0, 0]] = 1.0;
        v[[1, 0, 0]] = 1.0;
        assert_eq!(argmin_indices(&regularized(v)).unwrap()[[0, 0]], 1);
    }

    proptest! {
        #[test]
        fn softargmin_shift_invariant(
            costs in proptest::collection::vec(-256i32..256, 8),
            shift in -1000i32..1000,
        ) {
            let hyp = make_hypotheses(8, 1.0, 10.0).unwrap();
            let a = Array3::from_shape_fn((8, 1, 1), |(k, _, _)| costs[k] as f64 / 64.0);
            let b = a.mapv(|v| v + shift as f64);
            let da = softargmin_regress(&regularized(a), 0.7, &hyp).unwrap();
            let db = softargmin_regress(&regularized(b), 0.7, &hyp).unwrap();
            prop_assert_eq!(da.values[[0, 0]].to_bits(), db.values[[0, 0]].to_bits());
        }

        #[test]
        fn low_temperature_approaches_argmin(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let mut costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let best = rng.random_range(0..n);
            costs[best] = -0.05;
            let hyp = make_hypotheses(n, 1.0, 10.0).unwrap();
            let v = regularized(Array3::from_shape_fn((n, 1, 1), |(k, _, _)| costs[k]));
            let d = softargmin_regress(&v, 1e-3, &hyp).unwrap();
            prop_assert!((d.values[[0, 0]] - best as f64).abs() < 1e-3);
            prop_assert_eq!(argmin_indices(&v).unwrap()[[0, 0]], best);
        }

        #[test]
        fn variance_is_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = pano(Array4::from_shape_fn((2, 2, 3, 4), |_| rng.random_range(-5.0..5.0)));
            let b = pano(Array4::from_shape_fn((2, 2, 3, 4), |_| rng.random_range(-5.0..5.0)));
            let ab = build_variance_volume(&a, &b).unwrap();
            let ba = build_variance_volume(&b, &a).unwrap();
            prop_assert_eq!(&ab.values, &ba.values);
            prop_assert!(ab.values.iter().all(|&v| v >= 0.0));
        }
    }
}
