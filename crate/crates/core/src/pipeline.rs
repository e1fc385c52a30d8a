//! Sweep-stereo estimation from four fisheye images.

use ndarray::Array2;

use crate::config;
use crate::cost::{
    box_gather_kernel, build_variance_volume, crop_and_stitch, gather_3x3, regularize,
    softargmin_regress, CostVolume, DisparityMap, RegularizeParams,
};
use crate::error::Result;
use crate::features::{
    default_fam_weights, extract_features_scaled, frequency_attention, FamWeights, FeatureMap,
    DEFAULT_FEATURE_SCALE,
};
use crate::rig::CameraRig;
use crate::sphere::{make_hypotheses, sweep_warp, ErpGrid, HypothesisSet, SweepVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateConfig {
    pub hypotheses: HypothesisSet,
    /// ERP grid of the sweep and cost volume.
    pub sweep_grid: ErpGrid,
    /// Output disparity grid.
    pub output: ErpGrid,
    pub feature_scale: usize,
    /// `None` skips frequency attention.
    pub fam: Option<FamWeights>,
    /// 3x3 neighbourhood averaging of the stitched volumes before the variance.
    pub gather: bool,
    pub regularize: RegularizeParams,
    pub temperature: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        let output = ErpGrid::new(config::DEFAULT_HEIGHT, config::DEFAULT_WIDTH);
        Self {
            hypotheses: make_hypotheses(
                config::DEFAULT_HYPOTHESES,
                config::DEFAULT_D_MIN,
                config::DEFAULT_D_MAX,
            )
            .expect("default hypotheses are valid"),
            sweep_grid: ErpGrid::new(config::DEFAULT_HEIGHT / 2, config::DEFAULT_WIDTH / 2),
            output,
            feature_scale: DEFAULT_FEATURE_SCALE,
            fam: Some(default_fam_weights()),
            gather: false,
            regularize: RegularizeParams {
                output: (output.height, output.width),
                ..RegularizeParams::default()
            },
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Softargmin temperature in cost units of the standardized features.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

pub fn extract_all(
    fisheyes: &[Array2<f64>; 4],
    scale: usize,
    fam: Option<&FamWeights>,
) -> Result<[FeatureMap; 4]> {
    let mut out = Vec::with_capacity(4);
    for img in fisheyes {
        let f = extract_features_scaled(&img.view(), scale)?;
        out.push(match fam {
            Some(w) => frequency_attention(&f, w)?,
            None => f,
        });
    }
    Ok(out.try_into().expect("four feature maps"))
}

pub fn sweep_all(
    features: &[FeatureMap; 4],
    rig: &CameraRig,
    grid: &ErpGrid,
    hypotheses: &HypothesisSet,
) -> Result<[SweepVolume; 4]> {
    let mut out = Vec::with_capacity(4);
    for (i, f) in features.iter().enumerate() {
        out.push(sweep_warp(&f.values.view(), f.scale, rig, i, grid, hypotheses)?);
    }
    Ok(out.try_into().expect("four sweeps"))
}

/// Variance cost volume from four sweeps.
pub fn variance_volume(sweeps: &[SweepVolume; 4], rig: &CameraRig, gather: bool) -> Result<CostVolume> {
    let (mut p1, mut p2) = crop_and_stitch(sweeps, rig)?;
    if gather {
        let k = box_gather_kernel(p1.values.dim().0);
        p1 = gather_3x3(&p1, &k)?;
        p2 = gather_3x3(&p2, &k)?;
    }
    build_variance_volume(&p1, &p2)
}

/// Features, sweep, variance, regularization and softargmin.
pub fn estimate_disparity(
    fisheyes: &[Array2<f64>; 4],
    rig: &CameraRig,
    cfg: &EstimateConfig,
) -> Result<DisparityMap> {
    let features = extract_all(fisheyes, cfg.feature_scale, cfg.fam.as_ref())?;
    let sweeps = sweep_all(&features, rig, &cfg.sweep_grid, &cfg.hypotheses)?;
    let cost = variance_volume(&sweeps, rig, cfg.gather)?;
    drop(sweeps);
    let mut params = cfg.regularize.clone();
    params.output = (cfg.output.height, cfg.output.width);
    let v_star = regularize(&cost, None, &params)?;
    softargmin_regress(&v_star, cfg.temperature, &cfg.hypotheses)
}
