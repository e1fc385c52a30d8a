use omnisweep::cost::DisparityMap;
use omnisweep::metrics::compute_metrics;
use omnisweep::pipeline::*;
use omnisweep::scene::{render_scene, synthetic_rig, SyntheticScene};
use omnisweep::sphere::{make_hypotheses, ErpGrid};

#[test]
fn sphere_disparity_is_correct_on_the_equator() {
    let rig = synthetic_rig();
    let cfg = EstimateConfig::default();
    let k = 22;
    let radius = cfg.hypotheses.depth(k);
    let r = render_scene(&SyntheticScene::sphere(radius), &rig, &cfg.output).unwrap();
    let disp = estimate_disparity(&r.fisheyes, &rig, &cfg).unwrap();
    let (mut hit, mut n) = (0, 0);
    let mid = cfg.output.height / 2;
    for row in mid - 8..mid + 8 {
        for col in 0..cfg.output.width {
            if disp.valid[[row, col]] {
                n += 1;
                hit += usize::from(disp.values[[row, col]].round() as usize == k);
            }
        }
    }
    assert!(n > cfg.output.width, "{n}");
    assert!(hit as f64 >= 0.95 * n as f64, "{hit}/{n}");
}

#[test]
fn depth_index_roundtrip() {
    let hyp = make_hypotheses(32, 0.55, 1e5).unwrap();
    let depth = ndarray::Array2::from_shape_fn((4, 8), |(r, c)| 0.6 + 0.37 * (r * 8 + c) as f64);
    let back = DisparityMap::from_depth(&depth.view(), &hyp).depth();
    for (a, b) in back.iter().zip(depth.iter()) {
        assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
    }
}

#[test]
fn estimation_is_deterministic() {
    let rig = synthetic_rig();
    let grid = ErpGrid::new(40, 80);
    let r = render_scene(&SyntheticScene::box_room(4.0, 3.0, 4.0), &rig, &grid).unwrap();
    let mut cfg = EstimateConfig {
        sweep_grid: ErpGrid::new(20, 40),
        output: grid,
        ..EstimateConfig::default()
    };
    cfg.regularize.output = (grid.height, grid.width);
    let a = estimate_disparity(&r.fisheyes, &rig, &cfg).unwrap();
    let b = estimate_disparity(&r.fisheyes, &rig, &cfg).unwrap();
    assert_eq!(a, b);
    let gt = DisparityMap::from_depth(&r.gt_depth.view(), &cfg.hypotheses);
    assert_eq!(compute_metrics(&a, &gt).unwrap(), compute_metrics(&b, &gt).unwrap());
}
