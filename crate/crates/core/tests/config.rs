use omnisweep::config::*;
use omnisweep::pipeline::EstimateConfig;
use omnisweep::pseudo_stereo::LossConfig;
use omnisweep::refine::RefineConfig;

#[test]
fn paper_defaults() {
    assert_eq!(DEFAULT_HYPOTHESES, 32);
    assert_eq!(DEFAULT_D_MIN, 0.55);
    assert_eq!(DEFAULT_D_MAX, 1e5);
    assert_eq!((DEFAULT_WIDTH, DEFAULT_HEIGHT), (640, 320));
    assert_eq!(DEFAULT_ALPHA, 0.85);
    assert_eq!(DEFAULT_BETA, (1.0, 2.0, 1.0));
}

#[test]
fn default_configs_use_the_constants() {
    let est = EstimateConfig::default();
    assert_eq!(est.hypotheses.len(), DEFAULT_HYPOTHESES);
    assert_eq!(est.hypotheses.depth(0), DEFAULT_D_MIN);
    assert!((est.hypotheses.depth(DEFAULT_HYPOTHESES - 1) - DEFAULT_D_MAX).abs() < 1e-6 * DEFAULT_D_MAX);
    assert_eq!((est.output.height, est.output.width), (DEFAULT_HEIGHT, DEFAULT_WIDTH));
    assert_eq!(est.regularize.output, (DEFAULT_HEIGHT, DEFAULT_WIDTH));

    let loss = LossConfig::default();
    assert_eq!((loss.alpha, loss.beta), (DEFAULT_ALPHA, DEFAULT_BETA));

    let r = RefineConfig::default();
    assert_eq!((r.step_size, r.max_iters, r.decays), (1e-2, 300, (0.9, 0.999)));
    assert_eq!((r.tolerance, r.window), (1e-5, 10));
    r.validate().unwrap();
}

#[test]
fn invalid_refine_configs_are_rejected() {
    let base = RefineConfig::default();
    for cfg in [
        RefineConfig { step_size: -1.0, ..base.clone() },
        RefineConfig { decays: (1.0, 0.999), ..base.clone() },
        RefineConfig { decays: (0.9, 0.0), ..base.clone() },
        RefineConfig { window: 0, ..base.clone() },
        RefineConfig { epsilon: 0.0, ..base.clone() },
    ] {
        assert!(cfg.validate().is_err());
    }
}
