//! Default pipeline settings.

/// Sweep hypotheses `N`.
pub const DEFAULT_HYPOTHESES: usize = 32;
/// Nearest sweep depth in metres.
pub const DEFAULT_D_MIN: f64 = 0.55;
/// Farthest sweep depth in metres.
pub const DEFAULT_D_MAX: f64 = 1e5;
/// Output ERP height.
pub const DEFAULT_HEIGHT: usize = 320;
/// Output ERP width.
pub const DEFAULT_WIDTH: usize = 640;
/// SSIM weight in the photometric term.
pub const DEFAULT_ALPHA: f64 = 0.85;
/// Weights of the photometric, smoothness and gradient terms.
pub const DEFAULT_BETA: (f64, f64, f64) = (1.0, 2.0, 1.0);
