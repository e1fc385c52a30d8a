//! Disparity error metrics in hypothesis-index units.

use std::fmt;

use ndarray::Zip;

use crate::cost::DisparityMap;
use crate::error::{Error, Result};
use crate::sum::{sum_rows, CompensatedSum};

/// Per-pixel errors `|D_gt - D|` aggregated over the joint valid mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rms: f64,
    /// Percent of pixels with error above 1, 3 and 5 indices.
    pub ratio_gt1: f64,
    pub ratio_gt3: f64,
    pub ratio_gt5: f64,
    pub pixels: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mae={:.6} rms={:.6} gt1={:.4} gt3={:.4} gt5={:.4} pixels={}",
            self.mae, self.rms, self.ratio_gt1, self.ratio_gt3, self.ratio_gt5, self.pixels
        )
    }
}

pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricsReport> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    let (h, w) = pred.values.dim();
    let mut err = ndarray::Array2::<f64>::from_elem((h, w), f64::NAN);
    Zip::from(&mut err)
        .and(&pred.values)
        .and(&gt.values)
        .and(&pred.valid)
        .and(&gt.valid)
        .for_each(|e, &p, &g, &vp, &vg| {
            if vp && vg {
                *e = (g - p).abs();
            }
        });
    let row_sum = |f: fn(f64) -> f64| {
        sum_rows(h, |r| {
            err.row(r)
                .iter()
                .filter(|e| !e.is_nan())
                .map(|&e| f(e))
                .collect::<CompensatedSum>()
        })
    };
    let n = err.iter().filter(|e| !e.is_nan()).count();
    if n == 0 {
        return Err(Error::EmptyMask("metrics"));
    }
    let count_above = |t: f64| err.iter().filter(|&&e| e > t).count();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let mae = row_sum(|e| e) / n as f64;
    // Equal errors can round the root mean square one ulp below the mean.
    let rms = (row_sum(|e| e * e) / n as f64).sqrt().max(mae);
    Ok(MetricsReport {
        mae,
        rms,
        ratio_gt1: pct(count_above(1.0)),
        ratio_gt3: pct(count_above(3.0)),
        ratio_gt5: pct(count_above(5.0)),
        pixels: n,
    })
}
