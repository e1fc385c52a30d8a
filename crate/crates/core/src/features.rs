//! Hand-crafted fisheye features and the frequency attention module (FAM).
//!
//! The FAM gates the 2D spectrum of a feature map: channel-wise average and
//! max pooling of the spectral magnitude give a two-channel map per frequency
//! bin, a small convolution plus sigmoid turns it into a gate, and the gated
//! spectrum is transformed back.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Default feature downsampling: two 2x reductions.
pub const DEFAULT_FEATURE_SCALE: usize = 4;
/// Number of descriptive channels produced by [`extract_features`].
pub const FEATURE_CHANNELS: usize = 4;
/// Standard-deviation floor used when standardizing channels.
pub const STANDARDIZE_EPS: f64 = 1e-6;
/// Default gate kernel size.
pub const DEFAULT_FAM_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `C x H x W`.
    pub values: Array3<f64>,
    /// Downsampling factor relative to the input image.
    pub scale: usize,
}

impl FeatureMap {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Features at the default scale.
pub fn extract_features(image: &ArrayView2<f64>) -> Result<FeatureMap> {
    extract_features_scaled(image, DEFAULT_FEATURE_SCALE)
}

/// Box-downsampled intensity, horizontal and vertical central gradients and
/// 3x3 local standard deviation, each standardized per image.
pub fn extract_features_scaled(image: &ArrayView2<f64>, scale: usize) -> Result<FeatureMap> {
    let mut values = raw_features(image, scale)?;
    for mut ch in values.outer_iter_mut() {
        let n = ch.len() as f64;
        let mean = ch.sum() / n;
        let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(STANDARDIZE_EPS);
        ch.mapv_inplace(|x| (x - mean) / sd);
    }
    Ok(FeatureMap { values, scale })
}

/// Channels before standardization.
pub fn raw_features(image: &ArrayView2<f64>, scale: usize) -> Result<Array3<f64>> {
    if ![1, 2, 4].contains(&scale) {
        return Err(Error::DimensionMismatch(format!(
            "feature scale must be 1, 2 or 4, got {scale}"
        )));
    }
    let (rows, cols) = image.dim();
    let (h, w) = (rows / scale, cols / scale);
    if h < 3 || w < 3 {
        return Err(Error::DimensionMismatch(format!(
            "image {rows}x{cols} too small for scale {scale}"
        )));
    }
    let inv = 1.0 / (scale * scale) as f64;
    let small = Array2::from_shape_fn((h, w), |(r, c)| {
        image
            .slice(s![r * scale..(r + 1) * scale, c * scale..(c + 1) * scale])
            .sum()
            * inv
    });
    let at = |r: isize, c: isize| {
        small[[
            r.clamp(0, h as isize - 1) as usize,
            c.clamp(0, w as isize - 1) as usize,
        ]]
    };
    let mut out = Array3::zeros((FEATURE_CHANNELS, h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (ru, cu) = (r as usize, c as usize);
            out[[0, ru, cu]] = small[[ru, cu]];
            out[[1, ru, cu]] = 0.5 * (at(r, c + 1) - at(r, c - 1));
            out[[2, ru, cu]] = 0.5 * (at(r + 1, c) - at(r - 1, c));
            let mut s1 = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    s1 += at(r + dr, c + dc);
                }
            }
            let m = s1 / 9.0;
            let mut s2 = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let d = at(r + dr, c + dc) - m;
                    s2 += d * d;
                }
            }
            out[[3, ru, cu]] = (s2 / 9.0).sqrt();
        }
    }
    Ok(out)
}

/// Gate parameters: a `2 x k x k` kernel over (avg, max) pooled magnitude
/// and a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FamWeights {
    pub attention_kernel: Array3<f64>,
    pub bias: f64,
}

impl FamWeights {
    pub fn new(attention_kernel: Array3<f64>, bias: f64) -> Result<Self> {
        let (c, kh, kw) = attention_kernel.dim();
        if c != 2 || kh != kw || kh % 2 == 0 {
            return Err(Error::DimensionMismatch(format!(
                "attention kernel must be 2 x k x k with odd k, got {c}x{kh}x{kw}"
            )));
        }
        if !bias.is_finite() || attention_kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite FAM weights".into()));
        }
        Ok(Self {
            attention_kernel,
            bias,
        })
    }

    pub fn zeros(k: usize) -> Self {
        Self::new(Array3::zeros((2, k, k)), 0.0).expect("odd kernel")
    }

    pub fn kernel_size(&self) -> usize {
        self.attention_kernel.dim().1
    }

    /// Binary layout (little-endian): magic `FAMW`, dtype code `u32 = 8`
    /// (f64), `u32` ndims = 3, three `u32` dims, the row-major kernel, then
    /// the bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, kh, kw) = self.attention_kernel.dim();
        let mut out = Vec::with_capacity(24 + 8 * (c * kh * kw + 1));
        out.extend_from_slice(b"FAMW");
        for v in [8u32, 3, c as u32, kh as u32, kw as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.attention_kernel.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.bias.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::malformed(origin, why);
        if bytes.len() < 24 || &bytes[..4] != b"FAMW" {
            return Err(bad("missing FAMW header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != 8 || word(1) != 3 {
            return Err(bad("expected f64 kernel with 3 dims"));
        }
        let dims = (word(2) as usize, word(3) as usize, word(4) as usize);
        let count = dims
            .0
            .checked_mul(dims.1)
            .and_then(|x| x.checked_mul(dims.2))
            .ok_or_else(|| bad("dimension overflow"))?;
        if bytes.len() != 24 + 8 * (count + 1) {
            return Err(bad("payload length does not match header"));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[24 + 8 * i..32 + 8 * i].try_into().unwrap());
        let kernel = Array3::from_shape_vec(dims, (0..count).map(f).collect())
            .map_err(|e| bad(&e.to_string()))?;
        Self::new(kernel, f(count))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Fixture used when no weight file is supplied: a normalized 7x7 Gaussian
/// (sigma 1.5) split evenly between the avg and max inputs, bias +1.
///
/// Strong low-frequency magnitudes push the gate towards 1 while weak high
/// frequencies stay near `sigmoid(1)`.
pub fn default_fam_weights() -> FamWeights {
    let k = DEFAULT_FAM_KERNEL;
    let half = (k / 2) as f64;
    let sigma = 1.5;
    let mut g = Array2::from_shape_fn((k, k), |(i, j)| {
        let (di, dj) = (i as f64 - half, j as f64 - half);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let total = g.sum();
    g.mapv_inplace(|v| v / total);
    let mut kernel = Array3::zeros((2, k, k));
    kernel.slice_mut(s![0, .., ..]).assign(&(&g * 0.5));
    kernel.slice_mut(s![1, .., ..]).assign(&(&g * 0.5));
    FamWeights::new(kernel, 1.0).expect("fixture is valid")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place 2D DFT (unnormalized in both directions).
fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        row_fft.process(slice);
    }
    let mut buf = vec![Complex64::default(); h];
    for mut col in data.columns_mut() {
        for (b, v) in buf.iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf);
        for (v, b) in col.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

fn spectra(f: &FeatureMap) -> Vec<Array2<Complex64>> {
    f.values
        .outer_iter()
        .into_par_iter()
        .map(|ch| {
            let mut spec = ch.mapv(|v| Complex64::new(v, 0.0));
            fft2(&mut spec, false);
            spec
        })
        .collect()
}

fn gate_from_spectra(specs: &[Array2<Complex64>], w: &FamWeights) -> Array2<f64> {
    let (h, wd) = specs[0].dim();
    let norm = 1.0 / ((h * wd) as f64).sqrt();
    let c = specs.len() as f64;
    let mut avg = Array2::<f64>::zeros((h, wd));
    let mut max = Array2::<f64>::zeros((h, wd));
    for spec in specs {
        Zip::from(&mut avg)
            .and(&mut max)
            .and(spec)
            .for_each(|a, m, z| {
                let mag = z.norm() * norm;
                *a += mag / c;
                *m = m.max(mag);
            });
    }
    // Circular correlation over the periodic frequency grid.
    let k = w.kernel_size();
    let r = (k / 2) as isize;
    let logits = Array2::from_shape_fn((h, wd), |(y, x)| {
        let mut acc = w.bias;
        for i in 0..k {
            let yy = (y as isize + i as isize - r).rem_euclid(h as isize) as usize;
            for j in 0..k {
                let xx = (x as isize + j as isize - r).rem_euclid(wd as isize) as usize;
                acc += w.attention_kernel[[0, i, j]] * avg[[yy, xx]]
                    + w.attention_kernel[[1, i, j]] * max[[yy, xx]];
            }
        }
        acc
    });
    // Mirror onto the conjugate bins so the gate is Hermitian-symmetric.
    Array2::from_shape_fn((h, wd), |(y, x)| {
        let partner = ((h - y) % h, (wd - x) % wd);
        let rep = if (y, x) <= partner { (y, x) } else { partner };
        sigmoid(logits[rep])
    })
}

/// Gate values per frequency bin (`H x W`, unshifted DFT order).
pub fn frequency_gate(f: &FeatureMap, w: &FamWeights) -> Result<Array2<f64>> {
    check_fam_dims(f, w)?;
    Ok(gate_from_spectra(&spectra(f), w))
}

fn check_fam_dims(f: &FeatureMap, w: &FamWeights) -> Result<()> {
    let (_, h, wd) = f.dim();
    let k = w.kernel_size();
    if h < k || wd < k {
        return Err(Error::DimensionMismatch(format!(
            "feature map {h}x{wd} smaller than {k}x{k} attention kernel"
        )));
    }
    Ok(())
}

/// Applies the frequency attention gate; output shape equals input shape.
pub fn frequency_attention(f: &FeatureMap, w: &FamWeights) -> Result<FeatureMap> {
    frequency_attention_with_residue(f, w).map(|(out, _)| out)
}

/// As [`frequency_attention`], also returning the largest imaginary part
/// left by the inverse transform.
pub fn frequency_attention_with_residue(
    f: &FeatureMap,
    w: &FamWeights,
) -> Result<(FeatureMap, f64)> {
    check_fam_dims(f, w)?;
    let specs = spectra(f);
    let gate = gate_from_spectra(&specs, w);
    let (_, h, wd) = f.dim();
    let inv_n = 1.0 / (h * wd) as f64;
    let results: Vec<(Array2<f64>, f64)> = specs
        .into_par_iter()
        .map(|mut spec| {
            Zip::from(&mut spec).and(&gate).for_each(|z, g| *z *= *g);
            fft2(&mut spec, true);
            let residue = spec.iter().fold(0.0f64, |m, z| m.max((z.im * inv_n).abs()));
            (spec.mapv(|z| z.re * inv_n), residue)
        })
        .collect();
    let mut values = Array3::zeros(f.values.raw_dim());
    let mut residue = 0.0f64;
    for (mut dst, (src, res)) in values.axis_iter_mut(Axis(0)).zip(results) {
        dst.assign(&src);
        residue = residue.max(res);
    }
    Ok((
        FeatureMap {
            values,
            scale: f.scale,
        },
        residue,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            values: Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)),
            scale: 4,
        }
    }

    /// Smooth image with 1/f-like content.
    fn natural_image(h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let waves: Vec<(f64, f64, f64, f64)> = (0..40)
            .map(|i| {
                let f = 0.02 * (1.0 + i as f64 * 0.25);
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (f * ang.cos(), f * ang.sin(), rng.random_range(0.0..6.28), 0.1 / (1.0 + i as f64))
            })
            .collect();
        Array2::from_shape_fn((h, w), |(r, c)| {
            0.5 + waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (fx * c as f64 + fy * r as f64 + ph).sin())
                .sum::<f64>()
        })
    }

    #[test]
    fn constant_image_has_flat_derivative_channels() {
        let img = Array2::from_elem((32, 40), 0.4);
        let raw = raw_features(&img.view(), 4).unwrap();
        for ch in 1..4 {
            assert!(raw.index_axis(Axis(0), ch).iter().all(|&v| v.abs() < 1e-15));
        }
        let f = extract_features(&img.view()).unwrap();
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn step_edge_peaks_on_edge_column() {
        let img = Array2::from_shape_fn((24, 24), |(_, c)| if c < 12 { 0.0 } else { 1.0 });
        let raw = raw_features(&img.view(), 1).unwrap();
        let row = raw.slice(s![1, 10, ..]);
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(peak == 11 || peak == 12, "peak at {peak}");
        assert!(raw.slice(s![2, .., ..]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn standardized_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array2::from_shape_fn((64, 80), |_| rng.random::<f64>());
        let f = extract_features(&img.view()).unwrap();
        assert_eq!(f.dim(), (4, 16, 20));
        for ch in f.values.outer_iter() {
            let n = ch.len() as f64;
            let m = ch.sum() / n;
            let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_unsupported_scale() {
        let img = Array2::zeros((32, 32));
        assert!(extract_features_scaled(&img.view(), 3).is_err());
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let f = random_map(2, 3, 16, 12);
        let out = frequency_attention(&f, &FamWeights::zeros(7)).unwrap();
        for (a, b) in out.values.iter().zip(f.values.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn saturated_bias_is_identity() {
        let f = random_map(3, 2, 9, 14);
        let mut w = FamWeights::zeros(5);
        w.bias = 20.0;
        let out = frequency_attention(&f, &w).unwrap();
        for (a, b) in out.values.iter().zip(f.values.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn unit_gate_roundtrip_is_exact() {
        let f = random_map(4, 2, 12, 10);
        let mut w = FamWeights::zeros(3);
        w.bias = 800.0; // sigmoid saturates to exactly 1.0
        let out = frequency_attention(&f, &w).unwrap();
        for (a, b) in out.values.iter().zip(f.values.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval_energy_matches_gated_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_map(6, 3, 15, 18);
        let kernel = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-0.5..0.5));
        let w = FamWeights::new(kernel, rng.random_range(-1.0..1.0)).unwrap();
        let (out, residue) = frequency_attention_with_residue(&f, &w).unwrap();
        assert!(residue < 1e-8);
        let gate = frequency_gate(&f, &w).unwrap();
        // Oracle: direct DFT sum, independent of the FFT path.
        let (c, h, wd) = f.dim();
        let n = (h * wd) as f64;
        for ch in 0..c {
            let mut spectral = 0.0;
            for ky in 0..h {
                for kx in 0..wd {
                    let mut z = Complex64::default();
                    for y in 0..h {
                        for x in 0..wd {
                            let ang = -std::f64::consts::TAU
                                * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / wd as f64);
                            z += Complex64::from_polar(f.values[[ch, y, x]], ang);
                        }
                    }
                    spectral += gate[[ky, kx]].powi(2) * z.norm_sqr();
                }
            }
            spectral /= n;
            let energy: f64 = out.values.index_axis(Axis(0), ch).iter().map(|v| v * v).sum();
            assert!((energy - spectral).abs() <= 1e-5 * spectral, "{energy} vs {spectral}");
        }
    }

    #[test]
    fn gate_is_open_interval_and_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_map(7, 4, 16, 20);
        let kernel = Array3::from_shape_fn((2, 7, 7), |_| rng.random_range(-1.0..1.0));
        let w = FamWeights::new(kernel, 0.3).unwrap();
        let g = frequency_gate(&f, &w).unwrap();
        let (h, wd) = g.dim();
        for y in 0..h {
            for x in 0..wd {
                assert!(g[[y, x]] > 0.0 && g[[y, x]] < 1.0);
                assert_eq!(g[[y, x]], g[[(h - y) % h, (wd - x) % wd]]);
            }
        }
    }

    #[test]
    fn default_fixture_favours_low_frequencies() {
        let img = natural_image(128, 160);
        let f = extract_features(&img.view()).unwrap();
        let g = frequency_gate(&f, &default_fam_weights()).unwrap();
        let (h, w) = g.dim();
        let nyquist = g[[h / 2, w / 2]];
        assert!(g[[0, 0]] > nyquist, "dc {} nyquist {}", g[[0, 0]], nyquist);
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let w = default_fam_weights();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fam.bin");
        w.save(&path).unwrap();
        let back = FamWeights::load(&path).unwrap();
        assert_eq!(w.bias.to_bits(), back.bias.to_bits());
        for (a, b) in w.attention_kernel.iter().zip(back.attention_kernel.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let truncated = &w.to_bytes()[..40];
        assert!(FamWeights::from_bytes(truncated, &path).is_err());
    }

    #[test]
    fn zero_weight_file_halves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.bin");
        FamWeights::zeros(7).save(&path).unwrap();
        let w = FamWeights::load(&path).unwrap();
        let f = random_map(8, 2, 10, 10);
        let out = frequency_attention(&f, &w).unwrap();
        for (a, b) in out.values.iter().zip(f.values.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn kernel_larger_than_map_is_rejected() {
        let f = random_map(1, 1, 5, 5);
        assert!(frequency_attention(&f, &FamWeights::zeros(7)).is_err());
    }
}
