//! Synthetic scenes with analytic depth, and their fisheye renderings.

use nalgebra::Vector3;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rig::{backproject_fisheye, CameraRig, FisheyeIntrinsics};
use crate::sphere::ErpGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    /// Sphere of the given radius centred on the rig.
    Sphere { radius: f64 },
    /// Axis-aligned box centred on the rig, full extents `(x, y, z)` in metres.
    BoxRoom { dims: (f64, f64, f64) },
}

/// Solid procedural texture: a soft 3D checker plus band-limited noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    /// Checker cell size in metres.
    pub checker_period: f64,
    /// Slope of the soft checker transition.
    pub sharpness: f64,
    /// Half the checker's peak-to-peak intensity swing.
    pub checker_contrast: f64,
    pub noise_seed: u64,
    pub noise_terms: usize,
    pub noise_amplitude: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            checker_period: 0.3,
            sharpness: 1.5,
            checker_contrast: 0.2,
            noise_seed: 7,
            noise_terms: 32,
            noise_amplitude: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    freq: Vector3<f64>,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub texture: TextureSpec,
    waves: Vec<Wave>,
}

impl SyntheticScene {
    pub fn new(kind: SceneKind, texture: TextureSpec) -> Result<Self> {
        match kind {
            SceneKind::Sphere { radius } if !(radius > 0.0 && radius.is_finite()) => {
                return Err(Error::InvalidRig(format!("sphere radius {radius} must be positive")));
            }
            SceneKind::BoxRoom { dims: (x, y, z) } if !(x > 0.0 && y > 0.0 && z > 0.0) => {
                return Err(Error::InvalidRig(format!("room dims {x}x{y}x{z} must be positive")));
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(texture.noise_seed);
        // Wavelengths between one and three checker cells.
        let waves = (0..texture.noise_terms)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                let dir = Vector3::new(r * phi.cos(), z, r * phi.sin());
                let wavelength = texture.checker_period * rng.random_range(1.0..3.0);
                Wave {
                    freq: dir * (std::f64::consts::TAU / wavelength),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: texture.noise_amplitude * rng.random_range(0.5..1.0),
                }
            })
            .collect();
        Ok(Self {
            kind,
            texture,
            waves,
        })
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(SceneKind::Sphere { radius }, TextureSpec::default()).expect("positive radius")
    }

    pub fn box_room(x: f64, y: f64, z: f64) -> Self {
        Self::new(SceneKind::BoxRoom { dims: (x, y, z) }, TextureSpec::default())
            .expect("positive dims")
    }

    /// Distance from `origin` along the unit ray `dir` to the scene surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self.kind {
            SceneKind::Sphere { radius } => {
                let b = origin.dot(dir);
                let c = origin.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b + disc.sqrt();
                (t > 0.0).then_some(t)
            }
            SceneKind::BoxRoom { dims } => {
                let half = Vector3::new(dims.0, dims.1, dims.2) * 0.5;
                let mut best = f64::INFINITY;
                for i in 0..3 {
                    if dir[i] != 0.0 {
                        let wall = half[i].copysign(dir[i]);
                        let t = (wall - origin[i]) / dir[i];
                        if t > 0.0 {
                            best = best.min(t);
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }

    /// Analytic depth from the rig centre along `(elevation, azimuth)`.
    pub fn depth(&self, elevation: f64, azimuth: f64) -> f64 {
        let dir = crate::sphere::spherical_point(elevation, azimuth, 1.0);
        self.intersect(&Vector3::zeros(), &dir)
            .expect("closed scene around the rig")
    }

    /// Smallest scene depth, a lower bound on every ray length from the centre.
    pub fn min_depth(&self) -> f64 {
        match self.kind {
            SceneKind::Sphere { radius } => radius,
            SceneKind::BoxRoom { dims } => 0.5 * dims.0.min(dims.1).min(dims.2),
        }
    }

    /// Texture intensity in `[0, 1]` at a world point.
    pub fn texture_at(&self, p: &Vector3<f64>) -> f64 {
        let w = std::f64::consts::PI / self.texture.checker_period;
        // Phase offsets keep every axis-aligned plane textured.
        let sx = (w * p.x + 0.3).sin();
        let sy = (w * p.y + 0.7).sin();
        let sz = (w * p.z + 1.1).sin();
        let checker = (self.texture.sharpness * (sx * sy + sy * sz + sz * sx)).tanh();
        let noise: f64 = self
            .waves
            .iter()
            .map(|wv| wv.amp * (wv.freq.dot(p) + wv.phase).sin())
            .sum();
        (0.5 + self.texture.checker_contrast * checker + noise).clamp(0.0, 1.0)
    }

    /// Ground-truth depth on an ERP grid.
    pub fn depth_map(&self, grid: &ErpGrid) -> Array2<f64> {
        Array2::from_shape_fn((grid.height, grid.width), |(r, c)| {
            self.depth(grid.elevation(r), grid.azimuth(c))
        })
    }

    /// Texture seen from the rig centre on an ERP grid.
    pub fn erp_texture(&self, grid: &ErpGrid) -> Array2<f64> {
        Array2::from_shape_fn((grid.height, grid.width), |(r, c)| {
            let dir = grid.direction(r, c);
            let t = self.intersect(&Vector3::zeros(), &dir).expect("closed scene");
            self.texture_at(&(dir * t))
        })
    }
}

/// Four fisheye images plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// Grayscale images in `[0, 1]`, black outside the image circle.
    pub fisheyes: [Array2<f64>; 4],
    pub gt_depth: Array2<f64>,
}

/// Renders one fisheye by intersecting every pixel ray with the scene.
pub fn render_fisheye(scene: &SyntheticScene, rig: &CameraRig, camera: usize) -> Array2<f64> {
    let cam = &rig.cameras[camera];
    let intr: &FisheyeIntrinsics = &cam.intrinsics;
    let (rows, cols) = intr.image_size;
    let center = cam.extrinsics.center();
    let rt = cam.extrinsics.rotation.transpose();
    let mut img = Array2::zeros((rows, cols));
    img.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(v, mut row)| {
            for u in 0..cols {
                let px = nalgebra::Vector2::new(u as f64, v as f64);
                if let Some(d_cam) = backproject_fisheye(&px, intr) {
                    let dir = (rt * d_cam).normalize();
                    let t = scene
                        .intersect(&center, &dir)
                        .expect("ray from inside a closed scene must hit it");
                    row[u] = scene.texture_at(&(center + dir * t));
                }
            }
        });
    img
}

/// Renders all four fisheyes and the GT depth on `grid`.
pub fn render_scene(scene: &SyntheticScene, rig: &CameraRig, grid: &ErpGrid) -> Result<RenderedScene> {
    let margin = rig.max_translation();
    if scene.min_depth() <= margin {
        return Err(Error::InvalidRig(format!(
            "scene depth {} m does not clear the rig radius {margin} m",
            scene.min_depth()
        )));
    }
    Ok(RenderedScene {
        fisheyes: std::array::from_fn(|i| render_fisheye(scene, rig, i)),
        gt_depth: scene.depth_map(grid),
    })
}

/// Intrinsics used by the synthetic rig: square image, 220 degree field of
/// view with the image circle just inside the frame.
pub fn synthetic_intrinsics(size: usize) -> FisheyeIntrinsics {
    let c = (size as f64 - 1.0) / 2.0;
    let k1 = 0.99 * c / 110f64.to_radians();
    FisheyeIntrinsics::new(vec![k1], (c, c), (size, size), 220.0, 1)
        .expect("monotone single-term polynomial")
}

/// Default synthetic rig: 768 px fisheyes on a 0.4 m square.
pub fn synthetic_rig() -> CameraRig {
    CameraRig::cardinal(synthetic_intrinsics(768), 0.2).expect("cardinal rig is valid")
}
