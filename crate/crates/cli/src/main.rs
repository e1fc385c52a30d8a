use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use omnisweep::config;
use omnisweep::cost::{build_concat_volume, regularize, softargmin_regress, ConcatMode, DisparityMap, RegularizeParams};
use omnisweep::features::{default_fam_weights, FamWeights, DEFAULT_FEATURE_SCALE};
use omnisweep::io;
use omnisweep::metrics::compute_metrics;
use omnisweep::pipeline::{estimate_disparity, extract_all, sweep_all, variance_volume, EstimateConfig, DEFAULT_TEMPERATURE};
use omnisweep::pseudo_stereo::{evaluate_disparity, project_to_center, stitch_pair, yaw_rotate, LossConfig, DEFAULT_SEAM_WIDTH};
use omnisweep::refine::{refine, RefineConfig};
use omnisweep::rig::CameraRig;
use omnisweep::scene::{render_scene, synthetic_intrinsics, SceneKind, SyntheticScene, TextureSpec};
use omnisweep::sphere::{make_hypotheses, ErpGrid, HypothesisSet};

/// Omnidirectional depth from four cardinal fisheye cameras.
#[derive(Parser)]
#[command(name = "omnisweep", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Rig calibration (TOML). Defaults to the synthetic rig.
    #[arg(long, global = true)]
    calib: Option<PathBuf>,
    /// Output ERP size.
    #[arg(long, global = true, default_value = "640x320", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, global = true, default_value_t = config::DEFAULT_HYPOTHESES)]
    hypotheses: usize,
    #[arg(long, global = true, default_value_t = config::DEFAULT_D_MIN)]
    dmin: f64,
    #[arg(long, global = true, default_value_t = config::DEFAULT_D_MAX)]
    dmax: f64,
    /// Columns excluded on each side of a stitch seam in the losses.
    #[arg(long, global = true, default_value_t = DEFAULT_SEAM_WIDTH)]
    seam_width: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene: four fisheyes, GT depth and calibration.
    Synth {
        /// `sphere:<radius>` or `room:<x>x<y>x<z>` in metres.
        #[arg(long, default_value = "room:4x3x4")]
        scene: String,
        /// Square fisheye size in pixels.
        #[arg(long, default_value_t = 768)]
        fisheye_size: usize,
        /// Texture noise seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the fisheyes and write a cost volume.
    Sweep {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, value_enum, default_value_t = CostArg::Variance)]
        cost: CostArg,
        /// Also write the four per-camera sweep volumes into this directory.
        #[arg(long)]
        dump_sweeps: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regularize a variance volume and regress disparity and depth maps.
    Estimate {
        #[arg(long)]
        volume: PathBuf,
        #[command(flatten)]
        regress: RegressArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine depth by descending the pseudo-stereo objective.
    Refine {
        #[arg(long)]
        images: PathBuf,
        /// `sweep`, `const:<depth m>` or `file:<depth.pfm>`.
        #[arg(long, default_value = "sweep")]
        init: String,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// Trace CSV; printed to stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
        #[command(flatten)]
        regress: RegressArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted depth map with ground truth in hypothesis units.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Print the pseudo-stereo loss of a depth map.
    EvalLoss {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        depth: PathBuf,
    },
    /// Write the two stitched panoramas for a depth map.
    Render {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a depth map as a coloured point cloud.
    Cloud {
        #[arg(long)]
        depth: PathBuf,
        /// Grayscale panorama in the world ERP frame; uniform grey when omitted.
        #[arg(long)]
        pano: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FeatureArgs {
    /// Fisheye images directory with `cam1.png` to `cam4.png`.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Sweep grid size; half the output size by default.
    #[arg(long, value_parser = parse_size)]
    sweep_size: Option<(usize, usize)>,
    #[arg(long, default_value_t = DEFAULT_FEATURE_SCALE)]
    feature_scale: usize,
    /// Frequency attention weights; the built-in fixture when omitted.
    #[arg(long)]
    fam_weights: Option<PathBuf>,
    #[arg(long, conflicts_with = "fam_weights")]
    no_fam: bool,
    /// 3x3 neighbourhood averaging of the stitched volumes.
    #[arg(long)]
    gather: bool,
}

#[derive(Args)]
struct RegressArgs {
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = RegularizeParams::default().passes)]
    passes: usize,
    #[arg(long, default_value_t = RegularizeParams::default().window)]
    window: usize,
    #[arg(long, default_value_t = RegularizeParams::default().hypothesis_window)]
    hypothesis_window: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Variance,
    Cat4c,
    Cat2c,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 || w % 4 != 0 {
        return Err(format!("size {s} must be positive with width divisible by 4"));
    }
    Ok((w, h))
}

impl Global {
    fn rig(&self) -> Result<CameraRig> {
        match &self.calib {
            Some(p) => CameraRig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(omnisweep::scene::synthetic_rig()),
        }
    }

    fn hypotheses(&self) -> Result<HypothesisSet> {
        Ok(make_hypotheses(self.hypotheses, self.dmin, self.dmax)?)
    }

    fn grid(&self) -> ErpGrid {
        ErpGrid::new(self.size.1, self.size.0)
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            seam_width: self.seam_width,
            ..LossConfig::default()
        }
    }
}

impl RegressArgs {
    fn params(&self, grid: &ErpGrid) -> RegularizeParams {
        RegularizeParams {
            passes: self.passes,
            window: self.window,
            hypothesis_window: self.hypothesis_window,
            output: (grid.height, grid.width),
            ..RegularizeParams::default()
        }
    }
}

fn estimate_config(g: &Global, f: &FeatureArgs, r: &RegressArgs) -> Result<EstimateConfig> {
    let output = g.grid();
    let (sw, sh) = f.sweep_size.unwrap_or((output.width / 2, output.height / 2));
    let fam = if f.no_fam {
        None
    } else if let Some(p) = &f.fam_weights {
        Some(FamWeights::load(p)?)
    } else {
        Some(default_fam_weights())
    };
    Ok(EstimateConfig {
        hypotheses: g.hypotheses()?,
        sweep_grid: ErpGrid::new(sh, sw),
        output,
        feature_scale: f.feature_scale,
        fam,
        gather: f.gather,
        regularize: r.params(&output),
        temperature: r.temperature,
    })
}

fn fisheye_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("cam{}.png", i + 1))
}

fn read_fisheyes(dir: &Path) -> Result<[Array2<f64>; 4]> {
    let mut out = Vec::with_capacity(4);
    for i in 0..4 {
        out.push(io::read_png_gray(fisheye_path(dir, i))?);
    }
    Ok(out.try_into().expect("four images"))
}

fn images_dir(f: &FeatureArgs) -> Result<&Path> {
    f.images.as_deref().context("--images is required")
}

/// Depth map in metres; non-finite or non-positive pixels are invalid.
fn read_depth(path: &Path) -> Result<(Array2<f64>, Array2<bool>)> {
    let m = io::read_pfm(path)?;
    let valid = m.mapv(|d| d.is_finite() && d > 0.0);
    Ok((m.mapv(f64::from), valid))
}

fn depth_to_disparity(path: &Path, hyp: &HypothesisSet) -> Result<DisparityMap> {
    let (depth, valid) = read_depth(path)?;
    let filled = depth.mapv(|d| if d.is_finite() && d > 0.0 { d } else { 1.0 });
    let mut disp = DisparityMap::from_depth(&filled.view(), hyp);
    disp.valid = valid;
    Ok(disp)
}

fn require_valid(disp: &DisparityMap, path: &Path) -> Result<()> {
    if disp.valid.iter().any(|v| !v) {
        bail!("{} has invalid pixels; a dense depth map is required", path.display());
    }
    Ok(())
}

fn write_maps(dir: &Path, disp: &DisparityMap) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let masked = |a: Array2<f64>| {
        ndarray::Zip::from(&a)
            .and(&disp.valid)
            .map_collect(|&v, &ok| if ok { v as f32 } else { f32::NAN })
    };
    io::write_pfm(dir.join("disparity.pfm"), &masked(disp.values.clone()).view())?;
    io::write_pfm(dir.join("depth.pfm"), &masked(disp.depth()).view())?;
    Ok(())
}

fn parse_scene(spec: &str, seed: u64) -> Result<SyntheticScene> {
    let texture = TextureSpec {
        noise_seed: seed,
        ..TextureSpec::default()
    };
    let kind = match spec.split_once(':') {
        Some(("sphere", r)) => SceneKind::Sphere {
            radius: r.parse().with_context(|| format!("bad radius {r:?}"))?,
        },
        Some(("room", dims)) => {
            let d: Vec<f64> = dims
                .split('x')
                .map(|v| v.parse().with_context(|| format!("bad room extent {v:?}")))
                .collect::<Result<_>>()?;
            let [x, y, z] = d[..] else {
                bail!("room needs three extents, got {dims:?}");
            };
            SceneKind::BoxRoom { dims: (x, y, z) }
        }
        _ => bail!("unknown scene {spec:?}; use sphere:<r> or room:<x>x<y>x<z>"),
    };
    Ok(SyntheticScene::new(kind, texture)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Synth {
            scene,
            fisheye_size,
            seed,
            out,
        } => {
            let rig = match &g.calib {
                Some(_) => g.rig()?,
                None => CameraRig::cardinal(synthetic_intrinsics(*fisheye_size), 0.2)?,
            };
            let scene = parse_scene(scene, *seed)?;
            let r = render_scene(&scene, &rig, &g.grid())?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for (i, img) in r.fisheyes.iter().enumerate() {
                io::write_png_gray(fisheye_path(out, i), &img.view())?;
            }
            io::write_pfm(out.join("gt_depth.pfm"), &r.gt_depth.mapv(|d| d as f32).view())?;
            rig.save(out.join("calib.toml"))?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            features,
            cost,
            dump_sweeps,
            out,
        } => {
            let rig = g.rig()?;
            let cfg = estimate_config(g, features, &RegressArgs::default_args())?;
            let fisheyes = read_fisheyes(images_dir(features)?)?;
            let feats = extract_all(&fisheyes, cfg.feature_scale, cfg.fam.as_ref())?;
            let sweeps = sweep_all(&feats, &rig, &cfg.sweep_grid, &cfg.hypotheses)?;
            if let Some(dir) = dump_sweeps {
                fs::create_dir_all(dir)?;
                for (i, s) in sweeps.iter().enumerate() {
                    io::write_sweep(dir.join(format!("sweep{}.bin", i + 1)), s)?;
                }
            }
            let volume = match cost {
                CostArg::Variance => variance_volume(&sweeps, &rig, cfg.gather)?,
                CostArg::Cat4c => build_concat_volume(&sweeps, &rig, ConcatMode::FourC)?,
                CostArg::Cat2c => build_concat_volume(&sweeps, &rig, ConcatMode::TwoCInterleaved)?,
            };
            io::write_volume(out, &volume)?;
            println!("{:?} volume {:?}, {} elements", volume.kind, volume.values.dim(), volume.element_count());
        }
        Command::Estimate {
            volume,
            regress,
            out,
        } => {
            let hyp = g.hypotheses()?;
            let v = io::read_volume(volume)?;
            let v_star = regularize(&v, None, &regress.params(&g.grid()))?;
            let disp = softargmin_regress(&v_star, regress.temperature, &hyp)?;
            write_maps(out, &disp)?;
            println!("wrote {}", out.display());
        }
        Command::Refine {
            images,
            init,
            iters,
            lr,
            trace,
            features,
            regress,
            out,
        } => {
            let rig = g.rig()?;
            let hyp = g.hypotheses()?;
            let fisheyes = read_fisheyes(images)?;
            let grid = g.grid();
            let inv = match init.split_once(':') {
                None if init == "sweep" => {
                    let cfg = estimate_config(g, features, regress)?;
                    estimate_disparity(&fisheyes, &rig, &cfg)?.inverse_depth()
                }
                Some(("const", d)) => {
                    let d: f64 = d.parse().with_context(|| format!("bad depth {d:?}"))?;
                    if !(d > 0.0 && d.is_finite()) {
                        bail!("constant depth must be positive, got {d}");
                    }
                    Array2::from_elem((grid.height, grid.width), 1.0 / d)
                }
                Some(("file", p)) => {
                    let p = Path::new(p);
                    let disp = depth_to_disparity(p, &hyp)?;
                    require_valid(&disp, p)?;
                    disp.inverse_depth()
                }
                _ => bail!("unknown --init {init:?}; use sweep, const:<d> or file:<pfm>"),
            };
            let cfg = RefineConfig {
                step_size: *lr,
                max_iters: *iters,
                loss: g.loss(),
                ..RefineConfig::default()
            };
            let tr = refine(&fisheyes, &rig, &inv.view(), &hyp, &cfg)?;
            match trace {
                Some(p) => fs::write(p, tr.to_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", tr.to_csv()),
            }
            write_maps(out, &DisparityMap::from_inverse_depth(&tr.inverse_depth.view(), &hyp))?;
            eprintln!("{:?} after {} iterations", tr.termination, tr.iterations);
        }
        Command::Eval { pred, gt } => {
            let hyp = g.hypotheses()?;
            let p = depth_to_disparity(pred, &hyp)?;
            let t = depth_to_disparity(gt, &hyp)?;
            println!("{}", compute_metrics(&p, &t)?);
        }
        Command::EvalLoss { images, depth } => {
            let rig = g.rig()?;
            let hyp = g.hypotheses()?;
            let disp = depth_to_disparity(depth, &hyp)?;
            require_valid(&disp, depth)?;
            let fisheyes = read_fisheyes(images)?;
            println!("{}", evaluate_disparity(&fisheyes, &rig, &disp, &g.loss())?);
        }
        Command::Render { images, depth, out } => {
            let rig = g.rig()?;
            let (d, valid) = read_depth(depth)?;
            if valid.iter().any(|v| !v) {
                bail!("{} has invalid pixels; a dense depth map is required", depth.display());
            }
            let fisheyes = read_fisheyes(images)?;
            let pair = stitch_pair(&project_to_center(&fisheyes, &rig, &d.view())?, &rig)?;
            fs::create_dir_all(out)?;
            let aligned = yaw_rotate(&pair.i_o1, pair.alignment_turns())?;
            for (name, im) in [("pano1.png", &pair.i_o1), ("pano2.png", &pair.i_o2), ("pano1_aligned.png", &aligned)] {
                io::write_png_gray(out.join(name), &im.data.view())?;
            }
            println!("wrote {}", out.display());
        }
        Command::Cloud { depth, pano, out } => {
            let (d, valid) = read_depth(depth)?;
            let (h, w) = d.dim();
            let colour = match pano {
                Some(p) => io::read_png_gray(p)?,
                None => Array2::from_elem((h, w), 0.5),
            };
            let n = io::export_pointcloud(&d.view(), &valid.view(), &colour.view(), &ErpGrid::new(h, w), out)?;
            println!("wrote {n} vertices to {}", out.display());
        }
    }
    Ok(())
}

impl RegressArgs {
    fn default_args() -> Self {
        let p = RegularizeParams::default();
        Self {
            temperature: DEFAULT_TEMPERATURE,
            passes: p.passes,
            window: p.window,
            hypothesis_window: p.hypothesis_window,
        }
    }
}
