//! File formats: PFM float maps, 8-bit PNG, binary PLY point clouds and raw
//! cost-volume dumps.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2};

use crate::cost::{CostKind, CostVolume};
use crate::error::{Error, Result};
use crate::sphere::{spherical_point, ErpGrid, SweepVolume};

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f))
}

/// Reads one whitespace-delimited header token.
fn token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut out = Vec::new();
    loop {
        let mut b = [0u8];
        let n = r.read(&mut b).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if out.is_empty() {
                continue;
            }
            break;
        }
        out.push(b[0]);
        if out.len() > 64 {
            return Err(Error::malformed(path, "header token too long"));
        }
    }
    if out.is_empty() {
        return Err(Error::malformed(path, "truncated header"));
    }
    String::from_utf8(out).map_err(|_| Error::malformed(path, "non-ASCII header"))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::malformed(path, format!("bad {what} {s:?}")))
}

/// Single-channel PFM: `Pf`, `W H`, negative scale (little endian), rows
/// bottom to top.
pub fn encode_pfm(map: &ArrayView2<f32>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for r in (0..h).rev() {
        for c in 0..w {
            out.extend_from_slice(&map[[r, c]].to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(mut r: impl BufRead, path: &Path) -> Result<Array2<f32>> {
    let magic = token(&mut r, path)?;
    if magic != "Pf" {
        return Err(Error::malformed(
            path,
            format!("expected single-channel \"Pf\", found {magic:?}"),
        ));
    }
    let w: usize = parse(&token(&mut r, path)?, "width", path)?;
    let h: usize = parse(&token(&mut r, path)?, "height", path)?;
    let scale: f64 = parse(&token(&mut r, path)?, "scale", path)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::malformed(path, format!("bad scale {scale}")));
    }
    let bytes = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| Error::malformed(path, format!("dimensions {w}x{h} overflow")))?;
    let mut buf = Vec::new();
    r.take(bytes as u64 + 1)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != bytes {
        return Err(Error::malformed(
            path,
            format!("expected {bytes} data bytes, found {}", buf.len()),
        ));
    }
    let little = scale < 0.0;
    let mut map = Array2::zeros((h, w));
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        map[[h - 1 - i / w, i % w]] = v;
    }
    Ok(map)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &ArrayView2<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    decode_pfm(open(path)?, path)
}

/// Writes intensities in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_png_gray(path: impl AsRef<Path>, img: &ArrayView2<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

/// Reads any 8-bit image as grayscale intensities in `[0, 1]`.
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

const PLY_HEADER_TAIL: &str = "property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";

/// Binary little-endian PLY with one vertex per valid pixel, at
/// `spherical_point(e, a, depth)` and coloured by the grayscale panorama.
/// Returns the vertex count.
pub fn export_pointcloud(
    depth: &ArrayView2<f64>,
    valid: &ArrayView2<bool>,
    pano: &ArrayView2<f64>,
    grid: &ErpGrid,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let dims = (grid.height, grid.width);
    if depth.dim() != dims || valid.dim() != dims || pano.dim() != dims {
        return Err(Error::DimensionMismatch(format!(
            "depth {:?}, mask {:?} and panorama {:?} must all be {dims:?}",
            depth.dim(),
            valid.dim(),
            pano.dim()
        )));
    }
    let mut verts = Vec::new();
    for r in 0..grid.height {
        for c in 0..grid.width {
            if !valid[[r, c]] {
                continue;
            }
            let d = depth[[r, c]];
            if !d.is_finite() {
                return Err(Error::InvalidDepth(format!("non-finite depth at ({r}, {c})")));
            }
            let p = spherical_point(grid.elevation(r), grid.azimuth(c), d);
            let g = (pano[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            verts.push(Vertex {
                position: [p.x as f32, p.y as f32, p.z as f32],
                color: [g; 3],
            });
        }
    }
    write_ply(path, &verts)?;
    Ok(verts.len())
}

pub fn write_ply(path: impl AsRef<Path>, verts: &[Vertex]) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{PLY_HEADER_TAIL}",
        verts.len()
    );
    let mut body = Vec::with_capacity(header.len() + 15 * verts.len());
    body.extend_from_slice(header.as_bytes());
    for v in verts {
        for x in v.position {
            body.extend_from_slice(&x.to_le_bytes());
        }
        body.extend_from_slice(&v.color);
    }
    f.write_all(&body)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads the vertex layout written by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<Vertex>> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let mut header = String::new();
    let mut count = None;
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, "missing end_header"));
        }
        if let Some(rest) = line.trim().strip_prefix("element vertex ") {
            count = Some(parse::<usize>(rest, "vertex count", path)?);
        }
        header.push_str(&line);
        if line.trim() == "end_header" {
            break;
        }
    }
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n")
        || !header.ends_with(PLY_HEADER_TAIL)
    {
        return Err(Error::malformed(path, "unsupported PLY layout"));
    }
    let count = count.ok_or_else(|| Error::malformed(path, "no vertex element"))?;
    let bytes = count
        .checked_mul(15)
        .ok_or_else(|| Error::malformed(path, "vertex count overflows"))?;
    let mut buf = Vec::new();
    r.take(bytes as u64 + 1)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != bytes {
        return Err(Error::malformed(
            path,
            format!("expected {bytes} vertex bytes, found {}", buf.len()),
        ));
    }
    Ok(buf
        .chunks_exact(15)
        .map(|b| {
            let f = |i: usize| f32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
            Vertex {
                position: [f(0), f(4), f(8)],
                color: [b[12], b[13], b[14]],
            }
        })
        .collect())
}

const VOLUME_MAGIC: &str = "OSVOL1";
const VOLUME_DTYPE: &str = "f64le";

fn kind_name(k: CostKind) -> &'static str {
    match k {
        CostKind::Variance => "variance",
        CostKind::Concat4C => "cat4c",
        CostKind::Concat2C => "cat2c",
        CostKind::Regularized => "regularized",
    }
}

/// Flat dump: a text line `OSVOL1 <tag> f64le D0 D1 D2 D3`, then the
/// row-major values as little-endian f64, then one validity byte per cell of
/// the `(D0, D2, D3)` or `(D1, D2, D3)` mask.
fn write_dump(path: &Path, tag: &str, values: &Array4<f64>, valid: &Array3<bool>) -> Result<()> {
    let (a, b, c, d) = values.dim();
    let mut f = create(path)?;
    let mut body = format!("{VOLUME_MAGIC} {tag} {VOLUME_DTYPE} {a} {b} {c} {d}\n").into_bytes();
    body.reserve(8 * values.len() + valid.len());
    for x in values.iter() {
        body.extend_from_slice(&x.to_le_bytes());
    }
    body.extend(valid.iter().map(|&v| v as u8));
    f.write_all(&body)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a dump whose mask drops axis `mask_skip` (0 or 1) of the values.
fn read_dump(path: &Path, mask_skip: usize) -> Result<(String, Array4<f64>, Array3<bool>)> {
    let mut r = open(path)?;
    if token(&mut r, path)? != VOLUME_MAGIC {
        return Err(Error::malformed(path, "not a volume dump"));
    }
    let tag = token(&mut r, path)?;
    let dtype = token(&mut r, path)?;
    if dtype != VOLUME_DTYPE {
        return Err(Error::malformed(path, format!("unsupported dtype {dtype:?}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = parse(&token(&mut r, path)?, "dimension", path)?;
    }
    let overflow = || Error::malformed(path, format!("dimensions {dims:?} overflow"));
    let mask_dims = [dims[1 - mask_skip], dims[2], dims[3]];
    let cells = mask_dims
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(overflow)?;
    let values_len = cells.checked_mul(dims[mask_skip]).ok_or_else(overflow)?;
    let bytes = values_len
        .checked_mul(8)
        .and_then(|x| x.checked_add(cells))
        .filter(|&x| x <= isize::MAX as usize)
        .ok_or_else(overflow)?;
    let mut buf = Vec::new();
    r.take(bytes as u64 + 1)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != bytes {
        return Err(Error::malformed(
            path,
            format!("expected {bytes} data bytes, found {}", buf.len()),
        ));
    }
    let (vals, mask) = buf.split_at(values_len * 8);
    let values: Vec<f64> = vals
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let values = Array4::from_shape_vec(dims, values).expect("length checked");
    let valid = Array3::from_shape_vec(mask_dims, mask.iter().map(|&b| b != 0).collect())
        .expect("length checked");
    Ok((tag, values, valid))
}

pub fn write_volume(path: impl AsRef<Path>, v: &CostVolume) -> Result<()> {
    write_dump(path.as_ref(), kind_name(v.kind), &v.values, &v.valid)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<CostVolume> {
    let path = path.as_ref();
    let (tag, values, valid) = read_dump(path, 0)?;
    let kind = match tag.as_str() {
        "variance" => CostKind::Variance,
        "cat4c" => CostKind::Concat4C,
        "cat2c" => CostKind::Concat2C,
        "regularized" => CostKind::Regularized,
        k => return Err(Error::malformed(path, format!("not a cost volume: {k:?}"))),
    };
    Ok(CostVolume { values, valid, kind })
}

/// Sweep dumps are tagged `sweep<camera>` with the 0-based camera index.
pub fn write_sweep(path: impl AsRef<Path>, v: &SweepVolume) -> Result<()> {
    write_dump(path.as_ref(), &format!("sweep{}", v.camera), &v.values, &v.valid)
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<SweepVolume> {
    let path = path.as_ref();
    let (tag, values, valid) = read_dump(path, 1)?;
    let camera = tag
        .strip_prefix("sweep")
        .and_then(|c| c.parse::<usize>().ok())
        .filter(|&c| c < 4)
        .ok_or_else(|| Error::malformed(path, format!("not a sweep volume: {tag:?}")))?;
    Ok(SweepVolume {
        camera,
        values,
        valid,
    })
}
