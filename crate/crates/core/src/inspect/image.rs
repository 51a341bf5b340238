//! Binary PGM/PPM output with per-image min-max normalization.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::Shape3;

/// Sentinel color for coordinates a layer does not predict.
const MARK: [u8; 3] = [0, 0, 160];

/// An 8-bit image ready to write, with the value range it was scaled from.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

fn range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn scale(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Lay the channels of a `c × h × w` image side by side as one gray panel.
pub fn channel_grid(shape: Shape3, values: &[f64]) -> (usize, usize, Vec<f64>) {
    let width = shape.c * shape.w;
    let mut out = vec![0.0; width * shape.h];
    for c in 0..shape.c {
        for i in 0..shape.h {
            for j in 0..shape.w {
                out[i * width + c * shape.w + j] = values[shape.index(c, i, j)];
            }
        }
    }
    (width, shape.h, out)
}

/// Gray for one channel, RGB for three, a channel grid otherwise.
pub fn render_gray(shape: Shape3, values: &[f64]) -> Rendered {
    let (lo, hi) = range(values.iter());
    if shape.c == 3 {
        let mut pixels = Vec::with_capacity(values.len());
        for i in 0..shape.h {
            for j in 0..shape.w {
                for c in 0..3 {
                    pixels.push(scale(values[shape.index(c, i, j)], lo, hi));
                }
            }
        }
        return Rendered {
            width: shape.w,
            height: shape.h,
            channels: 3,
            pixels,
            min: lo,
            max: hi,
        };
    }
    let (width, height, flat) = channel_grid(shape, values);
    Rendered {
        width,
        height,
        channels: 1,
        pixels: flat.iter().map(|&v| scale(v, lo, hi)).collect(),
        min: lo,
        max: hi,
    }
}

/// Gray RGB rendering normalized over the `keep` coordinates only; the rest
/// are painted with a fixed sentinel color.
pub fn render_marked(shape: Shape3, values: &[f64], keep: &[bool]) -> Rendered {
    let (lo, hi) = range(values.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| v));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let (width, height, flat) = channel_grid(shape, values);
    let (_, _, mask) = channel_grid(
        shape,
        &keep.iter().map(|&k| k as u8 as f64).collect::<Vec<_>>(),
    );
    let mut pixels = Vec::with_capacity(flat.len() * 3);
    for (v, m) in flat.iter().zip(&mask) {
        if *m > 0.0 {
            pixels.extend([scale(*v, lo, hi); 3]);
        } else {
            pixels.extend(MARK);
        }
    }
    Rendered {
        width,
        height,
        channels: 3,
        pixels,
        min: lo,
        max: hi,
    }
}

fn write_netpbm(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    pixels: &[u8],
) -> Result<()> {
    let mut buf = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::contract("PGM pixel count does not match its size"));
    }
    write_netpbm(path.as_ref(), "P5", width, height, pixels)
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::contract("PPM pixel count does not match its size"));
    }
    write_netpbm(path.as_ref(), "P6", width, height, rgb)
}

/// Collects `file,min,max` rows for images written into one directory.
#[derive(Debug, Default)]
pub struct Sidecar {
    rows: Vec<(String, f64, f64)>,
}

impl Sidecar {
    /// Write `image` as `dir/name` (`.pgm` or `.ppm` appended) and record
    /// its range.
    pub fn write(&mut self, dir: &Path, name: &str, image: &Rendered) -> Result<()> {
        let file = if image.channels == 3 {
            format!("{name}.ppm")
        } else {
            format!("{name}.pgm")
        };
        let path = dir.join(&file);
        if image.channels == 3 {
            write_ppm(&path, image.width, image.height, &image.pixels)?;
        } else {
            write_pgm(&path, image.width, image.height, &image.pixels)?;
        }
        self.rows.push((file, image.min, image.max));
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        writeln!(buf, "file,min,max").expect("in-memory write");
        for (f, lo, hi) in &self.rows {
            writeln!(buf, "{f},{lo:.17e},{hi:.17e}").expect("in-memory write");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
