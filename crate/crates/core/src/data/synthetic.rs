//! Seeded synthetic image families for offline experiments.
//!
//! - `blobs`: 2–4 narrow Gaussian bumps anywhere on a dark background.
//! - `stripes`: a sinusoidal grating with random orientation, frequency and phase.
//! - `patches`: one constant-intensity rectangle on a black background.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::{ImageDataset, VectorDataset};
use crate::error::{Error, Result};
use crate::flow::Shape3;
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Blobs,
    Stripes,
    Patches,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Blobs, Family::Stripes, Family::Patches];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blobs => "blobs",
            Family::Stripes => "stripes",
            Family::Patches => "patches",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Family::Blobs => 101,
            Family::Stripes => 102,
            Family::Patches => 103,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown synthetic family {s:?} (blobs, stripes, patches)"
                ))
            })
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn blob(rng: &mut RngStream, res: usize) -> Vec<u8> {
    let r = res as f64;
    let count = 2 + rng.below(3) as usize;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let ci = rng.uniform_range(0.0, r);
            let cj = rng.uniform_range(0.0, r);
            let sigma = rng.uniform_range(0.04 * r, 0.1 * r);
            let amp = rng.uniform_range(0.6, 1.0);
            (ci, cj, sigma, amp)
        })
        .collect();
    let mut img = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let v: f64 = bumps
                .iter()
                .map(|&(ci, cj, s, a)| {
                    a * (-((y - ci).powi(2) + (x - cj).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum();
            img.push(quantize(v.min(1.0)));
        }
    }
    img
}

fn stripe(rng: &mut RngStream, res: usize) -> Vec<u8> {
    let theta = rng.uniform_range(0.0, PI);
    let cycles = rng.uniform_range(2.0, 5.0);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let contrast = rng.uniform_range(0.6, 1.0);
    let k = 2.0 * PI * cycles / res as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            let u = j as f64 * c + i as f64 * s;
            img.push(quantize(0.5 + 0.5 * contrast * (k * u + phase).sin()));
        }
    }
    img
}

fn patch(rng: &mut RngStream, res: usize) -> Vec<u8> {
    let mut img = vec![0u8; res * res];
    let lo = (res / 4).max(1) as u32;
    let hi = (res / 2).max(lo as usize + 1) as u32;
    let h = (lo + rng.below(hi - lo)) as usize;
    let w = (lo + rng.below(hi - lo)) as usize;
    let top = rng.below((res - h + 1) as u32) as usize;
    let left = rng.below((res - w + 1) as u32) as usize;
    let value = quantize(rng.uniform_range(0.35, 1.0));
    for i in top..top + h {
        for j in left..left + w {
            img[i * res + j] = value;
        }
    }
    img
}

/// `n` single-channel `resolution × resolution` images; a pure function of
/// its arguments.
pub fn gen_synthetic(
    family: Family,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if n == 0 {
        return Err(Error::config("synthetic dataset needs at least one image"));
    }
    if resolution < 2 || resolution % 2 != 0 {
        return Err(Error::config(format!(
            "synthetic resolution must be even and at least 2, got {resolution}"
        )));
    }
    let mut rng = RngStream::new(seed, family.stream());
    let mut pixels = Vec::with_capacity(n * resolution * resolution);
    for _ in 0..n {
        let img = match family {
            Family::Blobs => blob(&mut rng, resolution),
            Family::Stripes => stripe(&mut rng, resolution),
            Family::Patches => patch(&mut rng, resolution),
        };
        pixels.extend(img);
    }
    ImageDataset::new(
        Shape3::new(1, resolution, resolution),
        pixels,
        format!("synthetic:{family}:{n}:{resolution}:{seed}"),
    )
}

/// Mean of `|x[i][j+1] − x[i][j]|` over all images, channels and rows.
pub fn mean_horizontal_difference(ds: &ImageDataset) -> f64 {
    let s = ds.shape;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..ds.len() {
        let img = ds.image(k);
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w.saturating_sub(1) {
                    let a = img[s.index(c, i, j)] as f64;
                    let b = img[s.index(c, i, j + 1)] as f64;
                    total += (a - b).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Two Gaussian-mixture classes in `dim` dimensions, labels 0 and 1.
///
/// Each class has two components with random means; the classes share a
/// common scale so they overlap partially.
pub fn gen_gaussian_classes(n_per_class: usize, dim: usize, seed: u64) -> Result<VectorDataset> {
    if n_per_class == 0 || dim == 0 {
        return Err(Error::config(
            "gaussian classes need positive size and dimension",
        ));
    }
    let mut rng = RngStream::new(seed, 104);
    let means: Vec<Vec<f64>> = (0..4)
        .map(|_| rng.normal_vec(dim).into_iter().map(|v| 1.5 * v).collect())
        .collect();
    let mut data = Vec::with_capacity(2 * n_per_class * dim);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let comp = &means[2 * class + rng.below(2) as usize];
            let noise = rng.normal_vec(dim);
            data.extend(comp.iter().zip(noise).map(|(m, e)| m + e));
            labels.push(class);
        }
    }
    let columns = (0..dim).map(|k| format!("x{k}")).collect();
    VectorDataset::new(
        Tensor::matrix(2 * n_per_class, dim, data)?,
        columns,
        Some(labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for family in Family::ALL {
            let a = gen_synthetic(family, 20, 8, 3).unwrap();
            let b = gen_synthetic(family, 20, 8, 3).unwrap();
            assert_eq!(a, b);
            assert_ne!(
                a.pixels(),
                gen_synthetic(family, 20, 8, 4).unwrap().pixels()
            );
            assert_eq!(a.shape, Shape3::new(1, 8, 8));
        }
    }

    #[test]
    fn odd_resolution_rejected() {
        assert!(gen_synthetic(Family::Blobs, 1, 7, 0).is_err());
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("noise".parse::<Family>().is_err());
    }

    #[test]
    fn gaussian_classes_shape() {
        let ds = gen_gaussian_classes(10, 3, 1).unwrap();
        assert_eq!(ds.data.shape(), &[20, 3]);
        assert_eq!(
            ds.labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&l| l == 1)
                .count(),
            10
        );
    }

    #[test]
    fn complexity_ordering_is_frozen() {
        // Sums of absolute differences over 500 images × 16 rows × 15 pairs.
        let pairs = 500.0 * 16.0 * 15.0;
        let mhd = |f| mean_horizontal_difference(&gen_synthetic(f, 500, 16, 1).unwrap());
        let (b, s, p) = (
            mhd(Family::Blobs),
            mhd(Family::Stripes),
            mhd(Family::Patches),
        );
        assert_eq!((b * pairs).round(), 1_244_373.0);
        assert_eq!((s * pairs).round(), 6_272_113.0);
        assert_eq!((p * pairs).round(), 865_361.0);
        assert!(p < b && b < s);
    }
}
