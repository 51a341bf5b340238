//! Dataset ingestion: IDX image files, CSV vectors with tabular
//! preprocessing, and seeded synthetic image families.

mod idx;
mod spec;
mod synthetic;
mod vectors;

pub use idx::{
    encode_idx, encode_idx_labels, load_idx, load_idx_labels, parse_idx, parse_idx_labels,
    write_idx, write_idx_labels,
};
pub use spec::DataSpec;
pub use synthetic::{gen_gaussian_classes, gen_synthetic, mean_horizontal_difference, Family};
pub use vectors::{
    class_split, load_vectors_csv, preprocess_tabular, write_vectors_csv, ClassSplit,
    Standardization, TabularRecord, VectorDataset, DEFAULT_UNIQUENESS_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::flow::Shape3;

/// 8-bit images stored `n × (c·h·w)`, channel-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub shape: Shape3,
    pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
    pub provenance: String,
}

impl ImageDataset {
    pub fn new(shape: Shape3, pixels: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        let d = shape.numel();
        if d == 0 || pixels.len() % d != 0 {
            return Err(Error::input(format!(
                "{} pixels do not divide into images of shape {shape}",
                pixels.len()
            )));
        }
        Ok(ImageDataset {
            shape,
            pixels,
            labels: None,
            provenance: provenance.into(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::input(format!(
                "{} labels for {} images",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.numel()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageDataset {
            shape: self.shape,
            pixels,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Area-average resampling of every image to `h × w`.
    pub fn resize(&self, h: usize, w: usize) -> Result<ImageDataset> {
        if h == 0 || w == 0 {
            return Err(Error::config("resize target must be positive"));
        }
        let src = self.shape;
        if (src.h, src.w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = overlap_weights(src.h, h);
        let cols = overlap_weights(src.w, w);
        let out_shape = Shape3::new(src.c, h, w);
        let mut pixels = Vec::with_capacity(self.len() * out_shape.numel());
        for k in 0..self.len() {
            let img = self.image(k);
            for c in 0..src.c {
                for rw in &rows {
                    for cw in &cols {
                        let mut acc = 0.0;
                        for &(si, a) in rw {
                            for &(sj, b) in cw {
                                acc += a * b * img[src.index(c, si, sj)] as f64;
                            }
                        }
                        pixels.push(acc.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        let mut out = ImageDataset::new(
            out_shape,
            pixels,
            format!("{} resized to {h}x{w}", self.provenance),
        )?;
        out.labels = self.labels.clone();
        Ok(out)
    }

    /// First `n` images (or all of them).
    pub fn head(&self, n: usize) -> ImageDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Images `from..` as a new dataset.
    pub fn tail_from(&self, from: usize) -> ImageDataset {
        let idx: Vec<usize> = (from.min(self.len())..self.len()).collect();
        self.subset(&idx)
    }
}

/// For each of `m` output cells, the source cells it overlaps and their
/// normalized overlap weights.
fn overlap_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut cells = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < n {
                let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                if overlap > 0.0 {
                    cells.push((s, overlap / scale));
                }
                s += 1;
            }
            cells
        })
        .collect()
}
