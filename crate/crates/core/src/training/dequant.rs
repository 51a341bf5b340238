//! Uniform dequantization followed by logit preprocessing.
//!
//! `u = (x + ε) / 256`, `w = α + (1 − 2α)·u`, `v = log w − log(1 − w)`.
//! The per-example offset collects `−log 256` and the logit Jacobian
//! `log(1 − 2α) − log w − log(1 − w)` over every dimension, so that
//! `flow_logprob(v) + offset` is a density over the pixel scale `[0, 256)`.

use crate::data::{ImageDataset, VectorDataset};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const DEFAULT_LOGIT_ALPHA: f64 = 0.05;

/// `log` of the `1/256` rescaling, per dimension.
pub fn uniform_scale_logdet() -> f64 {
    -(256f64).ln()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha < 0.5) {
        return Err(Error::config(format!(
            "logit alpha must be in [0, 0.5), got {alpha}"
        )));
    }
    Ok(())
}

/// Dequantize one example with explicit noise `ε ∈ [0,1)`, appending the
/// logit values to `out`. Returns the log-det offset.
pub fn dequantize_with_noise(pixels: &[u8], noise: &[f64], alpha: f64, out: &mut Vec<f64>) -> f64 {
    debug_assert_eq!(pixels.len(), noise.len());
    let scale = 1.0 - 2.0 * alpha;
    let mut offset = pixels.len() as f64 * (uniform_scale_logdet() + scale.ln());
    for (&p, &e) in pixels.iter().zip(noise) {
        let u = (p as f64 + e) / 256.0;
        let w = alpha + scale * u;
        let (lw, l1w) = (w.ln(), (1.0 - w).ln());
        out.push(lw - l1w);
        offset -= lw + l1w;
    }
    offset
}

/// Dequantize a batch `n × D` of 8-bit pixels with noise from `rng`.
/// Returns the logit values and the per-example log-det offset.
pub fn dequantize(
    pixels: &[u8],
    dim: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<(Tensor, Vec<f64>)> {
    check_alpha(alpha)?;
    if dim == 0 || pixels.is_empty() || pixels.len() % dim != 0 {
        return Err(Error::input(format!(
            "{} pixels do not form a non-empty batch of {dim}-dimensional examples",
            pixels.len()
        )));
    }
    let n = pixels.len() / dim;
    let mut out = Vec::with_capacity(pixels.len());
    let mut offsets = Vec::with_capacity(n);
    for row in pixels.chunks(dim) {
        let noise = rng.uniform_vec(dim);
        offsets.push(dequantize_with_noise(row, &noise, alpha, &mut out));
    }
    Ok((Tensor::matrix(n, dim, out)?, offsets))
}

/// Inverse of the logit preprocessing, rounded back to 8-bit pixels.
pub fn to_pixels(values: &[f64], alpha: f64) -> Vec<u8> {
    let scale = 1.0 - 2.0 * alpha;
    values
        .iter()
        .map(|&v| {
            let w = 1.0 / (1.0 + (-v).exp());
            let u = (w - alpha) / scale;
            (u * 256.0 - 0.5).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Training or scoring data, either 8-bit images (dequantized on the fly)
/// or real vectors (used as they are).
#[derive(Clone, Copy, Debug)]
pub enum DataSource<'a> {
    Images(&'a ImageDataset),
    Vectors(&'a VectorDataset),
}

impl<'a> DataSource<'a> {
    pub fn len(&self) -> usize {
        match self {
            DataSource::Images(d) => d.len(),
            DataSource::Vectors(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSource::Images(d) => d.dim(),
            DataSource::Vectors(d) => d.dim(),
        }
    }

    /// Model inputs and log-det offsets for `rows`; image noise is drawn
    /// from `rng` in row order.
    pub fn batch(
        &self,
        rows: &[usize],
        alpha: f64,
        rng: &mut RngStream,
    ) -> Result<(Tensor, Vec<f64>)> {
        if rows.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        match self {
            DataSource::Images(d) => {
                let mut pixels = Vec::with_capacity(rows.len() * d.dim());
                for &r in rows {
                    pixels.extend_from_slice(d.image(r));
                }
                dequantize(&pixels, d.dim(), alpha, rng)
            }
            DataSource::Vectors(d) => Ok((d.data.select_rows(rows), vec![0.0; rows.len()])),
        }
    }
}
