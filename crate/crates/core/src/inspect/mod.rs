//! Latent images, coupling-layer traces and latent-region resampling.
//!
//! Everything here maps flow-internal tensors back to the input shape by
//! undoing the squeezes and re-joining factored-out blocks, using the
//! coordinate bookkeeping kept by [`FlowModel`].

mod image;

pub use image::{
    channel_grid, render_gray, render_marked, write_pgm, write_ppm, Rendered, Sidecar,
};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::flow::{BnMode, FlowModel, Layer, MaskKind};
use crate::numerics::{RngStream, Tape, Tensor};
use crate::training::dequantize_with_noise;

pub const DEFAULT_NOISE_SAMPLES: usize = 40;

/// Scatter a latent batch back to input coordinates.
pub fn join_latent(model: &FlowModel, z: &Tensor) -> Result<Tensor> {
    scatter_rows(z, model.latent_origin(), model.dim())
}

fn scatter_rows(values: &Tensor, origin: &[usize], dim: usize) -> Result<Tensor> {
    let n = values.rows();
    let mut out = vec![0.0; n * dim];
    for r in 0..n {
        let row = values.row_slice(r);
        for (k, &o) in origin.iter().enumerate() {
            out[r * dim + o] = row[k];
        }
    }
    Tensor::matrix(n, dim, out)
}

/// `k` dequantized copies of `images`; example `i` takes all of its noise
/// from stream `i` of `seed`, as scoring does.
fn dequantize_draw(images: &ImageDataset, seed: u64, k: usize, alpha: f64) -> Result<Vec<Tensor>> {
    let d = images.dim();
    let noise: Vec<Vec<f64>> = (0..images.len())
        .map(|i| RngStream::new(seed, i as u64).uniform_vec(k * d))
        .collect();
    (0..k)
        .map(|draw| {
            let mut values = Vec::with_capacity(images.len() * d);
            for (i, eps) in noise.iter().enumerate() {
                dequantize_with_noise(
                    images.image(i),
                    &eps[draw * d..(draw + 1) * d],
                    alpha,
                    &mut values,
                );
            }
            Tensor::matrix(images.len(), d, values)
        })
        .collect()
}

/// `unsqueeze(z)` averaged over `k` dequantization draws, one row per image.
pub fn latent_image(
    model: &FlowModel,
    images: &ImageDataset,
    k: usize,
    bn_mode: BnMode,
    seed: u64,
    alpha: f64,
) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::contract(
            "latent image needs at least one noise sample",
        ));
    }
    if images.dim() != model.dim() {
        return Err(Error::input(format!(
            "images are {}, model input is {}",
            images.shape,
            model.input_shape()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for x in dequantize_draw(images, seed, k, alpha)? {
        let (z, _) = model.to_latent(&x, bn_mode)?;
        let img = join_latent(model, &z)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&img),
            None => acc = Some(img),
        }
    }
    Ok(acc.expect("k ≥ 1").map(|v| v / k as f64))
}

/// Values at input shape plus a per-coordinate flag; coordinates the layer
/// does not predict hold 0 and `predicted = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceImage {
    pub values: Tensor,
    pub predicted: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Index into [`FlowModel::layers`].
    pub layer: usize,
    pub mask: MaskKind,
    pub phase: usize,
    /// Coupling output joined with the blocks factored out before it.
    pub activation: Tensor,
    pub s: TraceImage,
    pub t: TraceImage,
}

/// One entry per coupling layer, in flow order.
pub fn coupling_trace(model: &FlowModel, x: &Tensor, bn_mode: BnMode) -> Result<Vec<LayerTrace>> {
    if x.cols() != model.dim() {
        return Err(Error::input(format!(
            "batch has {} coordinates per example, model needs {}",
            x.cols(),
            model.dim()
        )));
    }
    let d = model.dim();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let enc = model.encode(&mut tape, xv, bn_mode)?;
    let latent = model.latent_origin();
    let mut traces = Vec::with_capacity(enc.couplings.len());
    for rec in &enc.couplings {
        let Layer::Coupling(c) = &model.layers()[rec.layer] else {
            unreachable!("coupling record points at a coupling layer");
        };
        let origin = model.layer_origin(rec.layer);
        let mut parts = Vec::with_capacity(rec.factored.len() + 1);
        let mut joined_origin = Vec::with_capacity(d);
        let mut offset = 0;
        for (f, &size) in rec.factored.iter().zip(model.factored_sizes()) {
            parts.push(tape.value(*f).clone());
            joined_origin.extend_from_slice(&latent[offset..offset + size]);
            offset += size;
        }
        parts.push(tape.value(rec.output).clone());
        joined_origin.extend_from_slice(origin);
        let joined = hstack(&parts)?;
        let activation = scatter_rows(&joined, &joined_origin, d)?;

        let change_origin: Vec<usize> = c.mask.change_idx().iter().map(|&q| origin[q]).collect();
        let mut predicted = vec![false; d];
        for &o in &change_origin {
            predicted[o] = true;
        }
        let image = |v: &Tensor| -> Result<TraceImage> {
            Ok(TraceImage {
                values: scatter_rows(v, &change_origin, d)?,
                predicted: predicted.clone(),
            })
        };
        traces.push(LayerTrace {
            layer: rec.layer,
            mask: c.mask.kind,
            phase: c.mask.phase,
            activation,
            s: image(tape.value(rec.s))?,
            t: image(tape.value(rec.t))?,
        });
    }
    Ok(traces)
}

fn hstack(parts: &[Tensor]) -> Result<Tensor> {
    let n = parts[0].rows();
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            out.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::matrix(n, width, out)
}

/// Latent coordinates whose input-space origin lies in `region`, a
/// row-major `h × w` spatial mask shared by all channels.
pub fn region_latent_indices(model: &FlowModel, region: &[bool]) -> Result<Vec<usize>> {
    let s = model.input_shape();
    if region.len() != s.h * s.w {
        return Err(Error::input(format!(
            "region has {} cells, input is {}x{}",
            region.len(),
            s.h,
            s.w
        )));
    }
    Ok(model
        .latent_origin()
        .iter()
        .enumerate()
        .filter(|&(_, &o)| {
            let (_, i, j) = s.coords(o);
            region[i * s.w + j]
        })
        .map(|(k, _)| k)
        .collect())
}

/// Encode `x` (eval mode), redraw the latent coordinates belonging to
/// `region` from a standard normal and decode. Row `r` draws from stream
/// `r` of `seed`.
pub fn resample_latent_region(
    model: &FlowModel,
    x: &Tensor,
    region: &[bool],
    seed: u64,
) -> Result<Tensor> {
    let idx = region_latent_indices(model, region)?;
    let (mut z, _) = model.to_latent(x, BnMode::Eval)?;
    let d = z.cols();
    let data = z.data_mut();
    for r in 0..x.rows() {
        let fresh = RngStream::new(seed, r as u64).normal_vec(idx.len());
        for (&k, v) in idx.iter().zip(fresh) {
            data[r * d + k] = v;
        }
    }
    Ok(model.from_latent(&z)?.0)
}

/// A `size × size` square region with top-left corner `(top, left)`.
pub fn square_region(
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    size: usize,
) -> Result<Vec<bool>> {
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::input(format!(
            "square of side {size} at ({top},{left}) does not fit in {h}x{w}"
        )));
    }
    Ok((0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            (top..top + size).contains(&i) && (left..left + size).contains(&j)
        })
        .collect())
}
