//! Squeeze (space-to-channel) permutation.
//!
//! A `c × h × w` image becomes `4c × h/2 × w/2`. Output channel block `k`
//! holds the sub-image sampled at offset `k` of `(0,0), (0,1), (1,0), (1,1)`,
//! so output channel `k·c + ch` is input channel `ch` at that offset.

use std::sync::Arc;

use super::Shape3;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

pub fn squeezed_shape(shape: Shape3) -> Result<Shape3> {
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(Error::config(format!(
            "cannot squeeze shape {shape}: height and width must be even"
        )));
    }
    Ok(Shape3::new(shape.c * 4, shape.h / 2, shape.w / 2))
}

/// `perm[out] = in`: the input coordinate feeding each squeezed coordinate.
pub fn squeeze_permutation(shape: Shape3) -> Result<Arc<[usize]>> {
    let out = squeezed_shape(shape)?;
    let mut perm = Vec::with_capacity(shape.numel());
    for (k, &(di, dj)) in OFFSETS.iter().enumerate() {
        for ch in 0..shape.c {
            debug_assert_eq!(perm.len(), out.index(k * shape.c + ch, 0, 0));
            for i in 0..out.h {
                for j in 0..out.w {
                    perm.push(shape.index(ch, 2 * i + di, 2 * j + dj));
                }
            }
        }
    }
    Ok(perm.into())
}

pub fn inverse_permutation(perm: &[usize]) -> Arc<[usize]> {
    let mut inv = vec![0; perm.len()];
    for (o, &i) in perm.iter().enumerate() {
        inv[i] = o;
    }
    inv.into()
}

fn permute_columns(x: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    debug_assert_eq!(c, perm.len());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        out.extend(perm.iter().map(|&p| row[p]));
    }
    Tensor::matrix(r, c, out).expect("permutation preserves shape")
}

/// Squeeze a batch `n × (c·h·w)`.
pub fn squeeze(x: &Tensor, shape: Shape3) -> Result<Tensor> {
    check_width(x, shape)?;
    Ok(permute_columns(x, &squeeze_permutation(shape)?))
}

/// Exact inverse of [`squeeze`]; `shape` is the *unsqueezed* shape.
pub fn unsqueeze(x: &Tensor, shape: Shape3) -> Result<Tensor> {
    check_width(x, shape)?;
    Ok(permute_columns(
        x,
        &inverse_permutation(&squeeze_permutation(shape)?),
    ))
}

fn check_width(x: &Tensor, shape: Shape3) -> Result<()> {
    if x.cols() != shape.numel() {
        return Err(Error::contract(format!(
            "batch has {} coordinates, shape {shape} needs {}",
            x.cols(),
            shape.numel()
        )));
    }
    Ok(())
}
