mod common;

use std::collections::BTreeSet;

use common::{arch, random_batch, random_model};
use couplingflow::data::{gen_synthetic, Family};
use couplingflow::flow::squeeze::unsqueeze;
use couplingflow::flow::{build_flow, BnMode, Layer, Layout, MaskKind, Shape3};
use couplingflow::inspect::{
    coupling_trace, latent_image, region_latent_indices, resample_latent_region, square_region,
    DEFAULT_NOISE_SAMPLES,
};
use couplingflow::numerics::{RngStream, Tensor};
use couplingflow::training::{dequantize_with_noise, DEFAULT_LOGIT_ALPHA};

fn two_scale(shape: Shape3, batch_norm: bool) -> couplingflow::flow::ArchConfig {
    arch(
        shape,
        Layout::MultiScale {
            scales: 2,
            per_half: 1,
        },
        MaskKind::Checkerboard,
        batch_norm,
    )
}

/// First-draw dequantization exactly as the latent image consumes it.
fn first_draw(images: &couplingflow::data::ImageDataset, seed: u64) -> Tensor {
    let d = images.dim();
    let mut values = Vec::new();
    for i in 0..images.len() {
        let eps = RngStream::new(seed, i as u64).uniform_vec(d);
        dequantize_with_noise(images.image(i), &eps, DEFAULT_LOGIT_ALPHA, &mut values);
    }
    Tensor::matrix(images.len(), d, values).unwrap()
}

#[test]
fn default_noise_samples() {
    assert_eq!(DEFAULT_NOISE_SAMPLES, 40);
}

#[test]
fn identity_flow_latent_is_dequantized_input() {
    let m = build_flow(&two_scale(Shape3::new(1, 4, 4), false)).unwrap();
    let images = gen_synthetic(Family::Blobs, 3, 4, 1).unwrap();
    let img = latent_image(&m, &images, 1, BnMode::Eval, 7, DEFAULT_LOGIT_ALPHA).unwrap();
    assert_eq!(img, first_draw(&images, 7));
}

#[test]
fn single_draw_matches_manual_unsqueeze_and_join() {
    let m = random_model(&two_scale(Shape3::new(1, 4, 4), true), 0.3, 2);
    let kinds: Vec<&str> = m.layers().iter().map(Layer::kind).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "squeeze").count(), 2);
    assert_eq!(kinds.iter().filter(|k| **k == "factor-out").count(), 1);

    let images = gen_synthetic(Family::Stripes, 2, 4, 3).unwrap();
    let img = latent_image(&m, &images, 1, BnMode::Eval, 5, DEFAULT_LOGIT_ALPHA).unwrap();
    let (z, _) = m.to_latent(&first_draw(&images, 5), BnMode::Eval).unwrap();
    for r in 0..2 {
        let row = z.row_slice(r);
        // 8 factored coordinates (2×2×2), then the final 8×1×1 block
        let last = unsqueeze(
            &Tensor::matrix(1, 8, row[8..].to_vec()).unwrap(),
            Shape3::new(2, 2, 2),
        )
        .unwrap();
        let mut channels = row[..8].to_vec();
        channels.extend_from_slice(last.data());
        let joined = unsqueeze(
            &Tensor::matrix(1, 16, channels).unwrap(),
            Shape3::new(1, 4, 4),
        )
        .unwrap();
        assert_eq!(img.row_slice(r), joined.data());
    }
}

#[test]
fn more_noise_samples_reduce_variance() {
    let m = random_model(&two_scale(Shape3::new(1, 4, 4), false), 0.3, 4);
    let images = gen_synthetic(Family::Blobs, 3, 4, 8).unwrap();
    let spread = |k: usize| {
        let runs: Vec<Tensor> = (0..10)
            .map(|seed| {
                latent_image(&m, &images, k, BnMode::Eval, seed, DEFAULT_LOGIT_ALPHA).unwrap()
            })
            .collect();
        let n = runs[0].len();
        let mut total = 0.0;
        for c in 0..n {
            let mean = runs.iter().map(|r| r.data()[c]).sum::<f64>() / 10.0;
            total += runs
                .iter()
                .map(|r| (r.data()[c] - mean).powi(2))
                .sum::<f64>()
                / 9.0;
        }
        total / n as f64
    };
    let (one, forty) = (spread(1), spread(40));
    assert!(forty < one, "{forty} ≥ {one}");
}

#[test]
fn empty_region_reconstructs_input() {
    let m = random_model(&two_scale(Shape3::new(1, 4, 4), true), 0.3, 6);
    let x = random_batch(4, 16, 1.0, 1);
    let out = resample_latent_region(&m, &x, &[false; 16], 3).unwrap();
    assert!(out.max_abs_diff(&x) < 1e-8);
}

#[test]
fn identity_flow_keeps_pixels_outside_region() {
    let m = build_flow(&two_scale(Shape3::new(2, 8, 8), false)).unwrap();
    let x = random_batch(3, 128, 1.0, 2);
    let region = square_region(8, 8, 1, 3, 4).unwrap();
    let out = resample_latent_region(&m, &x, &region, 9).unwrap();
    let s = m.input_shape();
    for r in 0..3 {
        for k in 0..128 {
            let (_, i, j) = s.coords(k);
            let (a, b) = (out.row_slice(r)[k], x.row_slice(r)[k]);
            if region[i * 8 + j] {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn full_region_is_seeded() {
    let m = random_model(&two_scale(Shape3::new(1, 4, 4), false), 0.3, 7);
    let x = random_batch(2, 16, 1.0, 3);
    let all = [true; 16];
    let a = resample_latent_region(&m, &x, &all, 1).unwrap();
    assert_eq!(a, resample_latent_region(&m, &x, &all, 1).unwrap());
    assert_ne!(a, resample_latent_region(&m, &x, &all, 2).unwrap());
    let z = m.to_latent(&a, BnMode::Eval).unwrap().0;
    let fresh = Tensor::matrix(1, 16, RngStream::new(1, 0).normal_vec(16)).unwrap();
    assert!((z.row_slice(0).iter().zip(fresh.data())).all(|(u, v)| (u - v).abs() < 1e-8));
}

#[test]
fn region_maps_to_pixels_times_channels() {
    let m = build_flow(&two_scale(Shape3::new(2, 8, 8), false)).unwrap();
    let s = m.input_shape();
    let region = square_region(8, 8, 2, 2, 4).unwrap();
    let idx = region_latent_indices(&m, &region).unwrap();
    assert_eq!(idx.len(), 16 * 2);
    let origins: BTreeSet<usize> = idx.iter().map(|&k| m.latent_origin()[k]).collect();
    let expected: BTreeSet<usize> = (0..s.numel())
        .filter(|&o| {
            let (_, i, j) = s.coords(o);
            region[i * 8 + j]
        })
        .collect();
    assert_eq!(origins, expected);
}

#[test]
fn trace_covers_every_coupling() {
    let cfg = two_scale(Shape3::new(1, 4, 4), true);
    let x = random_batch(3, 16, 1.0, 4);

    let fresh = build_flow(&cfg).unwrap();
    let traces = coupling_trace(&fresh, &x, BnMode::Eval).unwrap();
    assert_eq!(traces.len(), fresh.coupling_count());
    for t in &traces {
        assert!(t.s.values.data().iter().all(|&v| v == 0.0));
        assert!(t.t.values.data().iter().all(|&v| v == 0.0));
    }

    let m = random_model(&cfg, 0.3, 8);
    for t in coupling_trace(&m, &x, BnMode::Eval).unwrap() {
        let Layer::Coupling(c) = &m.layers()[t.layer] else {
            panic!("trace entry {} is not a coupling layer", t.layer);
        };
        assert_eq!(
            t.s.predicted.iter().filter(|&&p| p).count(),
            c.mask.change_count()
        );
        assert_eq!(t.activation.cols(), 16);
        for r in 0..3 {
            for (k, &v) in t.s.values.row_slice(r).iter().enumerate() {
                if !t.s.predicted[k] {
                    assert_eq!(v, 0.0);
                }
            }
            assert!(t.s.values.row_slice(r).iter().any(|&v| v != 0.0));
        }
    }
}
