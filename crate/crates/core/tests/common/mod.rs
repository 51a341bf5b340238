//! Shared oracles and fixtures for the integration suites.

#![allow(dead_code)]

use couplingflow::flow::{
    build_flow, ArchConfig, BnMode, FlowModel, Layer, Layout, MaskKind, Shape3,
};
use couplingflow::numerics::{RngStream, Tensor};
use couplingflow::stnet::StNetConfig;
use nalgebra::DMatrix;

pub fn random_batch(n: usize, d: usize, std: f64, seed: u64) -> Tensor {
    let data = RngStream::new(seed, 77)
        .normal_vec(n * d)
        .into_iter()
        .map(|v| std * v)
        .collect();
    Tensor::matrix(n, d, data).unwrap()
}

pub fn arch(shape: Shape3, layout: Layout, mask: MaskKind, batch_norm: bool) -> ArchConfig {
    let mut cfg = ArchConfig::new(
        shape,
        layout,
        mask,
        StNetConfig {
            hidden: 12,
            blocks: 1,
            bottleneck: None,
        },
    );
    cfg.batch_norm = batch_norm;
    cfg
}

/// A built model with random weights and, if it has batch norm, random
/// running statistics.
pub fn random_model(cfg: &ArchConfig, std: f64, seed: u64) -> FlowModel {
    let mut m = build_flow(cfg).unwrap();
    m.randomize_parameters(std, seed);
    let stats = m.running_stats();
    if !stats.is_empty() {
        let mut rng = RngStream::new(seed, 5);
        let mut values = Vec::with_capacity(stats.len());
        for layer in m.layers() {
            if let Layer::BatchNorm(b) = layer {
                values.extend((0..b.dim).map(|_| 0.5 * rng.normal()));
                values.extend((0..b.dim).map(|_| rng.uniform_range(0.5, 2.0)));
            }
        }
        m.set_running_stats(&values).unwrap();
    }
    m
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut p = x.to_vec();
    for c in 0..x.len() {
        p[c] = x[c] + h;
        let up = f(&p);
        p[c] = x[c] - h;
        let down = f(&p);
        p[c] = x[c];
        for r in 0..m {
            j[(r, c)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    j
}

pub fn log_abs_det(j: &DMatrix<f64>) -> f64 {
    j.clone().lu().determinant().abs().ln()
}

/// The eval-mode data→latent map of one example.
pub fn latent_fn(model: &FlowModel) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |x: &[f64]| {
        let t = Tensor::matrix(1, x.len(), x.to_vec()).unwrap();
        model.to_latent(&t, BnMode::Eval).unwrap().0.into_data()
    }
}

pub fn relative_error(analytic: f64, oracle: f64) -> f64 {
    (analytic - oracle).abs() / oracle.abs().max(1e-6)
}

/// Worst relative gap between analytic log-dets and finite-difference
/// Jacobians over `n` random inputs.
pub fn logdet_gap(model: &FlowModel, n: usize, seed: u64) -> f64 {
    let d = model.dim();
    let x = random_batch(n, d, 1.0, seed);
    let (_, ld) = model.to_latent(&x, BnMode::Eval).unwrap();
    let f = latent_fn(model);
    (0..n)
        .map(|r| {
            let j = fd_jacobian(&f, x.row_slice(r), 1e-5);
            relative_error(ld[r], log_abs_det(&j))
        })
        .fold(0.0, f64::max)
}

/// Largest `|x − f(f⁻¹(x))|` over `n` random inputs.
pub fn round_trip_gap(model: &FlowModel, n: usize, seed: u64) -> f64 {
    let x = random_batch(n, model.dim(), 1.0, seed);
    let (z, _) = model.to_latent(&x, BnMode::Eval).unwrap();
    let (back, _) = model.from_latent(&z).unwrap();
    back.max_abs_diff(&x)
}

/// Every mask kind on a flat layout plus a two-scale model, all with batch
/// norm and random weights.
pub fn invertibility_models() -> Vec<(String, FlowModel)> {
    let mut out = Vec::new();
    for (i, kind) in MaskKind::ALL.into_iter().enumerate() {
        let cfg = arch(Shape3::new(2, 4, 4), Layout::Flat { layers: 4 }, kind, true);
        out.push((kind.name().to_string(), random_model(&cfg, 0.3, i as u64)));
    }
    let cfg = arch(
        Shape3::new(1, 8, 8),
        Layout::MultiScale {
            scales: 2,
            per_half: 2,
        },
        MaskKind::Checkerboard,
        true,
    );
    out.push(("multiscale".to_string(), random_model(&cfg, 0.3, 9)));
    out
}

/// Trapezoid rule for `∫∫ exp(logp)` over `[lo, hi]²` with `k` nodes per axis.
pub fn trapezoid_mass(model: &FlowModel, lo: f64, hi: f64, k: usize) -> f64 {
    let step = (hi - lo) / (k - 1) as f64;
    let weight = |i: usize| if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..k {
        let x0 = lo + i as f64 * step;
        let mut row = Vec::with_capacity(2 * k);
        for j in 0..k {
            row.extend([x0, lo + j as f64 * step]);
        }
        let lp = model
            .log_prob(&Tensor::matrix(k, 2, row).unwrap(), BnMode::Eval)
            .unwrap()
            .values;
        for (j, v) in lp.iter().enumerate() {
            total += weight(i) * weight(j) * v.exp();
        }
    }
    total * step * step
}

/// Two well-separated Gaussian modes in the plane.
pub fn two_modes(n: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, 31);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
        data.push(2.0 * sign + 0.5 * rng.normal());
        data.push(sign + 0.5 * rng.normal());
    }
    Tensor::matrix(n, 2, data).unwrap()
}

/// Exhaustive pair count: P(in > ood) + ½·P(in = ood).
pub fn pairwise_auroc(in_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in in_scores {
        for b in ood_scores {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * in_scores.len() * ood_scores.len()) as f64
}

/// A 2-dim flow fitted to [`two_modes`] for `steps` Adam steps.
pub fn fit_two_modes(steps: usize, seed: u64) -> couplingflow::Result<FlowModel> {
    use couplingflow::data::VectorDataset;
    use couplingflow::training::{train, DataSource, TrainConfig};

    let data = VectorDataset::new(two_modes(4000, seed), vec!["a".into(), "b".into()], None)?;
    let mut cfg = ArchConfig::new(
        Shape3::new(1, 1, 2),
        Layout::Flat { layers: 8 },
        MaskKind::Checkerboard,
        StNetConfig {
            hidden: 64,
            blocks: 2,
            bottleneck: None,
        },
    );
    cfg.init_seed = seed;
    let config = TrainConfig {
        epochs: 10,
        steps_per_epoch: Some(steps / 10),
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    };
    let out = train(build_flow(&cfg)?, &config, DataSource::Vectors(&data), None)?;
    Ok(out.checkpoint.model)
}
