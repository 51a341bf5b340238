//! Finite-difference checks of whole-model gradients.

use crate::error::Result;
use crate::flow::{build_flow, ArchConfig, BnMode, FlowModel, Layout, MaskKind, Shape3};
use crate::numerics::gradcheck::{
    central_differences, max_relative_error, primitive_suite, GradCheckReport, DEFAULT_STEP,
};
use crate::numerics::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::stnet::{StNet, StNetConfig};

use super::dequant::dequantize;
use super::objective::{contrastive_on, log_prob_with_offsets};

/// Compares the tape gradient of `f` w.r.t. every parameter in `store`
/// against central differences.
pub fn check_params(
    name: &str,
    store: &mut ParamStore,
    tolerance: f64,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let base = store.flat_values();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    store.zero_grad();
    grads.accumulate_into(store)?;
    let analytic: Vec<f64> = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect();
    let mut probe = store.clone();
    let numeric = central_differences(
        |values| {
            probe.set_flat_values(values)?;
            let mut tape = Tape::new();
            let out = f(&mut tape, &probe)?;
            Ok(tape.value(out).item())
        },
        &base,
        DEFAULT_STEP,
    )?;
    Ok(GradCheckReport {
        name: name.to_string(),
        max_relative_error: max_relative_error(&analytic, &numeric),
        tolerance,
        checked: base.len(),
    })
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let v = tape.value(y);
    let w = RngStream::new(seed, 77).uniform_vec(v.len());
    let wv = tape.leaf(Tensor::matrix(v.rows(), v.cols(), w)?);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Two-layer tanh network `W₂·tanh(W₁x + b₁) + b₂` with random weights.
fn two_layer_tanh(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, 10);
    let mut store = ParamStore::new();
    let mut rand = |r: usize, c: usize| Tensor::matrix(r, c, rng.normal_vec(r * c)).expect("shape");
    let w1 = store.add("w1", rand(5, 7));
    let b1 = store.add("b1", rand(1, 7));
    let w2 = store.add("w2", rand(7, 3));
    let b2 = store.add("b2", rand(1, 3));
    let x = rand(4, 5).map(|v| v.clamp(-2.0, 2.0));
    check_params("network/two_layer_tanh", &mut store, 1e-4, |t, s| {
        let xv = t.leaf(x.clone());
        let (w1, b1, w2, b2) = (
            t.param(s, w1),
            t.param(s, b1),
            t.param(s, w2),
            t.param(s, b2),
        );
        let h = t.affine(xv, w1, b1)?;
        let h = t.tanh(h);
        let y = t.affine(h, w2, b2)?;
        weighted_sum(t, y, seed)
    })
}

/// St-network with a bottleneck, all parameters random.
fn stnet_with_bottleneck(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, 11);
    let cfg = StNetConfig {
        hidden: 6,
        blocks: 2,
        bottleneck: Some(2),
    };
    let net = StNet::new(&mut store, "st", 4, 3, cfg, &mut rng)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = 0.5 * rng.normal();
        }
    }
    let x = Tensor::matrix(3, 4, rng.normal_vec(12))?;
    check_params("stnet/bottleneck", &mut store, 1e-4, |t, s| {
        let xv = t.leaf(x.clone());
        let (sv, tv) = net.apply(t, s, xv)?;
        let both = t.concat(&[sv, tv])?;
        weighted_sum(t, both, seed)
    })
}

fn small_model(batch_norm: bool, seed: u64) -> Result<FlowModel> {
    let mut cfg = ArchConfig::new(
        Shape3::new(1, 2, 4),
        Layout::Flat { layers: 2 },
        MaskKind::Checkerboard,
        StNetConfig {
            hidden: 6,
            blocks: 1,
            bottleneck: None,
        },
    );
    cfg.batch_norm = batch_norm;
    let mut model = build_flow(&cfg)?;
    model.randomize_parameters(0.3, seed);
    Ok(model)
}

fn pixel_batch(n: usize, dim: usize, seed: u64) -> Vec<u8> {
    let mut rng = RngStream::new(seed, 12);
    (0..n * dim).map(|_| rng.below(256) as u8).collect()
}

/// The full maximum-likelihood training loss: dequantized pixels, coupling
/// layers, train-mode batch norm and dequantization offsets.
fn full_mle_step(seed: u64) -> Result<GradCheckReport> {
    let model = small_model(true, seed)?;
    let dim = model.dim();
    let (x, off) = dequantize(
        &pixel_batch(6, dim, seed),
        dim,
        0.05,
        &mut RngStream::new(seed, 13),
    )?;
    let mut store = model.params().clone();
    check_params("step/mle_batchnorm_train", &mut store, 1e-3, |t, s| {
        let mut m = model.clone();
        *m.params_mut() = s.clone();
        let (lp, _) = log_prob_with_offsets(t, &m, &x, &off, BnMode::Train)?;
        let mean = t.mean(lp);
        Ok(t.neg(mean))
    })
}

/// Contrastive objective with the indicator fixed at the starting point.
fn contrastive_step(seed: u64) -> Result<GradCheckReport> {
    let model = small_model(false, seed)?;
    let dim = model.dim();
    let mut rng = RngStream::new(seed, 14);
    let (xi, offi) = dequantize(&pixel_batch(4, dim, seed), dim, 0.05, &mut rng)?;
    let (xo, offo) = dequantize(&pixel_batch(6, dim, seed + 1), dim, 0.05, &mut rng)?;
    // place c at the median OOD score so the indicator is non-trivial
    let mut tape = Tape::new();
    let (lp, _) = log_prob_with_offsets(&mut tape, &model, &xo, &offo, BnMode::Eval)?;
    let mut sorted = tape.value(lp).data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = 0.5 * (sorted[2] + sorted[3]);
    let mut store = model.params().clone();
    check_params(
        "step/contrastive_fixed_indicator",
        &mut store,
        1e-4,
        |t, s| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            let (a, _) = log_prob_with_offsets(t, &m, &xi, &offi, BnMode::Eval)?;
            let (b, _) = log_prob_with_offsets(t, &m, &xo, &offo, BnMode::Eval)?;
            contrastive_on(t, a, b, floor)
        },
    )
}

/// Every primitive plus whole-network and whole-step checks.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = primitive_suite(seed)?;
    reports.push(two_layer_tanh(seed)?);
    reports.push(stnet_with_bottleneck(seed)?);
    reports.push(full_mle_step(seed)?);
    reports.push(contrastive_step(seed)?);
    Ok(reports)
}
