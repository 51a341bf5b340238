//! Maximum-likelihood and contrastive objectives.

use crate::error::{Error, Result};
use crate::flow::{BatchStats, BnMode, FlowModel};
use crate::numerics::{Tape, Tensor, Var};

/// `−mean(log p(x) + offset)` as a tape scalar, plus any batch statistics.
pub fn mle_loss_on(
    tape: &mut Tape,
    model: &FlowModel,
    x: &Tensor,
    offsets: &[f64],
    mode: BnMode,
) -> Result<(Var, Vec<BatchStats>)> {
    let lp = log_prob_with_offsets(tape, model, x, offsets, mode)?;
    let mean = tape.mean(lp.0);
    Ok((tape.neg(mean), lp.1))
}

pub fn mle_loss(model: &FlowModel, x: &Tensor, offsets: &[f64], mode: BnMode) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = mle_loss_on(&mut tape, model, x, offsets, mode)?;
    Ok(tape.value(loss).item())
}

/// Per-example `log p(x) + offset` (`n × 1`).
pub fn log_prob_with_offsets(
    tape: &mut Tape,
    model: &FlowModel,
    x: &Tensor,
    offsets: &[f64],
    mode: BnMode,
) -> Result<(Var, Vec<BatchStats>)> {
    if offsets.len() != x.rows() {
        return Err(Error::contract(format!(
            "{} offsets for a batch of {}",
            offsets.len(),
            x.rows()
        )));
    }
    let xv = tape.leaf(x.clone());
    let (lp, enc) = model.log_prob_on(tape, xv, mode)?;
    let off = tape.leaf(Tensor::column(offsets.to_vec()));
    Ok((tape.add(lp, off)?, enc.bn_stats))
}

/// Weights `I[log p > c] / N_eff` for the OOD term; all zero when no OOD
/// example exceeds `c`.
fn ood_weights(ood: &[f64], floor: f64) -> Vec<f64> {
    let active = ood.iter().filter(|&&v| v > floor).count();
    ood.iter()
        .map(|&v| if v > floor { 1.0 / active as f64 } else { 0.0 })
        .collect()
}

/// `mean(in) − Σ_ood log p · I[log p > c] / N_eff`, to be maximized.
pub fn contrastive_objective(in_lp: &[f64], ood_lp: &[f64], floor: f64) -> Result<f64> {
    if in_lp.is_empty() || ood_lp.is_empty() {
        return Err(Error::contract(
            "contrastive objective needs non-empty batches",
        ));
    }
    let mean_in = in_lp.iter().sum::<f64>() / in_lp.len() as f64;
    let pushed: f64 = ood_lp
        .iter()
        .zip(ood_weights(ood_lp, floor))
        .map(|(v, w)| v * w)
        .sum();
    Ok(mean_in - pushed)
}

/// Tape form of [`contrastive_objective`] on `n × 1` log-likelihoods. The
/// indicator is evaluated from the current values and held constant.
pub fn contrastive_on(tape: &mut Tape, in_lp: Var, ood_lp: Var, floor: f64) -> Result<Var> {
    let weights = ood_weights(tape.value(ood_lp).data(), floor);
    let mean_in = tape.mean(in_lp);
    let w = tape.leaf(Tensor::column(weights));
    let weighted = tape.mul(ood_lp, w)?;
    let pushed = tape.sum(weighted);
    tape.sub(mean_in, pushed)
}
