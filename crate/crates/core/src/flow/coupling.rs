//! Affine coupling layer.
//!
//! Data → latent: `y_change = (x_change + t(x_cond)) ⊙ exp(s(x_cond))`, all
//! other coordinates copied, log-det `Σ s`. Latent → data inverts with
//! `x_change = y_change ⊙ exp(−s) − t`. The log-scale is bounded as
//! `s = exp(log_clamp) · tanh(raw_s)` with a learned per-layer clamp.

use super::Mask;
use crate::error::{Error, Result};
use crate::numerics::{Axis, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::stnet::{StNet, StNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    DataToLatent,
    LatentToData,
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub mask: Mask,
    pub stnet: StNet,
    log_clamp: ParamId,
}

/// Values produced by one coupling application.
#[derive(Clone, Copy, Debug)]
pub struct CouplingOutput {
    pub y: Var,
    /// `n × 1`, sign already matching the direction.
    pub logdet: Var,
    /// Clamped log-scale, `n × |change|`.
    pub s: Var,
    pub t: Var,
}

impl CouplingLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mask: Mask,
        config: StNetConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let stnet = StNet::new(
            store,
            &format!("{name}.st"),
            mask.condition_count(),
            mask.change_count(),
            config,
            rng,
        )?;
        let log_clamp = store.add(format!("{name}.log_clamp"), Tensor::scalar(0.0));
        Ok(CouplingLayer {
            mask,
            stnet,
            log_clamp,
        })
    }

    pub fn log_clamp_param(&self) -> ParamId {
        self.log_clamp
    }

    /// Apply the layer to a `n × D` batch. `site` labels numeric errors.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        direction: Direction,
        site: &str,
    ) -> Result<CouplingOutput> {
        let width = tape.value(x).cols();
        if width != self.mask.shape.numel() {
            return Err(Error::contract(format!(
                "{site}: input has {width} coordinates, layer expects {}",
                self.mask.shape.numel()
            )));
        }
        let cond = tape.gather(x, self.mask.condition_idx())?;
        let (raw_s, t) = self.stnet.apply(tape, store, cond)?;
        let clamp = tape.param(store, self.log_clamp);
        let clamp = tape.exp(clamp);
        let bounded = tape.tanh(raw_s);
        let s = tape.mul(bounded, clamp)?;
        if !tape.value(s).is_finite() || !tape.value(t).is_finite() {
            return Err(Error::numeric(
                site,
                "st-network produced non-finite s or t",
            ));
        }

        let x_change = tape.gather(x, self.mask.change_idx())?;
        let (y_change, logdet) = match direction {
            Direction::DataToLatent => {
                let shifted = tape.add(x_change, t)?;
                let scale = tape.exp(s);
                let y = tape.mul(shifted, scale)?;
                (y, tape.sum_axis(s, Axis::Cols))
            }
            Direction::LatentToData => {
                let neg_s = tape.neg(s);
                let scale = tape.exp(neg_s);
                let unscaled = tape.mul(x_change, scale)?;
                let y = tape.sub(unscaled, t)?;
                let ld = tape.sum_axis(s, Axis::Cols);
                (y, tape.neg(ld))
            }
        };
        let kept = tape.gather(x, self.mask.keep_idx())?;
        let kept = tape.scatter(kept, self.mask.keep_idx(), width)?;
        let changed = tape.scatter(y_change, self.mask.change_idx(), width)?;
        let y = tape.add(kept, changed)?;
        if !tape.value(y).is_finite() {
            return Err(Error::numeric(site, "coupling output is not finite"));
        }
        Ok(CouplingOutput { y, logdet, s, t })
    }
}
