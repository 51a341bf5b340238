//! Batch normalization as an invertible layer.

use std::fmt;
use std::str::FromStr;

use super::Direction;
use crate::error::{Error, Result};
use crate::numerics::{Axis, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch.
    Train,
    /// Running statistics accumulated during training.
    Eval,
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::Train => "train",
            BnMode::Eval => "eval",
        })
    }
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(BnMode::Train),
            "eval" => Ok(BnMode::Eval),
            other => Err(Error::config(format!(
                "bn mode must be train or eval, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub dim: usize,
    /// `gamma = exp(log_gamma)`, so `log|gamma|` is the parameter itself.
    log_gamma: ParamId,
    beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics observed during a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct BatchNormOutput {
    pub y: Var,
    /// `1 × 1`, identical for every example of the batch.
    pub logdet: Var,
    pub stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNormLayer {
            dim,
            log_gamma: store.add(format!("{name}.log_gamma"), Tensor::zeros(&[1, dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn log_gamma_param(&self) -> ParamId {
        self.log_gamma
    }

    pub fn beta_param(&self) -> ParamId {
        self.beta
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        direction: Direction,
        mode: BnMode,
        site: &str,
    ) -> Result<BatchNormOutput> {
        let n = tape.value(x).rows();
        if tape.value(x).cols() != self.dim {
            return Err(Error::contract(format!(
                "{site}: batch-norm over {} coordinates got {}",
                self.dim,
                tape.value(x).cols()
            )));
        }
        let log_gamma = tape.param(store, self.log_gamma);
        let beta = tape.param(store, self.beta);
        let eps = tape.scalar(self.eps);

        if direction == Direction::LatentToData || mode == BnMode::Eval {
            let mean = tape.leaf(Tensor::row(self.running_mean.clone()));
            let var = tape.leaf(Tensor::row(self.running_var.clone()));
            let var_eps = tape.add(var, eps)?;
            let log_var = tape.log(var_eps);
            let half_log_var = tape.scale(log_var, 0.5);
            // log-scale of the data→latent map per coordinate
            let log_scale = tape.sub(log_gamma, half_log_var)?;
            let ld = tape.sum(log_scale);
            return match direction {
                Direction::DataToLatent => {
                    let centered = tape.sub(x, mean)?;
                    let scale = tape.exp(log_scale);
                    let scaled = tape.mul(centered, scale)?;
                    let y = tape.add(scaled, beta)?;
                    Ok(BatchNormOutput {
                        y,
                        logdet: ld,
                        stats: None,
                    })
                }
                Direction::LatentToData => {
                    let shifted = tape.sub(x, beta)?;
                    let neg = tape.neg(log_scale);
                    let inv = tape.exp(neg);
                    let unscaled = tape.mul(shifted, inv)?;
                    let y = tape.add(unscaled, mean)?;
                    let logdet = tape.neg(ld);
                    Ok(BatchNormOutput {
                        y,
                        logdet,
                        stats: None,
                    })
                }
            };
        }

        if n < 2 {
            return Err(Error::contract(format!(
                "{site}: train-mode batch norm needs a batch of at least 2, got {n}"
            )));
        }
        let mean = tape.mean_axis(x, Axis::Rows);
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, Axis::Rows);
        let var_eps = tape.add(var, eps)?;
        let log_var = tape.log(var_eps);
        let half_log_var = tape.scale(log_var, 0.5);
        let log_scale = tape.sub(log_gamma, half_log_var)?;
        let scale = tape.exp(log_scale);
        let scaled = tape.mul(centered, scale)?;
        let y = tape.add(scaled, beta)?;
        let logdet = tape.sum(log_scale);
        if !tape.value(y).is_finite() {
            return Err(Error::numeric(site, "batch-norm output is not finite"));
        }
        let stats = Some((
            tape.value(mean).data().to_vec(),
            tape.value(var).data().to_vec(),
        ));
        Ok(BatchNormOutput { y, logdet, stats })
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
