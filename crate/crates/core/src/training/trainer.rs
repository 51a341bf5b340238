//! The training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::checkpoint::Checkpoint;
use super::dequant::{DataSource, DEFAULT_LOGIT_ALPHA};
use super::objective::{contrastive_objective, contrastive_on, log_prob_with_offsets};
use crate::error::{Error, Result};
use crate::flow::{BnMode, FlowModel};
use crate::numerics::{Adam, AdamConfig, RngStream, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mle,
    Contrastive,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mle => "mle",
            Objective::Contrastive => "contrastive",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mle" => Ok(Objective::Mle),
            "contrastive" => Ok(Objective::Contrastive),
            other => Err(Error::config(format!(
                "objective must be mle or contrastive, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per epoch; `None` means one pass over the training data.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub weight_decay: f64,
    /// Contrastive floor `c`. `None` derives it from the initial model as
    /// the in-distribution mean log-likelihood minus `floor_margin`.
    pub contrastive_floor: Option<f64>,
    pub floor_margin: f64,
    pub logit_alpha: f64,
    /// Examples (from the start of each dataset) used for epoch metrics.
    pub metric_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mle,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            weight_decay: 0.0,
            contrastive_floor: None,
            floor_margin: 50.0,
            logit_alpha: DEFAULT_LOGIT_ALPHA,
            metric_examples: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &FlowModel) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if model.has_batch_norm() && self.batch_size < 2 {
            return Err(Error::config(
                "batch size must be at least 2 when the model uses batch norm",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps per epoch must be positive"));
        }
        if self.metric_examples == 0 {
            return Err(Error::config("metric examples must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// One row of the metric log. Metrics are computed in eval mode on a fixed
/// subset with fixed dequantization noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    /// Value of the training objective (to be maximized).
    pub objective: f64,
    pub mean_nll_nats: f64,
    pub bits_per_dim: f64,
}

pub const METRIC_HEADER: &str = "epoch,step,objective,mean_nll_nats,bits_per_dim";

pub fn write_metrics(mut out: impl Write, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.step, r.objective, r.mean_nll_nats, r.bits_per_dim
        )?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    /// The contrastive floor actually used.
    pub floor: Option<f64>,
}

/// Cycles through shuffled passes of `0..n`.
struct BatchOrder {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(n: usize) -> Self {
        BatchOrder {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.cursor == self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let take = (size - rows.len()).min(self.order.len() - self.cursor);
            rows.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        rows
    }
}

/// Fixed inputs for epoch metrics.
struct MetricSet {
    x: Vec<(Tensor, Vec<f64>)>,
}

const METRIC_CHUNK: usize = 256;

impl MetricSet {
    fn new(src: DataSource, count: usize, alpha: f64, seed: u64, stream: u64) -> Result<Self> {
        let n = count.min(src.len());
        let mut rng = RngStream::new(seed, stream);
        let rows: Vec<usize> = (0..n).collect();
        let x = rows
            .chunks(METRIC_CHUNK)
            .map(|c| src.batch(c, alpha, &mut rng))
            .collect::<Result<_>>()?;
        Ok(MetricSet { x })
    }

    fn log_probs(&self, model: &FlowModel) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (x, off) in &self.x {
            let mut tape = Tape::new();
            let (lp, _) = log_prob_with_offsets(&mut tape, model, x, off, BnMode::Eval)?;
            out.extend_from_slice(tape.value(lp).data());
        }
        Ok(out)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train `model` on `data` (and, for the contrastive objective, push down
/// `ood`). Deterministic given the model and `config`.
pub fn train(
    model: FlowModel,
    config: &TrainConfig,
    data: DataSource,
    ood: Option<DataSource>,
) -> Result<TrainOutcome> {
    config.validate(&model)?;
    if data.is_empty() {
        return Err(Error::input("training data is empty"));
    }
    if data.dim() != model.dim() {
        return Err(Error::input(format!(
            "training data has {} coordinates, model input {} has {}",
            data.dim(),
            model.input_shape(),
            model.dim()
        )));
    }
    let ood = match (config.objective, ood) {
        (Objective::Contrastive, None) => {
            return Err(Error::config("contrastive training needs an OOD dataset"))
        }
        (Objective::Contrastive, Some(o)) if o.is_empty() || o.dim() != model.dim() => {
            return Err(Error::input(
                "OOD data is empty or does not match the model input",
            ))
        }
        (_, o) => o,
    };

    let alpha = config.logit_alpha;
    let dims = model.dim() as f64;
    let metric_in = MetricSet::new(data, config.metric_examples, alpha, config.seed, 2)?;
    let metric_ood = match (config.objective, ood) {
        (Objective::Contrastive, Some(o)) => Some(MetricSet::new(
            o,
            config.metric_examples,
            alpha,
            config.seed,
            3,
        )?),
        _ => None,
    };

    let floor = match config.objective {
        Objective::Mle => None,
        Objective::Contrastive => Some(match config.contrastive_floor {
            Some(c) => c,
            None => mean(&metric_in.log_probs(&model)?) - config.floor_margin,
        }),
    };

    let evaluate = |model: &FlowModel, epoch: usize, step: u64| -> Result<MetricRow> {
        let lp = metric_in.log_probs(model)?;
        let mean_lp = mean(&lp);
        let objective = match (&metric_ood, floor) {
            (Some(mo), Some(c)) => contrastive_objective(&lp, &mo.log_probs(model)?, c)?,
            _ => mean_lp,
        };
        Ok(MetricRow {
            epoch,
            step,
            objective,
            mean_nll_nats: -mean_lp,
            bits_per_dim: -mean_lp / (dims * std::f64::consts::LN_2),
        })
    };

    let mut model = model;
    let adam_config = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_config, model.params());
    let mut rng = RngStream::new(config.seed, 1);
    let mut order = BatchOrder::new(data.len());
    let mut ood_order = ood.map(|o| BatchOrder::new(o.len()));
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| data.len().div_ceil(config.batch_size));
    let mut step = 0u64;
    let mut metrics = vec![evaluate(&model, 0, 0)?];

    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let rows = order.next(config.batch_size, &mut rng);
            let (x, off) = data.batch(&rows, alpha, &mut rng)?;
            let mut tape = Tape::new();
            let attempt = (|| -> Result<_> {
                let (lp_in, stats) =
                    log_prob_with_offsets(&mut tape, &model, &x, &off, BnMode::Train)?;
                let objective = match (ood, ood_order.as_mut(), floor) {
                    (Some(o), Some(oo), Some(c)) => {
                        let orows = oo.next(config.batch_size, &mut rng);
                        let (xo, offo) = o.batch(&orows, alpha, &mut rng)?;
                        let (lp_ood, _) =
                            log_prob_with_offsets(&mut tape, &model, &xo, &offo, BnMode::Train)?;
                        contrastive_on(&mut tape, lp_in, lp_ood, c)?
                    }
                    _ => tape.mean(lp_in),
                };
                let loss = tape.neg(objective);
                if !tape.value(loss).is_finite() {
                    return Err(Error::numeric("loss", "training loss is not finite"));
                }
                let grads = tape.backward(loss)?;
                Ok((grads, stats))
            })();
            let outcome = attempt.and_then(|(grads, stats)| {
                model.params_mut().zero_grad();
                grads.accumulate_into(model.params_mut())?;
                adam.step(model.params_mut())?;
                Ok(stats)
            });
            match outcome {
                Ok(stats) => model.apply_batch_stats(&stats),
                Err(Error::Numeric { site, detail }) => {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("{site}: {detail}"),
                        last_good: Box::new(Checkpoint {
                            model,
                            optimizer: adam,
                            rng,
                            step,
                        }),
                    })
                }
                Err(other) => return Err(other),
            }
            step += 1;
        }
        metrics.push(evaluate(&model, epoch, step)?);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: adam,
            rng,
            step,
        },
        metrics,
        floor,
    })
}
