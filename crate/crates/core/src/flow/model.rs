use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use super::batchnorm::{BatchNormLayer, BatchStats, BnMode};
use super::coupling::{CouplingLayer, Direction};
use super::squeeze::{inverse_permutation, squeeze_permutation, squeezed_shape};
use super::{Mask, MaskKind, Shape3};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::stnet::StNetConfig;

/// How coupling layers are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Per scale: `per_half` couplings with the configured spatial mask, a
    /// squeeze, `per_half` channel-wise couplings; half of the channels are
    /// factored out between scales.
    MultiScale { scales: usize, per_half: usize },
    /// `layers` couplings with the configured mask and no reshaping.
    Flat { layers: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub shape: Shape3,
    pub layout: Layout,
    pub mask: MaskKind,
    pub stnet: StNetConfig,
    /// Insert a batch-norm layer after every coupling layer.
    pub batch_norm: bool,
    pub init_seed: u64,
}

impl ArchConfig {
    pub fn new(shape: Shape3, layout: Layout, mask: MaskKind, stnet: StNetConfig) -> Self {
        ArchConfig {
            shape,
            layout,
            mask,
            stnet,
            batch_norm: false,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Coupling(CouplingLayer),
    BatchNorm(BatchNormLayer),
    Squeeze {
        input: Shape3,
        perm: Arc<[usize]>,
        inverse: Arc<[usize]>,
    },
    /// Sends the first `factored` coordinates (the first half of the
    /// channels) straight to the latent.
    FactorOut {
        input: Shape3,
        factored: usize,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "coupling",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Squeeze { .. } => "squeeze",
            Layer::FactorOut { .. } => "factor-out",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Coupling(c) => write!(
                f,
                "coupling {} phase {} on {}",
                c.mask.kind, c.mask.phase, c.mask.shape
            ),
            Layer::BatchNorm(b) => write!(f, "batchnorm over {}", b.dim),
            Layer::Squeeze { input, .. } => write!(f, "squeeze {input}"),
            Layer::FactorOut { input, factored } => {
                write!(f, "factor-out {factored} of {input}")
            }
        }
    }
}

/// Tape values captured at one coupling layer during [`FlowModel::encode`].
#[derive(Clone, Debug)]
pub struct CouplingRecord {
    pub layer: usize,
    pub output: Var,
    pub s: Var,
    pub t: Var,
    /// Blocks factored out before this layer, in latent order.
    pub factored: Vec<Var>,
}

pub struct Encoded {
    /// `n × D` latent: factored-out blocks in order, then the final block.
    pub z: Var,
    /// `n × 1` log|det ∂z/∂x|.
    pub logdet: Var,
    pub bn_stats: Vec<BatchStats>,
    pub couplings: Vec<CouplingRecord>,
}

/// Per-example log-likelihood plus any train-mode batch statistics.
pub struct LogProb {
    pub values: Vec<f64>,
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ArchConfig,
    params: ParamStore,
    layers: Vec<Layer>,
    /// Input-space coordinate of each live coordinate entering layer `i`.
    origins: Vec<Arc<[usize]>>,
    /// Input-space coordinate of each latent coordinate.
    latent_origin: Arc<[usize]>,
    factored_sizes: Vec<usize>,
}

/// `log N(z; 0, I)` per row.
pub fn base_log_prob(z: &Tensor) -> Vec<f64> {
    let d = z.cols() as f64;
    let norm = -0.5 * d * (2.0 * PI).ln();
    (0..z.rows())
        .map(|i| norm - 0.5 * z.row_slice(i).iter().map(|v| v * v).sum::<f64>())
        .collect()
}

fn base_log_prob_on(tape: &mut Tape, z: Var) -> Result<Var> {
    let d = tape.value(z).cols() as f64;
    let sq = tape.mul(z, z)?;
    let ss = tape.sum_axis(sq, crate::numerics::Axis::Cols);
    let half = tape.scale(ss, -0.5);
    let norm = tape.scalar(-0.5 * d * (2.0 * PI).ln());
    tape.add(half, norm)
}

/// Build the layer list for `config` with freshly initialized parameters.
/// The final layer of every st-network starts at zero, so the new model is
/// the identity map when batch norm is off.
pub fn build_flow(config: &ArchConfig) -> Result<FlowModel> {
    let mut params = ParamStore::new();
    let mut rng = RngStream::new(config.init_seed, 0x5eed);
    let mut layers = Vec::new();
    let mut shape = config.shape;
    let mut phase = 0usize;

    let push_coupling = |layers: &mut Vec<Layer>,
                         params: &mut ParamStore,
                         rng: &mut RngStream,
                         kind: MaskKind,
                         shape: Shape3,
                         phase: &mut usize|
     -> Result<()> {
        let idx = layers.len();
        let mask = Mask::new(kind, shape, *phase)
            .map_err(|e| Error::config(format!("layer {idx} ({kind} coupling): {e}")))?;
        let name = format!("layer{idx}");
        let layer = CouplingLayer::new(params, &name, mask, config.stnet, rng)
            .map_err(|e| Error::config(format!("layer {idx}: {e}")))?;
        layers.push(Layer::Coupling(layer));
        *phase += 1;
        if config.batch_norm {
            let idx = layers.len();
            let bn = BatchNormLayer::new(params, &format!("layer{idx}"), shape.numel());
            layers.push(Layer::BatchNorm(bn));
        }
        Ok(())
    };

    match config.layout {
        Layout::Flat { layers: count } => {
            if count == 0 {
                return Err(Error::config(
                    "flat layout needs at least one coupling layer",
                ));
            }
            for _ in 0..count {
                push_coupling(
                    &mut layers,
                    &mut params,
                    &mut rng,
                    config.mask,
                    shape,
                    &mut phase,
                )?;
            }
        }
        Layout::MultiScale { scales, per_half } => {
            if scales == 0 || per_half == 0 {
                return Err(Error::config(
                    "multi-scale layout needs at least one scale and one coupling per half",
                ));
            }
            for scale in 0..scales {
                for _ in 0..per_half {
                    push_coupling(
                        &mut layers,
                        &mut params,
                        &mut rng,
                        config.mask,
                        shape,
                        &mut phase,
                    )?;
                }
                let idx = layers.len();
                let squeezed = squeezed_shape(shape).map_err(|e| {
                    Error::config(format!("layer {idx} (squeeze, scale {scale}): {e}"))
                })?;
                let perm = squeeze_permutation(shape)?;
                let inverse = inverse_permutation(&perm);
                layers.push(Layer::Squeeze {
                    input: shape,
                    perm,
                    inverse,
                });
                shape = squeezed;
                for _ in 0..per_half {
                    push_coupling(
                        &mut layers,
                        &mut params,
                        &mut rng,
                        MaskKind::Channelwise,
                        shape,
                        &mut phase,
                    )?;
                }
                if scale + 1 < scales {
                    let idx = layers.len();
                    if shape.c % 2 != 0 {
                        return Err(Error::config(format!(
                            "layer {idx} (factor-out): {shape} has an odd channel count"
                        )));
                    }
                    let factored = shape.numel() / 2;
                    layers.push(Layer::FactorOut {
                        input: shape,
                        factored,
                    });
                    shape = Shape3::new(shape.c / 2, shape.h, shape.w);
                }
            }
        }
    }

    // Track where every live coordinate came from in input space.
    let mut live: Arc<[usize]> = (0..config.shape.numel()).collect();
    let mut origins = Vec::with_capacity(layers.len());
    let mut factored_origin = Vec::new();
    let mut factored_sizes = Vec::new();
    for layer in &layers {
        origins.push(live.clone());
        match layer {
            Layer::Squeeze { perm, .. } => {
                live = perm.iter().map(|&p| live[p]).collect();
            }
            Layer::FactorOut { factored, .. } => {
                factored_origin.extend_from_slice(&live[..*factored]);
                factored_sizes.push(*factored);
                live = live[*factored..].into();
            }
            Layer::Coupling(_) | Layer::BatchNorm(_) => {}
        }
    }
    factored_origin.extend_from_slice(&live);
    Ok(FlowModel {
        config: config.clone(),
        params,
        layers,
        origins,
        latent_origin: factored_origin.into(),
        factored_sizes,
    })
}

impl FlowModel {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn input_shape(&self) -> Shape3 {
        self.config.shape
    }

    pub fn dim(&self) -> usize {
        self.config.shape.numel()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn coupling_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Coupling(_)))
            .count()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Input-space coordinate of each latent coordinate.
    pub fn latent_origin(&self) -> &[usize] {
        &self.latent_origin
    }

    /// Input-space coordinate of each live coordinate entering layer `i`.
    pub fn layer_origin(&self, i: usize) -> &[usize] {
        &self.origins[i]
    }

    /// Sizes of the factored-out latent blocks, in order.
    pub fn factored_sizes(&self) -> &[usize] {
        &self.factored_sizes
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::input(format!(
                "batch has {} coordinates per example, model input {} needs {}",
                x.cols(),
                self.config.shape,
                self.dim()
            )));
        }
        Ok(())
    }

    fn site(&self, i: usize) -> String {
        format!("layer {i} ({})", self.layers[i].kind())
    }

    /// Data → latent on `tape`.
    pub fn encode(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<Encoded> {
        let n = tape.value(x).rows();
        let mut h = x;
        let mut logdet = tape.leaf(Tensor::zeros(&[n, 1]));
        let mut factored = Vec::new();
        let mut bn_stats = Vec::new();
        let mut couplings = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Coupling(c) => {
                    let site = self.site(i);
                    let out = c.apply(tape, &self.params, h, Direction::DataToLatent, &site)?;
                    h = out.y;
                    logdet = tape.add(logdet, out.logdet)?;
                    couplings.push(CouplingRecord {
                        layer: i,
                        output: out.y,
                        s: out.s,
                        t: out.t,
                        factored: factored.clone(),
                    });
                }
                Layer::BatchNorm(b) => {
                    let site = self.site(i);
                    let out =
                        b.apply(tape, &self.params, h, Direction::DataToLatent, mode, &site)?;
                    h = out.y;
                    logdet = tape.add(logdet, out.logdet)?;
                    if let Some((mean, var)) = out.stats {
                        bn_stats.push(BatchStats {
                            layer: i,
                            mean,
                            var,
                        });
                    }
                }
                Layer::Squeeze { perm, .. } => h = tape.gather(h, perm.clone())?,
                Layer::FactorOut { input, factored: k } => {
                    let d = input.numel();
                    factored.push(tape.gather(h, (0..*k).collect())?);
                    h = tape.gather(h, (*k..d).collect())?;
                }
            }
        }
        factored.push(h);
        let z = tape.concat(&factored)?;
        if !tape.value(logdet).is_finite() {
            return Err(Error::numeric(
                "log-determinant",
                "accumulated log-det is not finite",
            ));
        }
        Ok(Encoded {
            z,
            logdet,
            bn_stats,
            couplings,
        })
    }

    /// Latent → data on `tape`. Batch-norm layers invert with their running
    /// statistics. Returns `(x, log|det ∂x/∂z|)`.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.value(z).rows();
        let d = self.dim();
        if tape.value(z).cols() != d {
            return Err(Error::input(format!(
                "latent has {} coordinates, model needs {d}",
                tape.value(z).cols()
            )));
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        for &k in &self.factored_sizes {
            blocks.push(tape.gather(z, (offset..offset + k).collect())?);
            offset += k;
        }
        let mut h = tape.gather(z, (offset..d).collect())?;
        let mut logdet = tape.leaf(Tensor::zeros(&[n, 1]));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Coupling(c) => {
                    let site = self.site(i);
                    let out = c.apply(tape, &self.params, h, Direction::LatentToData, &site)?;
                    h = out.y;
                    logdet = tape.add(logdet, out.logdet)?;
                }
                Layer::BatchNorm(b) => {
                    let site = self.site(i);
                    let out = b.apply(
                        tape,
                        &self.params,
                        h,
                        Direction::LatentToData,
                        BnMode::Eval,
                        &site,
                    )?;
                    h = out.y;
                    logdet = tape.add(logdet, out.logdet)?;
                }
                Layer::Squeeze { inverse, .. } => h = tape.gather(h, inverse.clone())?,
                Layer::FactorOut { .. } => {
                    let f = blocks.pop().expect("one block per factor-out");
                    h = tape.concat(&[f, h])?;
                }
            }
        }
        Ok((h, logdet))
    }

    /// `log p(x)` per example as a `n × 1` tape value.
    pub fn log_prob_on(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<(Var, Encoded)> {
        let enc = self.encode(tape, x, mode)?;
        let base = base_log_prob_on(tape, enc.z)?;
        let lp = tape.add(base, enc.logdet)?;
        if !tape.value(lp).is_finite() {
            return Err(Error::numeric(
                "log-probability",
                "non-finite log-likelihood",
            ));
        }
        Ok((lp, enc))
    }

    pub fn log_prob(&self, x: &Tensor, mode: BnMode) -> Result<LogProb> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (lp, enc) = self.log_prob_on(&mut tape, xv, mode)?;
        Ok(LogProb {
            values: tape.value(lp).data().to_vec(),
            bn_stats: enc.bn_stats,
        })
    }

    /// `(z, log|det ∂z/∂x|)` for a batch.
    pub fn to_latent(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, Vec<f64>)> {
        self.check_batch(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let enc = self.encode(&mut tape, xv, mode)?;
        Ok((
            tape.value(enc.z).clone(),
            tape.value(enc.logdet).data().to_vec(),
        ))
    }

    /// `(x, log|det ∂x/∂z|)` for a batch of latents.
    pub fn from_latent(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let (x, ld) = self.decode(&mut tape, zv)?;
        Ok((tape.value(x).clone(), tape.value(ld).data().to_vec()))
    }

    /// Draw `n` samples by decoding standard-normal latents.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::contract("sample count must be positive"));
        }
        let mut rng = RngStream::new(seed, 0);
        let z = Tensor::matrix(n, self.dim(), rng.normal_vec(n * self.dim()))?;
        Ok(self.from_latent(&z)?.0)
    }

    /// Overwrite every parameter with `N(0, std²)` draws. Diagnostics use
    /// this to get a non-trivial model without training.
    pub fn randomize_parameters(&mut self, std: f64, seed: u64) {
        let mut rng = RngStream::new(seed, 0xd1a9);
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = std * rng.normal();
            }
        }
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            if let Layer::BatchNorm(b) = &mut self.layers[s.layer] {
                b.update_running(&s.mean, &s.var);
            }
        }
    }

    /// Running means then variances of every batch-norm layer, in layer order.
    pub fn running_stats(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.extend_from_slice(&b.running_mean);
                out.extend_from_slice(&b.running_var);
            }
        }
        out
    }

    pub fn set_running_stats(&mut self, values: &[f64]) -> Result<()> {
        let needed: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::BatchNorm(b) => 2 * b.dim,
                _ => 0,
            })
            .sum();
        if needed != values.len() {
            return Err(Error::contract(format!(
                "expected {needed} running statistics, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                let d = b.dim;
                b.running_mean.copy_from_slice(&values[offset..offset + d]);
                b.running_var
                    .copy_from_slice(&values[offset + d..offset + 2 * d]);
                offset += 2 * d;
            }
        }
        Ok(())
    }
}
