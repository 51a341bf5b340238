//! Scale/shift prediction networks for affine coupling layers.
//!
//! A dense residual network: an input projection to `hidden` units, `blocks`
//! residual blocks `h ← h + W₂·tanh(W₁·h + b₁) + b₂`, an optional linear
//! bottleneck `hidden → l → hidden` after block ⌈blocks/2⌉, and a final
//! zero-initialized projection `tanh(h) → (raw_s, t)`.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StNetConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub bottleneck: Option<usize>,
}

impl Default for StNetConfig {
    fn default() -> Self {
        StNetConfig {
            hidden: 256,
            blocks: 2,
            bottleneck: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: Option<&mut RngStream>,
    ) -> Self {
        let w = match rng {
            Some(rng) => {
                let std = (1.0 / fan_in as f64).sqrt();
                let data = rng
                    .normal_vec(fan_in * fan_out)
                    .into_iter()
                    .map(|z| z * std)
                    .collect();
                Tensor::matrix(fan_in, fan_out, data).expect("positive extents")
            }
            None => Tensor::zeros(&[fan_in, fan_out]),
        };
        Dense {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct StNet {
    in_dim: usize,
    change_dim: usize,
    config: StNetConfig,
    input: Dense,
    blocks: Vec<(Dense, Dense)>,
    bottleneck: Option<(Dense, Dense)>,
    output: Dense,
}

impl StNet {
    /// Registers the network's parameters in `store` under `name`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        change_dim: usize,
        config: StNetConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if in_dim == 0 || change_dim == 0 || config.hidden == 0 {
            return Err(Error::config(format!(
                "{name}: st-network needs positive arities (in {in_dim}, change {change_dim}, hidden {})",
                config.hidden
            )));
        }
        if let Some(l) = config.bottleneck {
            if l == 0 || l >= config.hidden {
                return Err(Error::config(format!(
                    "{name}: bottleneck {l} must be in 1..{}",
                    config.hidden
                )));
            }
        }
        let h = config.hidden;
        let input = Dense::new(store, &format!("{name}.in"), in_dim, h, Some(rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut bottleneck = None;
        let insert_after = config.blocks.div_ceil(2);
        if insert_after == 0 {
            bottleneck = Self::make_bottleneck(store, name, config, rng);
        }
        for b in 0..config.blocks {
            let first = Dense::new(store, &format!("{name}.block{b}.0"), h, h, Some(rng));
            let second = Dense::new(store, &format!("{name}.block{b}.1"), h, h, Some(rng));
            blocks.push((first, second));
            if b + 1 == insert_after {
                bottleneck = Self::make_bottleneck(store, name, config, rng);
            }
        }
        let output = Dense::new(store, &format!("{name}.out"), h, 2 * change_dim, None);
        Ok(StNet {
            in_dim,
            change_dim,
            config,
            input,
            blocks,
            bottleneck,
            output,
        })
    }

    fn make_bottleneck(
        store: &mut ParamStore,
        name: &str,
        config: StNetConfig,
        rng: &mut RngStream,
    ) -> Option<(Dense, Dense)> {
        config.bottleneck.map(|l| {
            let down = Dense::new(
                store,
                &format!("{name}.bottleneck.down"),
                config.hidden,
                l,
                Some(rng),
            );
            let up = Dense::new(
                store,
                &format!("{name}.bottleneck.up"),
                l,
                config.hidden,
                Some(rng),
            );
            (down, up)
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn change_dim(&self) -> usize {
        self.change_dim
    }

    pub fn config(&self) -> StNetConfig {
        self.config
    }

    /// Returns `(raw_s, t)`, each `n × change_dim`. The coupling layer turns
    /// `raw_s` into the log-scale by its bounded clamp.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, cond: Var) -> Result<(Var, Var)> {
        let width = tape.value(cond).cols();
        if width != self.in_dim {
            return Err(Error::config(format!(
                "st-network expects {} condition values, got {width}",
                self.in_dim
            )));
        }
        let mut h = self.input.apply(tape, store, cond)?;
        let insert_after = self.blocks.len().div_ceil(2);
        if insert_after == 0 {
            h = self.apply_bottleneck(tape, store, h)?;
        }
        for (b, (first, second)) in self.blocks.iter().enumerate() {
            let a = first.apply(tape, store, h)?;
            let a = tape.tanh(a);
            let r = second.apply(tape, store, a)?;
            h = tape.add(h, r)?;
            if b + 1 == insert_after {
                h = self.apply_bottleneck(tape, store, h)?;
            }
        }
        let h = tape.tanh(h);
        let out = self.output.apply(tape, store, h)?;
        let k = self.change_dim;
        let s = tape.gather(out, (0..k).collect())?;
        let t = tape.gather(out, (k..2 * k).collect())?;
        Ok((s, t))
    }

    fn apply_bottleneck(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        match &self.bottleneck {
            Some((down, up)) => {
                let low = down.apply(tape, store, h)?;
                up.apply(tape, store, low)
            }
            None => Ok(h),
        }
    }
}
