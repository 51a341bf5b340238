//! Run configuration files: flat `section.key = value` lines.
//!
//! `#` starts a comment. Every key must be known to the section that reads
//! it; leftovers are rejected by name.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{DataSpec, DEFAULT_UNIQUENESS_THRESHOLD};
use crate::error::{Error, Result};
use crate::flow::{ArchConfig, BnMode, Layout, MaskKind, Shape3};
use crate::ood::ScorePolicy;
use crate::stnet::StNetConfig;
use crate::training::{Objective, TrainConfig};

/// Parsed key/value pairs that have not been consumed yet.
#[derive(Clone, Debug)]
pub struct ConfigMap {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigMap {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{source}:{}: expected `section.key = value`, got {raw:?}",
                    n + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) || !key.contains('.') {
                return Err(Error::config(format!(
                    "{source}:{}: malformed key {key:?}",
                    n + 1
                )));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), n + 1))
                .is_some()
            {
                return Err(Error::config(format!(
                    "{source}:{}: duplicate key {key}",
                    n + 1
                )));
            }
        }
        Ok(ConfigMap {
            source: source.to_string(),
            entries,
        })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                Error::config(format!(
                    "{}:{line}: invalid value {v:?} for {key}: {e}",
                    self.source
                ))
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::config(format!("{}: missing required key {key}", self.source)))
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::config(format!(
                "{}:{line}: unknown key {key}",
                self.source
            ))),
        }
    }
}

/// `none` or a positive count.
fn parse_optional(v: Option<String>, key: &str) -> Result<Option<usize>> {
    match v.as_deref().map(str::trim) {
        None | Some("none") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|_| {
            Error::config(format!(
                "invalid value {s:?} for {key}: expected none or a count"
            ))
        }),
    }
}

pub fn arch_from_map(map: &mut ConfigMap, default_seed: u64) -> Result<ArchConfig> {
    let shape: Shape3 = map.require("arch.shape")?;
    let layout = match map
        .take_or("arch.layout", "multiscale".to_string())?
        .as_str()
    {
        "multiscale" => Layout::MultiScale {
            scales: map.take_or("arch.scales", 2)?,
            per_half: map.take_or("arch.per_half", 3)?,
        },
        "flat" => Layout::Flat {
            layers: map.take_or("arch.layers", 8)?,
        },
        other => {
            return Err(Error::config(format!(
                "arch.layout must be multiscale or flat, got {other:?}"
            )))
        }
    };
    let defaults = StNetConfig::default();
    let stnet = StNetConfig {
        hidden: map.take_or("arch.hidden", defaults.hidden)?,
        blocks: map.take_or("arch.blocks", defaults.blocks)?,
        bottleneck: parse_optional(map.take_str("arch.bottleneck"), "arch.bottleneck")?,
    };
    Ok(ArchConfig {
        shape,
        layout,
        mask: map.take_or("arch.mask", MaskKind::Checkerboard)?,
        stnet,
        batch_norm: map.take_or("arch.batch_norm", false)?,
        init_seed: map.take_or("arch.init_seed", default_seed)?,
    })
}

pub fn write_arch(arch: &ArchConfig, out: &mut String) {
    let _ = writeln!(out, "arch.shape = {}", arch.shape);
    match arch.layout {
        Layout::MultiScale { scales, per_half } => {
            let _ = writeln!(
                out,
                "arch.layout = multiscale\narch.scales = {scales}\narch.per_half = {per_half}"
            );
        }
        Layout::Flat { layers } => {
            let _ = writeln!(out, "arch.layout = flat\narch.layers = {layers}");
        }
    }
    let _ = writeln!(out, "arch.mask = {}", arch.mask);
    let _ = writeln!(out, "arch.hidden = {}", arch.stnet.hidden);
    let _ = writeln!(out, "arch.blocks = {}", arch.stnet.blocks);
    match arch.stnet.bottleneck {
        Some(l) => {
            let _ = writeln!(out, "arch.bottleneck = {l}");
        }
        None => out.push_str("arch.bottleneck = none\n"),
    }
    let _ = writeln!(out, "arch.batch_norm = {}", arch.batch_norm);
    let _ = writeln!(out, "arch.init_seed = {}", arch.init_seed);
}

/// Canonical text of an architecture; [`parse_arch_text`] inverts it.
pub fn arch_to_text(arch: &ArchConfig) -> String {
    let mut s = String::new();
    write_arch(arch, &mut s);
    s
}

pub fn parse_arch_text(text: &str) -> Result<ArchConfig> {
    let mut map = ConfigMap::parse(text, "architecture")?;
    let arch = arch_from_map(&mut map, 0)?;
    map.finish()?;
    Ok(arch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: DataSpec,
    /// OOD data used during contrastive training.
    pub ood: Option<DataSpec>,
    /// Resample images to this square resolution after loading.
    pub resolution: Option<usize>,
    /// Vector CSVs: the label column and the class treated as in-distribution.
    pub label_column: Option<String>,
    pub in_class: Option<usize>,
    pub uniqueness_threshold: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub score: ScorePolicy,
}

fn parse_floor(v: Option<String>) -> Result<Option<f64>> {
    match v.as_deref() {
        None | Some("auto") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|_| {
            Error::config(format!(
                "train.contrastive_floor must be auto or a number, got {s:?}"
            ))
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut m = ConfigMap::parse(text, source)?;
        let seed = m.take_or("run.seed", 0u64)?;
        let output_dir: PathBuf = m.take_or("run.output_dir", PathBuf::from("runs/out"))?;
        let workers = m.take_or("run.workers", 1usize)?;
        let arch = arch_from_map(&mut m, seed)?;
        let d = TrainConfig::default();
        let steps_per_epoch =
            parse_optional(m.take_str("train.steps_per_epoch"), "train.steps_per_epoch")?;
        let train = TrainConfig {
            objective: m.take_or("train.objective", Objective::Mle)?,
            lr: m.take_or("train.lr", d.lr)?,
            batch_size: m.take_or("train.batch_size", d.batch_size)?,
            epochs: m.take_or("train.epochs", d.epochs)?,
            steps_per_epoch,
            seed: m.take_or("train.seed", seed)?,
            weight_decay: m.take_or("train.weight_decay", d.weight_decay)?,
            contrastive_floor: parse_floor(m.take_str("train.contrastive_floor"))?,
            floor_margin: m.take_or("train.floor_margin", d.floor_margin)?,
            logit_alpha: m.take_or("train.logit_alpha", d.logit_alpha)?,
            metric_examples: m.take_or("train.metric_examples", d.metric_examples)?,
        };
        let data = DataConfig {
            train: m.require("data.train")?,
            ood: m.take("data.ood")?,
            resolution: m.take("data.resolution")?,
            label_column: m.take_str("data.label_column"),
            in_class: m.take("data.in_class")?,
            uniqueness_threshold: m
                .take_or("data.uniqueness_threshold", DEFAULT_UNIQUENESS_THRESHOLD)?,
            test_fraction: m.take_or("data.test_fraction", 0.1)?,
        };
        let sd = ScorePolicy::default();
        let score = ScorePolicy {
            bn_mode: m.take_or("score.bn_mode", BnMode::Eval)?,
            seed: m.take_or("score.seed", seed)?,
            noise_samples: m.take_or("score.noise_samples", sd.noise_samples)?,
            batch_size: m.take_or("score.batch_size", sd.batch_size)?,
            logit_alpha: train.logit_alpha,
            workers,
        };
        m.finish()?;
        Ok(RunConfig {
            seed,
            output_dir,
            arch,
            train,
            data,
            score,
        })
    }

    /// Every setting spelled out, defaults included.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run.seed = {}", self.seed);
        let _ = writeln!(s, "run.output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "run.workers = {}", self.score.workers);
        write_arch(&self.arch, &mut s);
        let t = &self.train;
        let _ = writeln!(s, "train.objective = {}", t.objective);
        let _ = writeln!(s, "train.lr = {:e}", t.lr);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        match t.steps_per_epoch {
            Some(n) => {
                let _ = writeln!(s, "train.steps_per_epoch = {n}");
            }
            None => s.push_str("train.steps_per_epoch = none\n"),
        }
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.weight_decay = {:e}", t.weight_decay);
        match t.contrastive_floor {
            Some(c) => {
                let _ = writeln!(s, "train.contrastive_floor = {c:e}");
            }
            None => s.push_str("train.contrastive_floor = auto\n"),
        }
        let _ = writeln!(s, "train.floor_margin = {:e}", t.floor_margin);
        let _ = writeln!(s, "train.logit_alpha = {:e}", t.logit_alpha);
        let _ = writeln!(s, "train.metric_examples = {}", t.metric_examples);
        let d = &self.data;
        let _ = writeln!(s, "data.train = {}", d.train);
        if let Some(o) = &d.ood {
            let _ = writeln!(s, "data.ood = {o}");
        }
        if let Some(r) = d.resolution {
            let _ = writeln!(s, "data.resolution = {r}");
        }
        if let Some(l) = &d.label_column {
            let _ = writeln!(s, "data.label_column = {l}");
        }
        if let Some(c) = d.in_class {
            let _ = writeln!(s, "data.in_class = {c}");
        }
        let _ = writeln!(
            s,
            "data.uniqueness_threshold = {:e}",
            d.uniqueness_threshold
        );
        let _ = writeln!(s, "data.test_fraction = {:e}", d.test_fraction);
        let _ = writeln!(s, "score.bn_mode = {}", self.score.bn_mode);
        let _ = writeln!(s, "score.seed = {}", self.score.seed);
        let _ = writeln!(s, "score.noise_samples = {}", self.score.noise_samples);
        let _ = writeln!(s, "score.batch_size = {}", self.score.batch_size);
        s
    }
}
