//! Acceptance run: prints one pass/fail line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The image experiments are the offline variant: 8×8 synthetic `blobs`
//! as the training distribution and `patches` as the OOD set. Setting
//! `COUPLINGFLOW_MINIBOONE` to a labelled CSV (label column `label`) makes
//! the vector check use it instead of the synthetic Gaussian classes.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use couplingflow::data::{
    class_split, encode_idx, gen_gaussian_classes, gen_synthetic, load_idx, load_vectors_csv,
    preprocess_tabular, write_idx, Family, ImageDataset, VectorDataset,
    DEFAULT_UNIQUENESS_THRESHOLD,
};
use couplingflow::flow::{build_flow, ArchConfig, BnMode, FlowModel, Layout, MaskKind, Shape3};
use couplingflow::numerics::{RngStream, Tensor};
use couplingflow::ood::{auroc, score_dataset, ScorePolicy};
use couplingflow::stnet::StNetConfig;
use couplingflow::training::{gradcheck, train, DataSource, Objective, TrainConfig};
use couplingflow::Result;

const SEEDS: [u64; 3] = [0, 1, 2];
const RES: usize = 8;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

/// Training, held-out and OOD sets for one seed.
struct ImagePair {
    train: ImageDataset,
    ood_train: ImageDataset,
    test: ImageDataset,
    ood: ImageDataset,
}

fn image_pair(seed: u64) -> Result<ImagePair> {
    Ok(ImagePair {
        train: gen_synthetic(Family::Blobs, 2000, RES, 10 + seed)?,
        test: gen_synthetic(Family::Blobs, 300, RES, 20 + seed)?,
        ood: gen_synthetic(Family::Patches, 300, RES, 30 + seed)?,
        ood_train: gen_synthetic(Family::Patches, 2000, RES, 40 + seed)?,
    })
}

fn image_arch(
    mask: MaskKind,
    bottleneck: Option<usize>,
    batch_norm: bool,
    seed: u64,
) -> ArchConfig {
    let mut cfg = ArchConfig::new(
        Shape3::new(1, RES, RES),
        Layout::MultiScale {
            scales: 2,
            per_half: 3,
        },
        mask,
        StNetConfig {
            hidden: 64,
            blocks: 2,
            bottleneck,
        },
    );
    cfg.batch_norm = batch_norm;
    cfg.init_seed = seed;
    cfg
}

fn image_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        steps_per_epoch: Some(200),
        batch_size: 32,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

struct Scored {
    in_mean: f64,
    ood_mean: f64,
    auroc: f64,
}

fn score_pair(model: &FlowModel, pair: &ImagePair, bn_mode: BnMode) -> Result<Scored> {
    let policy = ScorePolicy {
        bn_mode,
        ..ScorePolicy::default()
    };
    let a = score_dataset(model, DataSource::Images(&pair.test), "blobs", &policy)?;
    let b = score_dataset(model, DataSource::Images(&pair.ood), "patches", &policy)?;
    Ok(Scored {
        in_mean: a.mean(),
        ood_mean: b.mean(),
        auroc: auroc(&a.scores, &b.scores)?,
    })
}

/// Per seed: the checkerboard baseline (eval and train-mode scoring), the
/// bottlenecked variant and the cycle-mask variant.
struct SeedRun {
    seed: u64,
    baseline: Scored,
    baseline_train_mode: Scored,
    bottleneck: Scored,
    cycle: Scored,
}

fn fit(cfg: &ArchConfig, pair: &ImagePair, seed: u64) -> Result<FlowModel> {
    let out = train(
        build_flow(cfg)?,
        &image_training(seed),
        DataSource::Images(&pair.train),
        None,
    )?;
    Ok(out.checkpoint.model)
}

fn seed_run(seed: u64) -> Result<SeedRun> {
    let pair = image_pair(seed)?;
    let base = fit(
        &image_arch(MaskKind::Checkerboard, None, true, seed),
        &pair,
        seed,
    )?;
    let bottleneck = fit(
        &image_arch(MaskKind::Checkerboard, Some(10), true, seed),
        &pair,
        seed,
    )?;
    let cycle = fit(&image_arch(MaskKind::Cycle, None, true, seed), &pair, seed)?;
    Ok(SeedRun {
        seed,
        baseline: score_pair(&base, &pair, BnMode::Eval)?,
        baseline_train_mode: score_pair(&base, &pair, BnMode::Train)?,
        bottleneck: score_pair(&bottleneck, &pair, BnMode::Eval)?,
        cycle: score_pair(&cycle, &pair, BnMode::Eval)?,
    })
}

fn invertibility() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, m) in invertibility_models() {
        let gap = round_trip_gap(&m, 100, 1);
        worst = worst.max(gap);
        parts.push(format!("{name} {gap:.1e}"));
    }
    verdict(
        worst < 1e-8,
        format!("max |x - f(f^-1(x))|: {}", parts.join(", ")),
    )
}

fn logdet_exactness() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, kind) in MaskKind::ALL.into_iter().enumerate() {
        let cfg = arch(
            Shape3::new(2, 2, 4),
            Layout::Flat { layers: 1 },
            kind,
            false,
        );
        let gap = logdet_gap(&random_model(&cfg, 0.4, 20 + i as u64), 5, i as u64);
        worst = worst.max(gap);
        parts.push(format!("coupling/{kind} {gap:.1e}"));
    }
    // batch norm alone: a one-layer flow whose coupling is still the
    // zero-initialized identity
    let mut bn_only = build_flow(&arch(
        Shape3::new(1, 2, 4),
        Layout::Flat { layers: 1 },
        MaskKind::Checkerboard,
        true,
    ))?;
    let mut rng = RngStream::new(3, 0);
    for p in bn_only.params_mut().iter_mut() {
        if p.name.ends_with(".log_gamma") || p.name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v = 0.5 * rng.normal();
            }
        }
    }
    let mut stats: Vec<f64> = (0..8).map(|_| 0.5 * rng.normal()).collect();
    stats.extend((0..8).map(|_| rng.uniform_range(0.5, 2.0)));
    bn_only.set_running_stats(&stats)?;
    let gap = logdet_gap(&bn_only, 5, 7);
    worst = worst.max(gap);
    parts.push(format!("batchnorm {gap:.1e}"));

    let composed = random_model(
        &arch(
            Shape3::new(1, 4, 4),
            Layout::MultiScale {
                scales: 2,
                per_half: 1,
            },
            MaskKind::Checkerboard,
            true,
        ),
        0.3,
        13,
    );
    let gap = logdet_gap(&composed, 5, 3);
    worst = worst.max(gap);
    parts.push(format!("composed {gap:.1e}"));
    verdict(
        worst < 1e-4,
        format!("relative log-det error: {}", parts.join(", ")),
    )
}

fn normalization() -> Result<Verdict> {
    let m = fit_two_modes(2000, 0)?;
    let mass = trapezoid_mass(&m, -6.0, 6.0, 400);
    verdict(
        (mass - 1.0).abs() <= 0.02,
        format!("trapezoid mass on [-6,6]^2 = {mass:.5}"),
    )
}

fn gradient_suite() -> Result<Verdict> {
    let reports = gradcheck::full_suite(0)?;
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for r in &reports {
        let tol = if r.name.starts_with("step/") {
            1e-3
        } else {
            1e-4
        };
        worst = worst.max(r.max_relative_error);
        if r.max_relative_error >= tol {
            failed.push(r.name.clone());
        }
    }
    verdict(
        failed.is_empty(),
        format!(
            "{} checks, worst relative error {worst:.1e}{}",
            reports.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failed.join(" "))
            }
        ),
    )
}

fn baseline_failure(runs: &[SeedRun]) -> Result<Verdict> {
    let ok = runs
        .iter()
        .filter(|r| r.baseline.auroc < 0.5 && r.baseline.ood_mean > r.baseline.in_mean)
        .count();
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: AUROC {:.3}, mean log p in {:.1} / ood {:.1}",
                r.seed, r.baseline.auroc, r.baseline.in_mean, r.baseline.ood_mean
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok >= 2, format!("{ok}/3 seeds; {detail}"))
}

fn bottleneck_improvement(runs: &[SeedRun]) -> Result<Verdict> {
    let ok = runs
        .iter()
        .all(|r| r.bottleneck.auroc >= r.baseline.auroc + 0.2);
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: l=10 {:.3} vs baseline {:.3}",
                r.seed, r.bottleneck.auroc, r.baseline.auroc
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

fn cycle_improvement(runs: &[SeedRun]) -> Result<Verdict> {
    let ok = runs.iter().all(|r| r.cycle.auroc > r.baseline.auroc);
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: cycle {:.3} vs checkerboard {:.3}",
                r.seed, r.cycle.auroc, r.baseline.auroc
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

fn contrastive_separation() -> Result<Verdict> {
    let seed = 0;
    let pair = image_pair(seed)?;
    let config = TrainConfig {
        objective: Objective::Contrastive,
        lr: 3e-4,
        ..image_training(seed)
    };
    let out = train(
        build_flow(&image_arch(MaskKind::Checkerboard, None, false, seed))?,
        &config,
        DataSource::Images(&pair.train),
        Some(DataSource::Images(&pair.ood_train)),
    )?;
    let s = score_pair(&out.checkpoint.model, &pair, BnMode::Eval)?;
    verdict(
        s.auroc > 0.95,
        format!(
            "AUROC {:.3}, mean log p in {:.1} / ood {:.1}, c = {:.1}",
            s.auroc,
            s.in_mean,
            s.ood_mean,
            out.floor.unwrap_or(f64::NAN)
        ),
    )
}

fn batchnorm_modes(runs: &[SeedRun]) -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let ood_gap = r.baseline_train_mode.ood_mean - r.baseline.ood_mean;
        let in_gap = r.baseline_train_mode.in_mean - r.baseline.in_mean;
        ok &= ood_gap < 0.0 && in_gap.abs() < ood_gap.abs();
        parts.push(format!(
            "seed {}: ood train-eval {ood_gap:+.1}, in train-eval {in_gap:+.1}",
            r.seed
        ));
    }
    verdict(ok, parts.join("; "))
}

fn vector_model(dim: usize, seed: u64) -> Result<FlowModel> {
    let mut cfg = ArchConfig::new(
        Shape3::new(1, 1, dim),
        Layout::Flat { layers: 6 },
        MaskKind::Checkerboard,
        StNetConfig {
            hidden: 64,
            blocks: 2,
            bottleneck: None,
        },
    );
    cfg.init_seed = seed;
    build_flow(&cfg)
}

fn vector_sanity() -> Result<Verdict> {
    let seed = 0;
    let (all, source) = match std::env::var_os("COUPLINGFLOW_MINIBOONE") {
        Some(p) => (load_vectors_csv(&p, Some("label"))?, "miniboone"),
        None => (gen_gaussian_classes(2000, 8, seed)?, "gaussian classes"),
    };
    let splits = class_split(&all, 0.1, seed)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for own in &splits {
        let (train_set, record) = preprocess_tabular(&own.train, DEFAULT_UNIQUENESS_THRESHOLD)?;
        let test = record.apply(&own.test)?;
        let others: Vec<Tensor> = splits
            .iter()
            .filter(|s| s.class != own.class)
            .map(|s| record.apply(&s.test).map(|d| d.data))
            .collect::<Result<_>>()?;
        let ood = VectorDataset::new(Tensor::vstack(&others)?, test.columns.clone(), None)?;
        let config = TrainConfig {
            epochs: 5,
            steps_per_epoch: Some(200),
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        };
        let out = train(
            vector_model(train_set.dim(), seed)?,
            &config,
            DataSource::Vectors(&train_set),
            None,
        )?;
        let policy = ScorePolicy::default();
        let m = &out.checkpoint.model;
        let a = score_dataset(m, DataSource::Vectors(&test), "in", &policy)?;
        let b = score_dataset(m, DataSource::Vectors(&ood), "ood", &policy)?;
        let value = auroc(&a.scores, &b.scores)?;
        ok &= value > 0.6;
        parts.push(format!("class {}: AUROC {value:.3}", own.class));
    }
    verdict(ok, format!("{source}; {}", parts.join(", ")))
}

fn determinism() -> Result<Verdict> {
    let images = gen_synthetic(Family::Blobs, 200, RES, 3)?;
    let mut cfg = image_arch(MaskKind::Checkerboard, None, true, 1);
    cfg.stnet.hidden = 16;
    let config = TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(20),
        batch_size: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    let run = || -> Result<_> {
        Ok(train(
            build_flow(&cfg)?,
            &config,
            DataSource::Images(&images),
            None,
        )?
        .checkpoint)
    };
    let first = run()?;
    let same_bytes = first.to_bytes() == run()?.to_bytes();

    let dir = tempfile::tempdir().map_err(|e| couplingflow::Error::io("tempdir", e))?;
    let path = dir.path().join("model.cflw");
    first.save(&path)?;
    let loaded = couplingflow::training::Checkpoint::load(&path)?;
    let policy = ScorePolicy {
        noise_samples: 2,
        ..ScorePolicy::default()
    };
    let a = score_dataset(&first.model, DataSource::Images(&images), "x", &policy)?;
    let b = score_dataset(&loaded.model, DataSource::Images(&images), "x", &policy)?;
    let same_scores = a
        .scores
        .iter()
        .zip(&b.scores)
        .all(|(x, y)| x.to_bits() == y.to_bits());

    let idx_path = dir.path().join("blobs.idx");
    write_idx(&idx_path, &images)?;
    let written = std::fs::read(&idx_path).map_err(|e| couplingflow::Error::io(&idx_path, e))?;
    let same_idx = encode_idx(&load_idx(&idx_path)?)? == written && written == encode_idx(&images)?;

    verdict(
        same_bytes && same_scores && same_idx,
        format!(
            "checkpoint bytes {}, round-trip scores {}, IDX bytes {}",
            if same_bytes { "identical" } else { "differ" },
            if same_scores {
                "bit-identical"
            } else {
                "differ"
            },
            if same_idx { "identical" } else { "differ" },
        ),
    )
}

fn auroc_oracle() -> Result<Verdict> {
    let mut rng = RngStream::new(12, 0);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = 1 + rng.below(50) as usize;
        let m = 1 + rng.below(50) as usize;
        // alternate heavily tied and nearly continuous score sets
        let levels = if trial % 2 == 0 { 5 } else { 1 << 20 };
        let a: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.below(levels) as f64).collect();
        if auroc(&a, &b)? != pairwise_auroc(&a, &b) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} of 1000 trials differ from pair counting"),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let runs: Result<Vec<SeedRun>> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    let runs = runs.map_err(|e| e.to_string());

    let with_runs = |f: fn(&[SeedRun]) -> Result<Verdict>| -> Result<Verdict> {
        match &runs {
            Ok(r) => f(r),
            Err(e) => verdict(false, format!("image experiments failed: {e}")),
        }
    };
    let results: Vec<(u32, Result<Verdict>)> = vec![
        (1, invertibility()),
        (2, logdet_exactness()),
        (3, normalization()),
        (4, gradient_suite()),
        (5, with_runs(baseline_failure)),
        (6, with_runs(bottleneck_improvement)),
        (7, with_runs(cycle_improvement)),
        (8, contrastive_separation()),
        (9, with_runs(batchnorm_modes)),
        (10, vector_sanity()),
        (11, determinism()),
        (12, auroc_oracle()),
    ];

    let mut failures = 0;
    for (n, r) in results {
        let v = r.unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {n}: {} {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "{} of 12 criteria passed in {:.0}s",
        12 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
