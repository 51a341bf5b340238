use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use couplingflow::config::RunConfig;
use couplingflow::data::{
    class_split, gen_synthetic, preprocess_tabular, write_idx, write_vectors_csv, DataSpec,
    ImageDataset, VectorDataset,
};
use couplingflow::flow::{build_flow, FlowModel, Mask, Shape3};
use couplingflow::inspect::{
    channel_grid, coupling_trace, latent_image, render_gray, render_marked, resample_latent_region,
    square_region, Rendered, Sidecar,
};
use couplingflow::numerics::{RngStream, Tensor};
use couplingflow::ood::{
    auroc as auroc_of, histogram, load_scores, save_scores, score_dataset, threshold_metrics,
    ScorePolicy, ScoreSet,
};
use couplingflow::training::{
    self, dequantize_with_noise, to_pixels, write_metrics, Checkpoint, DataSource,
};
use couplingflow::Error;

use crate::{
    AurocArgs, GenDataArgs, GradcheckArgs, HistArgs, MasksArgs, ResampleArgs, ScoreArgs, TrainArgs,
    VisualizeArgs,
};

pub enum CliError {
    Core(Error),
    Usage(String),
    /// A check the command ran did not pass.
    Failed {
        category: &'static str,
        detail: String,
    },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
            CliError::Failed { category, .. } => category,
        }
    }

    /// Single-line detail for the first line of standard error.
    pub fn detail(&self) -> String {
        let s = match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(s) => s.clone(),
            CliError::Failed { detail, .. } => detail.clone(),
        };
        s.replace('\n', " ")
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult = Result<(), CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn absolute(path: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(path).map_err(io_err(path))
}

/// Load images and bring them to the model's spatial size if they differ.
fn images_for(model: &FlowModel, spec: &DataSpec) -> Result<ImageDataset, Error> {
    let ds = spec.load_images()?;
    let s = model.input_shape();
    if ds.shape.c != s.c {
        return Err(Error::input(format!(
            "dataset {spec} is {}, model input is {s}",
            ds.shape
        )));
    }
    if (ds.shape.h, ds.shape.w) != (s.h, s.w) {
        return ds.resize(s.h, s.w);
    }
    Ok(ds)
}

enum Loaded {
    Images(ImageDataset),
    Vectors(VectorDataset),
}

impl Loaded {
    fn source(&self) -> DataSource<'_> {
        match self {
            Loaded::Images(d) => DataSource::Images(d),
            Loaded::Vectors(d) => DataSource::Vectors(d),
        }
    }
}

fn load_image_spec(spec: &DataSpec, resolution: Option<usize>) -> Result<ImageDataset, Error> {
    let ds = spec.load_images()?;
    match resolution {
        Some(r) if (ds.shape.h, ds.shape.w) != (r, r) => ds.resize(r, r),
        _ => Ok(ds),
    }
}

pub fn train(args: TrainArgs) -> CliResult {
    let text = fs::read_to_string(&args.config).map_err(io_err(&args.config))?;
    let mut cfg = RunConfig::parse(&text, &args.config.display().to_string())?;
    let base = absolute(args.config.parent().unwrap_or(Path::new(".")))?;
    cfg.data.train = cfg.data.train.resolve(&base);
    cfg.data.ood = cfg.data.ood.map(|o| o.resolve(&base));
    cfg.output_dir = absolute(args.output_dir.as_deref().unwrap_or(&cfg.output_dir))?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;

    let (data, ood) = if cfg.data.train.is_images() {
        let train = load_image_spec(&cfg.data.train, cfg.data.resolution)?;
        let ood = match &cfg.data.ood {
            Some(o) => Some(Loaded::Images(load_image_spec(o, cfg.data.resolution)?)),
            None => None,
        };
        (Loaded::Images(train), ood)
    } else {
        let (train, ood) = vector_split(&cfg, &out)?;
        // the feature count is only known after preprocessing
        cfg.arch.shape = Shape3::new(1, 1, train.dim());
        (Loaded::Vectors(train), ood.map(Loaded::Vectors))
    };

    let model = build_flow(&cfg.arch)?;
    let outcome = match training::train(
        model,
        &cfg.train,
        data.source(),
        ood.as_ref().map(Loaded::source),
    ) {
        Ok(o) => o,
        Err(Error::Diverged {
            step,
            detail,
            last_good,
        }) => {
            let path = out.join("checkpoint.last_good.cflw");
            last_good.save(&path)?;
            return Err(CliError::Core(Error::Diverged {
                step,
                detail,
                last_good,
            }));
        }
        Err(e) => return Err(e.into()),
    };
    if outcome.floor.is_some() {
        cfg.train.contrastive_floor = outcome.floor;
    }
    outcome.checkpoint.save(out.join("checkpoint.cflw"))?;
    let mut metrics = Vec::new();
    write_metrics(&mut metrics, &outcome.metrics).expect("in-memory write");
    write_file(&out.join("metrics.csv"), metrics)?;
    write_file(&out.join("config.cfg"), cfg.to_text())?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "epoch {} step {}: mean nll {:.4} nats ({:.4} bits/dim)",
            last.epoch, last.step, last.mean_nll_nats, last.bits_per_dim
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Per-class split of a labelled vector CSV. The in-class training rows
/// define the preprocessing; the preprocessed held-out rows of the in-class
/// and of every other class are written next to the outputs for scoring.
fn vector_split(
    cfg: &RunConfig,
    out: &Path,
) -> Result<(VectorDataset, Option<VectorDataset>), Error> {
    let label = cfg
        .data
        .label_column
        .as_deref()
        .ok_or_else(|| Error::config("vector data needs data.label_column"))?;
    let class = cfg
        .data
        .in_class
        .ok_or_else(|| Error::config("vector data needs data.in_class"))?;
    let all = cfg.data.train.load_vectors(Some(label))?;
    let splits = class_split(&all, cfg.data.test_fraction, cfg.seed)?;
    let own = splits.iter().find(|s| s.class == class).ok_or_else(|| {
        Error::config(format!(
            "data.in_class {class} does not occur in the label column"
        ))
    })?;
    let (train, record) = preprocess_tabular(&own.train, cfg.data.uniqueness_threshold)?;
    let strip = |mut d: VectorDataset| {
        d.labels = None;
        d
    };
    let test_in = strip(record.apply(&own.test)?);
    let others: Vec<Tensor> = splits
        .iter()
        .filter(|s| s.class != class)
        .map(|s| record.apply(&s.test).map(|d| d.data))
        .collect::<Result<_, _>>()?;
    write_vectors_csv(out.join("test_in.csv"), &test_in)?;
    let ood = if others.is_empty() {
        None
    } else {
        let ood = VectorDataset::new(Tensor::vstack(&others)?, test_in.columns.clone(), None)?;
        write_vectors_csv(out.join("test_ood.csv"), &ood)?;
        Some(ood)
    };
    Ok((strip(train), ood))
}

fn load_checkpoint(path: &Path) -> Result<FlowModel, Error> {
    Ok(Checkpoint::load(path)?.model)
}

pub fn score(args: ScoreArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    let policy = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            RunConfig::parse(&text, &p.display().to_string())?.score
        }
        None => ScorePolicy::default(),
    };
    let set = if args.data.is_images() {
        let ds = images_for(&model, &args.data)?;
        score_dataset(&model, DataSource::Images(&ds), &args.name, &policy)?
    } else {
        let ds = args.data.load_vectors(None)?;
        score_dataset(&model, DataSource::Vectors(&ds), &args.name, &policy)?
    };
    save_scores(&args.out, &set)?;
    println!(
        "{}: {} examples, mean log p {:.4} nats",
        set.dataset,
        set.scores.len(),
        set.mean()
    );
    Ok(())
}

fn pick_set(path: &Path, name: Option<&str>) -> Result<ScoreSet, CliError> {
    let sets = load_scores(path)?;
    match name {
        Some(n) => sets.into_iter().find(|s| s.dataset == n).ok_or_else(|| {
            CliError::Core(Error::input(format!(
                "{}: no dataset named {n:?}",
                path.display()
            )))
        }),
        None if sets.len() == 1 => Ok(sets.into_iter().next().expect("one set")),
        None => Err(CliError::Usage(format!(
            "{} holds {} datasets; choose one by name",
            path.display(),
            sets.len()
        ))),
    }
}

pub fn auroc(args: AurocArgs) -> CliResult {
    let a = pick_set(&args.in_file, args.in_name.as_deref())?;
    let b = pick_set(&args.ood_file, args.ood_name.as_deref())?;
    let value = auroc_of(&a.scores, &b.scores)?;
    println!("{value:?}");
    let mut csv = format!("metric,value\nauroc,{value:?}\n");
    if let Some(tau) = args.tau {
        let m = threshold_metrics(&a.scores, &b.scores, tau)?;
        println!(
            "tau {tau:?}: tpr {:?} fpr {:?} accuracy {:?}",
            m.tpr, m.fpr, m.accuracy
        );
        let _ = write!(
            csv,
            "tau,{tau:?}\ntpr,{:?}\nfpr,{:?}\naccuracy,{:?}\n",
            m.tpr, m.fpr, m.accuracy
        );
    }
    if let Some(out) = &args.out {
        write_file(out, csv)?;
    }
    Ok(())
}

pub fn hist(args: HistArgs) -> CliResult {
    let set = pick_set(&args.scores, args.name.as_deref())?;
    let min = set.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = set.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = args.lo.unwrap_or(min);
    let hi = args
        .hi
        .unwrap_or_else(|| max + (max - min).abs().max(1.0) * 1e-9);
    let h = histogram(&set.scores, args.bins, lo, hi)?;
    let mut buf = Vec::new();
    h.write_csv(&mut buf).expect("in-memory write");
    match &args.out {
        Some(p) => write_file(p, buf)?,
        None => print!("{}", String::from_utf8(buf).expect("ascii")),
    }
    Ok(())
}

pub fn visualize(args: VisualizeArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?;
    if !args.data.is_images() {
        return Err(Error::config("visualize needs image data").into());
    }
    let all = images_for(&model, &args.data)?;
    let ds = all.head(args.count.max(1));
    let alpha = training::DEFAULT_LOGIT_ALPHA;
    create_dir(&args.out)?;
    let shape = model.input_shape();
    let mut side = Sidecar::default();

    let latent = latent_image(
        &model,
        &ds,
        args.noise_samples,
        args.bn_mode,
        args.seed,
        alpha,
    )?;
    let mut values = Vec::with_capacity(ds.len() * ds.dim());
    for i in 0..ds.len() {
        let eps = RngStream::new(args.seed, i as u64).uniform_vec(ds.dim());
        dequantize_with_noise(ds.image(i), &eps, alpha, &mut values);
    }
    let x = Tensor::matrix(ds.len(), ds.dim(), values)?;
    let traces = coupling_trace(&model, &x, args.bn_mode)?;
    for i in 0..ds.len() {
        let pixels: Vec<f64> = ds.image(i).iter().map(|&p| p as f64).collect();
        side.write(
            &args.out,
            &format!("input_{i}"),
            &render_gray(shape, &pixels),
        )?;
        side.write(
            &args.out,
            &format!("latent_{i}"),
            &render_gray(shape, latent.row_slice(i)),
        )?;
        for tr in &traces {
            let stem = format!("layer{:02}_{}", tr.layer, tr.mask);
            side.write(
                &args.out,
                &format!("{stem}_act_{i}"),
                &render_gray(shape, tr.activation.row_slice(i)),
            )?;
            for (tag, img) in [("s", &tr.s), ("t", &tr.t)] {
                let r: Rendered = render_marked(shape, img.values.row_slice(i), &img.predicted);
                side.write(&args.out, &format!("{stem}_{tag}_{i}"), &r)?;
            }
        }
    }
    side.save(args.out.join("images.csv"))?;
    println!("wrote {} images to {}", side.len(), args.out.display());
    Ok(())
}

fn parse_region(text: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Option<Vec<usize>> = text.split(',').map(|p| p.trim().parse().ok()).collect();
    match parts.as_deref() {
        Some(&[top, left, size]) => Ok((top, left, size)),
        _ => Err(CliError::Usage(format!(
            "--region must be TOP,LEFT,SIZE, got {text:?}"
        ))),
    }
}

/// 8-bit pixels written as they are, without stretching.
fn pixel_image(shape: Shape3, pixels: &[u8]) -> Rendered {
    let as_f64: Vec<f64> = pixels.iter().map(|&p| p as f64).collect();
    let mut r = render_gray(shape, &as_f64);
    r.pixels = if r.channels == 3 {
        let plane = shape.h * shape.w;
        (0..plane)
            .flat_map(|k| (0..3).map(move |c| pixels[c * plane + k]))
            .collect()
    } else {
        channel_grid(shape, &as_f64)
            .2
            .iter()
            .map(|&v| v as u8)
            .collect()
    };
    r.min = 0.0;
    r.max = 255.0;
    r
}

pub fn resample(args: ResampleArgs) -> CliResult {
    let (top, left, size) = parse_region(&args.region)?;
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let model = load_checkpoint(&args.checkpoint)?;
    if !args.data.is_images() {
        return Err(Error::config("resample needs image data").into());
    }
    let ds = images_for(&model, &args.data)?;
    if args.index >= ds.len() {
        return Err(Error::input(format!(
            "index {} out of range for {} images",
            args.index,
            ds.len()
        ))
        .into());
    }
    let shape = model.input_shape();
    let region = square_region(shape.h, shape.w, top, left, size)?;
    let alpha = training::DEFAULT_LOGIT_ALPHA;
    let eps = RngStream::new(args.seed, args.index as u64).uniform_vec(ds.dim());
    let mut row = Vec::with_capacity(ds.dim());
    dequantize_with_noise(ds.image(args.index), &eps, alpha, &mut row);
    let x = Tensor::matrix(args.samples, ds.dim(), row.repeat(args.samples))?;
    let recon = resample_latent_region(&model, &x, &region, args.seed)?;

    create_dir(&args.out)?;
    let mut side = Sidecar::default();
    side.write(
        &args.out,
        "original",
        &pixel_image(shape, ds.image(args.index)),
    )?;
    let mask: Vec<u8> = (0..shape.c)
        .flat_map(|_| region.iter().map(|&b| if b { 255 } else { 0 }))
        .collect();
    side.write(&args.out, "region", &pixel_image(shape, &mask))?;
    for m in 0..args.samples {
        let px = to_pixels(recon.row_slice(m), alpha);
        side.write(
            &args.out,
            &format!("resampled_{m}"),
            &pixel_image(shape, &px),
        )?;
    }
    side.save(args.out.join("images.csv"))?;
    println!("wrote {} images to {}", side.len(), args.out.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult {
    let reports = training::gradcheck::full_suite(args.seed)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{status} {} max_rel_err={:.3e} tol={:.0e} params={}",
            r.name, r.max_relative_error, r.tolerance, r.checked
        );
    }
    println!(
        "{} of {} checks passed",
        reports.len() - failed,
        reports.len()
    );
    if failed > 0 {
        return Err(CliError::Failed {
            category: "gradcheck",
            detail: format!("{failed} of {} checks failed", reports.len()),
        });
    }
    Ok(())
}

pub fn masks(args: MasksArgs) -> CliResult {
    let mask = Mask::new(args.kind, args.shape, args.phase)?;
    print!("{}", mask.render());
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> CliResult {
    let ds = gen_synthetic(args.family, args.n, args.resolution, args.seed)?;
    write_idx(&args.out, &ds)?;
    println!(
        "wrote {} {} images to {}",
        ds.len(),
        ds.shape,
        args.out.display()
    );
    Ok(())
}
