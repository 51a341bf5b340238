//! Likelihood scoring of datasets and OOD metrics.

mod metrics;

pub use metrics::{auroc, histogram, threshold_metrics, Histogram, ThresholdMetrics};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{BnMode, FlowModel};
use crate::numerics::{RngStream, Tape, Tensor};
use crate::training::{
    dequantize_with_noise, log_prob_with_offsets, DataSource, DEFAULT_LOGIT_ALPHA,
};

/// How scores were produced. Recorded with every [`ScoreSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePolicy {
    pub bn_mode: BnMode,
    /// Example `i` draws its dequantization noise from stream `i` of this seed.
    pub seed: u64,
    /// Dequantization draws averaged per example.
    pub noise_samples: usize,
    /// Examples per forward pass; in train mode this is the batch whose
    /// statistics batch norm uses.
    pub batch_size: usize,
    pub logit_alpha: f64,
    pub workers: usize,
}

impl Default for ScorePolicy {
    fn default() -> Self {
        ScorePolicy {
            bn_mode: BnMode::Eval,
            seed: 0,
            noise_samples: 1,
            batch_size: 64,
            logit_alpha: DEFAULT_LOGIT_ALPHA,
            workers: 1,
        }
    }
}

impl ScorePolicy {
    pub fn to_text(&self) -> String {
        format!(
            "bn_mode = {}\nseed = {}\nnoise_samples = {}\nbatch_size = {}\nlogit_alpha = {}\n",
            self.bn_mode, self.seed, self.noise_samples, self.batch_size, self.logit_alpha
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub dataset: String,
    /// Per-example `log p(x)` in nats.
    pub scores: Vec<f64>,
    pub policy: Option<ScorePolicy>,
}

impl ScoreSet {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

/// Contiguous scoring batches; a trailing batch of one is merged into its
/// predecessor so train-mode batch norm always sees at least two examples.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map_or(false, |r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn score_range(
    model: &FlowModel,
    data: DataSource,
    rows: std::ops::Range<usize>,
    policy: &ScorePolicy,
) -> Result<Vec<f64>> {
    let d = data.dim();
    let k = policy.noise_samples;
    let n = rows.len();
    // Per example, all k draws come from that example's own stream.
    let noise: Vec<Vec<f64>> = match data {
        DataSource::Images(_) => rows
            .clone()
            .map(|i| RngStream::new(policy.seed, i as u64).uniform_vec(k * d))
            .collect(),
        DataSource::Vectors(_) => Vec::new(),
    };
    let mut acc = vec![0.0; n];
    for draw in 0..k {
        let (x, off) = match data {
            DataSource::Images(ds) => {
                let mut values = Vec::with_capacity(n * d);
                let mut off = Vec::with_capacity(n);
                for (r, i) in rows.clone().enumerate() {
                    let eps = &noise[r][draw * d..(draw + 1) * d];
                    off.push(dequantize_with_noise(
                        ds.image(i),
                        eps,
                        policy.logit_alpha,
                        &mut values,
                    ));
                }
                (Tensor::matrix(n, d, values)?, off)
            }
            DataSource::Vectors(vs) => {
                let idx: Vec<usize> = rows.clone().collect();
                (vs.data.select_rows(&idx), vec![0.0; n])
            }
        };
        let mut tape = Tape::new();
        let (lp, _) = log_prob_with_offsets(&mut tape, model, &x, &off, policy.bn_mode)?;
        for (a, v) in acc.iter_mut().zip(tape.value(lp).data()) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / k as f64).collect())
}

/// Per-example `log p(x)` averaged over `noise_samples` dequantization
/// draws. Results do not depend on `workers`.
pub fn score_dataset(
    model: &FlowModel,
    data: DataSource,
    dataset: &str,
    policy: &ScorePolicy,
) -> Result<ScoreSet> {
    if data.dim() != model.dim() {
        return Err(Error::input(format!(
            "dataset {dataset} has {} coordinates per example, model input {} has {}",
            data.dim(),
            model.input_shape(),
            model.dim()
        )));
    }
    if data.is_empty() {
        return Err(Error::input(format!("dataset {dataset} is empty")));
    }
    if policy.noise_samples == 0 || policy.batch_size == 0 || policy.workers == 0 {
        return Err(Error::config(
            "noise samples, batch size and workers must be positive",
        ));
    }
    if policy.bn_mode == BnMode::Train && (data.len() < 2 || policy.batch_size < 2) {
        return Err(Error::contract(
            "train-mode scoring needs batches of at least two examples",
        ));
    }
    let chunks = batches(data.len(), policy.batch_size);
    let results: Vec<Result<Vec<f64>>> = if policy.workers == 1 {
        chunks
            .iter()
            .map(|r| score_range(model, data, r.clone(), policy))
            .collect()
    } else {
        // Workers take interleaved batches; results are reassembled in order.
        let w = policy.workers.min(chunks.len());
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..w)
                .map(|t| {
                    let chunks = &chunks;
                    scope.spawn(move || {
                        (t..chunks.len())
                            .step_by(w)
                            .map(|c| (c, score_range(model, data, chunks[c].clone(), policy)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("scoring worker panicked") {
                    slots[c] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every batch scored"))
            .collect()
    };
    let mut scores = Vec::with_capacity(data.len());
    for r in results {
        scores.extend(r?);
    }
    Ok(ScoreSet {
        dataset: dataset.to_string(),
        scores,
        policy: Some(*policy),
    })
}

pub const SCORE_HEADER: &str = "dataset,index,logp_nats";

pub fn write_scores(mut out: impl Write, sets: &[&ScoreSet]) -> std::io::Result<()> {
    writeln!(out, "{SCORE_HEADER}")?;
    for s in sets {
        for (i, v) in s.scores.iter().enumerate() {
            writeln!(out, "{},{i},{v:.17e}", s.dataset)?;
        }
    }
    Ok(())
}

/// Writes the score CSV and, next to it, a `.policy` file per set.
pub fn save_scores(path: impl AsRef<Path>, set: &ScoreSet) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_scores(&mut buf, &[set]).expect("in-memory write");
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    if let Some(p) = &set.policy {
        let side = path.with_extension("policy");
        fs::write(&side, format!("dataset = {}\n{}", set.dataset, p.to_text()))
            .map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads a score CSV; one [`ScoreSet`] per dataset name, in order of first
/// appearance. Indices must run `0, 1, 2, …` within each dataset.
pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreSet>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header_ok = reader
        .headers()
        .map(|h| h.iter().collect::<Vec<_>>() == ["dataset", "index", "logp_nats"])
        .unwrap_or(false);
    if !header_ok {
        return Err(Error::Csv {
            path: shown,
            row: 1,
            column: 1,
            detail: format!("header must be {SCORE_HEADER}"),
        });
    }
    let mut sets: Vec<ScoreSet> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let line = r + 2;
        let bad = |column: usize, detail: String| Error::Csv {
            path: shown.clone(),
            row: line,
            column,
            detail,
        };
        let rec = rec.map_err(|e| bad(0, e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(
                rec.len().min(3) + 1,
                format!("expected 3 fields, found {}", rec.len()),
            ));
        }
        let name = &rec[0];
        let index: usize = rec[1]
            .parse()
            .map_err(|_| bad(2, format!("bad index {:?}", &rec[1])))?;
        let value: f64 = rec[2]
            .parse()
            .map_err(|_| bad(3, format!("bad score {:?}", &rec[2])))?;
        if !value.is_finite() {
            return Err(bad(3, "score is not finite".into()));
        }
        let set = match sets.iter().position(|s| s.dataset == name) {
            Some(k) => &mut sets[k],
            None => {
                sets.push(ScoreSet {
                    dataset: name.to_string(),
                    scores: Vec::new(),
                    policy: None,
                });
                sets.last_mut().expect("just pushed")
            }
        };
        if index != set.scores.len() {
            return Err(bad(
                2,
                format!("expected index {} for dataset {name}", set.scores.len()),
            ));
        }
        set.scores.push(value);
    }
    if sets.is_empty() {
        return Err(Error::input(format!("{shown}: no scores")));
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_end_with_a_single_example() {
        assert_eq!(batches(5, 2), vec![0..2, 2..5]);
        assert_eq!(batches(4, 2), vec![0..2, 2..4]);
        assert_eq!(batches(1, 4), vec![0..1]);
    }

    #[test]
    fn scores_round_trip_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let set = ScoreSet {
            dataset: "a".into(),
            scores: vec![-1.5, 0.1 + 0.2, -1e300],
            policy: Some(ScorePolicy::default()),
        };
        save_scores(&path, &set).unwrap();
        let back = load_scores(&path).unwrap();
        assert_eq!(back[0].scores, set.scores);
        assert!(dir.path().join("s.policy").exists());
    }
}
