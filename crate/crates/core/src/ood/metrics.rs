use crate::error::{Error, Result};

fn check(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::contract(format!("{name} scores are empty")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!(
            "{name} scores contain non-finite values"
        )));
    }
    Ok(())
}

/// Probability that a random in-distribution score exceeds a random OOD
/// score, ties counted ½. Computed from average ranks (Mann–Whitney U).
pub fn auroc(in_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check("in-distribution", in_scores)?;
    check("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&v| (v, true))
        .chain(ood_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps every quantity an integer.
    let mut twice_rank_sum_in: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let twice_avg = (i + 1 + j + 1) as u64;
        let in_tied = all[i..=j].iter().filter(|e| e.1).count() as u64;
        twice_rank_sum_in += twice_avg * in_tied;
        i = j + 1;
    }
    let (n, m) = (in_scores.len() as u64, ood_scores.len() as u64);
    let twice_u = twice_rank_sum_in - n * (n + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub accuracy: f64,
}

/// In-distribution is the positive class; a score `≥ tau` predicts positive.
pub fn threshold_metrics(
    in_scores: &[f64],
    ood_scores: &[f64],
    tau: f64,
) -> Result<ThresholdMetrics> {
    check("in-distribution", in_scores)?;
    check("OOD", ood_scores)?;
    let tp = in_scores.iter().filter(|&&v| v >= tau).count();
    let fp = ood_scores.iter().filter(|&&v| v >= tau).count();
    let tn = ood_scores.len() - fp;
    let (n, m) = (in_scores.len() as f64, ood_scores.len() as f64);
    Ok(ThresholdMetrics {
        tpr: tp as f64 / n,
        fpr: fp as f64 / m,
        accuracy: (tp + tn) as f64 / (n + m),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    /// Scores below `lo`.
    pub underflow: usize,
    /// Scores at or above `hi`.
    pub overflow: usize,
}

impl Histogram {
    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let left = self.lo + width * k as f64;
        let right = if k + 1 == self.counts.len() {
            self.hi
        } else {
            self.lo + width * (k + 1) as f64
        };
        (left, right)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "bin_left,bin_right,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            let (l, r) = self.bin_edges(k);
            writeln!(out, "{l},{r},{c}")?;
        }
        writeln!(out, "-inf,{},{}", self.lo, self.underflow)?;
        writeln!(out, "{},inf,{}", self.hi, self.overflow)
    }
}

/// Counts of `scores` in `bins` equal-width, left-closed bins over
/// `[lo, hi)`.
pub fn histogram(scores: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::contract(format!(
            "histogram range [{lo}, {hi}) is not a finite interval"
        )));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let width = (hi - lo) / bins as f64;
    for &v in scores {
        if v.is_nan() || v < lo {
            h.underflow += 1;
        } else if v >= hi {
            h.overflow += 1;
        } else {
            let mut k = (((v - lo) / width) as usize).min(bins - 1);
            // guard against rounding across an edge
            while k > 0 && v < h.bin_edges(k).0 {
                k -= 1;
            }
            while k + 1 < bins && v >= h.bin_edges(k).1 {
                k += 1;
            }
            h.counts[k] += 1;
        }
    }
    Ok(h)
}
