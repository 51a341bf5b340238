//! Central finite differences as an independent check on the tape.

use std::sync::Arc;

use super::{RngStream, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors; entries whose true derivative is
/// below this magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// ∂f/∂xᵢ by central differences with step `h`.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

type UnaryProgram = fn(&mut Tape, Var, Var) -> Result<Var>;

/// Checks every tape primitive against central differences on random
/// inputs in `[-2, 2]` (shifted into `(0, 2]` for `log`).
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngStream::new(seed, 0);
    let (rows, cols) = (3, 4);
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
    };
    let x = draw(rows * cols, -2.0, 2.0);
    let x_pos: Vec<f64> = draw(rows * cols, 0.1, 2.0);
    let other = draw(rows * cols, -2.0, 2.0);
    let row_vec = draw(cols, -2.0, 2.0);
    let col_vec = draw(rows, -2.0, 2.0);
    let weights = draw(rows * cols, -1.0, 1.0);
    let mat = draw(cols * 5, -1.0, 1.0);
    let bias = draw(5, -1.0, 1.0);

    // Each case maps the probed input `x` (and a fixed companion `c`) to a
    // matrix; the harness reduces with fixed random weights when needed.
    let cases: Vec<(&str, Tensor, Tensor, UnaryProgram)> = vec![
        (
            "add",
            mtx(rows, cols, &x),
            mtx(rows, cols, &other),
            |t, x, c| t.add(x, c),
        ),
        (
            "add_row_broadcast",
            mtx(rows, cols, &x),
            Tensor::row(row_vec.clone()),
            |t, x, c| t.add(c, x),
        ),
        (
            "sub",
            mtx(rows, cols, &x),
            mtx(rows, cols, &other),
            |t, x, c| t.sub(c, x),
        ),
        (
            "mul",
            mtx(rows, cols, &x),
            mtx(rows, cols, &other),
            |t, x, c| t.mul(x, c),
        ),
        (
            "mul_col_broadcast",
            mtx(rows, cols, &x),
            Tensor::column(col_vec.clone()),
            |t, x, c| t.mul(x, c),
        ),
        (
            "mul_self",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| t.mul(x, x),
        ),
        (
            "matmul",
            mtx(rows, cols, &x),
            mtx(cols, 5, &mat),
            |t, x, c| t.matmul(x, c),
        ),
        (
            "matmul_rhs",
            mtx(cols, 5, &mat),
            mtx(rows, cols, &other),
            |t, x, c| t.matmul(c, x),
        ),
        (
            "affine",
            mtx(rows, cols, &x),
            mtx(cols, 5, &mat),
            |t, x, w| {
                let b = t.leaf(Tensor::row(vec![0.1, -0.2, 0.3, 0.0, 0.5]));
                t.affine(x, w, b)
            },
        ),
        (
            "affine_weights",
            mtx(cols, 5, &mat),
            mtx(rows, cols, &other),
            |t, w, x| {
                let b = t.leaf(Tensor::row(vec![0.1, -0.2, 0.3, 0.0, 0.5]));
                t.affine(x, w, b)
            },
        ),
        (
            "affine_bias",
            Tensor::row(bias.clone()),
            mtx(rows, cols, &other),
            |t, b, x| {
                let w = t.leaf(Tensor::full(&[4, 5], 0.25));
                t.affine(x, w, b)
            },
        ),
        (
            "tanh",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.tanh(x)),
        ),
        (
            "relu",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.relu(x)),
        ),
        (
            "exp",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.exp(x)),
        ),
        (
            "log",
            mtx(rows, cols, &x_pos),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.log(x)),
        ),
        (
            "scale",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.scale(x, -1.7)),
        ),
        (
            "sum",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
        ),
        (
            "mean",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| {
                let y = t.mul(x, x)?;
                Ok(t.mean(y))
            },
        ),
        (
            "sum_rows",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.sum_axis(x, super::Axis::Rows)),
        ),
        (
            "mean_cols",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| Ok(t.mean_axis(x, super::Axis::Cols)),
        ),
        (
            "gather",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| t.gather(x, Arc::from(vec![3, 0, 2])),
        ),
        (
            "scatter",
            mtx(rows, cols, &x),
            Tensor::scalar(0.0),
            |t, x, _| t.scatter(x, Arc::from(vec![5, 1, 0, 3]), 6),
        ),
        (
            "concat",
            mtx(rows, cols, &x),
            mtx(rows, cols, &other),
            |t, x, c| {
                let y = t.tanh(x);
                t.concat(&[c, y, x])
            },
        ),
    ];

    let mut reports = Vec::new();
    for (name, input, companion, program) in cases {
        let (in_rows, in_cols) = (input.rows(), input.cols());
        let eval = |xs: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let xv = tape.leaf(mtx(in_rows, in_cols, xs));
            let cv = tape.leaf(companion.clone());
            let y = program(&mut tape, xv, cv)?;
            let out = tape.value(y).clone();
            // Contract with fixed weights so every output entry matters.
            let w: Vec<f64> = (0..out.len())
                .map(|i| weights[i % weights.len()] + 0.5)
                .collect();
            let wv = tape.leaf(Tensor::matrix(out.rows(), out.cols(), w)?);
            let prod = tape.mul(y, wv)?;
            let s = tape.sum(prod);
            let value = tape.value(s).item();
            let grad = if want_grad {
                let grads = tape.backward(s)?;
                let g = grads.wrt(xv).map(|g| g.data().to_vec());
                Some(g.unwrap_or_else(|| vec![0.0; xs.len()]))
            } else {
                None
            };
            Ok((value, grad))
        };
        let analytic = eval(input.data(), true)?.1.expect("requested");
        let numeric = central_differences(|xs| Ok(eval(xs, false)?.0), input.data(), DEFAULT_STEP)?;
        reports.push(GradCheckReport {
            name: format!("primitive/{name}"),
            max_relative_error: max_relative_error(&analytic, &numeric),
            tolerance: 1e-4,
            checked: input.len(),
        });
    }
    Ok(reports)
}

fn mtx(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).expect("fixed test shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_differences_of_cubic() {
        let g = central_differences(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[1.5, -3.0], 1e-5).unwrap();
        assert!((g[0] - 6.75).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn every_primitive_passes() {
        for r in primitive_suite(11).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_relative_error);
        }
    }
}
