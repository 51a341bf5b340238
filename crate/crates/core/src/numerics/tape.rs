//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every value produced during a forward computation
//! together with the primitive that produced it. [`Tape::backward`] then
//! walks the record in reverse, accumulating adjoints. All values are 2-D
//! (`rows × cols`); binary element-wise primitives broadcast any operand
//! extent of 1 against the other operand.

use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows (the batch axis), producing `1 × cols`.
    Rows,
    /// Reduce over columns, producing `rows × 1`.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    MeanAxis(Var, Axis),
    Gather(Var, Arc<[usize]>),
    Scatter(Var, Arc<[usize]>),
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf, summed over repeated leaves of
    /// the same parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Add the parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate(id, &g)?;
        }
        Ok(())
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::contract(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_shape(a, b)?;
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i * ac };
        let ib = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let x = ad[ia + if ac == 1 { 0 } else { j }];
            let y = bd[ib + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g.clone();
    }
    let (gr, gc) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * cols];
    for i in 0..gr {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if cols == 1 { 0 } else { j };
            out[oi * cols + oj] += g.data()[i * gc + j];
        }
    }
    Tensor::matrix(rows, cols, out).expect("reduced shape is valid")
}

/// Expand `small` (extents 1 or equal) to `rows × cols`.
fn expand(small: &Tensor, rows: usize, cols: usize) -> Tensor {
    let full = Tensor::zeros(&[rows, cols]);
    broadcast_binary(&full, small, |_, y| y).expect("expansion of reduced shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant or input leaf. Higher-rank tensors are flattened to
    /// `rows × cols`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.as_matrix(), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// A leaf bound to a stored parameter; its gradient is reported by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone().as_matrix(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(Error::contract(format!(
                "matmul {:?} x {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let v = x.matmul(y);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::contract(format!(
                "affine with x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut v = xv.matmul(wv);
        let c = v.cols();
        let bias = bv.data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::Affine(x, w, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let v = sum_along(self.value(a), axis);
        self.push(v, Op::SumAxis(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let n = match axis {
            Axis::Rows => t.rows(),
            Axis::Cols => t.cols(),
        } as f64;
        let v = sum_along(t, axis).map(|x| x / n);
        self.push(v, Op::MeanAxis(a, axis))
    }

    /// Select columns: `out[:, j] = a[:, idx[j]]`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= c) {
            return Err(Error::contract("gather index out of range"));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = t.row_slice(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let v = Tensor::matrix(r, idx.len(), out)?;
        Ok(self.push(v, Op::Gather(a, idx)))
    }

    /// Place columns into a zero matrix of `width` columns:
    /// `out[:, idx[j]] = a[:, j]`. Indices must be distinct.
    pub fn scatter(&mut self, a: Var, idx: Arc<[usize]>, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if idx.len() != c || idx.iter().any(|&i| i >= width) {
            return Err(Error::contract("scatter index out of range"));
        }
        let mut out = vec![0.0; r * width];
        for i in 0..r {
            let row = t.row_slice(i);
            for (j, &dst) in idx.iter().enumerate() {
                out[i * width + dst] = row[j];
            }
        }
        let v = Tensor::matrix(r, width, out)?;
        Ok(self.push(v, Op::Scatter(a, idx)))
    }

    /// Concatenate along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero values"))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::contract("concat row count mismatch"));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let v = Tensor::matrix(r, width, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, reduce_to(&g, av.rows(), av.cols()));
                    acc(&mut grads, *b, reduce_to(&g, bv.rows(), bv.cols()));
                }
                Op::Sub(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, reduce_to(&g, av.rows(), av.cols()));
                    let gb = reduce_to(&g, bv.rows(), bv.cols()).map(|x| -x);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary(&g, bv, |x, y| x * y)?;
                    let gb = broadcast_binary(&g, av, |x, y| x * y)?;
                    acc(&mut grads, *a, reduce_to(&ga, av.rows(), av.cols()));
                    acc(&mut grads, *b, reduce_to(&gb, bv.rows(), bv.cols()));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, Tensor::matmul_t(&g, false, bv, true));
                    acc(&mut grads, *b, Tensor::matmul_t(av, true, &g, false));
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc(&mut grads, *x, Tensor::matmul_t(&g, false, wv, true));
                    acc(&mut grads, *w, Tensor::matmul_t(xv, true, &g, false));
                    acc(&mut grads, *b, sum_along(&g, Axis::Rows));
                }
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(y, |g, y| g * y)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g / x));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::Sum(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::full(av.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.item() / av.len() as f64;
                    acc(&mut grads, *a, Tensor::full(av.shape(), s));
                }
                Op::SumAxis(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, expand(&g, av.rows(), av.cols()));
                }
                Op::MeanAxis(a, axis) => {
                    let av = self.value(*a);
                    let n = match axis {
                        Axis::Rows => av.rows(),
                        Axis::Cols => av.cols(),
                    } as f64;
                    acc(
                        &mut grads,
                        *a,
                        expand(&g, av.rows(), av.cols()).map(|x| x / n),
                    );
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = vec![0.0; r * c];
                    let k = idx.len();
                    for i in 0..r {
                        for (j, &src) in idx.iter().enumerate() {
                            ga[i * c + src] += g.data()[i * k + j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
                Op::Scatter(a, idx) => {
                    let width = y.cols();
                    let r = y.rows();
                    let k = idx.len();
                    let mut ga = Vec::with_capacity(r * k);
                    for i in 0..r {
                        ga.extend(idx.iter().map(|&dst| g.data()[i * width + dst]));
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, k, ga)?);
                }
                Op::Concat(parts) => {
                    let r = y.rows();
                    let width = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            let start = i * width + offset;
                            gp.extend_from_slice(&g.data()[start..start + c]);
                        }
                        acc(&mut grads, p, Tensor::matrix(r, c, gp)?);
                        offset += c;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(output.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn sum_along(t: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    match axis {
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for row in t.data().chunks(c) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Tensor::row(out)
        }
        Axis::Cols => {
            debug_assert!(r > 0);
            Tensor::column(t.data().chunks(c).map(|row| row.iter().sum()).collect())
        }
    }
}

/// Run `program` on a fresh tape and return its scalar value together with
/// the gradient of every parameter it touched.
pub fn evaluate_and_grad<F>(
    params: &ParamStore,
    input: &Tensor,
    program: F,
) -> Result<(f64, Vec<(ParamId, Tensor)>)>
where
    F: FnOnce(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = program(&mut tape, params, x)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::contract(format!(
            "program output must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    let value = value.item();
    if !value.is_finite() {
        return Err(Error::numeric("program output", value));
    }
    let grads = tape.backward(out)?;
    Ok((value, grads.param_grads()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_program_has_zero_param_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, 2.0]));
        let (value, grads) = evaluate_and_grad(&store, &Tensor::scalar(1.0), |tape, _, x| {
            let c = tape.leaf(Tensor::row(vec![4.0, 5.0]));
            let s = tape.sum(c);
            tape.add(s, x)
        })
        .unwrap();
        assert_eq!(value, 10.0);
        assert!(grads.iter().all(|(id, _)| *id != w));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_param_leaves_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param_grads(), vec![(w, Tensor::scalar(4.0))]);
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let r = tape.leaf(Tensor::row(vec![10., 20.]));
        let c = tape.leaf(Tensor::column(vec![100., 200.]));
        let ar = tape.add(a, r).unwrap();
        assert_eq!(tape.value(ar).data(), &[11., 22., 13., 24.]);
        let ac = tape.mul(a, c).unwrap();
        assert_eq!(tape.value(ac).data(), &[100., 200., 600., 800.]);
        let bad = tape.leaf(Tensor::row(vec![1., 2., 3.]));
        assert!(tape.add(a, bad).is_err());
    }
}
