//! Differentiable operations.
//!
//! Checked constructors (`add`, `matmul`, `log`, ...) return `Result` and
//! reject shape or domain violations. The `std::ops` overloads are thin
//! panicking wrappers for code whose shapes are locally guaranteed (they
//! also auto-broadcast, numpy-style, right-aligned).

use std::rc::Rc;

use crate::autodiff::tape::{TensorData, Var};
use crate::error::{Error, Result};

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    Pow(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Softmax { input: usize, axis: usize },
    Sum { input: usize, axis: Option<usize> },
    Broadcast { input: usize },
    Reshape { input: usize },
    GatherRows { input: usize, indices: Rc<Vec<usize>> },
    ScatterAddRows { input: usize, indices: Rc<Vec<usize>> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize, len: usize },
}

/// Right-aligned broadcast result of two shapes, or a shape-mismatch error
/// naming `op`.
pub(crate) fn broadcast_shapes(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let l = if i < rank - lhs.len() { 1 } else { lhs[i - (rank - lhs.len())] };
        let r = if i < rank - rhs.len() { 1 } else { rhs[i - (rank - rhs.len())] };
        out[i] = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() });
        };
    }
    Ok(out)
}

/// Expands `data` of shape `src` to `target` (right-aligned, extent-1 axes
/// repeat). Caller has already validated compatibility.
fn broadcast_data(src_shape: &[usize], data: &[f64], target: &[usize]) -> Vec<f64> {
    if src_shape == target {
        return data.to_vec();
    }
    let rank = target.len();
    let offset = rank - src_shape.len();
    // Stride 0 on broadcast axes makes the index arithmetic uniform.
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for k in (0..src_shape.len()).rev() {
        if src_shape[k] != 1 {
            strides[offset + k] = acc;
        }
        acc *= src_shape[k];
    }
    let total: usize = target.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut src_pos = 0;
        for (i, s) in idx.iter().zip(&strides) {
            src_pos += i * s;
        }
        out.push(data[src_pos]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl<'t> Var<'t> {
    fn node_requires(&self, other: &Var<'t>) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    /// Broadcasts to `target` (right-aligned). A no-op when shapes already
    /// match; records a broadcast node otherwise.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape == target {
            return Ok(*self);
        }
        // Validate: each trailing axis must match or be 1, and rank must not shrink.
        // Rank-2 targets are the ceiling for this engine.
        if shape.len() > target.len() || target.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: shape,
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - shape.len();
        for (k, &s) in shape.iter().enumerate() {
            if s != 1 && s != target[offset + k] {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: shape,
                    rhs: target.to_vec(),
                });
            }
        }
        let data = self.with_data(|d| broadcast_data(&shape, d, target));
        Ok(self.tape.push(
            target.to_vec(),
            data,
            Op::Broadcast { input: self.id },
            self.requires_grad(),
        ))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        kernel: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let target = broadcast_shapes(name, &self.shape(), &other.shape())?;
        let a = self.broadcast_to(&target)?;
        let b = other.broadcast_to(&target)?;
        let data = a.with_data(|xs| {
            b.with_data(|ys| xs.iter().zip(ys).map(|(x, y)| kernel(*x, *y)).collect::<Vec<_>>())
        });
        Ok(self
            .tape
            .push(target, data, make(a.id, b.id), a.node_requires(&b)))
    }

    fn unary(
        &self,
        kernel: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Var<'t> {
        let data = self.with_data(|xs| xs.iter().map(|x| kernel(*x)).collect::<Vec<_>>());
        self.tape.push(self.shape(), data, make(self.id), self.requires_grad())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise division. Rejects divisors containing exact zeros.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let has_zero = other.with_data(|d| d.iter().any(|v| *v == 0.0));
        if has_zero {
            return Err(Error::Domain { op: "div", msg: "divisor contains zero".into() });
        }
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    /// Elementwise maximum; ties resolve their gradient toward `self`.
    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", f64::max, Op::Maximum)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp)
    }

    /// Natural log. Rejects non-positive inputs.
    pub fn log(&self) -> Result<Var<'t>> {
        let bad = self.with_data(|d| d.iter().any(|v| *v <= 0.0));
        if bad {
            return Err(Error::Domain { op: "log", msg: "input has a non-positive entry".into() });
        }
        Ok(self.unary(f64::ln, Op::Log))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh)
    }

    /// Rectifier. The derivative at exactly zero is taken as zero.
    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu)
    }

    /// Elementwise square root. Rejects negative inputs; note the
    /// derivative is unbounded at zero.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        let bad = self.with_data(|d| d.iter().any(|v| *v < 0.0));
        if bad {
            return Err(Error::Domain { op: "sqrt", msg: "input has a negative entry".into() });
        }
        Ok(self.unary(f64::sqrt, Op::Sqrt))
    }

    /// Elementwise power with a fixed real exponent.
    pub fn pow(&self, exponent: f64) -> Result<Var<'t>> {
        let (neg_base, zero_base) =
            self.with_data(|d| (d.iter().any(|v| *v < 0.0), d.iter().any(|v| *v == 0.0)));
        if neg_base && exponent.fract() != 0.0 {
            return Err(Error::Domain {
                op: "pow",
                msg: format!("negative base with fractional exponent {exponent}"),
            });
        }
        if zero_base && exponent < 0.0 {
            return Err(Error::Domain {
                op: "pow",
                msg: format!("zero base with negative exponent {exponent}"),
            });
        }
        Ok(self.unary(|x| x.powf(exponent), |id| Op::Pow(id, exponent)))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let data = self.with_data(|a| {
            other.with_data(|b| {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
                out
            })
        });
        Ok(self
            .tape
            .push(vec![m, n], data, Op::Matmul(self.id, other.id), self.node_requires(other)))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: shape, rhs: vec![] });
        }
        let (m, n) = (shape[0], shape[1]);
        let data = self.with_data(|a| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            out
        });
        Ok(self.tape.push(vec![n, m], data, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(Error::Domain {
                op: "softmax",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let data = self.with_data(|x| softmax_kernel(&shape, x, axis));
        Ok(self.tape.push(
            shape,
            data,
            Op::Softmax { input: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// log(softmax) along `axis`, composed from shift/exp/sum/log so it is
    /// stable and differentiable to any order.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(Error::Domain {
                op: "log_softmax",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        // Subtracting the (detached) per-slice max keeps exp in range and
        // leaves gradients untouched.
        let maxes = self.axis_max_constant(axis);
        let shifted = self.sub(&expand_axis(&maxes, axis, &shape)?)?;
        let lse = shifted.exp().sum(Some(axis))?.log()?;
        shifted.sub(&expand_axis(&lse, axis, &shape)?)
    }

    /// Per-slice maximum along `axis`, entered as a constant (no gradient).
    pub fn axis_max_constant(&self, axis: usize) -> Var<'t> {
        let shape = self.shape();
        let reduced = reduced_shape(&shape, axis);
        let data = self.with_data(|x| axis_fold(&shape, x, axis, f64::NEG_INFINITY, f64::max));
        self.tape.constant(TensorData::new(reduced, data))
    }

    /// Sum over one axis (`Some`) or all elements (`None`, scalar result).
    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        match axis {
            None => {
                let total = self.with_data(|x| x.iter().sum::<f64>());
                Ok(self.tape.push(
                    vec![],
                    vec![total],
                    Op::Sum { input: self.id, axis: None },
                    self.requires_grad(),
                ))
            }
            Some(ax) => {
                if ax >= shape.len() || shape.len() > 2 {
                    return Err(Error::Domain {
                        op: "sum",
                        msg: format!("axis {ax} invalid for shape {shape:?}"),
                    });
                }
                let reduced = reduced_shape(&shape, ax);
                let data = self.with_data(|x| axis_fold(&shape, x, ax, 0.0, |a, b| a + b));
                Ok(self.tape.push(
                    reduced,
                    data,
                    Op::Sum { input: self.id, axis: Some(ax) },
                    self.requires_grad(),
                ))
            }
        }
    }

    pub fn sum_all(&self) -> Var<'t> {
        self.sum(None).expect("sum over all elements cannot fail")
    }

    /// Arithmetic mean over one axis or all elements; built on `sum`.
    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        let shape = self.shape();
        let count = match axis {
            None => self.len(),
            Some(ax) if ax < shape.len() => shape[ax],
            Some(ax) => {
                return Err(Error::Domain {
                    op: "mean",
                    msg: format!("axis {ax} invalid for shape {shape:?}"),
                })
            }
        };
        if count == 0 {
            return Err(Error::Domain { op: "mean", msg: "mean over an empty axis".into() });
        }
        let summed = self.sum(axis)?;
        let inv = self.tape.scalar(1.0 / count as f64);
        summed.mul(&inv)
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        self.mean(None)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let old: usize = shape.iter().product();
        let new: usize = new_shape.iter().product();
        if old != new {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: shape,
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.with_data(|x| x.to_vec());
        Ok(self.tape.push(
            new_shape.to_vec(),
            data,
            Op::Reshape { input: self.id },
            self.requires_grad(),
        ))
    }

    /// Selects rows (axis 0) by index, duplicates allowed. Gradients
    /// scatter-add back, so repeated indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::Domain { op: "gather", msg: "cannot gather from a scalar".into() });
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfBounds { op: "gather", index: bad, len: rows });
        }
        let width: usize = shape[1..].iter().product();
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&x[i * width..(i + 1) * width]);
            }
            out
        });
        let mut new_shape = shape.clone();
        new_shape[0] = indices.len();
        Ok(self.tape.push(
            new_shape,
            data,
            Op::GatherRows { input: self.id, indices: Rc::new(indices.to_vec()) },
            self.requires_grad(),
        ))
    }

    /// Adds each of this tensor's rows into row `indices[i]` of a
    /// zero-initialized output with `rows` rows. The adjoint of
    /// [`Var::gather_rows`].
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() || shape[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_add",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfBounds { op: "scatter_add", index: bad, len: rows });
        }
        let width: usize = shape[1..].iter().product();
        let data = self.with_data(|x| {
            let mut out = vec![0.0; rows * width];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..width {
                    out[i * width + c] += x[r * width + c];
                }
            }
            out
        });
        let mut new_shape = shape.clone();
        new_shape[0] = rows;
        Ok(self.tape.push(
            new_shape,
            data,
            Op::ScatterAddRows { input: self.id, indices: Rc::new(indices.to_vec()) },
            self.requires_grad(),
        ))
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(Error::Domain {
                op: "narrow",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::IndexOutOfBounds {
                op: "narrow",
                index: start + len,
                len: shape[axis],
            });
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let data = self.with_data(|x| slice_kernel(&shape, x, axis, start, len));
        Ok(self.tape.push(
            new_shape,
            data,
            Op::Slice { input: self.id, axis, start, len },
            self.requires_grad(),
        ))
    }

    /// Sum of elementwise products; the inner product of two same-shape
    /// tensors.
    pub fn dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(self.mul(other)?.sum_all())
    }
}

/// Concatenates along `axis`. All parts must agree on rank and on every
/// other axis.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Domain { op: "concat", msg: "no tensors given".into() })?;
    let base = first.shape();
    if axis >= base.len() || base.len() > 2 {
        return Err(Error::Domain {
            op: "concat",
            msg: format!("axis {axis} invalid for shape {base:?}"),
        });
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: s });
        }
        axis_total += s[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;

    let data = if axis == 0 {
        let mut out = Vec::new();
        for p in parts {
            p.with_data(|x| out.extend_from_slice(x));
        }
        out
    } else {
        // axis == 1, rank 2: splice each row from every part in turn.
        let rows = base[0];
        let mut out = Vec::with_capacity(rows * axis_total);
        for r in 0..rows {
            for p in parts {
                let cols = p.shape()[1];
                p.with_data(|x| out.extend_from_slice(&x[r * cols..(r + 1) * cols]));
            }
        }
        out
    };
    let requires = parts.iter().any(|p| p.requires_grad());
    Ok(first.tape.push(
        out_shape,
        data,
        Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis },
        requires,
    ))
}

/// Reshape a reduced tensor so `axis` reappears with extent 1, then
/// broadcast back to `full` — the standard way to re-expand a reduction.
pub(crate) fn expand_axis<'t>(
    reduced: &Var<'t>,
    axis: usize,
    full: &[usize],
) -> Result<Var<'t>> {
    let mut keep = full.to_vec();
    keep[axis] = 1;
    reduced.reshape(&keep)?.broadcast_to(full)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

/// Folds along one axis of a rank-1 or rank-2 tensor.
fn axis_fold(
    shape: &[usize],
    data: &[f64],
    axis: usize,
    init: f64,
    fold: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match (shape.len(), axis) {
        (1, 0) => vec![data.iter().copied().fold(init, &fold)],
        (2, 0) => {
            let (m, n) = (shape[0], shape[1]);
            let mut out = vec![init; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] = fold(out[j], data[i * n + j]);
                }
            }
            out
        }
        (2, 1) => {
            let (m, n) = (shape[0], shape[1]);
            let mut out = vec![init; m];
            for i in 0..m {
                for j in 0..n {
                    out[i] = fold(out[i], data[i * n + j]);
                }
            }
            out
        }
        _ => unreachable!("axis validated by caller"),
    }
}

fn softmax_kernel(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (slices, stride, step) = match (shape.len(), axis) {
        // (number of independent slices, elements per slice, stride between them)
        (1, 0) => (1, data.len(), 1),
        (2, 1) => (shape[0], shape[1], 1),
        (2, 0) => (shape[1], shape[0], shape[1]),
        _ => unreachable!("axis validated by caller"),
    };
    let mut out = vec![0.0; data.len()];
    for s in 0..slices {
        let base = if axis == 0 && shape.len() == 2 { s } else { s * stride };
        let at = |k: usize| base + k * step;
        let mut maxv = f64::NEG_INFINITY;
        for k in 0..stride {
            maxv = maxv.max(data[at(k)]);
        }
        let mut total = 0.0;
        for k in 0..stride {
            let e = (data[at(k)] - maxv).exp();
            out[at(k)] = e;
            total += e;
        }
        for k in 0..stride {
            out[at(k)] /= total;
        }
    }
    out
}

fn slice_kernel(shape: &[usize], data: &[f64], axis: usize, start: usize, len: usize) -> Vec<f64> {
    match (shape.len(), axis) {
        (1, 0) => data[start..start + len].to_vec(),
        (2, 0) => {
            let n = shape[1];
            data[start * n..(start + len) * n].to_vec()
        }
        (2, 1) => {
            let (m, n) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&data[r * n + start..r * n + start + len]);
            }
            out
        }
        _ => unreachable!("axis validated by caller"),
    }
}

macro_rules! panicking_binop {
    ($trait:ident, $method:ident, $checked:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$checked(&self, &rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl<'t> std::ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let r = self.tape.scalar(rhs);
                Var::$checked(&self, &r).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

panicking_binop!(Add, add, add);
panicking_binop!(Sub, sub, sub);
panicking_binop!(Mul, mul, mul);
panicking_binop!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(&self)
    }
}
