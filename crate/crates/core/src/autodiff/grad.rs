//! Reverse-mode gradient computation.
//!
//! [`grad`] walks the tape from a scalar output back to the requested
//! inputs. The walk emits ordinary tape operations, so with
//! `create_graph = true` the returned gradients are differentiable
//! again — that is what powers curvature-vector products and
//! differentiating through unrolled optimizer steps.

use crate::autodiff::ops::{concat, expand_axis, Op};
use crate::autodiff::tape::{Tape, TensorData, Var};
use crate::error::{Error, Result};

/// Restores the tape's recording mode when a backward pass ends, even on
/// the error path.
struct GradModeGuard<'t> {
    tape: &'t Tape,
    prev: bool,
}

impl Drop for GradModeGuard<'_> {
    fn drop(&mut self) {
        self.tape.set_grad_enabled(self.prev);
    }
}

/// Gradient of a scalar `output` with respect to each of `inputs`.
///
/// Inputs that `output` does not depend on receive zero tensors of their
/// own shape. With `create_graph` the emitted gradient subgraph is itself
/// differentiable; without it the gradients are terminal values.
pub fn grad<'t>(
    output: Var<'t>,
    inputs: &[Var<'t>],
    create_graph: bool,
) -> Result<Vec<Var<'t>>> {
    if output.len() != 1 {
        return Err(Error::NonScalarGradTarget { shape: output.shape() });
    }
    let tape = output.tape;
    let limit = output.id + 1;
    let prev = tape.set_grad_enabled(create_graph);
    let _guard = GradModeGuard { tape, prev };

    let mut grads: Vec<Option<Var<'t>>> = vec![None; limit];
    if node_requires_grad(tape, output.id) {
        let seed = tape.constant(TensorData::new(output.shape(), vec![1.0]));
        grads[output.id] = Some(seed);
    }

    for id in (0..limit).rev() {
        let Some(g) = grads[id] else { continue };
        let op = clone_op(tape, id);
        let out = Var { tape, id };
        backprop_one(tape, &op, out, g, &mut grads)?;
    }

    let mut result = Vec::with_capacity(inputs.len());
    for input in inputs {
        let found = if input.id < limit { grads[input.id] } else { None };
        let gv = match found {
            Some(g) => g,
            None => tape.constant(TensorData::zeros(&input.shape())),
        };
        result.push(gv);
    }
    Ok(result)
}

fn node_requires_grad(tape: &Tape, id: usize) -> bool {
    tape.inner.borrow().nodes[id].requires_grad
}

fn clone_op(tape: &Tape, id: usize) -> Op {
    tape.inner.borrow().nodes[id].op.clone()
}

fn node_shape(tape: &Tape, id: usize) -> Vec<usize> {
    tape.inner.borrow().nodes[id].shape.clone()
}

/// Adds `contribution` into the gradient slot of `parent` if that node
/// participates in differentiation.
fn accumulate<'t>(
    tape: &'t Tape,
    grads: &mut [Option<Var<'t>>],
    parent: usize,
    contribution: impl FnOnce() -> Result<Var<'t>>,
) -> Result<()> {
    if !node_requires_grad(tape, parent) {
        return Ok(());
    }
    let c = contribution()?;
    grads[parent] = Some(match grads[parent] {
        Some(existing) => existing.add(&c)?,
        None => c,
    });
    Ok(())
}

/// Elementwise 0/1 mask over a node's current data, entered as a constant.
fn mask_constant<'t>(tape: &'t Tape, of: Var<'t>, pred: impl Fn(f64) -> bool) -> Var<'t> {
    let shape = of.shape();
    let data = of.with_data(|d| d.iter().map(|v| if pred(*v) { 1.0 } else { 0.0 }).collect());
    tape.constant(TensorData::new(shape, data))
}

/// Comparison mask between two same-shape nodes (`1.0` where `pred` holds).
fn pair_mask_constant<'t>(
    tape: &'t Tape,
    a: Var<'t>,
    b: Var<'t>,
    pred: impl Fn(f64, f64) -> bool,
) -> Var<'t> {
    let shape = a.shape();
    let data = a.with_data(|xs| {
        b.with_data(|ys| {
            xs.iter()
                .zip(ys)
                .map(|(x, y)| if pred(*x, *y) { 1.0 } else { 0.0 })
                .collect::<Vec<_>>()
        })
    });
    tape.constant(TensorData::new(shape, data))
}

/// Reduces `g` back to `src_shape` by summing over axes the forward
/// broadcast expanded.
fn reduce_to<'t>(g: Var<'t>, src_shape: &[usize]) -> Result<Var<'t>> {
    let mut cur = g;
    while cur.rank() > src_shape.len() {
        cur = cur.sum(Some(0))?;
    }
    for ax in 0..src_shape.len() {
        if src_shape[ax] == 1 && cur.shape()[ax] != 1 {
            let mut keep = cur.shape();
            keep[ax] = 1;
            cur = expand_keepdim(cur.sum(Some(ax))?, &keep)?;
        }
    }
    cur.reshape(src_shape)
}

fn expand_keepdim<'t>(reduced: Var<'t>, keep: &[usize]) -> Result<Var<'t>> {
    reduced.reshape(keep)
}

fn backprop_one<'t>(
    tape: &'t Tape,
    op: &Op,
    out: Var<'t>,
    g: Var<'t>,
    grads: &mut [Option<Var<'t>>],
) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(tape, grads, *a, || Ok(g))?;
            accumulate(tape, grads, *b, || Ok(g))?;
        }
        Op::Sub(a, b) => {
            accumulate(tape, grads, *a, || Ok(g))?;
            accumulate(tape, grads, *b, || Ok(g.neg()))?;
        }
        Op::Mul(a, b) => {
            let (va, vb) = (Var { tape, id: *a }, Var { tape, id: *b });
            accumulate(tape, grads, *a, || g.mul(&vb))?;
            accumulate(tape, grads, *b, || g.mul(&va))?;
        }
        Op::Div(a, b) => {
            let vb = Var { tape, id: *b };
            accumulate(tape, grads, *a, || g.div(&vb))?;
            accumulate(tape, grads, *b, || Ok(g.mul(&out)?.div(&vb)?.neg()))?;
        }
        Op::Maximum(a, b) => {
            let (va, vb) = (Var { tape, id: *a }, Var { tape, id: *b });
            let take_a = pair_mask_constant(tape, va, vb, |x, y| x >= y);
            let take_b = pair_mask_constant(tape, va, vb, |x, y| x < y);
            accumulate(tape, grads, *a, || g.mul(&take_a))?;
            accumulate(tape, grads, *b, || g.mul(&take_b))?;
        }
        Op::Neg(a) => accumulate(tape, grads, *a, || Ok(g.neg()))?,
        Op::Exp(a) => accumulate(tape, grads, *a, || g.mul(&out))?,
        Op::Log(a) => {
            let va = Var { tape, id: *a };
            accumulate(tape, grads, *a, || g.div(&va))?;
        }
        Op::Tanh(a) => {
            accumulate(tape, grads, *a, || {
                let one = tape.scalar(1.0);
                g.mul(&one.sub(&out.mul(&out)?)?)
            })?;
        }
        Op::Relu(a) => {
            let va = Var { tape, id: *a };
            // Strictly-positive mask: the kink at zero contributes nothing.
            let mask = mask_constant(tape, va, |x| x > 0.0);
            accumulate(tape, grads, *a, || g.mul(&mask))?;
        }
        Op::Sqrt(a) => {
            accumulate(tape, grads, *a, || {
                let two = tape.scalar(2.0);
                g.div(&out.mul(&two)?)
            })?;
        }
        Op::Pow(a, p) => {
            if *p != 0.0 {
                let va = Var { tape, id: *a };
                accumulate(tape, grads, *a, || {
                    let pm1 = va.pow(p - 1.0)?;
                    let pc = tape.scalar(*p);
                    g.mul(&pm1)?.mul(&pc)
                })?;
            }
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (Var { tape, id: *a }, Var { tape, id: *b });
            accumulate(tape, grads, *a, || g.matmul(&vb.transpose()?))?;
            accumulate(tape, grads, *b, || va.transpose()?.matmul(&g))?;
        }
        Op::Transpose(a) => accumulate(tape, grads, *a, || g.transpose())?,
        Op::Softmax { input, axis } => {
            accumulate(tape, grads, *input, || {
                let shape = out.shape();
                let go = g.mul(&out)?;
                let s = go.sum(Some(*axis))?;
                let sb = expand_axis(&s, *axis, &shape)?;
                out.mul(&g.sub(&sb)?)
            })?;
        }
        Op::Sum { input, axis } => {
            let src = node_shape(tape, *input);
            match axis {
                None => accumulate(tape, grads, *input, || g.broadcast_to(&src))?,
                Some(ax) => accumulate(tape, grads, *input, || expand_axis(&g, *ax, &src))?,
            }
        }
        Op::Broadcast { input } => {
            let src = node_shape(tape, *input);
            accumulate(tape, grads, *input, || reduce_to(g, &src))?;
        }
        Op::Reshape { input } => {
            let src = node_shape(tape, *input);
            accumulate(tape, grads, *input, || g.reshape(&src))?;
        }
        Op::GatherRows { input, indices } => {
            let rows = node_shape(tape, *input)[0];
            accumulate(tape, grads, *input, || g.scatter_add_rows(indices, rows))?;
        }
        Op::ScatterAddRows { input, indices } => {
            accumulate(tape, grads, *input, || g.gather_rows(indices))?;
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            for part in inputs {
                let extent = node_shape(tape, *part)[*axis];
                let off = offset;
                accumulate(tape, grads, *part, || g.narrow(*axis, off, extent))?;
                offset += extent;
            }
        }
        Op::Slice { input, axis, start, len } => {
            let src = node_shape(tape, *input);
            accumulate(tape, grads, *input, || {
                let mut parts: Vec<Var<'t>> = Vec::with_capacity(3);
                if *start > 0 {
                    let mut s = src.clone();
                    s[*axis] = *start;
                    parts.push(tape.constant(TensorData::zeros(&s)));
                }
                parts.push(g);
                let tail = src[*axis] - start - len;
                if tail > 0 {
                    let mut s = src.clone();
                    s[*axis] = tail;
                    parts.push(tape.constant(TensorData::zeros(&s)));
                }
                concat(&parts, *axis)
            })?;
        }
    }
    Ok(())
}

/// Inner product of a gradient list with fixed tensors:
/// `Σ_i ⟨grads[i], v[i]⟩` as a scalar node. The `v` enter as constants.
pub fn dot_with_data<'t>(grads: &[Var<'t>], v: &[TensorData]) -> Result<Var<'t>> {
    if grads.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "dot_with_data",
            lhs: vec![grads.len()],
            rhs: vec![v.len()],
        });
    }
    let first = grads.first().ok_or_else(|| Error::Domain {
        op: "dot_with_data",
        msg: "empty gradient list".into(),
    })?;
    let tape = first.tape;
    let mut total: Option<Var<'t>> = None;
    for (gi, vi) in grads.iter().zip(v) {
        if gi.shape() != vi.shape {
            return Err(Error::ShapeMismatch {
                op: "dot_with_data",
                lhs: gi.shape(),
                rhs: vi.shape.clone(),
            });
        }
        let c = tape.constant(vi.clone());
        let term = gi.dot(&c)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty by check above"))
}

/// Second-order mixed derivative–vector product:
/// `(∂²loss / ∂second ∂firstᵀ) · v`, evaluated via one re-differentiable
/// backward pass and one plain backward pass.
pub fn mixed_second_grad<'t>(
    loss: Var<'t>,
    first: &[Var<'t>],
    v: &[TensorData],
    second: &[Var<'t>],
) -> Result<Vec<TensorData>> {
    let g = grad(loss, first, true)?;
    let gv = dot_with_data(&g, v)?;
    let out = grad(gv, second, false)?;
    Ok(out.iter().map(Var::value).collect())
}

/// Curvature–vector product `H v` where `H` is the matrix of second
/// derivatives of `loss` in `params`.
pub fn hvp<'t>(loss: Var<'t>, params: &[Var<'t>], v: &[TensorData]) -> Result<Vec<TensorData>> {
    mixed_second_grad(loss, params, v, params)
}
