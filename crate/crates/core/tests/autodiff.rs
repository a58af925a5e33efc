//! Differentiation engine checks: forward arithmetic, error contracts,
//! first derivatives against central finite differences, and the
//! second-order products against independently computed curvature.

use rssl_core::autodiff::{concat, dot_with_data, grad, hvp, mixed_second_grad, Tape, TensorData, Var};
use rssl_core::Error;

fn td(shape: &[usize], data: &[f64]) -> TensorData {
    TensorData::new(shape.to_vec(), data.to_vec())
}

/// Deterministic irregular values in roughly [-1.3, 1.3].
fn pattern(len: usize, seed: f64) -> Vec<f64> {
    (0..len).map(|k| (seed + 1.7 * k as f64).sin() * 1.3).collect()
}

fn positive_pattern(len: usize, seed: f64) -> Vec<f64> {
    pattern(len, seed).into_iter().map(|v| 0.4 + v * v).collect()
}

/// `|a - b|` small in a relative sense, with an absolute guard near zero.
fn agree(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff < 1e-7 || diff / a.abs().max(b.abs()) < 1e-5
}

/// Weights a tensor with a fixed irregular pattern and sums, producing a
/// scalar that depends on every element.
fn mix<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let n = y.len();
    let c: Vec<f64> = (0..n).map(|k| 0.37 * ((k % 7) as f64 - 3.0) + 0.11).collect();
    let cv = tape.constant(TensorData::new(y.shape(), c));
    y.mul(&cv).unwrap().sum_all()
}

/// Compares reverse-mode gradients of `build` against central finite
/// differences in every coordinate of every input.
fn check_grad_impl<F>(build: F, inputs: &[TensorData])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&tape, &vars);
    let gs = grad(loss, &vars, false).unwrap();

    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let got = gs[i].value();
        assert_eq!(got.shape, input.shape, "gradient shape for input {i}");
        for j in 0..input.data.len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data[j] += delta;
                let t2 = Tape::new();
                let vs: Vec<Var<'_>> = shifted.iter().map(|t| t2.var(t.clone())).collect();
                build(&t2, &vs).scalar_value()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                agree(got.data[j], fd),
                "input {i} coord {j}: reverse-mode {} vs finite-difference {}",
                got.data[j],
                fd
            );
        }
    }
}

// ---------------------------------------------------------------------
// forward arithmetic
// ---------------------------------------------------------------------

#[test]
fn forward_values_match_hand_arithmetic() {
    let tape = Tape::new();
    let a = tape.var(td(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(td(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(a.matmul(&eye).unwrap().value().data, vec![1.0, 2.0, 3.0, 4.0]);

    let x = tape.var(td(&[2], &[0.0, 0.0]));
    assert_eq!(x.softmax(0).unwrap().value().data, vec![0.5, 0.5]);

    let z = tape.var(TensorData::scalar(0.0));
    assert_eq!(z.tanh().scalar_value(), 0.0);
    assert_eq!(tape.scalar(-3.0).relu().scalar_value(), 0.0);
    assert_eq!(tape.scalar(0.0).exp().scalar_value(), 1.0);
    assert_eq!(tape.scalar(1.0).log().unwrap().scalar_value(), 0.0);
    assert_eq!(tape.scalar(4.0).sqrt().unwrap().scalar_value(), 2.0);
    assert_eq!(tape.scalar(2.0).pow(3.0).unwrap().scalar_value(), 8.0);

    let m = tape.var(td(&[2], &[1.0, 5.0]));
    let n = tape.var(td(&[2], &[3.0, 2.0]));
    assert_eq!(m.maximum(&n).unwrap().value().data, vec![3.0, 5.0]);

    let v = tape.var(td(&[3], &[1.0, 2.0, 3.0]));
    let b = v.broadcast_to(&[2, 3]).unwrap();
    assert_eq!(b.value().data, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

    let g = tape.var(td(&[4, 1], &[10.0, 20.0, 30.0, 40.0]));
    let picked = g.gather_rows(&[3, 0, 3]).unwrap();
    assert_eq!(picked.value().data, vec![40.0, 10.0, 40.0]);

    let row = tape.var(td(&[1, 2], &[1.0, 2.0]));
    let row2 = tape.var(td(&[1, 2], &[3.0, 4.0]));
    let cat = concat(&[row, row2], 0).unwrap();
    assert_eq!(cat.value(), td(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(cat.narrow(0, 1, 1).unwrap().value().data, vec![3.0, 4.0]);

    let s = tape.var(td(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(s.sum(Some(0)).unwrap().value().data, vec![4.0, 6.0]);
    assert_eq!(s.sum(Some(1)).unwrap().value().data, vec![3.0, 7.0]);
    assert_eq!(s.sum(None).unwrap().scalar_value(), 10.0);
    assert_eq!(s.mean(None).unwrap().scalar_value(), 2.5);
    assert_eq!(s.transpose().unwrap().value().data, vec![1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let tape = Tape::new();
    let x = tape.var(td(&[3, 4], &pattern(12, 0.3)));
    let p = x.softmax(1).unwrap().value();
    for r in 0..3 {
        let s: f64 = p.data[r * 4..(r + 1) * 4].iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
    }

    let shifted = (x + 100.0).softmax(1).unwrap().value();
    for (a, b) in p.data.iter().zip(&shifted.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------
// error contracts
// ---------------------------------------------------------------------

#[test]
fn shape_and_domain_violations_are_rejected_with_both_shapes() {
    let tape = Tape::new();
    let a = tape.var(TensorData::zeros(&[2, 3]));
    let b = tape.var(TensorData::zeros(&[4, 2]));
    match a.matmul(&b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }

    let v = tape.var(TensorData::zeros(&[6]));
    assert!(matches!(v.reshape(&[4]), Err(Error::ShapeMismatch { .. })));

    let p = tape.var(TensorData::zeros(&[2]));
    let q = tape.var(TensorData::zeros(&[3]));
    assert!(matches!(p.add(&q), Err(Error::ShapeMismatch { .. })));

    let rows = tape.var(TensorData::zeros(&[4, 2]));
    match rows.gather_rows(&[1, 7]) {
        Err(Error::IndexOutOfBounds { index: 7, len: 4, .. }) => {}
        other => panic!("expected out-of-bounds, got {other:?}"),
    }

    assert!(matches!(tape.scalar(-1.0).log(), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(tape.scalar(-1.0).sqrt(), Err(Error::Domain { op: "sqrt", .. })));
    assert!(matches!(tape.scalar(-2.0).pow(0.5), Err(Error::Domain { op: "pow", .. })));
    assert!(matches!(tape.scalar(0.0).pow(-1.0), Err(Error::Domain { op: "pow", .. })));

    let num = tape.var(td(&[2], &[1.0, 1.0]));
    let den = tape.var(td(&[2], &[2.0, 0.0]));
    assert!(matches!(num.div(&den), Err(Error::Domain { op: "div", .. })));
}

#[test]
fn gradient_target_must_be_scalar() {
    let tape = Tape::new();
    let x = tape.var(td(&[2], &[1.0, 2.0]));
    match grad(x, &[x], false) {
        Err(Error::NonScalarGradTarget { shape }) => assert_eq!(shape, vec![2]),
        other => panic!("expected non-scalar rejection, got {other:?}"),
    }
}

// ---------------------------------------------------------------------
// first derivatives: worked examples
// ---------------------------------------------------------------------

#[test]
fn square_has_slope_two_x() {
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(3.0));
    let y = x.pow(2.0).unwrap();
    let g = grad(y, &[x], false).unwrap();
    assert_eq!(g[0].scalar_value(), 6.0);

    let x2 = tape.var(TensorData::scalar(3.0));
    let y2 = x2.mul(&x2).unwrap();
    let g2 = grad(y2, &[x2], false).unwrap();
    assert_eq!(g2[0].scalar_value(), 6.0);
}

#[test]
fn product_gradient_swaps_operands() {
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(2.0));
    let y = tape.var(TensorData::scalar(5.0));
    let g = grad(x.mul(&y).unwrap(), &[x, y], false).unwrap();
    assert_eq!(g[0].scalar_value(), 5.0);
    assert_eq!(g[1].scalar_value(), 2.0);
}

#[test]
fn softmax_total_mass_is_insensitive_to_logits() {
    let tape = Tape::new();
    let x = tape.var(td(&[4], &pattern(4, 1.1)));
    let total = x.softmax(0).unwrap().sum_all();
    let g = grad(total, &[x], false).unwrap();
    for v in g[0].value().data {
        assert!(v.abs() < 1e-12, "expected zero, got {v}");
    }
}

#[test]
fn unreachable_inputs_get_zero_gradients() {
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(2.0));
    let w = tape.var(td(&[3], &[1.0, 2.0, 3.0]));
    let y = x.mul(&x).unwrap();
    let g = grad(y, &[x, w], false).unwrap();
    assert_eq!(g[0].scalar_value(), 4.0);
    assert_eq!(g[1].value(), TensorData::zeros(&[3]));
}

#[test]
fn detach_blocks_gradient_flow() {
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(3.0));
    let y = x.mul(&x).unwrap().detach();
    let z = y.mul(&x).unwrap(); // z = detach(x^2) * x
    let g = grad(z, &[x], false).unwrap();
    assert_eq!(g[0].scalar_value(), 9.0, "only the direct factor differentiates");
}

// ---------------------------------------------------------------------
// first derivatives: every primitive against finite differences
// ---------------------------------------------------------------------

#[test]
fn elementwise_binary_gradients_match_finite_differences() {
    let a = td(&[2, 3], &pattern(6, 0.2));
    let b = td(&[2, 3], &positive_pattern(6, 2.9));
    check_grad_impl(|t, vs| mix(t, vs[0].add(&vs[1]).unwrap()), &[a.clone(), b.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].sub(&vs[1]).unwrap()), &[a.clone(), b.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].mul(&vs[1]).unwrap()), &[a.clone(), b.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].div(&vs[1]).unwrap()), &[a.clone(), b.clone()]);

    // Spread the operands so no pair sits near a tie, where the max is
    // not differentiable.
    let lo = td(&[5], &[-2.0, -1.0, 0.5, 1.5, 3.0]);
    let hi = td(&[5], &[-1.0, 1.0, -0.5, 2.5, 1.0]);
    check_grad_impl(|t, vs| mix(t, vs[0].maximum(&vs[1]).unwrap()), &[lo, hi]);
}

#[test]
fn elementwise_unary_gradients_match_finite_differences() {
    let x = td(&[2, 3], &pattern(6, 0.8));
    let pos = td(&[2, 3], &positive_pattern(6, 1.4));
    // Keep relu inputs away from the kink so the difference quotient is clean.
    let off_kink = td(&[5], &[-1.2, -0.4, 0.3, 0.9, 2.0]);

    check_grad_impl(|t, vs| mix(t, vs[0].neg()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].exp()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].tanh()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].relu()), &[off_kink]);
    check_grad_impl(|t, vs| mix(t, vs[0].log().unwrap()), &[pos.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].sqrt().unwrap()), &[pos.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].pow(2.5).unwrap()), &[pos.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].pow(3.0).unwrap()), &[x.clone()]);
}

#[test]
fn matmul_and_transpose_gradients_match_finite_differences() {
    let a = td(&[2, 3], &pattern(6, 0.5));
    let b = td(&[3, 4], &pattern(12, 1.9));
    check_grad_impl(|t, vs| mix(t, vs[0].matmul(&vs[1]).unwrap()), &[a.clone(), b]);
    check_grad_impl(|t, vs| mix(t, vs[0].transpose().unwrap()), &[a]);
}

#[test]
fn reduction_gradients_match_finite_differences() {
    let x = td(&[3, 4], &pattern(12, 2.2));
    check_grad_impl(|t, vs| vs[0].sum(None).unwrap(), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].sum(Some(0)).unwrap()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].sum(Some(1)).unwrap()), &[x.clone()]);
    check_grad_impl(|t, vs| vs[0].mean(None).unwrap(), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].mean(Some(1)).unwrap()), &[x]);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let x = td(&[3, 4], &pattern(12, 3.1));
    check_grad_impl(|t, vs| mix(t, vs[0].softmax(1).unwrap()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].softmax(0).unwrap()), &[x.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].log_softmax(1).unwrap()), &[x]);
    let v = td(&[5], &pattern(5, 4.0));
    check_grad_impl(|t, vs| mix(t, vs[0].softmax(0).unwrap()), &[v]);
}

#[test]
fn shape_movement_gradients_match_finite_differences() {
    let x = td(&[2, 3], &pattern(6, 5.5));
    check_grad_impl(|t, vs| mix(t, vs[0].reshape(&[3, 2]).unwrap()), &[x.clone()]);

    let row = td(&[3], &pattern(3, 6.1));
    check_grad_impl(|t, vs| mix(t, vs[0].broadcast_to(&[5, 3]).unwrap()), &[row]);
    let col = td(&[4, 1], &pattern(4, 6.8));
    check_grad_impl(|t, vs| mix(t, vs[0].broadcast_to(&[4, 3]).unwrap()), &[col]);
    let scalar = TensorData::scalar(0.7);
    check_grad_impl(|t, vs| mix(t, vs[0].broadcast_to(&[2, 2]).unwrap()), &[scalar]);
}

#[test]
fn gather_scatter_concat_slice_gradients_match_finite_differences() {
    let x = td(&[4, 2], &pattern(8, 7.3));
    // Duplicate index: contributions must accumulate.
    check_grad_impl(|t, vs| mix(t, vs[0].gather_rows(&[3, 1, 3]).unwrap()), &[x.clone()]);
    let src = td(&[3, 2], &pattern(6, 8.0));
    check_grad_impl(
        |t, vs| mix(t, vs[0].scatter_add_rows(&[2, 0, 2], 5).unwrap()),
        &[src],
    );

    let a = td(&[2, 3], &pattern(6, 8.8));
    let b = td(&[1, 3], &pattern(3, 9.4));
    check_grad_impl(
        |t, vs| mix(t, concat(&[vs[0], vs[1]], 0).unwrap()),
        &[a.clone(), b],
    );
    let c = td(&[2, 2], &pattern(4, 10.0));
    check_grad_impl(
        |t, vs| mix(t, concat(&[vs[0], vs[1]], 1).unwrap()),
        &[a.clone(), c],
    );
    check_grad_impl(|t, vs| mix(t, vs[0].narrow(0, 1, 1).unwrap()), &[a.clone()]);
    check_grad_impl(|t, vs| mix(t, vs[0].narrow(1, 1, 2).unwrap()), &[a]);
}

#[test]
fn composite_network_gradient_matches_finite_differences() {
    let x = td(&[3, 2], &pattern(6, 11.0));
    let w1 = td(&[2, 4], &pattern(8, 11.7));
    let w2 = td(&[4, 2], &pattern(8, 12.4));
    check_grad_impl(
        |t, vs| {
            let h = vs[0].matmul(&vs[1]).unwrap().tanh();
            let logits = h.matmul(&vs[2]).unwrap();
            mix(t, logits.log_softmax(1).unwrap())
        },
        &[x, w1, w2],
    );
}

// ---------------------------------------------------------------------
// second order
// ---------------------------------------------------------------------

#[test]
fn curvature_of_sum_of_squares_doubles_the_vector() {
    let tape = Tape::new();
    let x = tape.var(td(&[3], &[1.0, -2.0, 0.5]));
    let loss = x.mul(&x).unwrap().sum_all();
    let v = td(&[3], &[1.0, 1.0, 1.0]);
    let hv = hvp(loss, &[x], &[v]).unwrap();
    assert_eq!(hv[0].data, vec![2.0, 2.0, 2.0]);
}

#[test]
fn quadratic_form_curvature_reproduces_its_matrix() {
    // loss = 0.5 xᵀ A x with symmetric A, so the curvature product is A v.
    let a_data = {
        let raw = pattern(25, 13.0);
        let mut sym = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                sym[i * 5 + j] = 0.5 * (raw[i * 5 + j] + raw[j * 5 + i]);
            }
        }
        sym
    };
    let x0 = pattern(5, 14.2);
    let v0 = pattern(5, 15.1);

    let tape = Tape::new();
    let x = tape.var(td(&[5, 1], &x0));
    let a = tape.constant(td(&[5, 5], &a_data));
    let ax = a.matmul(&x).unwrap();
    let loss = x.transpose().unwrap().matmul(&ax).unwrap().sum_all() * 0.5;
    let hv = hvp(loss, &[x], &[td(&[5, 1], &v0)]).unwrap();

    // Independent oracle: multiply A v by hand.
    for i in 0..5 {
        let want: f64 = (0..5).map(|j| a_data[i * 5 + j] * v0[j]).sum();
        assert!(
            agree(hv[0].data[i], want),
            "row {i}: curvature product {} vs direct {}",
            hv[0].data[i],
            want
        );
    }
}

#[test]
fn curvature_product_matches_differenced_gradients_on_nonquadratic() {
    let x0 = pattern(4, 16.0);
    let v0 = pattern(4, 17.3);

    fn build<'t>(t: &'t Tape, xv: &[f64]) -> (Var<'t>, Var<'t>) {
        let x = t.var(td(&[4], xv));
        (x.tanh().mul(&x.tanh()).unwrap().sum_all(), x)
    }

    let tape = Tape::new();
    let (loss, x) = build(&tape, &x0);
    let hv = hvp(loss, &[x], &[td(&[4], &v0)]).unwrap();

    // Oracle: (∇f(x + h v) - ∇f(x - h v)) / 2h.
    let h = 1e-5;
    let grad_at = |xv: &[f64]| {
        let t2 = Tape::new();
        let (l, x) = build(&t2, xv);
        grad(l, &[x], false).unwrap()[0].value().data
    };
    let xp: Vec<f64> = x0.iter().zip(&v0).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x0.iter().zip(&v0).map(|(a, b)| a - h * b).collect();
    let (gp, gm) = (grad_at(&xp), grad_at(&xm));
    for i in 0..4 {
        let fd = (gp[i] - gm[i]) / (2.0 * h);
        assert!(agree(hv[0].data[i], fd), "coord {i}: {} vs {}", hv[0].data[i], fd);
    }
}

#[test]
fn mixed_second_derivative_of_weighted_square() {
    // loss = w * θ², so ∂²loss/∂w∂θ · v = 2 θ v.
    let tape = Tape::new();
    let theta = tape.var(TensorData::scalar(3.0));
    let w = tape.var(TensorData::scalar(0.7));
    let loss = w.mul(&theta.mul(&theta).unwrap()).unwrap();
    let m = mixed_second_grad(loss, &[theta], &[TensorData::scalar(1.0)], &[w]).unwrap();
    assert_eq!(m[0].scalar_value(), 6.0);
}

#[test]
fn mixed_second_derivative_is_zero_without_coupling() {
    let tape = Tape::new();
    let theta = tape.var(td(&[3], &[1.0, 2.0, 3.0]));
    let w = tape.var(td(&[2], &[0.5, 0.5]));
    let loss = theta.mul(&theta).unwrap().sum_all();
    let m = mixed_second_grad(loss, &[theta], &[td(&[3], &[1.0; 3])], &[w]).unwrap();
    assert_eq!(m[0], TensorData::zeros(&[2]));
}

#[test]
fn mixed_second_derivative_matches_differenced_gradients() {
    // loss(θ, w) = w₀ tanh(θ₀ θ₁) + w₁ θ₀²
    let theta0 = [0.6, -0.9];
    let w0 = [1.3, 0.4];
    let v0 = [0.8, -0.3];

    fn build<'t>(t: &'t Tape, th: &[f64], wv: &[f64]) -> (Var<'t>, Var<'t>, Var<'t>) {
        let theta = t.var(td(&[2], th));
        let w = t.var(td(&[2], wv));
        let t01 = theta.narrow(0, 0, 1).unwrap().mul(&theta.narrow(0, 1, 1).unwrap()).unwrap();
        let term1 = w.narrow(0, 0, 1).unwrap().mul(&t01.tanh()).unwrap();
        let sq = theta.narrow(0, 0, 1).unwrap().pow(2.0).unwrap();
        let term2 = w.narrow(0, 1, 1).unwrap().mul(&sq).unwrap();
        (term1.add(&term2).unwrap().sum_all(), theta, w)
    }

    let tape = Tape::new();
    let (loss, theta, w) = build(&tape, &theta0, &w0);
    let got = mixed_second_grad(loss, &[theta], &[td(&[2], &v0)], &[w]).unwrap();

    // Oracle: (∇_w loss(θ + h v) - ∇_w loss(θ - h v)) / 2h.
    let h = 1e-5;
    let grad_w = |th: &[f64]| {
        let t2 = Tape::new();
        let (l, _, w) = build(&t2, th, &w0);
        grad(l, &[w], false).unwrap()[0].value().data
    };
    let thp: Vec<f64> = theta0.iter().zip(&v0).map(|(a, b)| a + h * b).collect();
    let thm: Vec<f64> = theta0.iter().zip(&v0).map(|(a, b)| a - h * b).collect();
    let (gp, gm) = (grad_w(&thp), grad_w(&thm));
    for i in 0..2 {
        let fd = (gp[i] - gm[i]) / (2.0 * h);
        assert!(agree(got[0].data[i], fd), "coord {i}: {} vs {}", got[0].data[i], fd);
    }
}

#[test]
fn third_derivative_of_fourth_power() {
    // f = x⁴: f' = 4x³, f'' = 12x², f''' = 24x.
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(1.5));
    let f = x.pow(4.0).unwrap();
    let g1 = grad(f, &[x], true).unwrap()[0];
    assert!(agree(g1.scalar_value(), 4.0 * 1.5f64.powi(3)));
    let g2 = grad(g1, &[x], true).unwrap()[0];
    assert!(agree(g2.scalar_value(), 12.0 * 1.5f64.powi(2)));
    let g3 = grad(g2, &[x], false).unwrap()[0];
    assert!(agree(g3.scalar_value(), 24.0 * 1.5));
}

#[test]
fn tanh_second_derivative_closed_form() {
    // (tanh x)'' = -2 tanh(x) (1 - tanh²(x))
    let x0 = 0.4;
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(x0));
    let y = x.tanh();
    let g1 = grad(y, &[x], true).unwrap()[0];
    let g2 = grad(g1, &[x], false).unwrap()[0];
    let t = x0.tanh();
    assert!(agree(g2.scalar_value(), -2.0 * t * (1.0 - t * t)));
}

#[test]
fn gradients_without_create_graph_are_terminal() {
    let tape = Tape::new();
    let x = tape.var(TensorData::scalar(2.0));
    let y = x.mul(&x).unwrap();
    let g = grad(y, &[x], false).unwrap()[0];
    assert!(!g.requires_grad());
    // Differentiating a terminal value treats it as constant: zero comes back.
    let gg = grad(g.mul(&x).unwrap(), &[x], false).unwrap()[0];
    assert_eq!(gg.scalar_value(), g.scalar_value(), "only the explicit x factor remains");
}

#[test]
fn dot_with_data_validates_shapes() {
    let tape = Tape::new();
    let g = tape.var(td(&[2], &[1.0, 2.0]));
    let err = dot_with_data(&[g], &[td(&[3], &[0.0; 3])]);
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    let ok = dot_with_data(&[g], &[td(&[2], &[3.0, 4.0])]).unwrap();
    assert_eq!(ok.scalar_value(), 11.0);
}

// ---------------------------------------------------------------------
// tape mechanics
// ---------------------------------------------------------------------

#[test]
fn truncation_reclaims_everything_after_the_mark() {
    let tape = Tape::new();
    let x = tape.var(td(&[2], &[1.0, 2.0]));
    let kept = x.mul(&x).unwrap();
    let mark = tape.mark();
    for _ in 0..10 {
        let _ = kept.exp().sum_all();
    }
    assert!(tape.len() > mark);
    tape.truncate(mark);
    assert_eq!(tape.len(), mark);
    // Nodes at or before the mark stay usable.
    assert_eq!(kept.value().data, vec![1.0, 4.0]);
    let again = kept.sum_all();
    assert_eq!(again.scalar_value(), 5.0);
}

#[test]
fn replaying_identical_programs_is_bit_identical() {
    let run = || {
        let tape = Tape::new();
        let x = tape.var(td(&[3, 3], &pattern(9, 20.0)));
        let w = tape.var(td(&[3, 3], &pattern(9, 21.0)));
        let loss = x.matmul(&w).unwrap().tanh().softmax(1).unwrap().sum_all();
        let g = grad(loss, &[x, w], false).unwrap();
        let mut bits = Vec::new();
        for gi in g {
            bits.extend(gi.value().data.iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}
