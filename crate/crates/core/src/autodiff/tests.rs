use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a scalar function at `x`.
fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a.data()).max(norm(b.data())).max(1e-12)
}

/// Checks d(loss)/d(input i) for every input against central differences.
fn check_grads(inputs: &[Tensor], build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>, tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let f = |xi: &Tensor| {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| tape.constant(if j == i { xi.clone() } else { x.clone() }))
                .collect();
            build(&tape, &vars).item()
        };
        let numeric = numeric_grad(&f, x, 1e-5);
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "input {i}: relative error {err:e}");
    }
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn probe<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect()).unwrap();
    y.mul(tape.constant(w)).unwrap().sum()
}

#[test]
fn activation_fixed_points() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    assert_eq!(zero.tanh().item(), 0.0);
    assert_eq!(zero.sigmoid().item(), 0.5);
    assert_eq!(tape.constant(Tensor::scalar(-1.0)).relu().item(), 0.0);
}

#[test]
fn add_two_vectors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
    assert_eq!(y.value().data(), &[4.0, 6.0]);
    assert!(tape.elementwise(ElementwiseOp::Mul, a, None).is_err());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(a.add(b), Err(crate::TensorError::Shape(_))));
    let c = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(a.mul(c).is_err());
}

#[test]
fn broadcast_over_batch_axis() {
    let tape = Tape::new();
    let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.param(t(&[2], &[10.0, 20.0]));
    let y = b.add(a).unwrap();
    assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
    let grads = tape.backward(y.sum()).unwrap();
    assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_grads(
        &[random(&[3, 2, 2], &mut rng), random(&[2, 2], &mut rng)],
        &|tape, v| probe(tape, v[0].mul(v[1]).unwrap()),
        1e-6,
    );
}

#[test]
fn tanh_derivative_matches_finite_difference() {
    let x0 = 0.3;
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(x0));
    let grads = tape.backward(x.tanh()).unwrap();
    let analytic = grads.get(x).unwrap().data()[0];
    let h = 1e-5;
    let numeric = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
    assert!(((analytic - numeric) / numeric).abs() < 1e-6);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check_grads(std::slice::from_ref(&a), &|tape, v| probe(tape, v[0].tanh()), 1e-6);
    check_grads(std::slice::from_ref(&a), &|tape, v| probe(tape, v[0].sigmoid()), 1e-6);
    check_grads(std::slice::from_ref(&a), &|tape, v| probe(tape, v[0].relu()), 1e-6);
    check_grads(&[a.clone(), b.clone()], &|tape, v| probe(tape, v[0].add(v[1]).unwrap()), 1e-6);
    check_grads(&[a, b], &|tape, v| probe(tape, v[0].mul(v[1]).unwrap()), 1e-6);
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::new();
    let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = tape.constant(Tensor::eye(3)).matmul(tape.constant(x.clone())).unwrap();
    assert_eq!(y.value(), x);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    assert!(b.matmul(b).is_err());
}

#[test]
fn transpose_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&[2, 3], &mut rng);
    let tape = Tape::new();
    assert_eq!(tape.constant(a.clone()).transpose().unwrap().value().get(&[2, 1]), a.get(&[1, 2]));
    check_grads(&[a], &|tape, v| probe(tape, v[0].transpose().unwrap()), 1e-6);
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let grads = tape.backward(va.matmul(vb).unwrap().sum()).unwrap();
    let ga = grads.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = (0..2).map(|j| b.get(&[k, j])).sum();
            assert!((ga.get(&[i, k]) - expected).abs() < 1e-12);
        }
    }
    check_grads(&[a, b], &|_, v| v[0].matmul(v[1]).unwrap().sum(), 1e-6);
}

fn conv_1d(x: &[f64], kernel: &[f64], dilation: usize) -> Vec<f64> {
    let tape = Tape::new();
    let xv = tape.constant(t(&[1, 1, 1, x.len()], x));
    let kv = tape.constant(t(&[1, 1, kernel.len()], kernel));
    xv.conv_time_dilated_causal(kv, dilation).unwrap().value().into_data()
}

#[test]
fn causal_conv_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(conv_1d(&x, &[1.0], 1), x);
    assert_eq!(conv_1d(&x, &[1.0, 1.0], 1), [1.0, 3.0, 5.0, 7.0]);
    assert_eq!(conv_1d(&x, &[1.0, 1.0], 2), [1.0, 2.0, 4.0, 6.0]);
    // reach beyond the window only reads padding
    assert_eq!(conv_1d(&x, &[1.0, 1.0], 4), x);
}

#[test]
fn causal_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 2, 7], &mut rng);
    let k = random(&[2, 3, 3], &mut rng);
    check_grads(&[x, k], &|tape, v| probe(tape, v[0].conv_time_dilated_causal(v[1], 2).unwrap()), 1e-6);
}

#[test]
fn conv_1x1_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 2, 4], &mut rng);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv_1x1(tape.constant(Tensor::eye(3)), tape.constant(Tensor::zeros(&[3])))
        .unwrap();
    assert_eq!(y.value(), x);

    let x = t(&[1, 2, 1, 1], &[3.0, 4.0]);
    let y = tape
        .constant(x)
        .conv_1x1(tape.constant(t(&[1, 2], &[1.0, 1.0])), tape.constant(Tensor::zeros(&[1])))
        .unwrap();
    assert_eq!(y.value().data(), &[7.0]);

    let w = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.constant(Tensor::zeros(&[1, 3, 1, 1])).conv_1x1(w, b).is_err());
}

#[test]
fn conv_1x1_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 2, 4], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let b = random(&[4], &mut rng);
    check_grads(&[x, w, b], &|tape, v| probe(tape, v[0].conv_1x1(v[1], v[2]).unwrap()), 1e-5);
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[2, 2, 3, 4], &mut rng);
    let b = random(&[2, 3, 3, 4], &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    assert_eq!(concat_channels(&[va]).unwrap().value(), a);

    let y = concat_channels(&[va, vb]).unwrap();
    let yv = y.value();
    assert_eq!(yv.shape(), &[2, 5, 3, 4]);
    for bi in 0..2 {
        for c in 0..5 {
            for n in 0..3 {
                for w in 0..4 {
                    let expected = if c < 2 { a.get(&[bi, c, n, w]) } else { b.get(&[bi, c - 2, n, w]) };
                    assert_eq!(yv.get(&[bi, c, n, w]), expected);
                }
            }
        }
    }
    let grads = tape.backward(y.sum()).unwrap();
    assert_eq!(grads.get(va).unwrap(), &Tensor::ones(a.shape()));
    assert_eq!(grads.get(vb).unwrap(), &Tensor::ones(b.shape()));

    let bad = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
    assert!(concat_channels(&[va, bad]).is_err());
    assert!(concat_channels(&[]).is_err());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros(&[2, 2])).softmax_rows().unwrap();
    assert_eq!(y.value().data(), &[0.5; 4]);

    let y = tape.constant(t(&[1, 2], &[2f64.ln(), 0.0])).softmax_rows().unwrap().value();
    assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let base = t(&[2, 3], &[0.1, -2.0, 3.0, 0.5, 0.5, -1.0]);
    let mut shifted = base.clone();
    for v in &mut shifted.data_mut()[..3] {
        *v += 123.4;
    }
    let y0 = tape.constant(base).softmax_rows().unwrap().value();
    let y1 = tape.constant(shifted).softmax_rows().unwrap().value();
    assert!(y0.max_abs_diff(&y1) < 1e-12);

    let nan = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(nan.softmax_rows(), Err(crate::TensorError::NonFinite(_))));
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check_grads(&[random(&[4, 4], &mut rng)], &|tape, v| probe(tape, v[0].softmax_rows().unwrap()), 1e-6);
}

#[test]
fn flatten_is_row_major() {
    let x = Tensor::new(vec![1, 2, 3, 48], (0..288).map(f64::from).collect()).unwrap();
    let tape = Tape::new();
    let f = tape.constant(x.clone()).flatten().unwrap().value();
    assert_eq!(f.shape(), &[1, 288]);
    // element [0, c, n, w] lands at c*144 + n*48 + w
    assert_eq!(f.get(&[0, 144 + 2 * 48 + 5]), x.get(&[0, 1, 2, 5]));
    assert_eq!(f.data(), x.data());
}

#[test]
fn dense_identity_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[3, 4], &mut rng);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .dense(tape.constant(Tensor::eye(4)), tape.constant(Tensor::zeros(&[4])))
        .unwrap();
    assert_eq!(y.value(), x);

    let w = random(&[2, 4], &mut rng);
    let b = random(&[2], &mut rng);
    check_grads(&[x, w, b], &|tape, v| probe(tape, v[0].dense(v[1], v[2]).unwrap()), 1e-6);
}

#[test]
fn mse_examples_and_gradient() {
    let tape = Tape::new();
    let target = t(&[2], &[0.0, 2.0]);
    assert_eq!(tape.constant(target.clone()).mse_loss(&target).unwrap().item(), 0.0);
    let pred = tape.param(t(&[2], &[1.0, 1.0]));
    let loss = pred.mse_loss(&target).unwrap();
    assert_eq!(loss.item(), 1.0);
    let grads = tape.backward(loss).unwrap();
    // 2 (pred - target) / n
    assert_eq!(grads.get(pred).unwrap().data(), &[1.0, -1.0]);
    assert!(pred.mse_loss(&Tensor::zeros(&[3])).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target = random(&[3, 2], &mut rng);
    check_grads(&[random(&[3, 2], &mut rng)], &|_, v| v[0].mse_loss(&target).unwrap(), 1e-6);
}

#[test]
fn node_mix_and_selfloop_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 2, 3, 4], &mut rng);
    let adj = random(&[3, 3], &mut rng);
    check_grads(&[x, adj.clone()], &|tape, v| probe(tape, v[0].node_mix(v[1]).unwrap()), 1e-6);
    check_grads(
        &[adj, Tensor::scalar(0.7)],
        &|tape, v| probe(tape, v[0].add_scaled_identity(v[1]).unwrap()),
        1e-6,
    );
}

#[test]
fn reused_variable_accumulates_gradient() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -2.0]));
    // y = x*x + x  =>  dy/dx = 2x + 1
    let y = x.mul(x).unwrap().add(x).unwrap().sum();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let p = tape.param(Tensor::scalar(3.0));
    let grads = tape.backward(c.mul(p).unwrap()).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    assert!(tape.backward(p.add(p).unwrap().relu().add(c).unwrap()).is_ok());
    assert!(tape.backward(tape.param(Tensor::zeros(&[2]))).is_err());
}

fn long_chain_grads(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 3, 3, 8], &mut rng);
    let k = random(&[3, 3, 2], &mut rng);
    let w = random(&[3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let e = random(&[3, 3], &mut rng);
    let tape = Tape::new();
    let vars: Vec<Var> = [x, k, w, b, e].into_iter().map(|v| tape.param(v)).collect();
    let adj = vars[4].softmax_rows().unwrap();
    let mut h = vars[0];
    for d in [1, 2, 4] {
        let a = h.conv_time_dilated_causal(vars[1], d).unwrap().tanh();
        let g = h.conv_1x1(vars[2], vars[3]).unwrap().sigmoid();
        h = a.mul(g).unwrap().node_mix(adj).unwrap().add(h).unwrap().relu();
    }
    let loss = h.flatten().unwrap().mse_loss(&Tensor::zeros(&[2, 72])).unwrap();
    assert!(tape.len() > 20);
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect()
}

#[test]
fn long_chain_backward_is_deterministic() {
    let first = long_chain_grads(12);
    for _ in 0..3 {
        let again = long_chain_grads(12);
        for (a, b) in first.iter().zip(&again) {
            assert_eq!(a.data(), b.data());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn causal_conv_never_reads_the_future(
        seed in any::<u64>(),
        ks in 1usize..4,
        dilation in 1usize..4,
        width in 2usize..10,
        t0_frac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, 2, width], &mut rng);
        let k = random(&[2, 2, ks], &mut rng);
        let t0 = ((width as f64 * t0_frac) as usize).min(width - 1);
        let mut bumped = x.clone();
        for c in 0..2 {
            for n in 0..2 {
                let v = bumped.get(&[0, c, n, t0]);
                bumped.set(&[0, c, n, t0], v + 1.0);
            }
        }
        let tape = Tape::new();
        let kv = tape.constant(k);
        let y0 = tape.constant(x).conv_time_dilated_causal(kv, dilation).unwrap().value();
        let y1 = tape.constant(bumped).conv_time_dilated_causal(kv, dilation).unwrap().value();
        for c in 0..2 {
            for n in 0..2 {
                for t in 0..t0 {
                    prop_assert_eq!(y0.get(&[0, c, n, t]), y1.get(&[0, c, n, t]));
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 16)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(vec![4, 4], data).unwrap()).softmax_rows().unwrap().value();
        for row in y.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
