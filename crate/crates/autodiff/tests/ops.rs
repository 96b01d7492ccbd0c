use lsa_autodiff::{
    finite_difference_gradient, max_relative_error, AdamW, AutodiffError, ParamGroup, ParamSet,
    Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks `build` against central differences through a random linear
/// readout `sum(out * r)`. Returns the largest relative error over all inputs.
fn grad_check<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let readout = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(&mut rng, tape.shape(out))
    };
    let evaluate = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(readout.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let r = tape.constant(readout.clone());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = finite_difference_gradient(
            |probe| {
                let mut values = inputs.to_vec();
                values[k] = probe.clone();
                evaluate(&values)
            },
            input,
            EPS,
        );
        worst = worst.max(max_relative_error(analytic.data(), numeric.data(), FLOOR));
    }
    worst
}

fn assert_grad_ok<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let err = grad_check(&inputs, seed, &build);
        assert!(err <= 1e-5, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradients() {
    assert_grad_ok("matmul", &[&[4, 3], &[3, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0]));
    let b = tape.leaf(Tensor::vector(vec![2.0]));
    let out = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0]);

    let d = 4;
    let parts: Vec<Var> = (0..3).map(|i| tape.leaf(Tensor::full(&[d], i as f64))).collect();
    let window = tape.concat(&parts, 0).unwrap();
    assert_eq!(tape.shape(window), &[3 * d]);

    let total = tape.sum(window).unwrap();
    tape.backward(total).unwrap();
    for p in &parts {
        assert!(tape.grad(*p).unwrap().data().iter().all(|g| *g == 1.0));
    }
}

#[test]
fn concat_errors() {
    let mut tape = Tape::new();
    assert_eq!(tape.concat(&[], 0).unwrap_err(), AutodiffError::EmptyConcat);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(tape.concat(&[a, b], 1).is_ok());
}

#[test]
fn concat_and_slice_gradients() {
    assert_grad_ok("concat axis 1", &[&[2, 3], &[2, 1], &[2, 2]], |t, v| {
        t.concat(v, 1).unwrap()
    });
    assert_grad_ok("concat axis 0", &[&[1, 3], &[2, 3]], |t, v| t.concat(v, 0).unwrap());
    assert_grad_ok("slice", &[&[3, 5]], |t, v| t.slice(v[0], 1, 1, 3).unwrap());
}

#[test]
fn scale_examples() {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let zero = tape.leaf(Tensor::scalar(0.0));
    let one = tape.leaf(Tensor::scalar(1.0));
    let a = tape.scale(t, zero).unwrap();
    let b = tape.scale(t, one).unwrap();
    assert_eq!(tape.value(a).data(), &[0.0, 0.0, 0.0]);
    assert_eq!(tape.value(b).data(), &[1.0, 2.0, 3.0]);

    let not_scalar = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
    assert!(matches!(
        tape.scale(t, not_scalar),
        Err(AutodiffError::NotScalar { .. })
    ));
}

#[test]
fn scale_gradient_wrt_scalar() {
    // grad_s of sum(s * [1, 2]) with upstream ones: 3, checked by differences.
    let t = Tensor::vector(vec![1.0, 2.0]);
    let s = Tensor::scalar(0.7);
    let mut tape = Tape::new();
    let tv = tape.leaf(t.clone());
    let sv = tape.leaf(s.clone());
    let out = tape.scale(tv, sv).unwrap();
    let total = tape.sum(out).unwrap();
    tape.backward(total).unwrap();
    let analytic = tape.grad(sv).unwrap().data()[0];
    let numeric = finite_difference_gradient(
        |probe| probe.data()[0] * 1.0 + probe.data()[0] * 2.0,
        &s,
        EPS,
    )
    .data()[0];
    assert!((analytic - 3.0).abs() < 1e-12);
    assert!((analytic - numeric).abs() < 1e-9);

    assert_grad_ok("scale", &[&[2, 3], &[1]], |t, v| t.scale(v[0], v[1]).unwrap());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let p = tape.softmax(v).unwrap();
    for x in tape.value(p).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    let v = tape.constant(Tensor::vector(vec![1e6, 0.0, 0.0]));
    let p = tape.softmax(v).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn softmax_masked_zeroes_masked_positions() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap());
    let p = tape.softmax_masked(v, Some(&[true, false, true])).unwrap();
    let data = tape.value(p).data();
    assert_eq!(data[1], 0.0);
    assert_eq!(data[4], 0.0);
    assert!((data[3] - 0.5).abs() < 1e-15);
    assert!((data[0] + data[2] - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_jacobian() {
    assert_grad_ok("softmax", &[&[5]], |t, v| t.softmax(v[0]).unwrap());
    assert_grad_ok("softmax rows", &[&[3, 4]], |t, v| t.softmax(v[0]).unwrap());
    assert_grad_ok("softmax masked", &[&[3, 4]], |t, v| {
        t.softmax_masked(v[0], Some(&[true, true, false, true])).unwrap()
    });
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
    let l = tape.cross_entropy(p, 0).unwrap();
    assert_eq!(tape.value(l).data(), &[0.0]);
    let clamped = tape.cross_entropy(p, 1).unwrap();
    assert!((tape.value(clamped).data()[0] - 1e-12f64.ln().abs()).abs() < 1e-9);

    let u = tape.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
    for gold in 0..3 {
        let l = tape.cross_entropy(u, gold).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-15);
    }
    assert!(matches!(
        tape.cross_entropy(u, 3),
        Err(AutodiffError::IndexOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gold = rng.random_range(0..3);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(logits.clone()));
        let p = tape.softmax(v).unwrap();
        let l = tape.cross_entropy(p, gold).unwrap();

        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let expected = -((logits[gold] - max).exp() / z).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
    }
    assert_grad_ok("softmax+ce", &[&[4]], |t, v| {
        let p = t.softmax(v[0]).unwrap();
        t.cross_entropy(p, 2).unwrap()
    });
}

#[test]
fn elementwise_and_norm_gradients() {
    assert_grad_ok("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap());
    assert_grad_ok("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap());
    assert_grad_ok("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap());
    assert_grad_ok("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap());
    assert_grad_ok("mul_row", &[&[3, 4], &[4]], |t, v| t.mul_row(v[0], v[1]).unwrap());
    assert_grad_ok("mul_const", &[&[5]], |t, v| t.mul_const(v[0], -1.7).unwrap());
    assert_grad_ok("scale_rows", &[&[3, 2]], |t, v| {
        t.scale_rows(v[0], &[1.0, 0.8, 0.25]).unwrap()
    });
    assert_grad_ok("transpose", &[&[2, 5]], |t, v| t.transpose(v[0]).unwrap());
    assert_grad_ok("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    assert_grad_ok("gelu", &[&[3, 3]], |t, v| t.gelu(v[0]).unwrap());
    assert_grad_ok("layer_norm", &[&[3, 6]], |t, v| t.layer_norm(v[0], 1e-5).unwrap());
    assert_grad_ok("gather", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 1, 1, 0]).unwrap());
    assert_grad_ok("sum", &[&[2, 2]], |t, v| t.sum(v[0]).unwrap());
}

#[test]
fn random_affine_chains_agree_with_differences() {
    assert_grad_ok("affine chain", &[&[2, 4], &[4, 3], &[3], &[3, 2]], |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let h = t.gelu(h).unwrap();
        t.matmul(h, v[3]).unwrap()
    });
}

#[test]
fn backward_identity_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.5));
    tape.backward(x).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.5));
    let y = tape.add(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        tape.backward(x),
        Err(AutodiffError::NotScalar { .. })
    ));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::StaleTape);
    assert_eq!(tape.sum(x).unwrap_err(), AutodiffError::StaleTape);

    let mut other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(1.0));
    assert_eq!(tape.add(z, y).unwrap_err(), AutodiffError::ForeignVar);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

/// The same function recorded with its two branches in opposite order.
#[test]
fn accumulation_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[3, 3]);
        let w1 = random_tensor(&mut rng, &[3, 3]);
        let w2 = random_tensor(&mut rng, &[3, 3]);
        let run = |first_branch_first: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let a = tape.constant(w1.clone());
            let b = tape.constant(w2.clone());
            let (p, q) = if first_branch_first {
                let p = tape.matmul(xv, a).unwrap();
                let p = tape.gelu(p).unwrap();
                let q = tape.matmul(xv, b).unwrap();
                let q = tape.softmax(q).unwrap();
                (p, q)
            } else {
                let q = tape.matmul(xv, b).unwrap();
                let q = tape.softmax(q).unwrap();
                let p = tape.matmul(xv, a).unwrap();
                let p = tape.gelu(p).unwrap();
                (p, q)
            };
            let m = tape.mul(p, q).unwrap();
            let s = tape.sum(m).unwrap();
            tape.backward(s).unwrap();
            tape.grad(xv).unwrap().clone()
        };
        assert!(run(true).max_abs_diff(&run(false)) <= 1e-10);
    }
}

#[test]
fn operations_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[3, 3]);
    let b = random_tensor(&mut rng, &[3, 3]);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let bv = tape.leaf(b.clone());
    let m = tape.matmul(av, bv).unwrap();
    let n = tape.layer_norm(m, 1e-5).unwrap();
    let s = tape.softmax(n).unwrap();
    let c = tape.concat(&[av, s], 0).unwrap();
    let total = tape.sum(c).unwrap();
    tape.backward(total).unwrap();
    assert_eq!(tape.value(av), &a);
    assert_eq!(tape.value(bv), &b);
}

#[test]
fn adamw_zero_grad_zero_decay_leaves_parameters() {
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::vector(vec![0.3, -1.2]), 0);
    params.get_mut(id).grad = Some(Tensor::zeros(&[2]));
    let mut opt = AdamW::new(vec![ParamGroup {
        name: "model".into(),
        lr: 0.1,
        weight_decay: 0.0,
    }]);
    opt.step(&mut params).unwrap();
    assert_eq!(params.value(id).data(), &[0.3, -1.2]);
}

#[test]
fn adamw_single_step_matches_hand_computation() {
    let (w0, g, lr, wd) = (0.5_f64, 0.2_f64, 0.01_f64, 0.1_f64);
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::scalar(w0), 0);
    params.get_mut(id).grad = Some(Tensor::scalar(g));
    let mut opt = AdamW::new(vec![ParamGroup {
        name: "model".into(),
        lr,
        weight_decay: wd,
    }]);
    opt.step(&mut params).unwrap();

    // m = 0.1 g, v = 0.001 g^2, bias-corrected m_hat = g, v_hat = g^2.
    let m_hat = (0.1 * g) / (1.0 - 0.9);
    let v_hat = (0.001 * g * g) / (1.0 - 0.999);
    let expected = w0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((params.value(id).data()[0] - expected).abs() < 1e-15);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_groups_step_with_their_own_rates() {
    let mut params = ParamSet::new();
    let w = params.add("encoder.w", Tensor::scalar(1.0), 0);
    let eta = params.add("eta_l", Tensor::scalar(1.0), 1);
    params.get_mut(w).grad = Some(Tensor::scalar(1.0));
    params.get_mut(eta).grad = Some(Tensor::scalar(1.0));
    let mut opt = AdamW::new(vec![
        ParamGroup {
            name: "model".into(),
            lr: 1e-3,
            weight_decay: 0.0,
        },
        ParamGroup {
            name: "eta".into(),
            lr: 0.01,
            weight_decay: 0.0,
        },
    ]);
    opt.step(&mut params).unwrap();
    // First Adam step moves each parameter by ~lr in the gradient direction.
    assert!((params.value(w).data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((params.value(eta).data()[0] - (1.0 - 0.01)).abs() < 1e-9);
}

#[test]
fn adamw_requires_gradients() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::scalar(1.0), 0);
    let mut opt = AdamW::new(vec![ParamGroup {
        name: "model".into(),
        lr: 0.1,
        weight_decay: 0.0,
    }]);
    assert_eq!(
        opt.step(&mut params).unwrap_err(),
        AutodiffError::MissingGrad("w".into())
    );
}

#[test]
fn frozen_parameters_bind_as_constants() {
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::vector(vec![1.0, 2.0]), 0);
    let f = params.add("f", Tensor::vector(vec![3.0, 4.0]), 0);
    params.set_trainable(f, false);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let y = tape.mul(b[w], b[f]).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    params.collect_grads(&tape, &b);
    assert_eq!(params.get(w).grad.as_ref().unwrap().data(), &[3.0, 4.0]);
    assert!(params.get(f).grad.is_none());
}
