#![allow(dead_code)]

use lsa_autodiff::{finite_difference_gradient, max_relative_error, Bindings, ParamSet, Tape, Var};

pub const EPS: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;

/// Largest relative error between backward and central differences over
/// every trainable parameter, with the name of the worst parameter.
pub fn param_grad_error<F>(params: &ParamSet, mut loss: F) -> (f64, String)
where
    F: FnMut(&mut Tape, &Bindings) -> Var,
{
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = loss(&mut tape, &b);
    tape.backward(out).unwrap();
    let mut analytic = params.clone();
    analytic.collect_grads(&tape, &b);

    let mut worst = (0.0, String::new());
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let a = analytic.get(id).grad.clone().unwrap();
        let mut probe = params.clone();
        let numeric = finite_difference_gradient(
            |v| {
                probe.set_value(id, v.clone()).unwrap();
                let mut tape = Tape::new();
                let b = probe.bind_constant(&mut tape);
                let out = loss(&mut tape, &b);
                tape.value(out).data()[0]
            },
            &p.value,
            EPS,
        );
        let err = max_relative_error(a.data(), numeric.data(), FLOOR);
        if err > worst.0 {
            worst = (err, p.name.clone());
        }
    }
    worst
}

/// `sum(x * r)` for a fixed readout `r` of the same shape.
pub fn readout(tape: &mut Tape, x: Var, r: &lsa_autodiff::Tensor) -> Var {
    let r = tape.constant(r.clone());
    let prod = tape.mul(x, r).unwrap();
    tape.sum(prod).unwrap()
}
