mod common;

use common::{
    block_input_gradient_error, composed_gradient_errors, primitive_gradient_errors, rng, uniform, GRAD_TOLERANCE,
};
use metsk::autodiff::{Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, worst) in primitive_gradient_errors(11, 10) {
        assert!(worst < GRAD_TOLERANCE, "{name}: relative error {worst:e}");
    }
}

#[test]
fn composed_model_matches_finite_differences() {
    for seed in 0..3 {
        for (name, worst) in composed_gradient_errors(seed) {
            assert!(worst < GRAD_TOLERANCE, "seed {seed}, {name}: relative error {worst:e}");
        }
        let e = block_input_gradient_error(seed);
        assert!(e < GRAD_TOLERANCE, "seed {seed}, block input: {e:e}");
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut r = rng(5);
    let x0 = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2], -1.0, 1.0, &mut r);
    let f = |tape: &Tape, x| -> metsk::Result<_> {
        let c = tape.constant(w.clone());
        let h = tape.matmul(x, c)?;
        let a = tape.exp(h)?;
        let b = tape.relu(h)?;
        let sa = tape.sum(a)?;
        let sb = tape.mean(b)?;
        Ok((sa, sb))
    };
    let grad = |pick: u8| -> Tensor {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let (sa, sb) = f(&tape, x).unwrap();
        let root = match pick {
            0 => sa,
            1 => sb,
            _ => tape.add(sa, sb).unwrap(),
        };
        tape.backward(root).unwrap().wrt(x)
    };
    let (ga, gb, gs) = (grad(0), grad(1), grad(2));
    for i in 0..gs.len() {
        let sum = ga.data()[i] + gb.data()[i];
        assert!((gs.data()[i] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
    }
}

#[test]
fn forward_and_backward_are_bitwise_repeatable() {
    let run = || {
        let point = common::composed_point(3);
        let tape = Tape::new();
        let ext = point.params.bind_extractor(&tape, true);
        let head = point.params.target_head.bind(&tape, true);
        let x = tape.constant(point.x1.clone());
        let g = tape.constant(point.graphs.clone());
        let h = metsk::model::extractor_forward(&tape, x, g, &ext).unwrap();
        let logits = metsk::model::head_forward(&tape, h, g, &head).unwrap();
        let loss = metsk::losses::cross_entropy_loss(&tape, logits, &point.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut bits: Vec<u64> = vec![tape.value(loss).item().unwrap().to_bits()];
        for b in &ext {
            for v in b.vars() {
                bits.extend(grads.wrt(v).data().iter().map(|x| x.to_bits()));
            }
        }
        bits
    };
    assert_eq!(run(), run());
}
