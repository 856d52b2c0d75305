//! Finite-difference verification of every tape primitive.
//!
//! Each op is wrapped into a scalar function (a random-weighted sum of its
//! output so every output coordinate contributes) and swept with central
//! differences over >= 20 seeds.

use ifasnet_core::framing::{self, Window};
use ifasnet_core::tensor::tape::{Tape, Var};
use ifasnet_core::tensor::{check_gradients, Result, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Random-weighted sum so a non-scalar op output becomes a scalar loss with
/// dense sensitivity to every coordinate.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).numel();
    let shape = tape.shape(v).to_vec();
    let w = tape.leaf(&Tensor::rand_uniform(&shape, 0.5, 1.5, 9_000 + seed + n as u64));
    let prod = tape.mul(v, w)?;
    tape.sum_all(prod)
}

fn assert_op_grad<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, Var, u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let x = Tensor::rand_uniform(shape, lo, hi, 100 * seed + 7);
        let report = check_gradients(|tape, v| f(tape, v, seed), &x, H, TOL)
            .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(report.passed, "{name} seed {seed}: {report}");
    }
}

#[test]
fn grad_add_broadcast() {
    assert_op_grad("add", &[3, 4], -1.0, 1.0, |tape, v, seed| {
        let b = tape.param(&Tensor::rand_uniform(&[4], -1.0, 1.0, seed + 1));
        let y = tape.add(v, b)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_sub_broadcast() {
    assert_op_grad("sub", &[2, 3, 4], -1.0, 1.0, |tape, v, seed| {
        let b = tape.param(&Tensor::rand_uniform(&[3, 1], -1.0, 1.0, seed + 2));
        let y = tape.sub(v, b)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_mul_broadcast() {
    assert_op_grad("mul", &[3, 4], -1.0, 1.0, |tape, v, seed| {
        let b = tape.param(&Tensor::rand_uniform(&[3, 1], -1.0, 1.0, seed + 3));
        let y = tape.mul(v, b)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_div_broadcast() {
    // Denominator bounded away from zero.
    assert_op_grad("div", &[3, 4], -1.0, 1.0, |tape, v, seed| {
        let b = tape.param(&Tensor::rand_uniform(&[3, 1], 0.5, 2.0, seed + 4));
        let y = tape.div(v, b)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_div_denominator_side() {
    assert_op_grad("div (denominator)", &[3, 4], 0.5, 2.0, |tape, v, seed| {
        let a = tape.leaf(&Tensor::rand_uniform(&[3, 4], -1.0, 1.0, seed + 5));
        let y = tape.div(a, v)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_unary_activations() {
    assert_op_grad("neg", &[5], -2.0, 2.0, |tape, v, seed| {
        let y = tape.neg(v)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("tanh", &[5], -2.0, 2.0, |tape, v, seed| {
        let y = tape.tanh(v)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("sigmoid", &[5], -2.0, 2.0, |tape, v, seed| {
        let y = tape.sigmoid(v)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("ln", &[5], 0.2, 3.0, |tape, v, seed| {
        let y = tape.ln(v)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("sqrt", &[5], 0.2, 3.0, |tape, v, seed| {
        let y = tape.sqrt(v)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("scale", &[5], -2.0, 2.0, |tape, v, seed| {
        let y = tape.scale(v, -1.7)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("add_scalar", &[5], -2.0, 2.0, |tape, v, seed| {
        let y = tape.add_scalar(v, 0.3)?;
        weighted_sum(tape, y, seed)
    });
    // Inputs kept away from the clamp kink at 0.5.
    assert_op_grad("clamp_min (active)", &[5], 1.0, 2.0, |tape, v, seed| {
        let y = tape.clamp_min(v, 0.5)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("clamp_min (clamped)", &[5], -2.0, -1.0, |tape, v, seed| {
        let y = tape.clamp_min(v, 0.5)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_matmul_both_sides() {
    assert_op_grad("matmul (lhs)", &[3, 4], -1.0, 1.0, |tape, v, seed| {
        let b = tape.leaf(&Tensor::rand_uniform(&[4, 2], -1.0, 1.0, seed + 6));
        let y = tape.matmul(v, b)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("matmul (rhs)", &[4, 2], -1.0, 1.0, |tape, v, seed| {
        let a = tape.leaf(&Tensor::rand_uniform(&[3, 4], -1.0, 1.0, seed + 7));
        let y = tape.matmul(a, v)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_cross_corr_both_sides() {
    assert_op_grad("cross_corr (signal)", &[2, 12], -1.0, 1.0, |tape, v, seed| {
        let k = tape.leaf(&Tensor::rand_uniform(&[2, 5], -1.0, 1.0, seed + 8));
        let y = tape.cross_corr(v, k)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("cross_corr (kernel)", &[2, 5], -1.0, 1.0, |tape, v, seed| {
        let s = tape.leaf(&Tensor::rand_uniform(&[2, 12], -1.0, 1.0, seed + 9));
        let y = tape.cross_corr(s, v)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_reductions() {
    assert_op_grad("sum_all", &[3, 4], -1.0, 1.0, |tape, v, _| tape.sum_all(v));
    assert_op_grad("sum_axis keepdim", &[2, 3, 4], -1.0, 1.0, |tape, v, seed| {
        let y = tape.sum_axis(v, 1, true)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("sum_axis squeeze", &[2, 3, 4], -1.0, 1.0, |tape, v, seed| {
        let y = tape.sum_axis(v, 2, false)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("mean_axis", &[2, 3, 4], -1.0, 1.0, |tape, v, seed| {
        let y = tape.mean_axis(v, 0, false)?;
        weighted_sum(tape, y, seed)
    });
    // Inputs bounded away from the zero vector where the norm is non-smooth.
    assert_op_grad("l2_norm_axis", &[2, 3, 4], 0.3, 1.5, |tape, v, seed| {
        let y = tape.l2_norm_axis(v, 1)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_shape_movement() {
    assert_op_grad("reshape", &[2, 6], -1.0, 1.0, |tape, v, seed| {
        let y = tape.reshape(v, vec![3, 4])?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("permute", &[2, 3, 4], -1.0, 1.0, |tape, v, seed| {
        let y = tape.permute(v, &[2, 0, 1])?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("slice", &[2, 6], -1.0, 1.0, |tape, v, seed| {
        let y = tape.slice(v, 1, 1, 3)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("concat", &[2, 3], -1.0, 1.0, |tape, v, seed| {
        let other = tape.param(&Tensor::rand_uniform(&[2, 2], -1.0, 1.0, seed + 10));
        let y = tape.concat(&[v, other], 1)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("expand", &[2, 1, 3], -1.0, 1.0, |tape, v, seed| {
        let y = tape.expand(v, &[2, 4, 3])?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_overlap_add() {
    assert_op_grad("overlap_add hann", &[4, 8], -1.0, 1.0, |tape, v, seed| {
        let y = framing::overlap_add(tape, v, 4, Window::Hann, 18)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("overlap_add rect", &[3, 8], -1.0, 1.0, |tape, v, seed| {
        let y = framing::overlap_add(tape, v, 8, Window::Rect, 24)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_chunking() {
    assert_op_grad("segment_chunks", &[2, 10, 3], -1.0, 1.0, |tape, v, seed| {
        let y = tape.segment_chunks(v, 4, 2)?;
        weighted_sum(tape, y, seed)
    });
    assert_op_grad("merge_chunks", &[2, 5, 4, 3], -1.0, 1.0, |tape, v, seed| {
        let y = tape.merge_chunks(v, 2, 10)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn grad_feature_context_stack() {
    assert_op_grad("stack_feature_context", &[2, 6, 3], -1.0, 1.0, |tape, v, seed| {
        let y = framing::stack_feature_context(tape, v, 2)?;
        weighted_sum(tape, y, seed)
    });
}

#[test]
fn forward_is_deterministic() {
    // Identical inputs, identical tape program, bit-identical outputs.
    let run = || -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::rand_uniform(&[4, 6], -1.0, 1.0, 77));
        let w = tape.leaf(&Tensor::rand_uniform(&[6, 5], -1.0, 1.0, 78));
        let y = tape.matmul(x, w).unwrap();
        let z = tape.tanh(y).unwrap();
        let n = tape.l2_norm_axis(z, 1).unwrap();
        tape.value(n).data().to_vec()
    };
    assert_eq!(run(), run());
}
