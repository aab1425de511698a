use proptest::prelude::*;
use proptest_tensor_helpers::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use proptree_tensor::gradcheck::check_gradients;
use proptree_tensor::{Result, Tape, Tensor, Var};

mod proptest_tensor_helpers {
    use super::*;

    pub fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    pub fn positive(shape: &[usize], seed: u64) -> Tensor {
        random(shape, seed).map(|x| 0.5 + x.abs())
    }

    /// Weighted readout so that gradients are not all identical.
    pub fn readout(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let w = tape.constant(random(tape.shape(v), seed ^ 0xabcdef));
        let p = tape.mul(v, w)?;
        tape.sum(p)
    }
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(
        report.passes(TOL),
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn matmul_gradient() {
    assert_grad(&[random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        readout(t, y, 3)
    });
}

#[test]
fn broadcast_arithmetic_gradients() {
    assert_grad(&[random(&[2, 3, 4], 4), random(&[3, 4], 5)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[1])?;
        let c = t.sub(b, v[1])?;
        let d = t.scale(c, -0.7)?;
        readout(t, d, 6)
    });
}

#[test]
fn elementwise_nonlinearity_gradients() {
    assert_grad(&[random(&[5], 7)], |t, v| {
        let a = t.tanh(v[0])?;
        let b = t.sigmoid(v[0])?;
        let c = t.exp(a)?;
        let d = t.mul(b, c)?;
        readout(t, d, 8)
    });
    assert_grad(&[positive(&[4], 9)], |t, v| {
        let a = t.log(v[0])?;
        readout(t, a, 10)
    });
}

#[test]
fn softmax_gradients_on_every_axis() {
    for axis in 0..3 {
        assert_grad(&[random(&[2, 3, 4], 11 + axis as u64)], move |t, v| {
            let a = t.softmax(v[0], axis)?;
            let b = t.log_softmax(v[0], axis)?;
            let c = t.add(a, b)?;
            readout(t, c, 12)
        });
    }
}

#[test]
fn structural_op_gradients() {
    assert_grad(&[random(&[3, 4], 13), random(&[3, 2], 14)], |t, v| {
        let c = t.concat(&[v[0], v[1], v[0]], 1)?;
        let s = t.slice(c, 1, 2, 7)?;
        let r = t.reshape(s, &[5, 3])?;
        let p = t.transpose(r)?;
        let q = t.sum_axis(p, 0)?;
        readout(t, q, 15)
    });
    assert_grad(&[random(&[2, 3, 4], 16)], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let s = t.sum_axis(p, 2)?;
        let g = t.gather(s, &[0, 3, 3, 7])?;
        readout(t, g, 17)
    });
    assert_grad(&[random(&[3, 4], 18), random(&[2, 4], 19)], |t, v| {
        let p = t.pairwise_add(v[0], v[1])?;
        let q = t.tanh(p)?;
        readout(t, q, 20)
    });
}

#[test]
fn mask_gradient() {
    let mask = Tensor::new(vec![4], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
    assert_grad(&[random(&[4], 21)], move |t, v| {
        let m = t.apply_mask(v[0], mask.clone())?;
        readout(t, m, 22)
    });
}

/// Random three-layer perceptron: tanh(sigmoid(tanh(x W1 + b1) W2 + b2) W3).
#[test]
fn random_three_layer_composites() {
    for seed in 0..10u64 {
        let inputs = [
            random(&[2, 3], seed * 7 + 1),
            random(&[3, 4], seed * 7 + 2),
            random(&[4], seed * 7 + 3),
            random(&[4, 4], seed * 7 + 4),
            random(&[4], seed * 7 + 5),
            random(&[4, 2], seed * 7 + 6),
        ];
        assert_grad(&inputs, move |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h)?;
            let h = t.matmul(h, v[3])?;
            let h = t.add(h, v[4])?;
            let h = t.sigmoid(h)?;
            let h = t.matmul(h, v[5])?;
            let h = t.tanh(h)?;
            let h = t.log_softmax(h, 1)?;
            readout(t, h, seed)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let sums = tape.sum_axis(y, axis).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
        for s in tape.value(sums).data() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_and_backward_stay_finite(values in prop::collection::vec(-30.0f64..30.0, 6)) {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2, 3], values).unwrap());
        let a = tape.log_softmax(x, 1).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.value(s).is_finite());
        prop_assert!(tape.grad(x).unwrap().is_finite());
    }
}
