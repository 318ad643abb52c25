mod common;

use common::{end_to_end_grad_error, numeric_grad, rel_err};
use posattn::model::AttentionKind;
use posattn::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Checks d(sum(w * f(x)))/dx for a fixed random weighting `w`.
fn check_unary(shape: &[usize], f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().sum::<usize>() as u64);
    let x = random(&mut rng, shape);
    let mut t = Tape::new();
    let probe = t.constant(x.clone());
    let out = f(&mut t, probe);
    let out_shape = t.value(out).shape().to_vec();
    let w = random(&mut rng, &out_shape);

    let scalar = |t: &mut Tape, v: Var| {
        let wv = t.constant(w.clone());
        let y = f(t, v);
        let p = t.mul(y, wv).unwrap();
        t.sum(p).unwrap()
    };
    let mut t = Tape::new();
    let leaf = t.leaf(x.clone().with_grad(true));
    let loss = scalar(&mut t, leaf);
    t.backward(loss).unwrap();
    let analytic = t.grad(leaf).unwrap().to_vec();
    let numeric = numeric_grad(
        |d| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(shape.to_vec(), d.to_vec()).unwrap());
            let l = scalar(&mut t, v);
            t.value(l).data()[0]
        },
        x.data(),
        1e-5,
    );
    rel_err(&analytic, &numeric)
}

const TOL: f64 = 1e-7;

#[test]
fn matmul_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&mut rng, &[4, 3]);
    assert!(check_unary(&[2, 5, 4], |t, x| {
        let w = t.constant(w.clone());
        t.matmul(x, w).unwrap()
    }) < TOL);
    let a = random(&mut rng, &[7, 4]);
    assert!(check_unary(&[4, 3], |t, x| {
        let a = t.constant(a.clone());
        t.matmul(a, x).unwrap()
    }) < TOL);
}

#[test]
fn batched_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random(&mut rng, &[3, 4, 2]);
    let shared = random(&mut rng, &[5, 4]);
    assert!(check_unary(&[3, 5, 4], |t, x| {
        let b = t.constant(b.clone());
        t.bmm(x, b).unwrap()
    }) < TOL);
    assert!(check_unary(&[3, 4, 2], |t, x| {
        let a = t.constant(shared.clone());
        t.bmm(a, x).unwrap()
    }) < TOL);
    assert!(check_unary(&[5, 4], |t, x| {
        let b = t.constant(b.clone());
        t.bmm(x, b).unwrap()
    }) < TOL);
    let k = random(&mut rng, &[3, 6, 4]);
    assert!(check_unary(&[3, 5, 4], |t, x| {
        let k = t.constant(k.clone());
        t.bmm_nt(x, k).unwrap()
    }) < TOL);
    let q = random(&mut rng, &[3, 5, 4]);
    assert!(check_unary(&[3, 6, 4], |t, x| {
        let q = t.constant(q.clone());
        t.bmm_nt(q, x).unwrap()
    }) < TOL);
}

#[test]
fn softmax_relu_and_elementwise() {
    assert!(check_unary(&[4, 6], |t, x| t.softmax(x).unwrap()) < TOL);
    assert!(check_unary(&[4, 6], |t, x| t.relu(x).unwrap()) < TOL);
    assert!(check_unary(&[3, 3], |t, x| t.mul(x, x).unwrap()) < TOL);
    assert!(check_unary(&[3, 3], |t, x| {
        let y = t.scale(x, -2.5).unwrap();
        let z = t.add(x, y).unwrap();
        t.sub(z, x).unwrap()
    }) < TOL);
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let other = random(&mut rng, &[2, 3, 2]);
    assert!(check_unary(&[2, 3, 4], |t, x| {
        let o = t.constant(other.clone());
        t.concat(&[o, x, o]).unwrap()
    }) < TOL);
    assert!(check_unary(&[2, 3, 4], |t, x| t.slice_last(x, 1, 3).unwrap()) < TOL);
    assert!(check_unary(&[2, 5, 4], |t, x| t.slice_rows(x, 1, 4).unwrap()) < TOL);
    assert!(check_unary(&[2, 3, 4], |t, x| t.reshape(x, &[6, 4]).unwrap()) < TOL);
    assert!(check_unary(&[5, 3], |t, x| t.transpose(x).unwrap()) < TOL);
    assert!(check_unary(&[2, 4, 6], |t, x| t.rope(x, &[0, 3, 1, 7]).unwrap()) < TOL);
}

#[test]
fn bias_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4, 5]);
    assert!(check_unary(&[5], |t, b| {
        let x = t.constant(x.clone());
        t.add_bias(x, b).unwrap()
    }) < TOL);
    let target: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    assert!(check_unary(&[3, 4], |t, x| t.masked_mse(x, &target, Some(&mask)).unwrap()) < TOL);
}

#[test]
fn end_to_end_small_models() {
    for kind in [AttentionKind::Positional, AttentionKind::SelfAttention, AttentionKind::SelfRope] {
        let err = end_to_end_grad_error(kind, 3, 2, 2, 11);
        assert!(err < 1e-5, "{kind}: {err}");
    }
}
