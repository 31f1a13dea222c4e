//! Tape gradients against central finite differences.

use guidance_lab::{Tape, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;

/// Analytic and central-difference gradients of a scalar function of one tensor.
fn grads(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let analytic = tape.backward(&f(&leaf)).unwrap().wrt(&leaf).into_data();
    let numeric = (0..x.numel())
        .map(|i| {
            let shifted = |d: f64| {
                let mut y = x.clone();
                y.data_mut()[i] += d;
                f(&y).item().unwrap()
            };
            (shifted(H) - shifted(-H)) / (2.0 * H)
        })
        .collect();
    (analytic, numeric)
}

fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}

fn check(x: &Tensor, tol: f64, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let (a, n) = grads(x, f);
    let e = max_rel_err(&a, &n);
    assert!(e < tol, "rel err {e:e}\nanalytic {a:?}\nnumeric  {n:?}");
    e
}

fn vec_strategy(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Weighted sum turns any tensor-valued op into a scalar loss with a
/// non-trivial upstream gradient.
fn weighted(y: &Tensor, seed: f64) -> Tensor {
    let w: Vec<f64> = (0..y.numel()).map(|i| ((i as f64 + 1.0) * 0.37 + seed).sin()).collect();
    y.mul(&Tensor::new(y.shape().to_vec(), w).unwrap()).unwrap().sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn elementwise_binary_ops(a in vec_strategy(6, -2.0, 2.0), b in vec_strategy(6, 0.5, 2.0)) {
        let x = Tensor::new(vec![2, 3], a).unwrap();
        let other = Tensor::new(vec![2, 3], b).unwrap();
        check(&x, 1e-4, &|x| weighted(&x.add(&other).unwrap(), 0.1));
        check(&x, 1e-4, &|x| weighted(&x.sub(&other).unwrap(), 0.2));
        check(&x, 1e-4, &|x| weighted(&x.mul(&other).unwrap(), 0.3));
        check(&x, 1e-4, &|x| weighted(&x.div(&other).unwrap(), 0.4));
        // Second operand as the variable.
        check(&other, 1e-4, &|y| weighted(&x.detach().div(y).unwrap(), 0.5));
        check(&x, 1e-4, &|x| weighted(&x.mul(x).unwrap(), 0.6));
    }

    #[test]
    fn scalar_broadcast(a in vec_strategy(4, -2.0, 2.0), s in 0.5f64..3.0) {
        let x = Tensor::from_vec(a);
        let sc = Tensor::scalar(s);
        check(&x, 1e-4, &|x| weighted(&x.mul(&sc).unwrap(), 0.1));
        check(&sc, 1e-4, &|s| weighted(&x.detach().mul(s).unwrap(), 0.2));
        check(&sc, 1e-4, &|s| weighted(&x.detach().div(s).unwrap(), 0.3));
        check(&x, 1e-4, &|x| weighted(&x.mul_scalar(s).add_scalar(1.5).neg(), 0.4));
    }

    #[test]
    fn unary_ops(a in vec_strategy(5, -2.0, 2.0)) {
        let x = Tensor::from_vec(a.clone());
        check(&x, 1e-4, &|x| weighted(&x.square(), 0.1));
        check(&x, 1e-4, &|x| weighted(&x.exp(), 0.2));
        check(&x, 1e-4, &|x| weighted(&x.silu(), 0.3));
        check(&x, 1e-4, &|x| weighted(&x.softmax(), 0.4));
        let pos = Tensor::from_vec(a.iter().map(|v| v.abs() + 0.3).collect());
        check(&pos, 1e-4, &|x| weighted(&x.ln(), 0.5));
        // Keep relu inputs off the kink.
        let off = Tensor::from_vec(a.iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v }).collect());
        check(&off, 1e-4, &|x| weighted(&x.relu(), 0.6));
    }

    #[test]
    fn reductions_and_indexing(a in vec_strategy(12, -2.0, 2.0), b in vec_strategy(12, -2.0, 2.0)) {
        let x = Tensor::new(vec![4, 3], a).unwrap();
        let other = Tensor::new(vec![4, 3], b).unwrap();
        check(&x, 1e-4, &|x| x.sum().square());
        check(&x, 1e-4, &|x| x.mean().exp());
        check(&x, 1e-4, &|x| x.dot(&other).unwrap().square());
        check(&x, 1e-4, &|x| weighted(&x.reshape(&[3, 4]).unwrap().softmax(), 0.1));
        check(&x, 1e-4, &|x| x.index(5).unwrap().square());
        check(&x, 1e-4, &|x| weighted(&x.row(2).unwrap(), 0.2));
        check(&x, 1e-4, &|x| weighted(&x.gather_rows(&[3, 0, 3]).unwrap(), 0.3));
        let bias = Tensor::from_vec(vec![0.1, -0.4, 0.7]);
        check(&x, 1e-4, &|x| weighted(&x.add_bias(&bias).unwrap().silu(), 0.4));
        check(&bias, 1e-4, &|b| weighted(&x.detach().add_bias(b).unwrap().square(), 0.5));
    }

    #[test]
    fn matmul_3x3(a in vec_strategy(9, -2.0, 2.0), b in vec_strategy(9, -2.0, 2.0)) {
        let x = Tensor::new(vec![3, 3], a).unwrap();
        let y = Tensor::new(vec![3, 3], b).unwrap();
        check(&x, 1e-6, &|x| weighted(&x.matmul(&y).unwrap(), 0.1));
        check(&y, 1e-6, &|y| weighted(&x.detach().matmul(y).unwrap(), 0.2));
    }

    #[test]
    fn softmax_dot_value(a in vec_strategy(7, -3.0, 3.0), v in vec_strategy(7, -2.0, 2.0)) {
        let alpha = Tensor::from_vec(a);
        let v = Tensor::from_vec(v);
        check(&alpha, 1e-5, &|x| x.softmax().dot(&v).unwrap());
    }

    #[test]
    fn fan_out_accumulates(a in vec_strategy(3, -2.0, 2.0)) {
        // y = x·x + 3x uses x three times.
        let x = Tensor::from_vec(a.clone());
        let tape = Tape::new();
        let l = tape.leaf(&x);
        let y = l.mul(&l).unwrap().add(&l.mul_scalar(3.0)).unwrap().sum();
        let g = tape.backward(&y).unwrap().wrt(&l);
        for (gi, xi) in g.data().iter().zip(&a) {
            prop_assert!((gi - (2.0 * xi + 3.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn unreachable_leaf_gets_zero() {
    let tape = Tape::new();
    let a = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0]));
    let loss = a.square().sum();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&b).data(), &[0.0, 0.0]);
    assert!(tape.backward(&a).is_err());
}

#[test]
fn gradients_are_reproducible() {
    let run = || {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![3, 3], (0..9).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap());
        let mut h = a.clone();
        for _ in 0..10 {
            h = h.matmul(&a).unwrap().silu().softmax();
        }
        tape.backward(&h.sum().square()).unwrap().wrt(&a).into_data()
    };
    assert_eq!(run(), run());
}
