mod common;

use aurel_core::autodiff::{Tape, Var};
use aurel_core::gradcheck::{grad_check, grad_check_many, Probes};
use aurel_core::kernels;
use aurel_core::tensor::Tensor;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn conv_loss(tape: &mut Tape<f64>, v: &[Var], weights: &T64) -> aurel_core::Result<Var> {
    let y = tape.conv2d(v[0], v[1], v[2], (1, 1), (1, 1))?;
    let w = tape.constant(weights.clone());
    let z = tape.mul(y, w)?;
    tape.sum(z)
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut r = rng(11);
    for (cin, cout, h, w) in [(4, 3, 6, 6), (2, 5, 5, 7), (1, 1, 3, 3)] {
        let x = uniform(&[cin, h, w], -1.0, 1.0, &mut r);
        let k = uniform(&[cout, cin, 3, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[cout], -1.0, 1.0, &mut r);
        let g = uniform(&[cout, h, w], -1.0, 1.0, &mut r);
        let rep = grad_check_many(|t, v| conv_loss(t, v, &g), &[x, k, b], 1e-6, &Probes::All).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{cin}×{h}×{w}: {}", rep.max_rel_error);
    }
}

#[test]
fn strided_conv_matches_finite_differences() {
    let mut r = rng(12);
    let x = uniform(&[2, 7, 7], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[3], -1.0, 1.0, &mut r);
    let rep = grad_check_many(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], (2, 2), (1, 1))?;
            let s = t.mul(y, y)?;
            t.sum(s)
        },
        &[x, k, b],
        1e-6,
        &Probes::All,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
}

#[test]
fn grid_conv_matches_finite_differences() {
    let mut r = rng(13);
    let x = uniform(&[2, 8, 8], -1.0, 1.0, &mut r);
    let k = uniform(&[4, 3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let g = uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
    let rep = grad_check_many(
        |t, v| {
            let y = t.grid_conv2d(v[0], v[1], v[2], 2, (1, 1))?;
            let w = t.constant(g.clone());
            let z = t.mul(y, w)?;
            t.sum(z)
        },
        &[x, k, b],
        1e-6,
        &Probes::All,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
}

/// A random map with distinct entries whose gaps exceed the probe step.
fn tie_free(shape: &[usize], seed: u64) -> T64 {
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

#[test]
fn maxpool_matches_finite_differences() {
    for (seed, shape) in [(1, [3, 8, 8]), (2, [1, 4, 6]), (3, [2, 2, 2])] {
        let x = tie_free(&shape, seed);
        let g = uniform(&[shape[0], shape[1] / 2, shape[2] / 2], -1.0, 1.0, &mut rng(seed + 10));
        let err = grad_check(
            |t, v| {
                let y = t.maxpool2d(v)?;
                let w = t.constant(g.clone());
                let z = t.mul(y, w)?;
                t.sum(z)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{shape:?}: {err}");
    }
}

#[test]
fn global_average_pool_gradient_is_uniform() {
    for (c, h, w) in [(3, 4, 4), (1, 5, 3), (2, 1, 1)] {
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut rng(c as u64));
        let err = grad_check(
            |t, v| {
                let y = t.global_avg_pool(v)?;
                t.sum(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.global_avg_pool(v).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(v);
        assert!(g.data().iter().all(|&d| d == 1.0 / (h * w) as f64));
    }
}

#[test]
fn composite_ops_match_finite_differences() {
    let mut r = rng(21);
    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[4, 2], -1.0, 1.0, &mut r);
    let map = uniform(&[3, 3], -1.0, 1.0, &mut r);
    let feat = uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    let rep = grad_check_many(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let p = t.tanh(p)?;
            let s = t.sigmoid(v[2])?;
            let w = t.broadcast_mul_channelwise(s, v[3])?;
            let w = t.pad_replicate(w, 1, 1, 2)?;
            let gap = t.global_avg_pool(w)?;
            let c = t.clamp(gap, 0.01, 0.99)?;
            let c = t.affine(c, 0.5, 0.6)?;
            let l = t.log(c)?;
            let l = t.sum(l)?;
            let q = t.mean(p)?;
            t.add(l, q)
        },
        &[a, b, map, feat],
        1e-6,
        &Probes::All,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
}

#[test]
fn attention_loss_gradient_two_and_four_frames() {
    for (seed, t) in [(1, 2), (2, 4)] {
        let g = attention_gradient_check(seed, t, 6);
        assert!(g.max_rel_error < 1e-6, "seed {seed}: {}", g.max_rel_error);
    }
}

#[test]
fn relation_loss_gradient_through_stack() {
    let g = relation_gradient_check(5, 8);
    assert!(g.probes > 10_000);
    assert!(g.max_rel_error < 1e-6, "{}", g.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let y = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let zero = Tensor::zeros(&[3]);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = kernels::conv2d(&mix, &k, &zero, (1, 1), (1, 1)).unwrap();
        let cx = kernels::conv2d(&x, &k, &zero, (1, 1), (1, 1)).unwrap();
        let cy = kernels::conv2d(&y, &k, &zero, (1, 1), (1, 1)).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_round_trips(seed in any::<u64>(), n1 in 1usize..4, n2 in 1usize..4) {
        let mut r = rng(seed);
        let a = uniform(&[n1, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[n2, 3], -1.0, 1.0, &mut r);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        prop_assert_eq!(c.slice(0, 0..n1).unwrap(), a);
        prop_assert_eq!(c.slice(0, n1..n1 + n2).unwrap(), b);
    }
}
