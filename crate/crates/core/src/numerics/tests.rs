use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_params, Sampling};
use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects `out` onto fixed random weights so every output entry matters.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(out), &mut rng);
    let w = g.constant(&w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

#[test]
fn linear_identity_and_hand_values() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let eye = g.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b0 = g.constant(&Tensor::zeros(&[2]));
    let y = g.linear(x, eye, Some(b0)).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0]);

    let x = g.constant(&Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
    let w = g.constant(&Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap());
    let b = g.constant(&Tensor::new(&[1], vec![0.5]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &[5.5]);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(&[2, 3]));
    let w = g.constant(&Tensor::zeros(&[4, 5]));
    match g.linear(x, w, None) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[3, 4], &mut rng));
    let w = store.add("w", random(&[4, 5], &mut rng));
    let b = store.add("b", random(&[5], &mut rng));
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.linear(x, w, Some(b))?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 3], &mut rng);
    for causal in [true, false] {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let k = g.constant(&Tensor::full(&[1, 3], 1.0));
        let y = g.depthwise_conv1d(xv, k, causal).unwrap();
        assert_eq!(g.value(y), x.data());
    }
}

#[test]
fn causal_conv_impulse_reads_kernel_reversed() {
    let (a, b, c) = (2.0, 3.0, 5.0);
    let mut x = Tensor::zeros(&[5, 1]);
    x.set(&[0, 0], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let k = g.constant(&Tensor::new(&[3, 1], vec![a, b, c]).unwrap());
    let y = g.depthwise_conv1d(xv, k, true).unwrap();
    // Direct evaluation of out[t] = Σ_j k[j] x[t - 2 + j].
    let mut oracle = [0.0; 5];
    for (t, o) in oracle.iter_mut().enumerate() {
        for (j, kj) in [a, b, c].iter().enumerate() {
            let src = t as isize - 2 + j as isize;
            if (0..5).contains(&src) {
                *o += kj * x.get(&[src as usize, 0]);
            }
        }
    }
    assert_eq!(g.value(y), &oracle);
    assert_eq!(&g.value(y)[..3], &[c, b, a]);
}

#[test]
fn conv_rejects_empty_kernel_and_allows_long_kernel() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::full(&[2, 1], 1.0));
    let k0 = g.constant(&Tensor::zeros(&[0, 1]));
    assert!(g.depthwise_conv1d(x, k0, true).is_err());
    let k5 = g.constant(&Tensor::full(&[5, 1], 1.0));
    let y = g.depthwise_conv1d(x, k5, true).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0]);
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for causal in [true, false] {
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[8, 4], &mut rng));
        let k = store.add("k", random(&[3, 4], &mut rng));
        let report = check_params(&mut store, Sampling::default(), |g, s| {
            let (x, k) = (g.param(s, x), g.param(s, k));
            let y = g.depthwise_conv1d(x, k, causal)?;
            Ok(readout(g, y, 30))
        })
        .unwrap();
        assert!(report.passes(1e-6), "causal={causal} {report:?}");
    }
}

#[test]
fn activation_values_at_zero() {
    let mut g = Graph::new();
    let z = g.constant(&Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    let si = g.silu(z);
    let ge = g.gelu(z);
    assert_eq!(g.scalar(s), 0.5);
    assert_eq!(g.scalar(si), 0.0);
    assert_eq!(g.scalar(ge), 0.0);
}

#[test]
fn activation_gradients_match_finite_differences() {
    for kind in [
        Activation::Silu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Softplus,
    ] {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(&[4], vec![-2.0, -0.1, 0.3, 4.0]).unwrap());
        let report = check_params(&mut store, Sampling::default(), |g, s| {
            let x = g.param(s, x);
            let y = g.activation(x, kind);
            Ok(readout(g, y, 4))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{kind:?}: {report:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(&Tensor::full(&[3], 1.0));
    let beta = g.constant(&Tensor::zeros(&[3]));
    let c = g.constant(&Tensor::full(&[1, 3], 7.0));
    let y = g.layer_norm(c, gamma, beta, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

    let gamma = g.constant(&Tensor::full(&[2], 1.0));
    let beta = g.constant(&Tensor::zeros(&[2]));
    let r = g.constant(&Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(r, gamma, beta, LAYER_NORM_EPS).unwrap();
    let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((g.value(y)[0] + scale).abs() < 1e-15);
    assert!((g.value(y)[1] - scale).abs() < 1e-15);
    assert!((1.0 - scale) < 1e-5);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[4, 6], &mut rng));
    let gamma = store.add("gamma", random(&[6], &mut rng));
    let beta = store.add("beta", random(&[6], &mut rng));
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        let (x, gm, bt) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let y = g.layer_norm(x, gm, bt, LAYER_NORM_EPS)?;
        Ok(readout(g, y, 6))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&[3, 4], &mut rng));
    let b = store.add("b", random(&[3, 2], &mut rng));
    let s = store.add("s", random(&[6], &mut rng));
    let k = store.add("k", random(&[1], &mut rng));
    let grid = store.add("grid", random(&[4, 4, 2], &mut rng));
    let report = check_params(&mut store, Sampling::default(), |g, st| {
        let a = g.param(st, a);
        let b = g.param(st, b);
        let s = g.param(st, s);
        let k = g.param(st, k);
        let grid = g.param(st, grid);
        let cat = g.concat_cols(&[a, b])?;
        let sc = g.scale_cols(cat, s)?;
        let rev = g.reverse_rows(sc);
        let rows = g.concat_rows(&[rev, sc])?;
        let sl = g.slice_rows(rows, 1, 4)?;
        let by = g.scale_by(k, sl)?;
        let m = g.mean_rows(by);
        let n = g.norm2(m);
        let sel = g.select(by, &[0, 5, 7, 23])?;
        let aff = g.affine_elementwise(sel, vec![1.0, -2.0, 0.5, 3.0], vec![0.1; 4])?;
        let cols = g.im2col(grid, 3)?;
        let patches = g.patchify(grid, 2)?;
        let t1 = readout(g, aff, 8);
        let t2 = readout(g, cols, 9);
        let t3 = readout(g, patches, 10);
        let sum = g.add(t1, t2)?;
        let sum = g.add(sum, t3)?;
        let sum = g.sub(sum, n)?;
        Ok(sum)
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn backward_requires_scalar_loss() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[2]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    assert!(matches!(g.backward(wv, &mut store), Err(Error::NotScalar(_))));
}

#[test]
fn backward_sum_of_linear_replicates_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(&[2, 3], vec![0.3; 6]).unwrap());
    let unused = store.add("unused", Tensor::zeros(&[2]));
    let mut g = Graph::new();
    let x = g.constant(&Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap());
    let wv = g.param(&store, w);
    let y = g.matmul(x, wv).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(
        store.get(w).grad().unwrap(),
        &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]
    );
    assert!(store.get(unused).grad().is_none());

    // A second sweep over the same tape accumulates.
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap()[0], 3.0);
    store.zero_grads();
    assert_eq!(store.get(w).grad().unwrap()[0], 0.0);
}

#[test]
fn injected_fault_breaks_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[3, 3], &mut rng));
    let run = |store: &mut ParamStore, fault: bool| {
        check_params(store, Sampling::default(), |g, s| {
            if fault {
                g.inject_adjoint_fault("silu");
            }
            let x = g.param(s, x);
            let y = g.silu(x);
            Ok(readout(g, y, 12))
        })
        .unwrap()
    };
    assert!(run(&mut store, false).passes(1e-6));
    assert!(!run(&mut store, true).passes(1e-6));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[16, 8], &mut rng);
    let w = random(&[8, 8], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(&x), g.constant(&w));
        let y = g.matmul(xv, wv).unwrap();
        let y = g.gelu(y);
        g.tensor(y)
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn sigmoid_and_softplus_ranges(x in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
        let s = kernels::sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!(kernels::softplus(x) > 0.0);
    }

    #[test]
    fn layer_norm_rows_are_centered(row in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
        let d = row.len();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(&[1, d], row).unwrap());
        let gamma = g.constant(&Tensor::full(&[d], 1.0));
        let beta = g.constant(&Tensor::zeros(&[d]));
        let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS).unwrap();
        let mean = g.value(y).iter().sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-9);
    }
}
