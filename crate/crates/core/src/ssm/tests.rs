use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scan::{scan_sequential, ScanInputs};
use super::*;
use crate::numerics::gradcheck::{check_params, Sampling};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_params(rng: &mut ChaCha8Rng, e: usize, n: usize) -> SsmParams {
    SsmParams {
        a_log: rand_tensor(rng, &[e, n], -1.0, 1.5),
        w_b: rand_tensor(rng, &[e, n], -1.0, 1.0),
        w_c: rand_tensor(rng, &[e, n], -1.0, 1.0),
        w_delta: rand_tensor(rng, &[e], -1.0, 1.0),
        b_delta: rand_tensor(rng, &[e], -1.0, 0.5),
        d_skip: rand_tensor(rng, &[e], -1.0, 1.0),
    }
}

/// Direct triple loop over the raw parameters, sharing no code with the kernels.
fn naive_scan(x: &Tensor, p: &SsmParams, bias: Option<&Tensor>) -> Vec<f64> {
    let (l, e) = (x.shape()[0], x.shape()[1]);
    let n = p.a_log.shape()[1];
    let mut h = vec![vec![0.0; n]; e];
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        let xt = |d: usize| x.get(&[t, d]);
        let proj = |w: &Tensor, k: usize| (0..e).map(|d| xt(d) * w.get(&[d, k])).sum::<f64>();
        let b: Vec<f64> = (0..n).map(|k| proj(&p.w_b, k)).collect();
        let c: Vec<f64> = (0..n).map(|k| proj(&p.w_c, k)).collect();
        for d in 0..e {
            let z = xt(d) * p.w_delta.data()[d] + p.b_delta.data()[d];
            let delta = if z > 30.0 { z } else { (1.0 + z.exp()).ln() };
            let mut out = p.d_skip.data()[d] * xt(d);
            for k in 0..n {
                let shift = bias.map_or(0.0, |b| b.data()[d]);
                let a = (-p.a_log.get(&[d, k]).exp() + shift).min(-1e-4);
                h[d][k] = (delta * a).exp() * h[d][k] + delta * b[k] * xt(d);
                out += c[k] * h[d][k];
            }
            y[t * e + d] = out;
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sequential_scan_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let (l, e, n) = (rng.random_range(1..40), rng.random_range(1..9), rng.random_range(1..6));
        let p = random_params(&mut rng, e, n);
        let x = rand_tensor(&mut rng, &[l, e], -2.0, 2.0);
        let bias = (trial % 2 == 0).then(|| rand_tensor(&mut rng, &[e], -0.5, 1.5));
        let got = selective_scan_sequential(&x, &p, bias.as_ref()).unwrap();
        let want = naive_scan(&x, &p, bias.as_ref());
        assert!(max_diff(got.data(), &want) < 1e-12, "trial {trial}");
    }
}

#[test]
fn chunked_matches_sequential_for_every_chunk_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, e, n) = (37, 5, 3);
    let p = random_params(&mut rng, e, n);
    let x = rand_tensor(&mut rng, &[l, e], -1.5, 1.5);
    let bias = rand_tensor(&mut rng, &[e], 0.0, 1.0);
    let seq = selective_scan_sequential(&x, &p, Some(&bias)).unwrap();
    for chunk in [1, 2, 3, 7, 16, 36, 37, 64] {
        let ch = selective_scan_chunked(&x, &p, Some(&bias), chunk).unwrap();
        assert!(seq.max_abs_diff(&ch) < 1e-10, "chunk {chunk}");
    }
    assert!(selective_scan_chunked(&x, &p, None, 0).is_err());
}

#[test]
fn single_token_reduces_to_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(&mut rng, 3, 2);
    let x = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
    let inp = ScanInputs::prepare(&x, &p, None).unwrap();
    let y = scan_sequential(&inp).unwrap();
    for d in 0..3 {
        let want: f64 = (0..2)
            .map(|k| inp.c[k] * inp.delta[d] * inp.b[k] * inp.x[d])
            .sum::<f64>()
            + inp.d_skip[d] * inp.x[d];
        assert!((y[d] - want).abs() < 1e-15);
    }
}

#[test]
fn frozen_step_matches_convolution_form() {
    // w_delta = 0 makes the step constant, so the scan is a linear
    // time-invariant filter: y_t = Σ_{s≤t} Σ_n C_t[n] e^{ΔA(t-s)} Δ B_s[n] x_s + D x_t.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, e, n) = (25, 3, 4);
    let mut p = random_params(&mut rng, e, n);
    p.w_delta = Tensor::zeros(&[e]);
    let x = rand_tensor(&mut rng, &[l, e], -1.0, 1.0);
    let inp = ScanInputs::prepare(&x, &p, None).unwrap();
    let y = scan_sequential(&inp).unwrap();
    for t in 0..l {
        for d in 0..e {
            let dt = inp.delta[d];
            let mut want = inp.d_skip[d] * inp.x[t * e + d];
            for s in 0..=t {
                for k in 0..n {
                    let decay = (dt * inp.a[d * n + k] * (t - s) as f64).exp();
                    want += inp.c[t * n + k] * decay * dt * inp.b[s * n + k] * inp.x[s * e + d];
                }
            }
            assert!((y[t * e + d] - want).abs() < 1e-11, "t {t} d {d}");
        }
    }
}

#[test]
fn composed_transition_is_clamped() {
    let a = compose_transition(&[0.0, 1.0_f64.ln(), 2.0_f64.ln()], 3, Some(&[5.0]));
    assert!(a.iter().all(|&v| v == -A_CLAMP));
    let a = compose_transition(&[0.0, 3.0_f64.ln()], 2, Some(&[0.5]));
    assert!((a[0] + 0.5).abs() < 1e-15 && (a[1] + 2.5).abs() < 1e-15);
    let a = compose_transition(&[2.0_f64.ln()], 1, None);
    assert!((a[0] + 2.0).abs() < 1e-15);
}

#[test]
fn long_sequences_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, e, n) = (10_000, 4, 4);
    let p = SsmParams::init(e, n, &mut rng);
    let x = rand_tensor(&mut rng, &[l, e], -1.0, 1.0);
    let bias = Tensor::full(&[e], 0.99);
    let y = selective_scan_chunked(&x, &p, Some(&bias), 256).unwrap();
    assert!(y.is_finite());
    assert!(y.data().iter().all(|v| v.abs() < 1e3));
}

#[test]
fn non_finite_output_reports_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(&mut rng, 2, 2);
    let mut x = rand_tensor(&mut rng, &[6, 2], -1.0, 1.0);
    x.set(&[4, 1], f64::INFINITY);
    match selective_scan_sequential(&x, &p, None) {
        Err(Error::NonFinite { index, .. }) => assert_eq!(index, 4),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_params(&mut rng, 3, 2);
    let x = Tensor::zeros(&[4, 2]);
    assert!(selective_scan_sequential(&x, &p, None).is_err());
    let x = Tensor::zeros(&[4, 3]);
    assert!(selective_scan_sequential(&x, &p, Some(&Tensor::zeros(&[2]))).is_err());
}

fn scan_layer_store(rng: &mut ChaCha8Rng, e: usize, n: usize) -> (ParamStore, SsmLayer) {
    let mut store = ParamStore::new();
    let layer = SsmLayer::register(&mut store, "ssm", random_params(rng, e, n));
    (store, layer)
}

#[test]
fn scan_layer_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut store, layer) = scan_layer_store(&mut rng, 3, 2);
    let x = store.add("x", rand_tensor(&mut rng, &[9, 3], -1.0, 1.0));
    let bias = store.add("bias", rand_tensor(&mut rng, &[3], 0.0, 0.3));
    let proj = rand_tensor(&mut rng, &[9, 3], -1.0, 1.0);
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        let xv = g.param(s, x);
        let b = g.param(s, bias);
        let y = layer.forward(g, s, xv, Some(b))?;
        let w = g.constant(&proj);
        let m = g.mul(y, w)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn clamped_transition_blocks_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut store, layer) = scan_layer_store(&mut rng, 2, 2);
    store.get_mut(layer.a_log).data_mut().fill(0.0);
    let bias = store.add("bias", Tensor::full(&[2], 3.0));
    let mut g = Graph::new();
    let x = g.constant(&rand_tensor(&mut rng, &[5, 2], -1.0, 1.0));
    let b = g.param(&store, bias);
    let y = layer.forward(&mut g, &store, x, Some(b)).unwrap();
    let loss = g.sum(y);
    let grads = g.gradients(loss).unwrap();
    assert!(grads.param(layer.a_log).unwrap().iter().all(|&v| v == 0.0));
    assert!(grads.param(bias).unwrap().iter().all(|&v| v == 0.0));
    assert!(grads.param(layer.w_b).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn graph_scan_matches_kernel_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (store, layer) = scan_layer_store(&mut rng, 4, 3);
    let xt = rand_tensor(&mut rng, &[11, 4], -1.0, 1.0);
    let bt = rand_tensor(&mut rng, &[4], 0.0, 0.5);
    let mut g = Graph::new();
    let x = g.constant(&xt);
    let b = g.constant(&bt);
    let y = layer.forward(&mut g, &store, x, Some(b)).unwrap();
    let want = selective_scan_sequential(&xt, &layer.params(&store), Some(&bt)).unwrap();
    assert!(max_diff(g.value(y), want.data()) < 1e-13);
}

fn block_setup(seed: u64, dynamic: bool) -> (ParamStore, MambaBlock, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "blk", BlockConfig::new(4, 2), dynamic, &mut rng);
    (store, block, rng)
}

#[test]
fn zero_output_projection_gives_identity() {
    let (mut store, block, mut rng) = block_setup(13, false);
    store.get_mut(block.w_out).data_mut().fill(0.0);
    let tokens = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let t = g.constant(&tokens);
    let out = block.forward(&mut g, &store, t, None, None).unwrap();
    assert_eq!(g.value(out), tokens.data());
}

#[test]
fn tied_directions_commute_with_reversal() {
    let (mut store, block, mut rng) = block_setup(14, false);
    let pairs = [
        (block.conv_fwd, block.conv_bwd),
        (block.ssm_fwd.a_log, block.ssm_bwd.a_log),
        (block.ssm_fwd.w_b, block.ssm_bwd.w_b),
        (block.ssm_fwd.w_c, block.ssm_bwd.w_c),
        (block.ssm_fwd.w_delta, block.ssm_bwd.w_delta),
        (block.ssm_fwd.b_delta, block.ssm_bwd.b_delta),
        (block.ssm_fwd.d_skip, block.ssm_bwd.d_skip),
    ];
    for (f, b) in pairs {
        let v = store.get(f).clone();
        *store.get_mut(b) = v;
    }
    let tokens = rand_tensor(&mut rng, &[7, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let t = g.constant(&tokens);
    let out = block.forward(&mut g, &store, t, None, None).unwrap();
    let tr = g.reverse_rows(t);
    let out_r = block.forward(&mut g, &store, tr, None, None).unwrap();
    let back = g.reverse_rows(out_r);
    assert!(max_diff(g.value(out), g.value(back)) < 1e-12);
}

#[test]
fn dynamic_block_updates_state_and_needs_density() {
    let (store, block, mut rng) = block_setup(15, true);
    let tokens = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let t = g.constant(&tokens);
    let mut state = vec![1.0; 8];
    assert!(block.forward(&mut g, &store, t, Some(&mut state), None).is_err());
    block.forward(&mut g, &store, t, Some(&mut state), Some(0.2)).unwrap();
    let mut plain = block.dynamic.unwrap().state(&store);
    let want = plain.update(0.2).unwrap();
    assert_eq!(state, want);

    let (store, block, _) = block_setup(16, false);
    let mut state = vec![1.0; 8];
    assert!(block.forward(&mut g, &store, t, Some(&mut state), Some(0.2)).is_err());
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (mut store, block, mut rng) = block_setup(17, true);
    let tokens = store.add("tokens", rand_tensor(&mut rng, &[6, 4], -1.0, 1.0));
    let proj = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        let t = g.param(s, tokens);
        let mut state = vec![0.8; 8];
        let out = block.forward(g, s, t, Some(&mut state), Some(0.3))?;
        let w = g.constant(&proj);
        let m = g.mul(out, w)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}
