//! Selective scan kernels.
//!
//! Per token `t`, channel `d` and state index `n`:
//!
//! ```text
//! Ā = exp(Δ[t,d] · A[d,n])
//! h[t,d,n] = Ā · h[t-1,d,n] + Δ[t,d] · B[t,n] · x[t,d]
//! y[t,d]   = Σ_n C[t,n] · h[t,d,n] + D[d] · x[t,d]
//! ```
//!
//! with `h[-1] = 0`. `A` is the composed transition (static `-exp(A_log)` plus
//! the optional per-channel dynamic bias, clamped to stay strictly negative).

use rayon::prelude::*;

use super::SsmParams;
use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm, softplus};
use crate::numerics::Tensor;

/// Upper bound applied to every composed transition entry.
pub const A_CLAMP: f64 = 1e-4;

/// `min(-exp(A_log[d,n]) + bias[d], -A_CLAMP)` for an `[e, n]` log-magnitude table.
pub fn compose_transition(a_log: &[f64], n: usize, a_bias: Option<&[f64]>) -> Vec<f64> {
    a_log
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bias = a_bias.map_or(0.0, |b| b[i / n]);
            (-v.exp() + bias).min(-A_CLAMP)
        })
        .collect()
}

/// Per-token discretization inputs for one scan.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `[L, E]`
    pub x: Vec<f64>,
    /// `[L, E]`, strictly positive.
    pub delta: Vec<f64>,
    /// `[E, N]`, composed and clamped.
    pub a: Vec<f64>,
    /// `[L, N]`
    pub b: Vec<f64>,
    /// `[L, N]`
    pub c: Vec<f64>,
    /// `[E]`
    pub d_skip: Vec<f64>,
}

impl ScanInputs {
    /// Projects `x: [L, E]` through the SSM parameters and composes the transition.
    pub fn prepare(x: &Tensor, params: &SsmParams, a_bias: Option<&Tensor>) -> Result<Self> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(Error::shape("selective_scan", xs, params.a_log.shape()));
        }
        let (l, e) = (xs[0], xs[1]);
        let n = params.state_size();
        if params.a_log.shape() != [e, n]
            || params.w_b.shape() != [e, n]
            || params.w_c.shape() != [e, n]
            || params.w_delta.numel() != e
            || params.b_delta.numel() != e
            || params.d_skip.numel() != e
        {
            return Err(Error::shape("selective_scan", xs, params.a_log.shape()));
        }
        if let Some(bias) = a_bias {
            if bias.numel() != e {
                return Err(Error::shape("selective_scan", xs, bias.shape()));
            }
        }
        let xv = x.data();
        let (wd, bd) = (params.w_delta.data(), params.b_delta.data());
        let delta = xv
            .iter()
            .enumerate()
            .map(|(i, v)| softplus(v * wd[i % e] + bd[i % e]))
            .collect();
        let mut b = vec![0.0; l * n];
        let mut c = vec![0.0; l * n];
        gemm(l, e, n, xv, false, params.w_b.data(), false, 0.0, &mut b);
        gemm(l, e, n, xv, false, params.w_c.data(), false, 0.0, &mut c);
        Ok(Self {
            len: l,
            channels: e,
            state: n,
            x: xv.to_vec(),
            delta,
            a: compose_transition(params.a_log.data(), n, a_bias.map(Tensor::data)),
            b,
            c,
            d_skip: params.d_skip.data().to_vec(),
        })
    }

    fn check_row(&self, y: &[f64], t: usize) -> Result<()> {
        if y.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op: "selective_scan",
                index: t,
            })
        }
    }
}

/// Token-by-token recurrence. Returns `y: [L, E]`.
pub fn scan_sequential(inp: &ScanInputs) -> Result<Vec<f64>> {
    run_sequential(inp, None)
}

/// Sequential scan that also keeps every hidden state, `[L, E, N]`, for the adjoint.
pub fn scan_sequential_with_states(inp: &ScanInputs) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut states = vec![0.0; inp.len * inp.channels * inp.state];
    let y = run_sequential(inp, Some(&mut states))?;
    Ok((y, states))
}

fn run_sequential(inp: &ScanInputs, mut states: Option<&mut [f64]>) -> Result<Vec<f64>> {
    let (l, e, n) = (inp.len, inp.channels, inp.state);
    let mut h = vec![0.0; e * n];
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        let bt = &inp.b[t * n..(t + 1) * n];
        let ct = &inp.c[t * n..(t + 1) * n];
        for d in 0..e {
            let dt = inp.delta[t * e + d];
            let xv = inp.x[t * e + d];
            let hd = &mut h[d * n..(d + 1) * n];
            let ad = &inp.a[d * n..(d + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                hd[k] = (dt * ad[k]).exp() * hd[k] + dt * bt[k] * xv;
                acc += ct[k] * hd[k];
            }
            y[t * e + d] = acc + inp.d_skip[d] * xv;
        }
        if let Some(s) = states.as_deref_mut() {
            s[t * e * n..(t + 1) * e * n].copy_from_slice(&h);
        }
        inp.check_row(&y[t * e..(t + 1) * e], t)?;
    }
    Ok(y)
}

/// Chunkwise scan: each chunk runs from a zero state in parallel, chunk-final
/// states are chained through the products of their transitions, and each
/// chunk's outputs are then corrected by its incoming state.
pub fn scan_chunked(inp: &ScanInputs, chunk: usize) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(Error::Param("chunk size must be >= 1".into()));
    }
    let (l, e, n) = (inp.len, inp.channels, inp.state);
    let mut y = vec![0.0; l * e];
    if l == 0 {
        return Ok(y);
    }

    // Local pass: (final local state, transition product) per chunk.
    let summaries: Vec<(Vec<f64>, Vec<f64>)> = y
        .par_chunks_mut(chunk * e)
        .enumerate()
        .map(|(k, ys)| {
            let start = k * chunk;
            let mut h = vec![0.0; e * n];
            let mut prod = vec![1.0; e * n];
            for (dtok, yrow) in ys.chunks_mut(e).enumerate() {
                let t = start + dtok;
                let bt = &inp.b[t * n..(t + 1) * n];
                let ct = &inp.c[t * n..(t + 1) * n];
                for d in 0..e {
                    let dt = inp.delta[t * e + d];
                    let xv = inp.x[t * e + d];
                    let mut acc = 0.0;
                    for s in 0..n {
                        let i = d * n + s;
                        let abar = (dt * inp.a[i]).exp();
                        h[i] = abar * h[i] + dt * bt[s] * xv;
                        prod[i] *= abar;
                        acc += ct[s] * h[i];
                    }
                    yrow[d] = acc + inp.d_skip[d] * xv;
                }
            }
            (h, prod)
        })
        .collect();

    // Carry pass over chunk boundaries.
    let mut carries = Vec::with_capacity(summaries.len());
    let mut carry = vec![0.0; e * n];
    for (local, prod) in &summaries {
        carries.push(carry.clone());
        for i in 0..e * n {
            carry[i] = local[i] + prod[i] * carry[i];
        }
    }

    // Correction pass: add C · (cumulative transition ⊙ incoming state).
    y.par_chunks_mut(chunk * e)
        .enumerate()
        .skip(1)
        .for_each(|(k, ys)| {
            let start = k * chunk;
            let incoming = &carries[k];
            let mut cum = incoming.clone();
            for (dtok, yrow) in ys.chunks_mut(e).enumerate() {
                let t = start + dtok;
                let ct = &inp.c[t * n..(t + 1) * n];
                for d in 0..e {
                    let dt = inp.delta[t * e + d];
                    let mut acc = 0.0;
                    for s in 0..n {
                        let i = d * n + s;
                        cum[i] *= (dt * inp.a[i]).exp();
                        acc += ct[s] * cum[i];
                    }
                    yrow[d] += acc;
                }
            }
        });

    for t in 0..l {
        inp.check_row(&y[t * e..(t + 1) * e], t)?;
    }
    Ok(y)
}

/// Adjoints of a scan with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    /// With respect to the composed transition `A`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

/// Reverse sweep of the recurrence given the saved states and `dy: [L, E]`.
pub fn scan_backward(inp: &ScanInputs, states: &[f64], dy: &[f64]) -> ScanGrads {
    let (l, e, n) = (inp.len, inp.channels, inp.state);
    let mut gr = ScanGrads {
        x: vec![0.0; l * e],
        delta: vec![0.0; l * e],
        a: vec![0.0; e * n],
        b: vec![0.0; l * n],
        c: vec![0.0; l * n],
        d_skip: vec![0.0; e],
    };
    // Adjoint of h[t] carried back from later tokens.
    let mut carry = vec![0.0; e * n];
    for t in (0..l).rev() {
        let h_t = &states[t * e * n..(t + 1) * e * n];
        let h_prev = (t > 0).then(|| &states[(t - 1) * e * n..t * e * n]);
        for d in 0..e {
            let td = t * e + d;
            let (g_y, dt, xv) = (dy[td], inp.delta[td], inp.x[td]);
            gr.x[td] += g_y * inp.d_skip[d];
            gr.d_skip[d] += g_y * xv;
            for s in 0..n {
                let i = d * n + s;
                let ts = t * n + s;
                let g_h = carry[i] + g_y * inp.c[ts];
                gr.c[ts] += g_y * h_t[i];
                let abar = (dt * inp.a[i]).exp();
                let prev = h_prev.map_or(0.0, |p| p[i]);
                let g_abar = g_h * prev * abar;
                gr.delta[td] += g_abar * inp.a[i] + g_h * inp.b[ts] * xv;
                gr.a[i] += g_abar * dt;
                gr.b[ts] += g_h * dt * xv;
                gr.x[td] += g_h * dt * inp.b[ts];
                carry[i] = g_h * abar;
            }
        }
    }
    gr
}

fn tensor(l: usize, e: usize, y: Vec<f64>) -> Tensor {
    Tensor::new(&[l, e], y).expect("scan output shape")
}

/// Reference scan over `x: [L, E]`, with the optional per-channel transition bias.
pub fn selective_scan_sequential(
    x: &Tensor,
    params: &SsmParams,
    a_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let inp = ScanInputs::prepare(x, params, a_bias)?;
    Ok(tensor(inp.len, inp.channels, scan_sequential(&inp)?))
}

/// Chunked evaluation of [`selective_scan_sequential`].
pub fn selective_scan_chunked(
    x: &Tensor,
    params: &SsmParams,
    a_bias: Option<&Tensor>,
    chunk: usize,
) -> Result<Tensor> {
    let inp = ScanInputs::prepare(x, params, a_bias)?;
    Ok(tensor(inp.len, inp.channels, scan_chunked(&inp, chunk)?))
}
