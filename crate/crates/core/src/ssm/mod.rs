//! Selective state space layer: scan kernels, the density-driven transition
//! and the bidirectional Mamba block built on them.

mod block;
mod dynamic;
pub mod scan;

use rand::Rng;

pub(crate) use block::uniform;
pub use block::{BlockConfig, MambaBlock};
pub use dynamic::{DynamicTransition, DynamicTransitionState};
pub use scan::{compose_transition, selective_scan_chunked, selective_scan_sequential, A_CLAMP};

use crate::error::{Error, Result};
use crate::numerics::kernels::inverse_softplus;
use crate::numerics::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};
use scan::{scan_backward, scan_sequential_with_states, ScanInputs};

/// Initial step size, before the softplus.
pub const DELTA_INIT: f64 = 0.5;

/// Plain-value parameters of one scan direction over `E` channels and `N` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `[E, N]`, transition magnitudes as `ln(-A)`.
    pub a_log: Tensor,
    /// `[E, N]`
    pub w_b: Tensor,
    /// `[E, N]`
    pub w_c: Tensor,
    /// `[E]`, per-channel step gain.
    pub w_delta: Tensor,
    /// `[E]`
    pub b_delta: Tensor,
    /// `[E]`
    pub d_skip: Tensor,
}

impl SsmParams {
    /// `A_log = ln(1..=N)` per channel, step bias at `softplus⁻¹(0.5)`,
    /// projections drawn from `U(-1/√E, 1/√E)`.
    pub fn init(e: usize, n: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (e as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let w_b = u(&[e, n]);
        let w_c = u(&[e, n]);
        let w_delta = u(&[e]);
        Self {
            a_log: Tensor::from_fn(&[e, n], |i| ((i % n) as f64 + 1.0).ln()),
            w_b,
            w_c,
            w_delta,
            b_delta: Tensor::full(&[e], inverse_softplus(DELTA_INIT)),
            d_skip: Tensor::full(&[e], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape().get(1).copied().unwrap_or(0)
    }
}

/// [`SsmParams`] registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub d_skip: ParamId,
}

impl SsmLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, p: SsmParams) -> Self {
        Self {
            a_log: store.add(format!("{prefix}.a_log"), p.a_log),
            w_b: store.add(format!("{prefix}.w_b"), p.w_b),
            w_c: store.add(format!("{prefix}.w_c"), p.w_c),
            w_delta: store.add(format!("{prefix}.w_delta"), p.w_delta),
            b_delta: store.add(format!("{prefix}.b_delta"), p.b_delta),
            d_skip: store.add(format!("{prefix}.d_skip"), p.d_skip),
        }
    }

    pub fn params(&self, store: &ParamStore) -> SsmParams {
        SsmParams {
            a_log: store.get(self.a_log).clone(),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            w_delta: store.get(self.w_delta).clone(),
            b_delta: store.get(self.b_delta).clone(),
            d_skip: store.get(self.d_skip).clone(),
        }
    }

    /// Scan over `x: [L, E]` on the tape; `a_bias: [E]` shifts the transition.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        a_bias: Option<Var>,
    ) -> Result<Var> {
        let w_delta = g.param(store, self.w_delta);
        let b_delta = g.param(store, self.b_delta);
        let pre = g.scale_cols(x, w_delta)?;
        let pre = g.add_bias(pre, b_delta)?;
        let delta = g.softplus(pre);
        let w_b = g.param(store, self.w_b);
        let w_c = g.param(store, self.w_c);
        let b = g.matmul(x, w_b)?;
        let c = g.matmul(x, w_c)?;
        let a_log = g.param(store, self.a_log);
        let d_skip = g.param(store, self.d_skip);
        selective_scan_op(g, x, delta, a_log, b, c, d_skip, a_bias)
    }
}

struct ScanOp {
    inp: ScanInputs,
    states: Vec<f64>,
    /// `-exp(A_log)`, needed for the chain through the exponent.
    neg_exp: Vec<f64>,
    /// Per-channel bias, zeros when absent.
    bias: Vec<f64>,
    has_bias: bool,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gr = scan_backward(&self.inp, &self.states, grad_out);
        let n = self.inp.state;
        // Clamped entries pass no gradient to A_log or the bias.
        let mut da_log = vec![0.0; gr.a.len()];
        let mut dbias = vec![0.0; self.inp.channels];
        for (i, &ga) in gr.a.iter().enumerate() {
            if self.neg_exp[i] + self.bias[i / n] < -A_CLAMP {
                da_log[i] = ga * self.neg_exp[i];
                dbias[i / n] += ga;
            }
        }
        let mut out = vec![
            Some(gr.x),
            Some(gr.delta),
            Some(da_log),
            Some(gr.b),
            Some(gr.c),
            Some(gr.d_skip),
        ];
        if self.has_bias {
            out.push(Some(dbias));
        }
        out
    }
}

/// Records a fused scan node. `x, delta: [L, E]`, `a_log: [E, N]`,
/// `b, c: [L, N]`, `d_skip: [E]`, `a_bias: [E]`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_op(
    g: &mut Graph,
    x: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    a_bias: Option<Var>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let asz = g.shape(a_log).to_vec();
    if xs.len() != 2 || asz.len() != 2 || asz[0] != xs[1] {
        return Err(Error::shape("selective_scan", &xs, &asz));
    }
    let (l, e, n) = (xs[0], xs[1], asz[1]);
    for (v, want) in [(delta, vec![l, e]), (b, vec![l, n]), (c, vec![l, n])] {
        if g.shape(v) != want.as_slice() {
            return Err(Error::shape("selective_scan", g.shape(v), &want));
        }
    }
    if g.value(d_skip).len() != e || a_bias.is_some_and(|v| g.value(v).len() != e) {
        return Err(Error::shape("selective_scan", &xs, g.shape(d_skip)));
    }
    let neg_exp: Vec<f64> = g.value(a_log).iter().map(|v| -v.exp()).collect();
    let inp = ScanInputs {
        len: l,
        channels: e,
        state: n,
        x: g.value(x).to_vec(),
        delta: g.value(delta).to_vec(),
        a: compose_transition(g.value(a_log), n, a_bias.map(|v| g.value(v))),
        b: g.value(b).to_vec(),
        c: g.value(c).to_vec(),
        d_skip: g.value(d_skip).to_vec(),
    };
    let (y, states) = scan_sequential_with_states(&inp)?;
    let mut inputs = vec![x, delta, a_log, b, c, d_skip];
    inputs.extend(a_bias);
    let op = ScanOp {
        inp,
        states,
        neg_exp,
        bias: a_bias.map_or_else(|| vec![0.0; e], |v| g.value(v).to_vec()),
        has_bias: a_bias.is_some(),
    };
    Ok(g.custom(&inputs, vec![l, e], y, Box::new(op)))
}

#[cfg(test)]
mod tests;
