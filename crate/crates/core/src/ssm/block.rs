use rand::Rng;

use super::{DynamicTransition, SsmLayer, SsmParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

/// `U(-1/√fan_in, 1/√fan_in)`.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub d_model: usize,
    /// Inner channel count `E`.
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
}

impl BlockConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            conv_kernel: 4,
        }
    }
}

/// Pre-norm bidirectional Mamba block with a residual connection:
///
/// ```text
/// u = LN(tokens),  x = u·W_x,  z = u·W_z
/// y_f = scan_f(silu(conv_f(x)))
/// y_b = rev(scan_b(silu(conv_b(rev(x)))))
/// out = tokens + ((y_f + y_b) ⊙ silu(z))·W_out
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaBlock {
    pub cfg: BlockConfig,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w_in_x: ParamId,
    pub w_in_z: ParamId,
    pub conv_fwd: ParamId,
    pub conv_bwd: ParamId,
    pub ssm_fwd: SsmLayer,
    pub ssm_bwd: SsmLayer,
    pub w_out: ParamId,
    /// Present on blocks whose transition follows event density.
    pub dynamic: Option<DynamicTransition>,
}

impl MambaBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: BlockConfig,
        dynamic: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (d, e, k) = (cfg.d_model, cfg.d_inner, cfg.conv_kernel);
        let w_in_x = uniform(rng, &[d, e], d);
        let w_in_z = uniform(rng, &[d, e], d);
        let conv_fwd = uniform(rng, &[k, e], k);
        let conv_bwd = uniform(rng, &[k, e], k);
        let w_out = uniform(rng, &[e, d], e);
        let p = |s: &str| format!("{prefix}.{s}");
        let gamma = store.add(p("norm.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(p("norm.beta"), Tensor::zeros(&[d]));
        let w_in_x = store.add(p("w_in_x"), w_in_x);
        let w_in_z = store.add(p("w_in_z"), w_in_z);
        let conv_fwd = store.add(p("conv_fwd"), conv_fwd);
        let conv_bwd = store.add(p("conv_bwd"), conv_bwd);
        let ssm_fwd = SsmLayer::register(store, &p("ssm_fwd"), SsmParams::init(e, cfg.d_state, rng));
        let ssm_bwd = SsmLayer::register(store, &p("ssm_bwd"), SsmParams::init(e, cfg.d_state, rng));
        let w_out = store.add(p("w_out"), w_out);
        let dynamic = dynamic.then(|| DynamicTransition::register(store, &p("dyn"), e));
        Self {
            cfg,
            norm_gamma: gamma,
            norm_beta: beta,
            w_in_x,
            w_in_z,
            conv_fwd,
            conv_bwd,
            ssm_fwd,
            ssm_bwd,
            w_out,
            dynamic,
        }
    }

    /// Applies the block to `tokens: [L, D]`.
    ///
    /// With `state` given, the block must own a dynamic transition and `rho`
    /// must be set: `A_t` is recorded, shared by both directions as the
    /// transition bias, and written back into `state`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        state: Option<&mut [f64]>,
        rho: Option<f64>,
    ) -> Result<Var> {
        let ts = g.shape(tokens).to_vec();
        if ts.len() != 2 || ts[1] != self.cfg.d_model {
            return Err(Error::shape("mamba_block", &ts, &[0, self.cfg.d_model]));
        }
        let a_bias = match state {
            None => None,
            Some(state) => {
                let rho = rho.ok_or_else(|| {
                    Error::Param("dynamic transition state given without event density".into())
                })?;
                let dynamic = self.dynamic.ok_or_else(|| {
                    Error::Param("block has no dynamic transition parameters".into())
                })?;
                let a_t = dynamic.record(g, store, state, rho)?;
                state.copy_from_slice(g.value(a_t));
                Some(a_t)
            }
        };

        let gamma = g.param(store, self.norm_gamma);
        let beta = g.param(store, self.norm_beta);
        let u = g.layer_norm(tokens, gamma, beta, LAYER_NORM_EPS)?;
        let w_x = g.param(store, self.w_in_x);
        let w_z = g.param(store, self.w_in_z);
        let x = g.matmul(u, w_x)?;
        let z = g.matmul(u, w_z)?;

        let k_f = g.param(store, self.conv_fwd);
        let xf = g.depthwise_conv1d(x, k_f, true)?;
        let xf = g.silu(xf);
        let y_f = self.ssm_fwd.forward(g, store, xf, a_bias)?;

        let xr = g.reverse_rows(x);
        let k_b = g.param(store, self.conv_bwd);
        let xb = g.depthwise_conv1d(xr, k_b, true)?;
        let xb = g.silu(xb);
        let y_b = self.ssm_bwd.forward(g, store, xb, a_bias)?;
        let y_b = g.reverse_rows(y_b);

        let y = g.add(y_f, y_b)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let w_out = g.param(store, self.w_out);
        let y = g.matmul(y, w_out)?;
        g.add(tokens, y)
    }
}
