//! Gated projection fusion of event and RGB search tokens.
//!
//! Each direction projects the source modality into the target's feature
//! space and adds it back through a scalar gate:
//!
//! ```text
//! ΔF    = W2 · gelu(W1 · F_src + b1) + b2
//! conf  = ‖mean_rows(F_src)‖₂ / √D
//! G     = σ(w_g[0] · ρ + w_g[1] · conf)
//! F_out = F_tgt + G · ΔF
//! ```
//!
//! The RGB-into-event direction gates with the frame's event density; the
//! event-into-RGB direction uses `ρ = 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::uniform;

/// Density fed to the event-into-RGB gate.
pub const RGB_GATE_DENSITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GpfDirection {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[2]`: weights on density and confidence.
    pub w_g: ParamId,
}

impl GpfDirection {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let w1 = uniform(rng, &[d, d], d);
        let w2 = uniform(rng, &[d, d], d);
        Self {
            w1: store.add(format!("{prefix}.w1"), w1),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d])),
            w2: store.add(format!("{prefix}.w2"), w2),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
            w_g: store.add(format!("{prefix}.w_g"), Tensor::zeros(&[2])),
        }
    }

    /// Tokenwise two-layer projection `ΔF`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, f_src: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(f_src, w1, Some(b1))?;
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }

    /// Scalar gate `G` in (0, 1).
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, rho: f64, f_src: Var) -> Result<Var> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::Param(format!("gate density must be finite and >= 0, got {rho}")));
        }
        let d = g.shape(f_src).last().copied().unwrap_or(1);
        let mean = g.mean_rows(f_src);
        let norm = g.norm2(mean);
        let conf = g.affine(norm, 1.0 / (d as f64).sqrt(), 0.0);
        let w_g = g.param(store, self.w_g);
        let w_rho = g.select(w_g, &[0])?;
        let w_conf = g.select(w_g, &[1])?;
        let a = g.affine(w_rho, rho, 0.0);
        let b = g.mul(w_conf, conf)?;
        let pre = g.add(a, b)?;
        Ok(g.sigmoid(pre))
    }

    /// `f_tgt + G · ΔF(f_src)`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_tgt: Var,
        f_src: Var,
        rho: f64,
    ) -> Result<Var> {
        let delta = self.project(g, store, f_src)?;
        let gate = self.gate(g, store, rho, f_src)?;
        fuse_directional(g, f_tgt, delta, gate)
    }
}

/// Residual add of a gate-scaled projection.
pub fn fuse_directional(g: &mut Graph, f_tgt: Var, delta_f: Var, gate: Var) -> Result<Var> {
    let scaled = g.scale_by(gate, delta_f)?;
    g.add(f_tgt, scaled)
}

/// Both fusion directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gpf {
    /// RGB projected into the event stream.
    pub into_event: GpfDirection,
    /// Events projected into the RGB stream.
    pub into_rgb: GpfDirection,
}

impl Gpf {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            into_event: GpfDirection::register(store, &format!("{prefix}.into_event"), d, rng),
            into_rgb: GpfDirection::register(store, &format!("{prefix}.into_rgb"), d, rng),
        }
    }

    /// Fuses `f_event, f_rgb: [L, D]` into `[L, 2D]`, event half first.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_event: Var,
        f_rgb: Var,
        rho: f64,
    ) -> Result<Var> {
        if g.shape(f_event) != g.shape(f_rgb) {
            return Err(Error::shape("gpf", g.shape(f_event), g.shape(f_rgb)));
        }
        let ev = self.into_event.fuse(g, store, f_event, f_rgb, rho)?;
        let rgb = self.into_rgb.fuse(g, store, f_rgb, f_event, RGB_GATE_DENSITY)?;
        g.concat_cols(&[ev, rgb])
    }
}
