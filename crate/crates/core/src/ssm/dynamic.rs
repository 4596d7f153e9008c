use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Density-driven transition bias carried across frames:
///
/// ```text
/// β   = σ(w_a · ρ)
/// A_t = α · β + (1 - α) · A_{t-1},   α = σ(alpha_raw)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTransitionState {
    pub a_prev: Vec<f64>,
    pub alpha_raw: f64,
    pub w_a: Vec<f64>,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("event density must be finite and >= 0, got {rho}")))
    }
}

impl DynamicTransitionState {
    /// Starts from `A_0 = 1` on every channel.
    pub fn new(alpha_raw: f64, w_a: Vec<f64>) -> Self {
        Self {
            a_prev: vec![1.0; w_a.len()],
            alpha_raw,
            w_a,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw)
    }

    pub fn beta(&self, rho: f64) -> Vec<f64> {
        self.w_a.iter().map(|w| sigmoid(w * rho)).collect()
    }

    /// Advances one frame and returns the new `A_t`.
    pub fn update(&mut self, rho: f64) -> Result<Vec<f64>> {
        check_rho(rho)?;
        let alpha = self.alpha();
        let beta = self.beta(rho);
        for (a, b) in self.a_prev.iter_mut().zip(beta) {
            *a += alpha * (b - *a);
        }
        Ok(self.a_prev.clone())
    }

    pub fn reset(&mut self) {
        self.a_prev.iter_mut().for_each(|a| *a = 1.0);
    }
}

/// Learnable `alpha_raw: [1]` and `w_a: [E]` of a [`DynamicTransitionState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicTransition {
    pub alpha_raw: ParamId,
    pub w_a: ParamId,
}

impl DynamicTransition {
    /// `alpha_raw = 0` (α = ½), `w_a = 1`.
    pub fn register(store: &mut ParamStore, prefix: &str, e: usize) -> Self {
        Self {
            alpha_raw: store.add(format!("{prefix}.alpha_raw"), Tensor::zeros(&[1])),
            w_a: store.add(format!("{prefix}.w_a"), Tensor::full(&[e], 1.0)),
        }
    }

    pub fn state(&self, store: &ParamStore) -> DynamicTransitionState {
        DynamicTransitionState::new(
            store.get(self.alpha_raw).data()[0],
            store.get(self.w_a).data().to_vec(),
        )
    }

    /// Records one update on the tape. `a_prev` enters as a constant, so no
    /// gradient reaches earlier frames.
    pub fn record(&self, g: &mut Graph, store: &ParamStore, a_prev: &[f64], rho: f64) -> Result<Var> {
        check_rho(rho)?;
        let w_a = g.param(store, self.w_a);
        if g.value(w_a).len() != a_prev.len() {
            return Err(Error::shape("dynamic_transition", g.shape(w_a), &[a_prev.len()]));
        }
        let alpha_raw = g.param(store, self.alpha_raw);
        let alpha = g.sigmoid(alpha_raw);
        let pre = g.affine(w_a, rho, 0.0);
        let beta = g.sigmoid(pre);
        let prev = g.constant(&Tensor::new(&[a_prev.len()], a_prev.to_vec())?);
        let diff = g.sub(beta, prev)?;
        let step = g.scale_by(alpha, diff)?;
        g.add(prev, step)
    }
}
