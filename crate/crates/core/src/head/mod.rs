//! Center-based tracking head, its joint loss and the evaluation metrics.

mod loss;
mod metrics;

use rand::Rng;

pub use loss::{
    encode_target, focal_loss, giou, giou_loss, l1_loss, total_loss, LossTerms, LossWeights,
    TargetMaps,
};
pub use metrics::{evaluate, Metrics, SrMode, NPR_THRESHOLDS, PR_THRESHOLD_PX, SR_THRESHOLDS};

use crate::error::{Error, Result};
use crate::events::BBox;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::uniform;

/// Initial bias of the score map's output layer (σ(-2) ≈ 0.12).
pub const SCORE_BIAS_INIT: f64 = -2.0;

const CONV_K: usize = 3;

/// `3×3` conv to `hidden` channels, GELU, `1×1` conv to `out` channels, sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadBranch {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadBranch {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        hidden: usize,
        out: usize,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = CONV_K * CONV_K * c_in;
        let w1 = uniform(rng, &[fan, hidden], fan);
        let w2 = uniform(rng, &[hidden, out], hidden);
        Self {
            w1: store.add(format!("{prefix}.w1"), w1),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), w2),
            b2: store.add(format!("{prefix}.b2"), Tensor::full(&[out], bias)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, cols: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(cols, w1, Some(b1))?;
        let h = g.gelu(h);
        let o = g.linear(h, w2, Some(b2))?;
        Ok(g.sigmoid(o))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackHead {
    pub score: HeadBranch,
    pub size: HeadBranch,
    pub offset: HeadBranch,
}

/// Head outputs on the tape, one row per grid cell in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadVars {
    pub grid: usize,
    /// `[G², 1]`
    pub score: Var,
    /// `[G², 2]`, normalized `(w, h)`.
    pub size: Var,
    /// `[G², 2]`, sub-cell `(x, y)`.
    pub offset: Var,
}

/// Plain-value head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    /// `[G, G]`
    pub score: Tensor,
    /// `[G, G, 2]`
    pub size: Tensor,
    /// `[G, G, 2]`
    pub offset: Tensor,
}

impl HeadVars {
    pub fn output(&self, g: &Graph) -> TrackOutput {
        let n = self.grid;
        let t = |v: Var, shape: &[usize]| Tensor::new(shape, g.value(v).to_vec()).expect("head shape");
        TrackOutput {
            score: t(self.score, &[n, n]),
            size: t(self.size, &[n, n, 2]),
            offset: t(self.offset, &[n, n, 2]),
        }
    }
}

impl TrackHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            score: HeadBranch::register(store, &format!("{prefix}.score"), c_in, hidden, 1, SCORE_BIAS_INIT, rng),
            size: HeadBranch::register(store, &format!("{prefix}.size"), c_in, hidden, 2, 0.0, rng),
            offset: HeadBranch::register(store, &format!("{prefix}.offset"), c_in, hidden, 2, 0.0, rng),
        }
    }

    /// Maps search tokens `fused: [G², C]` to score, size and offset maps.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<HeadVars> {
        let shape = g.shape(fused).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("head", &shape, &[0, 0]));
        }
        let (l, c) = (shape[0], shape[1]);
        let grid = (l as f64).sqrt().round() as usize;
        if grid * grid != l || l == 0 {
            return Err(Error::Param(format!("{l} search tokens do not form a square grid")));
        }
        let x = g.reshape(fused, &[grid, grid, c])?;
        let cols = g.im2col(x, CONV_K)?;
        Ok(HeadVars {
            grid,
            score: self.score.forward(g, store, cols)?,
            size: self.size.forward(g, store, cols)?,
            offset: self.offset.forward(g, store, cols)?,
        })
    }
}

/// Box at the highest-scoring cell, in search-crop pixels. Ties go to the
/// first cell in row-major order.
pub fn decode_bbox(out: &TrackOutput, search_size: f64) -> BBox {
    let n = out.score.shape()[1];
    let mut best = 0;
    for (k, &v) in out.score.data().iter().enumerate() {
        if v > out.score.data()[best] {
            best = k;
        }
    }
    let (i, j) = (best / n, best % n);
    let stride = search_size / n as f64;
    let off = &out.offset.data()[best * 2..best * 2 + 2];
    let size = &out.size.data()[best * 2..best * 2 + 2];
    BBox::new(
        (j as f64 + off[0]) * stride,
        (i as f64 + off[1]) * stride,
        size[0] * search_size,
        size[1] * search_size,
    )
}
