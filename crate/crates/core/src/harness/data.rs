//! Per-sequence caches shared by training and evaluation.

use super::model::{FrameInput, MambaTrack, ModelConfig, TrackerState};
use super::synth::Sequence;
use crate::error::{Error, Result};
use crate::events::{BBox, CropWindow};
use crate::numerics::{ParamStore, Tensor};

/// A sequence with its time surfaces, densities and frame-0 templates.
#[derive(Debug, Clone)]
pub struct TrackData {
    pub seq: Sequence,
    /// `[H, W, 1]` per frame.
    pub surfaces: Vec<Tensor>,
    pub rho: Vec<f64>,
    /// RGB and event template crops around the frame-0 box.
    pub templates: (Tensor, Tensor),
}

impl TrackData {
    pub fn new(seq: Sequence, cfg: &ModelConfig) -> Result<Self> {
        if seq.len() < 2 {
            return Err(Error::Param(format!("sequence has {} frames, need >= 2", seq.len())));
        }
        let mut surfaces = Vec::with_capacity(seq.len());
        let mut rho = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let s = seq.surface(i)?;
            rho.push(s.density);
            surfaces.push(s.as_image());
        }
        let tw = CropWindow::around(&seq.gt[0], cfg.template_factor, cfg.template_size)?;
        let templates = (tw.sample(&seq.frames.frames[0])?, tw.sample(&surfaces[0])?);
        Ok(Self {
            seq,
            surfaces,
            rho,
            templates,
        })
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Search crops of frame `k` through `window`.
    pub fn input(&self, k: usize, window: &CropWindow) -> Result<FrameInput> {
        FrameInput::build(
            &self.templates,
            &self.seq.frames.frames[k],
            &self.surfaces[k],
            self.rho[k],
            window,
        )
    }

    /// Search window around `b`, with the box floored to one pixel per side.
    pub fn window(cfg: &ModelConfig, b: &BBox) -> Result<CropWindow> {
        let b = BBox::new(b.cx, b.cy, b.w.max(1.0), b.h.max(1.0));
        CropWindow::around(&b, cfg.search_factor, cfg.search_size)
    }

    /// Transition state a tracker holds when it reaches frame `k`, having run
    /// frames `1..k` since initialisation. Matches what `forward` would have
    /// written, since the transition depends on densities alone.
    pub fn state_before(&self, model: &MambaTrack, store: &ParamStore, k: usize) -> Result<TrackerState> {
        let mut state = model.new_state();
        let dynamic = model.event_blocks.iter().filter_map(|b| b.dynamic);
        for (slot, d) in state.a.iter_mut().zip(dynamic) {
            let mut s = d.state(store);
            for &r in &self.rho[1..k.max(1)] {
                s.update(if model.cfg.ablation.rgb_only { 0.0 } else { r })?;
            }
            slot.copy_from_slice(&s.a_prev);
        }
        Ok(state)
    }
}
