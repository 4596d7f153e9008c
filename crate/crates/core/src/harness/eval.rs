//! Frame-by-frame tracking and metric aggregation.

use std::fmt;

use rayon::prelude::*;

use super::data::TrackData;
use super::model::{FrameInput, MambaTrack, TrackerState};
use crate::error::Result;
use crate::events::{BBox, CropWindow};
use crate::head::{decode_bbox, evaluate, Metrics, SrMode};
use crate::numerics::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub metrics: Metrics,
    pub mean_iou: f64,
    /// Frames scored, summed over sequences.
    pub frames: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} mIoU {:.3} ({} frames)",
            self.label, self.metrics, self.mean_iou, self.frames
        )
    }
}

impl EvalReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "label={}\n{}miou={}\nframes={}\n",
            self.label,
            self.metrics.to_key_value(),
            self.mean_iou,
            self.frames
        )
    }
}

/// Online single-target tracker: fixed frame-0 templates, search window
/// centered on the previous prediction, transition state carried across
/// frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    templates: (Tensor, Tensor),
    state: TrackerState,
    prev: BBox,
}

impl Tracker {
    /// `rgb0: [H, W, 3]` and `surface0: [H, W, 1]` of the first frame, with the
    /// target box `init` in it.
    pub fn new(model: &MambaTrack, rgb0: &Tensor, surface0: &Tensor, init: BBox) -> Result<Self> {
        let cfg = &model.cfg;
        let tw = CropWindow::around(&init, cfg.template_factor, cfg.template_size)?;
        Ok(Self {
            templates: (tw.sample(rgb0)?, tw.sample(surface0)?),
            state: model.new_state(),
            prev: init,
        })
    }

    /// Box for the next frame, in image coordinates.
    pub fn step(
        &mut self,
        model: &MambaTrack,
        store: &ParamStore,
        rgb: &Tensor,
        surface: &Tensor,
        rho: f64,
    ) -> Result<BBox> {
        let window = TrackData::window(&model.cfg, &self.prev)?;
        let input = FrameInput::build(&self.templates, rgb, surface, rho, &window)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &input, &mut self.state)?;
        let search = model.cfg.search_size as f64;
        let b = window.to_image(&decode_bbox(&out.head.output(&g), search));
        self.prev = b;
        Ok(b)
    }
}

/// Tracks frames `1..T` from the frame-0 box.
pub fn track(model: &MambaTrack, store: &ParamStore, data: &TrackData) -> Result<Vec<BBox>> {
    let frames = &data.seq.frames.frames;
    let mut t = Tracker::new(model, &frames[0], &data.surfaces[0], data.seq.gt[0])?;
    (1..data.len())
        .map(|k| t.step(model, store, &frames[k], &data.surfaces[k], data.rho[k]))
        .collect()
}

/// Scores predictions against `gt[1..]` of each sequence, pooling frames.
pub fn score(label: &str, preds: &[Vec<BBox>], data: &[TrackData], mode: SrMode) -> Result<EvalReport> {
    let p: Vec<BBox> = preds.iter().flatten().copied().collect();
    let gts: Vec<BBox> = data.iter().flat_map(|d| d.seq.gt[1..].iter().copied()).collect();
    let metrics = evaluate(&p, &gts, mode)?;
    let mean_iou = p.iter().zip(&gts).map(|(a, b)| a.iou(b)).sum::<f64>() / p.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        metrics,
        mean_iou,
        frames: p.len(),
    })
}

/// Tracks every sequence (in parallel, each with its own transition state).
pub fn evaluate_model(
    model: &MambaTrack,
    store: &ParamStore,
    data: &[TrackData],
    mode: SrMode,
) -> Result<EvalReport> {
    let preds = data
        .par_iter()
        .map(|d| track(model, store, d))
        .collect::<Result<Vec<_>>>()?;
    score(&model.cfg.ablation.label(), &preds, data, mode)
}
