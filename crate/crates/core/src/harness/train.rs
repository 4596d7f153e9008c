//! Training configuration and the clip-sampling training loop.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrackData;
use super::model::{Ablation, MambaTrack, ModelConfig};
use super::optim::{AdamW, StepLr};
use crate::error::{Error, Result};
use crate::events::BBox;
use crate::head::{total_loss, LossWeights};
use crate::numerics::{Graph, ParamStore};

/// Flat training configuration. Every key has a default; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Fraction of `steps` after which the decay applies.
    pub lr_decay_at: f64,
    pub steps: usize,
    pub lambda_focal: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub rgb_only: bool,
    pub event_only: bool,
    pub disable_dssm: bool,
    pub disable_gpf: bool,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub head_hidden: usize,
    /// Consecutive frames per sample, sharing one transition state.
    pub clip_len: usize,
    /// Search-center jitter as a fraction of `sqrt(w·h)`.
    pub center_jitter: f64,
    /// Log-scale jitter of the search window.
    pub scale_jitter: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            lr: 4e-4,
            batch_size: 4,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_decay_at: 0.75,
            steps: 2000,
            lambda_focal: w.focal,
            lambda_l1: w.l1,
            lambda_giou: w.giou,
            rgb_only: false,
            event_only: false,
            disable_dssm: false,
            disable_gpf: false,
            d_model: m.d_model,
            d_inner: m.d_inner,
            d_state: m.d_state,
            conv_kernel: m.conv_kernel,
            blocks: m.blocks,
            patch: m.patch,
            template_size: m.template_size,
            search_size: m.search_size,
            template_factor: m.template_factor,
            search_factor: m.search_factor,
            head_hidden: m.head_hidden,
            clip_len: 2,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad("lr_decay_at must be in [0, 1]");
        }
        if self.batch_size == 0 || self.clip_len == 0 {
            return bad("batch_size and clip_len must be positive");
        }
        if !(self.center_jitter >= 0.0 && self.center_jitter < 1.0) || !(self.scale_jitter >= 0.0) {
            return bad("center_jitter must be in [0, 1) and scale_jitter >= 0");
        }
        self.weights().validate()?;
        self.model().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            focal: self.lambda_focal,
            l1: self.lambda_l1,
            giou: self.lambda_giou,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            rgb_only: self.rgb_only,
            event_only: self.event_only,
            disable_dssm: self.disable_dssm,
            disable_gpf: self.disable_gpf,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
            blocks: self.blocks,
            patch: self.patch,
            template_size: self.template_size,
            search_size: self.search_size,
            template_factor: self.template_factor,
            search_factor: self.search_factor,
            head_hidden: self.head_hidden,
            ablation: self.ablation(),
        }
    }

    pub fn schedule(&self) -> StepLr {
        StepLr {
            lr: self.lr,
            factor: self.lr_decay,
            milestone: (self.lr_decay_at * self.steps as f64).round() as usize,
        }
    }
}

/// Model, parameters and optimizer state after training.
#[derive(Debug, Clone)]
pub struct Trained {
    pub config: TrainConfig,
    pub model: MambaTrack,
    pub store: ParamStore,
    pub optim: AdamW,
    /// Summed batch loss per step, recorded before that step's update.
    pub losses: Vec<f64>,
}

impl Trained {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = MambaTrack::init(&mut store, config.model(), config.seed)?;
        let optim = AdamW::new(&store, config.weight_decay);
        Ok(Self {
            config: config.clone(),
            model,
            store,
            optim,
            losses: Vec::new(),
        })
    }
}

/// One training frame: which sequence, which frame, and the jittered box the
/// search window is centered on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub seq: usize,
    pub frame: usize,
    pub center_on: BBox,
}

/// Draws one step's worth of clips.
pub fn draw_step(cfg: &TrainConfig, data: &[TrackData], rng: &mut ChaCha8Rng) -> Vec<Vec<Sample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let s = rng.random_range(0..data.len());
            let n = data[s].len();
            let clip = cfg.clip_len.min(n - 1);
            let start = rng.random_range(1..=n - clip);
            (start..start + clip)
                .map(|k| {
                    let gt = data[s].seq.gt[k];
                    let r = (gt.w * gt.h).sqrt() * cfg.center_jitter;
                    let dx = rng.random_range(-1.0..=1.0) * r;
                    let dy = rng.random_range(-1.0..=1.0) * r;
                    let k_scale = (rng.random_range(-1.0..=1.0) * cfg.scale_jitter).exp();
                    Sample {
                        seq: s,
                        frame: k,
                        center_on: BBox::new(gt.cx + dx, gt.cy + dy, gt.w * k_scale, gt.h * k_scale),
                    }
                })
                .collect()
        })
        .collect()
}

/// Forward, loss and backward of one clip. Adds `scale·∇loss` into the grads
/// in `store` and returns `scale·loss`.
pub fn clip_loss(
    model: &MambaTrack,
    store: &mut ParamStore,
    data: &TrackData,
    clip: &[Sample],
    weights: &LossWeights,
    scale: f64,
    backward: bool,
) -> Result<f64> {
    let Some(first) = clip.first() else {
        return Ok(0.0);
    };
    let mut state = data.state_before(model, store, first.frame)?;
    let search = model.cfg.search_size as f64;
    let mut total = 0.0;
    for s in clip {
        let window = TrackData::window(&model.cfg, &s.center_on)?;
        let input = data.input(s.frame, &window)?;
        let gt = window.to_crop(&data.seq.gt[s.frame]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &input, &mut state)?;
        let terms = total_loss(&mut g, &out.head, &gt, search, weights)?;
        let loss = g.affine(terms.total, scale, 0.0);
        total += g.scalar(loss);
        if backward {
            g.backward(loss, store)?;
        }
    }
    Ok(total)
}

/// Runs `cfg.steps` optimizer steps on `data` from a fresh initialisation.
pub fn train(cfg: &TrainConfig, data: &[TrackData]) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::Param("training needs at least one sequence".into()));
    }
    let mut t = Trained::init(cfg)?;
    let weights = cfg.weights();
    let sched = cfg.schedule();
    let mut rng = sampling_rng(cfg);
    for step in 0..cfg.steps {
        let batch = draw_step(cfg, data, &mut rng);
        let scale = 1.0 / batch.iter().map(Vec::len).sum::<usize>() as f64;
        t.store.zero_grads();
        let mut loss = 0.0;
        for clip in &batch {
            loss += clip_loss(&t.model, &mut t.store, &data[clip[0].seq], clip, &weights, scale, true)?;
        }
        if !loss.is_finite() {
            return Err(Error::NanLoss(step));
        }
        t.losses.push(loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("step {step} loss {loss:.5} lr {:.2e}", sched.at(step));
        }
        t.optim.update(&mut t.store, sched.at(step))?;
    }
    Ok(t)
}

/// Sampling stream, kept apart from parameter init.
pub fn sampling_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a)
}

/// Loads every sequence directory under `dir`, or `dir` itself if it holds
/// a sequence.
pub fn load_sequences(dir: &Path, model: &ModelConfig) -> Result<Vec<TrackData>> {
    use super::synth::{Sequence, META_FILE};
    let mut dirs = Vec::new();
    if dir.join(META_FILE).exists() {
        dirs.push(dir.to_path_buf());
    } else {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.join(META_FILE).exists() {
                dirs.push(p);
            }
        }
        dirs.sort();
    }
    if dirs.is_empty() {
        return Err(Error::format("data directory", format!("no sequences under {}", dir.display())));
    }
    dirs.iter()
        .map(|d| TrackData::new(Sequence::read(d)?, model))
        .collect()
}
