//! The full tracker: two patch-embedded branches of Mamba blocks, fusion and
//! the center head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{patch_embed, CropWindow};
use crate::fusion::Gpf;
use crate::head::{HeadVars, TrackHead};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{uniform, BlockConfig, MambaBlock};

const RGB_CHANNELS: usize = 3;
const POS_INIT: f64 = 0.02;

/// Component switches, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub rgb_only: bool,
    pub event_only: bool,
    pub disable_dssm: bool,
    pub disable_gpf: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.rgb_only && self.event_only {
            return Err(Error::Config("rgb_only and event_only are mutually exclusive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.rgb_only, "rgb_only"),
            (self.event_only, "event_only"),
            (self.disable_dssm, "no_dssm"),
            (self.disable_gpf, "no_gpf"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

const fn row(rgb_only: bool, event_only: bool, disable_dssm: bool, disable_gpf: bool) -> Ablation {
    Ablation {
        rgb_only,
        event_only,
        disable_dssm,
        disable_gpf,
    }
}

/// Ablation matrix: RGB only, events only, no dynamic transition, no fusion
/// gate, full model.
pub const ABLATION_ROWS: [Ablation; 5] = [
    row(true, false, false, false),
    row(false, true, false, false),
    row(false, false, true, false),
    row(false, false, false, true),
    row(false, false, false, false),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Crop side as a multiple of `sqrt(w·h)` of the box.
    pub template_factor: f64,
    pub search_factor: f64,
    pub head_hidden: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_inner: 128,
            d_state: 4,
            conv_kernel: 4,
            blocks: 2,
            patch: 16,
            template_size: 64,
            search_size: 128,
            template_factor: 2.0,
            search_factor: 4.0,
            head_hidden: 16,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let dims = [
            self.d_model,
            self.d_inner,
            self.d_state,
            self.conv_kernel,
            self.blocks,
            self.patch,
            self.head_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for s in [self.template_size, self.search_size] {
            if s == 0 || s % self.patch != 0 {
                return Err(Error::Config(format!("patch {} does not divide crop {s}", self.patch)));
            }
        }
        if !(self.template_factor >= 1.0 && self.search_factor >= 1.0) {
            return Err(Error::Config("crop factors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch).pow(2)
    }

    fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_inner: self.d_inner,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
        }
    }
}

/// Crops and density for one frame. Crops are `[S, S, C]` with 3 RGB channels
/// and 1 event channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub rgb_template: Tensor,
    pub ev_template: Tensor,
    pub rgb_search: Tensor,
    pub ev_search: Tensor,
    pub rho: f64,
}

impl FrameInput {
    /// Samples the search crops of `window` and pairs them with fixed templates.
    pub fn build(
        templates: &(Tensor, Tensor),
        rgb: &Tensor,
        surface: &Tensor,
        rho: f64,
        window: &CropWindow,
    ) -> Result<Self> {
        Ok(Self {
            rgb_template: templates.0.clone(),
            ev_template: templates.1.clone(),
            rgb_search: window.sample(rgb)?,
            ev_search: window.sample(surface)?,
            rho,
        })
    }
}

/// Per-sequence running transitions, one vector per dynamic block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub a: Vec<Vec<f64>>,
}

impl TrackerState {
    pub fn reset(&mut self) {
        for v in &mut self.a {
            v.fill(1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Branch {
    embed: ParamId,
    pos_template: ParamId,
    pos_search: ParamId,
}

impl Branch {
    fn register(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, channels: usize, rng: &mut impl Rng) -> Self {
        let fan = cfg.patch * cfg.patch * channels;
        let pos = |rng: &mut ChaCha8Rng, l: usize| Tensor::from_fn(&[l, cfg.d_model], |_| rng.random_range(-POS_INIT..POS_INIT));
        let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
        Self {
            embed: store.add(format!("{prefix}.embed"), uniform(rng, &[fan, cfg.d_model], fan)),
            pos_template: store.add(format!("{prefix}.pos_template"), pos(&mut sub, cfg.template_tokens())),
            pos_search: store.add(format!("{prefix}.pos_search"), pos(&mut sub, cfg.search_tokens())),
        }
    }

    /// `[template tokens; search tokens]`.
    fn tokens(&self, g: &mut Graph, store: &ParamStore, patch: usize, template: &Tensor, search: &Tensor) -> Result<Var> {
        let w = g.param(store, self.embed);
        let (pt, ps) = (g.param(store, self.pos_template), g.param(store, self.pos_search));
        let t = g.constant(template);
        let s = g.constant(search);
        let t = patch_embed(g, t, patch, w, pt)?;
        let s = patch_embed(g, s, patch, w, ps)?;
        g.concat_rows(&[t, s])
    }
}

/// Everything a forward pass leaves on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub rgb_tokens: Var,
    pub event_tokens: Var,
    /// Search-region features fed to the head, `[L_s, 2D]`.
    pub fused: Var,
    pub head: HeadVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaTrack {
    pub cfg: ModelConfig,
    rgb: Branch,
    event: Branch,
    pub rgb_blocks: Vec<MambaBlock>,
    pub event_blocks: Vec<MambaBlock>,
    pub gpf: Option<Gpf>,
    pub head: TrackHead,
}

impl MambaTrack {
    /// Registers all parameters in `store`, drawing them from `seed`.
    pub fn init(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Branch::register(store, "rgb", &cfg, RGB_CHANNELS, &mut rng);
        let event = Branch::register(store, "event", &cfg, 1, &mut rng);
        let bc = cfg.block();
        let rgb_blocks = (0..cfg.blocks)
            .map(|i| MambaBlock::init(store, &format!("rgb.block{i}"), bc, false, &mut rng))
            .collect();
        let dynamic = !cfg.ablation.disable_dssm;
        let event_blocks = (0..cfg.blocks)
            .map(|i| MambaBlock::init(store, &format!("event.block{i}"), bc, dynamic, &mut rng))
            .collect();
        let gpf = (!cfg.ablation.disable_gpf).then(|| Gpf::register(store, "gpf", cfg.d_model, &mut rng));
        let head = TrackHead::register(store, "head", 2 * cfg.d_model, cfg.head_hidden, &mut rng);
        Ok(Self {
            cfg,
            rgb,
            event,
            rgb_blocks,
            event_blocks,
            gpf,
            head,
        })
    }

    pub fn new_state(&self) -> TrackerState {
        let a = self
            .event_blocks
            .iter()
            .filter(|b| b.dynamic.is_some())
            .map(|b| vec![1.0; b.cfg.d_inner])
            .collect();
        TrackerState { a }
    }

    /// Runs the event blocks. Dynamic blocks consume and advance `state`; with
    /// the transition disabled the blocks are static and ignore both `state`
    /// and `rho`.
    pub fn encode_events(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        state: &mut TrackerState,
        rho: f64,
    ) -> Result<Var> {
        let mut slots = state.a.iter_mut();
        for b in &self.event_blocks {
            x = match b.dynamic {
                Some(_) => {
                    let slot = slots
                        .next()
                        .ok_or_else(|| Error::Param("tracker state has too few slots".into()))?;
                    b.forward(g, store, x, Some(slot), Some(rho))?
                }
                None => b.forward(g, store, x, None, None)?,
            };
        }
        Ok(x)
    }

    pub fn encode_rgb(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.rgb_blocks {
            x = b.forward(g, store, x, None, None)?;
        }
        Ok(x)
    }

    /// One frame. Ablated modalities see all-zero crops (and `ρ = 0` when
    /// events are removed).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &FrameInput,
        state: &mut TrackerState,
    ) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let zero = |t: &Tensor| Tensor::zeros(t.shape());
        let ab = cfg.ablation;
        let (et, es, rho) = if ab.rgb_only {
            (zero(&input.ev_template), zero(&input.ev_search), 0.0)
        } else {
            (input.ev_template.clone(), input.ev_search.clone(), input.rho)
        };
        let (rt, rs) = if ab.event_only {
            (zero(&input.rgb_template), zero(&input.rgb_search))
        } else {
            (input.rgb_template.clone(), input.rgb_search.clone())
        };

        let rgb_tokens = self.rgb.tokens(g, store, cfg.patch, &rt, &rs)?;
        let rgb_tokens = self.encode_rgb(g, store, rgb_tokens)?;
        let ev_tokens = self.event.tokens(g, store, cfg.patch, &et, &es)?;
        let ev_tokens = self.encode_events(g, store, ev_tokens, state, rho)?;

        let (lt, ls) = (cfg.template_tokens(), cfg.search_tokens());
        let f_rgb = g.slice_rows(rgb_tokens, lt, ls)?;
        let f_ev = g.slice_rows(ev_tokens, lt, ls)?;
        let fused = match &self.gpf {
            Some(gpf) => gpf.forward(g, store, f_ev, f_rgb, rho)?,
            None => g.concat_cols(&[f_ev, f_rgb])?,
        };
        let head = self.head.forward(g, store, fused)?;
        Ok(ForwardVars {
            rgb_tokens,
            event_tokens: ev_tokens,
            fused,
            head,
        })
    }
}
