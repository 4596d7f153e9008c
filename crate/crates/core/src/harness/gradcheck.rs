//! Finite-difference suites over primitives, blocks and the whole tracker.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::TrackData;
use super::model::{MambaTrack, ModelConfig, TrackerState};
use super::synth::{synth_sequence, SynthConfig};
use crate::error::{Error, Result};
use crate::events::{patch_embed, BBox};
use crate::fusion::Gpf;
use crate::head::{total_loss, HeadVars, LossWeights, TrackHead};
use crate::numerics::gradcheck::{check_params, CheckReport, Sampling};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::ssm::{selective_scan_op, BlockConfig, DynamicTransition, MambaBlock};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-6;
pub const FULL_TOL: f64 = 1e-4;

/// Entries checked per tensor in the full-model suite.
pub const FULL_ENTRIES_PER_TENSOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    Full,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Self::Primitives),
            "blocks" => Ok(Self::Blocks),
            "full" => Ok(Self::Full),
            other => Err(Error::Param(format!(
                "unknown gradcheck scope {other:?}, expected primitives|blocks|full"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// Tensor holding the largest error.
    pub worst: String,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(CaseResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "{:<4} {:<22} max_rel_err {:.3e} (tol {:.0e}, {} entries, worst {})",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.tol,
                c.checked,
                c.worst
            )?;
        }
        write!(
            f,
            "{} in {:.1} s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.seconds
        )
    }
}

/// Runs one scope. `fault` names an op whose adjoint is deliberately
/// corrupted, to show the suite can fail.
pub fn run(scope: Scope, seed: u64, fault: Option<&'static str>) -> Result<GradcheckReport> {
    let start = Instant::now();
    let cases = match scope {
        Scope::Primitives => primitives(seed, fault)?,
        Scope::Blocks => blocks(seed, fault)?,
        Scope::Full => vec![full(seed, fault)?],
    };
    Ok(GradcheckReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn summarize(name: &str, tol: f64, r: &CheckReport) -> CaseResult {
    CaseResult {
        name: name.to_string(),
        max_rel_err: r.max_rel_err(),
        tol,
        checked: r.tensors.iter().map(|t| t.checked).sum(),
        worst: r.worst().map_or_else(String::new, |t| t.name.clone()),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Projects `out` onto fixed random weights so every output entry matters.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(&random(g.shape(out), &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Body = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One primitive: random parameters of the given shapes, `body` applied, then
/// a random readout.
fn primitive(name: &str, shapes: &[&[usize]], body: Body, seed: u64, fault: Option<&'static str>) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("{name}.in{i}"), random(s, &mut rng)))
        .collect();
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = body(g, &vars)?;
        readout(g, out, seed ^ 0xface)
    })?;
    Ok(summarize(name, PRIMITIVE_TOL, &report))
}

fn primitives(seed: u64, fault: Option<&'static str>) -> Result<Vec<CaseResult>> {
    let cases: Vec<(&str, Vec<&[usize]>, Body)> = vec![
        ("matmul", vec![&[5, 4], &[4, 3]], |g, v| g.matmul(v[0], v[1])),
        ("linear", vec![&[5, 4], &[4, 3], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ("add", vec![&[4, 3], &[4, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![&[4, 3], &[4, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![&[4, 3], &[4, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale_cols", vec![&[4, 3], &[3]], |g, v| g.scale_cols(v[0], v[1])),
        ("scale_by", vec![&[1], &[4, 3]], |g, v| g.scale_by(v[0], v[1])),
        ("affine", vec![&[4, 3]], |g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        ("silu", vec![&[4, 3]], |g, v| Ok(g.silu(v[0]))),
        ("gelu", vec![&[4, 3]], |g, v| Ok(g.gelu(v[0]))),
        ("sigmoid", vec![&[4, 3]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softplus", vec![&[4, 3]], |g, v| Ok(g.softplus(v[0]))),
        ("layer_norm", vec![&[4, 6], &[6], &[6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
        }),
        ("conv1d_causal", vec![&[7, 3], &[3, 3]], |g, v| g.depthwise_conv1d(v[0], v[1], true)),
        ("conv1d_centered", vec![&[7, 3], &[4, 3]], |g, v| g.depthwise_conv1d(v[0], v[1], false)),
        ("reverse_rows", vec![&[5, 2]], |g, v| Ok(g.reverse_rows(v[0]))),
        ("concat_cols", vec![&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![&[2, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_rows", vec![&[6, 2]], |g, v| g.slice_rows(v[0], 2, 3)),
        ("select", vec![&[4, 3]], |g, v| g.select(v[0], &[0, 5, 5, 11])),
        ("mean_rows", vec![&[5, 3]], |g, v| Ok(g.mean_rows(v[0]))),
        ("norm2", vec![&[5]], |g, v| Ok(g.norm2(v[0]))),
        ("mean", vec![&[5, 2]], |g, v| Ok(g.mean(v[0]))),
        ("reshape", vec![&[6, 2]], |g, v| g.reshape(v[0], &[3, 4])),
        ("im2col", vec![&[4, 4, 2]], |g, v| g.im2col(v[0], 3)),
        ("patchify", vec![&[4, 4, 2]], |g, v| g.patchify(v[0], 2)),
        (
            "selective_scan",
            vec![&[6, 3], &[6, 3], &[3, 2], &[6, 2], &[6, 2], &[3], &[3]],
            |g, v| {
                // keep Δ > 0 and the bias small enough that A stays unclamped
                let delta = g.softplus(v[1]);
                let bias = g.affine(v[6], 0.1, 0.0);
                selective_scan_op(g, v[0], delta, v[2], v[3], v[4], v[5], Some(bias))
            },
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, body)) in cases.into_iter().enumerate() {
        out.push(primitive(name, &shapes, body, seed.wrapping_add(i as u64), fault)?);
    }
    out.push(dynamic_case(seed, fault)?);
    out.push(loss_case(seed, fault)?);
    Ok(out)
}

fn dynamic_case(seed: u64, fault: Option<&'static str>) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    let mut store = ParamStore::new();
    let d = DynamicTransition::register(&mut store, "dyn", 5);
    let w = store.get_mut(d.w_a);
    w.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    let a_prev: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let a = d.record(g, s, &a_prev, 0.37)?;
        readout(g, a, seed)
    })?;
    Ok(summarize("dynamic_transition", PRIMITIVE_TOL, &report))
}

/// Focal, L1 and GIoU terms through sigmoid head maps.
fn loss_case(seed: u64, fault: Option<&'static str>) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x105);
    let grid = 4;
    let mut store = ParamStore::new();
    let score = store.add("score", random(&[grid * grid, 1], &mut rng));
    let size = store.add("size", random(&[grid * grid, 2], &mut rng));
    let offset = store.add("offset", random(&[grid * grid, 2], &mut rng));
    let gt = BBox::new(21.3, 9.8, 11.0, 7.5);
    let report = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let head = HeadVars {
            grid,
            score: {
                let v = g.param(s, score);
                g.sigmoid(v)
            },
            size: {
                let v = g.param(s, size);
                g.sigmoid(v)
            },
            offset: {
                let v = g.param(s, offset);
                g.sigmoid(v)
            },
        };
        Ok(total_loss(g, &head, &gt, 32.0, &LossWeights::default())?.total)
    })?;
    Ok(summarize("joint_loss", PRIMITIVE_TOL, &report))
}

fn blocks(seed: u64, fault: Option<&'static str>) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (6, 4);
    let x = random(&[l, d], &mut rng);
    let y = random(&[l, d], &mut rng);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let block = MambaBlock::init(&mut store, "block", BlockConfig::new(d, 3), true, &mut rng);
    let a_prev: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.2..0.9)).collect();
    let r = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let xv = g.constant(&x);
        let mut st = a_prev.clone();
        let o = block.forward(g, s, xv, Some(&mut st), Some(0.4))?;
        readout(g, o, seed)
    })?;
    out.push(summarize("mamba_block", BLOCK_TOL, &r));

    let mut store = ParamStore::new();
    let gpf = Gpf::register(&mut store, "gpf", d, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        // move the gate weights off zero so both inputs of the gate matter
        let t = store.get_mut(id);
        if t.numel() == 2 {
            t.data_mut().copy_from_slice(&[0.8, -0.6]);
        }
    }
    let r = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let (a, b) = (g.constant(&x), g.constant(&y));
        let o = gpf.forward(g, s, a, b, 0.3)?;
        readout(g, o, seed)
    })?;
    out.push(summarize("gpf", BLOCK_TOL, &r));

    let mut store = ParamStore::new();
    let head = TrackHead::register(&mut store, "head", 3, 4, &mut rng);
    let feats = random(&[16, 3], &mut rng);
    let gt = BBox::new(13.0, 18.0, 9.0, 12.0);
    let r = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let f = g.constant(&feats);
        let h = head.forward(g, s, f)?;
        Ok(total_loss(g, &h, &gt, 32.0, &LossWeights::default())?.total)
    })?;
    out.push(summarize("head_and_loss", BLOCK_TOL, &r));

    let mut store = ParamStore::new();
    let w = store.add("embed.w", random(&[8, 3], &mut rng));
    let pos = store.add("embed.pos", random(&[4, 3], &mut rng));
    let grid = random(&[4, 4, 2], &mut rng);
    let r = check_params(&mut store, Sampling::default(), |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let (wv, pv, gv) = (g.param(s, w), g.param(s, pos), g.constant(&grid));
        let o = patch_embed(g, gv, 2, wv, pv)?;
        readout(g, o, seed)
    })?;
    out.push(summarize("patch_embed", BLOCK_TOL, &r));
    Ok(out)
}

/// Whole tracker at default dims on a two-frame clip. Transition states are
/// fixed from the unperturbed parameters, matching the truncated gradient the
/// trainer uses.
fn full(seed: u64, fault: Option<&'static str>) -> Result<CaseResult> {
    let cfg = ModelConfig::default();
    let seq = synth_sequence(&SynthConfig {
        frames: 3,
        seed,
        ..SynthConfig::default()
    })?;
    let data = TrackData::new(seq, &cfg)?;
    let mut store = ParamStore::new();
    let model = MambaTrack::init(&mut store, cfg, seed)?;
    // jitter every entry so none sits at a symmetric init value (zero bias, unit gain)
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf011);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let frames = [1usize, 2];
    let mut inputs = Vec::new();
    for &k in &frames {
        let gt = data.seq.gt[k];
        let center = BBox::new(gt.cx + 2.5, gt.cy - 1.5, gt.w, gt.h);
        let w = TrackData::window(&cfg, &center)?;
        let states: TrackerState = data.state_before(&model, &store, k)?;
        inputs.push((data.input(k, &w)?, w.to_crop(&gt), states));
    }
    let weights = LossWeights::default();
    let search = cfg.search_size as f64;
    let sampling = Sampling {
        max_per_tensor: FULL_ENTRIES_PER_TENSOR,
        seed,
    };
    let report = check_params(&mut store, sampling, |g, s| {
        if let Some(op) = fault {
            g.inject_adjoint_fault(op);
        }
        let mut terms = Vec::new();
        for (input, gt, state) in &inputs {
            let mut st = state.clone();
            let out = model.forward(g, s, input, &mut st)?;
            terms.push(total_loss(g, &out.head, gt, search, &weights)?.total);
        }
        g.add(terms[0], terms[1])
    })?;
    Ok(summarize("full_model_2_frames", FULL_TOL, &report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let r = run(Scope::Primitives, 0, None).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.cases.len() > 25);
    }

    #[test]
    fn blocks_pass() {
        let r = run(Scope::Blocks, 1, None).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_adjoint_fails() {
        let r = run(Scope::Primitives, 0, Some("gelu")).unwrap();
        assert!(!r.passed());
        let bad: Vec<&str> = r.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        assert_eq!(bad, ["gelu"]);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("full".parse::<Scope>().unwrap(), Scope::Full);
        assert!("everything".parse::<Scope>().is_err());
    }
}
