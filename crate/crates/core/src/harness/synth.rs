//! Seeded synthetic RGB + event sequences: a bright box drifting over a dark,
//! lightly textured background.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::io::{
    read_events, read_frames, read_ground_truth, write_events, write_frames, write_ground_truth,
    FrameStack,
};
use crate::events::{voxelize, BBox, Event, EventStream, TimeSurface};
use crate::numerics::Tensor;

pub const FRAMES_FILE: &str = "frames.frm";
pub const EVENTS_FILE: &str = "events.evt";
pub const GT_FILE: &str = "groundtruth.txt";
pub const META_FILE: &str = "sequence.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Sinusoidal,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Box side lengths are drawn from `[target_min, target_max]`.
    pub target_min: f64,
    pub target_max: f64,
    pub motion: Motion,
    /// Pixels per frame (peak speed for `sinusoidal`, step scale for `random_walk`).
    pub speed: f64,
    /// Frames per sinusoid cycle.
    pub period: f64,
    /// Log-brightness step that fires one event.
    pub event_threshold: f64,
    /// Cap on events one pixel may fire per frame interval.
    pub max_events_per_pixel: usize,
    /// Expected noise events per pixel per frame interval.
    pub noise_rate: f64,
    /// Global brightness multiplier.
    pub illumination: f64,
    /// First frame of a dimmed stretch, with `dark_frames` frames at `dark_level`.
    pub dark_start: usize,
    pub dark_frames: usize,
    pub dark_level: f64,
    /// Frames over which the light fades in and out of the dim stretch.
    pub dark_ramp: usize,
    /// Std of additive RGB sensor noise.
    pub rgb_noise: f64,
    pub frame_interval_us: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            frames: 200,
            target_min: 20.0,
            target_max: 28.0,
            motion: Motion::Sinusoidal,
            speed: 1.5,
            period: 80.0,
            event_threshold: 0.15,
            max_events_per_pixel: 4,
            noise_rate: 5e-4,
            illumination: 1.0,
            dark_start: 0,
            dark_frames: 0,
            dark_level: 0.1,
            dark_ramp: 20,
            rgb_noise: 0.02,
            frame_interval_us: 33_333,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("sensor {}x{} too small", self.width, self.height));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("sensor exceeds u16 coordinates".into());
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(self.target_min > 0.0 && self.target_min <= self.target_max) {
            return bad("target size range must satisfy 0 < min <= max".into());
        }
        if self.target_max >= self.height.min(self.width) as f64 {
            return bad("target does not fit in the sensor".into());
        }
        let nonneg = [self.speed, self.noise_rate, self.rgb_noise, self.period];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("speed, period, noise_rate and rgb_noise must be finite and >= 0".into());
        }
        if !(self.event_threshold > 0.0) || !(self.illumination > 0.0) || !(self.dark_level > 0.0) {
            return bad("event_threshold, illumination and dark_level must be > 0".into());
        }
        if self.frame_interval_us <= 0 {
            return bad("frame_interval_us must be > 0".into());
        }
        Ok(())
    }
}

/// On-disk sidecar describing a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub frame_interval_us: i64,
    /// Half-width of the time-surface window.
    pub delta_t_us: i64,
}

/// Frames, events and per-frame boxes of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub meta: SequenceMeta,
    pub frames: FrameStack,
    pub events: EventStream,
    pub gt: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_time(&self, i: usize) -> i64 {
        i as i64 * self.meta.frame_interval_us
    }

    /// Time surface aligned with frame `i`, at sensor resolution.
    pub fn surface(&self, i: usize) -> Result<TimeSurface> {
        voxelize(
            &self.events,
            self.frame_time(i),
            self.meta.delta_t_us,
            self.meta.height,
            self.meta.width,
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_frames(&dir.join(FRAMES_FILE), &self.frames)?;
        write_events(&dir.join(EVENTS_FILE), self.events.events())?;
        write_ground_truth(&dir.join(GT_FILE), &self.gt)?;
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::format("sequence meta", e.to_string()))?;
        fs::write(dir.join(META_FILE), meta + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: SequenceMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)
            .map_err(|e| Error::format("sequence meta", e.to_string()))?;
        let frames = read_frames(&dir.join(FRAMES_FILE))?;
        if (frames.height, frames.width, frames.len()) != (meta.height, meta.width, meta.frames) {
            return Err(Error::format("frame file", "dimensions disagree with sequence.json"));
        }
        let events = read_events(&dir.join(EVENTS_FILE), meta.height, meta.width)?;
        let gt_path = dir.join(GT_FILE);
        if !gt_path.exists() {
            return Err(Error::format("sequence", format!("missing {}", gt_path.display())));
        }
        let gt = read_ground_truth(&gt_path)?;
        if gt.len() != meta.frames {
            return Err(Error::format(
                "ground truth",
                format!("{} boxes for {} frames", gt.len(), meta.frames),
            ));
        }
        Ok(Self {
            meta,
            frames,
            events,
            gt,
        })
    }
}

const TARGET_RGB: [f64; 3] = [0.95, 0.8, 0.4];
const LOG_EPS: f64 = 1e-3;

/// Renders a sequence in memory. Frames are rounded to `f32` so a written and
/// re-read sequence is identical to the one returned here.
pub fn synth_sequence(cfg: &SynthConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let bw = rng.random_range(cfg.target_min..=cfg.target_max);
    let bh = rng.random_range(cfg.target_min..=cfg.target_max);
    let centers = trajectory(cfg, bw, bh, &mut rng);

    let background: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.04..0.12)).collect();
    let noise = Normal::new(0.0, cfg.rgb_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    let mut events = Vec::new();
    let mut prev_log: Option<Vec<f64>> = None;
    for (k, &(cx, cy)) in centers.iter().enumerate() {
        let bbox = BBox::new(cx, cy, bw, bh);
        let light = cfg.illumination * illumination_at(cfg, k);
        let cover = coverage(&bbox, h, w);
        let mut rgb = Tensor::zeros(&[h, w, 3]);
        let mut log_gray = vec![0.0; h * w];
        for (i, &c) in cover.iter().enumerate() {
            let mut gray = 0.0;
            for (ch, &target) in TARGET_RGB.iter().enumerate() {
                let clean = light * (background[i] + (target - background[i]) * c);
                gray += clean / 3.0;
                let noisy = if cfg.rgb_noise > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
                rgb.data_mut()[i * 3 + ch] = noisy.clamp(0.0, 1.0) as f32 as f64;
            }
            log_gray[i] = (gray + LOG_EPS).ln();
        }
        if let Some(prev) = &prev_log {
            emit_events(cfg, k, prev, &log_gray, &mut rng, &mut events)?;
        }
        prev_log = Some(log_gray);
        frames.push(rgb);
        gt.push(bbox);
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    let events = EventStream::new(events, h, w)?;
    Ok(Sequence {
        meta: SequenceMeta {
            height: h,
            width: w,
            frames: cfg.frames,
            frame_interval_us: cfg.frame_interval_us,
            delta_t_us: cfg.frame_interval_us,
        },
        frames: FrameStack {
            height: h,
            width: w,
            channels: 3,
            frames,
        },
        events,
        gt,
    })
}

/// Light level in `[dark_level, 1]` for frame `k`, ramping linearly in and
/// out of the dim stretch.
fn illumination_at(cfg: &SynthConfig, k: usize) -> f64 {
    if cfg.dark_frames == 0 {
        return 1.0;
    }
    let (start, end) = (cfg.dark_start as f64, (cfg.dark_start + cfg.dark_frames) as f64);
    let ramp = cfg.dark_ramp.max(1) as f64;
    let k = k as f64;
    // 0 outside the stretch, 1 fully dark
    let depth = if k < start {
        1.0 - (start - k) / ramp
    } else if k >= end {
        1.0 - (k - end + 1.0) / ramp
    } else {
        1.0
    };
    let depth = depth.clamp(0.0, 1.0);
    1.0 + (cfg.dark_level - 1.0) * depth
}

fn trajectory(cfg: &SynthConfig, bw: f64, bh: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (lo_x, hi_x) = (bw / 2.0, cfg.width as f64 - bw / 2.0);
    let (lo_y, hi_y) = (bh / 2.0, cfg.height as f64 - bh / 2.0);
    let (mx, my) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clamped = false;
    let mut out = Vec::with_capacity(cfg.frames);
    let (mut x, mut y) = (mx, my);
    for k in 0..cfg.frames {
        let t = k as f64;
        let (nx, ny) = match cfg.motion {
            Motion::Linear => {
                let s = cfg.speed * (t - cfg.frames as f64 / 2.0);
                (mx + s * theta.cos(), my + s * theta.sin())
            }
            Motion::Sinusoidal => {
                // amplitude chosen so the peak speed equals `speed`
                let omega = std::f64::consts::TAU / cfg.period.max(1.0);
                let amp = cfg.speed / omega;
                (
                    mx + amp * (omega * t + phase).sin() * theta.cos(),
                    my + amp * (omega * t + phase).sin() * theta.sin()
                        + 0.5 * amp * (0.5 * omega * t).sin(),
                )
            }
            Motion::RandomWalk if k == 0 => (x, y),
            Motion::RandomWalk => (
                x + cfg.speed * step.sample(rng),
                y + cfg.speed * step.sample(rng),
            ),
        };
        x = nx.clamp(lo_x, hi_x);
        y = ny.clamp(lo_y, hi_y);
        clamped |= x != nx || y != ny;
        out.push((x, y));
    }
    if clamped {
        log::warn!("target trajectory left the frame and was clamped to the sensor");
    }
    out
}

/// Fraction of each pixel covered by `b`.
fn coverage(b: &BBox, h: usize, w: usize) -> Vec<f64> {
    let overlap = |lo: f64, hi: f64, i: usize| (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
    let xs: Vec<f64> = (0..w).map(|j| overlap(b.x1(), b.x2(), j)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = overlap(b.y1(), b.y2(), r);
        if fy == 0.0 {
            continue;
        }
        for (c, &fx) in xs.iter().enumerate() {
            out[r * w + c] = fx * fy;
        }
    }
    out
}

/// Events for the interval ending at frame `k`.
fn emit_events(
    cfg: &SynthConfig,
    k: usize,
    prev: &[f64],
    cur: &[f64],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Event>,
) -> Result<()> {
    let w = cfg.width;
    let t0 = (k as i64 - 1) * cfg.frame_interval_us;
    let stamp = |rng: &mut ChaCha8Rng| t0 + rng.random_range(1..=cfg.frame_interval_us);
    for (i, (&a, &b)) in prev.iter().zip(cur).enumerate() {
        let d = b - a;
        let n = ((d.abs() / cfg.event_threshold).floor() as usize).min(cfg.max_events_per_pixel);
        let p = if d > 0.0 { 1 } else { -1 };
        for _ in 0..n {
            out.push(Event {
                x: (i % w) as u16,
                y: (i / w) as u16,
                t: stamp(rng),
                p,
            });
        }
    }
    if cfg.noise_rate > 0.0 {
        let lambda = cfg.noise_rate * (cfg.height * w) as f64;
        let count = Poisson::new(lambda)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng) as usize;
        for _ in 0..count {
            out.push(Event {
                x: rng.random_range(0..w) as u16,
                y: rng.random_range(0..cfg.height) as u16,
                t: stamp(rng),
                p: if rng.random_bool(0.5) { 1 } else { -1 },
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn static_target_without_noise_is_silent() {
        let cfg = SynthConfig {
            speed: 0.0,
            noise_rate: 0.0,
            ..small()
        };
        let seq = synth_sequence(&cfg).unwrap();
        assert!(seq.events.is_empty());
        for i in 0..seq.len() {
            assert_eq!(seq.surface(i).unwrap().density, 0.0);
        }
    }

    #[test]
    fn faster_target_fires_more_events() {
        for motion in [Motion::Linear, Motion::Sinusoidal] {
            let slow = SynthConfig {
                speed: 0.7,
                noise_rate: 0.0,
                motion,
                ..small()
            };
            let fast = SynthConfig {
                speed: 1.4,
                ..slow.clone()
            };
            let a = synth_sequence(&slow).unwrap().events.len();
            let b = synth_sequence(&fast).unwrap().events.len();
            assert!(b > a, "{motion:?}: {b} <= {a}");
        }
    }

    #[test]
    fn same_seed_writes_identical_files() {
        let cfg = small();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_sequence(&cfg).unwrap().write(d1.path()).unwrap();
        synth_sequence(&cfg).unwrap().write(d2.path()).unwrap();
        for f in [FRAMES_FILE, EVENTS_FILE, GT_FILE, META_FILE] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let other = synth_sequence(&SynthConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(other, synth_sequence(&small()).unwrap());
    }

    #[test]
    fn round_trip_through_disk() {
        let seq = synth_sequence(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        seq.write(dir.path()).unwrap();
        assert_eq!(Sequence::read(dir.path()).unwrap(), seq);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        synth_sequence(&small()).unwrap().write(dir.path()).unwrap();
        fs::remove_file(dir.path().join(GT_FILE)).unwrap();
        assert!(matches!(Sequence::read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn boxes_stay_on_sensor_and_events_are_ordered() {
        let cfg = SynthConfig {
            motion: Motion::Linear,
            speed: 3.0,
            ..small()
        };
        let seq = synth_sequence(&cfg).unwrap();
        for b in &seq.gt {
            assert!(b.x1() >= 0.0 && b.y1() >= 0.0);
            assert!(b.x2() <= cfg.width as f64 && b.y2() <= cfg.height as f64);
        }
        let ts: Vec<i64> = seq.events.events().iter().map(|e| e.t).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert!(ts.iter().all(|&t| t > 0 && t <= seq.frame_time(seq.len() - 1)));
    }

    #[test]
    fn polarity_follows_brightness_change() {
        // brightening pixels lie under the new box, darkening ones under the old
        let cfg = SynthConfig {
            motion: Motion::Linear,
            speed: 2.0,
            noise_rate: 0.0,
            rgb_noise: 0.0,
            frames: 3,
            ..small()
        };
        let seq = synth_sequence(&cfg).unwrap();
        let touches = |b: &BBox, e: &Event| {
            let (x, y) = (e.x as f64, e.y as f64);
            x + 1.0 > b.x1() && x < b.x2() && y + 1.0 > b.y1() && y < b.y2()
        };
        let first: Vec<&Event> = seq.events.events().iter().filter(|e| e.t <= seq.frame_time(1)).collect();
        assert!(first.iter().any(|e| e.p > 0) && first.iter().any(|e| e.p < 0));
        for e in first {
            let b = if e.p > 0 { &seq.gt[1] } else { &seq.gt[0] };
            assert!(touches(b, e), "event {e:?}");
        }
    }

    #[test]
    fn dim_stretch_darkens_frames() {
        let cfg = SynthConfig {
            dark_start: 5,
            dark_frames: 5,
            dark_ramp: 2,
            dark_level: 0.2,
            rgb_noise: 0.0,
            ..small()
        };
        let seq = synth_sequence(&cfg).unwrap();
        let mean = |i: usize| seq.frames.frames[i].data().iter().sum::<f64>();
        assert!(mean(7) < 0.3 * mean(0));
        assert_eq!(illumination_at(&cfg, 0), 1.0);
        assert!((illumination_at(&cfg, 7) - 0.2).abs() < 1e-12);
        assert_eq!(illumination_at(&cfg, 15), 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { frames: 1, ..small() },
            SynthConfig { target_min: 30.0, target_max: 20.0, ..small() },
            SynthConfig { event_threshold: 0.0, ..small() },
        ] {
            assert!(matches!(synth_sequence(&cfg), Err(Error::Config(_))));
        }
        let json = r#"{"height": 64, "colour": 3}"#;
        assert!(serde_json::from_str::<SynthConfig>(json).is_err());
    }
}
