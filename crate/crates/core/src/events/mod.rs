//! Event streams, frame-aligned time surfaces and the token front end shared
//! by the RGB and event branches.

mod bbox;
mod crop;
mod embed;
pub mod io;

pub use bbox::BBox;
pub use crop::{crop_patch, CropWindow};
pub use embed::patch_embed;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One asynchronous brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: i64,
    /// +1 or -1.
    pub p: i8,
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    height: usize,
    width: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, height: usize, width: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Param(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::Param(format!("event {i} has polarity {}", e.p)));
            }
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Param(format!(
                "timestamps decrease between events {i} and {}",
                i + 1
            )));
        }
        Ok(Self {
            events,
            height,
            width,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            events: Vec::new(),
            height,
            width,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `lo <= t <= hi`, found by binary search.
    pub fn window(&self, lo: i64, hi: i64) -> &[Event] {
        let start = self.events.partition_point(|e| e.t < lo);
        let end = self.events.partition_point(|e| e.t <= hi);
        &self.events[start..end.max(start)]
    }
}

/// Signed, temporally decayed event accumulation for one RGB timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurface {
    /// `[H, W]`.
    pub grid: Tensor,
    pub t_ref: i64,
    pub delta_t: i64,
    pub contributing_count: usize,
    pub density: f64,
}

impl TimeSurface {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    /// The grid as a single-channel `[H, W, 1]` image.
    pub fn as_image(&self) -> Tensor {
        self.grid
            .clone()
            .reshape(&[self.height(), self.width(), 1])
            .expect("same element count")
    }
}

/// Linear temporal weight of an event `dt` microseconds from the reference.
pub fn temporal_weight(dt: i64, delta_t: i64) -> f64 {
    (1.0 - dt.unsigned_abs() as f64 / delta_t as f64).max(0.0)
}

/// Accumulates `p · max(0, 1 - |t_ref - t| / delta_t)` per cell of an `h × w`
/// grid. Sensor coordinates are rescaled when the grid differs from the sensor.
pub fn voxelize(
    stream: &EventStream,
    t_ref: i64,
    delta_t: i64,
    h: usize,
    w: usize,
) -> Result<TimeSurface> {
    if delta_t <= 0 {
        return Err(Error::Param(format!("delta_t must be > 0, got {delta_t}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Param(format!("grid must be non-empty, got {h}x{w}")));
    }
    let mut grid = Tensor::zeros(&[h, w]);
    let mut contributing = 0;
    // Events outside (t_ref - delta_t, t_ref + delta_t) have zero weight.
    for e in stream.window(t_ref - delta_t, t_ref + delta_t) {
        let weight = temporal_weight(t_ref - e.t, delta_t);
        if weight <= 0.0 {
            continue;
        }
        let row = e.y as usize * h / stream.height;
        let col = e.x as usize * w / stream.width;
        grid.data_mut()[row * w + col] += e.p as f64 * weight;
        contributing += 1;
    }
    let density = contributing as f64 / (h * w) as f64;
    Ok(TimeSurface {
        grid,
        t_ref,
        delta_t,
        contributing_count: contributing,
        density,
    })
}

/// Contributing events per grid cell.
pub fn event_density(surface: &TimeSurface) -> f64 {
    surface.contributing_count as f64 / (surface.height() * surface.width()) as f64
}
