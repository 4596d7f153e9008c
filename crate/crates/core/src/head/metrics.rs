use std::fmt;

use crate::error::{Error, Result};
use crate::events::BBox;

/// IoU thresholds `0, 0.05, …, 1`.
pub const SR_THRESHOLDS: usize = 21;
/// Center error, in pixels, counted as a hit for PR.
pub const PR_THRESHOLD_PX: f64 = 20.0;
/// Normalized thresholds `0, 0.025, …, 0.5`.
pub const NPR_THRESHOLDS: usize = 21;
const NPR_MAX: f64 = 0.5;

/// How the success rate collapses the IoU curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SrMode {
    /// Area under the success curve.
    #[default]
    Auc,
    /// Fraction of frames with IoU ≥ 0.5.
    T50,
}

impl std::str::FromStr for SrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(Self::Auc),
            "t50" => Ok(Self::T50),
            other => Err(Error::Param(format!("unknown sr mode {other:?}, expected auc|t50"))),
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SR {:.1} PR {:.1} NPR {:.1}", self.sr, self.pr, self.npr)
    }
}

impl Metrics {
    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        format!("sr={}\npr={}\nnpr={}\n", self.sr, self.pr, self.npr)
    }
}

fn success(iou: f64, tau: f64) -> bool {
    // at τ = 0 a frame only counts if the boxes overlap at all
    if tau == 0.0 {
        iou > 0.0
    } else {
        iou >= tau
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Success rate, precision rate and normalized precision rate of a track.
pub fn evaluate(preds: &[BBox], gts: &[BBox], mode: SrMode) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(Error::shape("metrics", &[preds.len()], &[gts.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Param("metrics need at least one frame".into()));
    }
    let n = preds.len();
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).collect();
    let errs: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.center_distance(g)).collect();
    let norm_errs: Vec<f64> = errs
        .iter()
        .zip(gts)
        .map(|(e, g)| e / (g.w * g.h).sqrt())
        .collect();

    let sr = match mode {
        SrMode::Auc => {
            (0..SR_THRESHOLDS)
                .map(|k| {
                    let tau = k as f64 / (SR_THRESHOLDS - 1) as f64;
                    percent(ious.iter().filter(|&&v| success(v, tau)).count(), n)
                })
                .sum::<f64>()
                / SR_THRESHOLDS as f64
        }
        SrMode::T50 => percent(ious.iter().filter(|&&v| v >= 0.5).count(), n),
    };
    let pr = percent(errs.iter().filter(|&&e| e <= PR_THRESHOLD_PX).count(), n);
    let npr = (0..NPR_THRESHOLDS)
        .map(|k| {
            let th = NPR_MAX * k as f64 / (NPR_THRESHOLDS - 1) as f64;
            percent(norm_errs.iter().filter(|&&e| e <= th).count(), n)
        })
        .sum::<f64>()
        / NPR_THRESHOLDS as f64;
    Ok(Metrics { sr, pr, npr })
}
