use super::HeadVars;
use crate::error::{Error, Result};
use crate::events::BBox;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

const P_MIN: f64 = 1e-12;
const MIN_OVERLAP: f64 = 0.7;

/// Weights of the focal, L1 and GIoU terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.5,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.focal, self.l1, self.giou].iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Param(format!("loss weights must be positive, got {self:?}")))
        }
    }
}

/// Training targets for one search crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[G, G]` Gaussian heatmap with a single 1 at the gt cell.
    pub heatmap: Tensor,
    /// Row-major index of the gt cell.
    pub cell: usize,
    /// Ground truth normalized by the search size: `(cx, cy, w, h)`.
    pub gt_norm: [f64; 4],
}

/// Radius, in cells, at which a shifted box still overlaps the original by 0.7.
fn gaussian_radius(h: f64, w: f64) -> f64 {
    let m = MIN_OVERLAP;
    let b1 = h + w;
    let c1 = w * h * (1.0 - m) / (1.0 + m);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - m) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * m;
    let b3 = -2.0 * m * (h + w);
    let c3 = (m - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Encodes a crop-space gt box onto a `grid × grid` map over `search_size` pixels.
pub fn encode_target(gt: &BBox, grid: usize, search_size: f64) -> Result<TargetMaps> {
    gt.validate()?;
    if !(0.0..search_size).contains(&gt.cx) || !(0.0..search_size).contains(&gt.cy) {
        return Err(Error::Param(format!(
            "gt center ({}, {}) outside the {search_size} px search region",
            gt.cx, gt.cy
        )));
    }
    let stride = search_size / grid as f64;
    let ci = ((gt.cy / stride) as usize).min(grid - 1);
    let cj = ((gt.cx / stride) as usize).min(grid - 1);
    let radius = gaussian_radius(gt.h / stride, gt.w / stride).max(0.0).floor() as i64;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut heatmap = Tensor::zeros(&[grid, grid]);
    for di in -radius..=radius {
        for dj in -radius..=radius {
            let (i, j) = (ci as i64 + di, cj as i64 + dj);
            if i < 0 || j < 0 || i >= grid as i64 || j >= grid as i64 {
                continue;
            }
            let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            if v >= f64::EPSILON {
                heatmap.set(&[i as usize, j as usize], v);
            }
        }
    }
    Ok(TargetMaps {
        heatmap,
        cell: ci * grid + cj,
        gt_norm: [
            gt.cx / search_size,
            gt.cy / search_size,
            gt.w / search_size,
            gt.h / search_size,
        ],
    })
}

fn check_target(score: &[f64], target: &[f64]) -> Result<usize> {
    if score.len() != target.len() {
        return Err(Error::shape("focal_loss", &[score.len()], &[target.len()]));
    }
    let pos = target.iter().filter(|&&t| t == 1.0).count();
    if pos == 0 {
        return Err(Error::Param("focal target has no positive cell".into()));
    }
    Ok(pos)
}

fn focal_terms(score: &[f64], target: &[f64], num_pos: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(score.len());
    for (&s, &t) in score.iter().zip(target) {
        let p = s.clamp(P_MIN, 1.0 - P_MIN);
        let live = p == s;
        let (l, d) = if t == 1.0 {
            let q = 1.0 - p;
            (-q * q * p.ln(), 2.0 * q * p.ln() - q * q / p)
        } else {
            let wt = (1.0 - t).powi(4);
            let lq = (1.0 - p).ln();
            (-wt * p * p * lq, -wt * (2.0 * p * lq - p * p / (1.0 - p)))
        };
        loss += l;
        grad.push(if live { d / num_pos as f64 } else { 0.0 });
    }
    (loss / num_pos as f64, grad)
}

/// Penalty-reduced focal loss of a probability map against a Gaussian target.
pub fn focal_loss(score: &Tensor, target: &Tensor) -> Result<f64> {
    let pos = check_target(score.data(), target.data())?;
    Ok(focal_terms(score.data(), target.data(), pos).0)
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    ((pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs())
        / 4.0
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(giou_parts(&corners(a), &corners(b)).value())
}

/// `1 - GIoU`, in `[0, 2)`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(1.0 - giou(pred, gt)?)
}

fn corners(b: &BBox) -> [f64; 4] {
    [b.x1(), b.y1(), b.x2(), b.y2()]
}

struct GiouParts {
    iw: f64,
    ih: f64,
    inter: f64,
    union: f64,
    cw: f64,
    ch: f64,
    enclose: f64,
}

impl GiouParts {
    fn value(&self) -> f64 {
        self.inter / self.union - (self.enclose - self.union) / self.enclose
    }
}

fn giou_parts(p: &[f64; 4], q: &[f64; 4]) -> GiouParts {
    let area = |b: &[f64; 4]| (b[2] - b[0]) * (b[3] - b[1]);
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = area(p) + area(q) - inter;
    let cw = p[2].max(q[2]) - p[0].min(q[0]);
    let ch = p[3].max(q[3]) - p[1].min(q[1]);
    GiouParts {
        iw,
        ih,
        inter,
        union,
        cw,
        ch,
        enclose: cw * ch,
    }
}

/// `d(1 - GIoU)/d(cx, cy, w, h)` of the first box.
fn giou_loss_grad(pred: [f64; 4], gt: &[f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = pred;
    let p = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    let s = giou_parts(&p, gt);
    // loss = 2 - I/U - U/C with U = A_p + A_g - I
    let (i, u, c) = (s.inter, s.union, s.enclose);
    let l_i = -1.0 / u - i / (u * u) + 1.0 / c;
    let l_ap = i / (u * u) - 1.0 / c;
    let l_c = u / (c * c);
    // corner adjoints [x1, y1, x2, y2]
    let mut dc = [0.0; 4];
    for axis in 0..2 {
        let (lo, hi) = (axis, axis + 2);
        let (inter_len, other_len, enc_other) = if axis == 0 {
            (s.iw, s.ih, s.ch)
        } else {
            (s.ih, s.iw, s.cw)
        };
        if inter_len > 0.0 && other_len > 0.0 {
            let g = l_i * other_len;
            if p[hi] <= gt[hi] {
                dc[hi] += g;
            }
            if p[lo] >= gt[lo] {
                dc[lo] -= g;
            }
        }
        let g = l_c * enc_other;
        if p[hi] > gt[hi] {
            dc[hi] += g;
        }
        if p[lo] < gt[lo] {
            dc[lo] -= g;
        }
    }
    let dw_area = l_ap * h;
    let dh_area = l_ap * w;
    [
        dc[0] + dc[2],
        dc[1] + dc[3],
        (dc[2] - dc[0]) / 2.0 + dw_area,
        (dc[3] - dc[1]) / 2.0 + dh_area,
    ]
}

struct FocalOp {
    grad: Vec<f64>,
}

impl CustomOp for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|d| d * grad_out[0]).collect())]
    }
}

struct L1Op {
    sign: [f64; 4],
}

impl CustomOp for L1Op {
    fn name(&self) -> &'static str {
        "l1_loss"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.sign.iter().map(|s| s * grad_out[0] / 4.0).collect())]
    }
}

struct GiouOp {
    grad: [f64; 4],
}

impl CustomOp for GiouOp {
    fn name(&self) -> &'static str {
        "giou_loss"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|d| d * grad_out[0]).collect())]
    }
}

/// The three loss terms and their weighted sum, all scalar nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub focal: Var,
    pub l1: Var,
    pub giou: Var,
    pub total: Var,
}

/// Records the joint loss of the head outputs against a crop-space gt box.
pub fn total_loss(
    g: &mut Graph,
    head: &HeadVars,
    gt: &BBox,
    search_size: f64,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let n = head.grid;
    let target = encode_target(gt, n, search_size)?;

    let score = g.value(head.score).to_vec();
    let pos = check_target(&score, target.heatmap.data())?;
    let (fl, fgrad) = focal_terms(&score, target.heatmap.data(), pos);
    let focal = g.custom(
        &[head.score],
        vec![1],
        vec![fl],
        Box::new(FocalOp { grad: fgrad }),
    );

    // Predicted box at the gt cell, normalized by the search size.
    let k = target.cell;
    let (ci, cj) = ((k / n) as f64, (k % n) as f64);
    let off = g.select(head.offset, &[2 * k, 2 * k + 1])?;
    let inv = 1.0 / n as f64;
    let centers = g.affine_elementwise(off, vec![inv, inv], vec![cj * inv, ci * inv])?;
    let size = g.select(head.size, &[2 * k, 2 * k + 1])?;
    let pred = g.concat_rows(&[centers, size])?;
    let pv: [f64; 4] = g.value(pred).try_into().expect("four box values");
    let gn = target.gt_norm;

    let diffs: Vec<f64> = pv.iter().zip(&gn).map(|(a, b)| a - b).collect();
    let l1v = diffs.iter().map(|d| d.abs()).sum::<f64>() / 4.0;
    let sign = [0, 1, 2, 3].map(|i| if diffs[i] > 0.0 { 1.0 } else if diffs[i] < 0.0 { -1.0 } else { 0.0 });
    let l1 = g.custom(&[pred], vec![1], vec![l1v], Box::new(L1Op { sign }));

    let pbox = BBox::new(pv[0], pv[1], pv[2], pv[3]);
    let gbox = BBox::new(gn[0], gn[1], gn[2], gn[3]);
    let gl = giou_loss(&pbox, &gbox)?;
    let ggrad = giou_loss_grad(pv, &corners(&gbox));
    let giou_v = g.custom(&[pred], vec![1], vec![gl], Box::new(GiouOp { grad: ggrad }));

    let a = g.affine(focal, weights.focal, 0.0);
    let b = g.affine(l1, weights.l1, 0.0);
    let c = g.affine(giou_v, weights.giou, 0.0);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms {
        focal,
        l1,
        giou: giou_v,
        total,
    })
}
