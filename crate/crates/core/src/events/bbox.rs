use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, center + extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Param(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.cx * k, self.cy * k, self.w * k, self.h * k)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        let inter = iw * ih;
        // corner-based areas so identical boxes give exactly 1
        let corner_area = |b: &BBox| (b.x2() - b.x1()) * (b.y2() - b.y1());
        let union = corner_area(self) + corner_area(other) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(10.3, 7.1, 4.7, 3.3);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&a.translated(100.0, 0.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let c = BBox::new(2.0, 1.0, 2.0, 2.0);
        assert!((b.iou(&c) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(b.iou(&c), c.iou(&b));
    }
}
