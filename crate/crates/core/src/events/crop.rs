use super::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Square region of an image resampled to `out_size × out_size`.
///
/// Image coordinates are continuous: pixel `i` covers `[i, i + 1)`, so an
/// image of width `W` spans `[0, W]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Square of side `context_factor · sqrt(w · h)` centered on the box.
    pub fn around(bbox: &BBox, context_factor: f64, out_size: usize) -> Result<Self> {
        bbox.validate()?;
        if context_factor < 1.0 || out_size == 0 {
            return Err(Error::Param(format!(
                "crop needs context_factor >= 1 and out_size > 0, got {context_factor}, {out_size}"
            )));
        }
        let side = context_factor * (bbox.w * bbox.h).sqrt();
        Ok(Self {
            x0: bbox.cx - side / 2.0,
            y0: bbox.cy - side / 2.0,
            side,
            out_size,
        })
    }

    /// Output pixels per image pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        let s = self.scale();
        BBox::new((b.cx - self.x0) * s, (b.cy - self.y0) * s, b.w * s, b.h * s)
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        let s = 1.0 / self.scale();
        BBox::new(b.cx * s + self.x0, b.cy * s + self.y0, b.w * s, b.h * s)
    }

    /// Bilinear resample of `image: [H, W, C]` with half-pixel centers.
    /// Samples falling outside the image extent are exactly zero.
    pub fn sample(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::shape("crop_patch", shape, &[0, 0, 0]));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let n = self.out_size;
        let step = self.side / n as f64;
        let src = image.data();
        let mut out = Tensor::zeros(&[n, n, c]);
        let dst = out.data_mut();
        let axis = |s: f64, len: usize| -> Option<(usize, usize, f64)> {
            if !(0.0..=len as f64).contains(&s) {
                return None;
            }
            let pos = (s - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            Some((i0, i1, pos - i0 as f64))
        };
        for v in 0..n {
            let Some((r0, r1, fy)) = axis(self.y0 + (v as f64 + 0.5) * step, h) else {
                continue;
            };
            for u in 0..n {
                let Some((c0, c1, fx)) = axis(self.x0 + (u as f64 + 0.5) * step, w) else {
                    continue;
                };
                let o = (v * n + u) * c;
                for ch in 0..c {
                    let p = |r: usize, col: usize| src[(r * w + col) * c + ch];
                    let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
                    let bot = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
                    dst[o + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(out)
    }
}

/// Crops a context square around `bbox` and resizes it to `out_size`.
pub fn crop_patch(image: &Tensor, bbox: &BBox, context_factor: f64, out_size: usize) -> Result<Tensor> {
    CropWindow::around(bbox, context_factor, out_size)?.sample(image)
}
