//! Oriented-gradient channels, integral images and weak classifiers.
//!
//! Each image gets K orientation channels: the gradient magnitude of every
//! pixel is distributed over the two nearest of K evenly spaced (unsigned)
//! orientation-bin centers. Rectangle sums over a channel come from a
//! summed-area table, so a weak classifier evaluates in O(1): it thresholds
//! the ratio of two such rectangle responses, with rectangle offsets
//! expressed in units of sqrt(bounding-box area) to make them scale-free.

use image::RgbImage;

use crate::data_model::BoundingBox;
use crate::error::{Error, Result};

/// Denominator guard for response ratios.
pub const RATIO_EPSILON: f64 = 1e-6;

/// Which side of a split a pixel falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Orientation channels of one image plus their summed-area tables.
pub struct FeatureChannels {
    w: u32,
    h: u32,
    k: usize,
    sqrt_a: f64,
    /// Raw channel planes, row-major w*h each; droppable once integrals exist.
    planes: Option<Vec<Vec<f32>>>,
    /// Summed-area tables, (w+1)*(h+1) each; entry (x, y) holds the sum over
    /// the half-open rectangle [0, x) x [0, y).
    integrals: Vec<Vec<f64>>,
}

impl FeatureChannels {
    pub fn width(&self) -> u32 {
        self.w
    }

    pub fn height(&self) -> u32 {
        self.h
    }

    pub fn bins(&self) -> usize {
        self.k
    }

    pub fn sqrt_a(&self) -> f64 {
        self.sqrt_a
    }

    /// Raw channel value; panics if the planes were discarded.
    pub fn channel(&self, theta: usize, x: u32, y: u32) -> f32 {
        self.planes.as_ref().expect("channel planes retained")[theta][(y * self.w + x) as usize]
    }

    /// Free the raw planes, keeping only the integral tables.
    pub fn discard_planes(&mut self) {
        self.planes = None;
    }

    /// Sum of channel theta over the half-open pixel rectangle
    /// [x1, x2) x [y1, y2), already clipped to the image.
    fn integral_sum(&self, theta: usize, x1: u32, y1: u32, x2: u32, y2: u32) -> f64 {
        let t = &self.integrals[theta];
        let stride = self.w as usize + 1;
        let at = |x: u32, y: u32| t[y as usize * stride + x as usize];
        let s = at(x2, y2) - at(x1, y2) - at(x2, y1) + at(x1, y1);
        s.max(0.0)
    }
}

/// Luminance of an 8-bit RGB pixel.
#[inline]
fn luma(p: &image::Rgb<u8>) -> f64 {
    0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64
}

/// Build the K orientation channels of an image. Gradients are centered
/// differences of the luminance plane with replicated borders; orientations
/// are folded to [0, pi) and the magnitude is split linearly between the two
/// nearest bin centers k*pi/K (wrapping at pi), a partition of unity.
pub fn compute_channels(img: &RgbImage, bbox: &BoundingBox, k: usize) -> Result<FeatureChannels> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::InvalidInput(format!(
            "image must be at least 3x3 for gradients, got {w}x{h}"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 orientation bins, got {k}"
        )));
    }

    let mut lum = vec![0.0f64; (w * h) as usize];
    for (y, row) in img.rows().enumerate() {
        for (x, p) in row.enumerate() {
            lum[y * w as usize + x] = luma(p);
        }
    }

    let mut planes = vec![vec![0.0f32; (w * h) as usize]; k];
    let at = |x: i64, y: i64| -> f64 {
        // replicate borders
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        lum[y * w as usize + x]
    };
    let bin_width = std::f64::consts::PI / k as f64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta = 0.0;
            }
            let pos = theta / bin_width;
            let lo = (pos.floor() as usize).min(k - 1);
            let hi = (lo + 1) % k;
            let w_hi = pos - lo as f64;
            let idx = (y as u32 * w + x as u32) as usize;
            planes[lo][idx] += ((1.0 - w_hi) * mag) as f32;
            planes[hi][idx] += (w_hi * mag) as f32;
        }
    }

    let stride = w as usize + 1;
    let mut integrals = Vec::with_capacity(k);
    for plane in &planes {
        let mut table = vec![0.0f64; stride * (h as usize + 1)];
        for y in 0..h as usize {
            let mut row_sum = 0.0f64;
            for x in 0..w as usize {
                row_sum += plane[y * w as usize + x] as f64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        integrals.push(table);
    }

    Ok(FeatureChannels {
        w,
        h,
        k,
        sqrt_a: bbox.sqrt_area(),
        planes: Some(planes),
        integrals,
    })
}

/// Rectangle around the classified pixel, corners in sqrt-area units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetRect {
    pub ux: f64,
    pub uy: f64,
    pub vx: f64,
    pub vy: f64,
}

impl OffsetRect {
    /// Invariants: nonempty (u < v per axis) and within radius rho.
    pub fn validate(&self, rho: f64) -> Result<()> {
        if !(self.ux < self.vx && self.uy < self.vy) {
            return Err(Error::InvalidInput(format!("empty offset rectangle {self:?}")));
        }
        let vals = [self.ux, self.uy, self.vx, self.vy];
        if vals.iter().any(|v| v.abs() > rho + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "offset rectangle {self:?} exceeds radius {rho}"
            )));
        }
        Ok(())
    }
}

/// Absolute pixel rectangle [x1, x2) x [y1, y2) queried for a pixel, before
/// clipping: each offset is scaled by sqrt_a and rounded to the pixel grid.
pub fn pixel_rect(rect: &OffsetRect, sqrt_a: f64, px: i32, py: i32) -> (i64, i64, i64, i64) {
    let x1 = px as i64 + (rect.ux * sqrt_a).round() as i64;
    let y1 = py as i64 + (rect.uy * sqrt_a).round() as i64;
    let x2 = px as i64 + (rect.vx * sqrt_a).round() as i64;
    let y2 = py as i64 + (rect.vy * sqrt_a).round() as i64;
    (x1, y1, x2, y2)
}

/// Accumulated channel-theta response over an offset rectangle placed at
/// (px, py): the summed-area-table sum after clipping to the image. A
/// rectangle that is empty after rounding or clipping responds 0.
pub fn bin_response(
    ch: &FeatureChannels,
    px: i32,
    py: i32,
    rect: &OffsetRect,
    theta: usize,
) -> f64 {
    let (x1, y1, x2, y2) = pixel_rect(rect, ch.sqrt_a, px, py);
    let x1 = x1.clamp(0, ch.w as i64) as u32;
    let y1 = y1.clamp(0, ch.h as i64) as u32;
    let x2 = x2.clamp(0, ch.w as i64) as u32;
    let y2 = y2.clamp(0, ch.h as i64) as u32;
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    ch.integral_sum(theta, x1, y1, x2, y2)
}

/// Two-rectangle ratio split: a pixel goes right when
/// r(rect1, theta1) / (r(rect2, theta2) + epsilon) exceeds t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakClassifier {
    pub rect1: OffsetRect,
    pub theta1: usize,
    pub rect2: OffsetRect,
    pub theta2: usize,
    pub t: f64,
}

impl WeakClassifier {
    /// The thresholded quantity: ratio of the two rectangle responses.
    pub fn ratio(&self, ch: &FeatureChannels, px: i32, py: i32) -> f64 {
        let r1 = bin_response(ch, px, py, &self.rect1, self.theta1);
        let r2 = bin_response(ch, px, py, &self.rect2, self.theta2);
        r1 / (r2 + RATIO_EPSILON)
    }

    pub fn evaluate(&self, ch: &FeatureChannels, px: i32, py: i32) -> Side {
        if self.ratio(ch, px, py) > self.t {
            Side::Right
        } else {
            Side::Left
        }
    }
}
