//! Internal correlation matcher over masked ridge maps and orientation fields.
//!
//! The score for a pose is `0.5·NCC(ridge) + 0.5·mean cos(2Δθ)` over pixels
//! that are foreground in both templates; the match score is the maximum over
//! a rotation and translation grid.

use std::f32::consts::PI;

use crate::error::{Error, Result};
use crate::image::{MapStack, Plane};

pub const MAX_ROTATION_DEG: i32 = 15;
pub const ROTATION_STEP_DEG: i32 = 5;
pub const MAX_SHIFT: i32 = 16;
pub const SHIFT_STRIDE: i32 = 4;
/// Poses whose foreground intersection covers less than this fraction of the
/// frame are skipped.
pub const MIN_OVERLAP_FRACTION: f32 = 0.125;

/// What the matcher sees of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    width: usize,
    height: usize,
    ridge: Vec<f32>,
    /// Radians in `[0, π)`.
    theta: Vec<f32>,
    fg: Vec<bool>,
}

impl Template {
    /// `ridge` is the (masked) ridge map, `orientation` the channel encoding
    /// `θ/π`, `foreground` anything ≥ 0.5 counts.
    pub fn new(ridge: &Plane, orientation: &Plane, foreground: &Plane) -> Result<Self> {
        if !ridge.same_shape(orientation) || !ridge.same_shape(foreground) {
            return Err(Error::Shape("template planes differ in size".into()));
        }
        Ok(Self {
            width: ridge.width(),
            height: ridge.height(),
            ridge: ridge.data().to_vec(),
            theta: orientation.data().iter().map(|o| o * PI).collect(),
            fg: foreground.data().iter().map(|&s| s >= 0.5).collect(),
        })
    }

    pub fn from_stack(stack: &MapStack) -> Self {
        Self::new(&stack.masked_ridge(), &stack.orientation, &stack.segmentation).expect("stack channels agree")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn foreground_pixels(&self) -> usize {
        self.fg.iter().filter(|&&f| f).count()
    }

    /// Resamples about the frame centre: ridge bilinear, orientation and
    /// foreground nearest-neighbour, angles advanced by the rotation.
    pub fn rotated(&self, degrees: f32) -> Template {
        if degrees == 0.0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let (s, c) = degrees.to_radians().sin_cos();
        let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
        let plane = Plane::from_vec(w, h, self.ridge.clone()).expect("sized");
        let n = w * h;
        let mut out = Template {
            width: w,
            height: h,
            ridge: vec![0.0; n],
            theta: vec![0.0; n],
            fg: vec![false; n],
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                let (nx, ny) = (sx.round(), sy.round());
                if nx < 0.0 || ny < 0.0 || nx > (w - 1) as f32 || ny > (h - 1) as f32 {
                    continue;
                }
                let src = ny as usize * w + nx as usize;
                let i = y * w + x;
                out.fg[i] = self.fg[src];
                out.theta[i] = (self.theta[src] + degrees.to_radians()).rem_euclid(PI);
                out.ridge[i] = plane.sample(sx, sy).unwrap_or(self.ridge[src]);
            }
        }
        out
    }

    /// Integer translation; uncovered pixels are background.
    pub fn shifted(&self, dx: i32, dy: i32) -> Template {
        let (w, h) = (self.width as i32, self.height as i32);
        let n = self.ridge.len();
        let mut out = Template {
            width: self.width,
            height: self.height,
            ridge: vec![0.0; n],
            theta: vec![0.0; n],
            fg: vec![false; n],
        };
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - dx, y - dy);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let (i, j) = ((y * w + x) as usize, (sy * w + sx) as usize);
                out.ridge[i] = self.ridge[j];
                out.theta[i] = self.theta[j];
                out.fg[i] = self.fg[j];
            }
        }
        out
    }
}

/// Combined score of `a` against `b` displaced by `(dx, dy)`, or `None` when
/// the overlap is too small.
fn pose_score(a: &Template, b: &Template, dx: i32, dy: i32, min_overlap: usize) -> Option<f64> {
    let (w, h) = (a.width as i32, a.height as i32);
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab, mut cos) = (0usize, 0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (y0, y1) = (0.max(dy), h.min(h + dy));
    let (x0, x1) = (0.max(dx), w.min(w + dx));
    for y in y0..y1 {
        let row_a = (y * w) as usize;
        let row_b = ((y - dy) * w) as usize;
        for x in x0..x1 {
            let i = row_a + x as usize;
            let j = row_b + (x - dx) as usize;
            if !(a.fg[i] && b.fg[j]) {
                continue;
            }
            let (ra, rb) = (a.ridge[i] as f64, b.ridge[j] as f64);
            n += 1;
            sa += ra;
            sb += rb;
            saa += ra * ra;
            sbb += rb * rb;
            sab += ra * rb;
            cos += (2.0 * (a.theta[i] - b.theta[j]) as f64).cos();
        }
    }
    if n < min_overlap.max(1) {
        return None;
    }
    let nf = n as f64;
    let va = saa - sa * sa / nf;
    let vb = sbb - sb * sb / nf;
    let ncc = if va > 1e-12 && vb > 1e-12 {
        ((sab - sa * sb / nf) / (va * vb).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Some(0.5 * ncc + 0.5 * cos / nf)
}

/// Precomputed rotations of a gallery template.
#[derive(Debug, Clone)]
pub struct RotationSet {
    rotations: Vec<Template>,
}

impl RotationSet {
    pub fn new(t: &Template) -> Self {
        let rotations = (-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)
            .step_by(ROTATION_STEP_DEG as usize)
            .map(|deg| t.rotated(deg as f32))
            .collect();
        Self { rotations }
    }
}

/// Similarity in `[-1, 1]`; 0 when no pose has enough shared foreground.
pub fn match_internal(a: &Template, b: &Template) -> Result<f64> {
    match_rotations(a, &RotationSet::new(b))
}

pub fn match_rotations(a: &Template, b: &RotationSet) -> Result<f64> {
    let first = &b.rotations[0];
    if a.width != first.width || a.height != first.height {
        return Err(Error::Shape(format!(
            "cannot match {}x{} against {}x{}",
            a.width, a.height, first.width, first.height
        )));
    }
    let min_overlap = (MIN_OVERLAP_FRACTION * (a.width * a.height) as f32).ceil() as usize;
    let mut best: Option<f64> = None;
    for r in &b.rotations {
        for dy in (-MAX_SHIFT..=MAX_SHIFT).step_by(SHIFT_STRIDE as usize) {
            for dx in (-MAX_SHIFT..=MAX_SHIFT).step_by(SHIFT_STRIDE as usize) {
                if let Some(s) = pose_score(a, r, dx, dy, min_overlap) {
                    best = Some(best.map_or(s, |b: f64| b.max(s)));
                }
            }
        }
    }
    Ok(best.unwrap_or(0.0))
}
