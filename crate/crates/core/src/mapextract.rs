//! Ground-truth map extraction: orientation, ridge frequency, foreground
//! segmentation and binary ridges, composed into a [`MapStack`].
//!
//! Angles follow image coordinates (x right, y down) and name the ridge
//! direction, so a field of horizontal ridges has angle 0.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_block_size, BlockGrid, FingerprintImage, MapStack, Plane, FREQUENCY_SCALE};

/// Lowest and highest accepted ridge frequency, cycles per pixel.
pub const MIN_FREQUENCY: f32 = 1.0 / 25.0;
pub const MAX_FREQUENCY: f32 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub block_size: usize,
    /// Minimum intensity variance of a foreground block.
    pub var_threshold: f32,
    /// Minimum orientation coherence of a foreground block.
    pub coherence_threshold: f32,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            var_threshold: 0.01,
            coherence_threshold: 0.3,
        }
    }
}

/// Block-wise ridge orientation in radians, `[0, π)`, with coherence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationField {
    pub angle: BlockGrid,
    pub coherence: BlockGrid,
}

impl OrientationField {
    /// Pixel-resolution channel encoding `θ / π`.
    pub fn channel(&self) -> Plane {
        self.angle.expand().map(|a| (a as f64 / PI) as f32)
    }

    pub fn block_size(&self) -> usize {
        self.angle.block_size
    }
}

fn sobel(img: &Plane) -> (Plane, Plane) {
    let (w, h) = (img.width(), img.height());
    let mut gx = Plane::new(w, h, 0.0);
    let mut gy = Plane::new(w, h, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gx.set(x as usize, y as usize, sx / 8.0);
            gy.set(x as usize, y as usize, sy / 8.0);
        }
    }
    (gx, gy)
}

/// Least-squares ridge orientation per block from averaged doubled-angle
/// gradient vectors. The averaging window is the block grown by half a block
/// on every side.
pub fn estimate_orientation(img: &FingerprintImage, block_size: usize) -> Result<OrientationField> {
    let plane = img.plane();
    let (w, h) = (plane.width(), plane.height());
    check_block_size(w, h, block_size)?;
    let (gx, gy) = sobel(plane);
    let mut angle = BlockGrid::new(w, h, block_size, 0.0)?;
    let mut coherence = BlockGrid::new(w, h, block_size, 0.0)?;
    let margin = block_size / 2;
    for by in 0..angle.rows {
        for bx in 0..angle.cols {
            let x0 = (bx * block_size).saturating_sub(margin);
            let y0 = (by * block_size).saturating_sub(margin);
            let x1 = ((bx + 1) * block_size + margin).min(w);
            let y1 = ((by + 1) * block_size + margin).min(h);
            let (mut gxx, mut gxy, mut gss) = (0.0f64, 0.0f64, 0.0f64);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (a, b) = (gx.get(x, y) as f64, gy.get(x, y) as f64);
                    gxx += a * a - b * b;
                    gxy += 2.0 * a * b;
                    gss += a * a + b * b;
                }
            }
            if gss <= 1e-12 {
                continue;
            }
            let gradient_dir = 0.5 * gxy.atan2(gxx);
            let theta = (gradient_dir + PI / 2.0).rem_euclid(PI);
            // rem_euclid can round up to exactly PI in f32.
            let theta = if theta as f32 >= PI as f32 { 0.0 } else { theta };
            angle.set(bx, by, theta as f32);
            coherence.set(bx, by, ((gxx * gxx + gxy * gxy).sqrt() / gss).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(OrientationField { angle, coherence })
}

/// X-signature of one block: mean intensity along the ridge direction, as a
/// function of offset along the ridge normal. Entries with no in-bounds
/// samples are `None`.
fn x_signature(plane: &Plane, cx: f32, cy: f32, theta: f32, length: usize, width: usize) -> Vec<Option<f32>> {
    let (dx, dy) = (theta.cos(), theta.sin());
    let (nx, ny) = (-dy, dx);
    let half_l = length as f32 / 2.0;
    let half_w = width as f32 / 2.0;
    (0..length)
        .map(|k| {
            let u = k as f32 - half_l + 0.5;
            let (mut sum, mut n) = (0.0f32, 0u32);
            for j in 0..width {
                let v = j as f32 - half_w + 0.5;
                if let Some(s) = plane.sample(cx + u * nx + v * dx, cy + u * ny + v * dy) {
                    sum += s;
                    n += 1;
                }
            }
            (n > 0).then(|| sum / n as f32)
        })
        .collect()
}

/// Period of a signature from the spacing of its maxima, or `None`.
fn signature_period(sig: &[Option<f32>]) -> Option<f32> {
    // Longest run of valid entries.
    let (mut best, mut start) = ((0usize, 0usize), None);
    for i in 0..=sig.len() {
        match (sig.get(i).copied().flatten(), start) {
            (Some(_), None) => start = Some(i),
            (None, Some(s)) => {
                if i - s > best.1 - best.0 {
                    best = (s, i);
                }
                start = None;
            }
            _ => {}
        }
    }
    let run: Vec<f32> = sig[best.0..best.1].iter().map(|v| v.unwrap()).collect();
    if run.len() < 5 {
        return None;
    }
    let lo = run.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = run.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo < 1e-3 {
        return None;
    }
    let mean = run.iter().sum::<f32>() / run.len() as f32;
    let smooth: Vec<f32> = (0..run.len())
        .map(|i| {
            let a = run[i.saturating_sub(1)];
            let c = run[(i + 1).min(run.len() - 1)];
            0.25 * a + 0.5 * run[i] + 0.25 * c
        })
        .collect();
    let mut peaks = Vec::new();
    for i in 1..smooth.len() - 1 {
        let (a, b, c) = (smooth[i - 1], smooth[i], smooth[i + 1]);
        if b > a && b >= c && b > mean {
            // Parabolic sub-sample refinement.
            let denom = a - 2.0 * b + c;
            let off = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
            peaks.push(i as f32 + off.clamp(-0.5, 0.5));
        }
    }
    if peaks.len() < 2 {
        return None;
    }
    Some((peaks[peaks.len() - 1] - peaks[0]) / (peaks.len() - 1) as f32)
}

/// Frequency from mean crossings of the longest valid run of a signature.
/// Coarser than peak spacing but needs only about one period.
fn crossing_frequency(sig: &[Option<f32>]) -> Option<f32> {
    let run: Vec<f32> = sig
        .split(|v| v.is_none())
        .max_by_key(|r| r.len())?
        .iter()
        .map(|v| v.unwrap())
        .collect();
    if run.len() < 5 {
        return None;
    }
    let mean = run.iter().sum::<f32>() / run.len() as f32;
    let smooth: Vec<f32> = (0..run.len())
        .map(|i| 0.25 * run[i.saturating_sub(1)] + 0.5 * run[i] + 0.25 * run[(i + 1).min(run.len() - 1)] - mean)
        .collect();
    if smooth.iter().all(|v| v.abs() < 1e-3) {
        return None;
    }
    let crossings = smooth.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    (crossings > 0).then(|| crossings as f32 / (2.0 * run.len() as f32))
}

/// Ridge frequency per block in cycles/pixel via the x-signature method;
/// blocks without a period inside `[MIN_FREQUENCY, MAX_FREQUENCY]` are 0.
pub fn estimate_frequency(img: &FingerprintImage, orientation: &OrientationField) -> Result<BlockGrid> {
    let plane = img.plane();
    let b = orientation.block_size();
    check_block_size(plane.width(), plane.height(), b)?;
    let mut freq = BlockGrid::new(plane.width(), plane.height(), b, 0.0)?;
    for by in 0..freq.rows {
        for bx in 0..freq.cols {
            let cx = (bx * b) as f32 + b as f32 / 2.0 - 0.5;
            let cy = (by * b) as f32 + b as f32 / 2.0 - 0.5;
            let theta = orientation.angle.get(bx, by);
            let sig = x_signature(plane, cx, cy, theta, 2 * b, b);
            if let Some(period) = signature_period(&sig) {
                let f = 1.0 / period;
                if (MIN_FREQUENCY..=MAX_FREQUENCY).contains(&f) {
                    freq.set(bx, by, f);
                }
            }
        }
    }
    Ok(freq)
}

/// Pixel-resolution frequency channel, `f / 0.25` saturated at 1.
pub fn encode_frequency(freq: &BlockGrid) -> Plane {
    freq.expand().map(|f| (f / FREQUENCY_SCALE).min(1.0))
}

pub(crate) fn block_variance(plane: &Plane, bx: usize, by: usize, b: usize) -> f32 {
    let (mut s, mut s2) = (0.0f64, 0.0f64);
    for y in by * b..(by + 1) * b {
        for x in bx * b..(bx + 1) * b {
            let v = plane.get(x, y) as f64;
            s += v;
            s2 += v * v;
        }
    }
    let n = (b * b) as f64;
    let m = s / n;
    (s2 / n - m * m).max(0.0) as f32
}

fn morph(mask: &BlockGrid, dilate: bool) -> BlockGrid {
    let mut out = mask.clone();
    for by in 0..mask.rows as isize {
        for bx in 0..mask.cols as isize {
            let mut acc = !dilate;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (bx + dx, by + dy);
                    if x < 0 || y < 0 || x >= mask.cols as isize || y >= mask.rows as isize {
                        continue;
                    }
                    let on = mask.get(x as usize, y as usize) > 0.5;
                    acc = if dilate { acc || on } else { acc && on };
                }
            }
            out.set(bx as usize, by as usize, if acc { 1.0 } else { 0.0 });
        }
    }
    out
}

fn largest_component(mask: &BlockGrid) -> BlockGrid {
    let (cols, rows) = (mask.cols, mask.rows);
    let mut label = vec![0usize; cols * rows];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for start in 0..cols * rows {
        if mask.values[start] < 0.5 || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % cols, i / cols);
            let mut visit = |j: usize| {
                if mask.values[j] > 0.5 && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < cols {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - cols);
            }
            if y + 1 < rows {
                visit(i + cols);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let mut out = mask.clone();
    for (v, &l) in out.values.iter_mut().zip(&label) {
        *v = if l != 0 && l == best.0 { 1.0 } else { 0.0 };
    }
    out
}

/// Block foreground mask given a precomputed orientation field.
pub fn segment_blocks(
    img: &FingerprintImage,
    orientation: &OrientationField,
    var_threshold: f32,
    coherence_threshold: f32,
) -> Result<BlockGrid> {
    let plane = img.plane();
    let b = orientation.block_size();
    let mut mask = BlockGrid::new(plane.width(), plane.height(), b, 0.0)?;
    for by in 0..mask.rows {
        for bx in 0..mask.cols {
            let fg = block_variance(plane, bx, by, b) >= var_threshold
                && orientation.coherence.get(bx, by) >= coherence_threshold;
            mask.set(bx, by, if fg { 1.0 } else { 0.0 });
        }
    }
    let closed = morph(&morph(&mask, true), false);
    Ok(largest_component(&closed))
}

/// Foreground segmentation channel in `{0, 1}`.
pub fn segment(img: &FingerprintImage, block_size: usize, var_threshold: f32) -> Result<Plane> {
    let orientation = estimate_orientation(img, block_size)?;
    let cfg = ExtractConfig::default();
    Ok(segment_blocks(img, &orientation, var_threshold, cfg.coherence_threshold)?.expand())
}

fn gabor_kernel(theta: f32, freq: f32) -> (Vec<f32>, isize) {
    let sigma = (0.5 / freq).clamp(2.0, 6.0);
    let half = (3.0 * sigma).ceil() as isize;
    let (s, c) = theta.sin_cos();
    let mut k = Vec::with_capacity(((2 * half + 1) * (2 * half + 1)) as usize);
    for y in -half..=half {
        for x in -half..=half {
            let (x, y) = (x as f32, y as f32);
            // Offset along the ridge normal and along the ridge.
            let u = -x * s + y * c;
            let v = x * c + y * s;
            let env = (-(u * u + v * v) / (2.0 * sigma * sigma)).exp();
            k.push(env * (2.0 * std::f32::consts::PI * freq * u).cos());
        }
    }
    // Zero DC so the response ignores local brightness.
    let env_sum: f32 = {
        let mut s = 0.0;
        for y in -half..=half {
            for x in -half..=half {
                s += (-((x * x + y * y) as f32) / (2.0 * sigma * sigma)).exp();
            }
        }
        s
    };
    let mean_ratio = k.iter().sum::<f32>() / env_sum;
    let mut i = 0;
    for y in -half..=half {
        for x in -half..=half {
            let env = (-((x * x + y * y) as f32) / (2.0 * sigma * sigma)).exp();
            k[i] -= mean_ratio * env;
            i += 1;
        }
    }
    (k, half)
}

/// Binary ridge map (1 = ridge, i.e. dark) from block-oriented Gabor
/// filtering thresholded at each block's mean response. Background is 0.
pub fn binarize_ridges(
    img: &FingerprintImage,
    orientation: &OrientationField,
    frequency: &BlockGrid,
    segmentation: &Plane,
) -> Result<Plane> {
    let plane = img.plane();
    let b = orientation.block_size();
    let (w, h) = (plane.width(), plane.height());
    check_block_size(w, h, b)?;
    let mut fg_freqs: Vec<f32> = (0..frequency.rows)
        .flat_map(|by| (0..frequency.cols).map(move |bx| (bx, by)))
        .filter(|&(bx, by)| segmentation.get(bx * b, by * b) > 0.5)
        .map(|(bx, by)| frequency.get(bx, by))
        .filter(|&f| f > 0.0)
        .collect();
    fg_freqs.sort_by(f32::total_cmp);
    let fallback = fg_freqs.get(fg_freqs.len() / 2).copied().unwrap_or(1.0 / 8.0);

    let mut ridge = Plane::new(w, h, 0.0);
    let mut response = vec![0.0f32; b * b];
    for by in 0..orientation.angle.rows {
        for bx in 0..orientation.angle.cols {
            if segmentation.get(bx * b, by * b) < 0.5 {
                continue;
            }
            let f = match frequency.get(bx, by) {
                f if f > 0.0 => f,
                _ => fallback,
            };
            let (kernel, half) = gabor_kernel(orientation.angle.get(bx, by), f);
            let side = 2 * half + 1;
            for (i, r) in response.iter_mut().enumerate() {
                let (x, y) = ((bx * b + i % b) as isize, (by * b + i / b) as isize);
                let mut acc = 0.0f32;
                for ky in -half..=half {
                    let row = ((ky + half) * side) as usize;
                    for kx in -half..=half {
                        acc += kernel[row + (kx + half) as usize] * plane.get_clamped(x + kx, y + ky);
                    }
                }
                *r = acc;
            }
            let mean = response.iter().sum::<f32>() / response.len() as f32;
            for (i, &r) in response.iter().enumerate() {
                let (x, y) = (bx * b + i % b, by * b + i / b);
                if segmentation.get(x, y) > 0.5 && r < mean {
                    ridge.set(x, y, 1.0);
                }
            }
        }
    }
    Ok(ridge)
}

/// Ground-truth stack with the configured extraction parameters.
pub fn make_target_stack_with(img: &FingerprintImage, cfg: &ExtractConfig) -> Result<MapStack> {
    let orientation = estimate_orientation(img, cfg.block_size)?;
    let frequency = estimate_frequency(img, &orientation)?;
    let seg = segment_blocks(img, &orientation, cfg.var_threshold, cfg.coherence_threshold)?.expand();
    let ridge = binarize_ridges(img, &orientation, &frequency, &seg)?;
    let mask = |p: Plane| {
        let data = p.data().iter().zip(seg.data()).map(|(&v, &s)| v * s).collect();
        Plane::from_vec(p.width(), p.height(), data).expect("same shape")
    };
    let stack = MapStack::new(
        ridge,
        mask(encode_frequency(&frequency)),
        mask(orientation.channel()),
        seg,
    )?;
    debug_assert!(stack.check_invariants(true).is_ok());
    Ok(stack)
}

pub fn make_target_stack(img: &FingerprintImage) -> Result<MapStack> {
    make_target_stack_with(img, &ExtractConfig::default())
}

/// Per-block summary used by the quality proxy and the matcher.
#[derive(Debug, Clone)]
pub struct BlockSummary {
    pub orientation: OrientationField,
    pub frequency: BlockGrid,
    pub foreground: BlockGrid,
}

pub fn summarize(img: &FingerprintImage, cfg: &ExtractConfig) -> Result<BlockSummary> {
    let orientation = estimate_orientation(img, cfg.block_size)?;
    let frequency = estimate_frequency(img, &orientation)?;
    let foreground = segment_blocks(img, &orientation, cfg.var_threshold, cfg.coherence_threshold)?;
    Ok(BlockSummary {
        orientation,
        frequency,
        foreground,
    })
}

/// Estimates for an image that is exactly one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleBlock {
    pub foreground: bool,
    pub coherence: f32,
    pub frequency: f32,
}

/// Variance and coherence tests without the morphological clean-up, which
/// would couple the block to its neighbours.
pub fn summarize_block(img: &FingerprintImage, cfg: &ExtractConfig) -> Result<SingleBlock> {
    let b = cfg.block_size;
    if img.width() != b || img.height() != b {
        return Err(Error::Shape(format!(
            "summarize_block needs a {b}x{b} image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let orientation = estimate_orientation(img, b)?;
    let theta = orientation.angle.get(0, 0);
    let c = b as f32 / 2.0 - 0.5;
    let frequency = crossing_frequency(&x_signature(img.plane(), c, c, theta, 2 * b, b)).unwrap_or(0.0);
    let coherence = orientation.coherence.get(0, 0);
    let foreground = block_variance(img.plane(), 0, 0, b) >= cfg.var_threshold && coherence >= cfg.coherence_threshold;
    Ok(SingleBlock {
        foreground,
        coherence,
        frequency,
    })
}
