//! Synthetic training data: procedural clean fingerprints, their impressions,
//! and seeded distortions that turn them into latent-looking samples.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::image::{FingerprintImage, MapStack, Plane};
use crate::mapextract::{self, ExtractConfig, MAX_FREQUENCY, MIN_FREQUENCY};

/// SplitMix64 finaliser over a pair; used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side length of generated prints in pixels (multiple of 16).
    pub size: usize,
    /// Range of ridge periods in pixels.
    pub period_range: [f32; 2],
    /// Oriented-filter iterations used to grow the ridge pattern.
    pub iterations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 256,
            period_range: [8.0, 10.5],
            iterations: 8,
        }
    }
}

impl SynthConfig {
    /// 64×64 prints with proportionally tighter ridges.
    pub fn desk() -> Self {
        Self {
            size: 64,
            period_range: [5.5, 7.0],
            iterations: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::validation("synth.size", "must be a positive multiple of 16"));
        }
        let [lo, hi] = self.period_range;
        if !(lo <= hi && 1.0 / hi >= MIN_FREQUENCY && 1.0 / lo <= MAX_FREQUENCY) {
            return Err(Error::validation(
                "synth.period_range",
                format!("[{lo}, {hi}] leaves the accepted ridge frequency range"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularKind {
    Core,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularPoint {
    pub x: f32,
    pub y: f32,
    pub kind: SingularKind,
}

/// The identity-defining description of one synthetic finger.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterPrint {
    pub finger_id: u64,
    pub singular_points: Vec<SingularPoint>,
    /// Ridge direction per pixel, radians in `[0, π)`.
    pub orientation_field: Plane,
    /// Cycles per pixel.
    pub base_frequency: f32,
    pub seed: u64,
}

fn zero_pole_orientation(size: usize, points: &[SingularPoint], offset: f32) -> Plane {
    Plane::from_fn(size, size, |x, y| {
        let mut t = offset;
        for p in points {
            let a = (y as f32 - p.y).atan2(x as f32 - p.x);
            match p.kind {
                SingularKind::Core => t += 0.5 * a,
                SingularKind::Delta => t -= 0.5 * a,
            }
        }
        t.rem_euclid(std::f32::consts::PI)
    })
}

fn place_singularities(rng: &mut ChaCha8Rng, size: f32) -> Vec<SingularPoint> {
    let jitter = |rng: &mut ChaCha8Rng, s: f32| rng.gen_range(-s..s) * size;
    let core = |x, y| SingularPoint {
        x,
        y,
        kind: SingularKind::Core,
    };
    let delta = |x, y| SingularPoint {
        x,
        y,
        kind: SingularKind::Delta,
    };
    let cx = 0.5 * size + jitter(rng, 0.1);
    let cy = 0.4 * size + jitter(rng, 0.08);
    match rng.gen_range(0..4) {
        // Loop opening left or right.
        0 | 1 => {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            vec![
                core(cx, cy),
                delta(cx + side * (0.3 * size + jitter(rng, 0.08)), cy + 0.35 * size + jitter(rng, 0.06)),
            ]
        }
        // Whorl.
        2 => {
            let sep = 0.08 * size + jitter(rng, 0.03).abs();
            vec![
                core(cx, cy - sep / 2.0),
                core(cx + jitter(rng, 0.03), cy + sep / 2.0),
                delta(cx - 0.35 * size + jitter(rng, 0.05), cy + 0.4 * size + jitter(rng, 0.05)),
                delta(cx + 0.35 * size + jitter(rng, 0.05), cy + 0.4 * size + jitter(rng, 0.05)),
            ]
        }
        // Tented arch.
        _ => vec![core(cx, cy), delta(cx + jitter(rng, 0.05), cy + 0.2 * size + jitter(rng, 0.05))],
    }
}

const ORIENTATION_BINS: usize = 36;

fn gabor_bank(period: f32) -> (Vec<Vec<f32>>, isize) {
    let sigma = (0.45 * period).clamp(1.5, 6.0);
    let half = (2.5 * sigma).ceil() as isize;
    let f = 1.0 / period;
    let bank = (0..ORIENTATION_BINS)
        .map(|b| {
            let t = b as f32 * std::f32::consts::PI / ORIENTATION_BINS as f32;
            let (s, c) = t.sin_cos();
            let mut k = Vec::new();
            for y in -half..=half {
                for x in -half..=half {
                    let (x, y) = (x as f32, y as f32);
                    let u = -x * s + y * c;
                    let env = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                    k.push(env * (2.0 * std::f32::consts::PI * f * u).cos());
                }
            }
            k
        })
        .collect();
    (bank, half)
}

/// Grows a ridge field in `[-1, 1]` (positive = ridge) from seeded noise by
/// repeated orientation-adaptive Gabor filtering.
fn grow_ridges(orientation: &Plane, period: f32, iterations: usize, rng: &mut ChaCha8Rng) -> Plane {
    let (w, h) = (orientation.width(), orientation.height());
    let mut field = Plane::new(w, h, 0.0);
    let seeds = ((w * h) as f32 / (period * period)).ceil() as usize;
    for _ in 0..seeds {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        field.set(x, y, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    }
    let (bank, half) = gabor_bank(period);
    let side = (2 * half + 1) as usize;
    let bins: Vec<usize> = orientation
        .data()
        .iter()
        .map(|&t| ((t / std::f32::consts::PI * ORIENTATION_BINS as f32).round() as usize) % ORIENTATION_BINS)
        .collect();
    let mut next = Plane::new(w, h, 0.0);
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let k = &bank[bins[y * w + x]];
                let mut acc = 0.0;
                for ky in -half..=half {
                    let yy = y as isize + ky;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let row = (ky + half) as usize * side;
                    for kx in -half..=half {
                        let xx = x as isize + kx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += k[row + (kx + half) as usize] * field.get(xx as usize, yy as usize);
                    }
                }
                next.set(x, y, acc);
            }
        }
        let rms = (next.data().iter().map(|v| v * v).sum::<f32>() / next.len() as f32).sqrt();
        let gain = if rms > 0.0 { 1.5 / rms } else { 0.0 };
        for (dst, &src) in field.data_mut().iter_mut().zip(next.data()) {
            *dst = (src * gain).clamp(-1.0, 1.0);
        }
    }
    field
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural clean print, deterministic in `(finger_id, seed)`.
pub fn synth_clean(finger_id: u64, seed: u64, cfg: &SynthConfig) -> Result<(FingerprintImage, MasterPrint)> {
    cfg.validate()?;
    let size = cfg.size;
    let master_seed = mix_seed(seed, finger_id);
    let mut rng = rng_for(master_seed, 1);
    let points = place_singularities(&mut rng, size as f32);
    let offset = rng.gen_range(-0.25..0.25f32);
    let orientation = zero_pole_orientation(size, &points, offset);
    let period = rng.gen_range(cfg.period_range[0]..=cfg.period_range[1]);
    let ridges = grow_ridges(&orientation, period, cfg.iterations, &mut rng);

    let s = size as f32;
    let (ex, ey) = (0.5 * s + rng.gen_range(-0.03..0.03) * s, 0.5 * s + rng.gen_range(-0.03..0.03) * s);
    let (ax, ay) = (rng.gen_range(0.36..0.42) * s, rng.gen_range(0.42..0.47) * s);
    let edge = 2.0 / (0.4 * s);
    let pixels = Plane::from_fn(size, size, |x, y| {
        let (dx, dy) = ((x as f32 - ex) / ax, (y as f32 - ey) / ay);
        let inside = 1.0 - smoothstep(1.0 - edge, 1.0, (dx * dx + dy * dy).sqrt());
        let print = 0.5 - 0.4 * ridges.get(x, y);
        (inside * print + (1.0 - inside)).clamp(0.0, 1.0)
    });
    let master = MasterPrint {
        finger_id,
        singular_points: points,
        orientation_field: orientation,
        base_frequency: 1.0 / period,
        seed,
    };
    Ok((FingerprintImage::new(pixels)?, master))
}

/// Resamples `src` through `map` (output pixel → source position); samples
/// falling outside the raster read as `fill`.
fn resample(src: &Plane, fill: f32, map: impl Fn(f32, f32) -> (f32, f32)) -> Plane {
    Plane::from_fn(src.width(), src.height(), |x, y| {
        let (sx, sy) = map(x as f32, y as f32);
        src.sample(sx, sy).unwrap_or(fill)
    })
}

/// A clean impression of a master print: small rigid motion and pressure
/// change, deterministic in `(master.seed, finger_id, index)`.
pub fn impression(master_img: &FingerprintImage, master: &MasterPrint, index: u32) -> Result<FingerprintImage> {
    let mut rng = rng_for(mix_seed(master.seed, master.finger_id), 100 + index as u64);
    let p = master_img.plane();
    let s = p.width() as f32;
    let angle = rng.gen_range(-6.0f32..6.0).to_radians();
    let (tx, ty) = (rng.gen_range(-1.0..1.0) * s / 32.0, rng.gen_range(-1.0..1.0) * s / 32.0);
    let gamma = rng.gen_range(0.85f32..1.2);
    let c = (s - 1.0) / 2.0;
    let (sn, cs) = angle.sin_cos();
    let moved = resample(p, 1.0, |x, y| {
        let (dx, dy) = (x - c - tx, y - c - ty);
        (cs * dx + sn * dy + c, -sn * dx + cs * dy + c)
    });
    FingerprintImage::from_plane_clamped(moved.map(|v| v.powf(gamma)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundTexture {
    #[default]
    None,
    Lines,
    Text,
    Speckle,
}

impl BackgroundTexture {
    pub const ALL: [BackgroundTexture; 4] = [
        BackgroundTexture::None,
        BackgroundTexture::Lines,
        BackgroundTexture::Text,
        BackgroundTexture::Speckle,
    ];
}

/// Fully determines a distortion of a given clean image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionParams {
    pub occlusion_count: u32,
    pub occlusion_area_fraction: f32,
    pub background_texture: BackgroundTexture,
    pub noise_std: f32,
    pub contrast_gamma: f32,
    pub dropout_band_count: u32,
    /// Pixels.
    pub elastic_warp_amplitude: f32,
    pub seed: u64,
}

impl DistortionParams {
    /// The configuration that leaves an image untouched.
    pub fn identity(seed: u64) -> Self {
        Self {
            occlusion_count: 0,
            occlusion_area_fraction: 0.0,
            background_texture: BackgroundTexture::None,
            noise_std: 0.0,
            contrast_gamma: 1.0,
            dropout_band_count: 0,
            elastic_warp_amplitude: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, range: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(format!("distortion.{field}"), format!("must be in {range}")))
            }
        };
        check(self.occlusion_count <= 8, "occlusion_count", "[0, 8]")?;
        check(
            (0.0..=0.6).contains(&self.occlusion_area_fraction),
            "occlusion_area_fraction",
            "[0, 0.6]",
        )?;
        check((0.0..=0.3).contains(&self.noise_std), "noise_std", "[0, 0.3]")?;
        check((0.4..=2.5).contains(&self.contrast_gamma), "contrast_gamma", "[0.4, 2.5]")?;
        check(self.dropout_band_count <= 4, "dropout_band_count", "[0, 4]")?;
        check(
            (0.0..=6.0).contains(&self.elastic_warp_amplitude),
            "elastic_warp_amplitude",
            "[0, 6]",
        )?;
        if self.occlusion_count == 0 && self.occlusion_area_fraction > 0.0 {
            return Err(Error::validation(
                "distortion.occlusion_area_fraction",
                "nonzero area with zero occlusions",
            ));
        }
        Ok(())
    }
}

/// Ranges from which per-latent [`DistortionParams`] are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionRanges {
    pub occlusion_count: [u32; 2],
    pub occlusion_area_fraction: [f32; 2],
    pub noise_std: [f32; 2],
    pub contrast_gamma: [f32; 2],
    pub dropout_band_count: [u32; 2],
    pub elastic_warp_amplitude: [f32; 2],
    /// Relative weights of none/lines/text/speckle.
    pub texture_weights: [f32; 4],
}

impl Default for DistortionRanges {
    fn default() -> Self {
        Self {
            occlusion_count: [1, 3],
            occlusion_area_fraction: [0.2, 0.5],
            noise_std: [0.08, 0.25],
            contrast_gamma: [0.5, 2.0],
            dropout_band_count: [0, 2],
            elastic_warp_amplitude: [0.0, 1.0],
            texture_weights: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl DistortionRanges {
    pub fn sample(&self, seed: u64) -> Result<DistortionParams> {
        let mut rng = rng_for(seed, 7);
        let uni = |rng: &mut ChaCha8Rng, r: [f32; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let int = |rng: &mut ChaCha8Rng, r: [u32; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        let total: f32 = self.texture_weights.iter().sum();
        let mut pick = rng.gen_range(0.0..total.max(f32::MIN_POSITIVE));
        let mut texture = BackgroundTexture::None;
        for (t, w) in BackgroundTexture::ALL.iter().zip(self.texture_weights) {
            if pick < w {
                texture = *t;
                break;
            }
            pick -= w;
        }
        let occlusion_count = int(&mut rng, self.occlusion_count);
        let area = uni(&mut rng, self.occlusion_area_fraction);
        let p = DistortionParams {
            occlusion_count,
            occlusion_area_fraction: if occlusion_count == 0 { 0.0 } else { area },
            background_texture: texture,
            noise_std: uni(&mut rng, self.noise_std),
            contrast_gamma: uni(&mut rng, self.contrast_gamma),
            dropout_band_count: int(&mut rng, self.dropout_band_count),
            elastic_warp_amplitude: uni(&mut rng, self.elastic_warp_amplitude),
            seed: rng.gen(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// A distorted sample tied to the clean impression it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub image: FingerprintImage,
    pub finger_id: u64,
    pub impression_index: u32,
    pub params: DistortionParams,
    pub clean_ref: String,
}

/// Intensity used to fill occluded and dropped-out regions.
pub const BACKGROUND_INTENSITY: f32 = 1.0;

// Sub-stream tags so each stage draws independent randomness.
const TAG_WARP: u64 = 11;
const TAG_OCCLUSION: u64 = 12;
const TAG_BANDS: u64 = 13;
const TAG_TEXTURE: u64 = 14;
const TAG_NOISE: u64 = 15;

fn elastic_warp(p: &Plane, amplitude: f32, seed: u64) -> Plane {
    let mut rng = rng_for(seed, TAG_WARP);
    let (w, h) = (p.width() as f32, p.height() as f32);
    // A handful of low-frequency sinusoids per axis, normalised to `amplitude`.
    let waves: Vec<[f32; 4]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(0.3..1.5) / w,
                rng.gen_range(0.3..1.5) / h,
                rng.gen_range(0.0..std::f32::consts::TAU),
                if rng.gen_bool(0.5) { 0.0 } else { 1.0 },
            ]
        })
        .collect();
    let field = |x: f32, y: f32, axis: f32| -> f32 {
        let mut s = 0.0;
        let mut n = 0.0;
        for wv in waves.iter().filter(|wv| wv[3] == axis) {
            s += (std::f32::consts::TAU * (wv[0] * x + wv[1] * y) + wv[2]).sin();
            n += 1.0;
        }
        if n > 0.0 {
            amplitude * s / n
        } else {
            0.0
        }
    };
    resample(p, BACKGROUND_INTENSITY, |x, y| (x + field(x, y, 0.0), y + field(x, y, 1.0)))
}

/// Edge width of occlusion blobs, in pixels at 64 px scale.
const OCCLUSION_FEATHER: f32 = 3.0;

/// Per-pixel occlusion coverage in `[0, 1]` from `count` irregular blobs whose
/// half-covered contour encloses `round(fraction · N)` pixels. For fixed seed
/// and count, coverage is pointwise non-decreasing in `fraction`.
fn occlusion_coverage(w: usize, h: usize, count: u32, fraction: f32, seed: u64) -> Vec<f32> {
    let n = w * h;
    let target = (fraction as f64 * n as f64).round() as usize;
    if count == 0 || target == 0 {
        return vec![0.0; n];
    }
    let mut rng = rng_for(seed, TAG_OCCLUSION);
    let blobs: Vec<[f32; 5]> = (0..count)
        .map(|_| {
            let aspect: f32 = rng.gen_range(0.6..1.6);
            [
                rng.gen_range(0.2..0.8) * w as f32,
                rng.gen_range(0.2..0.8) * h as f32,
                aspect.sqrt(),
                1.0 / aspect.sqrt(),
                rng.gen_range(0.0..std::f32::consts::PI),
            ]
        })
        .collect();
    let wobble: Vec<[f32; 3]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(1.0..3.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.03..0.12),
            ]
        })
        .collect();
    let scale = w.max(h) as f32;
    let potential: Vec<f32> = (0..n)
        .map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            blobs
                .iter()
                .map(|b| {
                    let (dx, dy) = ((x - b[0]) / scale, (y - b[1]) / scale);
                    let (s, c) = b[4].sin_cos();
                    let (u, v) = ((c * dx + s * dy) / b[2], (-s * dx + c * dy) / b[3]);
                    let r = (u * u + v * v).sqrt();
                    let phi = v.atan2(u);
                    let bump: f32 = wobble.iter().map(|wv| wv[2] * (wv[0] * phi + wv[1]).sin()).sum();
                    -r * (1.0 + bump)
                })
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect();
    let mut sorted = potential.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let t = sorted[target.min(n) - 1];
    // Feathered edge straddling the level set; coverage rises monotonically
    // at every pixel as the threshold drops.
    let half = 0.5 * OCCLUSION_FEATHER * w.max(h) as f32 / 64.0 / scale;
    potential.iter().map(|&v| smoothstep(t - half, t + half, v)).collect()
}

fn dropout_bands(p: &mut Plane, count: u32, seed: u64) {
    let mut rng = rng_for(seed, TAG_BANDS);
    let (w, h) = (p.width() as f32, p.height() as f32);
    for _ in 0..count {
        let t = rng.gen_range(0.0..std::f32::consts::PI);
        let (s, c) = t.sin_cos();
        let offset = rng.gen_range(0.2..0.8) * w * c.abs() + rng.gen_range(0.2..0.8) * h * s.abs();
        let width = rng.gen_range(0.03..0.08) * w.max(h);
        for y in 0..p.height() {
            for x in 0..p.width() {
                let d = x as f32 * c + y as f32 * s - offset;
                if d.abs() < width / 2.0 {
                    p.set(x, y, BACKGROUND_INTENSITY);
                }
            }
        }
    }
}

fn draw_segment(p: &mut Plane, a: (f32, f32), b: (f32, f32), thickness: f32, ink: f32) {
    let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
    let r = thickness / 2.0;
    let ri = r.ceil() as isize;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let (cx, cy) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (x, y) = (cx.round() as isize + dx, cy.round() as isize + dy);
                if x < 0 || y < 0 || x >= p.width() as isize || y >= p.height() as isize {
                    continue;
                }
                if ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() <= r + 0.5 {
                    let v = p.get(x as usize, y as usize);
                    p.set(x as usize, y as usize, v.min(ink));
                }
            }
        }
    }
}

fn texture_overlay(p: &mut Plane, texture: BackgroundTexture, seed: u64) {
    let mut rng = rng_for(seed, TAG_TEXTURE);
    let (w, h) = (p.width() as f32, p.height() as f32);
    let unit = w.max(h) / 64.0;
    match texture {
        BackgroundTexture::None => {}
        BackgroundTexture::Lines => {
            for _ in 0..rng.gen_range(3..8) {
                let a = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                let t = rng.gen_range(0.0..std::f32::consts::PI);
                let len = w.max(h) * 1.5;
                let (dx, dy) = (t.cos() * len, t.sin() * len);
                let ink = rng.gen_range(0.1..0.5);
                let thick = rng.gen_range(0.8..2.0) * unit;
                draw_segment(p, (a.0 - dx, a.1 - dy), (a.0 + dx, a.1 + dy), thick, ink);
            }
        }
        BackgroundTexture::Text => {
            // Rows of glyph-like stroke clusters.
            let cell = rng.gen_range(6.0..10.0) * unit;
            let ink = rng.gen_range(0.1..0.4);
            let y_start = rng.gen_range(0.0..cell);
            let mut y = y_start;
            while y < h {
                if rng.gen_bool(0.6) {
                    let mut x = rng.gen_range(0.0..cell);
                    while x < w {
                        for _ in 0..rng.gen_range(2..5) {
                            let a = (x + rng.gen_range(0.0..cell * 0.8), y + rng.gen_range(0.0..cell * 0.8));
                            let b = (x + rng.gen_range(0.0..cell * 0.8), y + rng.gen_range(0.0..cell * 0.8));
                            draw_segment(p, a, b, unit, ink);
                        }
                        x += cell * rng.gen_range(1.0..1.4);
                    }
                }
                y += cell * 1.5;
            }
        }
        BackgroundTexture::Speckle => {
            let dots = (w * h / (12.0 * unit * unit)) as usize;
            for _ in 0..dots {
                let c = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                let ink = rng.gen_range(0.0..0.6);
                draw_segment(p, c, c, rng.gen_range(1.0..3.0) * unit, ink);
            }
        }
    }
}

/// Applies, in order: elastic warp, contrast gamma, occlusion blobs, dropout
/// bands, background texture, additive Gaussian noise, clamp to `[0, 1]`.
pub fn distort(clean: &FingerprintImage, params: &DistortionParams) -> Result<FingerprintImage> {
    params.validate()?;
    let mut p = clean.plane().clone();
    if params.elastic_warp_amplitude > 0.0 {
        p = elastic_warp(&p, params.elastic_warp_amplitude, params.seed);
    }
    if params.contrast_gamma != 1.0 {
        p = p.map(|v| v.max(0.0).powf(params.contrast_gamma));
    }
    if params.occlusion_count > 0 && params.occlusion_area_fraction > 0.0 {
        let cover = occlusion_coverage(
            p.width(),
            p.height(),
            params.occlusion_count,
            params.occlusion_area_fraction,
            params.seed,
        );
        for (v, m) in p.data_mut().iter_mut().zip(cover) {
            if m > 0.0 {
                *v += m * (BACKGROUND_INTENSITY - *v);
            }
        }
    }
    if params.dropout_band_count > 0 {
        dropout_bands(&mut p, params.dropout_band_count, params.seed);
    }
    texture_overlay(&mut p, params.background_texture, params.seed);
    if params.noise_std > 0.0 {
        let mut rng = rng_for(params.seed, TAG_NOISE);
        let normal = Normal::new(0.0f32, params.noise_std).expect("finite std");
        for v in p.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut img = FingerprintImage::from_plane_clamped(p)?;
    img.dpi_hint = clean.dpi_hint;
    Ok(img)
}

pub fn make_latent(
    clean: &FingerprintImage,
    params: &DistortionParams,
    finger_id: u64,
    impression_index: u32,
    clean_ref: impl Into<String>,
) -> Result<LatentSample> {
    Ok(LatentSample {
        image: distort(clean, params)?,
        finger_id,
        impression_index,
        params: *params,
        clean_ref: clean_ref.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub latent: String,
    pub clean: String,
    pub stack: String,
    pub finger_id: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_fingers: usize,
    pub impressions_per_finger: u32,
    pub latents_per_impression: u32,
    /// Train/val/test fractions of fingers; must sum to 1.
    pub split_fractions: [f64; 3],
    pub global_seed: u64,
    pub synth: SynthConfig,
    pub extract: ExtractConfig,
    pub distortion: DistortionRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_fingers: 50,
            impressions_per_finger: 2,
            latents_per_impression: 10,
            split_fractions: [0.7, 0.1, 0.2],
            global_seed: 0,
            synth: SynthConfig::desk(),
            extract: ExtractConfig::default(),
            distortion: DistortionRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.n_fingers == 0 {
            return Err(Error::validation("n_fingers", "must be positive"));
        }
        if self.impressions_per_finger == 0 || self.latents_per_impression == 0 {
            return Err(Error::validation(
                "impressions_per_finger",
                "impressions and latents per impression must be positive",
            ));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return Err(Error::validation("split_fractions", format!("must be non-negative and sum to 1, got {sum}")));
        }
        mapextract_check(&self.extract, self.synth.size)
    }

    /// Subject-disjoint assignment of finger ids to splits.
    pub fn split_assignment(&self) -> Vec<Split> {
        let n = self.n_fingers;
        let n_train = (self.split_fractions[0] * n as f64).round() as usize;
        let n_val = ((self.split_fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(self.global_seed, 0x5EED);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut splits = vec![Split::Test; n];
        for (rank, &f) in order.iter().enumerate() {
            splits[f] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        splits
    }
}

fn mapextract_check(cfg: &ExtractConfig, size: usize) -> Result<()> {
    crate::image::check_block_size(size, size, cfg.block_size)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DATASET_META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    config: DatasetConfig,
    checksum: String,
}

/// Records plus the root they are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
    pub global_seed: u64,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse_csv(root: &Path, bytes: &[u8], global_seed: u64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let expected = ["latent", "clean", "stack", "finger_id", "split"];
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Corrupt {
                path: root.join(MANIFEST_FILE),
                reason: format!("header {header:?}, expected {expected:?}"),
            });
        }
        let records = rd.deserialize().collect::<std::result::Result<Vec<DatasetRecord>, _>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            records,
            global_seed,
        })
    }

    /// Loads `<root>/manifest.csv` (and the seed from `dataset.json`).
    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join(DATASET_META_FILE);
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).at(&meta_path)?)?;
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).at(&path)?;
        Self::parse_csv(root, &bytes, meta.config.global_seed)
    }

    /// SHA-256 over the manifest and every referenced file, in record order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_csv()?);
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            for rel in [&r.latent, &r.clean, &r.stack] {
                if seen.insert(rel.clone()) {
                    let p = self.resolve(rel);
                    hasher.update(rel.as_bytes());
                    hasher.update(fs::read(&p).at(&p)?);
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Pairs whose finger appears in more than one split.
    pub fn split_leaks(&self) -> Vec<u64> {
        let mut by_finger = std::collections::BTreeMap::<u64, Split>::new();
        let mut leaks = std::collections::BTreeSet::new();
        for r in &self.records {
            if let Some(s) = by_finger.insert(r.finger_id, r.split) {
                if s != r.split {
                    leaks.insert(r.finger_id);
                }
            }
        }
        leaks.into_iter().collect()
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(bytes).at(path)
}

struct FingerOutput {
    records: Vec<DatasetRecord>,
}

fn build_finger(dir: &Path, cfg: &DatasetConfig, finger: usize, split: Split) -> Result<FingerOutput> {
    let fid = finger as u64;
    let (master_img, master) = synth_clean(fid, cfg.global_seed, &cfg.synth)?;
    let mut records = Vec::new();
    for imp in 0..cfg.impressions_per_finger {
        let clean = impression(&master_img, &master, imp)?;
        let clean_rel = format!("clean/f{fid:05}_i{imp}.png");
        clean.save_png(&dir.join(&clean_rel))?;
        // Targets come from the clean impression as stored on disk.
        let stored = FingerprintImage::load_png(&dir.join(&clean_rel))?;
        let stack = mapextract::make_target_stack_with(&stored, &cfg.extract)?;
        let stack_rel = format!("stacks/f{fid:05}_i{imp}.stack");
        stack.save(&dir.join(&stack_rel))?;
        for l in 0..cfg.latents_per_impression {
            let seed = mix_seed(mix_seed(mix_seed(cfg.global_seed, fid), imp as u64), 1000 + l as u64);
            let params = cfg.distortion.sample(seed)?;
            let latent = distort(&stored, &params)?;
            let latent_rel = format!("latent/f{fid:05}_i{imp}_l{l:03}.png");
            latent.save_png(&dir.join(&latent_rel))?;
            records.push(DatasetRecord {
                latent: latent_rel,
                clean: clean_rel.clone(),
                stack: stack_rel.clone(),
                finger_id: fid,
                split,
            });
        }
    }
    Ok(FingerOutput { records })
}

/// Generates clean impressions, target stacks and latents under `root`.
///
/// Output is assembled in a sibling staging directory and renamed into place,
/// so a failure leaves nothing behind. An existing dataset built from an
/// identical configuration is returned as is; any other existing `root` is an
/// error.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if root.exists() {
        let meta_path = root.join(DATASET_META_FILE);
        if let Ok(bytes) = fs::read(&meta_path) {
            if let Ok(meta) = serde_json::from_slice::<DatasetMeta>(&bytes) {
                if meta.config == *cfg {
                    let manifest = DatasetManifest::load(root)?;
                    if manifest.checksum()? == meta.checksum {
                        return Ok(manifest);
                    }
                }
            }
        }
        return Err(Error::AlreadyExists(root.to_path_buf()));
    }
    let parent = root.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).at(parent)?;
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let result = (|| {
        if staging.exists() {
            fs::remove_dir_all(&staging).at(&staging)?;
        }
        for sub in ["clean", "latent", "stacks"] {
            fs::create_dir_all(staging.join(sub)).at(staging.join(sub))?;
        }
        let splits = cfg.split_assignment();
        let outputs: Vec<FingerOutput> = (0..cfg.n_fingers)
            .into_par_iter()
            .map(|f| build_finger(&staging, cfg, f, splits[f]))
            .collect::<Result<_>>()?;
        let records = outputs.into_iter().flat_map(|o| o.records).collect();
        let mut manifest = DatasetManifest {
            root: staging.clone(),
            records,
            global_seed: cfg.global_seed,
        };
        write_bytes(&staging.join(MANIFEST_FILE), &manifest.to_csv()?)?;
        let checksum = manifest.checksum()?;
        let meta = DatasetMeta {
            config: cfg.clone(),
            checksum,
        };
        write_bytes(&staging.join(DATASET_META_FILE), &serde_json::to_vec_pretty(&meta)?)?;
        fs::rename(&staging, root).at(root)?;
        manifest.root = root.to_path_buf();
        Ok(manifest)
    })();
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

/// Loads one record's latent image and target stack.
pub fn load_pair(manifest: &DatasetManifest, r: &DatasetRecord) -> Result<(FingerprintImage, MapStack)> {
    let latent = FingerprintImage::load_png(&manifest.resolve(&r.latent))?;
    let stack = MapStack::load(&manifest.resolve(&r.stack))?;
    if stack.width() != latent.width() || stack.height() != latent.height() {
        return Err(Error::Shape(format!(
            "{}: latent {}x{} vs stack {}x{}",
            r.latent,
            latent.width(),
            latent.height(),
            stack.width(),
            stack.height()
        )));
    }
    Ok((latent, stack))
}
