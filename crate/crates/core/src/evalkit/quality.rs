//! Quality scores on the 1 (best) to 5 (worst) scale: an internal proxy and
//! an external-tool mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalkit::external::{quality_external, AdapterConfig};
use crate::image::{FingerprintImage, MapStack, Plane};
use crate::mapextract::{self, ExtractConfig, MAX_FREQUENCY, MIN_FREQUENCY};

/// Composite lower bounds for scores 1..=4; anything below the last is 5.
/// Set from clean desk prints (75th, 25th and 5th percentiles, then half the
/// 5th) and frozen.
pub const PROXY_THRESHOLDS: [f64; 4] = [0.57, 0.48, 0.40, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QualityScore(u8);

impl QualityScore {
    pub fn new(v: u8) -> Option<Self> {
        (1..=5).contains(&v).then_some(Self(v))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for QualityScore {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::new(v).ok_or_else(|| format!("quality {v} outside 1..=5"))
    }
}

impl From<QualityScore> for u8 {
    fn from(q: QualityScore) -> u8 {
        q.0
    }
}

/// The three proxy components, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyComponents {
    /// Share of blocks segmented as foreground.
    pub foreground: f64,
    /// Share of foreground blocks with a frequency inside the valid band.
    pub valid_frequency: f64,
    /// Mean orientation coherence over valid foreground blocks.
    pub coherence: f64,
}

impl ProxyComponents {
    /// `foreground · valid_frequency · coherence`, i.e. the summed coherence
    /// of valid foreground blocks over the block count. Dropping a block from
    /// the foreground can only lower it.
    pub fn composite(&self) -> f64 {
        self.foreground * self.valid_frequency * self.coherence
    }

    pub fn score(&self) -> QualityScore {
        let c = self.composite();
        let bin = PROXY_THRESHOLDS.iter().position(|&t| c >= t).unwrap_or(4);
        QualityScore(bin as u8 + 1)
    }
}

/// Per-block estimates from that block's pixels alone, so occluding one
/// block leaves every other block's contribution unchanged.
pub fn proxy_components(img: &FingerprintImage) -> Result<ProxyComponents> {
    let cfg = ExtractConfig::default();
    let b = cfg.block_size;
    let plane = img.plane();
    let (cols, rows) = (plane.width() / b, plane.height() / b);
    let (mut fg, mut valid, mut coherence) = (0usize, 0usize, 0.0f64);
    for by in 0..rows {
        for bx in 0..cols {
            let crop = FingerprintImage::new(Plane::from_fn(b, b, |x, y| plane.get(bx * b + x, by * b + y)))?;
            let s = mapextract::summarize_block(&crop, &cfg)?;
            if !s.foreground {
                continue;
            }
            fg += 1;
            if (MIN_FREQUENCY..=MAX_FREQUENCY).contains(&s.frequency) {
                valid += 1;
                coherence += s.coherence as f64;
            }
        }
    }
    let total = (cols * rows) as f64;
    Ok(ProxyComponents {
        foreground: fg as f64 / total,
        valid_frequency: if fg == 0 { 0.0 } else { valid as f64 / fg as f64 },
        coherence: if valid == 0 { 0.0 } else { (coherence / valid as f64).clamp(0.0, 1.0) },
    })
}

pub fn quality_proxy(img: &FingerprintImage) -> Result<QualityScore> {
    Ok(proxy_components(img)?.score())
}

/// Renders a stack's masked ridge map as dark ridges on white.
pub fn ridge_image(stack: &MapStack) -> Result<FingerprintImage> {
    let m: Plane = stack.masked_ridge();
    FingerprintImage::from_plane_clamped(m.map(|r| 1.0 - r))
}

pub fn quality_proxy_stack(stack: &MapStack) -> Result<QualityScore> {
    quality_proxy(&ridge_image(stack)?)
}

/// Runs a configured external quality tool on an image file.
pub fn quality_score_external(path: &Path, cfg: &AdapterConfig) -> Result<QualityScore> {
    let v = quality_external(path, cfg)?;
    Ok(QualityScore(v))
}
