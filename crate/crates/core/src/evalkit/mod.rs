//! Reconstruction inference and the evaluation protocols: latent-to-clean
//! and latent-to-latent identification with CMC reporting, and quality
//! histograms.

pub mod cmc;
pub mod experiment;
pub mod external;
pub mod matching;
pub mod quality;

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{FingerprintImage, MapStack, Plane};
use crate::nets::{self, generator_forward, images_to_tensor, tensor_to_stack, Net, NetKind};

pub use cmc::{cmc, CmcResult, ScoreMatrix};
pub use experiment::{run_experiment, ExperimentConfig, Model, Protocol, Report};
pub use matching::{match_internal, Template};
pub use quality::{quality_proxy, QualityScore};

pub const GENERATOR_STEM: &str = "generator";

/// Generator output for one latent plus the image handed to matchers.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub stack: MapStack,
    /// Ridge channel × (segmentation ≥ 0.5).
    pub masked_ridge: Plane,
}

/// Loads the generator from a checkpoint directory written by the trainer.
pub fn load_generator(dir: &Path) -> Result<Net> {
    let (g, m) = nets::load_net(dir, GENERATOR_STEM, None)?;
    if m.kind != NetKind::Generator {
        return Err(Error::ArchitectureMismatch {
            expected: NetKind::Generator.name().into(),
            found: m.kind.name().into(),
        });
    }
    Ok(g)
}

pub fn reconstruct(g: &Net, latent: &FingerprintImage) -> Result<Reconstruction> {
    Ok(reconstruct_batch(g, &[latent])?.remove(0))
}

/// Eval-mode generator pass over `latents`, chunked to bound memory.
pub fn reconstruct_batch(g: &Net, latents: &[&FingerprintImage]) -> Result<Vec<Reconstruction>> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        let x = images_to_tensor(chunk)?;
        let y = tch::no_grad(|| generator_forward(g, &x, false))?;
        for i in 0..chunk.len() {
            let stack = tensor_to_stack(&y, i as i64)?;
            let masked_ridge = stack.masked_ridge();
            out.push(Reconstruction { stack, masked_ridge });
        }
    }
    Ok(out)
}

/// Full `P × G` matrix in probe-major order; pairs are scored in parallel.
pub fn score_all<P: Sync, G: Sync>(
    probes: &[P],
    probe_labels: Vec<u64>,
    gallery: &[G],
    gallery_labels: Vec<u64>,
    matcher: impl Fn(&P, &G) -> Result<f64> + Sync,
) -> Result<ScoreMatrix> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Config("score_all needs non-empty probe and gallery sets".into()));
    }
    if probes.len() != probe_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::Shape("labels do not match the sample counts".into()));
    }
    let g = gallery.len();
    let scores = (0..probes.len() * g)
        .into_par_iter()
        .map(|k| matcher(&probes[k / g], &gallery[k % g]))
        .collect::<Result<Vec<f64>>>()?;
    ScoreMatrix::new(scores, probe_labels, gallery_labels)
}

/// [`score_all`] with the internal matcher; gallery rotations are computed once.
pub fn score_all_internal(
    probes: &[Template],
    probe_labels: Vec<u64>,
    gallery: &[Template],
    gallery_labels: Vec<u64>,
) -> Result<ScoreMatrix> {
    let rotated: Vec<matching::RotationSet> = gallery.par_iter().map(matching::RotationSet::new).collect();
    score_all(probes, probe_labels, &rotated, gallery_labels, matching::match_rotations)
}
