//! The evaluation protocols over a dataset split, with rows for the raw
//! latents and for each supplied generator.
//!
//! Raw latents are matched through maps extracted directly from the latent
//! image; reconstructions through the generator's maps. Gallery templates for
//! latent-to-clean come from the clean impressions' target stacks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use plotters::prelude::*;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evalkit::cmc::{cmc, CmcResult};
use crate::evalkit::external::{match_external, AdapterConfig, FailurePolicy};
use crate::evalkit::matching::Template;
use crate::evalkit::quality::{quality_proxy, quality_score_external, ridge_image, QualityScore};
use crate::evalkit::{reconstruct_batch, score_all, score_all_internal};
use crate::image::{FingerprintImage, MapStack};
use crate::mapextract::{make_target_stack_with, ExtractConfig};
use crate::nets::Net;
use crate::synthgen::{self, mix_seed, rng_for, DatasetManifest, Split};

pub const RAW_ROW: &str = "raw";
pub const REPORT_FILE: &str = "report.json";
pub const RANK_TABLE_FILE: &str = "rank_table.csv";
pub const DEFAULT_RANKS: [usize; 4] = [1, 10, 25, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LatentToClean,
    LatentToLatent,
    Quality,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::LatentToClean => "latent_to_clean",
            Protocol::LatentToLatent => "latent_to_latent",
            Protocol::Quality => "quality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub protocols: Vec<Protocol>,
    pub split: Split,
    /// Seeds the latent-to-latent gallery choice.
    pub seed: u64,
    pub ranks: Vec<usize>,
    pub extract: ExtractConfig,
    /// External matcher; the internal matcher is used when absent.
    pub matcher: Option<AdapterConfig>,
    /// External quality tool; the internal proxy is used when absent.
    pub quality_tool: Option<AdapterConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::LatentToClean, Protocol::LatentToLatent, Protocol::Quality],
            split: Split::Test,
            seed: 0,
            ranks: DEFAULT_RANKS.to_vec(),
            extract: ExtractConfig::default(),
            matcher: None,
            quality_tool: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() {
            return Err(Error::validation("protocols", "select at least one protocol"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::validation("ranks", "ranks must be non-empty and start at 1"));
        }
        Ok(())
    }
}

/// A generator to evaluate, under the row name it gets in the report.
pub struct Model<'a> {
    pub name: String,
    pub generator: &'a Net,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub probe: usize,
    pub gallery: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    pub cmc: CmcResult,
    /// Accuracy at each configured rank.
    pub rank_table: BTreeMap<usize, f64>,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub protocol: Protocol,
    pub probes: usize,
    pub gallery: usize,
    /// Manifest record index of each probe, and of each gallery entry.
    pub probe_records: Vec<usize>,
    pub gallery_records: Vec<usize>,
    pub rows: Vec<RowResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub name: String,
    /// Counts of scores 1..=5.
    pub histogram: [usize; 5],
    pub mean: f64,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: Split,
    pub seed: u64,
    pub matcher: String,
    pub matching: Vec<MatchingReport>,
    pub quality: Option<Vec<QualityRow>>,
    /// Files written next to the report, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl Report {
    pub fn row(&self, protocol: Protocol, name: &str) -> Option<&RowResult> {
        self.matching
            .iter()
            .find(|m| m.protocol == protocol)
            .and_then(|m| m.rows.iter().find(|r| r.name == name))
    }
}

struct Sample {
    record: usize,
    finger: u64,
    latent: FingerprintImage,
}

/// Per-row probe stacks, aligned with the split's samples.
struct RowStacks {
    name: String,
    stacks: Vec<MapStack>,
}

pub fn run_experiment(
    manifest: &DatasetManifest,
    models: &[Model<'_>],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Report> {
    cfg.validate()?;
    if (cfg.matcher.is_some() || cfg.quality_tool.is_some()) && out.is_none() {
        return Err(Error::Config("external tools need an output directory for their input files".into()));
    }
    let samples: Vec<Sample> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == cfg.split)
        .map(|(i, r)| {
            Ok(Sample {
                record: i,
                finger: r.finger_id,
                latent: FingerprintImage::load_png(&manifest.resolve(&r.latent))?,
            })
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("manifest has no {:?} records", cfg.split)));
    }

    let mut rows = vec![RowStacks {
        name: RAW_ROW.into(),
        stacks: samples
            .par_iter()
            .map(|s| make_target_stack_with(&s.latent, &cfg.extract))
            .collect::<Result<_>>()?,
    }];
    let latents: Vec<&FingerprintImage> = samples.iter().map(|s| &s.latent).collect();
    for m in models {
        if rows.iter().any(|r| r.name == m.name) {
            return Err(Error::Config(format!("duplicate row name {}", m.name)));
        }
        let rec = reconstruct_batch(m.generator, &latents)?;
        rows.push(RowStacks {
            name: m.name.clone(),
            stacks: rec.into_iter().map(|r| r.stack).collect(),
        });
    }

    let mut report = Report {
        split: cfg.split,
        seed: cfg.seed,
        matcher: cfg
            .matcher
            .as_ref()
            .map_or("internal".to_string(), |a| a.executable.display().to_string()),
        matching: Vec::new(),
        quality: None,
        artifacts: Vec::new(),
    };
    let ctx = Ctx { cfg, out };
    for &p in &cfg.protocols {
        match p {
            Protocol::LatentToClean => report.matching.push(latent_to_clean(&ctx, manifest, &samples, &rows)?),
            Protocol::LatentToLatent => report.matching.push(latent_to_latent(&ctx, &samples, &rows)?),
            Protocol::Quality => report.quality = Some(quality_rows(&ctx, &samples, &rows)?),
        }
    }
    if let Some(dir) = out {
        write_report(&mut report, dir)?;
    }
    Ok(report)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: Option<&'a Path>,
}

fn latent_to_clean(
    ctx: &Ctx<'_>,
    manifest: &DatasetManifest,
    samples: &[Sample],
    rows: &[RowStacks],
) -> Result<MatchingReport> {
    // One gallery entry per clean impression, in manifest order.
    let mut seen = BTreeMap::new();
    let mut gallery_records = Vec::new();
    for s in samples {
        let r = &manifest.records[s.record];
        if !seen.contains_key(&r.stack) {
            seen.insert(r.stack.clone(), gallery_records.len());
            gallery_records.push(s.record);
        }
    }
    let gallery: Vec<MapStack> = gallery_records
        .iter()
        .map(|&i| MapStack::load(&manifest.resolve(&manifest.records[i].stack)))
        .collect::<Result<_>>()?;
    let gallery_labels: Vec<u64> = gallery_records.iter().map(|&i| manifest.records[i].finger_id).collect();
    let probe_idx: Vec<usize> = (0..samples.len()).collect();
    let probe_labels: Vec<u64> = samples.iter().map(|s| s.finger).collect();
    let mut out_rows = Vec::new();
    for row in rows {
        let probes: Vec<&MapStack> = probe_idx.iter().map(|&i| &row.stacks[i]).collect();
        let g: Vec<&MapStack> = gallery.iter().collect();
        let tag = format!("{}_{}", Protocol::LatentToClean.name(), row.name);
        out_rows.push(match_row(ctx, &row.name, &tag, &probes, probe_labels.clone(), &g, gallery_labels.clone())?);
    }
    Ok(MatchingReport {
        protocol: Protocol::LatentToClean,
        probes: probe_idx.len(),
        gallery: gallery.len(),
        probe_records: samples.iter().map(|s| s.record).collect(),
        gallery_records,
        rows: out_rows,
    })
}

/// Seeded split of the split's samples: one gallery sample per finger, the
/// rest probes. Fingers with a single sample contribute a gallery entry only.
pub fn latent_gallery_split(fingers: &[u64], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_finger: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, f) in fingers.iter().enumerate() {
        by_finger.entry(*f).or_default().push(i);
    }
    let mut gallery = Vec::new();
    for (f, idx) in &by_finger {
        let pick = idx.choose(&mut rng_for(mix_seed(seed, 0x4C2C), *f)).copied().expect("non-empty");
        gallery.push(pick);
    }
    gallery.sort_unstable();
    let probes = (0..fingers.len()).filter(|i| gallery.binary_search(i).is_err()).collect();
    (gallery, probes)
}

fn latent_to_latent(ctx: &Ctx<'_>, samples: &[Sample], rows: &[RowStacks]) -> Result<MatchingReport> {
    let fingers: Vec<u64> = samples.iter().map(|s| s.finger).collect();
    let (gallery_idx, probe_idx) = latent_gallery_split(&fingers, ctx.cfg.seed);
    if probe_idx.is_empty() {
        return Err(Error::Config("latent-to-latent needs at least two samples of some finger".into()));
    }
    let gl: Vec<u64> = gallery_idx.iter().map(|&i| fingers[i]).collect();
    let pl: Vec<u64> = probe_idx.iter().map(|&i| fingers[i]).collect();
    let mut out_rows = Vec::new();
    for row in rows {
        let probes: Vec<&MapStack> = probe_idx.iter().map(|&i| &row.stacks[i]).collect();
        let gallery: Vec<&MapStack> = gallery_idx.iter().map(|&i| &row.stacks[i]).collect();
        let tag = format!("{}_{}", Protocol::LatentToLatent.name(), row.name);
        out_rows.push(match_row(ctx, &row.name, &tag, &probes, pl.clone(), &gallery, gl.clone())?);
    }
    Ok(MatchingReport {
        protocol: Protocol::LatentToLatent,
        probes: probe_idx.len(),
        gallery: gallery_idx.len(),
        probe_records: probe_idx.iter().map(|&i| samples[i].record).collect(),
        gallery_records: gallery_idx.iter().map(|&i| samples[i].record).collect(),
        rows: out_rows,
    })
}

fn match_row(
    ctx: &Ctx<'_>,
    name: &str,
    tag: &str,
    probes: &[&MapStack],
    probe_labels: Vec<u64>,
    gallery: &[&MapStack],
    gallery_labels: Vec<u64>,
) -> Result<RowResult> {
    let mut failures = Vec::new();
    let matrix = match &ctx.cfg.matcher {
        None => {
            let pt: Vec<Template> = probes.iter().map(|s| Template::from_stack(s)).collect();
            let gt: Vec<Template> = gallery.iter().map(|s| Template::from_stack(s)).collect();
            score_all_internal(&pt, probe_labels, &gt, gallery_labels)?
        }
        Some(adapter) => {
            let dir = ctx.out.expect("checked").join("images").join(tag);
            let pp = write_ridge_images(&dir.join("probe"), probes)?;
            let gp = write_ridge_images(&dir.join("gallery"), gallery)?;
            let failed = Mutex::new(Vec::new());
            let pi: Vec<(usize, &PathBuf)> = pp.iter().enumerate().collect();
            let gi: Vec<(usize, &PathBuf)> = gp.iter().enumerate().collect();
            let m = score_all(&pi, probe_labels, &gi, gallery_labels, |p, g| {
                external_score(adapter, p, g, &failed)
            })?;
            failures = failed.into_inner().expect("not poisoned");
            failures.sort_by_key(|f: &PairFailure| (f.probe, f.gallery));
            m
        }
    };
    let c = cmc(&matrix)?;
    let rank_table = ctx.cfg.ranks.iter().map(|&k| (k, c.at(k))).collect();
    Ok(RowResult {
        name: name.to_string(),
        cmc: c,
        rank_table,
        failures,
    })
}

fn external_score(
    adapter: &AdapterConfig,
    p: &(usize, &PathBuf),
    g: &(usize, &PathBuf),
    failed: &Mutex<Vec<PairFailure>>,
) -> Result<f64> {
    match match_external(p.1, g.1, adapter) {
        Ok(s) if s.is_finite() => Ok(s),
        Ok(s) => Err(Error::Domain(format!("matcher returned {s}"))),
        Err(e) => {
            let fallback = match adapter.on_failure {
                FailurePolicy::Fail => return Err(e.into()),
                FailurePolicy::Zero => 0.0,
                // Lowest finite score, so the pair never outranks a real one.
                FailurePolicy::Exclude => f64::MIN,
            };
            failed.lock().expect("not poisoned").push(PairFailure {
                probe: p.0,
                gallery: Some(g.0),
                error: e.to_string(),
            });
            Ok(fallback)
        }
    }
}

fn write_ridge_images(dir: &Path, stacks: &[&MapStack]) -> Result<Vec<PathBuf>> {
    let images: Vec<FingerprintImage> = stacks.iter().map(|s| ridge_image(s)).collect::<Result<_>>()?;
    write_images(dir, &images)
}

fn write_images(dir: &Path, images: &[FingerprintImage]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{i:05}.png"));
            img.save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// Raw latents are scored as images; reconstructions through their masked
/// ridge rendering.
fn quality_rows(ctx: &Ctx<'_>, samples: &[Sample], rows: &[RowStacks]) -> Result<Vec<QualityRow>> {
    rows.iter()
        .map(|row| {
            let images: Vec<FingerprintImage> = if row.name == RAW_ROW {
                samples.iter().map(|s| s.latent.clone()).collect()
            } else {
                row.stacks.iter().map(ridge_image).collect::<Result<_>>()?
            };
            let mut failures = Vec::new();
            let scores: Vec<QualityScore> = match &ctx.cfg.quality_tool {
                None => images.par_iter().map(quality_proxy).collect::<Result<_>>()?,
                Some(tool) => {
                    let dir = ctx.out.expect("checked").join("images").join(format!("quality_{}", row.name));
                    let paths = write_images(&dir, &images)?;
                    let mut v = Vec::new();
                    for (i, p) in paths.iter().enumerate() {
                        match quality_score_external(p, tool) {
                            Ok(q) => v.push(q),
                            Err(e) if tool.on_failure == FailurePolicy::Fail => return Err(e),
                            Err(e) => failures.push(PairFailure {
                                probe: i,
                                gallery: None,
                                error: e.to_string(),
                            }),
                        }
                    }
                    v
                }
            };
            let mut histogram = [0usize; 5];
            for q in &scores {
                histogram[q.value() as usize - 1] += 1;
            }
            let mean = if scores.is_empty() {
                f64::NAN
            } else {
                scores.iter().map(|q| q.value() as f64).sum::<f64>() / scores.len() as f64
            };
            Ok(QualityRow {
                name: row.name.clone(),
                histogram,
                mean,
                failures,
            })
        })
        .collect()
}

fn write_report(report: &mut Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut csv = csv::Writer::from_path(dir.join(RANK_TABLE_FILE))?;
    let mut ranks: Vec<usize> = Vec::new();
    for m in &report.matching {
        for r in &m.rows {
            for k in r.rank_table.keys() {
                if !ranks.contains(k) {
                    ranks.push(*k);
                }
            }
        }
    }
    ranks.sort_unstable();
    let mut header = vec!["protocol".to_string(), "row".to_string()];
    header.extend(ranks.iter().map(|k| format!("rank_{k}")));
    csv.write_record(&header)?;
    for m in &report.matching {
        for r in &m.rows {
            let mut rec = vec![m.protocol.name().to_string(), r.name.clone()];
            rec.extend(ranks.iter().map(|k| format!("{:.6}", r.rank_table.get(k).copied().unwrap_or(f64::NAN))));
            csv.write_record(&rec)?;
        }
    }
    csv.flush().map_err(|e| Error::io(dir.join(RANK_TABLE_FILE), e))?;
    report.artifacts.push(RANK_TABLE_FILE.into());

    for m in &report.matching {
        let name = format!("cmc_{}.svg", m.protocol.name());
        plot_cmc(&dir.join(&name), m)?;
        report.artifacts.push(name);
    }
    if let Some(q) = &report.quality {
        let name = "quality_histogram.svg".to_string();
        plot_quality(&dir.join(&name), q)?;
        report.artifacts.push(name);
    }
    report.artifacts.push(REPORT_FILE.into());
    let p = dir.join(REPORT_FILE);
    fs::write(&p, serde_json::to_vec_pretty(report)?).at(&p)?;
    Ok(())
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

const PALETTE: [RGBColor; 4] = [RGBColor(120, 120, 120), RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44)];

fn plot_cmc(path: &Path, m: &MatchingReport) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let g = m.gallery.max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("CMC, {}", m.protocol.name()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(1f64..g as f64, 0f64..1.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("rank")
        .y_desc("identification rate")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, r) in m.rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = r
            .cmc
            .rank_accuracies
            .iter()
            .enumerate()
            .map(|(k, a)| ((k + 1) as f64, *a))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(r.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

fn plot_quality(path: &Path, rows: &[QualityRow]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let top = rows
        .iter()
        .flat_map(|r| r.histogram.iter().map(|&c| c as f64 / r.histogram.iter().sum::<usize>().max(1) as f64))
        .fold(0.0f64, f64::max)
        .max(0.05);
    let mut chart = ChartBuilder::on(&root)
        .caption("Quality score distribution", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.5f64..5.5, 0f64..top * 1.1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("score (1 best)")
        .y_desc("fraction of samples")
        .x_labels(5)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let width = 0.8 / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let total = r.histogram.iter().sum::<usize>().max(1) as f64;
        chart
            .draw_series(r.histogram.iter().enumerate().map(|(b, &c)| {
                let x0 = b as f64 + 1.0 - 0.4 + i as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, c as f64 / total)], color.filled())
            }))
            .map_err(|e| plot_err(path, e))?
            .label(r.name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Loads the latents of a split, for CLI reconstruction.
pub fn split_latents(manifest: &DatasetManifest, split: Split) -> Result<Vec<(usize, FingerprintImage)>> {
    manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, r)| Ok((i, synthgen::load_pair(manifest, r)?.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{NetConfig, NetKind};
    use crate::synthgen::{build_dataset, DatasetConfig};

    fn small_dataset(dir: &Path) -> DatasetManifest {
        let cfg = DatasetConfig {
            n_fingers: 10,
            impressions_per_finger: 2,
            latents_per_impression: 2,
            split_fractions: [0.4, 0.0, 0.6],
            global_seed: 5,
            ..DatasetConfig::default()
        };
        build_dataset(&dir.join("ds"), &cfg).unwrap()
    }

    #[test]
    fn latent_split_is_seeded_and_complete() {
        let fingers = [3, 3, 1, 1, 1, 9, 9, 4];
        let (g, p) = latent_gallery_split(&fingers, 1);
        assert_eq!(latent_gallery_split(&fingers, 1), (g.clone(), p.clone()));
        assert_eq!(g.len(), 4);
        let mut all: Vec<usize> = g.iter().chain(&p).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..fingers.len()).collect::<Vec<_>>());
    }

    #[test]
    fn report_has_every_row_and_consistent_rank_table() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path());
        let net = NetConfig::new(64, 16);
        let g1 = Net::new(NetKind::Generator, net, 1).unwrap();
        let g2 = Net::new(NetKind::Generator, net, 2).unwrap();
        let models = [
            Model {
                name: "cGAN".into(),
                generator: &g1,
            },
            Model {
                name: "cGAN+PIDI".into(),
                generator: &g2,
            },
        ];
        let out = dir.path().join("eval");
        let cfg = ExperimentConfig::default();
        let r = run_experiment(&ds, &models, &cfg, Some(&out)).unwrap();
        for m in &r.matching {
            let names: Vec<&str> = m.rows.iter().map(|r| r.name.as_str()).collect();
            assert_eq!(names, ["raw", "cGAN", "cGAN+PIDI"]);
            for row in &m.rows {
                for (k, v) in &row.rank_table {
                    assert_eq!(*v, row.cmc.at(*k));
                }
                for w in row.cmc.rank_accuracies.windows(2) {
                    assert!(w[0] <= w[1]);
                }
            }
        }
        assert_eq!(r.quality.as_ref().unwrap().len(), 3);
        for f in ["report.json", "rank_table.csv", "cmc_latent_to_clean.svg", "cmc_latent_to_latent.svg", "quality_histogram.svg"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let table = fs::read_to_string(out.join(RANK_TABLE_FILE)).unwrap();
        assert_eq!(table.lines().count(), 1 + 2 * 3);

        let again = run_experiment(&ds, &models, &cfg, None).unwrap();
        assert_eq!(again.matching, r.matching);
    }

    #[test]
    fn external_matcher_failures_follow_the_policy() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path());
        let mut adapter = AdapterConfig::new("false", &[]);
        let cfg = |a: &AdapterConfig| ExperimentConfig {
            protocols: vec![Protocol::LatentToClean],
            matcher: Some(a.clone()),
            ..ExperimentConfig::default()
        };
        let err = run_experiment(&ds, &[], &cfg(&adapter), Some(&dir.path().join("a"))).unwrap_err();
        assert!(matches!(err, Error::Matcher(_)), "{err}");
        adapter.on_failure = FailurePolicy::Zero;
        let r = run_experiment(&ds, &[], &cfg(&adapter), Some(&dir.path().join("b"))).unwrap();
        let row = &r.matching[0].rows[0];
        assert_eq!(row.failures.len(), r.matching[0].probes * r.matching[0].gallery);

        let echo = AdapterConfig::new("echo", &["7"]);
        let r = run_experiment(&ds, &[], &cfg(&echo), Some(&dir.path().join("c"))).unwrap();
        assert!(r.matching[0].rows[0].failures.is_empty());
    }
}
