//! Two training phases: the Siamese verifier tower under the contrastive
//! loss, then the generator against the discriminator with the frozen tower
//! supplying PIDI features.
//!
//! Batch composition is a pure function of `(seed, step)`, so a run is
//! reproducible from its config alone and a checkpoint only needs the step
//! counter, the parameters and the optimizer moments to resume.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::image::{FingerprintImage, MapStack};
use crate::nets::{
    self, discriminator_forward, generator_forward, images_to_tensor, pidi_forward, stacks_to_tensor, Net,
    NetConfig, NetKind, PidiFeatures,
};
use crate::objectives::{
    cgan_value, contrastive_loss, generator_objective, l1_multi, LossWeights, PairLabel, StepMetrics,
    DEFAULT_MARGIN, PROB_EPS,
};
use crate::synthgen::{self, mix_seed, rng_for, DatasetManifest, Split};

const TAG_VERIFIER_INIT: u64 = 0x7631;
const TAG_VERIFIER_PAIRS: u64 = 0x7632;
const TAG_GENERATOR_INIT: u64 = 0x6731;
const TAG_DISCRIMINATOR_INIT: u64 = 0x6431;
const TAG_BATCHES: u64 = 0x6232;

pub const ADAM_EPS: f64 = 1e-8;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VERIFIER_METRICS_FILE: &str = "verifier_metrics.jsonl";
pub const VERIFIER_STEM: &str = "verifier";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub deterministic: bool,
    pub net: NetConfig,
    /// Fuse verifier features into the discriminator. Off is the plain cGAN.
    pub pidi: bool,
    /// Let the generator's gradient flow back through the frozen verifier.
    pub grad_through_pidi: bool,
    /// Contrastive margin for the verifier.
    pub margin: f64,
}

impl Default for TrainConfig {
    /// Desk scale: 30 x 125 steps of batch 8 at 64 px, channels / 4.
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 125,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 0,
            deterministic: true,
            net: NetConfig::new(64, 4),
            pidi: true,
            grad_through_pidi: true,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl TrainConfig {
    /// Full-size schedule: 400 x 7812 steps of batch 64 at 256 px.
    pub fn full_scale() -> Self {
        Self {
            epochs: 400,
            steps_per_epoch: 7812,
            batch_size: 64,
            net: NetConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be finite and > 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(name, "must lie in [0, 1)"));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::validation("margin", "must be finite and > 0"));
        }
        self.weights.validate()?;
        self.net.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch as u64
    }

    pub fn apply_runtime(&self) {
        tch::manual_seed(self.seed as i64);
        if self.deterministic {
            tch::set_num_threads(1);
        }
    }
}

// ---- optimizer ----

/// Adam with bias correction. Moments are kept by parameter name so they can
/// be written into checkpoints.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        tch::no_grad(|| {
            for (name, p) in params {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (p.zeros_like(), p.zeros_like()));
                *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
                *v = &*v * self.beta2 + g.square() * (1.0 - self.beta2);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + self.eps) * self.lr;
                let mut p = p.shallow_clone();
                let _ = p.f_sub_(&update).expect("parameter update");
            }
        });
    }

    pub fn moment(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            named.push((format!("m.{name}"), m));
            named.push((format!("v.{name}"), v));
        }
        if named.is_empty() {
            // safetensors needs at least one entry to round-trip cleanly.
            let marker = Tensor::zeros([1], (Kind::Float, tch::Device::Cpu));
            Tensor::write_safetensors(&[("empty", &marker)], path)?;
        } else {
            Tensor::write_safetensors(&named, path)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, cfg: &TrainConfig, t: u64) -> Result<Self> {
        let entries = Tensor::read_safetensors(path).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (k, t) in entries {
            if let Some(n) = k.strip_prefix("m.") {
                ms.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v.") {
                vs.insert(n.to_string(), t);
            }
        }
        let mut moments = BTreeMap::new();
        for (name, m) in ms {
            let v = vs.remove(&name).ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("first moment of {name} without second moment"),
            })?;
            moments.insert(name, (m, v));
        }
        Ok(Self {
            t,
            moments,
            ..Self::new(cfg)
        })
    }
}

fn zero_grads(net: &Net) {
    for (_, mut t) in net.named_trainables() {
        t.zero_grad();
    }
}

// ---- data ----

/// Training pairs held in memory: latents `[N,1,H,W]`, target stacks `[N,4,H,W]`.
#[derive(Debug)]
pub struct PairData {
    pub latents: Tensor,
    pub stacks: Tensor,
    /// Index of each pair in the manifest's record list.
    pub records: Vec<usize>,
}

impl PairData {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_pairs(pairs: &[(FingerprintImage, MapStack)], records: Vec<usize>) -> Result<Self> {
        if pairs.len() != records.len() {
            return Err(Error::Shape(format!("{} pairs but {} record ids", pairs.len(), records.len())));
        }
        let imgs: Vec<&FingerprintImage> = pairs.iter().map(|p| &p.0).collect();
        let stacks: Vec<&MapStack> = pairs.iter().map(|p| &p.1).collect();
        Ok(Self {
            latents: images_to_tensor(&imgs)?,
            stacks: stacks_to_tensor(&stacks)?,
            records,
        })
    }

    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut ids = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.split == split {
                pairs.push(synthgen::load_pair(manifest, r)?);
                ids.push(i);
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!("manifest has no {split:?} records")));
        }
        Self::from_pairs(&pairs, ids)
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let it = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
        (self.latents.index_select(0, &it), self.stacks.index_select(0, &it))
    }
}

/// Dataset positions used at `step`: consecutive windows over a fresh seeded
/// permutation per pass through the data.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    assert!(n > 0, "empty dataset");
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in step * batch as u64..(step + 1) * batch as u64 {
        let pass = k / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(pass) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(mix_seed(seed, TAG_BATCHES), pass));
            cached = Some((pass, perm));
        }
        out.push(cached.as_ref().unwrap().1[(k % n as u64) as usize]);
    }
    out
}

// ---- verifier ----

/// Clean-impression stacks of one split, one entry per impression.
#[derive(Debug)]
pub struct StackPool {
    pub stacks: Tensor,
    pub fingers: Vec<u64>,
}

impl StackPool {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for r in manifest.split(split) {
            seen.entry(r.stack.clone()).or_insert(r.finger_id);
        }
        let mut stacks = Vec::with_capacity(seen.len());
        let mut fingers = Vec::with_capacity(seen.len());
        for (path, finger) in seen {
            stacks.push(MapStack::load(&manifest.resolve(&path))?);
            fingers.push(finger);
        }
        if stacks.is_empty() {
            return Err(Error::Config(format!("manifest has no {split:?} stacks")));
        }
        let refs: Vec<&MapStack> = stacks.iter().collect();
        Ok(Self {
            stacks: stacks_to_tensor(&refs)?,
            fingers,
        })
    }

    fn by_finger(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.fingers.iter().enumerate() {
            m.entry(*f).or_default().push(i);
        }
        m
    }

    /// Balanced genuine/impostor pairs: even slots genuine, odd slots impostor.
    pub fn sample_pairs(&self, seed: u64, step: u64, count: usize) -> Result<Vec<(usize, usize, PairLabel)>> {
        let groups = self.by_finger();
        let multi: Vec<&Vec<usize>> = groups.values().filter(|v| v.len() >= 2).collect();
        if multi.is_empty() {
            return Err(Error::Config(
                "verifier training needs at least two impressions of some finger for genuine pairs".into(),
            ));
        }
        if groups.len() < 2 {
            return Err(Error::Config("verifier training needs at least two fingers for impostor pairs".into()));
        }
        let mut rng = rng_for(mix_seed(seed, TAG_VERIFIER_PAIRS), step);
        let n = self.fingers.len();
        let mut out = Vec::with_capacity(count);
        for slot in 0..count {
            if slot % 2 == 0 {
                let g = multi[rng.gen_range(0..multi.len())];
                let a = rng.gen_range(0..g.len());
                let mut b = rng.gen_range(0..g.len() - 1);
                if b >= a {
                    b += 1;
                }
                out.push((g[a], g[b], PairLabel { genuine: true }));
            } else {
                let a = rng.gen_range(0..n);
                let b = loop {
                    let b = rng.gen_range(0..n);
                    if self.fingers[b] != self.fingers[a] {
                        break b;
                    }
                };
                out.push((a, b, PairLabel { genuine: false }));
            }
        }
        Ok(out)
    }
}

/// Distances between L2-normalised embeddings of paired stacks `[N,4,H,W]`.
pub fn embedding_distance(verifier: &Net, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    tch::no_grad(|| {
        let ea = pidi_forward(verifier, a, false)?.embedding;
        let eb = pidi_forward(verifier, b, false)?.embedding;
        let na = &ea / ea.norm_scalaropt_dim(2.0, [1i64].as_slice(), true).clamp_min(1e-12);
        let nb = &eb / eb.norm_scalaropt_dim(2.0, [1i64].as_slice(), true).clamp_min(1e-12);
        let d = (na - nb)
            .square()
            .sum_dim_intlist([1i64].as_slice(), false, Kind::Double)
            .sqrt();
        Ok(Vec::<f64>::try_from(&d)?)
    })
}

#[derive(Debug)]
pub struct VerifierRun {
    /// Trained tower, frozen.
    pub net: Net,
    pub losses: Vec<f64>,
}

/// Fits the verifier tower on clean-impression stacks of the train split.
/// With `out`, writes `verifier.{safetensors,json}` and the loss stream there.
pub fn train_verifier(manifest: &DatasetManifest, cfg: &TrainConfig, out: Option<&Path>) -> Result<VerifierRun> {
    cfg.validate()?;
    let pool = StackPool::load(manifest, Split::Train)?;
    // Fail on unusable data before any step runs.
    pool.sample_pairs(cfg.seed, 0, 2)?;
    train_verifier_on(&pool, cfg, out)
}

pub fn train_verifier_on(pool: &StackPool, cfg: &TrainConfig, out: Option<&Path>) -> Result<VerifierRun> {
    cfg.validate()?;
    cfg.apply_runtime();
    let mut net = Net::new(NetKind::Pidi, cfg.net, mix_seed(cfg.seed, TAG_VERIFIER_INIT))?;
    let mut opt = Adam::new(cfg);
    let mut sink = match out {
        Some(dir) => Some(MetricsSink::create(dir, VERIFIER_METRICS_FILE)?),
        None => None,
    };
    let mut losses = Vec::new();
    for step in 0..cfg.total_steps() {
        let pairs = pool.sample_pairs(cfg.seed, step, cfg.batch_size.max(2))?;
        let ia: Vec<i64> = pairs.iter().map(|p| p.0 as i64).collect();
        let ib: Vec<i64> = pairs.iter().map(|p| p.1 as i64).collect();
        let labels: Vec<PairLabel> = pairs.iter().map(|p| p.2).collect();
        let both = Tensor::cat(
            &[
                pool.stacks.index_select(0, &Tensor::from_slice(&ia)),
                pool.stacks.index_select(0, &Tensor::from_slice(&ib)),
            ],
            0,
        );
        let emb = pidi_forward(&net, &both, true)?.embedding;
        let halves = emb.split(pairs.len() as i64, 0);
        let loss = contrastive_loss(&halves[0], &halves[1], &labels, cfg.margin)?;
        let v = loss.double_value(&[]);
        if !v.is_finite() {
            let mut batch: Vec<usize> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
            batch.dedup();
            return Err(Error::NonFiniteLoss { step, batch });
        }
        zero_grads(&net);
        loss.backward();
        opt.step(&net.named_trainables());
        losses.push(v);
        if let Some(s) = sink.as_mut() {
            s.write(&serde_json::json!({ "step": step, "contrastive": v }))?;
        }
    }
    net.set_trainable(false);
    if let Some(dir) = out {
        let mut meta = BTreeMap::new();
        meta.insert("steps".into(), serde_json::json!(cfg.total_steps()));
        meta.insert("seed".into(), serde_json::json!(cfg.seed));
        meta.insert("final_loss".into(), serde_json::json!(losses.last()));
        nets::save_net(&net, dir, VERIFIER_STEM, meta)?;
    }
    Ok(VerifierRun { net, losses })
}

/// Loads a verifier checkpoint and freezes it.
pub fn load_verifier(dir: &Path, net: Option<NetConfig>) -> Result<Net> {
    let (mut v, _) = nets::load_net(dir, VERIFIER_STEM, net.map(|c| (NetKind::Pidi, c)))?;
    if v.kind() != NetKind::Pidi {
        return Err(Error::ArchitectureMismatch {
            expected: "pidi".into(),
            found: v.kind().name().into(),
        });
    }
    v.set_trainable(false);
    Ok(v)
}

// ---- cGAN ----

/// Everything needed to continue a cGAN run.
#[derive(Debug)]
pub struct TrainState {
    pub global_step: u64,
    pub generator: Net,
    pub discriminator: Net,
    /// Frozen copy of the verifier tower; unused by the plain cGAN.
    pub verifier: Net,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub metrics: Vec<StepMetrics>,
    /// Checksum of the dataset manifest the run trains on, when known.
    pub manifest_checksum: Option<String>,
}

impl TrainState {
    pub fn epoch(&self, cfg: &TrainConfig) -> u64 {
        self.global_step / cfg.steps_per_epoch.max(1) as u64
    }
}

pub fn init_cgan(verifier: &Net, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let want = nets::architecture_hash(NetKind::Pidi, &cfg.net);
    if verifier.architecture_hash() != want {
        return Err(Error::ArchitectureMismatch {
            expected: want,
            found: verifier.architecture_hash(),
        });
    }
    let mut v = Net::new(NetKind::Pidi, cfg.net, 0)?;
    v.copy_from(verifier)?;
    v.set_trainable(false);
    let d_kind = if cfg.pidi {
        NetKind::Discriminator
    } else {
        NetKind::DiscriminatorNoPidi
    };
    Ok(TrainState {
        global_step: 0,
        generator: Net::new(NetKind::Generator, cfg.net, mix_seed(cfg.seed, TAG_GENERATOR_INIT))?,
        discriminator: Net::new(d_kind, cfg.net, mix_seed(cfg.seed, TAG_DISCRIMINATOR_INIT))?,
        verifier: v,
        opt_g: Adam::new(cfg),
        opt_d: Adam::new(cfg),
        metrics: Vec::new(),
        manifest_checksum: None,
    })
}

fn pidi_frozen(v: &Net, stacks: &Tensor) -> Result<PidiFeatures> {
    tch::no_grad(|| pidi_forward(v, stacks, false))
}

fn non_finite(step: u64, idx: &[usize], data: &PairData) -> Error {
    Error::NonFiniteLoss {
        step,
        batch: idx.iter().map(|&i| data.records[i]).collect(),
    }
}

/// One discriminator update followed by one generator update on the batch
/// for `state.global_step`. Returns the losses measured before the updates.
pub fn cgan_step(state: &mut TrainState, data: &PairData, cfg: &TrainConfig) -> Result<StepMetrics> {
    let step = state.global_step;
    let idx = batch_indices(cfg.seed, step, data.len(), cfg.batch_size);
    let (latent, real) = data.batch(&idx);
    let fused = state.discriminator.kind() == NetKind::Discriminator;

    let fake = generator_forward(&state.generator, &latent, true)?;
    let fake_d = fake.detach();

    // D sees the same latent with the real and the generated stack.
    let (pr, pf) = if fused {
        (Some(pidi_frozen(&state.verifier, &real)?), Some(pidi_frozen(&state.verifier, &fake_d)?))
    } else {
        (None, None)
    };
    let d_real = discriminator_forward(&state.discriminator, &latent, &real, pr.as_ref(), true)?;
    let d_fake = discriminator_forward(&state.discriminator, &latent, &fake_d, pf.as_ref(), true)?;
    let terms = cgan_value(&d_real, &d_fake, Some(PROB_EPS))?;
    let d_loss = terms.d_loss.double_value(&[]);
    if !d_loss.is_finite() {
        return Err(non_finite(step, &idx, data));
    }
    zero_grads(&state.discriminator);
    terms.d_loss.backward();
    state.opt_d.step(&state.discriminator.named_trainables());

    let pg = match (fused, cfg.grad_through_pidi) {
        (false, _) => None,
        (true, true) => Some(pidi_forward(&state.verifier, &fake, false)?),
        (true, false) => Some(pidi_frozen(&state.verifier, &fake_d)?),
    };
    let d_fake_g = discriminator_forward(&state.discriminator, &latent, &fake, pg.as_ref(), true)?;
    let adv = cgan_value(&d_real.detach(), &d_fake_g, Some(PROB_EPS))?.g_adv;
    let l1 = l1_multi(&fake, &real, &cfg.weights)?;
    let total = generator_objective(&adv, &l1.total, &cfg.weights);
    let per: Vec<f64> = l1.per_channel.iter().map(|t| t.double_value(&[])).collect();
    let m = StepMetrics {
        step,
        d_loss,
        g_adv: adv.double_value(&[]),
        l1_r: per[0],
        l1_f: per[1],
        l1_o: per[2],
        l1_s: per[3],
        total: total.double_value(&[]),
    };
    if !m.is_finite() {
        return Err(non_finite(step, &idx, data));
    }
    zero_grads(&state.generator);
    total.backward();
    state.opt_g.step(&state.generator.named_trainables());
    // D picked up gradients from the generator pass; they are not applied.
    zero_grads(&state.discriminator);
    state.global_step += 1;
    Ok(m)
}

/// Runs steps until `state.global_step == until`, streaming metrics and
/// writing periodic checkpoints under `out`.
pub fn run_cgan(
    state: &mut TrainState,
    data: &PairData,
    cfg: &TrainConfig,
    out: Option<&Path>,
    until: u64,
) -> Result<()> {
    cfg.validate()?;
    cfg.apply_runtime();
    if data.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let mut sink = match out {
        Some(dir) => {
            let mut s = MetricsSink::create(dir, METRICS_FILE)?;
            for m in &state.metrics {
                s.write(m)?;
            }
            Some(s)
        }
        None => None,
    };
    while state.global_step < until {
        let m = match cgan_step(state, data, cfg) {
            Ok(m) => m,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let (Some(dir), Error::NonFiniteLoss { step, batch }) = (out, &e) {
                    let p = dir.join(format!("nonfinite-step-{step}.json"));
                    let dump = serde_json::json!({ "step": step, "record_indices": batch });
                    fs::write(&p, serde_json::to_vec_pretty(&dump)?).at(&p)?;
                }
                log::error!("{e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(s) = sink.as_mut() {
            s.write(&m)?;
        }
        state.metrics.push(m);
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && state.global_step % cfg.checkpoint_interval == 0 {
                save_checkpoint(state, cfg, &checkpoint_dir(dir, state.global_step))?;
            }
        }
    }
    Ok(())
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:08}"))
}

/// Full cGAN training on the manifest's train split. With `out`, the final
/// state lands in `out/final`.
pub fn train_cgan(
    manifest: &DatasetManifest,
    verifier: &Net,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    let data = PairData::load(manifest, Split::Train)?;
    let mut state = init_cgan(verifier, cfg)?;
    state.manifest_checksum = Some(manifest.checksum()?);
    let before = state.verifier.parameter_digest();
    run_cgan(&mut state, &data, cfg, out, cfg.total_steps())?;
    debug_assert_eq!(before, state.verifier.parameter_digest());
    if let Some(dir) = out {
        save_checkpoint(&state, cfg, &dir.join("final"))?;
    }
    Ok(state)
}

/// Continues a run from a checkpoint to the configured number of steps.
pub fn resume_cgan(
    manifest: &DatasetManifest,
    checkpoint: &Path,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainState> {
    let mut state = load_checkpoint(checkpoint, Some(cfg))?;
    let checksum = manifest.checksum()?;
    if let Some(c) = &state.manifest_checksum {
        if *c != checksum {
            return Err(Error::Config(format!(
                "checkpoint was trained on dataset {c}, manifest has checksum {checksum}"
            )));
        }
    }
    let data = PairData::load(manifest, Split::Train)?;
    run_cgan(&mut state, &data, cfg, out, cfg.total_steps())?;
    if let Some(dir) = out {
        save_checkpoint(&state, cfg, &dir.join("final"))?;
    }
    Ok(state)
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    global_step: u64,
    epoch: u64,
    config: TrainConfig,
    adam_t_generator: u64,
    adam_t_discriminator: u64,
    architecture_hashes: BTreeMap<String, String>,
    verifier_digest: String,
    manifest_checksum: Option<String>,
    metrics: Vec<StepMetrics>,
}

const STEM_G: &str = "generator";
const STEM_D: &str = "discriminator";
const OPT_G: &str = "adam_generator.safetensors";
const OPT_D: &str = "adam_discriminator.safetensors";

/// Writes the state into a fresh directory `dir` (staged, then renamed).
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let stage = dir.with_file_name(format!(".{name}.partial"));
    if stage.exists() {
        fs::remove_dir_all(&stage).at(&stage)?;
    }
    fs::create_dir_all(&stage).at(&stage)?;
    let meta = || {
        let mut m = BTreeMap::new();
        m.insert("global_step".into(), serde_json::json!(state.global_step));
        m
    };
    nets::save_net(&state.generator, &stage, STEM_G, meta())?;
    nets::save_net(&state.discriminator, &stage, STEM_D, meta())?;
    nets::save_net(&state.verifier, &stage, VERIFIER_STEM, meta())?;
    state.opt_g.save(&stage.join(OPT_G))?;
    state.opt_d.save(&stage.join(OPT_D))?;
    let mut hashes = BTreeMap::new();
    hashes.insert(STEM_G.into(), state.generator.architecture_hash());
    hashes.insert(STEM_D.into(), state.discriminator.architecture_hash());
    hashes.insert(VERIFIER_STEM.into(), state.verifier.architecture_hash());
    let file = StateFile {
        global_step: state.global_step,
        epoch: state.epoch(cfg),
        config: cfg.clone(),
        adam_t_generator: state.opt_g.t,
        adam_t_discriminator: state.opt_d.t,
        architecture_hashes: hashes,
        verifier_digest: state.verifier.parameter_digest(),
        manifest_checksum: state.manifest_checksum.clone(),
        metrics: state.metrics.clone(),
    };
    let sp = stage.join(STATE_FILE);
    fs::write(&sp, serde_json::to_vec_pretty(&file)?).at(&sp)?;
    fs::rename(&stage, dir).at(dir)?;
    Ok(())
}

/// Reads a checkpoint. With `cfg`, every network must match the architecture
/// that config would build.
pub fn load_checkpoint(dir: &Path, cfg: Option<&TrainConfig>) -> Result<TrainState> {
    let sp = dir.join(STATE_FILE);
    let bytes = fs::read(&sp).at(&sp)?;
    let file: StateFile = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: sp.clone(),
        reason: e.to_string(),
    })?;
    let expect = |kind: NetKind| cfg.map(|c| (kind, c.net));
    let d_kind = match cfg {
        Some(c) if c.pidi => NetKind::Discriminator,
        Some(_) => NetKind::DiscriminatorNoPidi,
        None => nets::read_manifest(dir, STEM_D)?.kind,
    };
    let (generator, _) = nets::load_net(dir, STEM_G, expect(NetKind::Generator))?;
    let (discriminator, dm) = nets::load_net(dir, STEM_D, cfg.map(|c| (d_kind, c.net)))?;
    let (mut verifier, _) = nets::load_net(dir, VERIFIER_STEM, expect(NetKind::Pidi))?;
    verifier.set_trainable(false);
    if dm.kind != d_kind {
        return Err(Error::ArchitectureMismatch {
            expected: d_kind.name().into(),
            found: dm.kind.name().into(),
        });
    }
    for (stem, net) in [(STEM_G, &generator), (STEM_D, &discriminator), (VERIFIER_STEM, &verifier)] {
        let recorded = file.architecture_hashes.get(stem).cloned().unwrap_or_default();
        if recorded != net.architecture_hash() {
            return Err(Error::ArchitectureMismatch {
                expected: recorded,
                found: net.architecture_hash(),
            });
        }
    }
    if verifier.parameter_digest() != file.verifier_digest {
        return Err(Error::Corrupt {
            path: dir.join(VERIFIER_STEM),
            reason: "verifier weights do not match the recorded digest".into(),
        });
    }
    let opt_cfg = cfg.cloned().unwrap_or_else(|| file.config.clone());
    Ok(TrainState {
        global_step: file.global_step,
        opt_g: Adam::load(&dir.join(OPT_G), &opt_cfg, file.adam_t_generator)?,
        opt_d: Adam::load(&dir.join(OPT_D), &opt_cfg, file.adam_t_discriminator)?,
        generator,
        discriminator,
        verifier,
        metrics: file.metrics,
        manifest_checksum: file.manifest_checksum,
    })
}

/// Reads a metrics stream written by a run.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct MetricsSink {
    w: BufWriter<File>,
}

impl MetricsSink {
    fn create(dir: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(name);
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(&p).at(&p)?;
        Ok(Self { w: BufWriter::new(f) })
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, v)?;
        self.w.write_all(b"\n").map_err(|e| Error::io("metrics stream", e))?;
        self.w.flush().map_err(|e| Error::io("metrics stream", e))
    }
}
