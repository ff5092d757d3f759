//! Command-line front end: one subcommand per pipeline stage, all writing
//! under a run directory with a `run.json` manifest of completed stages.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::evalkit::{self, run_experiment, ExperimentConfig, Model};
use crate::image::MapStack;
use crate::mapextract::make_target_stack_with;
use crate::nets::{self, Net, NetConfig, NetKind};
use crate::synthgen::{build_dataset, DatasetConfig, DatasetManifest, Split};
use crate::trainer::{self, train_cgan, train_verifier, TrainConfig};

pub const RUN_MANIFEST: &str = "run.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_MATCHER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pidigan", version, about = "Latent fingerprint reconstruction pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Forces deterministic training.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Run directory; defaults to `<runs_root>/<name>`.
    #[arg(long, global = true, value_name = "PATH")]
    pub run_dir: Option<PathBuf>,
    /// Train or evaluate the plain cGAN without verifier features.
    #[arg(long, global = true)]
    pub no_pidi: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic dataset.
    Synth,
    /// Re-extract target stacks from the clean impressions.
    Extract,
    /// Train the Siamese verifier tower.
    TrainVerifier,
    /// Train the generator and discriminator.
    Train,
    /// Write reconstructions of a dataset split.
    Reconstruct,
    /// Run the evaluation protocols and write the report.
    Evaluate,
    /// Print per-layer shapes and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Input side length; defaults to 256, or the training size with --config.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Channel divisor; defaults to 1, or the training divisor with --config.
    #[arg(long)]
    pub width_divisor: Option<usize>,
    /// Emit JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub runs_root: PathBuf,
    /// Use an existing dataset directory instead of `<run>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub verifier: TrainConfig,
    pub train: TrainConfig,
    pub reconstruct_split: Split,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            runs_root: PathBuf::from("runs"),
            dataset_dir: None,
            dataset: DatasetConfig::default(),
            verifier: TrainConfig::default(),
            train: TrainConfig::default(),
            reconstruct_split: Split::Test,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Validation {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed: std::result::Result<Self, String> = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::validation("name", "must be a plain, non-empty directory name"));
        }
        self.dataset.validate().map_err(|e| in_section("dataset", e))?;
        self.verifier.validate().map_err(|e| in_section("verifier", e))?;
        self.train.validate().map_err(|e| in_section("train", e))?;
        self.experiment.validate().map_err(|e| in_section("experiment", e))?;
        if self.train.net.input_size != self.dataset.synth.size {
            return Err(Error::validation(
                "train.net.input_size",
                format!("must equal dataset.synth.size ({})", self.dataset.synth.size),
            ));
        }
        if self.verifier.net != self.train.net {
            return Err(Error::validation("verifier.net", "must equal train.net"));
        }
        Ok(())
    }

    fn apply(&mut self, g: &GlobalArgs) {
        if let Some(s) = g.seed {
            self.dataset.global_seed = s;
            self.verifier.seed = s;
            self.train.seed = s;
            self.experiment.seed = s;
        }
        if g.deterministic {
            self.verifier.deterministic = true;
            self.train.deterministic = true;
        }
        if g.no_pidi {
            self.train.pidi = false;
        }
    }
}

/// Completed stages of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub output: PathBuf,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Checksums of the stage's inputs.
    pub inputs: BTreeMap<String, String>,
    pub outputs: serde_json::Value,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let p = run_dir.join(RUN_MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&p).at(&p)?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Corrupt {
            path: p,
            reason: e.to_string(),
        })
    }

    fn store(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(RUN_MANIFEST);
        let tmp = run_dir.join(format!(".{RUN_MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).at(&tmp)?;
        fs::rename(&tmp, &p).at(&p)
    }
}

struct Ctx {
    cfg: RunConfig,
    run_dir: PathBuf,
    no_pidi: bool,
}

impl Ctx {
    fn dataset_dir(&self) -> PathBuf {
        self.cfg.dataset_dir.clone().unwrap_or_else(|| self.run_dir.join("dataset"))
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let d = self.dataset_dir();
        if !d.join(crate::synthgen::MANIFEST_FILE).is_file() {
            return Err(Error::Config(format!("no dataset at {}; run `synth` first", d.display())));
        }
        DatasetManifest::load(&d)
    }

    fn train_dir(&self, pidi: bool) -> PathBuf {
        self.run_dir.join(if pidi { "train" } else { "train_no_pidi" })
    }

    fn verifier(&self) -> Result<Net> {
        let d = self.run_dir.join("verifier");
        if !d.is_dir() {
            return Err(Error::Config(format!("no verifier at {}; run `train-verifier` first", d.display())));
        }
        trainer::load_verifier(&d, Some(self.cfg.train.net))
    }

    /// Trained generators present in the run, as (row name, net).
    fn generators(&self) -> Result<Vec<(String, Net)>> {
        let mut out = Vec::new();
        let variants: &[(bool, &str)] = if self.no_pidi {
            &[(false, "cGAN")]
        } else {
            &[(false, "cGAN"), (true, "cGAN+PIDI")]
        };
        for &(pidi, name) in variants {
            let d = self.train_dir(pidi).join("final");
            if d.is_dir() {
                out.push((name.to_string(), evalkit::load_generator(&d)?));
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no trained generator in the run directory; run `train` first".into()));
        }
        Ok(out)
    }

    /// Runs `body` into a staging directory and publishes it as `output`
    /// plus a `run.json` entry. An identical completed stage is a no-op; any
    /// other existing output is an error.
    fn stage<C: Serialize>(
        &self,
        name: &str,
        config: &C,
        seed: Option<u64>,
        inputs: BTreeMap<String, String>,
        output: &Path,
        body: impl FnOnce(&Path) -> Result<serde_json::Value>,
    ) -> Result<StageOutcome> {
        fs::create_dir_all(&self.run_dir).at(&self.run_dir)?;
        let config = serde_json::to_value(config)?;
        let hash = hex::encode(Sha256::digest(
            serde_json::to_vec(&serde_json::json!({ "config": config, "seed": seed, "inputs": inputs }))?,
        ));
        let mut manifest = RunManifest::load(&self.run_dir)?.unwrap_or_else(|| RunManifest {
            name: self.cfg.name.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            stages: BTreeMap::new(),
        });
        if output.exists() {
            return match manifest.stages.get(name) {
                Some(rec) if rec.config_hash == hash && rec.output == output => {
                    log::info!("{name}: already complete with this configuration");
                    Ok(StageOutcome::UpToDate)
                }
                Some(_) => Err(Error::Config(format!(
                    "{} holds a `{name}` result from a different configuration; use another --run-dir",
                    output.display()
                ))),
                None => Err(Error::AlreadyExists(output.to_path_buf())),
            };
        }
        let file = output.file_name().and_then(|n| n.to_str()).unwrap_or(name);
        let staging = output.with_file_name(format!(".{file}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).at(&staging)?;
        }
        if let Some(parent) = staging.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let outputs = match body(&staging) {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
        };
        fs::rename(&staging, output).at(output)?;
        manifest.stages.insert(
            name.to_string(),
            StageRecord {
                output: output.to_path_buf(),
                config_hash: hash,
                config,
                seed,
                inputs,
                outputs,
            },
        );
        manifest.store(&self.run_dir)?;
        Ok(StageOutcome::Completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Completed,
    UpToDate,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation { .. } | Error::Config(_) => EXIT_CONFIG,
        Error::Matcher(_) => EXIT_MATCHER,
        _ => EXIT_STAGE,
    }
}

/// Parses nothing; executes an already-parsed command line.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    if let Command::Inspect(args) = &cli.command {
        let base = match &cli.global.config {
            Some(p) => {
                let c = RunConfig::load(p)?;
                c.validate()?;
                c.train.net
            }
            None => NetConfig::default(),
        };
        let net = NetConfig::new(
            args.input_size.unwrap_or(base.input_size),
            args.width_divisor.unwrap_or(base.width_divisor),
        );
        net.validate()?;
        return inspect(net, args.json, stdout);
    }

    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.global);
    cfg.validate()?;
    let run_dir = cli
        .global
        .run_dir
        .clone()
        .unwrap_or_else(|| cfg.runs_root.join(&cfg.name));
    let ctx = Ctx {
        cfg,
        run_dir,
        no_pidi: cli.global.no_pidi,
    };
    let (stage, outcome) = match cli.command {
        Command::Synth => ("synth", cmd_synth(&ctx)?),
        Command::Extract => ("extract", cmd_extract(&ctx)?),
        Command::TrainVerifier => ("train-verifier", cmd_train_verifier(&ctx)?),
        Command::Train => ("train", cmd_train(&ctx)?),
        Command::Reconstruct => ("reconstruct", cmd_reconstruct(&ctx)?),
        Command::Evaluate => ("evaluate", cmd_evaluate(&ctx, stdout)?),
        Command::Inspect(_) => unreachable!("handled above"),
    };
    let note = match outcome {
        StageOutcome::Completed => "done",
        StageOutcome::UpToDate => "up to date",
    };
    writeln!(stdout, "{stage}: {note} ({})", ctx.run_dir.display()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn checksum_inputs(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn cmd_synth(ctx: &Ctx) -> Result<StageOutcome> {
    let out = ctx.dataset_dir();
    let cfg = &ctx.cfg.dataset;
    ctx.stage("synth", cfg, Some(cfg.global_seed), BTreeMap::new(), &out, |staging| {
        let m = build_dataset(staging, cfg)?;
        Ok(serde_json::json!({
            "records": m.records.len(),
            "latent_files": m.records.len(),
            "checksum": m.checksum()?,
        }))
    })
}

fn cmd_extract(ctx: &Ctx) -> Result<StageOutcome> {
    let manifest = ctx.manifest()?;
    let checksum = manifest.checksum()?;
    let cfg = ctx.cfg.dataset.extract;
    let out = ctx.run_dir.join("extract");
    ctx.stage("extract", &cfg, None, checksum_inputs(&[("dataset", checksum)]), &out, |staging| {
        let dir = staging.join("stacks");
        fs::create_dir_all(&dir).at(&dir)?;
        let mut seen = BTreeMap::new();
        for r in &manifest.records {
            seen.entry(r.stack.clone()).or_insert_with(|| r.clean.clone());
        }
        let mut identical = 0usize;
        let mut hasher = Sha256::new();
        for (stack_rel, clean_rel) in &seen {
            let img = crate::image::FingerprintImage::load_png(&manifest.resolve(clean_rel))?;
            let stack = make_target_stack_with(&img, &cfg)?;
            let name = Path::new(stack_rel).file_name().map(PathBuf::from).unwrap_or_default();
            let blob = stack.to_blob();
            hasher.update(&blob);
            let p = dir.join(&name);
            fs::write(&p, &blob).at(&p)?;
            if MapStack::load(&manifest.resolve(stack_rel))? == stack {
                identical += 1;
            }
        }
        Ok(serde_json::json!({
            "stacks": seen.len(),
            "identical_to_dataset": identical,
            "checksum": hex::encode(hasher.finalize()),
        }))
    })
}

fn cmd_train_verifier(ctx: &Ctx) -> Result<StageOutcome> {
    let manifest = ctx.manifest()?;
    let cfg = &ctx.cfg.verifier;
    let out = ctx.run_dir.join("verifier");
    let inputs = checksum_inputs(&[("dataset", manifest.checksum()?)]);
    ctx.stage("train-verifier", cfg, Some(cfg.seed), inputs, &out, |staging| {
        let run = train_verifier(&manifest, cfg, Some(staging))?;
        Ok(serde_json::json!({
            "steps": run.losses.len(),
            "final_loss": run.losses.last(),
            "digest": run.net.parameter_digest(),
        }))
    })
}

fn cmd_train(ctx: &Ctx) -> Result<StageOutcome> {
    let manifest = ctx.manifest()?;
    let verifier = ctx.verifier()?;
    let cfg = &ctx.cfg.train;
    let out = ctx.train_dir(cfg.pidi);
    let stage = if cfg.pidi { "train" } else { "train-no-pidi" };
    let inputs = checksum_inputs(&[
        ("dataset", manifest.checksum()?),
        ("verifier", verifier.parameter_digest()),
    ]);
    ctx.stage(stage, cfg, Some(cfg.seed), inputs, &out, |staging| {
        let st = train_cgan(&manifest, &verifier, cfg, Some(staging))?;
        if st.verifier.parameter_digest() != verifier.parameter_digest() {
            return Err(Error::Domain("verifier weights changed during training".into()));
        }
        Ok(serde_json::json!({
            "steps": st.global_step,
            "final": st.metrics.last(),
            "generator_digest": st.generator.parameter_digest(),
        }))
    })
}

fn cmd_reconstruct(ctx: &Ctx) -> Result<StageOutcome> {
    let manifest = ctx.manifest()?;
    let gens = ctx.generators()?;
    let split = ctx.cfg.reconstruct_split;
    let out = ctx.run_dir.join("reconstruct");
    let mut inputs = checksum_inputs(&[("dataset", manifest.checksum()?)]);
    for (name, g) in &gens {
        inputs.insert(format!("generator:{name}"), g.parameter_digest());
    }
    ctx.stage("reconstruct", &split, None, inputs, &out, |staging| {
        let latents = evalkit::experiment::split_latents(&manifest, split)?;
        let imgs: Vec<&crate::image::FingerprintImage> = latents.iter().map(|(_, l)| l).collect();
        let mut counts = BTreeMap::new();
        for (name, g) in &gens {
            let dir = staging.join(name.replace('+', "_"));
            fs::create_dir_all(&dir).at(&dir)?;
            let recs = evalkit::reconstruct_batch(g, &imgs)?;
            for ((idx, _), r) in latents.iter().zip(&recs) {
                let stem = format!("rec{idx:05}");
                r.stack.save_png_set(&dir, &stem)?;
                crate::image::write_gray_png(&r.masked_ridge, &dir.join(format!("{stem}_masked_ridge.png")))?;
            }
            counts.insert(name.clone(), recs.len());
        }
        Ok(serde_json::json!({ "split": split, "written": counts }))
    })
}

fn cmd_evaluate(ctx: &Ctx, stdout: &mut dyn Write) -> Result<StageOutcome> {
    let manifest = ctx.manifest()?;
    let gens = ctx.generators()?;
    let cfg = &ctx.cfg.experiment;
    let out = ctx.run_dir.join(if ctx.no_pidi { "evaluate_no_pidi" } else { "evaluate" });
    let mut inputs = checksum_inputs(&[("dataset", manifest.checksum()?)]);
    for (name, g) in &gens {
        inputs.insert(format!("generator:{name}"), g.parameter_digest());
    }
    let mut summary = Vec::new();
    let outcome = ctx.stage("evaluate", cfg, Some(cfg.seed), inputs, &out, |staging| {
        let models: Vec<Model> = gens
            .iter()
            .map(|(n, g)| Model {
                name: n.clone(),
                generator: g,
            })
            .collect();
        let report = run_experiment(&manifest, &models, cfg, Some(staging))?;
        for m in &report.matching {
            for r in &m.rows {
                summary.push(format!("{:<17} {:<10} {:?}", m.protocol.name(), r.name, r.rank_table));
            }
        }
        if let Some(q) = &report.quality {
            for r in q {
                summary.push(format!("{:<17} {:<10} mean {:.3} histogram {:?}", "quality", r.name, r.mean, r.histogram));
            }
        }
        Ok(serde_json::json!({ "artifacts": report.artifacts }))
    })?;
    for line in summary {
        writeln!(stdout, "{line}").map_err(|e| Error::io("stdout", e))?;
    }
    Ok(outcome)
}

fn inspect(net: NetConfig, json: bool, out: &mut dyn Write) -> Result<()> {
    let mut all = BTreeMap::new();
    for kind in [NetKind::Generator, NetKind::Discriminator, NetKind::DiscriminatorNoPidi, NetKind::Pidi] {
        let n = Net::new(kind, net, 0)?;
        all.insert(kind.name(), (nets::summarize(&n)?, n.count_params()));
    }
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Error::io("stdout", e));
    if json {
        let v: BTreeMap<&str, serde_json::Value> = all
            .iter()
            .map(|(k, (rows, total))| (*k, serde_json::json!({ "layers": rows, "params": total })))
            .collect();
        return w(out, serde_json::to_string_pretty(&v)?);
    }
    for kind in [NetKind::Generator, NetKind::Discriminator, NetKind::DiscriminatorNoPidi, NetKind::Pidi] {
        let (rows, total) = &all[kind.name()];
        w(out, format!("{} (input {}x{}, width divisor {})", kind.name(), net.input_size, net.input_size, net.width_divisor))?;
        w(
            out,
            format!(
                "{:>5}  {:<8} {:>6} {:>7}  {:<14} {:<14} {:<9} {:<14} {:>10}",
                "layer", "type", "stride", "kernels", "input", "output", "concat", "final", "params"
            ),
        )?;
        for r in rows {
            w(
                out,
                format!(
                    "{:>5}  {:<8} {:>6} {:>7}  {:<14} {:<14} {:<9} {:<14} {:>10}",
                    format!("L{}", r.index),
                    r.type_label,
                    r.stride,
                    r.kernels,
                    r.input.to_string(),
                    r.output.to_string(),
                    r.concat.clone().unwrap_or_else(|| "-".into()),
                    r.final_output.to_string(),
                    r.params
                ),
            )?;
        }
        w(out, format!("total parameters: {total}\n"))?;
    }
    Ok(())
}

/// Entry point used by the binary; returns the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match run(cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
