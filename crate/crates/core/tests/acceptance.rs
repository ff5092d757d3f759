//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The desk benchmark (criteria 7 and 8) trains through the CLI stages into
//! `$CARGO_TARGET_TMPDIR/acceptance-desk`. Stages are idempotent, so a rerun
//! with identical configuration and inputs reuses the recorded artifacts;
//! set `PIDIGAN_ACCEPTANCE_FRESH=1` to retrain from scratch.
//! `PIDIGAN_ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use pidigan::cli::{self, Cli, RunConfig};
use pidigan::evalkit::cmc::{cmc, ScoreMatrix};
use pidigan::evalkit::experiment::Report;
use pidigan::evalkit::Protocol;
use pidigan::image::FingerprintImage;
use pidigan::mapextract::make_target_stack;
use pidigan::nets::{self, generator_forward, images_to_tensor, tensor_to_stack, Net, NetConfig, NetKind};
use pidigan::objectives::gradcheck::{relative_errors, uniform};
use pidigan::objectives::{cgan_value, contrastive_loss, generator_objective, l1_multi, LossWeights, PairLabel};
use pidigan::synthgen::{build_dataset, distort, synth_clean, DatasetConfig, DistortionRanges, SynthConfig};
use pidigan::trainer::{self, cgan_step, init_cgan, train_cgan, train_verifier, PairData, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::Tensor;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("PIDIGAN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria = [
        Criterion { id: 1, name: "architecture conformance", budget: mins(1), run: c1_architecture },
        Criterion { id: 2, name: "loss gradients", budget: mins(2), run: c2_gradients },
        Criterion { id: 3, name: "channel weighting", budget: Duration::from_secs(1), run: c3_weighting },
        Criterion { id: 4, name: "overfit probe", budget: mins(15), run: c4_overfit },
        Criterion { id: 5, name: "determinism", budget: mins(5), run: c5_determinism },
        Criterion { id: 6, name: "cmc oracle", budget: mins(1), run: c6_cmc },
        Criterion { id: 7, name: "desk benchmark ordering", budget: mins(120), run: c7_benchmark },
        Criterion { id: 8, name: "quality direction", budget: mins(5), run: c8_quality },
        Criterion { id: 9, name: "frozen verifier", budget: mins(1), run: c9_frozen },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t = Instant::now();
        let out = (c.run)();
        let took = t.elapsed();
        // Criterion 7 reports its own training time, which may predate this run.
        let over = c.id != 7 && took > c.budget;
        let (ok, detail) = match out {
            Ok(d) if over => (false, format!("{d}; over the {}s budget", c.budget.as_secs())),
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {} ({}) [{:.1}s]: {}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn s(h: i64, w: i64, c: i64) -> String {
    format!("{h}x{w}x{c}")
}

/// Reference (input, output, final) shapes per layer at 256x256, full width.
fn expected(kind: NetKind) -> Vec<(String, String, String)> {
    match kind {
        NetKind::Generator => {
            let enc = [
                (256, 1, 256, 64),
                (256, 64, 128, 128),
                (128, 128, 128, 128),
                (128, 128, 64, 256),
                (64, 256, 64, 256),
                (64, 256, 32, 512),
                (32, 512, 32, 512),
                (32, 512, 16, 512),
                (16, 512, 16, 512),
                (16, 512, 16, 512),
            ];
            let dec = [
                (16, 512, 32, 512, 1024),
                (32, 1024, 32, 512, 512),
                (32, 512, 64, 256, 512),
                (64, 512, 64, 256, 256),
                (64, 256, 128, 128, 256),
                (128, 256, 128, 128, 128),
                (128, 128, 256, 64, 128),
                (256, 128, 256, 4, 4),
            ];
            enc.iter()
                .map(|&(hi, ci, ho, co)| (s(hi, hi, ci), s(ho, ho, co), s(ho, ho, co)))
                .chain(dec.iter().map(|&(hi, ci, ho, co, cf)| (s(hi, hi, ci), s(ho, ho, co), s(ho, ho, cf))))
                .collect()
        }
        NetKind::Discriminator => [
            (256, 5, 128, 64, 128),
            (128, 128, 64, 128, 256),
            (64, 256, 32, 256, 512),
            (32, 512, 16, 512, 1024),
            (16, 1024, 16, 1, 1),
        ]
        .iter()
        .map(|&(hi, ci, ho, co, cf)| (s(hi, hi, ci), s(ho, ho, co), s(ho, ho, cf)))
        .collect(),
        NetKind::DiscriminatorNoPidi => [
            (256, 5, 128, 64),
            (128, 64, 64, 128),
            (64, 128, 32, 256),
            (32, 256, 16, 512),
            (16, 512, 16, 1),
        ]
        .iter()
        .map(|&(hi, ci, ho, co)| (s(hi, hi, ci), s(ho, ho, co), s(ho, ho, co)))
        .collect(),
        NetKind::Pidi => {
            let mut v: Vec<_> = [
                (256, 4, 128, 64),
                (128, 64, 64, 128),
                (64, 128, 32, 256),
                (32, 256, 16, 512),
                (16, 512, 8, 512),
                (8, 512, 4, 512),
            ]
            .iter()
            .map(|&(hi, ci, ho, co)| (s(hi, hi, ci), s(ho, ho, co), s(ho, ho, co)))
            .collect();
            v.push((s(4, 4, 512), s(2, 2, 512), "2048x1".into()));
            v
        }
    }
}

fn c1_architecture() -> Outcome {
    let cfg = NetConfig::new(256, 1);
    let mut cells = 0;
    for kind in [NetKind::Generator, NetKind::Discriminator, NetKind::DiscriminatorNoPidi, NetKind::Pidi] {
        let net = Net::new(kind, cfg, 0).map_err(e2s)?;
        let rows = nets::summarize(&net).map_err(e2s)?;
        let want = expected(kind);
        check(rows.len() == want.len(), format!("{}: {} layers, expected {}", kind.name(), rows.len(), want.len()))?;
        for (r, (i, o, f)) in rows.iter().zip(&want) {
            let got = (r.input.to_string(), r.output.to_string(), r.final_output.to_string());
            check(
                (&got.0, &got.1, &got.2) == (i, o, f),
                format!("{} L{}: got {got:?}, expected ({i}, {o}, {f})", kind.name(), r.index),
            )?;
            cells += 3;
        }
    }
    // The fused discriminator's actual output on a 256 input.
    let g = Net::new(NetKind::Generator, cfg, 0).map_err(e2s)?;
    let p = Net::new(NetKind::Pidi, cfg, 0).map_err(e2s)?;
    let d = Net::new(NetKind::Discriminator, cfg, 0).map_err(e2s)?;
    let x = Tensor::zeros([1, 1, 256, 256], (tch::Kind::Float, tch::Device::Cpu));
    let y = tch::no_grad(|| generator_forward(&g, &x, false)).map_err(e2s)?;
    let f = tch::no_grad(|| nets::pidi_forward(&p, &y, false)).map_err(e2s)?;
    let o = tch::no_grad(|| nets::discriminator_forward(&d, &x, &y, Some(&f), false)).map_err(e2s)?;
    check(y.size() == [1, 4, 256, 256], format!("generator output {:?}", y.size()))?;
    check(f.embedding.size() == [1, 2048], format!("embedding {:?}", f.embedding.size()))?;
    check(o.size() == [1, 1, 16, 16], format!("discriminator output {:?}", o.size()))?;
    Ok(format!("{cells} table cells and 3 forward outputs match"))
}

// ---------------------------------------------------------------- 2

const PROBE: [i64; 4] = [1, 4, 8, 8];
const GRAD_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

fn c2_gradients() -> Outcome {
    let w = LossWeights::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, errs: Vec<f64>| -> Result<(), String> {
        let m = errs.iter().cloned().fold(0.0, f64::max);
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(m);
        check(m <= GRAD_TOL, format!("{name}: relative error {m:.2e}"))
    };
    for k in 0..10u64 {
        let dr = uniform(&PROBE, 0.05, 0.95, 100 + k);
        let df = uniform(&PROBE, 0.05, 0.95, 200 + k);
        record(
            "cgan_value",
            relative_errors(|v| cgan_value(&v[0], &v[1], None).unwrap().value, &[dr.shallow_clone(), df.shallow_clone()], H),
        )?;
        record(
            "cgan_value.g_adv",
            relative_errors(|v| cgan_value(&v[0], &v[1], None).unwrap().g_adv, &[dr, df.shallow_clone()], H),
        )?;

        let gen = uniform(&PROBE, 0.0, 1.0, 300 + k);
        let tgt = uniform(&PROBE, 0.0, 1.0, 400 + k);
        record(
            "l1_multi",
            relative_errors(|v| l1_multi(&v[0], &v[1], &w).unwrap().total, &[gen.shallow_clone(), tgt.shallow_clone()], H),
        )?;

        record(
            "generator_objective",
            relative_errors(
                |v| {
                    let adv = cgan_value(&v[1], &v[2], None).unwrap().g_adv;
                    let l1 = l1_multi(&v[0], &tgt, &w).unwrap().total;
                    generator_objective(&adv, &l1, &w)
                },
                &[gen, uniform(&PROBE, 0.05, 0.95, 500 + k), df],
                H,
            ),
        )?;

        let a = uniform(&[4, 64], -1.0, 1.0, 600 + k);
        let b = uniform(&[4, 64], -1.0, 1.0, 700 + k);
        let labels: Vec<PairLabel> = (0..4).map(|i| PairLabel { genuine: i % 2 == 0 }).collect();
        // A wide margin keeps every impostor inside the hinge.
        record(
            "contrastive_loss",
            relative_errors(|v| contrastive_loss(&v[0], &v[1], &labels, 3.0).unwrap(), &[a.shallow_clone(), b.shallow_clone()], H),
        )?;
        record(
            "contrastive_loss.margin1",
            relative_errors(|v| contrastive_loss(&v[0], &v[1], &labels, 1.0).unwrap(), &[a, b], H),
        )?;
    }
    Ok(worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", "))
}

// ---------------------------------------------------------------- 3

fn c3_weighting() -> Outcome {
    let w = LossWeights::default();
    let target = uniform(&PROBE, 0.3, 0.7, 7);
    let mut totals = Vec::new();
    for c in 0..4usize {
        let mut off = vec![0.0f64; 4];
        off[c] = 0.2;
        let gen = &target + Tensor::from_slice(&off).reshape([1, 4, 1, 1]);
        let t = l1_multi(&gen, &target, &w).map_err(e2s)?;
        let total = t.total.double_value(&[]);
        let own = t.per_channel[c].double_value(&[]);
        check((own - 0.2).abs() < 1e-12, format!("channel {c} error {own}"))?;
        totals.push(total);
    }
    let want = [0.2, 0.02, 0.02, 0.02];
    for (c, (&got, &exp)) in totals.iter().zip(&want).enumerate() {
        check((got - exp).abs() < 1e-12, format!("channel {c}: weighted {got}, expected {exp}"))?;
    }
    Ok(format!("weighted errors {totals:?}"))
}

// ---------------------------------------------------------------- 4

const OVERFIT_PAIRS: u64 = 8;
const OVERFIT_MAX_STEPS: u64 = 2000;
const OVERFIT_TARGET: f64 = 0.05;

fn overfit_pairs() -> Result<Vec<(FingerprintImage, pidigan::image::MapStack)>, String> {
    let cfg = SynthConfig::desk();
    let ranges = DistortionRanges::default();
    (0..OVERFIT_PAIRS)
        .map(|f| {
            let (clean, _) = synth_clean(f, 404, &cfg).map_err(e2s)?;
            let latent = distort(&clean, &ranges.sample(1000 + f).map_err(e2s)?).map_err(e2s)?;
            Ok((latent, make_target_stack(&clean).map_err(e2s)?))
        })
        .collect()
}

fn masked_ridge_l1(g: &Net, pairs: &[(FingerprintImage, pidigan::image::MapStack)]) -> Result<f64, String> {
    let imgs: Vec<&FingerprintImage> = pairs.iter().map(|(l, _)| l).collect();
    let x = images_to_tensor(&imgs).map_err(e2s)?;
    let y = tch::no_grad(|| generator_forward(g, &x, false)).map_err(e2s)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (_, t)) in pairs.iter().enumerate() {
        let r = tensor_to_stack(&y, i as i64).map_err(e2s)?.masked_ridge();
        let want = t.masked_ridge();
        for (a, b) in r.data().iter().zip(want.data()) {
            sum += (a - b).abs() as f64;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn c4_overfit() -> Outcome {
    let pairs = overfit_pairs()?;
    let data = PairData::from_pairs(&pairs, (0..pairs.len()).collect()).map_err(e2s)?;
    let cfg = TrainConfig {
        batch_size: OVERFIT_PAIRS as usize,
        epochs: 1,
        steps_per_epoch: OVERFIT_MAX_STEPS as u32,
        ..TrainConfig::default()
    };
    cfg.apply_runtime();
    let verifier = Net::new(NetKind::Pidi, cfg.net, 1).map_err(e2s)?;
    let mut st = init_cgan(&verifier, &cfg).map_err(e2s)?;
    let mut l1 = f64::INFINITY;
    while st.global_step < OVERFIT_MAX_STEPS {
        cgan_step(&mut st, &data, &cfg).map_err(e2s)?;
        if st.global_step % 100 == 0 {
            l1 = masked_ridge_l1(&st.generator, &pairs)?;
            if l1 < OVERFIT_TARGET {
                break;
            }
        }
    }
    let msg = format!("masked ridge L1 {l1:.4} after {} generator steps", st.global_step);
    check(l1 < OVERFIT_TARGET, &msg)?;
    Ok(msg)
}

// ---------------------------------------------------------------- 5

fn tree_bytes(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&p).map_err(e2s)?);
            }
        }
    }
    Ok(out)
}

fn small_config(name: &str) -> RunConfig {
    let net = NetConfig::new(64, 16);
    let small = TrainConfig {
        epochs: 1,
        steps_per_epoch: 6,
        batch_size: 4,
        net,
        ..TrainConfig::default()
    };
    RunConfig {
        name: name.into(),
        dataset: DatasetConfig {
            n_fingers: 10,
            impressions_per_finger: 2,
            latents_per_impression: 2,
            ..DatasetConfig::default()
        },
        verifier: small.clone(),
        train: small,
        ..RunConfig::default()
    }
}

fn cli_stage(config: &Path, run_dir: &Path, stage: &str, extra: &[&str]) -> Result<String, String> {
    let mut args = vec!["pidigan", "--config", config.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    args.push(stage);
    let parsed = Cli::try_parse_from(&args).map_err(e2s)?;
    let mut out = Vec::new();
    cli::run(parsed, &mut out).map_err(|e| format!("{stage}: {e}"))?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<PathBuf, String> {
    let p = dir.join("config.toml");
    fs::write(&p, toml::to_string(cfg).map_err(e2s)?).map_err(e2s)?;
    Ok(p)
}

fn c5_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let cfg = small_config("det");
    let config = write_config(tmp.path(), &cfg)?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        cli_stage(&config, &dir, "synth", &["--deterministic"])?;
        cli_stage(&config, &dir, "extract", &["--deterministic"])?;
        let mut t = tree_bytes(&dir.join("dataset"))?;
        for (k, v) in tree_bytes(&dir.join("extract"))? {
            t.insert(Path::new("extract").join(k), v);
        }
        trees.push(t);
    }
    check(trees[0].keys().eq(trees[1].keys()), "file sets differ")?;
    let differing: Vec<_> = trees[0].iter().filter(|(k, v)| trees[1][*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty(), format!("differing files: {differing:?}"))?;

    // Two deterministic training runs on the same data.
    let manifest = pidigan::synthgen::DatasetManifest::load(&tmp.path().join("a/dataset")).map_err(e2s)?;
    let mut streams = Vec::new();
    for run in ["t1", "t2"] {
        let out = tmp.path().join(run);
        let v = train_verifier(&manifest, &cfg.verifier, Some(&out.join("verifier"))).map_err(e2s)?;
        train_cgan(&manifest, &v.net, &cfg.train, Some(&out.join("train"))).map_err(e2s)?;
        streams.push((
            fs::read(out.join("verifier").join(trainer::VERIFIER_METRICS_FILE)).map_err(e2s)?,
            fs::read(out.join("train").join(trainer::METRICS_FILE)).map_err(e2s)?,
        ));
    }
    check(streams[0].0 == streams[1].0, "verifier metrics streams differ")?;
    check(streams[0].1 == streams[1].1, "cGAN metrics streams differ")?;
    Ok(format!("{} dataset files identical; metrics streams identical", trees[0].len()))
}

// ---------------------------------------------------------------- 6

/// Rank of the best-placed mate by counting competitors, independent of sorting.
fn brute_force_rank(m: &ScoreMatrix, p: usize) -> Option<usize> {
    let label = m.probe_labels()[p];
    (0..m.gallery())
        .filter(|&j| m.gallery_labels()[j] == label)
        .map(|mate| {
            let s = m.get(p, mate);
            1 + (0..m.gallery()).filter(|&j| m.get(p, j) > s || (m.get(p, j) == s && j < mate)).count()
        })
        .min()
}

fn c6_cmc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let p = rng.gen_range(1..=50);
        let g = rng.gen_range(1..=100);
        let coarse = trial % 2 == 0;
        let scores: Vec<f64> = (0..p * g)
            .map(|_| if coarse { rng.gen_range(0..5) as f64 } else { rng.gen::<f64>() })
            .collect();
        let fingers = rng.gen_range(2..20u64);
        let mut pl: Vec<u64> = (0..p).map(|_| rng.gen_range(0..fingers)).collect();
        let gl: Vec<u64> = (0..g).map(|_| rng.gen_range(0..fingers)).collect();
        pl[0] = gl[0];
        let m = ScoreMatrix::new(scores, pl, gl).map_err(e2s)?;
        let r = cmc(&m).map_err(e2s)?;
        let oracle: Vec<Option<usize>> = (0..p).map(|i| brute_force_rank(&m, i)).collect();
        let ranks: Vec<usize> = oracle.iter().flatten().copied().collect();
        check(r.ranks == ranks, format!("trial {trial}: ranks differ"))?;
        check(r.excluded_probes == oracle.iter().filter(|o| o.is_none()).count(), format!("trial {trial}: exclusions differ"))?;
        for k in 1..=g {
            let want = ranks.iter().filter(|&&x| x <= k).count() as f64 / ranks.len() as f64;
            check(r.at(k) == want, format!("trial {trial}: rank-{k} {} vs {want}", r.at(k)))?;
        }
    }
    Ok("100 matrices agree exactly".into())
}

// ---------------------------------------------------------------- 7, 8

const MIN_GAP: f64 = 0.15;

fn desk_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk")
}

/// Report of the desk benchmark plus the seconds spent training it.
fn desk_report() -> Result<(Report, f64), String> {
    static CACHE: std::sync::OnceLock<Result<(Report, f64), String>> = std::sync::OnceLock::new();
    CACHE
        .get_or_init(|| {
            let dir = desk_dir();
            if std::env::var("PIDIGAN_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
                fs::remove_dir_all(&dir).map_err(e2s)?;
            }
            fs::create_dir_all(&dir).map_err(e2s)?;
            let cfg = RunConfig {
                name: "desk".into(),
                ..RunConfig::default()
            };
            let config = write_config(&dir, &cfg)?;
            let run = dir.join("run");
            let timing_path = dir.join("timing.json");
            let mut timing: BTreeMap<String, f64> = fs::read(&timing_path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or_default();
            for (stage, extra) in [
                ("synth", &[][..]),
                ("train-verifier", &[][..]),
                ("train", &["--no-pidi"][..]),
                ("train", &[][..]),
                ("evaluate", &[][..]),
            ] {
                let key = format!("{stage}{}", extra.join(""));
                let t = Instant::now();
                let out = cli_stage(&config, &run, stage, extra)?;
                if !out.contains("up to date") || !timing.contains_key(&key) {
                    timing.insert(key, t.elapsed().as_secs_f64());
                }
            }
            fs::write(&timing_path, serde_json::to_vec_pretty(&timing).map_err(e2s)?).map_err(e2s)?;
            let report: Report =
                serde_json::from_slice(&fs::read(run.join("evaluate").join("report.json")).map_err(e2s)?).map_err(e2s)?;
            Ok((report, timing.values().sum()))
        })
        .clone()
}

fn rank1(report: &Report, protocol: Protocol, row: &str) -> Result<f64, String> {
    report
        .row(protocol, row)
        .map(|r| r.cmc.at(1))
        .ok_or_else(|| format!("report lacks {} / {row}", protocol.name()))
}

fn c7_benchmark() -> Outcome {
    let (report, secs) = desk_report()?;
    let mut notes = Vec::new();
    let mut ok = true;
    for protocol in [Protocol::LatentToClean, Protocol::LatentToLatent] {
        let raw = rank1(&report, protocol, "raw")?;
        let plain = rank1(&report, protocol, "cGAN")?;
        let pidi = rank1(&report, protocol, "cGAN+PIDI")?;
        let pass = raw <= plain && plain <= pidi && pidi - raw >= MIN_GAP;
        ok &= pass;
        notes.push(format!(
            "{}: rank-1 raw {:.1}% cGAN {:.1}% cGAN+PIDI {:.1}%{}",
            protocol.name(),
            100.0 * raw,
            100.0 * plain,
            100.0 * pidi,
            if pass { "" } else { " (ordering or gap not met)" }
        ));
    }
    let within = secs <= mins(120).as_secs_f64();
    ok &= within;
    notes.push(format!("end-to-end {:.0} min", secs / 60.0));
    let msg = notes.join("; ");
    check(ok, &msg)?;
    Ok(msg)
}

fn c8_quality() -> Outcome {
    let (report, _) = desk_report()?;
    let rows = report.quality.as_ref().ok_or("report has no quality rows")?;
    let mean = |name: &str| rows.iter().find(|r| r.name == name).map(|r| r.mean).ok_or(format!("no quality row {name}"));
    let raw = mean("raw")?;
    let pidi = mean("cGAN+PIDI")?;
    let plain = mean("cGAN")?;
    let msg = format!("mean quality raw {raw:.3}, cGAN {plain:.3}, cGAN+PIDI {pidi:.3}");
    check(pidi < raw, &msg)?;
    Ok(msg)
}

// ---------------------------------------------------------------- 9

fn c9_frozen() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let cfg = small_config("frozen");
    let manifest = build_dataset(&tmp.path().join("ds"), &cfg.dataset).map_err(e2s)?;
    let vdir = tmp.path().join("verifier");
    let v = train_verifier(&manifest, &cfg.verifier, Some(&vdir)).map_err(e2s)?;
    let file = vdir.join(format!("{}.safetensors", trainer::VERIFIER_STEM));
    let bytes_before = fs::read(&file).map_err(e2s)?;
    let digest = v.net.parameter_digest();
    for pidi in [true, false] {
        let train = TrainConfig { pidi, ..cfg.train.clone() };
        let out = tmp.path().join(format!("train-{pidi}"));
        let st = train_cgan(&manifest, &v.net, &train, Some(&out)).map_err(e2s)?;
        check(st.verifier.parameter_digest() == digest, format!("pidi={pidi}: verifier copy changed"))?;
        check(v.net.parameter_digest() == digest, format!("pidi={pidi}: source verifier changed"))?;
        let saved = fs::read(out.join("final").join(format!("{}.safetensors", trainer::VERIFIER_STEM))).map_err(e2s)?;
        check(saved == bytes_before, format!("pidi={pidi}: checkpointed verifier bytes differ"))?;
    }
    // The desk run, when present, must also carry the verifier unchanged.
    let desk = desk_dir().join("run");
    let mut extra = String::new();
    if desk.join("train/final").is_dir() {
        let a = fs::read(desk.join("verifier").join(format!("{}.safetensors", trainer::VERIFIER_STEM))).map_err(e2s)?;
        let b = fs::read(desk.join("train/final").join(format!("{}.safetensors", trainer::VERIFIER_STEM))).map_err(e2s)?;
        check(a == b, "desk run: verifier bytes changed during training")?;
        extra = "; desk run verifier unchanged".into();
    }
    Ok(format!("verifier bytes identical after training with and without fusion{extra}"))
}
