//! Subprocess adapters for third-party matchers and quality tools.
//!
//! An adapter runs one executable with an argument template containing
//! `{probe}` and `{gallery}` placeholders and pulls the score out of stdout
//! with a regex (first capture group, or the whole match).

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("matcher executable not found: {0}")]
    MissingExecutable(PathBuf),
    #[error("failed to launch {path}: {source}")]
    Launch {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("matcher exited with status {code:?}: {stderr}")]
    MatcherFailure { code: Option<i32>, stderr: String },
    #[error("matcher timed out after {0:?}")]
    Timeout(Duration),
    #[error("could not parse a score from matcher output {stdout:?}")]
    Unparseable { stdout: String },
    #[error("invalid parse pattern: {0}")]
    Pattern(String),
}

/// What to do with a pair whose external score could not be produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Abort the evaluation.
    #[default]
    Fail,
    /// Score the pair as 0 and record the failure.
    Zero,
    /// Score the pair as `f64::MIN` (ranked last) and record it.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub executable: PathBuf,
    /// Arguments; `{probe}` and `{gallery}` are substituted per pair.
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_pattern")]
    pub parse_regex: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub on_failure: FailurePolicy,
}

fn default_pattern() -> String {
    r"(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)".to_string()
}

fn default_timeout() -> f64 {
    60.0
}

impl AdapterConfig {
    pub fn new(executable: impl Into<PathBuf>, args: &[&str]) -> Self {
        Self {
            executable: executable.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            parse_regex: default_pattern(),
            timeout_secs: default_timeout(),
            on_failure: FailurePolicy::Fail,
        }
    }
}

fn resolve_executable(exe: &Path) -> Option<PathBuf> {
    if exe.components().count() > 1 {
        return exe.is_file().then(|| exe.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(exe))
            .find(|candidate| candidate.is_file())
    })
}

/// Runs the command and returns its stdout.
pub fn run_command(cfg: &AdapterConfig, args: &[String]) -> Result<String, MatcherError> {
    let exe = resolve_executable(&cfg.executable)
        .ok_or_else(|| MatcherError::MissingExecutable(cfg.executable.clone()))?;
    let mut child = Command::new(&exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| MatcherError::Launch {
            path: exe.clone(),
            source,
        })?;

    // Drain pipes on helper threads so a chatty child cannot block.
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_thread = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_thread = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });

    let timeout = Duration::from_secs_f64(cfg.timeout_secs.max(0.0));
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(MatcherError::Timeout(timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(source) => return Err(MatcherError::Launch { path: exe, source }),
        }
    };
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();
    if !status.success() {
        return Err(MatcherError::MatcherFailure {
            code: status.code(),
            stderr,
        });
    }
    Ok(stdout)
}

pub fn parse_score(pattern: &str, stdout: &str) -> Result<f64, MatcherError> {
    let re = Regex::new(pattern).map_err(|e| MatcherError::Pattern(e.to_string()))?;
    let caps = re.captures(stdout).ok_or_else(|| MatcherError::Unparseable {
        stdout: stdout.to_string(),
    })?;
    let text = caps.get(1).or_else(|| caps.get(0)).unwrap().as_str();
    text.trim().parse::<f64>().map_err(|_| MatcherError::Unparseable {
        stdout: stdout.to_string(),
    })
}

fn substitute(template: &[String], probe: &Path, gallery: Option<&Path>) -> Vec<String> {
    template
        .iter()
        .map(|a| {
            let a = a.replace("{probe}", &probe.to_string_lossy());
            match gallery {
                Some(g) => a.replace("{gallery}", &g.to_string_lossy()),
                None => a,
            }
        })
        .collect()
}

/// Similarity from an external matcher for one probe/gallery file pair.
pub fn match_external(probe: &Path, gallery: &Path, cfg: &AdapterConfig) -> Result<f64, MatcherError> {
    let stdout = run_command(cfg, &substitute(&cfg.args, probe, Some(gallery)))?;
    parse_score(&cfg.parse_regex, &stdout)
}

/// Quality value (expected 1..=5) from an external tool such as NFIQ.
pub fn quality_external(image: &Path, cfg: &AdapterConfig) -> Result<u8, MatcherError> {
    let stdout = run_command(cfg, &substitute(&cfg.args, image, None))?;
    let v = parse_score(&cfg.parse_regex, &stdout)?;
    if !(1.0..=5.0).contains(&v) || v.fract() != 0.0 {
        return Err(MatcherError::Unparseable { stdout });
    }
    Ok(v as u8)
}
