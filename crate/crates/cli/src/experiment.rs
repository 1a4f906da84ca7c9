//! Declarative experiment specs: named runs of the other subcommands.
//!
//! Argument values of the form `@run` or `@run/file` name the output
//! directory (or a file in it) of an earlier run. Other relative paths are
//! resolved against the spec file's directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flora::eval::Metrics;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cli::ExperimentArgs;
use crate::config::parse_toml;
use crate::error::{CliError, Result};
use crate::manifest::{FileRecord, OutDir, RunManifest};

/// Arguments that name files or directories.
const PATH_KEYS: [&str; 5] = ["data", "backbone", "model", "config", "spec"];

/// Subcommands an experiment may run.
const COMMANDS: [&str; 6] = ["gen-data", "pretrain", "train", "eval", "params-report", "scale-sweep"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FusionBenefit,
    MissingModality,
    Scaling,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentKind,
    #[serde(default)]
    pub description: String,
    pub run: Vec<RunSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub args: toml::Table,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec = parse_toml(path)?;
        spec.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(spec)
    }

    /// Unique run names, known commands, and every referenced artifact
    /// either on disk or produced by an earlier run.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.run.is_empty() {
            return Err(CliError::usage("experiment has no runs"));
        }
        for (i, run) in self.run.iter().enumerate() {
            if run.name.is_empty() || run.name.contains(['/', '\\']) || run.name.starts_with('.') {
                return Err(CliError::usage(format!("invalid run name {:?}", run.name)));
            }
            if self.run[..i].iter().any(|r| r.name == run.name) {
                return Err(CliError::usage(format!("duplicate run name {:?}", run.name)));
            }
            if !COMMANDS.contains(&run.command.as_str()) {
                return Err(CliError::usage(format!("run {:?}: unknown command {:?}", run.name, run.command)));
            }
            for key in ["out", "force"] {
                if run.args.contains_key(key) {
                    return Err(CliError::usage(format!("run {:?}: --{key} is set by the experiment", run.name)));
                }
            }
            for (key, value) in &run.args {
                let Some(s) = value.as_str() else { continue };
                if let Some(reference) = s.strip_prefix('@') {
                    let target = reference.split('/').next().unwrap_or_default();
                    if !self.run[..i].iter().any(|r| r.name == target) {
                        return Err(CliError::usage(format!(
                            "run {:?}: {key} refers to {target:?}, which is not an earlier run",
                            run.name
                        )));
                    }
                } else if PATH_KEYS.contains(&key.as_str()) && !base.join(s).exists() {
                    return Err(CliError::usage(format!("run {:?}: {key} {s:?} does not exist", run.name)));
                }
            }
        }
        Ok(())
    }
}

fn flag_value(value: &toml::Value) -> Result<Option<String>> {
    Ok(Some(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(true) => return Ok(None),
        other => return Err(CliError::usage(format!("unsupported argument value {other}"))),
    }))
}

/// Command line for one run.
pub fn run_argv(run: &RunSpec, base: &Path, out: &Path, force: bool) -> Result<Vec<OsString>> {
    let mut argv: Vec<OsString> = vec!["flora".into(), run.command.clone().into()];
    for (key, value) in &run.args {
        if value.as_bool() == Some(false) {
            continue;
        }
        argv.push(format!("--{}", key.replace('_', "-")).into());
        let Some(v) = flag_value(value)? else { continue };
        let resolved: PathBuf = match v.strip_prefix('@') {
            Some(reference) => out.join(reference),
            None if PATH_KEYS.contains(&key.as_str()) => base.join(&v),
            None => {
                argv.push(v.into());
                continue;
            }
        };
        argv.push(resolved.into_os_string());
    }
    argv.push("--out".into());
    argv.push(out.join(&run.name).into_os_string());
    if force {
        argv.push("--force".into());
    }
    Ok(argv)
}

/// Runs every step and writes `summary.csv` with the metrics of each eval.
pub fn run_experiment(args: ExperimentArgs) -> Result<RunManifest> {
    let spec = ExperimentSpec::load(&args.spec)?;
    let base = args.spec.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    let root = out.path().to_path_buf();
    let mut summary = String::from("run,mode,modalities,eer,fa_at_10,n\n");
    for run in &spec.run {
        println!("== {}: {}", run.name, run.command);
        let argv = run_argv(run, &base, &root, args.out.force)?;
        crate::run_from(argv)?;
        if run.command == "eval" {
            let path = root.join(&run.name).join("metrics.json");
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let m: Metrics = serde_json::from_str(&text).map_err(|e| CliError::data(e.to_string()))?;
            writeln!(summary, "{},{},{},{:.8},{:.8},{}", run.name, m.mode, m.present_modalities, m.eer, m.fa_at_10, m.n)
                .expect("write to string");
        }
    }
    print!("{summary}");
    out.write("summary.csv", summary.as_bytes())?;
    let inputs = vec![FileRecord::of(&args.spec)?];
    out.finish("experiment", 0, None, json!(spec), inputs)
}
