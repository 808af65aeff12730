//! `ioulmm` command-line interface.
//!
//! Exit codes: 0 success, 1 error (bad input, I/O, usage), 2 a fit that
//! returned without converging.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::covariance::{GParam, KernelKind, KernelSpec};
use crate::data::{read_csv, write_csv, SchemaConfig};
use crate::diagnostics::{
    information_limit_check, lan_directions, lan_expansion_check, score_clt_check, studentized_inputs,
    studentized_normality, third_derivative_bound_check, LanConfig,
};
use crate::error::{Error, Result};
use crate::estimation::{fit, profile_surface, FitConfig};
use crate::likelihood::ParamVector;
use crate::simulation::{generate_design, run_mc_study, simulate_responses, DesignConfig, DrawMode, McConfig};

#[derive(Debug, Parser)]
#[command(name = "ioulmm", version, about = "Mixed-effects models with integrated Ornstein-Uhlenbeck noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
struct Common {
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the noise seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value = "iou")]
    kernel: KernelArg,
    #[arg(long = "g-param", value_enum, default_value = "paper-bivariate")]
    g_param: GParamArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KernelArg {
    Iou,
    Fbm,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum GParamArg {
    PaperBivariate,
    CholeskyFactor,
}

impl Common {
    fn spec(&self) -> KernelSpec {
        KernelSpec::new(
            match self.kernel {
                KernelArg::Iou => KernelKind::Iou,
                KernelArg::Fbm => KernelKind::Fbm,
            },
            match self.g_param {
                GParamArg::PaperBivariate => GParam::PaperBivariate,
                GParamArg::CholeskyFactor => GParam::CholeskyFactor,
            },
        )
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a dataset by maximum likelihood.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Optimizer settings; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a dataset from a design and a parameter vector.
    Simulate {
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        /// Overrides the design seed.
        #[arg(long)]
        design_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        replication: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run a Monte Carlo bias study.
    Mcstudy {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the log-likelihood over an (alpha, tau) grid.
    Surface {
        /// Fixed values of every coordinate, and the simulation truth.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long, requires = "schema", conflicts_with = "design")]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Simulate the data from this design at `theta` instead.
        #[arg(long)]
        design: Option<PathBuf>,
        /// `min:max:count` for the kernel-rate axis.
        #[arg(long, default_value = "0.3:2.3:41")]
        alpha: String,
        /// `min:max:count` for the tau axis.
        #[arg(long, default_value = "0.1:0.7:41")]
        tau: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run asymptotic diagnostics.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lan: bool,
        #[arg(long)]
        clt: bool,
        #[arg(long)]
        information: bool,
        #[arg(long)]
        normality: bool,
        #[arg(long)]
        third: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Settings and provenance written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: Value,
    pub seeds: Value,
    /// SHA-256 of each input file.
    pub inputs: Vec<(String, String)>,
    pub threads: usize,
    pub results: Value,
    pub wall_time_ms: f64,
}

fn digest(path: &Path) -> Result<(String, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((path.display().to_string(), hex::encode(Sha256::digest(&bytes))))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(p, e))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    write_text(dir, name, &(text + "\n"))
}

fn create(dir: &Path, name: &str) -> Result<std::fs::File> {
    let p = dir.join(name);
    std::fs::File::create(&p).map_err(|e| Error::io(p, e))
}

/// Parses `min:max:count` into an evenly spaced grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::InvalidArgument(format!("grid `{text}` is not min:max:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 {
        return Err(Error::InvalidArgument(format!("grid `{text}` is empty")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..count)
        .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
        .collect())
}

/// Monte Carlo job file: the design and the study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McJob {
    pub design: DesignConfig,
    pub study: McConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltJob {
    pub replications: usize,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalityJob {
    /// `raw.csv` written by `mcstudy`; relative paths resolve against the
    /// diagnostics file.
    pub raw_csv: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThirdJob {
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
}

/// Diagnostics job file. Sections left out are not run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseJob {
    pub true_theta: ParamVector,
    pub design: DesignConfig,
    #[serde(default)]
    pub lan: Option<LanConfig>,
    #[serde(default)]
    pub clt: Option<CltJob>,
    #[serde(default)]
    pub information: Option<Vec<usize>>,
    #[serde(default)]
    pub normality: Option<NormalityJob>,
    #[serde(default)]
    pub third: Option<ThirdJob>,
}

struct Outcome {
    code: i32,
    manifest: RunManifest,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(o) => o.code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn common_of(cmd: &Command) -> &Common {
    match cmd {
        Command::Fit { common, .. }
        | Command::Simulate { common, .. }
        | Command::Mcstudy { common, .. }
        | Command::Surface { common, .. }
        | Command::Diagnose { common, .. } => common,
    }
}

fn execute(cli: Cli) -> Result<Outcome> {
    let started = Instant::now();
    let common = common_of(&cli.command).clone();
    let threads = common.threads.unwrap_or_else(rayon::current_num_threads);
    if threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut outcome = pool.install(|| dispatch(cli.command, &common))?;
    outcome.manifest.threads = threads;
    outcome.manifest.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    write_json(&common.out, "manifest.json", &outcome.manifest)?;
    Ok(outcome)
}

fn manifest(subcommand: &str, common: &Common, config: Value, seeds: Value, inputs: Vec<(String, String)>) -> RunManifest {
    RunManifest {
        subcommand: subcommand.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: json!({ "common": common, "spec": common.spec(), "job": config }),
        seeds,
        inputs,
        threads: 0,
        results: Value::Null,
        wall_time_ms: 0.0,
    }
}

fn dispatch(command: Command, common: &Common) -> Result<Outcome> {
    let spec = common.spec();
    let out = common.out.as_path();
    match command {
        Command::Fit {
            data,
            schema,
            config,
            ..
        } => {
            let schema_cfg = SchemaConfig::from_json_file(&schema)?;
            let load = read_csv(&data, &schema_cfg)?;
            let fit_cfg: FitConfig = match &config {
                Some(p) => read_json(p)?,
                None => FitConfig::default(),
            };
            let mut inputs = vec![digest(&data)?, digest(&schema)?];
            if let Some(p) = &config {
                inputs.push(digest(p)?);
            }
            let result = fit(&load.dataset, &spec, &fit_cfg)?;
            write_json(out, "fit_result.json", &result.to_json(&spec))?;
            let mut m = manifest(
                "fit",
                common,
                json!({ "schema": schema_cfg, "fit": fit_cfg }),
                Value::Null,
                inputs,
            );
            m.results = json!({
                "converged": result.converged,
                "reason": result.reason,
                "dropped_rows": load.dropped_rows,
            });
            if !result.converged {
                eprintln!("fit did not converge: {}", result.reason);
            }
            Ok(Outcome {
                code: if result.converged { 0 } else { 2 },
                manifest: m,
            })
        }
        Command::Simulate {
            design,
            theta,
            design_seed,
            replication,
            ..
        } => {
            let mut design_cfg: DesignConfig = read_json(&design)?;
            if let Some(s) = design_seed {
                design_cfg.design_seed = s;
            }
            let theta_v: ParamVector = read_json(&theta)?;
            let noise_seed = common.seed.unwrap_or(0);
            let skeleton = generate_design(&design_cfg)?;
            let ds = simulate_responses(&skeleton, &theta_v, &spec, noise_seed, replication, DrawMode::Joint)?;
            write_csv(&ds, &out.join("data.csv"))?;
            write_json(out, "schema.json", &SchemaConfig::for_dataset(&ds))?;
            let mut m = manifest(
                "simulate",
                common,
                json!({ "design": design_cfg, "theta": theta_v, "replication": replication }),
                json!({ "design_seed": design_cfg.design_seed, "noise_seed": noise_seed }),
                vec![digest(&design)?, digest(&theta)?],
            );
            m.results = json!({ "rows": ds.total_observations() });
            Ok(Outcome { code: 0, manifest: m })
        }
        Command::Mcstudy { config, .. } => {
            let mut job: McJob = read_json(&config)?;
            if let Some(s) = common.seed {
                job.study.noise_seed = s;
            }
            let report = run_mc_study(&job.study, &job.design, &spec)?;
            report.write_files(out)?;
            let mut m = manifest(
                "mcstudy",
                common,
                serde_json::to_value(&job).expect("serializable job"),
                json!({ "design_seed": job.design.design_seed, "noise_seed": job.study.noise_seed }),
                vec![digest(&config)?],
            );
            m.results = json!({ "failures": report.failures });
            Ok(Outcome { code: 0, manifest: m })
        }
        Command::Surface {
            theta,
            data,
            schema,
            design,
            alpha,
            tau,
            ..
        } => {
            let grid_alpha = parse_grid(&alpha)?;
            let grid_tau = parse_grid(&tau)?;
            let theta_v: ParamVector = read_json(&theta)?;
            let mut inputs = vec![digest(&theta)?];
            let noise_seed = common.seed.unwrap_or(0);
            let dataset = match (&data, &schema, &design) {
                (Some(d), Some(s), _) => {
                    inputs.push(digest(d)?);
                    inputs.push(digest(s)?);
                    read_csv(d, &SchemaConfig::from_json_file(s)?)?.dataset
                }
                (None, _, Some(dz)) => {
                    inputs.push(digest(dz)?);
                    let cfg: DesignConfig = read_json(dz)?;
                    let sk = generate_design(&cfg)?;
                    simulate_responses(&sk, &theta_v, &spec, noise_seed, 0, DrawMode::Joint)?
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "surface needs --data with --schema, or --design".into(),
                    ))
                }
            };
            let surface = profile_surface(&dataset, &spec, &theta_v, &grid_alpha, &grid_tau)?;
            let mut w = csv::Writer::from_writer(create(out, "surface.csv")?);
            let csv_err = |e: csv::Error| Error::InvalidArgument(format!("writing surface.csv: {e}"));
            w.write_record([spec.rate_name(), "tau", "loglik"]).map_err(csv_err)?;
            for (i, a) in surface.alpha.iter().enumerate() {
                for (j, t) in surface.tau.iter().enumerate() {
                    let v = surface.values[i][j].map(|v| v.to_string()).unwrap_or_default();
                    w.write_record([a.to_string(), t.to_string(), v]).map_err(csv_err)?;
                }
            }
            w.flush().map_err(|e| Error::io(out.join("surface.csv"), e))?;
            let mut m = manifest(
                "surface",
                common,
                json!({ "theta": theta_v, "alpha": grid_alpha, "tau": grid_tau }),
                json!({ "noise_seed": noise_seed }),
                inputs,
            );
            m.results = json!({
                "cells": grid_alpha.len() * grid_tau.len(),
                "feasible_cells": surface.feasible_cells(),
                "max_loglik": surface.max(),
            });
            Ok(Outcome { code: 0, manifest: m })
        }
        Command::Diagnose {
            config,
            lan,
            clt,
            information,
            normality,
            third,
            ..
        } => {
            let mut job: DiagnoseJob = read_json(&config)?;
            let all = !(lan || clt || information || normality || third);
            let mut ran = Vec::new();
            if let (true, Some(cfg)) = (all || lan, job.lan.as_mut()) {
                if let Some(s) = common.seed {
                    cfg.noise_seed = s;
                }
                let dirs = lan_directions(
                    job.true_theta.len(),
                    cfg.n_random_directions,
                    cfg.direction_seed,
                    cfg.include_zero,
                );
                let report = lan_expansion_check(&job.true_theta, &spec, &job.design, cfg, &dirs)?;
                write_json(out, "lan.json", &report)?;
                ran.push("lan");
            }
            if let (true, Some(cfg)) = (all || clt, job.clt.as_mut()) {
                if let Some(s) = common.seed {
                    cfg.noise_seed = s;
                }
                let report = score_clt_check(&job.true_theta, &spec, &job.design, cfg.replications, cfg.noise_seed)?;
                write_json(out, "clt.json", &report)?;
                ran.push("clt");
            }
            if let (true, Some(ns)) = (all || information, job.information.as_ref()) {
                let rows = information_limit_check(&spec, &job.design, &job.true_theta, ns)?;
                write_json(out, "information.json", &rows)?;
                ran.push("information");
            }
            let mut inputs = vec![digest(&config)?];
            if let (true, Some(cfg)) = (all || normality, job.normality.as_ref()) {
                let raw = if cfg.raw_csv.is_relative() {
                    config.parent().unwrap_or(Path::new(".")).join(&cfg.raw_csv)
                } else {
                    cfg.raw_csv.clone()
                };
                inputs.push(digest(&raw)?);
                let estimates = read_raw_estimates(&raw, &job.true_theta)?;
                let design = generate_design(&job.design)?;
                let inputs_st = studentized_inputs(&design, &spec, &estimates)?;
                let names = job.true_theta.names(&spec);
                let report = studentized_normality(&inputs_st, &job.true_theta, design.n_subjects(), &names)?;
                write_json(out, "normality.json", &report)?;
                report.write_values(create(out, "normality.csv")?)?;
                if report.low_power {
                    eprintln!("normality: fewer than 50 replications, low power");
                }
                ran.push("normality");
            }
            if let (true, Some(cfg)) = (all || third, job.third.as_ref()) {
                let sk = generate_design(&job.design)?;
                let data = simulate_responses(&sk, &job.true_theta, &spec, cfg.noise_seed, 0, DrawMode::Joint)?;
                let report = third_derivative_bound_check(&data, &job.true_theta, &spec, cfg.radius, cfg.seed)?;
                write_json(out, "third.json", &report)?;
                ran.push("third");
            }
            let mut m = manifest(
                "diagnose",
                common,
                serde_json::to_value(&job).expect("serializable job"),
                Value::Null,
                inputs,
            );
            m.results = json!({ "ran": ran });
            Ok(Outcome { code: 0, manifest: m })
        }
    }
}

/// Included rows of a `raw.csv` (converged rows when the file has no
/// `included` column) as parameter vectors shaped like `like`.
pub fn read_raw_estimates(path: &Path, like: &ParamVector) -> Result<Vec<ParamVector>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let keep = col("included")
        .or_else(|| col("converged"))
        .ok_or_else(|| Error::parse(path, "missing column `included` or `converged`"))?;
    let first = col("loglik").ok_or_else(|| Error::parse(path, "missing column `loglik`"))? + 1;
    let p = like.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        if rec.get(keep) != Some("true") {
            continue;
        }
        let values = (first..first + p)
            .map(|k| {
                rec.get(k)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::parse(path, format!("bad estimate in column {}", k + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(like.with_values(&values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.3:2.3:41").unwrap();
        assert_eq!(g.len(), 41);
        assert!((g[20] - 1.3).abs() < 1e-12);
        assert_eq!(parse_grid("1.3:1.3:1").unwrap(), vec![1.3]);
        assert!(parse_grid("1:2:0").is_err());
        assert!(parse_grid("1:2").is_err());
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["ioulmm", "fit", "--bogus"]), 1);
        assert_eq!(run(["ioulmm", "--help"]), 0);
    }
}
