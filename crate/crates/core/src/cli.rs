//! Batch front-end: one JSON config, one subcommand, CSV files out.
//!
//! ```json
//! {
//!   "model": { "name": "linear", "a": 0.5, "s": 0.2, "c0": 0.1, "lambda": 1.0 },
//!   "scheme": "tamed_milstein",
//!   "seed": 7,
//!   "T": 1.0,
//!   "xi": [1.0],
//!   "converge": { "n_list": [16, 32, 64], "reference": "exact", "M": 2000,
//!                 "rate_window": [0.85, 1.15] }
//! }
//! ```
//!
//! Exit status is 0 when every threshold holds, 2 when a threshold fails
//! and 1 on any configuration or I/O error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{
    fit_rate, moment_study, one_step_study, strong_error_study, RateWindow, Reference, StudySettings,
};
use crate::model::{sample_pairs, validate_assumptions, BuiltinModel, BuiltinSpec, SdeModel};
use crate::noise::{derive_stream, purpose};
use crate::stepper::{simulate_path, SchemeKind};
use crate::taming::TamedCoefficientSet;
use crate::Vector;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_THRESHOLD: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tamed-milstein",
    version,
    about = "Tamed Milstein-type jump-diffusion experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Dump one trajectory.
    Simulate,
    /// Strong-error study and rate fit.
    Converge,
    /// Moment-uniformity sweep.
    Moments,
    /// One-step deviation sweep.
    OneStep,
    /// Check the tamed coefficient bounds on sampled points.
    TamingCheck,
    /// Spot-check the model's growth and Lipschitz conditions.
    Validate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: BuiltinSpec,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon", rename = "T", alias = "horizon")]
    pub horizon: f64,
    #[serde(default = "default_xi")]
    pub xi: Vec<f64>,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converge: Option<ConvergeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_step: Option<OneStepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taming_check: Option<TamingCheckSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateSection>,
}

fn default_scheme() -> SchemeKind {
    SchemeKind::TamedMilstein
}

fn default_horizon() -> f64 {
    1.0
}

fn default_xi() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: u64,
    #[serde(default)]
    pub path_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    Exact,
    Fine(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub n_list: Vec<u64>,
    pub reference: ReferenceSpec,
    #[serde(rename = "M", alias = "paths")]
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_window: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentSection {
    pub n_list: Vec<u64>,
    #[serde(rename = "M", alias = "paths")]
    pub paths: usize,
    /// Defaults to the model's `p0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default = "default_moment_ratio")]
    pub max_ratio: f64,
}

fn default_moment_ratio() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneStepSection {
    pub n_list: Vec<u64>,
    #[serde(rename = "M", alias = "paths")]
    pub paths: usize,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_window: Option<[f64; 2]>,
}

fn default_p() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamingCheckSection {
    #[serde(default = "default_taming_n")]
    pub n_list: Vec<u64>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_marks")]
    pub marks: usize,
}

impl Default for TamingCheckSection {
    fn default() -> Self {
        TamingCheckSection {
            n_list: default_taming_n(),
            points: default_points(),
            radius: default_radius(),
            marks: default_marks(),
        }
    }
}

fn default_taming_n() -> Vec<u64> {
    vec![1, 16, 1024]
}

fn default_points() -> usize {
    10_000
}

fn default_radius() -> f64 {
    10.0
}

fn default_marks() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default = "default_mark_samples")]
    pub mark_samples: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection {
            pairs: default_pairs(),
            lo: default_lo(),
            hi: default_hi(),
            mark_samples: default_mark_samples(),
        }
    }
}

fn default_pairs() -> usize {
    200
}

fn default_lo() -> f64 {
    -3.0
}

fn default_hi() -> f64 {
    3.0
}

fn default_mark_samples() -> usize {
    10_000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("T", format!("need T > 0, got {}", self.horizon)));
        }
        if self.xi.is_empty() || self.xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("xi", "need a finite initial state"));
        }
        let sorted = |field: &str, ns: &[u64]| -> Result<()> {
            if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(field, "need positive, strictly increasing resolutions"));
            }
            Ok(())
        };
        let enough = |paths: usize| -> Result<()> {
            if paths < 100 {
                return Err(Error::config("M", format!("need at least 100 paths, got {paths}")));
            }
            Ok(())
        };
        if let Some(c) = &self.converge {
            sorted("n_list", &c.n_list)?;
            enough(c.paths)?;
            if let ReferenceSpec::Fine(n_ref) = c.reference {
                if let Some(bad) = c.n_list.iter().find(|&&n| n_ref % n != 0) {
                    return Err(Error::config("n_ref", format!("n = {bad} does not divide {n_ref}")));
                }
            }
        }
        if let Some(m) = &self.moments {
            sorted("n_list", &m.n_list)?;
            enough(m.paths)?;
        }
        if let Some(o) = &self.one_step {
            sorted("n_list", &o.n_list)?;
            enough(o.paths)?;
        }
        if let Some(t) = &self.taming_check {
            sorted("n_list", &t.n_list)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; the output directory is excluded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn xi_vector(&self, model: &BuiltinModel) -> Result<Vector> {
        if self.xi.len() != model.dim() {
            return Err(Error::config(
                "xi",
                format!("model has dimension {}, xi has {}", model.dim(), self.xi.len()),
            ));
        }
        Ok(Vector::from_column_slice(&self.xi))
    }
}

/// Result of one subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::config(name, "section missing from config"))
}

fn window(w: Option<[f64; 2]>) -> Option<RateWindow> {
    w.map(|[lo, hi]| RateWindow { lo, hi })
}

struct Writer<'a> {
    dir: &'a Path,
    comment: String,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write, &str) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = BufWriter::new(File::create(&path)?);
        body(&mut f, &self.comment)?;
        f.flush()?;
        self.files.push(path);
        Ok(())
    }
}

/// Run `command` on an already-loaded config.
pub fn execute(command: Command, cfg: &ExperimentConfig, workers: Option<usize>, out_dir: &Path) -> Result<Outcome> {
    let model = cfg.model.build()?;
    let xi = cfg.xi_vector(&model)?;
    fs::create_dir_all(out_dir)?;
    let mut w = Writer {
        dir: out_dir,
        comment: format!("config_hash={} seed={}", cfg.hash(), cfg.seed),
        files: Vec::new(),
    };
    let settings = |paths: usize| {
        let mut s = StudySettings::new(paths, cfg.horizon, xi.clone(), cfg.seed).with_label(format!("{:?}", cfg.model));
        s.workers = workers;
        s
    };
    let mut summary = format!(
        "command: {command:?}\nmodel: {:?}\nscheme: {}\nseed: {}\nconfig_hash: {}\n",
        cfg.model,
        cfg.scheme,
        cfg.seed,
        cfg.hash()
    );

    let pass = match command {
        Command::Simulate => {
            let sec = section(&cfg.simulate, "simulate")?;
            let traj = simulate_path(
                &model,
                cfg.scheme,
                sec.n,
                cfg.horizon,
                &xi.clone().into(),
                cfg.seed,
                sec.path_id,
            )?;
            w.write("trajectory.csv", |f, c| {
                writeln!(f, "# {c}")?;
                traj.write_csv(f)
            })?;
            summary += &format!(
                "n: {}\nterminal: {:?}\nblowup: {}\n",
                sec.n,
                traj.terminal().as_slice(),
                traj.blowup_flag()
            );
            true
        }
        Command::Converge => {
            let sec = section(&cfg.converge, "converge")?;
            let reference = match sec.reference {
                ReferenceSpec::Exact => Reference::Exact,
                ReferenceSpec::Fine(n_ref) => Reference::Fine { n_ref },
            };
            let table = strong_error_study(&model, cfg.scheme, &sec.n_list, reference, &settings(sec.paths))?;
            w.write("error_table.csv", |f, c| table.write_csv(f, Some(c)))?;
            let report = fit_rate(&table, window(sec.rate_window))?;
            w.write("rate_report.csv", |f, c| report.write_csv(f, Some(c)))?;
            summary += &format!(
                "reference: {reference}\npaths: {}\n{:>6} {:>14} {:>14} {:>10}\n",
                sec.paths, "n", "mse_max", "stderr", "censored"
            );
            for r in &table.rows {
                summary += &format!(
                    "{:>6} {:>14.6e} {:>14.6e} {:>10.4}\n",
                    r.n, r.mse_max, r.stderr_max, r.censored_fraction
                );
            }
            summary += &format!(
                "rate: {:.4} (95% CI [{:.4}, {:.4}])\n",
                report.slope, report.ci_lo, report.ci_hi
            );
            if let Some(win) = report.window {
                summary += &format!("window: [{}, {}] -> {}\n", win.lo, win.hi, verdict(report.pass));
            }
            report.pass
        }
        Command::Moments => {
            let sec = section(&cfg.moments, "moments")?;
            let p0 = sec.p0.unwrap_or(model.params().p0);
            let rep = moment_study(&model, cfg.scheme, &sec.n_list, p0, &settings(sec.paths))?;
            w.write("moments.csv", |f, c| rep.write_csv(f, Some(c)))?;
            let ratio = rep.spread_ratio();
            let censored = rep.max_censored_fraction();
            summary += &format!("p0: {p0}\n");
            for r in &rep.rows {
                summary += &format!(
                    "n={:<6} moment_max={:.6e} stderr={:.3e} censored={:.4}\n",
                    r.n, r.moment_max, r.stderr, r.censored_fraction
                );
            }
            let pass = ratio < sec.max_ratio && censored == 0.0;
            summary += &format!(
                "spread ratio: {ratio:.4} (limit {}), max censored: {censored} -> {}\n",
                sec.max_ratio,
                verdict(pass)
            );
            pass
        }
        Command::OneStep => {
            let sec = section(&cfg.one_step, "one_step")?;
            let table = one_step_study(&model, cfg.scheme, &sec.n_list, sec.p, &settings(sec.paths))?;
            w.write("one_step.csv", |f, c| table.write_csv(f, Some(c)))?;
            let slope = table.slope()?;
            let pass = window(sec.slope_window).is_none_or(|win| win.contains(slope));
            summary += &format!("p: {}\nslope: {slope:.4} -> {}\n", sec.p, verdict(pass));
            pass
        }
        Command::TamingCheck => {
            let sec = cfg.taming_check.clone().unwrap_or_default();
            let xs: Vec<Vector> = sample_pairs(model.dim(), sec.points, -sec.radius, sec.radius, cfg.seed)
                .into_iter()
                .map(|(x, _)| x)
                .collect();
            let mut stream = derive_stream(cfg.seed, 1, purpose::TEST_POINTS);
            let marks: Vec<f64> = (0..sec.marks).map(|_| model.marks().sample(&mut stream)).collect();
            let mut pass = true;
            for &n in &sec.n_list {
                let report = TamedCoefficientSet::new(&model, n)?.check_growth_bounds(&xs, &marks)?;
                for fam in &report.families {
                    summary += &format!(
                        "n={n:<6} {:<10} plain={:.6} resolution={:.6} {}\n",
                        fam.family,
                        fam.max_plain_ratio,
                        fam.max_resolution_ratio,
                        verdict(fam.holds())
                    );
                }
                pass &= report.all_hold();
            }
            pass
        }
        Command::Validate => {
            let sec = cfg.validate.clone().unwrap_or_default();
            let pairs = sample_pairs(model.dim(), sec.pairs, sec.lo, sec.hi, cfg.seed);
            let report = validate_assumptions(&model, &pairs, sec.mark_samples, cfg.seed)?;
            for c in &report.checks {
                summary += &format!(
                    "{:<26} max ratio {:.6} {}\n",
                    c.name,
                    c.max_ratio,
                    verdict(!c.violated())
                );
            }
            report.passed()
        }
    };
    summary += &format!("result: {}\n", verdict(pass));
    w.write("summary.txt", |f, _| f.write_all(summary.as_bytes()))?;
    Ok(Outcome {
        pass,
        summary,
        files: w.files,
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Parse the config, apply flag overrides and run. Errors map to exit 1.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("config", "pass --config PATH"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    execute(cli.command, &cfg, cli.workers, &out)
}

/// Exit status for a finished run.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.pass => EXIT_PASS,
        Ok(_) => EXIT_THRESHOLD,
        Err(_) => EXIT_CONFIG,
    }
}
