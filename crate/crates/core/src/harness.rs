//! Coupled-path Monte Carlo studies.
//!
//! Every path draws its noise once at the finest resolution the study
//! needs; coarser resolutions see exactly the same Brownian path and jumps
//! through [`coarsen`](crate::noise::coarsen). Differences between
//! resolutions therefore measure discretisation error, not sampling noise.
//!
//! Paths are processed in fixed-size blocks. Within a block they run in
//! parallel on a pool of `workers` threads; results are then reduced in
//! path order, so every table is a pure function of the settings and the
//! seed, whatever the worker count.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::noise::{grid_time, PathNoise, StepNoise};
use crate::stepper::{ensure_commutative, fmt_float, simulate_on_noise, step, InitialState, SchemeKind, Trajectory};
use crate::Vector;

const BLOCK: usize = 512;

/// Settings shared by every study.
#[derive(Clone, Debug)]
pub struct StudySettings {
    /// Monte Carlo sample size `M`.
    pub paths: usize,
    pub horizon: f64,
    pub xi: InitialState,
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
    /// Free-form model description carried into table metadata.
    pub label: String,
}

impl StudySettings {
    pub fn new(paths: usize, horizon: f64, xi: Vector, seed: u64) -> Self {
        StudySettings {
            paths,
            horizon,
            xi: InitialState::Fixed(xi),
            seed,
            workers: None,
            label: String::from("model"),
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return Err(Error::config("paths", "need at least 2 paths"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon", format!("need T > 0, got {}", self.horizon)));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "need at least one worker"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// The model's closed-form solution on the same noise.
    Exact,
    /// The same scheme at resolution `n_ref` on the same noise.
    Fine { n_ref: u64 },
}

impl std::fmt::Display for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Exact => f.write_str("exact"),
            Reference::Fine { n_ref } => write!(f, "fine(n_ref={n_ref})"),
        }
    }
}

/// Running mean and variance, updated in a fixed order.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    /// Standard error of the mean.
    fn stderr(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        (self.m2 / (self.count - 1) as f64 / self.count as f64).sqrt()
    }
}

/// Per-grid-time accumulators for one resolution.
#[derive(Clone, Debug)]
struct GridStats {
    slots: Vec<Welford>,
    censored: usize,
}

impl GridStats {
    fn new(points: usize) -> Self {
        GridStats {
            slots: vec![Welford::default(); points],
            censored: 0,
        }
    }

    fn push(&mut self, values: Option<&[f64]>) {
        match values {
            Some(vs) => {
                for (slot, v) in self.slots.iter_mut().zip(vs) {
                    slot.push(*v);
                }
            }
            None => self.censored += 1,
        }
    }

    /// `(argmax mean, max mean, its standard error)`.
    fn max(&self) -> (usize, f64, f64) {
        let mut best = (0, f64::NEG_INFINITY, f64::NAN);
        for (i, s) in self.slots.iter().enumerate() {
            if s.count > 0 && s.mean > best.1 {
                best = (i, s.mean, s.stderr());
            }
        }
        if best.1 == f64::NEG_INFINITY {
            best = (0, f64::NAN, f64::NAN);
        }
        best
    }
}

fn run_paths<T, F>(settings: &StudySettings, per_path: F, mut reduce: impl FnMut(T)) -> Result<()>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    let pool = match settings.workers {
        Some(w) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::config("workers", e.to_string()))?,
        ),
        None => None,
    };
    let mut start = 0;
    while start < settings.paths {
        let end = (start + BLOCK).min(settings.paths);
        let compute = || -> Vec<T> { (start..end).into_par_iter().map(|p| per_path(p as u64)).collect() };
        let block = match &pool {
            Some(p) => p.install(compute),
            None => compute(),
        };
        block.into_iter().for_each(&mut reduce);
        start = end;
    }
    Ok(())
}

fn validate_n_list(n_list: &[u64]) -> Result<()> {
    if n_list.len() < 3 {
        return Err(Error::config("n_list", "need at least 3 resolutions"));
    }
    if n_list[0] == 0 {
        return Err(Error::config("n_list", "resolutions must be positive"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("n_list", "must be strictly increasing"));
    }
    Ok(())
}

/// The path's noise at every requested resolution, each level obtained by
/// coarsening the nearest finer level it divides.
fn noise_levels<Mk: Copy>(fine: PathNoise<Mk>, levels: &[u64]) -> BTreeMap<u64, Vec<StepNoise<Mk>>> {
    let mut out: BTreeMap<u64, Vec<StepNoise<Mk>>> = BTreeMap::new();
    out.insert(fine.resolution(), fine.steps);
    let mut wanted: Vec<u64> = levels.to_vec();
    wanted.sort_unstable_by(|a, b| b.cmp(a));
    wanted.dedup();
    for n in wanted {
        if out.contains_key(&n) {
            continue;
        }
        let (&src, steps) = out
            .iter()
            .find(|(&l, _)| l % n == 0)
            .expect("the finest level is a multiple of every level");
        let ratio = (src / n) as usize;
        let coarse: Vec<StepNoise<Mk>> = steps
            .chunks(ratio)
            .map(|c| crate::noise::coarsen(c).expect("grid steps tile exactly"))
            .collect();
        out.insert(n, coarse);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub n: u64,
    /// Mean squared error at the horizon.
    pub mse_terminal: f64,
    pub stderr_terminal: f64,
    /// Largest mean squared error over the grid times of resolution `n`.
    pub mse_max: f64,
    pub stderr_max: f64,
    pub censored_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
    pub label: String,
    pub scheme: SchemeKind,
    pub reference: Reference,
    pub paths: usize,
    pub seed: u64,
}

impl ErrorTable {
    /// Columns `n, mse_T, mse_max, stderr, censored`; `stderr` belongs to `mse_max`.
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "n,mse_T,mse_max,stderr,censored")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.n,
                fmt_float(r.mse_terminal),
                fmt_float(r.mse_max),
                fmt_float(r.stderr_max),
                fmt_float(r.censored_fraction)
            )?;
        }
        Ok(())
    }
}

/// Estimate `sup_t E|x_t − x_tⁿ|²` for each `n` in `n_list` against a
/// coupled reference.
pub fn strong_error_study<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    n_list: &[u64],
    reference: Reference,
    settings: &StudySettings,
) -> Result<ErrorTable> {
    validate_n_list(n_list)?;
    settings.validate()?;
    ensure_commutative(model, settings.seed)?;
    let n_max = *n_list.last().expect("validated non-empty");
    let finest = match reference {
        Reference::Exact => {
            let probe = settings.xi.resolve(settings.seed, 0);
            let w0 = Vector::zeros(model.noise_dim());
            if model.exact_state(&probe, settings.horizon, &w0, &[]).is_none() {
                return Err(Error::config("reference", "model has no closed-form solution"));
            }
            n_max
        }
        Reference::Fine { n_ref } => {
            if let Some(bad) = n_list.iter().find(|&&n| n_ref % n != 0) {
                return Err(Error::config(
                    "n_ref",
                    format!("n = {bad} does not divide n_ref = {n_ref}"),
                ));
            }
            n_ref
        }
    };
    if n_list.iter().any(|&n| finest % n != 0) {
        return Err(Error::config("n_list", "every n must divide the largest n"));
    }

    let horizon = settings.horizon;
    let per_path = |path_id: u64| -> Vec<Option<Vec<f64>>> {
        let xi = settings.xi.resolve(settings.seed, path_id);
        let noise = PathNoise::generate(
            model.marks(),
            model.noise_dim(),
            horizon,
            finest,
            settings.seed,
            path_id,
        );
        // Reference states on the finest grid, or None if unusable.
        let reference_states: Option<Vec<Vector>> = match reference {
            Reference::Exact => {
                let w = noise.wiener_on_grid();
                let mut next = 0;
                let states: Vec<Vector> = (0..=finest)
                    .map(|k| {
                        let t = grid_time(finest, horizon, k);
                        while next < noise.jumps.len() && noise.jumps[next].time <= t {
                            next += 1;
                        }
                        model
                            .exact_state(&xi, t, &w[k as usize], &noise.jumps[..next])
                            .expect("checked above")
                    })
                    .collect();
                states.iter().all(|s| s.iter().all(|v| v.is_finite())).then_some(states)
            }
            Reference::Fine { .. } => {
                let traj = simulate_on_noise(model, scheme, &xi, &noise.steps);
                (!traj.blowup_flag()).then_some(traj.states)
            }
        };
        let levels = noise_levels(noise, n_list);
        n_list
            .iter()
            .map(|&n| {
                let reference_states = reference_states.as_ref()?;
                let traj = simulate_on_noise(model, scheme, &xi, &levels[&n]);
                if traj.blowup_flag() {
                    return None;
                }
                let ratio = (finest / n) as usize;
                Some(
                    (1..=n as usize)
                        .map(|k| (&reference_states[k * ratio] - &traj.states[k]).norm_squared())
                        .collect(),
                )
            })
            .collect()
    };

    let mut stats: Vec<GridStats> = n_list.iter().map(|&n| GridStats::new(n as usize)).collect();
    run_paths(settings, per_path, |res| {
        for (s, r) in stats.iter_mut().zip(&res) {
            s.push(r.as_deref());
        }
    })?;

    let rows = n_list
        .iter()
        .zip(&stats)
        .map(|(&n, s)| {
            let last = &s.slots[n as usize - 1];
            let (_, mse_max, stderr_max) = s.max();
            ErrorRow {
                n,
                mse_terminal: if last.count > 0 { last.mean } else { f64::NAN },
                stderr_terminal: last.stderr(),
                mse_max,
                stderr_max,
                censored_fraction: s.censored as f64 / settings.paths as f64,
            }
        })
        .collect();
    Ok(ErrorTable {
        rows,
        label: settings.label.clone(),
        scheme,
        reference,
        paths: settings.paths,
        seed: settings.seed,
    })
}

/// Acceptance window for a fitted order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateWindow {
    pub lo: f64,
    pub hi: f64,
}

impl RateWindow {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    /// Empirical strong RMS order.
    pub slope: f64,
    pub intercept: f64,
    /// 95% interval from the row standard errors.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub rows_used: usize,
    /// Resolutions dropped for zero, non-finite or fully censored MSE.
    pub dropped: Vec<u64>,
    pub window: Option<RateWindow>,
    pub pass: bool,
}

impl ConvergenceReport {
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "slope,ci_lo,ci_hi,pass")?;
        writeln!(
            out,
            "{},{},{},{}",
            fmt_float(self.slope),
            fmt_float(self.ci_lo),
            fmt_float(self.ci_hi),
            self.pass
        )
    }
}

/// Ordinary least squares of `½ log₂ MSE` on `−log₂ n`, using `mse_max`.
///
/// Each row's standard error is propagated through the regression weights
/// (rows treated as independent) to give a 95% interval on the slope.
pub fn fit_rate(table: &ErrorTable, window: Option<RateWindow>) -> Result<ConvergenceReport> {
    let mut pts = Vec::new();
    let mut dropped = Vec::new();
    for r in &table.rows {
        if r.mse_max > 0.0 && r.mse_max.is_finite() && r.censored_fraction < 1.0 {
            let y = 0.5 * r.mse_max.log2();
            let se_y = if r.stderr_max.is_finite() {
                0.5 * r.stderr_max / (r.mse_max * std::f64::consts::LN_2)
            } else {
                0.0
            };
            pts.push((-(r.n as f64).log2(), y, se_y));
        } else {
            warn!("dropping n = {} from rate fit (mse_max = {})", r.n, r.mse_max);
            dropped.push(r.n);
        }
    }
    if pts.len() < 3 {
        return Err(Error::InsufficientRows(pts.len()));
    }
    let (slope, intercept, weights) = ols(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
    let var: f64 = weights.iter().zip(&pts).map(|(w, p)| w * w * p.2 * p.2).sum();
    let half = 1.96 * var.sqrt();
    let pass = window.is_none_or(|w| w.contains(slope));
    Ok(ConvergenceReport {
        slope,
        intercept,
        ci_lo: slope - half,
        ci_hi: slope + half,
        rows_used: pts.len(),
        dropped,
        window,
        pass,
    })
}

/// Slope, intercept and the slope's weights `(xᵢ − x̄)/Sxx`.
fn ols(pts: &[(f64, f64)]) -> (f64, f64, Vec<f64>) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let weights: Vec<f64> = pts.iter().map(|p| (p.0 - mx) / sxx).collect();
    let slope: f64 = weights.iter().zip(pts).map(|(w, p)| w * p.1).sum();
    (slope, my - slope * mx, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub n: u64,
    /// Largest estimate of `E|xⁿ_t|^p` over the grid.
    pub moment_max: f64,
    pub stderr: f64,
    pub censored_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    pub p: f64,
    pub scheme: SchemeKind,
    pub label: String,
    pub paths: usize,
    pub seed: u64,
}

impl MomentReport {
    /// `max / min` of the row estimates.
    pub fn spread_ratio(&self) -> f64 {
        let vals = self.rows.iter().map(|r| r.moment_max);
        let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn max_censored_fraction(&self) -> f64 {
        self.rows.iter().map(|r| r.censored_fraction).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        write_moment_rows(out, comment, &self.rows)
    }
}

fn write_moment_rows<W: Write + ?Sized>(out: &mut W, comment: Option<&str>, rows: &[MomentRow]) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "n,moment_max,stderr,censored")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.n,
            fmt_float(r.moment_max),
            fmt_float(r.stderr),
            fmt_float(r.censored_fraction)
        )?;
    }
    Ok(())
}

fn moment_rows(n_list: &[u64], stats: &[GridStats], paths: usize) -> Vec<MomentRow> {
    n_list
        .iter()
        .zip(stats)
        .map(|(&n, s)| {
            let (_, moment_max, stderr) = s.max();
            MomentRow {
                n,
                moment_max,
                stderr,
                censored_fraction: s.censored as f64 / paths as f64,
            }
        })
        .collect()
}

/// Estimate `max_k E|xⁿ_{t_k}|^p` (grid times including 0) for each `n`,
/// all resolutions driven by the same noise. Censored paths are excluded
/// from the means and counted separately.
pub fn moment_study<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    n_list: &[u64],
    p: f64,
    settings: &StudySettings,
) -> Result<MomentReport> {
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::config("n_list", "need positive resolutions"));
    }
    if !(p >= 2.0) {
        return Err(Error::config("p0", format!("need p0 >= 2, got {p}")));
    }
    settings.validate()?;
    ensure_commutative(model, settings.seed)?;
    let finest = lcm_all(n_list);
    let per_path = |path_id: u64| -> Vec<Option<Vec<f64>>> {
        let xi = settings.xi.resolve(settings.seed, path_id);
        let noise = PathNoise::generate(
            model.marks(),
            model.noise_dim(),
            settings.horizon,
            finest,
            settings.seed,
            path_id,
        );
        let levels = noise_levels(noise, n_list);
        n_list
            .iter()
            .map(|n| {
                let traj = simulate_on_noise(model, scheme, &xi, &levels[n]);
                (!traj.blowup_flag()).then(|| traj.states.iter().map(|x| x.norm().powf(p)).collect())
            })
            .collect()
    };
    let mut stats: Vec<GridStats> = n_list.iter().map(|&n| GridStats::new(n as usize + 1)).collect();
    run_paths(settings, per_path, |res| {
        for (s, r) in stats.iter_mut().zip(&res) {
            s.push(r.as_deref());
        }
    })?;
    Ok(MomentReport {
        rows: moment_rows(n_list, &stats, settings.paths),
        p,
        scheme,
        label: settings.label.clone(),
        paths: settings.paths,
        seed: settings.seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OneStepTable {
    pub rows: Vec<MomentRow>,
    pub p: u32,
    pub scheme: SchemeKind,
    pub paths: usize,
    pub seed: u64,
}

impl OneStepTable {
    /// OLS slope of `log₂(estimate)` against `log₂ n` over positive rows.
    pub fn slope(&self) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.moment_max > 0.0 && r.moment_max.is_finite())
            .map(|r| ((r.n as f64).log2(), r.moment_max.log2()))
            .collect();
        if pts.len() < 3 {
            return Err(Error::InsufficientRows(pts.len()));
        }
        Ok(ols(&pts).0)
    }

    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        write_moment_rows(out, comment, &self.rows)
    }
}

/// Estimate `max_k E|xⁿ_{t_k + h/2} − xⁿ_{t_k}|^p` for each `n`.
///
/// The mid-step state comes from the same one-step map applied over the
/// first half of the step, on the first half of the path's noise.
pub fn one_step_study<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    n_list: &[u64],
    p: u32,
    settings: &StudySettings,
) -> Result<OneStepTable> {
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::config("n_list", "need positive resolutions"));
    }
    if p < 2 || !p.is_multiple_of(2) {
        return Err(Error::config("p", format!("need an even integer >= 2, got {p}")));
    }
    settings.validate()?;
    ensure_commutative(model, settings.seed)?;
    let halves: Vec<u64> = n_list.iter().map(|n| 2 * n).collect();
    let finest = lcm_all(&halves);
    let mut wanted = halves.clone();
    wanted.extend_from_slice(n_list);

    let per_path = |path_id: u64| -> Vec<Option<Vec<f64>>> {
        let xi = settings.xi.resolve(settings.seed, path_id);
        let noise = PathNoise::generate(
            model.marks(),
            model.noise_dim(),
            settings.horizon,
            finest,
            settings.seed,
            path_id,
        );
        let levels = noise_levels(noise, &wanted);
        n_list
            .iter()
            .map(|&n| {
                let coarse = &levels[&n];
                let half = &levels[&(2 * n)];
                let traj: Trajectory = simulate_on_noise(model, scheme, &xi, coarse);
                if traj.blowup_flag() {
                    return None;
                }
                let mut out = Vec::with_capacity(n as usize);
                for (k, first_half) in half.iter().step_by(2).enumerate() {
                    let x = &traj.states[k];
                    let mid = step(model, scheme, n, first_half.start(), first_half.len(), x, first_half);
                    let dev = (mid - x).norm().powi(p as i32);
                    if !dev.is_finite() {
                        return None;
                    }
                    out.push(dev);
                }
                Some(out)
            })
            .collect()
    };
    let mut stats: Vec<GridStats> = n_list.iter().map(|&n| GridStats::new(n as usize)).collect();
    run_paths(settings, per_path, |res| {
        for (s, r) in stats.iter_mut().zip(&res) {
            s.push(r.as_deref());
        }
    })?;
    Ok(OneStepTable {
        rows: moment_rows(n_list, &stats, settings.paths),
        p,
        scheme,
        paths: settings.paths,
        seed: settings.seed,
    })
}

fn lcm_all(ns: &[u64]) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    ns.iter().fold(1, |acc, &n| acc / gcd(acc, n) * n)
}
