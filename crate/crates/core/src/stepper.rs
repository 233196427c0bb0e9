//! One-step maps and whole-path simulation.
//!
//! Over a step `[a, b]`, `h = b − a`, with all coefficient families frozen at
//! the left state `x`, the tamed Milstein-type scheme integrates the drift,
//! the Wiener term with its iterated corrections and the compensated jump
//! term with its iterated corrections exactly. Writing `Δw`, `A = ∫_a^b (w_s − w_a) ds`
//! and `(τᵢ, zᵢ)` for the jumps in the step:
//!
//! ```text
//! x' = x + b⁽ⁿ⁾h
//!        + Λ₀Δw + Σ_{k,j} Λ₁ᵏ[:, j] · ½(ΔwᵏΔwʲ − δ_{kj}h)
//!        + Σᵢ (Λ₂(zᵢ) + Λ₃(zᵢ)) (w_b − w_{τᵢ}) − Λ̄₂ (hΔw − A)
//!        + Σᵢ [ γ(zᵢ) + Σ_k Γ₁ᵏ(zᵢ)(wᵏ_{τᵢ} − wᵏ_a)
//!               + Σ_{l: τ_l < τᵢ} (Γ₂ + Γ₃)(zᵢ, z_l) − (τᵢ − a) ∫Γ₂(zᵢ, z₁)ν(dz₁) ]
//!        − [ hγ̄ + Σ_k Γ̄₁ᵏ Aᵏ + Σᵢ (b − τᵢ)(Γ̄₂′ + Γ̄₃′)(zᵢ) − ½h² Γ̄̄₂ ]
//! ```
//!
//! The inner jump sums use the left limit, so a jump never interacts with
//! itself. Wiener–Wiener iterated integrals use the symmetric formula, which
//! is exact only under commutative noise; [`ensure_commutative`] guards this.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::noise::{derive_stream, grid_time, purpose, PathNoise, RngStream, StepNoise};
use crate::taming::{TamedCoefficientSet, TamedFrame};
use crate::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    TamedMilstein,
    /// Order-½ baseline: `b⁽ⁿ⁾h + Λ₀⁽ⁿ⁾Δw + Σᵢγ(x, zᵢ) − hγ̄(x)`.
    TamedEuler,
    /// The Milstein expansion with the tame factor forced to 1.
    ClassicalMilstein,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [
        SchemeKind::TamedMilstein,
        SchemeKind::TamedEuler,
        SchemeKind::ClassicalMilstein,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::TamedMilstein => "tamed_milstein",
            SchemeKind::TamedEuler => "tamed_euler",
            SchemeKind::ClassicalMilstein => "classical_milstein",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("scheme", format!("unknown scheme `{s}`")))
    }
}

/// Largest grid point `kT/n` not exceeding `t`.
pub fn kappa(n: u64, horizon: f64, t: f64) -> f64 {
    let mut k = (n as f64 * t / horizon).floor().max(0.0) as u64;
    // The floor can land one off either way after rounding.
    while k > 0 && grid_time(n, horizon, k) > t {
        k -= 1;
    }
    while k < n && grid_time(n, horizon, k + 1) <= t {
        k += 1;
    }
    grid_time(n, horizon, k)
}

/// One tamed Milstein-type step from `x` at time `a` over `h`.
///
/// # Panics
///
/// If `n == 0`.
pub fn milstein_step<M: SdeModel>(model: &M, n: u64, a: f64, h: f64, x: &Vector, noise: &StepNoise<M::Mark>) -> Vector {
    let set = TamedCoefficientSet::new(model, n).expect("resolution n >= 1");
    milstein_expansion(&set.at(x), a, h, noise)
}

/// One tamed Euler step.
///
/// # Panics
///
/// If `n == 0`.
pub fn euler_step<M: SdeModel>(model: &M, n: u64, _a: f64, h: f64, x: &Vector, noise: &StepNoise<M::Mark>) -> Vector {
    let set = TamedCoefficientSet::new(model, n).expect("resolution n >= 1");
    euler_expansion(&set.at(x), h, noise)
}

/// One classical (untamed) Milstein step.
pub fn classical_milstein_step<M: SdeModel>(
    model: &M,
    a: f64,
    h: f64,
    x: &Vector,
    noise: &StepNoise<M::Mark>,
) -> Vector {
    milstein_expansion(&TamedCoefficientSet::untamed(model).at(x), a, h, noise)
}

/// Dispatch on `scheme`. Non-finite output is returned as is.
pub fn step<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    n: u64,
    a: f64,
    h: f64,
    x: &Vector,
    noise: &StepNoise<M::Mark>,
) -> Vector {
    match scheme {
        SchemeKind::TamedMilstein => milstein_step(model, n, a, h, x, noise),
        SchemeKind::TamedEuler => euler_step(model, n, a, h, x, noise),
        SchemeKind::ClassicalMilstein => classical_milstein_step(model, a, h, x, noise),
    }
}

fn coefficient_set<M: SdeModel>(model: &M, scheme: SchemeKind, n: u64) -> TamedCoefficientSet<'_, M> {
    match scheme {
        SchemeKind::ClassicalMilstein => TamedCoefficientSet::untamed(model),
        _ => TamedCoefficientSet::new(model, n).expect("resolution n >= 1"),
    }
}

fn step_with<M: SdeModel>(
    set: &TamedCoefficientSet<'_, M>,
    scheme: SchemeKind,
    a: f64,
    h: f64,
    x: &Vector,
    noise: &StepNoise<M::Mark>,
) -> Vector {
    let frame = set.at(x);
    match scheme {
        SchemeKind::TamedEuler => euler_expansion(&frame, h, noise),
        _ => milstein_expansion(&frame, a, h, noise),
    }
}

fn euler_expansion<M: SdeModel>(f: &TamedFrame<'_, M>, h: f64, noise: &StepNoise<M::Mark>) -> Vector {
    let dw = noise.total_increment();
    let mut out = f.state() + f.tamed_drift() * h + f.lambda0() * &dw;
    for ev in noise.jumps() {
        out += f.jump(&ev.mark);
    }
    out -= f.jump_mean() * h;
    out
}

fn milstein_expansion<M: SdeModel>(f: &TamedFrame<'_, M>, a: f64, h: f64, noise: &StepNoise<M::Mark>) -> Vector {
    let b = a + h;
    let dw = noise.total_increment();
    let m = dw.len();
    let jumps = noise.jumps();

    let mut out = f.state() + f.tamed_drift() * h + f.lambda0() * &dw;

    // ∫∫ dw dw
    for k in 0..m {
        let l1 = f.lambda1(k);
        for j in 0..m {
            let iterated = 0.5 * (dw[k] * dw[j] - if k == j { h } else { 0.0 });
            out += l1.column(j) * iterated;
        }
    }

    // ∫∫ dN dw and its compensator.
    let w_at_jumps = noise.wiener_at_jumps();
    for (ev, w_tau) in jumps.iter().zip(&w_at_jumps) {
        let after: Vector = &dw - w_tau;
        let l23: Matrix = f.lambda2(&ev.mark) + f.lambda3(&ev.mark);
        out += l23 * after;
    }
    let area = noise.total_area();
    let centred_time_integral: Vector = &dw * h - &area;
    out -= f.lambda2_bar() * centred_time_integral;

    // ∫∫ dw dÑ and ∫∫ dN dÑ, evaluated at each jump.
    for (i, (ev, w_tau)) in jumps.iter().zip(&w_at_jumps).enumerate() {
        let mut g = f.jump(&ev.mark);
        for k in 0..m {
            g += f.gamma1(&ev.mark, k) * w_tau[k];
        }
        for earlier in &jumps[..i] {
            g += f.gamma2(&ev.mark, &earlier.mark) + f.gamma3(&ev.mark, &earlier.mark);
        }
        g -= f.gamma2_inner_bar(&ev.mark) * (ev.time - a);
        out += g;
    }

    // Compensator of the outer jump integral.
    let mut comp = f.jump_mean() * h;
    for k in 0..m {
        comp += f.gamma1_bar(k) * area[k];
    }
    for ev in jumps {
        comp += (f.gamma2_outer_bar(&ev.mark) + f.gamma3_outer_bar(&ev.mark)) * (b - ev.time);
    }
    comp -= f.gamma2_bar_bar() * (0.5 * h * h);
    out -= comp;
    out
}

/// Initial value `ξ`: fixed, or drawn per path from the stream
/// `(seed, path_id, INITIAL)`.
#[derive(Clone, Debug)]
pub enum InitialState {
    Fixed(Vector),
    Sampled(fn(&mut RngStream) -> Vector),
}

impl InitialState {
    pub fn resolve(&self, master_seed: u64, path_id: u64) -> Vector {
        match self {
            InitialState::Fixed(x) => x.clone(),
            InitialState::Sampled(f) => f(&mut derive_stream(master_seed, path_id, purpose::INITIAL)),
        }
    }
}

impl From<Vector> for InitialState {
    fn from(x: Vector) -> Self {
        InitialState::Fixed(x)
    }
}

/// States of one simulated path on the uniform grid `t_k = kT/n`.
///
/// Once a non-finite state appears at `blowup_index`, that state is
/// repeated for the rest of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub n: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub blowup_index: Option<usize>,
}

impl Trajectory {
    pub fn blowup_flag(&self) -> bool {
        self.blowup_index.is_some()
    }

    pub fn terminal(&self) -> &Vector {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Columns `t, x_1..x_d, blowup_flag`; floats with 17 significant digits.
    pub fn write_csv<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.push("blowup_flag".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let flag = self.blowup_index.is_some_and(|b| k >= b);
            let mut row = vec![fmt_float(*t)];
            row.extend(x.iter().map(|v| fmt_float(*v)));
            row.push(u8::from(flag).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Round-trippable float formatting used in every CSV.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Run `scheme` over precomputed noise, one step per entry of `steps`.
pub fn simulate_on_noise<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    xi: &Vector,
    steps: &[StepNoise<M::Mark>],
) -> Trajectory {
    let n = steps.len() as u64;
    let set = coefficient_set(model, scheme, n.max(1));
    let mut times = Vec::with_capacity(steps.len() + 1);
    let mut states = Vec::with_capacity(steps.len() + 1);
    times.push(steps.first().map_or(0.0, |s| s.start()));
    states.push(xi.clone());
    let mut blowup_index = None;
    let mut x = xi.clone();
    for (k, s) in steps.iter().enumerate() {
        times.push(s.end());
        if blowup_index.is_none() {
            x = step_with(&set, scheme, s.start(), s.len(), &x, s);
            if x.iter().any(|v| !v.is_finite()) {
                blowup_index = Some(k + 1);
            }
        }
        states.push(x.clone());
    }
    Trajectory {
        n,
        times,
        states,
        blowup_index,
    }
}

/// Simulate one path of `n` steps over `[0, horizon]`. Jumps are drawn once
/// for the whole horizon; the result is a pure function of
/// `(model, scheme, n, horizon, xi, master_seed, path_id)`.
pub fn simulate_path<M: SdeModel>(
    model: &M,
    scheme: SchemeKind,
    n: u64,
    horizon: f64,
    xi: &InitialState,
    master_seed: u64,
    path_id: u64,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::config("n", "need at least one step"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config("horizon", format!("need T > 0, got {horizon}")));
    }
    let noise = PathNoise::generate(model.marks(), model.noise_dim(), horizon, n, master_seed, path_id);
    let x0 = xi.resolve(master_seed, path_id);
    let mut traj = simulate_on_noise(model, scheme, &x0, &noise.steps);
    traj.times = (0..=n).map(|k| grid_time(n, horizon, k)).collect();
    Ok(traj)
}

/// Check `Λ¹σ[:, j] = Λʲσ[:, k]` (i.e. `Δσʲσᵏ = Δσᵏσʲ`) at every point,
/// to relative tolerance `tol`.
pub fn check_commutativity<M: SdeModel>(model: &M, points: &[Vector], tol: f64) -> Result<()> {
    let m = model.noise_dim();
    if m < 2 {
        return Ok(());
    }
    let set = TamedCoefficientSet::untamed(model);
    for x in points {
        let f = set.at(x);
        let sigma = f.sigma();
        let ds = f.dsigma();
        for k in 0..m {
            for j in (k + 1)..m {
                let kj = &ds[j] * sigma.column(k);
                let jk = &ds[k] * sigma.column(j);
                let scale = kj.norm().max(jk.norm()).max(1.0);
                if (&kj - &jk).norm() > tol * scale {
                    return Err(Error::Model(format!(
                        "diffusion is not commutative at x = {:?} (columns {k}, {j})",
                        x.as_slice()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Reject multi-dimensional models whose diffusion fails the commutativity
/// identity at 100 random points of `[−5, 5]^d`.
pub fn ensure_commutative<M: SdeModel>(model: &M, seed: u64) -> Result<()> {
    if model.noise_dim() < 2 {
        return Ok(());
    }
    let mut s = derive_stream(seed, 0, purpose::TEST_POINTS);
    let d = model.dim();
    let points: Vec<Vector> = (0..100)
        .map(|_| Vector::from_iterator(d, (0..d).map(|_| -5.0 + 10.0 * s.uniform())))
        .collect();
    check_commutativity(model, &points, 1e-8)
}
