//! Sampled spot-check of the growth, monotonicity and derivative-Lipschitz
//! conditions. The conditions are universally quantified, so this can only
//! ever refute them, never prove them.
//!
//! Every check is reported as the ratio left side / right side, maximised
//! over the sample; a ratio above 1 is a violation.

use super::SdeModel;
use crate::error::{Error, Result};
use crate::noise::{derive_stream, purpose};
use crate::Vector;

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub max_ratio: f64,
    /// Pair at which the maximum (or the first non-finite value) occurred.
    pub worst: Option<(Vector, Vector)>,
    pub non_finite: bool,
}

impl AssumptionCheck {
    fn new(name: &'static str) -> Self {
        AssumptionCheck {
            name,
            max_ratio: f64::NEG_INFINITY,
            worst: None,
            non_finite: false,
        }
    }

    pub fn violated(&self) -> bool {
        self.non_finite || self.max_ratio > 1.0
    }

    fn record(&mut self, ratio: f64, x: &Vector, y: &Vector) {
        if self.non_finite {
            return;
        }
        if !ratio.is_finite() {
            self.non_finite = true;
            self.max_ratio = f64::INFINITY;
            self.worst = Some((x.clone(), y.clone()));
        } else if ratio > self.max_ratio {
            self.max_ratio = ratio;
            self.worst = Some((x.clone(), y.clone()));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.violated())
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const GROWTH: &str = "A-2 growth";
pub const JUMP_MOMENT: &str = "A-3 jump moment";
pub const MONOTONICITY: &str = "A-4 monotonicity";
pub const DRIFT_DERIVATIVE: &str = "A-5 drift derivative";
pub const DIFFUSION_DERIVATIVE: &str = "A-5 diffusion derivative";
pub const JUMP_DERIVATIVE: &str = "A-5 jump derivative";

/// Evaluate the conditions at every sampled pair `(x, x̄)`, using the
/// model's own `(ρ, p₀, L, η)`. Single-point conditions are checked at both
/// members of each pair. ν-integrals are estimated with `mark_samples`
/// marks drawn from the stream `(seed, 0, VALIDATION)`.
///
/// Non-finite evaluations are reported as violations, not errors.
pub fn validate_assumptions<M: SdeModel>(
    model: &M,
    pairs: &[(Vector, Vector)],
    mark_samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if pairs.is_empty() {
        return Err(Error::config("sample_points", "need at least one pair"));
    }
    if mark_samples == 0 {
        return Err(Error::config("mark_samples", "must be positive"));
    }
    if let Some((x, y)) = pairs
        .iter()
        .find(|(x, y)| x.iter().chain(y.iter()).any(|v| !v.is_finite()))
    {
        return Err(Error::config(
            "sample_points",
            format!("non-finite pair ({x:?}, {y:?})"),
        ));
    }

    let params = *model.params();
    let lambda = model.marks().intensity();
    let mut stream = derive_stream(seed, 0, purpose::VALIDATION);
    let marks: Vec<M::Mark> = (0..mark_samples).map(|_| model.marks().sample(&mut stream)).collect();
    // λ · (1/N) Σ f(z)
    let nu_integral = |f: &dyn Fn(&M::Mark) -> f64| -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        lambda * marks.iter().map(f).sum::<f64>() / marks.len() as f64
    };

    let mut growth = AssumptionCheck::new(GROWTH);
    let mut jump_moment = AssumptionCheck::new(JUMP_MOMENT);
    let mut mono = AssumptionCheck::new(MONOTONICITY);
    let mut d_drift = AssumptionCheck::new(DRIFT_DERIVATIVE);
    let mut d_diff = AssumptionCheck::new(DIFFUSION_DERIVATIVE);
    let mut d_jump = AssumptionCheck::new(JUMP_DERIVATIVE);
    let big_l = params.lipschitz;

    for (x, y) in pairs {
        for p in [x, y] {
            let r = p.norm();
            let lhs = 2.0 * p.dot(&model.drift(p)) + (params.p0 - 1.0) * model.diffusion(p).norm_squared();
            growth.record(lhs / (big_l * (1.0 + r).powi(2)), x, y);

            let moment = nu_integral(&|z| model.jump_coeff(p, z).norm().powf(params.p0));
            jump_moment.record(moment / (big_l * (1.0 + r).powf(params.p0)), x, y);
        }

        let diff = x - y;
        let dist2 = diff.norm_squared();
        if dist2 == 0.0 {
            for c in [&mut mono, &mut d_drift, &mut d_diff, &mut d_jump] {
                c.record(0.0, x, y);
            }
            continue;
        }
        let dist = dist2.sqrt();

        let one_sided = 2.0 * diff.dot(&(model.drift(x) - model.drift(y)))
            + params.eta * (model.diffusion(x) - model.diffusion(y)).norm_squared();
        let jump_l2 = nu_integral(&|z| (model.jump_coeff(x, z) - model.jump_coeff(y, z)).norm_squared());
        mono.record(one_sided.max(jump_l2) / (big_l * dist2), x, y);

        let base = 1.0 + x.norm() + y.norm();
        let db = (model.drift_jacobian(x) - model.drift_jacobian(y)).norm();
        d_drift.record(db / (big_l * base.powf(params.rho - 1.0) * dist), x, y);

        let ds = (0..model.noise_dim())
            .map(|k| (model.diffusion_col_jacobian(x, k) - model.diffusion_col_jacobian(y, k)).norm())
            .fold(0.0, f64::max);
        d_diff.record(ds / (big_l * base.powf((params.rho - 2.0) / 2.0) * dist), x, y);

        let dg = nu_integral(&|z| (model.jump_jacobian(x, z) - model.jump_jacobian(y, z)).norm_squared());
        d_jump.record(dg / (big_l * dist2), x, y);
    }

    Ok(AssumptionReport {
        checks: vec![growth, jump_moment, mono, d_drift, d_diff, d_jump],
    })
}

/// `count` pairs drawn uniformly from the box `[lo, hi]^d`.
pub fn sample_pairs(d: usize, count: usize, lo: f64, hi: f64, seed: u64) -> Vec<(Vector, Vector)> {
    let mut s = derive_stream(seed, 0, purpose::TEST_POINTS);
    let draw = |s: &mut crate::noise::RngStream| Vector::from_iterator(d, (0..d).map(|_| lo + (hi - lo) * s.uniform()));
    (0..count)
        .map(|_| {
            let x = draw(&mut s);
            let y = draw(&mut s);
            (x, y)
        })
        .collect()
}
