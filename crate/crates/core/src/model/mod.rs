//! The SDE problem: coefficients, their Jacobians, the jump-mark measure and
//! the growth constants `(ρ, p₀, L, η)` that the taming and the convergence
//! theory are stated in.

mod builtin;
pub mod validate;

pub use builtin::{
    builtin_linear, builtin_superlinear, exact_linear_terminal, BuiltinModel, BuiltinSpec, LinearModel,
    SuperlinearModel,
};
pub use validate::{sample_pairs, validate_assumptions, AssumptionCheck, AssumptionReport};

use std::fmt;

use crate::error::{Error, Result};
use crate::noise::{JumpEvent, RngStream};
use crate::{Matrix, Vector};

/// Built-in models return finite coefficients for `|x|` below this bound.
/// Beyond it cubic terms may overflow; the stepper then flags the path.
pub const STATE_OVERFLOW_GUARD: f64 = 1e100;

/// Finite mark measure `ν` on an abstract mark space, stored as its total
/// mass `λ = ν(Z)` together with a sampler for the normalised law `ν/λ`.
///
/// `λ = 0` is allowed and switches jumps off.
#[derive(Clone, Copy)]
pub struct MarkMeasure<Mk> {
    intensity: f64,
    sampler: fn(&mut RngStream) -> Mk,
}

impl<Mk> MarkMeasure<Mk> {
    pub fn new(intensity: f64, sampler: fn(&mut RngStream) -> Mk) -> Result<Self> {
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(Error::config(
                "lambda",
                format!("jump intensity must be finite and non-negative, got {intensity}"),
            ));
        }
        Ok(MarkMeasure { intensity, sampler })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn sample(&self, rng: &mut RngStream) -> Mk {
        (self.sampler)(rng)
    }
}

impl MarkMeasure<f64> {
    /// Standard normal marks with total mass `intensity`.
    pub fn standard_normal(intensity: f64) -> Result<Self> {
        Self::new(intensity, RngStream::standard_normal)
    }
}

impl<Mk> fmt::Debug for MarkMeasure<Mk> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkMeasure")
            .field("intensity", &self.intensity)
            .finish_non_exhaustive()
    }
}

/// Standing constants of the growth and Lipschitz conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    /// Polynomial growth order `ρ ≥ 1`; the taming denominator is `1 + |x|^{4ρ}/n`.
    pub rho: f64,
    /// Moment order `p₀ ≥ 2`.
    pub p0: f64,
    /// Constant `L > 0` shared by the growth and monotonicity conditions.
    pub lipschitz: f64,
    /// Diffusion weight `η > 1` in the one-sided Lipschitz condition.
    pub eta: f64,
}

impl ModelParams {
    pub fn new(rho: f64, p0: f64, lipschitz: f64, eta: f64) -> Result<Self> {
        if !(rho >= 1.0 && rho.is_finite()) {
            return Err(Error::config("rho", format!("need rho >= 1, got {rho}")));
        }
        if !(p0 >= 2.0 && p0.is_finite()) {
            return Err(Error::config("p0", format!("need p0 >= 2, got {p0}")));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::config("L", format!("need L > 0, got {lipschitz}")));
        }
        if !(eta > 1.0 && eta.is_finite()) {
            return Err(Error::config("eta", format!("need eta > 1, got {eta}")));
        }
        Ok(ModelParams {
            rho,
            p0,
            lipschitz,
            eta,
        })
    }
}

/// A d-dimensional jump-diffusion
///
/// ```text
/// dx = b(x) dt + σ(x) dw + ∫_Z γ(x, z) Ñ(dt, dz)
/// ```
///
/// with `w` m-dimensional. Implementations must be pure: every method is a
/// deterministic function of its arguments, so a model can be shared by
/// any number of worker threads.
///
/// The ν-averages [`jump_mean`](SdeModel::jump_mean) and
/// [`jump_mean_jacobian`](SdeModel::jump_mean_jacobian) are supplied in
/// closed form; the stepper evaluates them once per step.
pub trait SdeModel: Send + Sync {
    /// Opaque mark value; only the model's own coefficients look inside it.
    type Mark: Copy + Send + Sync + fmt::Debug;

    /// State dimension `d`.
    fn dim(&self) -> usize;
    /// Wiener dimension `m`.
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &Vector) -> Vector;
    /// `d × m` matrix.
    fn diffusion(&self, x: &Vector) -> Matrix;
    fn jump_coeff(&self, x: &Vector, z: &Self::Mark) -> Vector;

    /// `∂bⁱ/∂xʲ`. Only assumption validation uses it.
    fn drift_jacobian(&self, x: &Vector) -> Matrix;
    /// Jacobian of the `k`-th diffusion column: entry `(i, u)` is `∂σⁱᵏ/∂xᵘ`.
    fn diffusion_col_jacobian(&self, x: &Vector, k: usize) -> Matrix;
    /// `∂γⁱ(x, z)/∂xʲ`.
    fn jump_jacobian(&self, x: &Vector, z: &Self::Mark) -> Matrix;

    /// `γ̄(x) = ∫_Z γ(x, z) ν(dz)`.
    fn jump_mean(&self, x: &Vector) -> Vector;
    /// Jacobian of `γ̄`.
    fn jump_mean_jacobian(&self, x: &Vector) -> Matrix;

    fn marks(&self) -> &MarkMeasure<Self::Mark>;
    fn params(&self) -> &ModelParams;

    /// Closed-form solution at time `t`, given `w_t` and the jumps in
    /// `(0, t]`, for models that have one. Used as the exact reference in
    /// convergence studies.
    fn exact_state(&self, _xi: &Vector, _t: f64, _w_t: &Vector, _jumps: &[JumpEvent<Self::Mark>]) -> Option<Vector> {
        None
    }
}
