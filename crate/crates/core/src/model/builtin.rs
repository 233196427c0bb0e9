use serde::{Deserialize, Serialize};

use super::{MarkMeasure, ModelParams, SdeModel};
use crate::error::{Error, Result};
use crate::noise::JumpEvent;
use crate::{Matrix, Vector};

/// Scalar geometric Lévy model
///
/// ```text
/// dx = a x dt + s x dw + ∫ c0 x z Ñ(dt, dz),   z ~ N(0, 1), ν(Z) = λ
/// ```
///
/// It satisfies the growth conditions with `ρ = 1` and has the closed-form
/// solution [`exact_linear_terminal`].
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub a: f64,
    pub s: f64,
    pub c0: f64,
    marks: MarkMeasure<f64>,
    params: ModelParams,
}

pub fn builtin_linear(a: f64, s: f64, c0: f64, lambda: f64) -> Result<LinearModel> {
    for (name, v) in [("a", a), ("s", s), ("c0", c0)] {
        if !v.is_finite() {
            return Err(Error::config(name, format!("must be finite, got {v}")));
        }
    }
    let marks = MarkMeasure::standard_normal(lambda)?;
    let (p0, eta) = (4.0, 2.0);
    // Smallest L that makes every growth / monotonicity inequality hold
    // (E z⁴ = 3, E z² = 1), floored at 1.
    let lipschitz = [
        2.0 * a + (p0 - 1.0) * s * s,
        3.0 * lambda * c0.powi(4),
        2.0 * a + eta * s * s,
        lambda * c0 * c0,
        1.0,
    ]
    .into_iter()
    .fold(f64::MIN, f64::max);
    Ok(LinearModel {
        a,
        s,
        c0,
        marks,
        params: ModelParams::new(1.0, p0, lipschitz, eta)?,
    })
}

/// `ξ exp((a − s²/2) T + s w_T) ∏ᵢ (1 + c0 zᵢ)` over the jumps in `(0, T]`.
///
/// The compensator adds no drift because the marks are centred.
pub fn exact_linear_terminal(a: f64, s: f64, c0: f64, xi: f64, t: f64, w_t: f64, jumps: &[(f64, f64)]) -> f64 {
    let jump_factor: f64 = jumps.iter().map(|&(_, z)| 1.0 + c0 * z).product();
    xi * ((a - 0.5 * s * s) * t + s * w_t).exp() * jump_factor
}

fn scalar(v: f64) -> Vector {
    Vector::from_element(1, v)
}

fn scalar_matrix(v: f64) -> Matrix {
    Matrix::from_element(1, 1, v)
}

impl SdeModel for LinearModel {
    type Mark = f64;

    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &Vector) -> Vector {
        scalar(self.a * x[0])
    }

    fn diffusion(&self, x: &Vector) -> Matrix {
        scalar_matrix(self.s * x[0])
    }

    fn jump_coeff(&self, x: &Vector, z: &f64) -> Vector {
        scalar(self.c0 * x[0] * z)
    }

    fn drift_jacobian(&self, _x: &Vector) -> Matrix {
        scalar_matrix(self.a)
    }

    fn diffusion_col_jacobian(&self, _x: &Vector, _k: usize) -> Matrix {
        scalar_matrix(self.s)
    }

    fn jump_jacobian(&self, _x: &Vector, z: &f64) -> Matrix {
        scalar_matrix(self.c0 * z)
    }

    fn jump_mean(&self, _x: &Vector) -> Vector {
        scalar(0.0)
    }

    fn jump_mean_jacobian(&self, _x: &Vector) -> Matrix {
        scalar_matrix(0.0)
    }

    fn marks(&self) -> &MarkMeasure<f64> {
        &self.marks
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn exact_state(&self, xi: &Vector, t: f64, w_t: &Vector, jumps: &[JumpEvent<f64>]) -> Option<Vector> {
        let jumps: Vec<(f64, f64)> = jumps.iter().map(|j| (j.time, j.mark)).collect();
        Some(scalar(exact_linear_terminal(
            self.a, self.s, self.c0, xi[0], t, w_t[0], &jumps,
        )))
    }
}

/// Scalar model with cubic drift and quadratic diffusion
///
/// ```text
/// dx = (x − x³) dt + σ₀ x² dw + ∫ g0 x z Ñ(dt, dz),   z ~ N(0, 1), ν(Z) = λ
/// ```
///
/// with `ρ = 2, p₀ = 4, η = 2`. Classical explicit schemes lose moment
/// bounds on it.
#[derive(Clone, Debug)]
pub struct SuperlinearModel {
    pub sigma0: f64,
    pub g0: f64,
    marks: MarkMeasure<f64>,
    params: ModelParams,
}

pub fn builtin_superlinear(sigma0: f64, g0: f64, lambda: f64) -> Result<SuperlinearModel> {
    for (name, v) in [("sigma0", sigma0), ("g0", g0)] {
        if !v.is_finite() {
            return Err(Error::config(name, format!("must be finite, got {v}")));
        }
    }
    let p0 = 4.0;
    // 2x(x − x³) + (p₀ − 1)σ₀²x⁴ ≤ 2x² needs (p₀ − 1)σ₀² ≤ 2.
    if sigma0 * sigma0 * p0 > 2.0 + sigma0 * sigma0 {
        return Err(Error::config(
            "sigma0",
            format!("sigma0^2 * p0 <= 2 + sigma0^2 fails for sigma0 = {sigma0}, p0 = {p0}"),
        ));
    }
    let marks = MarkMeasure::standard_normal(lambda)?;
    let lipschitz = 4.0_f64.max(lambda * g0 * g0).max(3.0 * lambda * g0.powi(4));
    Ok(SuperlinearModel {
        sigma0,
        g0,
        marks,
        params: ModelParams::new(2.0, p0, lipschitz, 2.0)?,
    })
}

impl SdeModel for SuperlinearModel {
    type Mark = f64;

    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &Vector) -> Vector {
        let x = x[0];
        scalar(x - x * x * x)
    }

    fn diffusion(&self, x: &Vector) -> Matrix {
        scalar_matrix(self.sigma0 * x[0] * x[0])
    }

    fn jump_coeff(&self, x: &Vector, z: &f64) -> Vector {
        scalar(self.g0 * x[0] * z)
    }

    fn drift_jacobian(&self, x: &Vector) -> Matrix {
        scalar_matrix(1.0 - 3.0 * x[0] * x[0])
    }

    fn diffusion_col_jacobian(&self, x: &Vector, _k: usize) -> Matrix {
        scalar_matrix(2.0 * self.sigma0 * x[0])
    }

    fn jump_jacobian(&self, _x: &Vector, z: &f64) -> Matrix {
        scalar_matrix(self.g0 * z)
    }

    fn jump_mean(&self, _x: &Vector) -> Vector {
        scalar(0.0)
    }

    fn jump_mean_jacobian(&self, _x: &Vector) -> Matrix {
        scalar_matrix(0.0)
    }

    fn marks(&self) -> &MarkMeasure<f64> {
        &self.marks
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }
}

/// Named built-in models, as selected from a CLI config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinSpec {
    Linear {
        a: f64,
        s: f64,
        c0: f64,
        lambda: f64,
    },
    Superlinear {
        #[serde(default = "default_sigma0")]
        sigma0: f64,
        #[serde(default = "default_g0")]
        g0: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
}

fn default_sigma0() -> f64 {
    0.25
}

fn default_g0() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub enum BuiltinModel {
    Linear(LinearModel),
    Superlinear(SuperlinearModel),
}

impl BuiltinSpec {
    pub fn build(&self) -> Result<BuiltinModel> {
        Ok(match *self {
            BuiltinSpec::Linear { a, s, c0, lambda } => BuiltinModel::Linear(builtin_linear(a, s, c0, lambda)?),
            BuiltinSpec::Superlinear { sigma0, g0, lambda } => {
                BuiltinModel::Superlinear(builtin_superlinear(sigma0, g0, lambda)?)
            }
        })
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            BuiltinModel::Linear($m) => $e,
            BuiltinModel::Superlinear($m) => $e,
        }
    };
}

impl SdeModel for BuiltinModel {
    type Mark = f64;

    fn dim(&self) -> usize {
        delegate!(self, m => m.dim())
    }

    fn noise_dim(&self) -> usize {
        delegate!(self, m => m.noise_dim())
    }

    fn drift(&self, x: &Vector) -> Vector {
        delegate!(self, m => m.drift(x))
    }

    fn diffusion(&self, x: &Vector) -> Matrix {
        delegate!(self, m => m.diffusion(x))
    }

    fn jump_coeff(&self, x: &Vector, z: &f64) -> Vector {
        delegate!(self, m => m.jump_coeff(x, z))
    }

    fn drift_jacobian(&self, x: &Vector) -> Matrix {
        delegate!(self, m => m.drift_jacobian(x))
    }

    fn diffusion_col_jacobian(&self, x: &Vector, k: usize) -> Matrix {
        delegate!(self, m => m.diffusion_col_jacobian(x, k))
    }

    fn jump_jacobian(&self, x: &Vector, z: &f64) -> Matrix {
        delegate!(self, m => m.jump_jacobian(x, z))
    }

    fn jump_mean(&self, x: &Vector) -> Vector {
        delegate!(self, m => m.jump_mean(x))
    }

    fn jump_mean_jacobian(&self, x: &Vector) -> Matrix {
        delegate!(self, m => m.jump_mean_jacobian(x))
    }

    fn marks(&self) -> &MarkMeasure<f64> {
        delegate!(self, m => m.marks())
    }

    fn params(&self) -> &ModelParams {
        delegate!(self, m => m.params())
    }

    fn exact_state(&self, xi: &Vector, t: f64, w_t: &Vector, jumps: &[JumpEvent<f64>]) -> Option<Vector> {
        delegate!(self, m => m.exact_state(xi, t, w_t, jumps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{derive_stream, purpose};

    fn x(v: f64) -> Vector {
        scalar(v)
    }

    #[test]
    fn zero_linear_model_has_zero_coefficients() {
        let m = builtin_linear(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(m.drift(&x(3.0))[0], 0.0);
        assert_eq!(m.diffusion(&x(3.0))[(0, 0)], 0.0);
        assert_eq!(m.jump_coeff(&x(3.0), &1.2)[0], 0.0);
        assert_eq!(m.marks().intensity(), 0.0);
    }

    #[test]
    fn identity_drift() {
        let m = builtin_linear(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(m.drift(&x(2.0))[0], 2.0);
        assert_eq!(m.diffusion(&x(2.0))[(0, 0)], 0.0);
    }

    #[test]
    fn centred_marks_have_zero_jump_mean() {
        let m = builtin_linear(0.5, 0.2, 0.1, 1.0).unwrap();
        for v in [-4.0, -0.3, 0.0, 2.0, 10.0] {
            assert_eq!(m.jump_mean(&x(v))[0], 0.0);
        }
    }

    #[test]
    fn negative_intensity_is_rejected() {
        assert!(builtin_linear(0.5, 0.2, 0.1, -1.0).is_err());
    }

    #[test]
    fn superlinear_polynomials() {
        let m = builtin_superlinear(0.25, 0.1, 1.0).unwrap();
        assert_eq!(m.drift(&x(0.0))[0], 0.0);
        assert_eq!(m.drift(&x(1.0))[0], 0.0);
        assert_eq!(m.drift(&x(2.0))[0], -6.0);
        assert_eq!(m.diffusion_col_jacobian(&x(1.0), 0)[(0, 0)], 0.5);
        assert_eq!(m.params().rho, 2.0);
    }

    #[test]
    fn superlinear_precondition_names_the_inequality() {
        let err = builtin_superlinear(1.0, 0.1, 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sigma0^2 * p0 <= 2 + sigma0^2"), "{msg}");
    }

    #[test]
    fn exact_solution_limits() {
        // Deterministic ODE limit.
        let v = exact_linear_terminal(0.7, 0.0, 0.3, 2.0, 1.5, 0.4, &[]);
        assert!((v - 2.0 * (0.7_f64 * 1.5).exp()).abs() < 1e-14);
        // A jump with c0·z = −1 kills the state.
        let v = exact_linear_terminal(0.0, 0.0, 0.5, 3.0, 1.0, 0.0, &[(0.3, -2.0)]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn builtin_spec_builds_and_delegates() {
        let spec: BuiltinSpec = serde_json::from_str(r#"{"name":"superlinear","sigma0":0.25}"#).unwrap();
        let m = spec.build().unwrap();
        assert_eq!(m.drift(&x(2.0))[0], -6.0);
        assert_eq!(m.marks().intensity(), 1.0);
        assert!(m.exact_state(&x(1.0), 1.0, &x(0.0), &[]).is_none());
    }

    // jump_mean against the empirical mean of γ(x, z) over 10⁵ marks, at
    // 1000 random states.
    #[test]
    fn jump_mean_matches_monte_carlo() {
        let models = [
            BuiltinModel::Linear(builtin_linear(0.5, 0.2, 0.1, 1.0).unwrap()),
            BuiltinModel::Superlinear(builtin_superlinear(0.25, 0.1, 1.0).unwrap()),
        ];
        for model in &models {
            let mut rng = derive_stream(21, 0, purpose::TEST_POINTS);
            let mut marks_rng = derive_stream(21, 1, purpose::TEST_POINTS);
            let marks: Vec<f64> = (0..100_000).map(|_| model.marks().sample(&mut marks_rng)).collect();
            let lambda = model.marks().intensity();
            for _ in 0..1000 {
                let xs = x(-5.0 + 10.0 * rng.uniform());
                let vals: Vec<f64> = marks.iter().map(|z| lambda * model.jump_coeff(&xs, z)[0]).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                let exact = model.jump_mean(&xs)[0];
                assert!((mean - exact).abs() <= 4.0 * se + 1e-300, "x={xs} mean={mean}");
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-8)
    }

    // Analytic Jacobians against central differences with step 1e-5.
    #[test]
    fn jacobians_match_central_differences() {
        let models = [
            BuiltinModel::Linear(builtin_linear(0.5, 0.2, 0.1, 1.0).unwrap()),
            BuiltinModel::Superlinear(builtin_superlinear(0.25, 0.1, 1.0).unwrap()),
        ];
        let h = 1e-5;
        for model in &models {
            let mut rng = derive_stream(22, 0, purpose::TEST_POINTS);
            for _ in 0..100 {
                let p = -5.0 + 10.0 * rng.uniform();
                let z = rng.standard_normal();
                let (lo, hi) = (x(p - h), x(p + h));
                let fd_b = (model.drift(&hi)[0] - model.drift(&lo)[0]) / (2.0 * h);
                let fd_s = (model.diffusion(&hi)[(0, 0)] - model.diffusion(&lo)[(0, 0)]) / (2.0 * h);
                let fd_g = (model.jump_coeff(&hi, &z)[0] - model.jump_coeff(&lo, &z)[0]) / (2.0 * h);
                let fd_gbar = (model.jump_mean(&hi)[0] - model.jump_mean(&lo)[0]) / (2.0 * h);
                let px = x(p);
                assert!(rel_err(model.drift_jacobian(&px)[(0, 0)], fd_b) < 1e-4);
                assert!(rel_err(model.diffusion_col_jacobian(&px, 0)[(0, 0)], fd_s) < 1e-4);
                assert!(rel_err(model.jump_jacobian(&px, &z)[(0, 0)], fd_g) < 1e-4);
                assert!((model.jump_mean_jacobian(&px)[(0, 0)] - fd_gbar).abs() < 1e-8);
            }
        }
    }
}
