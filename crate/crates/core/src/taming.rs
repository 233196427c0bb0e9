//! Tamed coefficient families.
//!
//! For resolution `n` every family that can grow super-linearly is divided
//! by `1 + n⁻¹|x|^{4ρ}`:
//!
//! | family | untamed numerator |
//! |---|---|
//! | `b⁽ⁿ⁾` | `b(x)` |
//! | `Λ₀⁽ⁿ⁾` | `σ(x)` |
//! | `Λ₁⁽ⁿ⁾ᵏ` | `Σᵤ σᵘᵏ ∂σ/∂xᵘ` |
//! | `Λ₂⁽ⁿ⁾(z)` | `Σᵤ γᵘ(x,z) ∂σ/∂xᵘ` |
//! | `Λ₃⁽ⁿ⁾(z)` | `σ(x+γ(x,z)) − σ(x) − Σᵤ γᵘ(x,z) ∂σ/∂xᵘ` |
//! | `Γ₁⁽ⁿ⁾ᵏ(z)` | `Σᵤ σᵘᵏ ∂γ(x,z)/∂xᵘ` |
//!
//! `Γ₂(z, z₁) = Σᵤ γᵘ(x,z₁) ∂γ(x,z)/∂xᵘ` and
//! `Γ₃(z, z₁) = γ(x+γ(x,z₁), z) − γ(x,z) − Γ₂` are left untamed.
//!
//! Every tamed value is computed as `untamed × factor`, so the two agree
//! bitwise with [`tame_factor`].

use std::cell::OnceCell;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::{Matrix, Vector};

/// `1 / (1 + n⁻¹|x|^{4ρ})`, evaluated as `1 / (1 + exp(4ρ ln|x| − ln n))`.
///
/// Saturates to exactly 0 when `|x|^{4ρ}/n` overflows and is exactly 1 at
/// the origin.
pub fn tame_factor(n: u64, rho: f64, x: &Vector) -> f64 {
    let growth = (4.0 * rho * x.norm().ln() - (n as f64).ln()).exp();
    1.0 / (1.0 + growth)
}

/// The tamed families of a model at a fixed resolution `n`.
///
/// [`untamed`](Self::untamed) builds the same families with the factor
/// forced to 1, which is what the classical Milstein baseline uses.
#[derive(Debug)]
pub struct TamedCoefficientSet<'m, M> {
    model: &'m M,
    n: Option<u64>,
}

impl<M> Clone for TamedCoefficientSet<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M> Copy for TamedCoefficientSet<'_, M> {}

impl<'m, M: SdeModel> TamedCoefficientSet<'m, M> {
    pub fn new(model: &'m M, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("n", "resolution must be at least 1"));
        }
        Ok(TamedCoefficientSet { model, n: Some(n) })
    }

    pub fn untamed(model: &'m M) -> Self {
        TamedCoefficientSet { model, n: None }
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    pub fn resolution(&self) -> Option<u64> {
        self.n
    }

    pub fn factor(&self, x: &Vector) -> f64 {
        match self.n {
            Some(n) => tame_factor(n, self.model.params().rho, x),
            None => 1.0,
        }
    }

    /// Freeze the state: coefficients at `x` are evaluated at most once.
    pub fn at(&self, x: &Vector) -> TamedFrame<'m, M> {
        TamedFrame {
            model: self.model,
            factor: self.factor(x),
            x: x.clone(),
            drift: OnceCell::new(),
            sigma: OnceCell::new(),
            dsigma: OnceCell::new(),
            jump_mean: OnceCell::new(),
            jump_mean_jac: OnceCell::new(),
        }
    }

    pub fn tamed_drift(&self, x: &Vector) -> Vector {
        self.at(x).tamed_drift()
    }

    /// `(Λ₀, Λ₁ᵏ, Λ₂(z), Λ₃(z))`; the mark-dependent pair is `None`
    /// without a mark.
    pub fn lambda_family(&self, x: &Vector, k: usize, z: Option<&M::Mark>) -> LambdaFamily {
        let f = self.at(x);
        LambdaFamily {
            lambda0: f.lambda0(),
            lambda1: f.lambda1(k),
            lambda2: z.map(|z| f.lambda2(z)),
            lambda3: z.map(|z| f.lambda3(z)),
        }
    }

    /// `(Γ₁ᵏ(z), Γ₂(z, z₁), Γ₃(z, z₁))`.
    pub fn gamma_family(&self, x: &Vector, z: &M::Mark, z1: Option<&M::Mark>, k: usize) -> GammaFamily {
        let f = self.at(x);
        GammaFamily {
            gamma1: f.gamma1(z, k),
            gamma2: z1.map(|z1| f.gamma2(z, z1)),
            gamma3: z1.map(|z1| f.gamma3(z, z1)),
        }
    }

    /// Domination of every tamed family by its untamed numerator, in both
    /// forms implied by `factor ≤ 1` and `factor ≤ n/|x|^{4ρ}`.
    pub fn check_growth_bounds(&self, xs: &[Vector], marks: &[M::Mark]) -> Result<BoundReport> {
        if xs.is_empty() {
            return Err(Error::config("xs", "need at least one point"));
        }
        let n = self.n.unwrap_or(u64::MAX) as f64;
        let rho = self.model.params().rho;
        let mut families: Vec<FamilyBound> = Vec::new();
        let mut record = |name: String, tamed: f64, untamed: f64, x: &Vector| {
            let entry = match families.iter_mut().find(|f| f.family == name) {
                Some(e) => e,
                None => {
                    families.push(FamilyBound::new(name));
                    families.last_mut().expect("just pushed")
                }
            };
            entry.update(tamed, untamed, x, n, rho);
        };

        for x in xs {
            let f = self.at(x);
            let b = f.drift().clone();
            record("b".into(), (&b * f.factor).norm(), b.norm(), x);
            let s = f.sigma().clone();
            record("lambda0".into(), (&s * f.factor).norm(), s.norm(), x);
            for k in 0..self.model.noise_dim() {
                let l1 = f.lambda1_untamed(k);
                record(format!("lambda1[{k}]"), (&l1 * f.factor).norm(), l1.norm(), x);
            }
            for z in marks {
                let g = self.model.jump_coeff(x, z);
                let l2 = f.lambda2_untamed(&g);
                let l3 = self.model.diffusion(&(x + &g)) - f.sigma() - &l2;
                record("lambda2".into(), (&l2 * f.factor).norm(), l2.norm(), x);
                record("lambda3".into(), (&l3 * f.factor).norm(), l3.norm(), x);
                for k in 0..self.model.noise_dim() {
                    let g1 = f.gamma1_untamed(z, k);
                    record(format!("gamma1[{k}]"), (&g1 * f.factor).norm(), g1.norm(), x);
                }
            }
        }
        Ok(BoundReport { families })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaFamily {
    pub lambda0: Matrix,
    pub lambda1: Matrix,
    pub lambda2: Option<Matrix>,
    pub lambda3: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaFamily {
    pub gamma1: Vector,
    pub gamma2: Option<Vector>,
    pub gamma3: Option<Vector>,
}

/// Largest ratios `|tamed|/|untamed|` and `|tamed|·|x|^{4ρ}/(n|untamed|)`
/// seen for one family. Both must stay ≤ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyBound {
    pub family: String,
    pub max_plain_ratio: f64,
    pub max_resolution_ratio: f64,
    pub worst: Option<Vector>,
    pub points: usize,
}

/// Rounding allowance on the ratio tests.
const RATIO_SLACK: f64 = 1e-12;

impl FamilyBound {
    fn new(family: String) -> Self {
        FamilyBound {
            family,
            max_plain_ratio: 0.0,
            max_resolution_ratio: 0.0,
            worst: None,
            points: 0,
        }
    }

    fn update(&mut self, tamed: f64, untamed: f64, x: &Vector, n: f64, rho: f64) {
        self.points += 1;
        if untamed == 0.0 {
            if tamed != 0.0 {
                self.max_plain_ratio = f64::INFINITY;
                self.worst = Some(x.clone());
            }
            return;
        }
        let plain = tamed / untamed;
        // Vacuous at the origin.
        let resolution = if x.norm() == 0.0 {
            0.0
        } else {
            plain * (4.0 * rho * x.norm().ln() - n.ln()).exp()
        };
        if plain > self.max_plain_ratio || resolution > self.max_resolution_ratio {
            self.worst = Some(x.clone());
        }
        self.max_plain_ratio = self.max_plain_ratio.max(plain);
        self.max_resolution_ratio = self.max_resolution_ratio.max(resolution);
    }

    pub fn holds(&self) -> bool {
        self.max_plain_ratio <= 1.0 + RATIO_SLACK && self.max_resolution_ratio <= 1.0 + RATIO_SLACK
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub families: Vec<FamilyBound>,
}

impl BoundReport {
    pub fn all_hold(&self) -> bool {
        self.families.iter().all(FamilyBound::holds)
    }
}

/// Coefficients of a model frozen at one state, with the tame factor of
/// that state. Values are computed on first use and cached.
pub struct TamedFrame<'m, M: SdeModel> {
    model: &'m M,
    factor: f64,
    x: Vector,
    drift: OnceCell<Vector>,
    sigma: OnceCell<Matrix>,
    dsigma: OnceCell<Vec<Matrix>>,
    jump_mean: OnceCell<Vector>,
    jump_mean_jac: OnceCell<Matrix>,
}

impl<'m, M: SdeModel> TamedFrame<'m, M> {
    pub fn state(&self) -> &Vector {
        &self.x
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn drift(&self) -> &Vector {
        self.drift.get_or_init(|| self.model.drift(&self.x))
    }

    pub fn sigma(&self) -> &Matrix {
        self.sigma.get_or_init(|| self.model.diffusion(&self.x))
    }

    /// Jacobians of the diffusion columns, `dsigma()[j]` for column `j`.
    pub fn dsigma(&self) -> &[Matrix] {
        self.dsigma.get_or_init(|| {
            (0..self.model.noise_dim())
                .map(|j| self.model.diffusion_col_jacobian(&self.x, j))
                .collect()
        })
    }

    pub fn jump_mean(&self) -> &Vector {
        self.jump_mean.get_or_init(|| self.model.jump_mean(&self.x))
    }

    pub fn jump_mean_jacobian(&self) -> &Matrix {
        self.jump_mean_jac
            .get_or_init(|| self.model.jump_mean_jacobian(&self.x))
    }

    pub fn jump(&self, z: &M::Mark) -> Vector {
        self.model.jump_coeff(&self.x, z)
    }

    pub fn tamed_drift(&self) -> Vector {
        self.drift() * self.factor
    }

    pub fn lambda0(&self) -> Matrix {
        self.sigma() * self.factor
    }

    /// `Σᵤ vᵘ ∂σ/∂xᵘ` as a `d × m` matrix: column `j` is `Δσʲ · v`.
    pub fn directional_dsigma(&self, v: &Vector) -> Matrix {
        let d = self.x.len();
        let ds = self.dsigma();
        let mut out = Matrix::zeros(d, ds.len());
        for (j, dj) in ds.iter().enumerate() {
            out.set_column(j, &(dj * v));
        }
        out
    }

    pub fn lambda1_untamed(&self, k: usize) -> Matrix {
        let col = self.sigma().column(k).clone_owned();
        self.directional_dsigma(&col)
    }

    pub fn lambda1(&self, k: usize) -> Matrix {
        self.lambda1_untamed(k) * self.factor
    }

    pub fn lambda2_untamed(&self, gamma: &Vector) -> Matrix {
        self.directional_dsigma(gamma)
    }

    pub fn lambda2(&self, z: &M::Mark) -> Matrix {
        self.lambda2_untamed(&self.jump(z)) * self.factor
    }

    pub fn lambda3(&self, z: &M::Mark) -> Matrix {
        let g = self.jump(z);
        let untamed = self.model.diffusion(&(&self.x + &g)) - self.sigma() - self.lambda2_untamed(&g);
        untamed * self.factor
    }

    pub fn gamma1_untamed(&self, z: &M::Mark, k: usize) -> Vector {
        self.model.jump_jacobian(&self.x, z) * self.sigma().column(k)
    }

    pub fn gamma1(&self, z: &M::Mark, k: usize) -> Vector {
        self.gamma1_untamed(z, k) * self.factor
    }

    pub fn gamma2(&self, z: &M::Mark, z1: &M::Mark) -> Vector {
        self.model.jump_jacobian(&self.x, z) * self.jump(z1)
    }

    pub fn gamma3(&self, z: &M::Mark, z1: &M::Mark) -> Vector {
        let shifted = &self.x + self.jump(z1);
        self.model.jump_coeff(&shifted, z) - self.jump(z) - self.gamma2(z, z1)
    }

    // ν-averages. All are exact given the model's closed-form γ̄ and Δγ̄.

    /// `Λ̄₂⁽ⁿ⁾ = ∫ Λ₂⁽ⁿ⁾(z) ν(dz)`.
    pub fn lambda2_bar(&self) -> Matrix {
        self.lambda2_untamed(self.jump_mean()) * self.factor
    }

    /// `Γ̄₁⁽ⁿ⁾ᵏ = ∫ Γ₁⁽ⁿ⁾ᵏ(z) ν(dz)`.
    pub fn gamma1_bar(&self, k: usize) -> Vector {
        (self.jump_mean_jacobian() * self.sigma().column(k)) * self.factor
    }

    /// `∫ Γ₂(z, z₁) ν(dz)`, averaging the outer mark.
    pub fn gamma2_outer_bar(&self, z1: &M::Mark) -> Vector {
        self.jump_mean_jacobian() * self.jump(z1)
    }

    /// `∫ Γ₂(z, z₁) ν(dz₁)`, averaging the inner mark.
    pub fn gamma2_inner_bar(&self, z: &M::Mark) -> Vector {
        self.model.jump_jacobian(&self.x, z) * self.jump_mean()
    }

    /// `∫∫ Γ₂(z, z₁) ν(dz₁) ν(dz)`.
    pub fn gamma2_bar_bar(&self) -> Vector {
        self.jump_mean_jacobian() * self.jump_mean()
    }

    /// `∫ Γ₃(z, z₁) ν(dz)`.
    pub fn gamma3_outer_bar(&self, z1: &M::Mark) -> Vector {
        let shifted = &self.x + self.jump(z1);
        self.model.jump_mean(&shifted) - self.jump_mean() - self.gamma2_outer_bar(z1)
    }
}
