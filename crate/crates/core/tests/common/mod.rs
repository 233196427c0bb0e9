//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use tamed_milstein::model::SdeModel;
use tamed_milstein::noise::{derive_stream, JumpEvent, StepNoise};
use tamed_milstein::{Matrix, Vector};

/// Three-point Gauss–Hermite rule for a standard normal mark; exact for
/// polynomials of degree ≤ 5.
const GH: [(f64, f64); 3] = [
    (0.0, 2.0 / 3.0),
    (1.732_050_807_568_877_2, 1.0 / 6.0),
    (-1.732_050_807_568_877_2, 1.0 / 6.0),
];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Grid(usize),
    Jump(usize),
}

/// A Brownian path on a uniform grid of one step, with the jump times
/// inserted by Brownian-bridge sampling. `w` is relative to `w_a`.
#[derive(Clone, Debug)]
pub struct FinePath {
    pub a: f64,
    pub b: f64,
    times: Vec<f64>,
    w: Vec<Vector>,
    kind: Vec<Kind>,
    pub jumps: Vec<JumpEvent<f64>>,
}

impl FinePath {
    pub fn sample(a: f64, h: f64, m: usize, points: usize, jumps: &[(f64, f64)], seed: u64) -> Self {
        let mut s = derive_stream(seed, 0, 200);
        let b = a + h;
        let dt = h / points as f64;
        let mut times = vec![a];
        let mut w = vec![Vector::zeros(m)];
        for j in 1..=points {
            let prev = &w[j - 1];
            w.push(Vector::from_iterator(
                m,
                (0..m).map(|k| prev[k] + dt.sqrt() * s.standard_normal()),
            ));
            times.push(if j == points {
                b
            } else {
                a + h * j as f64 / points as f64
            });
        }
        let mut kind: Vec<Kind> = (0..=points).map(Kind::Grid).collect();
        let mut events = Vec::new();
        for (i, &(tau, z)) in jumps.iter().enumerate() {
            assert!(tau > a && tau < b);
            let j = times.partition_point(|&t| t < tau);
            assert!(times[j] != tau);
            let (t0, t1) = (times[j - 1], times[j]);
            let (w0, w1) = (w[j - 1].clone(), w[j].clone());
            let sd = ((tau - t0) * (t1 - tau) / (t1 - t0)).sqrt();
            let mid = Vector::from_iterator(
                m,
                (0..m).map(|k| w0[k] + (tau - t0) / (t1 - t0) * (w1[k] - w0[k]) + sd * s.standard_normal()),
            );
            times.insert(j, tau);
            w.insert(j, mid);
            kind.insert(j, Kind::Jump(i));
            events.push(JumpEvent { time: tau, mark: z });
        }
        FinePath {
            a,
            b,
            times,
            w,
            kind,
            jumps: events,
        }
    }

    /// Keep every `stride`-th grid point and all jump points.
    pub fn subsample(&self, stride: usize) -> FinePath {
        let keep: Vec<usize> = (0..self.times.len())
            .filter(|&i| match self.kind[i] {
                Kind::Grid(j) => j % stride == 0,
                Kind::Jump(_) => true,
            })
            .collect();
        FinePath {
            a: self.a,
            b: self.b,
            times: keep.iter().map(|&i| self.times[i]).collect(),
            w: keep.iter().map(|&i| self.w[i].clone()).collect(),
            kind: keep.iter().map(|&i| self.kind[i]).collect(),
            jumps: self.jumps.clone(),
        }
    }

    /// Frozen step noise: piece increments and trapezoid areas.
    pub fn step_noise(&self) -> StepNoise<f64> {
        let mut incs = Vec::new();
        let mut areas = Vec::new();
        let mut start = 0;
        let m = self.w[0].len();
        for i in 1..self.times.len() {
            let last = i == self.times.len() - 1;
            if matches!(self.kind[i], Kind::Jump(_)) || last {
                let w0 = &self.w[start];
                let mut area = Vector::zeros(m);
                for j in start..i {
                    area += (&self.w[j] + &self.w[j + 1] - w0 * 2.0) * (0.5 * (self.times[j + 1] - self.times[j]));
                }
                incs.push(&self.w[i] - w0);
                areas.push(area);
                start = i;
            }
        }
        StepNoise::from_parts(self.a, self.b, self.jumps.clone(), &incs, &areas).unwrap()
    }
}

fn dsigma<M: SdeModel>(model: &M, x: &Vector) -> Vec<Matrix> {
    (0..model.noise_dim())
        .map(|j| model.diffusion_col_jacobian(x, j))
        .collect()
}

/// `Σ_u vᵘ ∂σ/∂xᵘ` as a `d × m` matrix.
fn directional<M: SdeModel>(model: &M, js: &[Matrix], v: &Vector) -> Matrix {
    let d = model.dim();
    let mut out = Matrix::zeros(d, js.len());
    for (j, jac) in js.iter().enumerate() {
        out.set_column(j, &(jac * v));
    }
    out
}

fn nu_avg<T>(lambda: f64, f: impl Fn(f64) -> T) -> T
where
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let mut it = GH.iter().map(|&(z, w)| f(z) * (w * lambda));
    let first = it.next().unwrap();
    it.fold(first, |acc, v| acc + v)
}

/// One step of the scheme evaluated directly from its integral form:
/// left-point Itô sums of the interpolated diffusion on the path's points,
/// jump sums, and left Riemann sums for the compensators. Marks must be
/// standard normal.
pub fn oracle_step<M: SdeModel<Mark = f64>>(model: &M, n: u64, x: &Vector, path: &FinePath) -> Vector {
    let a = path.a;
    let h = path.b - path.a;
    let lambda = model.marks().intensity();
    let p = model.params();
    let f = 1.0 / (1.0 + x.norm().powf(4.0 * p.rho) / n as f64);
    let m = model.noise_dim();
    let sigma = model.diffusion(x);
    let js = dsigma(model, x);

    let l1: Vec<Matrix> = (0..m)
        .map(|k| directional(model, &js, &sigma.column(k).into_owned()))
        .collect();
    let l2 = |z: f64| directional(model, &js, &model.jump_coeff(x, &z));
    let l3 = |z: f64| {
        let g = model.jump_coeff(x, &z);
        model.diffusion(&(x + &g)) - &sigma - l2(z)
    };
    let g1 = |z: f64, k: usize| model.jump_jacobian(x, &z) * sigma.column(k);
    let g2 = |z: f64, z1: f64| model.jump_jacobian(x, &z) * model.jump_coeff(x, &z1);
    let g3 = |z: f64, z1: f64| {
        let shifted = x + model.jump_coeff(x, &z1);
        model.jump_coeff(&shifted, &z) - model.jump_coeff(x, &z) - g2(z, z1)
    };
    let l2_bar = nu_avg(lambda, l2);

    // σ⁽ⁿ⁾(s) and ∫γ⁽ⁿ⁾(s, z)ν(dz) at the left limit of point i.
    let sigma_n = |i: usize| -> Matrix {
        let s = path.times[i];
        let mut out = sigma.clone();
        for (k, l1k) in l1.iter().enumerate() {
            out += l1k * path.w[i][k];
        }
        for ev in path.jumps.iter().filter(|e| e.time < s) {
            out += l2(ev.mark) + l3(ev.mark);
        }
        out -= &l2_bar * (s - a);
        out * f
    };
    let gamma_n = |z: f64, s: f64, w: &Vector| -> Vector {
        let mut out = model.jump_coeff(x, &z);
        for k in 0..m {
            out += g1(z, k) * (f * w[k]);
        }
        for ev in path.jumps.iter().filter(|e| e.time < s) {
            out += g2(z, ev.mark) + g3(z, ev.mark);
        }
        out -= nu_avg(lambda, |z1| g2(z, z1)) * (s - a);
        out
    };

    let mut out = x + model.drift(x) * (f * h);
    for i in 0..path.times.len() - 1 {
        let dw = &path.w[i + 1] - &path.w[i];
        out += sigma_n(i) * dw;
        let (s, ds) = (path.times[i], path.times[i + 1] - path.times[i]);
        out -= nu_avg(lambda, |z| gamma_n(z, s, &path.w[i])) * ds;
    }
    for (i, ev) in path.jumps.iter().enumerate() {
        let idx = path.kind.iter().position(|k| *k == Kind::Jump(i)).unwrap();
        out += gamma_n(ev.mark, ev.time, &path.w[idx]);
    }
    out
}

/// `|oracle − step| / |step − x|`.
pub fn relative_error(oracle: &Vector, step: &Vector, x: &Vector) -> f64 {
    (oracle - step).norm() / (step - x).norm()
}

/// Kolmogorov–Smirnov statistic of `xs` against the standard normal.
pub fn ks_normal(mut xs: Vec<f64>) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    xs.sort_by(f64::total_cmp);
    let norm = Normal::new(0.0, 1.0).unwrap();
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = norm.cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 1e-3.
pub fn ks_critical_1e3(n: usize) -> f64 {
    1.949 / (n as f64).sqrt()
}

/// `count` sub-increments from steps on `[0, 1]` split by one random jump,
/// each divided by the square root of its piece length.
pub fn standardized_sub_increments(count: usize, seed: u64) -> Vec<f64> {
    use tamed_milstein::noise::sample_step_noise;
    let mut js = derive_stream(seed, 0, 9);
    let mut bs = derive_stream(seed, 0, 10);
    let mut z = Vec::with_capacity(count + 4);
    while z.len() < count {
        let t = 0.1 + 0.8 * js.uniform();
        let st = sample_step_noise(&mut bs, 0.0, 1.0, vec![JumpEvent { time: t, mark: 0.0 }], 2);
        for i in 0..st.piece_count() {
            for &d in st.increment(i) {
                z.push(d / st.piece_len(i).sqrt());
            }
        }
    }
    z.truncate(count);
    z
}

/// A moment check: `|estimate − expected| ≤ 4·sd`.
#[derive(Clone, Debug)]
pub struct MomentCheck {
    pub name: &'static str,
    pub estimate: f64,
    pub expected: f64,
    pub sd: f64,
}

impl MomentCheck {
    pub fn passes(&self) -> bool {
        (self.estimate - self.expected).abs() <= 4.0 * self.sd
    }
}

/// Uniform mean, Poisson count mean, sub-increment variance and the
/// conditional area law, each against its exact value.
pub fn sampler_moment_checks(seed: u64) -> Vec<MomentCheck> {
    use tamed_milstein::model::MarkMeasure;
    use tamed_milstein::noise::{sample_poisson_jumps, sample_step_noise};
    let mut out = Vec::new();

    let mut u = derive_stream(seed, 0, 20);
    let n = 1_000_000;
    let mean = (0..n).map(|_| u.uniform()).sum::<f64>() / n as f64;
    out.push(MomentCheck {
        name: "uniform mean",
        estimate: mean,
        expected: 0.5,
        sd: (1.0 / 12.0 / n as f64).sqrt(),
    });

    let marks = MarkMeasure::standard_normal(2.0).unwrap();
    let mut p = derive_stream(seed, 0, 21);
    let trials = 100_000;
    let total: usize = (0..trials)
        .map(|_| sample_poisson_jumps(&mut p, &marks, 0.0, 1.0).len())
        .sum();
    out.push(MomentCheck {
        name: "poisson count mean",
        estimate: total as f64 / trials as f64,
        expected: 2.0,
        sd: (2.0 / trials as f64).sqrt(),
    });

    let ell = 0.1;
    let mut b = derive_stream(seed, 0, 22);
    let draws = 100_000;
    let (mut inc_sq, mut r_sum, mut r_sq) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let st = sample_step_noise::<f64>(&mut b, 0.0, ell, vec![], 1);
        let (d, a) = (st.increment(0)[0], st.area(0)[0]);
        inc_sq += d * d;
        let r = a - ell * d / 2.0;
        r_sum += r;
        r_sq += r * r;
    }
    let nd = draws as f64;
    let area_var = ell.powi(3) / 12.0;
    out.push(MomentCheck {
        name: "sub-increment variance",
        estimate: inc_sq / nd,
        expected: ell,
        sd: ell * (2.0 / nd).sqrt(),
    });
    out.push(MomentCheck {
        name: "conditional area mean",
        estimate: r_sum / nd,
        expected: 0.0,
        sd: (area_var / nd).sqrt(),
    });
    out.push(MomentCheck {
        name: "conditional area variance",
        estimate: r_sq / nd,
        expected: area_var,
        sd: area_var * (2.0 / nd).sqrt(),
    });
    out
}
