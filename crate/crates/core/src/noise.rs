//! Per-path randomness: Poisson jumps, Brownian increments and Brownian
//! time-integrals ("areas") on the partition induced by the jumps.
//!
//! Every random quantity is drawn from an [`RngStream`] keyed by
//! `(master_seed, path_id, purpose)`, so a path's noise does not depend on
//! which worker simulates it or in which order.
//!
//! Within one step `[a, b]` carrying jumps `τ_1 < … < τ_J` the Brownian
//! path is represented piecewise on `a = s_0 < τ_1 < … < τ_J < s_{J+1} = b`.
//! For piece `i` of length `ℓ` we keep the increment `Δ_i = w(end) − w(start)`
//! and the local area `A_i = ∫_piece (w_s − w(start)) ds`. Given `Δ_i`, the
//! area is Gaussian with mean `ℓΔ_i/2` and variance `ℓ³/12` per component.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::model::MarkMeasure;
use crate::Vector;

/// Stream purposes. Distinct tags on the same path are independent.
pub mod purpose {
    pub const JUMPS: u8 = 1;
    pub const BROWNIAN: u8 = 2;
    pub const INITIAL: u8 = 3;
    pub const VALIDATION: u8 = 4;
    pub const TEST_POINTS: u8 = 5;
}

/// Counter-based random stream.
///
/// Backed by ChaCha8: the key is expanded from the master seed and the
/// 64-bit stream id packs `path_id` (56 bits) with the purpose tag, so the
/// output is a pure function of `(master_seed, path_id, purpose_tag, counter)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    core: ChaCha8Rng,
    master_seed: u64,
    path_id: u64,
    purpose_tag: u8,
}

pub const MAX_PATH_ID: u64 = (1 << 56) - 1;

/// Derive the stream for one `(path, purpose)` pair.
///
/// # Panics
///
/// If `path_id` exceeds [`MAX_PATH_ID`].
pub fn derive_stream(master_seed: u64, path_id: u64, purpose_tag: u8) -> RngStream {
    assert!(path_id <= MAX_PATH_ID, "path_id {path_id} exceeds 56 bits");
    let mut core = ChaCha8Rng::seed_from_u64(master_seed);
    core.set_stream((path_id << 8) | u64::from(purpose_tag));
    core.set_word_pos(0);
    RngStream {
        core,
        master_seed,
        path_id,
        purpose_tag,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    pub fn purpose_tag(&self) -> u8 {
        self.purpose_tag
    }

    /// Position in the stream, in 32-bit words consumed.
    pub fn counter(&self) -> u128 {
        self.core.get_word_pos()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.core.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.core)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.core.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.core.fill_bytes(dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent<Mk> {
    pub time: f64,
    pub mark: Mk,
}

/// Jumps of a Poisson random measure with mark law `marks` on `(a, b]`,
/// sorted by time.
///
/// The count is Poisson(λ(b − a)); times are i.i.d. uniform on `(a, b]`.
pub fn sample_poisson_jumps<Mk: Copy>(
    stream: &mut RngStream,
    marks: &MarkMeasure<Mk>,
    a: f64,
    b: f64,
) -> Vec<JumpEvent<Mk>> {
    assert!(b > a, "empty interval ({a}, {b}]");
    let mean = marks.intensity() * (b - a);
    if mean <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(mean).expect("finite positive Poisson mean").sample(stream) as usize;
    let mut times = draw_times(stream, count, a, b);
    // Ties have probability zero but would break the strict ordering that
    // the iterated jump sums rely on.
    while times.windows(2).any(|w| w[0] >= w[1]) {
        times = draw_times(stream, count, a, b);
    }
    times
        .into_iter()
        .map(|time| JumpEvent {
            time,
            mark: marks.sample(stream),
        })
        .collect()
}

fn draw_times(stream: &mut RngStream, count: usize, a: f64, b: f64) -> Vec<f64> {
    let mut times: Vec<f64> = (0..count).map(|_| b - stream.uniform() * (b - a)).collect();
    times.sort_by(f64::total_cmp);
    times
}

/// All randomness of one grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise<Mk> {
    a: f64,
    b: f64,
    m: usize,
    jumps: Vec<JumpEvent<Mk>>,
    // Flat piece-major storage, `m` entries per piece.
    increments: Vec<f64>,
    areas: Vec<f64>,
}

impl<Mk: Copy> StepNoise<Mk> {
    /// Assemble a step from explicit pieces. `increments[i]` and `areas[i]`
    /// belong to the piece ending at jump `i` (the last piece ends at `b`).
    pub fn from_parts(
        a: f64,
        b: f64,
        jumps: Vec<JumpEvent<Mk>>,
        increments: &[Vector],
        areas: &[Vector],
    ) -> Result<Self> {
        if !(b > a) {
            return Err(Error::Tiling(format!("step [{a}, {b}] is empty")));
        }
        if increments.len() != jumps.len() + 1 || areas.len() != jumps.len() + 1 {
            return Err(Error::Tiling(format!(
                "{} jumps need {} pieces, got {} increments and {} areas",
                jumps.len(),
                jumps.len() + 1,
                increments.len(),
                areas.len()
            )));
        }
        check_jump_order(a, b, &jumps)?;
        let m = increments[0].len();
        if increments.iter().chain(areas).any(|v| v.len() != m) {
            return Err(Error::Tiling("piece vectors differ in dimension".into()));
        }
        Ok(StepNoise {
            a,
            b,
            m,
            jumps,
            increments: increments.iter().flat_map(|v| v.iter().copied()).collect(),
            areas: areas.iter().flat_map(|v| v.iter().copied()).collect(),
        })
    }

    pub fn start(&self) -> f64 {
        self.a
    }

    pub fn end(&self) -> f64 {
        self.b
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn wiener_dim(&self) -> usize {
        self.m
    }

    pub fn jumps(&self) -> &[JumpEvent<Mk>] {
        &self.jumps
    }

    pub fn piece_count(&self) -> usize {
        self.jumps.len() + 1
    }

    pub fn piece_bounds(&self, i: usize) -> (f64, f64) {
        let start = if i == 0 { self.a } else { self.jumps[i - 1].time };
        let end = if i == self.jumps.len() {
            self.b
        } else {
            self.jumps[i].time
        };
        (start, end)
    }

    pub fn piece_len(&self, i: usize) -> f64 {
        let (s, e) = self.piece_bounds(i);
        e - s
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.m..(i + 1) * self.m]
    }

    pub fn area(&self, i: usize) -> &[f64] {
        &self.areas[i * self.m..(i + 1) * self.m]
    }

    /// `w_b − w_a`, summed over pieces left to right.
    pub fn total_increment(&self) -> Vector {
        let mut total = Vector::zeros(self.m);
        for i in 0..self.piece_count() {
            for (t, d) in total.iter_mut().zip(self.increment(i)) {
                *t += d;
            }
        }
        total
    }

    /// `∫_a^b (w_s − w_a) ds`, recombined from the local areas left to right.
    pub fn total_area(&self) -> Vector {
        let mut inc = Vector::zeros(self.m);
        let mut area = Vector::zeros(self.m);
        for i in 0..self.piece_count() {
            let len = self.piece_len(i);
            for c in 0..self.m {
                area[c] = area[c] + len * inc[c] + self.area(i)[c];
                inc[c] += self.increment(i)[c];
            }
        }
        area
    }

    /// `w_{τ_i} − w_a` for every jump, in jump order.
    pub fn wiener_at_jumps(&self) -> Vec<Vector> {
        let mut running = Vector::zeros(self.m);
        let mut out = Vec::with_capacity(self.jumps.len());
        for i in 0..self.jumps.len() {
            for (r, d) in running.iter_mut().zip(self.increment(i)) {
                *r += d;
            }
            out.push(running.clone());
        }
        out
    }
}

fn check_jump_order<Mk>(a: f64, b: f64, jumps: &[JumpEvent<Mk>]) -> Result<()> {
    let mut prev = a;
    for (i, j) in jumps.iter().enumerate() {
        let ok = if i == 0 { j.time > a } else { j.time > prev };
        if !ok || j.time > b {
            return Err(Error::Tiling(format!(
                "jump times must be strictly increasing inside ({a}, {b}]"
            )));
        }
        prev = j.time;
    }
    Ok(())
}

/// Brownian increments and conditional areas for every piece of `[a, b]`
/// split at `jumps` (which must be sorted inside `(a, b]`).
pub fn sample_step_noise<Mk: Copy>(
    stream: &mut RngStream,
    a: f64,
    b: f64,
    jumps: Vec<JumpEvent<Mk>>,
    m: usize,
) -> StepNoise<Mk> {
    debug_assert!(check_jump_order(a, b, &jumps).is_ok());
    let pieces = jumps.len() + 1;
    let mut increments = Vec::with_capacity(pieces * m);
    let mut areas = Vec::with_capacity(pieces * m);
    let mut start = a;
    for i in 0..pieces {
        let end = if i < jumps.len() { jumps[i].time } else { b };
        let len = end - start;
        let sd_inc = len.sqrt();
        let sd_area = (len * len * len / 12.0).sqrt();
        for _ in 0..m {
            let inc = sd_inc * stream.standard_normal();
            let area = 0.5 * len * inc + sd_area * stream.standard_normal();
            increments.push(inc);
            areas.push(area);
        }
        start = end;
    }
    StepNoise {
        a,
        b,
        m,
        jumps,
        increments,
        areas,
    }
}

/// Merge consecutive steps into one step over their union.
///
/// Pieces are joined wherever no jump separates them: increments add and
/// areas combine as `A₁ + ℓ₂Δ₁ + A₂`. Steps are merged in balanced pairwise
/// rounds, so coarsening `2^r` steps at once is bitwise identical to
/// coarsening pairs repeatedly.
pub fn coarsen<Mk: Copy>(fine: &[StepNoise<Mk>]) -> Result<StepNoise<Mk>> {
    if fine.is_empty() {
        return Err(Error::Tiling("nothing to coarsen".into()));
    }
    for w in fine.windows(2) {
        if w[0].b != w[1].a {
            return Err(Error::Tiling(format!(
                "step ending at {} is followed by a step starting at {}",
                w[0].b, w[1].a
            )));
        }
        if w[0].m != w[1].m {
            return Err(Error::Tiling("steps differ in Wiener dimension".into()));
        }
    }
    let mut level: Vec<StepNoise<Mk>> = fine.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(left) = it.next() {
            match it.next() {
                Some(right) => next.push(merge_pair(left, right)),
                None => next.push(left),
            }
        }
        level = next;
    }
    Ok(level.pop().expect("non-empty"))
}

fn merge_pair<Mk: Copy>(left: StepNoise<Mk>, right: StepNoise<Mk>) -> StepNoise<Mk> {
    let m = left.m;
    let len_right_first = right.piece_len(0);
    let last = left.piece_count() - 1;

    let mut increments = left.increments;
    let mut areas = left.areas;
    for c in 0..m {
        let d1 = increments[last * m + c];
        let a1 = areas[last * m + c];
        increments[last * m + c] = d1 + right.increments[c];
        areas[last * m + c] = a1 + len_right_first * d1 + right.areas[c];
    }
    increments.extend_from_slice(&right.increments[m..]);
    areas.extend_from_slice(&right.areas[m..]);

    let mut jumps = left.jumps;
    jumps.extend(right.jumps);
    StepNoise {
        a: left.a,
        b: right.b,
        m,
        jumps,
        increments,
        areas,
    }
}

/// Grid point `k·T/n`. Every grid in the crate is built from this formula.
pub fn grid_time(n: u64, horizon: f64, k: u64) -> f64 {
    horizon * k as f64 / n as f64
}

/// The complete noise of one path on a uniform grid of `n` steps over
/// `[0, horizon]`: jumps are drawn once on the whole horizon and routed to
/// the steps that contain them.
#[derive(Clone, Debug)]
pub struct PathNoise<Mk> {
    pub horizon: f64,
    pub jumps: Vec<JumpEvent<Mk>>,
    pub steps: Vec<StepNoise<Mk>>,
}

impl<Mk: Copy> PathNoise<Mk> {
    pub fn generate(marks: &MarkMeasure<Mk>, m: usize, horizon: f64, n: u64, master_seed: u64, path_id: u64) -> Self {
        assert!(n >= 1 && horizon > 0.0);
        let mut jump_stream = derive_stream(master_seed, path_id, purpose::JUMPS);
        let jumps = sample_poisson_jumps(&mut jump_stream, marks, 0.0, horizon);
        let mut bm = derive_stream(master_seed, path_id, purpose::BROWNIAN);

        let mut steps = Vec::with_capacity(n as usize);
        let mut next_jump = 0;
        for k in 0..n {
            let a = grid_time(n, horizon, k);
            let b = grid_time(n, horizon, k + 1);
            let from = next_jump;
            while next_jump < jumps.len() && (jumps[next_jump].time <= b || k + 1 == n) {
                next_jump += 1;
            }
            let local = jumps[from..next_jump].to_vec();
            steps.push(sample_step_noise(&mut bm, a, b, local, m));
        }
        PathNoise { horizon, jumps, steps }
    }

    pub fn resolution(&self) -> u64 {
        self.steps.len() as u64
    }

    /// The same path seen on a grid of `n` steps; `n` must divide the
    /// current resolution.
    pub fn coarsened(&self, n: u64) -> Result<Self> {
        let fine = self.resolution();
        if n == 0 || !fine.is_multiple_of(n) {
            return Err(Error::config(
                "n",
                format!("{n} does not divide the fine resolution {fine}"),
            ));
        }
        let ratio = (fine / n) as usize;
        let steps = self.steps.chunks(ratio).map(coarsen).collect::<Result<Vec<_>>>()?;
        Ok(PathNoise {
            horizon: self.horizon,
            jumps: self.jumps.clone(),
            steps,
        })
    }

    /// `w` at every grid point `0..=n`, accumulated left to right.
    pub fn wiener_on_grid(&self) -> Vec<Vector> {
        let m = self.steps.first().map_or(0, |s| s.wiener_dim());
        let mut w = Vector::zeros(m);
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(w.clone());
        for s in &self.steps {
            w += s.total_increment();
            out.push(w.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarkMeasure;

    fn normal_marks(intensity: f64) -> MarkMeasure<f64> {
        MarkMeasure::standard_normal(intensity).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn equal_arguments_give_identical_streams() {
        let mut s1 = derive_stream(7, 3, purpose::BROWNIAN);
        let mut s2 = derive_stream(7, 3, purpose::BROWNIAN);
        for _ in 0..1000 {
            assert_eq!(s1.next_u64(), s2.next_u64());
        }
        assert_eq!(s1.counter(), 2000);
    }

    #[test]
    fn neighbouring_paths_and_tags_differ() {
        let a: Vec<u64> = {
            let mut s = derive_stream(7, 3, purpose::BROWNIAN);
            (0..1000).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = derive_stream(7, 4, purpose::BROWNIAN);
            (0..1000).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = derive_stream(7, 3, purpose::JUMPS);
            (0..1000).map(|_| s.next_u64()).collect()
        };
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
        assert!(a.iter().zip(&c).all(|(x, y)| x != y));
    }

    #[test]
    fn uniform_mean_within_four_sigma() {
        let mut s = derive_stream(11, 0, 9);
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        let sigma = (1.0 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * sigma, "mean {mean}");
    }

    #[test]
    fn zero_intensity_has_no_jumps() {
        let mut s = derive_stream(1, 0, purpose::JUMPS);
        let marks = normal_marks(0.0);
        for _ in 0..100 {
            assert!(sample_poisson_jumps(&mut s, &marks, 0.0, 5.0).is_empty());
        }
    }

    #[test]
    fn poisson_count_mean_and_ordering() {
        let mut s = derive_stream(2, 0, purpose::JUMPS);
        let marks = normal_marks(2.0);
        let trials = 100_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let jumps = sample_poisson_jumps(&mut s, &marks, 0.5, 1.5);
            assert!(jumps.windows(2).all(|w| w[0].time < w[1].time));
            assert!(jumps.iter().all(|j| j.time > 0.5 && j.time <= 1.5));
            total += jumps.len();
        }
        let mean = total as f64 / trials as f64;
        let sigma = (2.0 / trials as f64).sqrt();
        assert!((mean - 2.0).abs() < 4.0 * sigma, "mean count {mean}");
    }

    #[test]
    fn jump_free_step_is_a_single_piece() {
        let mut s = derive_stream(3, 0, purpose::BROWNIAN);
        let noise = sample_step_noise::<f64>(&mut s, 0.0, 0.25, vec![], 2);
        assert_eq!(noise.piece_count(), 1);
        assert_eq!(noise.piece_len(0), 0.25);
        assert_eq!(noise.total_increment().as_slice(), noise.increment(0));
        assert_eq!(noise.total_area().as_slice(), noise.area(0));
    }

    #[test]
    fn total_increment_is_sum_of_pieces() {
        let mut s = derive_stream(3, 1, purpose::BROWNIAN);
        let jumps = vec![JumpEvent { time: 0.1, mark: 0.0 }, JumpEvent { time: 0.3, mark: 0.0 }];
        let noise = sample_step_noise(&mut s, 0.0, 0.5, jumps, 1);
        assert_eq!(noise.piece_count(), 3);
        let sum = noise.increment(0)[0] + noise.increment(1)[0] + noise.increment(2)[0];
        assert_eq!(noise.total_increment()[0], sum);
        let at = noise.wiener_at_jumps();
        assert_eq!(at[0][0], noise.increment(0)[0]);
        assert_eq!(at[1][0], noise.increment(0)[0] + noise.increment(1)[0]);
    }

    #[test]
    fn two_jump_free_halves_merge_exactly() {
        let l = 0.125;
        let d1 = v(&[0.3]);
        let a1 = v(&[0.02]);
        let d2 = v(&[-0.1]);
        let a2 = v(&[0.005]);
        let s1 =
            StepNoise::<f64>::from_parts(0.0, l, vec![], std::slice::from_ref(&d1), std::slice::from_ref(&a1)).unwrap();
        let s2 = StepNoise::<f64>::from_parts(l, 2.0 * l, vec![], std::slice::from_ref(&d2), std::slice::from_ref(&a2))
            .unwrap();
        let merged = coarsen(&[s1, s2]).unwrap();
        assert_eq!(merged.piece_count(), 1);
        assert_eq!(merged.increment(0)[0], d1[0] + d2[0]);
        assert_eq!(merged.area(0)[0], a1[0] + l * d1[0] + a2[0]);
    }

    #[test]
    fn coarsen_single_step_is_identity() {
        let mut s = derive_stream(4, 0, purpose::BROWNIAN);
        let jumps = vec![JumpEvent { time: 0.2, mark: 1.5 }];
        let step = sample_step_noise(&mut s, 0.0, 0.5, jumps, 2);
        assert_eq!(coarsen(std::slice::from_ref(&step)).unwrap(), step);
    }

    #[test]
    fn coarsen_rejects_gaps() {
        let s1 = StepNoise::<f64>::from_parts(0.0, 0.5, vec![], &[v(&[0.0])], &[v(&[0.0])]).unwrap();
        let s2 = StepNoise::<f64>::from_parts(0.6, 1.0, vec![], &[v(&[0.0])], &[v(&[0.0])]).unwrap();
        assert!(matches!(coarsen(&[s1, s2]), Err(Error::Tiling(_))));
        assert!(matches!(coarsen::<f64>(&[]), Err(Error::Tiling(_))));
    }

    #[test]
    fn coarsen_twice_equals_coarsen_once() {
        let marks = normal_marks(6.0);
        for path in 0..20 {
            let noise = PathNoise::generate(&marks, 2, 1.0, 16, 99, path);
            let once = noise.coarsened(4).unwrap();
            let twice = noise.coarsened(8).unwrap().coarsened(4).unwrap();
            assert_eq!(once.steps, twice.steps);
        }
    }

    #[test]
    fn coarsened_step_keeps_jumps_and_recombines_totals() {
        let marks = normal_marks(5.0);
        let noise = PathNoise::generate(&marks, 1, 2.0, 32, 5, 0);
        let coarse = noise.coarsened(1).unwrap();
        let step = &coarse.steps[0];
        assert_eq!(step.jumps(), &noise.jumps[..]);
        assert_eq!((step.start(), step.end()), (0.0, 2.0));
        // Total increment agrees with the fine path to rounding.
        let w = noise.wiener_on_grid();
        assert!((step.total_increment()[0] - w[32][0]).abs() < 1e-12);
        // ∫_0^T w ds = Σ_k [A_k + (t_{k+1} − t_k) w_{t_k}]
        let mut area = 0.0;
        for (k, s) in noise.steps.iter().enumerate() {
            area += s.total_area()[0] + s.len() * w[k][0];
        }
        assert!((step.total_area()[0] - area).abs() < 1e-12);
    }

    #[test]
    fn jumps_are_routed_to_their_steps() {
        let marks = normal_marks(20.0);
        let noise = PathNoise::generate(&marks, 1, 1.0, 10, 8, 1);
        let routed: usize = noise.steps.iter().map(|s| s.jumps().len()).sum();
        assert_eq!(routed, noise.jumps.len());
        for s in &noise.steps {
            for j in s.jumps() {
                assert!(j.time > s.start() && j.time <= s.end());
            }
        }
    }

    #[test]
    fn path_noise_is_reproducible() {
        let marks = normal_marks(3.0);
        let a = PathNoise::generate(&marks, 2, 1.0, 64, 1234, 17);
        let b = PathNoise::generate(&marks, 2, 1.0, 64, 1234, 17);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.jumps, b.jumps);
    }
}
