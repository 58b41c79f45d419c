//! Hölder-smooth regression tasks, covariate and noise laws, and prompt sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest absolute frequency used by the Fourier task family.
pub const MAX_FREQUENCY: i32 = 5;
/// Maximum number of shrink-and-recheck rounds in [`sample_task`].
pub const RESCALE_LIMIT: usize = 64;
/// Pairs compared by [`holder_check`] are at most this far apart.
pub const HOLDER_PAIR_RADIUS: f64 = 0.1;
const MAX_GRID_POINTS: usize = 1_000_000;

/// A seeded ChaCha stream; distinct `stream` values give independent sequences.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderSpec {
    pub dim: usize,
    pub smoothness: f64,
    pub bound: f64,
}

impl HolderSpec {
    pub fn new(dim: usize, smoothness: f64, bound: f64) -> Result<Self> {
        let spec = Self { dim, smoothness, bound };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::InvalidSpec(format!("smoothness {} must be positive", self.smoothness)));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::InvalidSpec(format!("bound {} must be positive", self.bound)));
        }
        Ok(())
    }

    /// Order of the derivatives whose Hölder quotient is controlled.
    pub fn derivative_order(&self) -> usize {
        (libm::ceil(self.smoothness) - 1.0) as usize
    }

    pub fn holder_exponent(&self) -> f64 {
        self.smoothness - self.derivative_order() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub frequency: Vec<i32>,
    pub amplitude: f64,
    pub phase: f64,
}

/// `x ↦ scale · Σ amplitude · cos(2π⟨frequency, x⟩ + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub spec: HolderSpec,
    pub terms: Vec<FourierTerm>,
    pub scale: f64,
}

/// A function on `[0,1]^d` with analytic partial derivatives.
pub trait SmoothFunction {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn partial(&self, x: &[f64], nu: &[usize]) -> f64;
}

impl RegressionTask {
    pub fn zero(spec: HolderSpec) -> Self {
        Self { spec, terms: Vec::new(), scale: 1.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.partial(x, &vec![0; self.spec.dim])
    }

    fn phase_at(term: &FourierTerm, x: &[f64]) -> f64 {
        let inner: f64 = term.frequency.iter().zip(x).map(|(w, xi)| *w as f64 * xi).sum();
        2.0 * PI * inner + term.phase
    }

    /// Sup-norm bound `Σ|a|` and Hölder-quotient bound of the unscaled series.
    fn analytic_bounds(&self) -> (f64, f64) {
        let sup: f64 = self.terms.iter().map(|t| t.amplitude.abs()).sum();
        let order = self.spec.derivative_order();
        let beta = self.spec.holder_exponent();
        let mut quotient: f64 = 0.0;
        for nu in multi_indices_of_degree(self.spec.dim, order) {
            let mut total = 0.0;
            for t in &self.terms {
                let mono: f64 = t.frequency.iter().zip(&nu).map(|(w, k)| libm::pow(*w as f64, *k as f64)).product();
                let coef = t.amplitude.abs() * libm::pow(2.0 * PI, order as f64) * mono.abs();
                let wnorm = libm::sqrt(t.frequency.iter().map(|w| (*w as f64) * (*w as f64)).sum());
                total += coef * libm::pow(2.0, 1.0 - beta) * libm::pow(2.0 * PI * wnorm, beta);
            }
            quotient = quotient.max(total);
        }
        (sup, quotient)
    }
}

impl SmoothFunction for RegressionTask {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }

    fn partial(&self, x: &[f64], nu: &[usize]) -> f64 {
        let order: usize = nu.iter().sum();
        let mut acc = 0.0;
        for t in &self.terms {
            let mono: f64 = t.frequency.iter().zip(nu).map(|(w, k)| libm::pow(*w as f64, *k as f64)).product();
            if mono == 0.0 {
                continue;
            }
            let c = t.amplitude * libm::pow(2.0 * PI, order as f64) * mono;
            acc += c * libm::cos(Self::phase_at(t, x) + order as f64 * PI / 2.0);
        }
        self.scale * acc
    }
}

/// All multi-indices of total degree exactly `degree` in `dim` variables,
/// lexicographically increasing.
pub fn multi_indices_of_degree(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; dim];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur[pos] = k;
            rec(pos + 1, left - k, cur, out);
        }
    }
    if dim == 0 {
        return out;
    }
    rec(0, degree, &mut cur, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub max_abs_value: f64,
    pub max_holder_quotient: f64,
}

/// Grid resolution per axis used when none is given: 512 points per axis,
/// reduced so the grid has at most 10⁶ points.
pub fn default_grid_resolution(dim: usize) -> usize {
    let mut r = 512usize;
    while r.saturating_pow(dim as u32) > MAX_GRID_POINTS {
        r -= 1;
    }
    r
}

/// Largest value and Hölder quotient of the order-`derivative_order`
/// partials over a regular grid.
///
/// Pairs are formed along the axis and diagonal directions at dyadic
/// multiples of the grid step, keeping only pairs closer than
/// [`HOLDER_PAIR_RADIUS`].
pub fn holder_check<F: SmoothFunction>(f: &F, spec: &HolderSpec, grid_resolution: usize) -> Result<HolderReport> {
    if grid_resolution < 2 {
        return Err(Error::InvalidSpec("grid resolution must be at least 2".into()));
    }
    let dim = f.dim();
    let total = grid_resolution.checked_pow(dim as u32).filter(|t| *t <= MAX_GRID_POINTS).ok_or_else(|| {
        Error::InvalidSpec(format!("grid {grid_resolution}^{dim} exceeds {MAX_GRID_POINTS} points"))
    })?;
    let step = 1.0 / (grid_resolution - 1) as f64;
    let beta = spec.holder_exponent();
    let nus = multi_indices_of_degree(dim, spec.derivative_order());
    let directions = stencil_directions(dim);

    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    let mut other = vec![0.0; dim];
    let mut max_abs: f64 = 0.0;
    let mut max_q: f64 = 0.0;
    for flat in 0..total {
        let mut rem = flat;
        for k in (0..dim).rev() {
            idx[k] = rem % grid_resolution;
            rem /= grid_resolution;
        }
        for k in 0..dim {
            point[k] = idx[k] as f64 * step;
        }
        max_abs = max_abs.max(f.value(&point).abs());
        for dir in &directions {
            let mut mult = 1usize;
            loop {
                let dist = step * mult as f64 * libm::sqrt(dir.iter().map(|v| (v * v) as f64).sum());
                if dist > HOLDER_PAIR_RADIUS {
                    break;
                }
                let mut inside = true;
                for k in 0..dim {
                    let j = idx[k] as i64 + dir[k] * mult as i64;
                    if j < 0 || j >= grid_resolution as i64 {
                        inside = false;
                        break;
                    }
                    other[k] = j as f64 * step;
                }
                if inside {
                    for nu in &nus {
                        let diff = (f.partial(&point, nu) - f.partial(&other, nu)).abs();
                        max_q = max_q.max(diff / libm::pow(dist, beta));
                    }
                }
                mult *= 2;
            }
        }
    }
    Ok(HolderReport { max_abs_value: max_abs, max_holder_quotient: max_q })
}

/// Nonzero vectors in {−1,0,1}^d whose first nonzero entry is positive.
fn stencil_directions(dim: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let count = 3usize.pow(dim as u32);
    for code in 0..count {
        let mut rem = code;
        let mut v = vec![0i64; dim];
        for slot in v.iter_mut() {
            *slot = (rem % 3) as i64 - 1;
            rem /= 3;
        }
        if let Some(first) = v.iter().find(|x| **x != 0) {
            if *first > 0 {
                out.push(v);
            }
        }
    }
    out
}

/// Draws a task from the Fourier family: `budget` terms with frequencies in
/// `{−5,…,5}^d`, amplitudes decaying like `(1+‖ω‖₂)^{−(α+1)}`, uniform phases,
/// rescaled so the analytic sup and Hölder bounds both equal the spec's bound.
///
/// The analytic bounds dominate every grid report, so the result passes
/// [`holder_check`] at any resolution without running it.
pub fn sample_task<R: Rng + ?Sized>(spec: &HolderSpec, budget: usize, rng: &mut R) -> Result<RegressionTask> {
    let mut task = draw_unscaled(spec, budget, rng)?;
    let (sup, quotient) = task.analytic_bounds();
    let worst = sup.max(quotient);
    if worst > 0.0 {
        task.scale = spec.bound / worst;
    }
    Ok(task)
}

fn draw_unscaled<R: Rng + ?Sized>(spec: &HolderSpec, budget: usize, rng: &mut R) -> Result<RegressionTask> {
    spec.validate()?;
    let mut terms = Vec::with_capacity(budget);
    for _ in 0..budget {
        let frequency: Vec<i32> = (0..spec.dim).map(|_| rng.random_range(-MAX_FREQUENCY..=MAX_FREQUENCY)).collect();
        let wnorm = libm::sqrt(frequency.iter().map(|w| (*w as f64) * (*w as f64)).sum());
        let decay = libm::pow(1.0 + wnorm, -(spec.smoothness + 1.0));
        let amplitude = (2.0 * rng.random::<f64>() - 1.0) * decay;
        let phase = 2.0 * PI * rng.random::<f64>();
        terms.push(FourierTerm { frequency, amplitude, phase });
    }
    Ok(RegressionTask { spec: *spec, terms, scale: 1.0 })
}

/// [`sample_task`] followed by grid verification, shrinking the scale by 1%
/// until the grid report is within bound.
pub fn sample_task_checked<R: Rng + ?Sized>(
    spec: &HolderSpec,
    budget: usize,
    grid_resolution: usize,
    rng: &mut R,
) -> Result<RegressionTask> {
    let mut task = draw_unscaled(spec, budget, rng)?;
    let (sup, quotient) = task.analytic_bounds();
    let worst = sup.max(quotient);
    if worst == 0.0 {
        return Ok(task);
    }
    task.scale = spec.bound / worst;
    let mut last = HolderReport { max_abs_value: 0.0, max_holder_quotient: 0.0 };
    for _ in 0..RESCALE_LIMIT {
        last = holder_check(&task, spec, grid_resolution)?;
        if last.max_abs_value <= spec.bound && last.max_holder_quotient <= spec.bound {
            return Ok(task);
        }
        task.scale *= 0.99;
    }
    Err(Error::RejectionLimit {
        limit: RESCALE_LIMIT,
        quotient: last.max_abs_value.max(last.max_holder_quotient),
        bound: spec.bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Uniform,
    /// Density proportional to `1 + x₁/2`.
    Tilted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub dim: usize,
    pub kind: DensityKind,
    pub lower: f64,
    pub upper: f64,
}

impl CovariateSpec {
    pub fn uniform(dim: usize) -> Self {
        Self { dim, kind: DensityKind::Uniform, lower: 1.0, upper: 1.0 }
    }

    pub fn tilted(dim: usize) -> Self {
        Self { dim, kind: DensityKind::Tilted, lower: 1.0 / 1.25, upper: 1.5 / 1.25 }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return 0.0;
        }
        match self.kind {
            DensityKind::Uniform => 1.0,
            DensityKind::Tilted => (1.0 + 0.5 * x[0]) / 1.25,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.dim).map(|_| rng.random::<f64>()).collect();
        if self.kind == DensityKind::Tilted {
            loop {
                let accept = (1.0 + 0.5 * x[0]) / 1.5;
                if rng.random::<f64>() < accept {
                    break;
                }
                x[0] = rng.random::<f64>();
            }
        }
        x
    }
}

/// Uniform noise on `[−half_width, half_width]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub half_width: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { half_width: 0.5 }
    }
}

impl NoiseSpec {
    pub fn new(half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width <= 1.0) {
            return Err(Error::InvalidSpec(format!("noise half-width {half_width} must lie in (0, 1]")));
        }
        Ok(Self { half_width })
    }

    pub fn variance(&self) -> f64 {
        self.half_width * self.half_width / 3.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.half_width * (2.0 * rng.random::<f64>() - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub query: Vec<f64>,
    /// Noisy response at the query, the target of the empirical risk.
    pub query_response: f64,
    pub truth_at_query: Option<f64>,
}

impl Prompt {
    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.xs.is_empty() || self.xs.len() != self.ys.len() {
            return Err(Error::Shape(format!("{} covariates for {} responses", self.xs.len(), self.ys.len())));
        }
        let d = self.query.len();
        if self.xs.iter().any(|x| x.len() != d) {
            return Err(Error::Shape("covariate dimensions disagree".into()));
        }
        let finite = self.xs.iter().flatten().chain(&self.ys).chain(&self.query).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("prompt"));
        }
        Ok(())
    }
}

pub fn sample_prompt<R: Rng + ?Sized>(
    task: &RegressionTask,
    cov: &CovariateSpec,
    noise: &NoiseSpec,
    n: usize,
    rng: &mut R,
) -> Result<Prompt> {
    if n == 0 {
        return Err(Error::InvalidSpec("prompt length must be at least 1".into()));
    }
    if cov.dim != task.spec.dim {
        return Err(Error::Shape(format!("covariate dim {} vs task dim {}", cov.dim, task.spec.dim)));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = cov.sample(rng);
        ys.push(task.eval(&x) + noise.sample(rng));
        xs.push(x);
    }
    let query = cov.sample(rng);
    let truth = task.eval(&query);
    let query_response = truth + noise.sample(rng);
    Ok(Prompt { xs, ys, query, query_response, truth_at_query: Some(truth) })
}

/// Everything needed to draw fresh tasks and prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub holder: HolderSpec,
    pub covariates: CovariateSpec,
    pub noise: NoiseSpec,
    /// Fourier terms per task; zero yields the zero function.
    pub terms: usize,
}

impl DataSpec {
    pub fn new(holder: HolderSpec, covariates: CovariateSpec, noise: NoiseSpec, terms: usize) -> Result<Self> {
        holder.validate()?;
        if covariates.dim != holder.dim {
            return Err(Error::Shape(format!("covariate dim {} vs task dim {}", covariates.dim, holder.dim)));
        }
        NoiseSpec::new(noise.half_width)?;
        Ok(Self { holder, covariates, noise, terms })
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(RegressionTask, Prompt)> {
        let task = sample_task(&self.holder, self.terms, rng)?;
        let prompt = sample_prompt(&task, &self.covariates, &self.noise, n, rng)?;
        Ok((task, prompt))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub task: RegressionTask,
    pub prompt: Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSet {
    pub seed: u64,
    pub sequences: Vec<Sequence>,
}

impl PretrainSet {
    pub fn gamma(&self) -> usize {
        self.sequences.len()
    }
}

/// Sequence `γ` is drawn from its own stream `(seed, γ)`, so tasks and
/// covariates of different sequences never share generator state.
pub fn sample_pretrain_set(spec: &DataSpec, n: usize, gamma: usize, seed: u64) -> Result<PretrainSet> {
    if gamma == 0 {
        return Err(Error::InvalidSpec("a pretraining set needs at least one sequence".into()));
    }
    let sequences = (0..gamma)
        .map(|g| sample_sequence(spec, n, seed, g as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainSet { seed, sequences })
}

pub fn sample_sequence(spec: &DataSpec, n: usize, seed: u64, index: u64) -> Result<Sequence> {
    let mut rng = stream_rng(seed, index);
    let (task, prompt) = spec.draw(n, &mut rng)?;
    Ok(Sequence { task, prompt })
}
