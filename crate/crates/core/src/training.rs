//! Empirical and Monte Carlo risk, reverse-mode gradients through the
//! transformer, and projected first-order ERM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_sequence, DataSpec, PretrainSet, Prompt, Sequence};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::locpol::LocPolEstimator;
use crate::transformer::{embed, predict, ArchSpec, BlockParams, ForwardPlan, TransformerParams};

pub trait Predictor {
    fn predict(&self, prompt: &Prompt) -> Result<f64>;
}

impl Predictor for TransformerParams {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        predict(self, prompt)
    }
}

impl Predictor for ForwardPlan {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        ForwardPlan::predict(self, prompt)
    }
}

impl Predictor for LocPolEstimator {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        Ok(self.fit(prompt)?.estimate)
    }
}

/// Predicts the same value for every prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _: &Prompt) -> Result<f64> {
        Ok(self.0)
    }
}

/// Returns the regression function at the query, when the prompt carries it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        prompt.truth_at_query.ok_or_else(|| Error::InvalidSpec("prompt carries no regression value at the query".into()))
    }
}

pub struct FnPredictor<F>(pub F);

impl<F: Fn(&Prompt) -> Result<f64>> Predictor for FnPredictor<F> {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        (self.0)(prompt)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, prompt: &Prompt) -> Result<f64> {
        (**self).predict(prompt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub value: f64,
    pub stderr: f64,
    pub n_eval: usize,
    /// `value − σ²`, when the noise level is known.
    pub excess_over_sigma2: Option<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Jackknife standard error of the mean from leave-one-out means.
pub fn jackknife_stderr(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let total: f64 = values.iter().sum();
    let loo: Vec<f64> = values.iter().map(|v| (total - v) / (m - 1) as f64).collect();
    let centre = mean(&loo);
    let ss: f64 = loo.iter().map(|v| (v - centre) * (v - centre)).sum();
    libm::sqrt((m - 1) as f64 / m as f64 * ss)
}

pub fn empirical_risk<P: Predictor + ?Sized>(f: &P, set: &PretrainSet) -> Result<RiskReport> {
    if set.sequences.is_empty() {
        return Err(Error::InvalidSpec("empirical risk needs at least one sequence".into()));
    }
    let losses = set
        .sequences
        .iter()
        .map(|s| f.predict(&s.prompt).map(|p| (s.prompt.query_response - p) * (s.prompt.query_response - p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskReport { value: mean(&losses), stderr: 0.0, n_eval: losses.len(), excess_over_sigma2: None })
}

/// Fresh-task Monte Carlo estimate; task `i` is drawn from stream `(seed, i)`.
pub fn population_risk_mc<P: Predictor + ?Sized>(f: &P, spec: &DataSpec, n: usize, n_tasks: usize, seed: u64) -> Result<RiskReport> {
    if n_tasks < 2 {
        return Err(Error::InvalidSpec("Monte Carlo risk needs at least two tasks".into()));
    }
    let mut losses = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let s = sample_sequence(spec, n, seed, i as u64)?;
        let p = f.predict(&s.prompt)?;
        losses.push((s.prompt.query_response - p) * (s.prompt.query_response - p));
    }
    let value = mean(&losses);
    Ok(RiskReport {
        value,
        stderr: jackknife_stderr(&losses),
        n_eval: n_tasks,
        excess_over_sigma2: Some(value - spec.noise.variance()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskDecomposition {
    pub risk_erm: RiskReport,
    pub risk_tf: RiskReport,
    pub risk_locpol: RiskReport,
    pub noise_variance: f64,
    /// `R(f̂) − R(f_TF)`.
    pub gap_erm_tf: f64,
    /// `R(f_TF) − R(f_LocPol)`.
    pub gap_tf_locpol: f64,
    /// `R(f_LocPol) − σ²`.
    pub gap_locpol_noise: f64,
    pub total_excess: f64,
}

/// All three predictors see the same tasks and prompts.
pub fn risk_decomposition_report<A, B, C>(
    f_hat: &A,
    f_tf: &B,
    f_locpol: &C,
    spec: &DataSpec,
    n: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<RiskDecomposition>
where
    A: Predictor + ?Sized,
    B: Predictor + ?Sized,
    C: Predictor + ?Sized,
{
    if n_tasks < 2 {
        return Err(Error::InvalidSpec("Monte Carlo risk needs at least two tasks".into()));
    }
    let mut losses = [Vec::with_capacity(n_tasks), Vec::with_capacity(n_tasks), Vec::with_capacity(n_tasks)];
    for i in 0..n_tasks {
        let s = sample_sequence(spec, n, seed, i as u64)?;
        let y = s.prompt.query_response;
        let preds = [f_hat.predict(&s.prompt)?, f_tf.predict(&s.prompt)?, f_locpol.predict(&s.prompt)?];
        for (l, p) in losses.iter_mut().zip(preds) {
            l.push((y - p) * (y - p));
        }
    }
    let sigma2 = spec.noise.variance();
    let report = |l: &[f64]| {
        let value = mean(l);
        RiskReport { value, stderr: jackknife_stderr(l), n_eval: l.len(), excess_over_sigma2: Some(value - sigma2) }
    };
    let (r_hat, r_tf, r_lp) = (report(&losses[0]), report(&losses[1]), report(&losses[2]));
    Ok(RiskDecomposition {
        risk_erm: r_hat,
        risk_tf: r_tf,
        risk_locpol: r_lp,
        noise_variance: sigma2,
        gap_erm_tf: r_hat.value - r_tf.value,
        gap_tf_locpol: r_tf.value - r_lp.value,
        gap_locpol_noise: r_lp.value - sigma2,
        total_excess: r_hat.value - sigma2,
    })
}

/// Intermediate values of one block, kept for the backward pass.
struct BlockCache {
    input: Matrix,
    zq: Matrix,
    zk: Matrix,
    zv: Matrix,
    g: Matrix,
    attn: Matrix,
    hidden: Matrix,
}

fn forward_cached(params: &TransformerParams, z0: Matrix) -> (Vec<BlockCache>, Matrix) {
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut z = z0;
    for b in &params.blocks {
        let e = z.cols();
        let zq = z.matmul(&b.q);
        let zk = z.matmul(&b.k);
        let zv = z.matmul(&b.v);
        let mut g = Matrix::zeros(e, e);
        gemm(1.0, &zk, true, &zv, false, 0.0, &mut g);
        let mut attn = z.clone();
        gemm(1.0, &zq, false, &g, false, 1.0, &mut attn);
        let mut hidden = Matrix::zeros(z.rows(), b.w1.rows());
        gemm(1.0, &attn, false, &b.w1, true, 0.0, &mut hidden);
        for i in 0..hidden.rows() {
            for (h, bias) in hidden.row_mut(i).iter_mut().zip(&b.b1) {
                *h = (*h + bias).max(0.0);
            }
        }
        let mut out = attn.clone();
        gemm(1.0, &hidden, false, &b.w2, true, 1.0, &mut out);
        for i in 0..out.rows() {
            for (o, bias) in out.row_mut(i).iter_mut().zip(&b.b2) {
                *o += bias;
            }
        }
        caches.push(BlockCache { input: z, zq, zk, zv, g, attn, hidden });
        z = out;
    }
    (caches, z)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in s.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    s
}

/// Adds `scale · ∂loss/∂θ` for the squared query error of one sequence
/// into `grads` and returns the loss.
pub fn accumulate_gradient(params: &TransformerParams, seq: &Sequence, scale: f64, grads: &mut [BlockParams]) -> Result<f64> {
    let arch = &params.arch;
    let z0 = embed(&seq.prompt, arch.embed_dim)?;
    let (caches, out) = forward_cached(params, z0);
    let n = out.rows() - 1;
    let raw = out[(n, arch.input_dim)];
    let pred = raw.clamp(-arch.clamp, arch.clamp);
    let resid = pred - seq.prompt.query_response;
    let loss = resid * resid;
    // Subgradient of the clamp: 1 on [−M, M], 0 outside.
    if raw.abs() > arch.clamp {
        return Ok(loss);
    }
    let mut dz = Matrix::zeros(out.rows(), out.cols());
    dz[(n, arch.input_dim)] = 2.0 * resid * scale;

    for (l, (b, c)) in params.blocks.iter().zip(&caches).enumerate().rev() {
        let gb = &mut grads[l];
        // FFN.
        gemm(1.0, &dz, true, &c.hidden, false, 1.0, &mut gb.w2);
        for (a, v) in gb.b2.iter_mut().zip(column_sums(&dz)) {
            *a += v;
        }
        let mut dh = Matrix::zeros(dz.rows(), b.w1.rows());
        gemm(1.0, &dz, false, &b.w2, false, 0.0, &mut dh);
        for i in 0..dh.rows() {
            for (d, h) in dh.row_mut(i).iter_mut().zip(c.hidden.row(i)) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        gemm(1.0, &dh, true, &c.attn, false, 1.0, &mut gb.w1);
        for (a, v) in gb.b1.iter_mut().zip(column_sums(&dh)) {
            *a += v;
        }
        let mut da = dz;
        gemm(1.0, &dh, false, &b.w1, false, 1.0, &mut da);

        // Attention.
        let e = da.cols();
        let rows = da.rows();
        let mut dp = Matrix::zeros(rows, e);
        gemm(1.0, &da, false, &c.g, true, 0.0, &mut dp);
        let mut dg = Matrix::zeros(e, e);
        gemm(1.0, &c.zq, true, &da, false, 0.0, &mut dg);
        let mut dkz = Matrix::zeros(rows, e);
        gemm(1.0, &c.zv, false, &dg, true, 0.0, &mut dkz);
        let mut dvz = Matrix::zeros(rows, e);
        gemm(1.0, &c.zk, false, &dg, false, 0.0, &mut dvz);
        gemm(1.0, &c.input, true, &dp, false, 1.0, &mut gb.q);
        gemm(1.0, &c.input, true, &dkz, false, 1.0, &mut gb.k);
        gemm(1.0, &c.input, true, &dvz, false, 1.0, &mut gb.v);
        let mut dzi = da;
        gemm(1.0, &dp, false, &b.q, true, 1.0, &mut dzi);
        gemm(1.0, &dkz, false, &b.k, true, 1.0, &mut dzi);
        gemm(1.0, &dvz, false, &b.v, true, 1.0, &mut dzi);
        dz = dzi;
    }
    Ok(loss)
}

pub fn zero_gradients(arch: &ArchSpec) -> Vec<BlockParams> {
    (0..arch.depth).map(|_| BlockParams::zeros(arch.embed_dim, arch.ffn_width)).collect()
}

/// Mean squared query error over `seqs` and its gradient.
pub fn loss_and_gradient<S: Borrow<Sequence>>(params: &TransformerParams, seqs: &[S]) -> Result<(f64, Vec<BlockParams>)> {
    let mut grads = zero_gradients(&params.arch);
    let scale = 1.0 / seqs.len() as f64;
    let mut total = 0.0;
    for s in seqs {
        total += accumulate_gradient(params, s.borrow(), scale, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// Same loss as [`loss_and_gradient`] without the backward pass.
pub fn batch_loss<S: Borrow<Sequence>>(params: &TransformerParams, seqs: &[S]) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let s = s.borrow();
        let r = predict(params, &s.prompt)? - s.prompt.query_response;
        total += r * r;
    }
    Ok(total / seqs.len() as f64)
}

/// Relative error of the analytic gradient against central differences at
/// `coords = (block, tensor, index)`; returns `(analytic, numeric)` pairs.
pub fn finite_difference_check(
    params: &TransformerParams,
    seqs: &[Sequence],
    coords: &[(usize, usize, usize)],
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    let (_, grads) = loss_and_gradient(params, seqs)?;
    let mut out = Vec::with_capacity(coords.len());
    for &(b, t, i) in coords {
        let analytic = grads[b].tensors()[t][i];
        let mut plus = params.clone();
        plus.blocks[b].tensors_mut()[t][i] += step;
        let mut minus = params.clone();
        minus.blocks[b].tensors_mut()[t][i] -= step;
        let numeric = (batch_loss(&plus, seqs)? - batch_loss(&minus, seqs)?) / (2.0 * step);
        out.push((analytic, numeric));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainGradient,
    AdaptiveMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub step_size: f64,
    /// Step size at epoch `e` is `step_size / (1 + decay · e)`.
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub param_bound: f64,
    /// Stop once the epoch loss improves by less than this relative amount.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::AdaptiveMoment,
            step_size: 1e-3,
            decay: 0.0,
            batch_size: 32,
            max_epochs: 50,
            param_bound: 10.0,
            tolerance: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, gamma: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.decay >= 0.0) {
            return Err(Error::InvalidSpec("step size must be positive and decay nonnegative".into()));
        }
        if self.batch_size == 0 || self.batch_size > gamma {
            return Err(Error::InvalidSpec(format!("batch size {} outside 1..={gamma}", self.batch_size)));
        }
        if !(self.param_bound > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidSpec("parameter bound must be positive and tolerance nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Parameters with the lowest recorded empirical risk.
    pub params: TransformerParams,
    pub initial_loss: f64,
    /// Empirical risk after each epoch.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_EPOCHS: usize = 3;

/// Random entries uniform in `±scale`, then projected.
pub fn random_init(arch: ArchSpec, scale: f64, seed: u64) -> Result<TransformerParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TransformerParams::zeros(arch)?;
    for b in &mut params.blocks {
        for t in b.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
    params.project();
    Ok(params)
}

/// Minibatch ERM with entrywise projection onto `[−B, B]` after every update.
pub fn train_erm(init: TransformerParams, set: &PretrainSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(set.gamma())?;
    let clamp = init.arch.clamp;
    if let Some(s) = set.sequences.iter().find(|s| s.task.spec.bound != clamp) {
        return Err(Error::ClampMismatch { arch: clamp, data: s.task.spec.bound });
    }
    let mut params = init;
    params.arch.param_bound = cfg.param_bound;
    params.project();

    let initial_loss = batch_loss(&params, &set.sequences)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite("initial empirical risk"));
    }
    let mut best = params.clone();
    let mut best_loss = initial_loss;
    let mut best_epoch = 0;
    let mut losses = Vec::with_capacity(cfg.max_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.gamma()).collect();
    let mut m1 = zero_gradients(&params.arch);
    let mut m2 = zero_gradients(&params.arch);
    let mut t = 0i32;
    let mut blown = 0;
    let mut prev = initial_loss;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.step_size / (1.0 + cfg.decay * epoch as f64);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|i| &set.sequences[*i]));
            let (_, grads) = loss_and_gradient(&params, &batch)?;
            t += 1;
            let bias1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
            let bias2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
            for (l, g) in grads.iter().enumerate() {
                let p = params.blocks[l].tensors_mut();
                let a = m1[l].tensors_mut();
                let v = m2[l].tensors_mut();
                for (((p, a), v), g) in p.into_iter().zip(a).zip(v).zip(g.tensors()) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        match cfg.optimizer {
                            Optimizer::PlainGradient => p[i] -= lr * gi,
                            Optimizer::AdaptiveMoment => {
                                a[i] = ADAM_BETA1 * a[i] + (1.0 - ADAM_BETA1) * gi;
                                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                                p[i] -= lr * (a[i] / bias1) / (libm::sqrt(v[i] / bias2) + ADAM_EPS);
                            }
                        }
                    }
                }
            }
            params.project();
        }
        let loss = batch_loss(&params, &set.sequences)?;
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
            best_epoch = epoch + 1;
        }
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial_loss {
            blown += 1;
            if blown >= DIVERGENCE_EPOCHS || !loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, loss, initial: initial_loss });
            }
        } else {
            blown = 0;
        }
        if cfg.tolerance > 0.0 && (prev - loss).abs() <= cfg.tolerance * prev {
            break;
        }
        prev = loss;
    }
    Ok(TrainOutcome { params: best, initial_loss, losses, best_loss, best_epoch })
}
