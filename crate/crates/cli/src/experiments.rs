//! Rate curves, construction-versus-estimator comparison, covering tables
//! and ERM runs.

use icreg_core::construction::{build_locpol_transformer, ConstructionConfig, LocPolTransformer};
use icreg_core::datagen::{sample_pretrain_set, sample_sequence, DataSpec};
use icreg_core::linalg::{median, quantile};
use icreg_core::locpol::{binomial, default_degree, LocPolEstimator};
use icreg_core::training::{
    jackknife_stderr, population_risk_mc, random_init, train_erm, ConstantPredictor, RiskReport, TrainConfig,
    TrainOutcome,
};
use icreg_core::transformer::{covering_log_bound, generalization_tail, ArchSpec, ForwardPlan, TransformerParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CompareConfig, ConstructionOverrides, CoveringConfig, ExperimentConfig, InitKind, TrainSection};
use crate::error::{CliError, CliResult};
use crate::stats::{loglog_slope, mean, SlopeFit};

/// Independent seed for a named purpose (splitmix64 of `seed + purpose`).
pub fn derived_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed.wrapping_add(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CALIBRATION_PURPOSE: u64 = 1;
const EVALUATION_PURPOSE: u64 = 2;
const TRAINING_PURPOSE: u64 = 3;

pub const RATE_COLUMNS: [&str; 12] = [
    "n",
    "bandwidth",
    "tasks",
    "seed",
    "risk",
    "risk_stderr",
    "excess",
    "excess_stderr",
    "lambda_event_freq",
    "degenerate_freq",
    "tf_excess",
    "tf_excess_stderr",
];

/// One grid point of a rate curve. `excess` is the mean of
/// `(f(prompt) − m(query))²`, whose expectation is `R(f) − σ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub bandwidth: f64,
    pub tasks: usize,
    pub seed: u64,
    pub risk: f64,
    pub risk_stderr: f64,
    pub excess: f64,
    pub excess_stderr: f64,
    pub lambda_event_freq: f64,
    pub degenerate_freq: f64,
    pub tf_excess: Option<f64>,
    pub tf_excess_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub seed: u64,
    pub rows: Vec<RateRow>,
    pub slope: Option<SlopeFit>,
    pub tf_slope: Option<SlopeFit>,
    /// `−2α/(2α+d)`.
    pub target_slope: f64,
    pub noise_variance: f64,
}

pub fn target_slope(spec: &DataSpec) -> f64 {
    let a = spec.holder.smoothness;
    -2.0 * a / (2.0 * a + spec.holder.dim as f64)
}

struct TaskOutcome {
    risk: f64,
    excess: f64,
    lambda_min: f64,
    degenerate: bool,
    tf_excess: Option<f64>,
}

/// One rate-curve point. Task `i` uses stream `(seed, i)` at every `n`, so
/// neighbouring grid points share tasks.
pub fn rate_point(
    spec: &DataSpec,
    n: usize,
    tasks: usize,
    seed: u64,
    lambda_threshold: f64,
    transformer: Option<&ForwardPlan>,
) -> CliResult<RateRow> {
    let est = LocPolEstimator::paper_default(n, spec.holder.dim, spec.holder.smoothness, spec.holder.bound)?;
    let outcomes = (0..tasks)
        .into_par_iter()
        .map(|i| -> CliResult<TaskOutcome> {
            let s = sample_sequence(spec, n, seed, i as u64)?;
            let truth = s.prompt.truth_at_query.unwrap_or_else(|| s.task.eval(&s.prompt.query));
            let fit = est.fit(&s.prompt)?;
            let tf_excess = match transformer {
                Some(plan) => Some((plan.predict(&s.prompt)? - truth).powi(2)),
                None => None,
            };
            Ok(TaskOutcome {
                risk: (fit.estimate - s.prompt.query_response).powi(2),
                excess: (fit.estimate - truth).powi(2),
                lambda_min: fit.lambda_min,
                degenerate: fit.solved_by == icreg_core::locpol::SolvePath::DegenerateFallback,
                tf_excess,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let risks: Vec<f64> = outcomes.iter().map(|o| o.risk).collect();
    let excess: Vec<f64> = outcomes.iter().map(|o| o.excess).collect();
    let tf: Option<Vec<f64>> = outcomes.iter().map(|o| o.tf_excess).collect();
    let k = tasks as f64;
    Ok(RateRow {
        n,
        bandwidth: est.kernel.bandwidth,
        tasks,
        seed,
        risk: mean(&risks),
        risk_stderr: jackknife_stderr(&risks),
        excess: mean(&excess),
        excess_stderr: jackknife_stderr(&excess),
        lambda_event_freq: outcomes.iter().filter(|o| o.lambda_min >= lambda_threshold).count() as f64 / k,
        degenerate_freq: outcomes.iter().filter(|o| o.degenerate).count() as f64 / k,
        tf_excess: tf.as_ref().map(|v| mean(v)),
        tf_excess_stderr: tf.as_ref().map(|v| jackknife_stderr(v)),
    })
}

pub fn fit_rate_slopes(rows: &[RateRow]) -> (Option<SlopeFit>, Option<SlopeFit>) {
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ex: Vec<f64> = rows.iter().map(|r| r.excess).collect();
    let tf: Option<Vec<f64>> = rows.iter().map(|r| r.tf_excess).collect();
    (loglog_slope(&ns, &ex), tf.and_then(|t| loglog_slope(&ns, &t)))
}

/// Runs every grid point not already in `done`, handing each new row to
/// `sink` before starting the next one.
pub fn run_rate_experiment(
    cfg: &ExperimentConfig,
    done: Vec<RateRow>,
    mut sink: impl FnMut(&RateRow) -> CliResult<()>,
) -> CliResult<RateResult> {
    let spec = cfg.data.data_spec()?;
    let r = &cfg.rates;
    if r.n_grid.len() < 4 || r.tasks < 100 {
        eprintln!("warning: rate fits want at least 4 grid points with 100 tasks each");
    }
    let mut rows = Vec::with_capacity(r.n_grid.len());
    for &n in &r.n_grid {
        if let Some(row) = done.iter().find(|row| row.n == n && row.tasks == r.tasks && row.seed == cfg.seed) {
            rows.push(row.clone());
            continue;
        }
        let built = if r.include_transformer {
            Some(build_construction(&spec, n, cfg.seed, &ConstructionOverrides::default())?)
        } else {
            None
        };
        let plan = built.as_ref().map(|b| ForwardPlan::new(&b.params));
        let row = rate_point(&spec, n, r.tasks, cfg.seed, r.lambda_threshold, plan.as_ref())?;
        sink(&row)?;
        rows.push(row);
    }
    let (slope, tf_slope) = fit_rate_slopes(&rows);
    Ok(RateResult { seed: cfg.seed, rows, slope, tf_slope, target_slope: target_slope(&spec), noise_variance: spec.noise.variance() })
}

/// Calibrated construction for prompts of length `n`, with overrides applied.
pub fn build_construction(spec: &DataSpec, n: usize, seed: u64, overrides: &ConstructionOverrides) -> CliResult<LocPolTransformer> {
    let mut cfg = ConstructionConfig::calibrated(spec, n, spec.holder.bound, derived_seed(seed, CALIBRATION_PURPOSE))?;
    if let Some(t) = overrides.steps {
        cfg.steps = t;
    }
    if let Some(m) = overrides.depth_multiplier {
        cfg.depth_multiplier = m;
    }
    if let Some(eta) = overrides.step_size {
        cfg.step_size = eta;
    }
    let xi = cfg.basis_error();
    if !(xi <= 1.0) {
        return Err(CliError::Infeasible(format!(
            "basis error bound {xi:.3e} exceeds 1 at depth multiplier {}; raise depth_multiplier",
            cfg.depth_multiplier
        )));
    }
    Ok(build_locpol_transformer(&cfg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub index: usize,
    pub lambda_min: f64,
    pub degenerate: bool,
    pub transformer: f64,
    pub locpol: f64,
    pub truth: f64,
    pub response: f64,
    pub abs_gap: f64,
}

pub const COMPARISON_COLUMNS: [&str; 8] =
    ["index", "lambda_min", "degenerate", "transformer", "locpol", "truth", "response", "abs_gap"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub seed: u64,
    pub n: usize,
    pub steps: usize,
    pub step_size: f64,
    pub depth_multiplier: usize,
    pub basis_error: f64,
    pub lambda_threshold: f64,
    pub draws: usize,
    pub nondegenerate: usize,
    pub degenerate: usize,
    pub degenerate_fraction: f64,
    /// Over non-degenerate prompts; absent when there are none.
    pub median_gap: Option<f64>,
    pub q95_gap: Option<f64>,
    pub max_gap: Option<f64>,
    /// Over every drawn prompt, for diagnosis.
    pub median_gap_all: f64,
    pub q95_gap_all: f64,
    /// Mean of `(f_TF − Y)² − (f_LocPol − Y)²` over every drawn prompt.
    pub risk_gap: f64,
    pub risk_gap_stderr: f64,
}

/// Draws prompts in batches until `prompts` non-degenerate ones are found
/// or `max_prompts` have been drawn.
pub fn run_construction_comparison(
    spec: &DataSpec,
    cmp: &CompareConfig,
    seed: u64,
) -> CliResult<(ComparisonResult, Vec<ComparisonRow>)> {
    let built = build_construction(spec, cmp.n, seed, &cmp.overrides)?;
    let plan = ForwardPlan::new(&built.params);
    compare_with_plan(spec, cmp, seed, &built.config, &plan)
}

pub fn compare_with_plan(
    spec: &DataSpec,
    cmp: &CompareConfig,
    seed: u64,
    config: &ConstructionConfig,
    plan: &ForwardPlan,
) -> CliResult<(ComparisonResult, Vec<ComparisonRow>)> {
    let est = LocPolEstimator::paper_default(cmp.n, spec.holder.dim, spec.holder.smoothness, spec.holder.bound)?;
    let mut rows: Vec<ComparisonRow> = Vec::new();
    let mut found = 0;
    const BATCH: usize = 32;
    while found < cmp.prompts && rows.len() < cmp.max_prompts {
        let start = rows.len();
        let end = (start + BATCH).min(cmp.max_prompts);
        let batch = (start..end)
            .into_par_iter()
            .map(|i| -> CliResult<ComparisonRow> {
                let s = sample_sequence(spec, cmp.n, seed, i as u64)?;
                let fit = est.fit(&s.prompt)?;
                let tf = plan.predict(&s.prompt)?;
                Ok(ComparisonRow {
                    index: i,
                    lambda_min: fit.lambda_min,
                    degenerate: fit.lambda_min < cmp.lambda_threshold,
                    transformer: tf,
                    locpol: fit.estimate,
                    truth: s.prompt.truth_at_query.unwrap_or(f64::NAN),
                    response: s.prompt.query_response,
                    abs_gap: (tf - fit.estimate).abs(),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        for row in batch {
            if found >= cmp.prompts {
                break;
            }
            if !row.degenerate {
                found += 1;
            }
            rows.push(row);
        }
    }
    let mut good: Vec<f64> = rows.iter().filter(|r| !r.degenerate).map(|r| r.abs_gap).collect();
    let mut all: Vec<f64> = rows.iter().map(|r| r.abs_gap).collect();
    let diffs: Vec<f64> =
        rows.iter().map(|r| (r.transformer - r.response).powi(2) - (r.locpol - r.response).powi(2)).collect();
    let degenerate = rows.len() - good.len();
    let result = ComparisonResult {
        seed,
        n: cmp.n,
        steps: config.steps,
        step_size: config.step_size,
        depth_multiplier: config.depth_multiplier,
        basis_error: config.basis_error(),
        lambda_threshold: cmp.lambda_threshold,
        draws: rows.len(),
        nondegenerate: good.len(),
        degenerate,
        degenerate_fraction: degenerate as f64 / rows.len() as f64,
        median_gap: (!good.is_empty()).then(|| median(&mut good)),
        q95_gap: (!good.is_empty()).then(|| quantile(&mut good, 0.95)),
        max_gap: good.iter().copied().reduce(f64::max),
        median_gap_all: median(&mut all),
        q95_gap_all: quantile(&mut all, 0.95),
        risk_gap: mean(&diffs),
        risk_gap_stderr: jackknife_stderr(&diffs),
    };
    Ok((result, rows))
}

pub const COVERING_COLUMNS: [&str; 9] =
    ["n", "gamma", "depth", "param_bound", "embed_dim", "ffn_width", "delta", "covering_log", "tail"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringRow {
    pub n: usize,
    pub gamma: usize,
    pub depth: usize,
    pub param_bound: f64,
    pub embed_dim: usize,
    pub ffn_width: usize,
    pub delta: f64,
    pub covering_log: f64,
    pub tail: f64,
}

/// Architecture of the rate theorem at prompt length `n`:
/// `L = ⌈C log(en)⌉`, `B = Cn²`, `d_e = 2d + 2D + 5`, `d_ffn = 6(D+1)(14+p)`.
pub fn theorem_arch(spec: &DataSpec, n: usize, constant: f64) -> ArchSpec {
    let d = spec.holder.dim;
    let p = default_degree(spec.holder.smoothness);
    let basis = binomial(d + p, p);
    let depth = (constant * (std::f64::consts::E * n as f64).ln()).ceil().max(1.0) as usize;
    ArchSpec {
        embed_dim: 2 * d + 2 * basis + 5,
        ffn_width: 6 * (basis + 1) * (14 + p),
        depth,
        param_bound: constant * (n as f64).powi(2),
        input_dim: d,
        clamp: spec.holder.bound,
    }
}

/// Covering entropy at `δ = min(M, 1/Γ)` and the ERM tail term over the grid.
pub fn run_covering_table(spec: &DataSpec, cov: &CoveringConfig) -> CliResult<Vec<CoveringRow>> {
    let m = spec.holder.bound;
    let mut rows = Vec::new();
    for &n in &cov.n_grid {
        let arch = theorem_arch(spec, n, cov.constant);
        for &gamma in &cov.gamma_grid {
            let delta = (1.0 / gamma as f64).min(m);
            rows.push(CoveringRow {
                n,
                gamma,
                depth: arch.depth,
                param_bound: arch.param_bound,
                embed_dim: arch.embed_dim,
                ffn_width: arch.ffn_width,
                delta,
                covering_log: covering_log_bound(&arch, m, n, delta)?,
                tail: generalization_tail(cov.tail_constant, &arch, m, n, gamma),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub init: InitKind,
    pub n: usize,
    pub gamma: usize,
    pub arch: ArchSpec,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub initial_risk: RiskReport,
    pub trained_risk: RiskReport,
    pub locpol_risk: RiskReport,
    pub zero_risk: RiskReport,
}

/// Parameters to start ERM from, with the bound training should project onto.
pub fn initial_params(spec: &DataSpec, section: &TrainSection, seed: u64) -> CliResult<(TransformerParams, f64)> {
    match section.init {
        InitKind::Warm => {
            let built = build_construction(spec, section.n, seed, &section.overrides)?;
            let bound = section.param_bound.unwrap_or(built.params.arch.param_bound);
            Ok((built.params, bound))
        }
        InitKind::Cold | InitKind::Zero => {
            let arch = ArchSpec {
                embed_dim: section.embed_dim,
                ffn_width: section.ffn_width,
                depth: section.depth,
                param_bound: section.param_bound.unwrap_or(10.0),
                input_dim: spec.holder.dim,
                clamp: spec.holder.bound,
            };
            let params = if section.init == InitKind::Cold {
                random_init(arch, section.init_scale, derived_seed(seed, TRAINING_PURPOSE))?
            } else {
                TransformerParams::zeros(arch)?
            };
            Ok((params, arch.param_bound))
        }
    }
}

pub fn train_config(section: &TrainSection, bound: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: section.optimizer,
        step_size: section.step_size,
        decay: section.decay,
        batch_size: section.batch_size.min(section.gamma),
        max_epochs: section.epochs,
        param_bound: bound,
        tolerance: section.tolerance,
        seed: derived_seed(seed, TRAINING_PURPOSE),
    }
}

/// Samples `Γ` sequences, trains, and evaluates on fresh tasks.
pub fn run_training(cfg: &ExperimentConfig) -> CliResult<(TrainOutcome, TrainSummary)> {
    let spec = cfg.data.data_spec()?;
    let t = &cfg.train;
    let set = sample_pretrain_set(&spec, t.n, t.gamma, cfg.seed)?;
    let (init, bound) = initial_params(&spec, t, cfg.seed)?;
    let eval_seed = derived_seed(cfg.seed, EVALUATION_PURPOSE);
    let initial_risk = population_risk_mc(&ForwardPlan::new(&init), &spec, t.n, t.eval_tasks, eval_seed)?;
    let outcome = train_erm(init, &set, &train_config(t, bound, cfg.seed))?;
    let trained_risk = population_risk_mc(&ForwardPlan::new(&outcome.params), &spec, t.n, t.eval_tasks, eval_seed)?;
    let locpol = LocPolEstimator::paper_default(t.n, spec.holder.dim, spec.holder.smoothness, spec.holder.bound)?;
    let summary = TrainSummary {
        seed: cfg.seed,
        init: t.init,
        n: t.n,
        gamma: t.gamma,
        arch: outcome.params.arch,
        epochs_run: outcome.losses.len(),
        initial_loss: outcome.initial_loss,
        best_loss: outcome.best_loss,
        best_epoch: outcome.best_epoch,
        initial_risk,
        trained_risk,
        locpol_risk: population_risk_mc(&locpol, &spec, t.n, t.eval_tasks, eval_seed)?,
        zero_risk: population_risk_mc(&ConstantPredictor(0.0), &spec, t.n, t.eval_tasks, eval_seed)?,
    };
    Ok((outcome, summary))
}

