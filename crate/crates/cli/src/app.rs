//! Command-line surface and dispatch.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use icreg_core::datagen::sample_pretrain_set;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiments::{self, RateRow, RATE_COLUMNS};
use crate::io::{self, OutputDir};

/// Tolerances applied by `--check`.
pub const COMPARE_MEDIAN_TOL: f64 = 1e-3;
pub const COMPARE_Q95_TOL: f64 = 1e-2;
pub const SLOPE_TOL: f64 = 0.15;

#[derive(Debug, Parser)]
#[command(name = "icreg", version, about = "In-context nonparametric regression experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; overrides the config's (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Comma-separated prompt lengths. Single-length commands use the first.
    #[arg(long, global = true, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Tasks per grid point (rates), prompts (compare), sequences
    /// (simulate) or held-out tasks (train).
    #[arg(long, global = true)]
    pub tasks: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Exit with status 4 when the command's acceptance threshold fails.
    #[arg(long, global = true)]
    pub check: bool,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a pretraining set and write it as JSON lines.
    Simulate,
    /// Build the local-polynomial transformer and write its checkpoint.
    Construct,
    /// Compare the constructed transformer with the estimator it emulates.
    Compare,
    /// Train a transformer by empirical risk minimisation.
    Train,
    /// Estimate excess-risk rate curves.
    Rates {
        /// Keep rows already present in the output and run only the rest.
        #[arg(long)]
        resume: bool,
    },
    /// Tabulate covering and generalisation bounds.
    CoveringBound,
}

pub fn resolve_config(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = &global.n_grid {
        let first = *grid.first().ok_or_else(|| CliError::Config("--n-grid is empty".into()))?;
        cfg.rates.n_grid = grid.clone();
        cfg.covering.n_grid = grid.clone();
        cfg.compare.n = first;
        cfg.train.n = first;
        cfg.simulate.n = first;
    }
    if let Some(tasks) = global.tasks {
        cfg.rates.tasks = tasks;
        cfg.compare.prompts = tasks;
        cfg.compare.max_prompts = cfg.compare.max_prompts.max(tasks);
        cfg.simulate.gamma = tasks;
        cfg.train.eval_tasks = tasks;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    result: T,
}

fn write_summary<T: Serialize>(out: &OutputDir, name: &str, command: &str, cfg: &ExperimentConfig, result: T) -> CliResult<PathBuf> {
    let path = out.fresh(name)?;
    let env = Envelope { command, version: env!("CARGO_PKG_VERSION"), seed: cfg.seed, config: cfg, result };
    io::write_json(&path, &env)?;
    Ok(path)
}

/// Row sink that flushes after every row.
pub struct RowWriter {
    path: PathBuf,
    format: Format,
    file: File,
    header_written: bool,
}

impl RowWriter {
    pub fn file_name(stem: &str, format: Format) -> String {
        match format {
            Format::Csv => format!("{stem}.csv"),
            Format::Json => format!("{stem}.jsonl"),
        }
    }

    /// Creates or, with `append`, extends the file.
    pub fn open(path: PathBuf, format: Format, append: bool) -> CliResult<Self> {
        let existing = append && path.exists() && std::fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
        Ok(Self { path, format, file, header_written: existing })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> CliResult<()> {
        let err = |path: &Path, e: std::io::Error| CliError::io(path.display().to_string(), e);
        match self.format {
            Format::Csv => {
                let mut w = csv::WriterBuilder::new().has_headers(!self.header_written).from_writer(Vec::new());
                w.serialize(row).map_err(|e| CliError::io(self.path.display().to_string(), e.into()))?;
                let bytes = w.into_inner().map_err(|e| CliError::io(self.path.display().to_string(), e.into_error()))?;
                self.file.write_all(&bytes).map_err(|e| err(&self.path, e))?;
                self.header_written = true;
            }
            Format::Json => {
                let line = serde_json::to_string(row).map_err(|e| CliError::io(self.path.display().to_string(), e.into()))?;
                writeln!(self.file, "{line}").map_err(|e| err(&self.path, e))?;
            }
        }
        self.file.flush().map_err(|e| err(&self.path, e))
    }
}

pub fn write_rows<T: Serialize>(out: &OutputDir, stem: &str, format: Format, rows: &[T]) -> CliResult<PathBuf> {
    let path = out.fresh(&RowWriter::file_name(stem, format))?;
    let mut w = RowWriter::open(path.clone(), format, false)?;
    for r in rows {
        w.write(r)?;
    }
    Ok(path)
}

/// Reads rows back from a CSV or JSON-lines table, checking CSV headers.
pub fn read_rows<T: DeserializeOwned>(path: &Path, format: Format, columns: &[&str]) -> CliResult<Vec<T>> {
    let bad = |reason: String| CliError::Format { path: path.to_path_buf(), reason };
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
            let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
            if header != columns {
                return Err(bad(format!("columns {header:?} differ from {columns:?}")));
            }
            r.deserialize().map(|row| row.map_err(|e| bad(e.to_string()))).collect()
        }
        Format::Json => {
            let f = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
            BufReader::new(f)
                .lines()
                .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
                .map(|l| {
                    let l = l.map_err(|e| CliError::io(path.display().to_string(), e))?;
                    serde_json::from_str(&l).map_err(|e| bad(e.to_string()))
                })
                .collect()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    let g = &cli.global;
    match &cli.command {
        Command::Simulate => simulate(&cfg, g),
        Command::Construct => construct(&cfg, g),
        Command::Compare => compare(&cfg, g),
        Command::Train => train(&cfg, g),
        Command::Rates { resume } => rates(&cfg, g, *resume),
        Command::CoveringBound => covering(&cfg, g),
    }
}

fn simulate(cfg: &ExperimentConfig, g: &GlobalArgs) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force)?;
    let spec = cfg.data.data_spec()?;
    let set = sample_pretrain_set(&spec, cfg.simulate.n, cfg.simulate.gamma, cfg.seed)?;
    let path = out.fresh("pretrain.jsonl")?;
    io::write_pretrain_set(&path, &set)?;
    write_summary(&out, "simulate.json", "simulate", cfg, serde_json::json!({ "n": cfg.simulate.n, "gamma": cfg.simulate.gamma }))?;
    println!("wrote {} sequences of length {} to {}", set.gamma(), cfg.simulate.n, path.display());
    Ok(())
}

fn construct(cfg: &ExperimentConfig, g: &GlobalArgs) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force)?;
    let spec = cfg.data.data_spec()?;
    let built = experiments::build_construction(&spec, cfg.compare.n, cfg.seed, &cfg.compare.overrides)?;
    let provenance = serde_json::json!({
        "command": "construct",
        "seed": cfg.seed,
        "construction": built.config,
        "layout": built.layout,
    });
    let ckpt = io::write_checkpoint(&out, "construct", &built.params, provenance)?;
    write_summary(&out, "construct_report.json", "construct", cfg, &built.report)?;
    let r = &built.report;
    println!(
        "built {} blocks (d_e {}, d_ffn {}), xi {:.3e}, eta {:.4}, T {}, c_lo {:.4}, c_hi {:.4}, max |param| {:.4e}; checkpoint {}",
        r.block_count,
        r.embed_dim,
        r.ffn_width,
        r.basis_error,
        r.step_size,
        r.steps,
        r.c_lo,
        r.c_hi,
        r.max_abs_param,
        ckpt.display()
    );
    Ok(())
}

fn compare(cfg: &ExperimentConfig, g: &GlobalArgs) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force)?;
    let spec = cfg.data.data_spec()?;
    let (result, rows) = experiments::run_construction_comparison(&spec, &cfg.compare, cfg.seed)?;
    write_rows(&out, "compare", g.format, &rows)?;
    write_summary(&out, "compare.json", "compare", cfg, &result)?;
    println!(
        "{} of {} prompts non-degenerate (lambda_min >= {}); median gap {}, q95 gap {}; risk gap {:.3e} ± {:.1e}",
        result.nondegenerate,
        result.draws,
        result.lambda_threshold,
        fmt_opt(result.median_gap),
        fmt_opt(result.q95_gap),
        result.risk_gap,
        result.risk_gap_stderr
    );
    if g.check {
        let ok = matches!((result.median_gap, result.q95_gap), (Some(m), Some(q)) if m <= COMPARE_MEDIAN_TOL && q <= COMPARE_Q95_TOL);
        if !ok {
            return Err(CliError::CheckFailed(format!(
                "median gap {} (≤ {COMPARE_MEDIAN_TOL}) and q95 gap {} (≤ {COMPARE_Q95_TOL}) over {} non-degenerate prompts",
                fmt_opt(result.median_gap),
                fmt_opt(result.q95_gap),
                result.nondegenerate
            )));
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "n/a".into())
}

fn train(cfg: &ExperimentConfig, g: &GlobalArgs) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force)?;
    for name in ["train.ckpt", "train.json", "train_summary.json"] {
        out.fresh(name)?;
    }
    out.fresh(&RowWriter::file_name("train_losses", g.format))?;
    let (outcome, summary) = experiments::run_training(cfg)?;
    let losses: Vec<_> = outcome.losses.iter().enumerate().map(|(e, l)| LossRow { epoch: e + 1, loss: *l }).collect();
    write_rows(&out, "train_losses", g.format, &losses)?;
    let provenance = serde_json::json!({ "command": "train", "seed": cfg.seed, "train": cfg.train, "data": cfg.data });
    io::write_checkpoint(&out, "train", &outcome.params, provenance)?;
    write_summary(&out, "train_summary.json", "train", cfg, &summary)?;
    println!(
        "trained {} epochs: empirical risk {:.4e} -> {:.4e}; held-out risk {:.4e} (initial {:.4e}, locpol {:.4e}, zero {:.4e})",
        summary.epochs_run,
        summary.initial_loss,
        summary.best_loss,
        summary.trained_risk.value,
        summary.initial_risk.value,
        summary.locpol_risk.value,
        summary.zero_risk.value
    );
    if g.check && !(summary.trained_risk.value < summary.zero_risk.value) {
        return Err(CliError::CheckFailed("trained risk does not beat the zero predictor".into()));
    }
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn rates(cfg: &ExperimentConfig, g: &GlobalArgs, resume: bool) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force || resume)?;
    let name = RowWriter::file_name("rates", g.format);
    let path = if resume { out.path(&name) } else { out.fresh(&name)? };
    if !resume {
        out.fresh("rates.json")?;
    }
    let done: Vec<RateRow> = if resume && path.exists() { read_rows(&path, g.format, &RATE_COLUMNS)? } else { Vec::new() };
    let kept = done.len();
    let mut writer = RowWriter::open(path.clone(), g.format, resume)?;
    let result = experiments::run_rate_experiment(cfg, done, |row| {
        eprintln!("n = {:>6}: excess {:.4e} ± {:.1e}", row.n, row.excess, row.excess_stderr);
        writer.write(row)
    })?;
    write_summary(&out, "rates.json", "rates", cfg, &result)?;
    match result.slope {
        Some(s) => println!(
            "slope {:.3} ± {:.3} (target {:.3}) over {} grid points ({} resumed)",
            s.slope,
            s.half_width,
            result.target_slope,
            result.rows.len(),
            kept
        ),
        None => println!("too few positive grid points for a slope"),
    }
    if g.check {
        let ok = result.slope.map(|s| (s.slope - result.target_slope).abs() <= SLOPE_TOL).unwrap_or(false);
        if !ok {
            return Err(CliError::CheckFailed(format!(
                "slope {:?} outside {:.3} ± {SLOPE_TOL}",
                result.slope.map(|s| s.slope),
                result.target_slope
            )));
        }
    }
    Ok(())
}

fn covering(cfg: &ExperimentConfig, g: &GlobalArgs) -> CliResult<()> {
    let out = OutputDir::new(&g.out_dir, g.force)?;
    let spec = cfg.data.data_spec()?;
    let rows = experiments::run_covering_table(&spec, &cfg.covering)?;
    let path = write_rows(&out, "covering", g.format, &rows)?;
    write_summary(&out, "covering.json", "covering-bound", cfg, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

