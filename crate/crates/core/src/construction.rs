//! The explicit transformer whose forward pass runs kernel-weighted least
//! squares by gradient descent, and the inexact gradient-descent reference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::{sample_sequence, DataSpec};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::locpol::{self, binomial, factorial, BasisSpec, KernelSpec};
use crate::relu::{absorb_residual, build_monomial_net, compose_nets, parallel_nets, Affine, NetSpec};
use crate::transformer::{ArchSpec, BlockParams, TransformerParams};

/// Column map of the register. Every constructed weight matrix indexes
/// through this struct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLayout {
    pub dim: usize,
    pub basis_size: usize,
    pub scratch: usize,
}

impl RegisterLayout {
    pub fn new(dim: usize, basis_size: usize, scratch: usize) -> Self {
        Self { dim, basis_size, scratch }
    }

    pub fn x_raw(&self, j: usize) -> usize {
        j
    }

    pub fn y(&self) -> usize {
        self.dim
    }

    pub fn centered(&self, j: usize) -> usize {
        self.dim + 1 + j
    }

    pub fn sqrt_kernel(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn basis(&self, j: usize) -> usize {
        2 * self.dim + 2 + j
    }

    pub fn response(&self) -> usize {
        2 * self.dim + 2 + self.basis_size
    }

    pub fn weight(&self, j: usize) -> usize {
        2 * self.dim + 3 + self.basis_size + j
    }

    pub fn scratch(&self, j: usize) -> usize {
        2 * self.dim + 3 + 2 * self.basis_size + j
    }

    pub fn ones(&self) -> usize {
        self.embed_dim() - 2
    }

    pub fn query_flag(&self) -> usize {
        self.embed_dim() - 1
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.dim + 2 * self.basis_size + 5 + self.scratch
    }

    /// Rows of the weighted design (query row last) and the weighted responses.
    pub fn read_system(&self, z: &Matrix) -> (Matrix, Vec<f64>) {
        let mut x = Matrix::zeros(z.rows(), self.basis_size);
        let mut y = vec![0.0; z.rows()];
        for i in 0..z.rows() {
            for j in 0..self.basis_size {
                x[(i, j)] = z[(i, self.basis(j))];
            }
            y[i] = z[(i, self.response())];
        }
        (x, y)
    }

    pub fn read_weights(&self, z: &Matrix, row: usize) -> Vec<f64> {
        (0..self.basis_size).map(|j| z[(row, self.weight(j))]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionConfig {
    pub n: usize,
    pub dim: usize,
    pub smoothness: f64,
    pub clamp: f64,
    pub degree: usize,
    pub basis_size: usize,
    pub bandwidth: f64,
    pub depth_multiplier: usize,
    pub steps: usize,
    pub step_size: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

pub const MAX_GD_STEPS: usize = 200;
pub const CALIBRATION_PROMPTS: usize = 50;
/// Monomial nets use `N = 2`.
pub const MONOMIAL_WIDTH_PARAM: usize = 2;

impl ConstructionConfig {
    /// Fills step size, step count and depth multiplier from spectrum estimates
    /// of `X̃ᵀX̃`.
    pub fn from_spectrum(n: usize, dim: usize, smoothness: f64, clamp: f64, c_lo: f64, c_hi: f64) -> Result<Self> {
        if !(c_lo > 0.0 && c_hi >= c_lo && c_hi.is_finite()) {
            return Err(Error::InvalidSpec(format!("spectrum estimates ({c_lo}, {c_hi}) must satisfy 0 < lo ≤ hi")));
        }
        let degree = locpol::default_degree(smoothness);
        let mut cfg = Self {
            n,
            dim,
            smoothness,
            clamp,
            degree,
            basis_size: binomial(dim + degree, degree),
            bandwidth: locpol::default_bandwidth(n, dim, smoothness),
            depth_multiplier: 1,
            steps: default_steps(n, c_lo, c_hi),
            step_size: 1.0 / (2.0 * c_hi),
            c_lo,
            c_hi,
        };
        cfg.validate_shape()?;
        cfg.depth_multiplier = minimal_depth_multiplier(&cfg)?;
        Ok(cfg)
    }

    /// Estimates the spectrum as medians over a calibration batch.
    pub fn calibrated(spec: &DataSpec, n: usize, clamp: f64, seed: u64) -> Result<Self> {
        let (c_lo, c_hi) = calibrate_spectrum(spec, n, CALIBRATION_PROMPTS, seed)?;
        Self::from_spectrum(n, spec.holder.dim, spec.holder.smoothness, clamp, c_lo, c_hi)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.n < 2 || self.dim == 0 {
            return Err(Error::InvalidSpec(format!("need n ≥ 2 and d ≥ 1 (got {}, {})", self.n, self.dim)));
        }
        if !(self.smoothness > 0.0) || !(self.clamp > 0.0) {
            return Err(Error::InvalidSpec("smoothness and clamp must be positive".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth <= 1.0) {
            return Err(Error::InvalidSpec(format!("bandwidth {} outside (0, 1]", self.bandwidth)));
        }
        if self.basis_size != binomial(self.dim + self.degree, self.degree) {
            return Err(Error::InvalidSpec("basis size does not match dimension and degree".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.steps == 0 || self.depth_multiplier == 0 {
            return Err(Error::InvalidSpec("step count and depth multiplier must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidSpec(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }

    /// `n^{−1/2} h^{−d/2}`, the query row's kernel entry.
    pub fn kernel_scale(&self) -> f64 {
        libm::pow(self.n as f64, -0.5) * libm::pow(self.bandwidth, -(self.dim as f64) / 2.0)
    }

    /// Half-side of the box holding every monomial-net input.
    pub fn monomial_domain(&self) -> f64 {
        2.0 * (self.clamp + 1.0) / self.bandwidth
    }

    pub fn basis_depth(&self) -> usize {
        let k = self.degree + 1;
        7 * k * self.depth_multiplier * (k - 1) + 1
    }

    /// Entrywise bound `ξ` on the basis and response errors.
    pub fn basis_error(&self) -> f64 {
        basis_error_at(self, self.depth_multiplier)
    }

    /// Declared parameter bound of the assembled model.
    pub fn param_bound(&self) -> f64 {
        let d = self.dim as f64;
        let p = self.degree as f64;
        let monomial = 3.0
            * d
            * 120.0
            * 120.0
            * (p + 2.0)
            * libm::pow(2.0 * self.clamp + 2.0, p + 1.0)
            * libm::pow(self.n as f64, (p + 1.0) / (2.0 * self.smoothness + d));
        let preprocess = (d / self.bandwidth).max(self.kernel_scale()).max(1.0 / self.bandwidth);
        monomial.max(preprocess).max(2.0 * self.step_size).max(1.0)
    }

    /// `18 D (M+3)(R+1) n ξ`.
    pub fn gradient_error_bound(&self, radius: f64) -> f64 {
        18.0 * self.basis_size as f64 * (self.clamp + 3.0) * (radius + 1.0) * self.n as f64 * self.basis_error()
    }

    /// The feed-forward width the lemmas quote, `6(D+1)(14+p)`.
    pub fn reference_ffn_width(&self) -> usize {
        6 * (self.basis_size + 1) * (14 + self.degree)
    }
}

fn default_steps(n: usize, c_lo: f64, c_hi: f64) -> usize {
    let ratio = c_hi / c_lo;
    let t = libm::ceil(4.0 * ratio * ratio * libm::log(n as f64));
    if !(t < MAX_GD_STEPS as f64) {
        MAX_GD_STEPS
    } else {
        (t as usize).max(1)
    }
}

fn basis_error_at(cfg: &ConstructionConfig, multiplier: usize) -> f64 {
    let k = cfg.degree + 1;
    crate::relu::multiprod_cert(cfg.monomial_domain(), k, MONOMIAL_WIDTH_PARAM, multiplier)
}

/// Smallest multiplier with `ξ ≤ n^{−3}`.
pub fn minimal_depth_multiplier(cfg: &ConstructionConfig) -> Result<usize> {
    let target = libm::pow(cfg.n as f64, -3.0);
    for m in 1..=64 {
        if basis_error_at(cfg, m) <= target {
            return Ok(m);
        }
    }
    Err(Error::Infeasible(format!("no depth multiplier up to 64 reaches ξ ≤ {target}")))
}

/// Median extreme eigenvalues of `X̃ᵀX̃` over `count` prompts.
pub fn calibrate_spectrum(spec: &DataSpec, n: usize, count: usize, seed: u64) -> Result<(f64, f64)> {
    let degree = locpol::default_degree(spec.holder.smoothness);
    let basis = BasisSpec::new(spec.holder.dim, degree);
    let kernel = KernelSpec::new(locpol::default_bandwidth(n, spec.holder.dim, spec.holder.smoothness))?;
    let mut lo = Vec::with_capacity(count);
    let mut hi = Vec::with_capacity(count);
    for i in 0..count {
        let seq = sample_sequence(spec, n, seed, i as u64)?;
        let (design, _) = locpol::build_weighted_system(&seq.prompt, &kernel, &basis);
        let (a, b) = locpol::spectral_bounds(&design);
        lo.push(a);
        hi.push(b);
    }
    Ok((linalg::median(&mut lo), linalg::median(&mut hi)))
}

/// Monomial network from register rows to `(X̌, Y̌)`.
///
/// Inputs per net are `(y, x_c, s′)` with `s′` the kernel column minus
/// `n^{−1/2}h^{−d/2}` on the query row, so every output vanishes there up
/// to approximation error.
pub fn build_basis_network(cfg: &ConstructionConfig) -> Result<NetSpec> {
    cfg.validate()?;
    let d = cfg.dim;
    let cap = cfg.degree + 1;
    let c = cfg.monomial_domain();
    let basis = BasisSpec::new(d, cfg.degree);
    let mut nets = Vec::with_capacity(basis.size() + 1);
    let mut scales = Vec::with_capacity(basis.size() + 1);
    for nu in &basis.indices {
        let mut full = vec![0usize; d + 2];
        full[1..=d].copy_from_slice(nu);
        full[d + 1] = 1;
        nets.push(build_monomial_net(&full, cap, c, MONOMIAL_WIDTH_PARAM, cfg.depth_multiplier)?.trimmed());
        scales.push(1.0 / nu.iter().map(|k| factorial(*k)).product::<f64>());
    }
    let mut response = vec![0usize; d + 2];
    response[0] = 1;
    response[d + 1] = 1;
    nets.push(build_monomial_net(&response, cap, c, MONOMIAL_WIDTH_PARAM, cfg.depth_multiplier)?.trimmed());
    scales.push(1.0);

    let mut stacked = parallel_nets(&nets)?;
    let last = stacked.layers.len() - 1;
    for (r, s) in scales.iter().enumerate() {
        stacked.layers[last].weight.row_mut(r).iter_mut().for_each(|w| *w *= s);
        stacked.layers[last].bias[r] *= s;
    }

    let layout = RegisterLayout::new(d, basis.size(), 0);
    let e = layout.embed_dim();
    let inputs = nets.len() * (d + 2);
    let mut select = Matrix::zeros(inputs, e);
    for net in 0..nets.len() {
        let base = net * (d + 2);
        select[(base, layout.y())] = 1.0;
        for j in 0..d {
            select[(base + 1 + j, layout.centered(j))] = 1.0;
        }
        select[(base + d + 1, layout.sqrt_kernel())] = 1.0;
        select[(base + d + 1, layout.query_flag())] = -cfg.kernel_scale();
    }
    let front = NetSpec::new(vec![Affine::new(select, vec![0.0; inputs])], 1.0, 0.0, vec![(-c, c); e])?;
    let bound = stacked.param_bound;
    let cert = stacked.cert_error;
    let mut net = compose_nets(&front, &stacked)?;
    net.param_bound = bound.max(net.max_abs_param());
    net.cert_error = cert;
    Ok(net)
}

/// Re-indexes the basis network's first layer from the scratch-free layout
/// to `layout`.
fn widen_input(w: &Matrix, from: &RegisterLayout, to: &RegisterLayout) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), to.embed_dim());
    let map = |c: usize| -> usize {
        if c == from.ones() {
            to.ones()
        } else if c == from.query_flag() {
            to.query_flag()
        } else {
            c
        }
    };
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            if w[(r, c)] != 0.0 {
                out[(r, map(c))] = w[(r, c)];
            }
        }
    }
    out
}

/// Three blocks producing centered covariates, the square-root kernel column
/// and the ones column.
pub fn build_preprocess_blocks(cfg: &ConstructionConfig, layout: &RegisterLayout, ffn_width: usize) -> Result<Vec<BlockParams>> {
    let d = cfg.dim;
    if layout.dim != d || layout.basis_size != cfg.basis_size {
        return Err(Error::Shape("register layout does not match the configuration".into()));
    }
    if ffn_width < 2 * d + 2 {
        return Err(Error::Shape(format!("FFN width {ffn_width} below 2d + 2 = {}", 2 * d + 2)));
    }
    let e = layout.embed_dim();
    let h = cfg.bandwidth;
    let scale = cfg.kernel_scale();

    // Copy the query covariate into the centered span of the query row.
    let mut first = BlockParams::zeros(e, ffn_width);
    for j in 0..d {
        first.w1[(j, layout.x_raw(j))] = 1.0;
        first.w1[(j, layout.query_flag())] = 1.0;
        first.b1[j] = -1.0;
        first.w2[(layout.centered(j), j)] = 1.0;
    }
    first.b2[layout.ones()] = 1.0;

    // Broadcast it to every other row, then form 1 − ‖x − x_q‖₁/h.
    let mut second = BlockParams::zeros(e, ffn_width);
    second.q[(layout.ones(), 0)] = 1.0;
    second.q[(layout.query_flag(), 0)] = -1.0;
    second.k[(layout.query_flag(), 0)] = 1.0;
    for j in 0..d {
        second.v[(layout.centered(j), layout.centered(j))] = 1.0;
        second.w1[(2 * j, layout.x_raw(j))] = 1.0 / h;
        second.w1[(2 * j, layout.centered(j))] = -1.0 / h;
        second.w1[(2 * j + 1, layout.x_raw(j))] = -1.0 / h;
        second.w1[(2 * j + 1, layout.centered(j))] = 1.0 / h;
        second.w2[(layout.sqrt_kernel(), 2 * j)] = -1.0;
        second.w2[(layout.sqrt_kernel(), 2 * j + 1)] = -1.0;
    }
    second.b2[layout.sqrt_kernel()] = 1.0;

    // Replace the broadcast query by (x − x_q)/h and the kernel by its scaled positive part.
    let mut third = BlockParams::zeros(e, ffn_width);
    for j in 0..d {
        third.w1[(j, layout.x_raw(j))] = 1.0 / h;
        third.w1[(j, layout.centered(j))] = -1.0 / h;
        third.b1[j] = 1.0 / h;
        third.w1[(d + j, layout.centered(j))] = 1.0;
        third.w2[(layout.centered(j), j)] = 1.0;
        third.w2[(layout.centered(j), d + j)] = -1.0;
        third.b2[layout.centered(j)] = -1.0 / h;
    }
    third.w1[(2 * d, layout.sqrt_kernel())] = 1.0;
    third.w1[(2 * d + 1, layout.sqrt_kernel())] = -1.0;
    third.w2[(layout.sqrt_kernel(), 2 * d)] = scale - 1.0;
    third.w2[(layout.sqrt_kernel(), 2 * d + 1)] = 1.0;
    Ok(vec![first, second, third])
}

/// One block per hidden layer of `net`, running its hidden state in the
/// scratch span and writing outputs into the basis and response spans.
pub fn build_basis_blocks(
    net: &NetSpec,
    layout: &RegisterLayout,
    ffn_width: usize,
    bound: f64,
) -> Result<Vec<BlockParams>> {
    let depth = net.depth();
    let s = layout.scratch;
    if depth < 2 || net.width() > s || net.output_dim() != layout.basis_size + 1 {
        return Err(Error::Shape(format!(
            "basis network (depth {depth}, width {}) does not fit scratch {s}",
            net.width()
        )));
    }
    if ffn_width < 3 * s {
        return Err(Error::Shape(format!("FFN width {ffn_width} below 3·scratch = {}", 3 * s)));
    }
    let e = layout.embed_dim();
    let plain = RegisterLayout::new(layout.dim, layout.basis_size, 0);
    let mut blocks = Vec::with_capacity(depth);

    let first = &net.layers[0];
    let w = widen_input(&first.weight, &plain, layout);
    let mut block = BlockParams::zeros(e, ffn_width);
    for r in 0..first.out_dim() {
        block.w1.row_mut(r).copy_from_slice(w.row(r));
        block.b1[r] = first.bias[r];
        block.w2[(layout.scratch(r), r)] = 1.0;
    }
    blocks.push(block);

    for l in 1..depth {
        let layer = &net.layers[l];
        let mut w1 = Matrix::zeros(s, s);
        let mut b1 = vec![0.0; s];
        for r in 0..layer.out_dim() {
            w1.row_mut(r)[..layer.in_dim()].copy_from_slice(layer.weight.row(r));
            b1[r] = layer.bias[r];
        }
        // On the last layer the target map is zero, so the rewrite's identity
        // channels clear the scratch span while the outputs go elsewhere.
        let last = l + 1 == depth;
        let mut w2 = Matrix::zeros(s, s);
        if !last {
            for r in 0..layer.out_dim() {
                w2[(r, r)] = 1.0;
            }
        }
        let b2 = vec![0.0; s];
        let rw = absorb_residual(&w1, &w2, &b1, &b2, bound)?;
        let mut block = BlockParams::zeros(e, ffn_width);
        for r in 0..3 * s {
            for c in 0..s {
                block.w1[(r, layout.scratch(c))] = rw.w1[(r, c)];
            }
            block.b1[r] = rw.b1[r];
        }
        for r in 0..s {
            for c in 0..3 * s {
                block.w2[(layout.scratch(r), c)] = rw.w2[(r, c)];
            }
            block.b2[layout.scratch(r)] = rw.b2[r];
        }
        if last {
            let out = &net.layers[depth];
            for o in 0..out.out_dim() {
                let col = if o < layout.basis_size { layout.basis(o) } else { layout.response() };
                for r in 0..out.in_dim() {
                    block.w2[(col, r)] = out.weight[(o, r)];
                }
                block.b2[col] = out.bias[o];
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Attention block performing `w ← w − η · 2(X̌ᵀX̌w − X̌ᵀY̌)` on every row,
/// the query row's entries included in `X̌`, `Y̌`.
pub fn build_gd_block(cfg: &ConstructionConfig, layout: &RegisterLayout, ffn_width: usize) -> BlockParams {
    let dsz = layout.basis_size;
    let mut block = BlockParams::zeros(layout.embed_dim(), ffn_width);
    for j in 0..dsz {
        block.q[(layout.weight(j), j)] = -2.0 * cfg.step_size;
        block.k[(layout.basis(j), j)] = 1.0;
        block.v[(layout.basis(j), layout.weight(j))] = 1.0;
    }
    block.q[(layout.ones(), dsz)] = 2.0 * cfg.step_size;
    block.k[(layout.response(), dsz)] = 1.0;
    block
}

/// Adds the intercept weight to the response column.
pub fn build_transfer_block(layout: &RegisterLayout, ffn_width: usize) -> BlockParams {
    let mut block = BlockParams::zeros(layout.embed_dim(), ffn_width);
    block.w1[(0, layout.weight(0))] = 1.0;
    block.w1[(1, layout.weight(0))] = -1.0;
    block.w2[(layout.y(), 0)] = 1.0;
    block.w2[(layout.y(), 1)] = -1.0;
    block
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub basis_error: f64,
    pub step_size: f64,
    pub steps: usize,
    pub c_lo: f64,
    pub c_hi: f64,
    pub depth_multiplier: usize,
    pub block_count: usize,
    pub preprocess_blocks: usize,
    pub basis_blocks: usize,
    pub embed_dim: usize,
    pub ffn_width: usize,
    pub reference_ffn_width: usize,
    pub scratch_width: usize,
    pub max_abs_param: f64,
    pub param_bound: f64,
    /// Zero-based register column the transfer block reads.
    pub transfer_source_column: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocPolTransformer {
    pub config: ConstructionConfig,
    pub layout: RegisterLayout,
    pub params: TransformerParams,
    pub report: BuildReport,
}

impl LocPolTransformer {
    pub fn preprocess_range(&self) -> core::ops::Range<usize> {
        0..self.report.preprocess_blocks
    }

    pub fn basis_range(&self) -> core::ops::Range<usize> {
        let s = self.report.preprocess_blocks;
        s..s + self.report.basis_blocks
    }

    pub fn gd_range(&self) -> core::ops::Range<usize> {
        let s = self.basis_range().end;
        s..s + self.config.steps
    }

    pub fn transfer_index(&self) -> usize {
        self.params.blocks.len() - 1
    }
}

pub fn build_locpol_transformer(cfg: &ConstructionConfig) -> Result<LocPolTransformer> {
    cfg.validate()?;
    let xi = cfg.basis_error();
    if !(xi <= 1.0) {
        return Err(Error::Infeasible(format!("basis error bound {xi} exceeds 1; raise the depth multiplier")));
    }
    let net = build_basis_network(cfg)?;
    let scratch = net.width();
    let layout = RegisterLayout::new(cfg.dim, cfg.basis_size, scratch);
    let ffn_width = (2 * cfg.dim + 2).max(3 * scratch).max(2);
    let bound = cfg.param_bound();

    let mut blocks = build_preprocess_blocks(cfg, &layout, ffn_width)?;
    let preprocess_blocks = blocks.len();
    let basis = build_basis_blocks(&net, &layout, ffn_width, bound)?;
    let basis_blocks = basis.len();
    blocks.extend(basis);
    let gd = build_gd_block(cfg, &layout, ffn_width);
    blocks.extend((0..cfg.steps).map(|_| gd.clone()));
    blocks.push(build_transfer_block(&layout, ffn_width));

    let max_abs_param = blocks.iter().fold(0.0_f64, |m, b| m.max(b.max_abs()));
    if max_abs_param > bound {
        return Err(Error::Infeasible(format!("constructed parameter {max_abs_param} exceeds bound {bound}")));
    }
    let arch = ArchSpec {
        embed_dim: layout.embed_dim(),
        ffn_width,
        depth: blocks.len(),
        param_bound: bound,
        input_dim: cfg.dim,
        clamp: cfg.clamp,
    };
    let block_count = blocks.len();
    let params = TransformerParams::new(arch, blocks)?;
    let mut notes = Vec::new();
    notes.push(format!(
        "register carries a scratch span of {scratch} columns for monomial hidden states; embedding dim {} versus 2d + 2D + 5 = {}",
        layout.embed_dim(),
        2 * cfg.dim + 2 * cfg.basis_size + 5
    ));
    if ffn_width > cfg.reference_ffn_width() {
        notes.push(format!("FFN width {ffn_width} exceeds 6(D+1)(14+p) = {}", cfg.reference_ffn_width()));
    }
    notes.push(format!(
        "transfer reads w₁ from column {} (zero-based) of the layout, not a fixed display index",
        layout.weight(0)
    ));
    Ok(LocPolTransformer {
        config: cfg.clone(),
        layout,
        params,
        report: BuildReport {
            basis_error: xi,
            step_size: cfg.step_size,
            steps: cfg.steps,
            c_lo: cfg.c_lo,
            c_hi: cfg.c_hi,
            depth_multiplier: cfg.depth_multiplier,
            block_count,
            preprocess_blocks,
            basis_blocks,
            embed_dim: layout.embed_dim(),
            ffn_width,
            reference_ffn_width: cfg.reference_ffn_width(),
            scratch_width: scratch,
            max_abs_param,
            param_bound: bound,
            transfer_source_column: layout.weight(0),
            notes,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdTrace {
    pub iterates: Vec<Vec<f64>>,
    pub gradient_errors: Vec<f64>,
}

impl GdTrace {
    pub fn last(&self) -> &[f64] {
        &self.iterates[self.iterates.len() - 1]
    }
}

/// `∇‖Xw − Y‖² = 2(XᵀXw − XᵀY)`.
pub fn least_squares_gradient(x: &Matrix, y: &[f64], w: &[f64]) -> Vec<f64> {
    let resid: Vec<f64> = x.mat_vec(w).iter().zip(y).map(|(a, b)| a - b).collect();
    x.tr_mat_vec(&resid).into_iter().map(|g| 2.0 * g).collect()
}

/// Runs `w_{t+1} = w_t − η g_t` from `w_0 = 0`, where `g_t` comes from
/// `inject(t, w_t, ∇f(w_t))`.
pub fn inexact_gd_reference<F>(x: &Matrix, y: &[f64], steps: usize, step_size: f64, mut inject: F) -> GdTrace
where
    F: FnMut(usize, &[f64], &[f64]) -> Vec<f64>,
{
    let mut w = vec![0.0; x.cols()];
    let mut iterates = Vec::with_capacity(steps + 1);
    let mut gradient_errors = Vec::with_capacity(steps);
    iterates.push(w.clone());
    for t in 0..steps {
        let exact = least_squares_gradient(x, y, &w);
        let g = inject(t, &w, &exact);
        gradient_errors.push(linalg::dist2(&g, &exact));
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step_size * gi;
        }
        iterates.push(w.clone());
    }
    GdTrace { iterates, gradient_errors }
}

pub fn exact_gd_reference(x: &Matrix, y: &[f64], steps: usize, step_size: f64) -> GdTrace {
    inexact_gd_reference(x, y, steps, step_size, |_, _, g| g.to_vec())
}

/// `exp(−C₁T/(2C₂))‖w*‖₂ + Tε/C₂`.
pub fn gd_error_bound(c1: f64, c2: f64, steps: usize, eps: f64, w_star_norm: f64) -> f64 {
    let t = steps as f64;
    libm::exp(-c1 * t / (2.0 * c2)) * w_star_norm + t * eps / c2
}
