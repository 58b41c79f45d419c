//! Explicit ReLU networks for products and monomials with certified error,
//! network composition, and residual absorption.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::dd::DoubleDouble;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Self {
        assert_eq!(weight.rows(), bias.len(), "affine bias length mismatch");
        Self { weight, bias }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn max_abs(&self) -> f64 {
        self.bias.iter().fold(self.weight.max_abs(), |m, v| m.max(v.abs()))
    }
}

/// Scalars a network can be evaluated in.
pub trait NetScalar: Copy + Add<Output = Self> + Mul<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn relu(self) -> Self;
}

impl NetScalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
}

impl NetScalar for DoubleDouble {
    fn from_f64(v: f64) -> Self {
        DoubleDouble::new(v)
    }
    fn relu(self) -> Self {
        if self > DoubleDouble::ZERO {
            self
        } else {
            DoubleDouble::ZERO
        }
    }
}

/// `A_{L+1} ∘ ReLU ∘ A_L ∘ ⋯ ∘ ReLU ∘ A_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layers: Vec<Affine>,
    /// Declared bound on every weight and bias; never below the actual maximum.
    pub param_bound: f64,
    pub cert_error: f64,
    pub input_box: Vec<(f64, f64)>,
}

impl NetSpec {
    pub fn new(layers: Vec<Affine>, param_bound: f64, cert_error: f64, input_box: Vec<(f64, f64)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one affine layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if input_box.len() != layers[0].in_dim() {
            return Err(Error::Shape("input box does not match the input dimension".into()));
        }
        let net = Self { layers, param_bound, cert_error, input_box };
        if net.max_abs_param() > param_bound {
            return Err(Error::InvalidSpec(format!(
                "declared parameter bound {param_bound} below actual {}",
                net.max_abs_param()
            )));
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Largest hidden layer.
    pub fn width(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim()).max().unwrap_or(0)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim()).collect()
    }

    pub fn max_abs_param(&self) -> f64 {
        self.layers.iter().fold(0.0_f64, |m, l| m.max(l.max_abs()))
    }

    /// Evaluation order per output: weighted inputs left to right, skipping
    /// zero weights, then the bias.
    pub fn eval_in<S: NetScalar>(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.input_dim(), "network input dimension mismatch");
        let mut cur: Vec<S> = x.to_vec();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim());
            for r in 0..layer.out_dim() {
                let mut acc = S::from_f64(0.0);
                for (w, v) in layer.weight.row(r).iter().zip(&cur) {
                    if *w != 0.0 {
                        acc = acc + S::from_f64(*w) * *v;
                    }
                }
                acc = acc + S::from_f64(layer.bias[r]);
                next.push(if idx < last { acc.relu() } else { acc });
            }
            cur = next;
        }
        cur
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_in(x)
    }

    /// Drops hidden neurons that are constantly zero or never read.
    pub fn trimmed(&self) -> NetSpec {
        let mut layers = self.layers.clone();
        loop {
            let mut changed = false;
            for h in 0..layers.len() - 1 {
                let (left, right) = layers.split_at_mut(h + 1);
                let layer = &left[h];
                let next = &right[0];
                let keep: Vec<usize> = (0..layer.out_dim())
                    .filter(|&r| {
                        let dead_in = layer.weight.row(r).iter().all(|w| *w == 0.0) && layer.bias[r] <= 0.0;
                        let dead_out = (0..next.out_dim()).all(|o| next.weight[(o, r)] == 0.0);
                        !(dead_in || dead_out)
                    })
                    .collect();
                if keep.len() == layer.out_dim() {
                    continue;
                }
                changed = true;
                let mut w = Matrix::zeros(keep.len(), layer.in_dim());
                let mut b = vec![0.0; keep.len()];
                for (i, &r) in keep.iter().enumerate() {
                    w.row_mut(i).copy_from_slice(layer.weight.row(r));
                    b[i] = layer.bias[r];
                }
                let mut nw = Matrix::zeros(next.out_dim(), keep.len());
                for o in 0..next.out_dim() {
                    for (i, &r) in keep.iter().enumerate() {
                        nw[(o, i)] = next.weight[(o, r)];
                    }
                }
                left[h] = Affine::new(w, b);
                right[0] = Affine::new(nw, next.bias.clone());
            }
            if !changed {
                break;
            }
        }
        NetSpec { layers, param_bound: self.param_bound, cert_error: self.cert_error, input_box: self.input_box.clone() }
    }

    /// Zero-pads every hidden layer to `width` neurons.
    pub fn padded(&self, width: usize) -> Result<NetSpec> {
        if self.width() > width {
            return Err(Error::Shape(format!("cannot pad width {} down to {width}", self.width())));
        }
        let mut layers = self.layers.clone();
        for h in 0..layers.len() - 1 {
            let extra = width - layers[h].out_dim();
            if extra == 0 {
                continue;
            }
            let cur = &layers[h];
            let mut w = Matrix::zeros(width, cur.in_dim());
            for r in 0..cur.out_dim() {
                w.row_mut(r).copy_from_slice(cur.weight.row(r));
            }
            let mut b = cur.bias.clone();
            b.resize(width, 0.0);
            let next = &layers[h + 1];
            let mut nw = Matrix::zeros(next.out_dim(), width);
            for o in 0..next.out_dim() {
                nw.row_mut(o)[..next.in_dim()].copy_from_slice(next.weight.row(o));
            }
            let nb = next.bias.clone();
            layers[h] = Affine::new(w, b);
            layers[h + 1] = Affine::new(nw, nb);
        }
        Ok(NetSpec { layers, param_bound: self.param_bound, cert_error: self.cert_error, input_box: self.input_box.clone() })
    }

    fn with_certificate(mut self, param_bound: f64, cert_error: f64) -> Self {
        debug_assert!(self.max_abs_param() <= param_bound);
        self.param_bound = param_bound;
        self.cert_error = cert_error;
        self
    }
}

fn symmetric_box(dim: usize, c: f64) -> Vec<(f64, f64)> {
    vec![(-c, c); dim]
}

/// `f2 ∘ f1` with the boundary affine maps fused into one layer.
///
/// The result's certificate is unknown in general and is reported as
/// infinite unless both parts are exact.
pub fn compose_nets(f1: &NetSpec, f2: &NetSpec) -> Result<NetSpec> {
    if f1.output_dim() != f2.input_dim() {
        return Err(Error::Shape(format!("output dim {} vs input dim {}", f1.output_dim(), f2.input_dim())));
    }
    let last = &f1.layers[f1.layers.len() - 1];
    let first = &f2.layers[0];
    let weight = first.weight.matmul(&last.weight);
    let mut bias = first.weight.mat_vec(&last.bias);
    for (b, c) in bias.iter_mut().zip(&first.bias) {
        *b += c;
    }
    let m = f1.output_dim() as f64;
    let boundary = m * first.weight.max_abs() * last.weight.max_abs().max(last.bias.iter().fold(0.0, |a, v| a.max(v.abs())))
        + first.bias.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let param_bound = boundary.max(f1.param_bound).max(f2.param_bound);
    let mut layers: Vec<Affine> = f1.layers[..f1.layers.len() - 1].to_vec();
    layers.push(Affine::new(weight, bias));
    layers.extend(f2.layers[1..].iter().cloned());
    let cert_error = if f1.cert_error == 0.0 && f2.cert_error == 0.0 { 0.0 } else { f64::INFINITY };
    NetSpec::new(layers, param_bound, cert_error, f1.input_box.clone())
}

/// Runs nets of equal depth side by side on concatenated inputs.
pub fn parallel_nets(nets: &[NetSpec]) -> Result<NetSpec> {
    let depth = nets.first().ok_or_else(|| Error::Shape("no networks to stack".into()))?.depth();
    if nets.iter().any(|n| n.depth() != depth) {
        return Err(Error::Shape("stacked networks must share a depth".into()));
    }
    let mut layers = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let rows: usize = nets.iter().map(|n| n.layers[l].out_dim()).sum();
        let cols: usize = nets.iter().map(|n| n.layers[l].in_dim()).sum();
        let mut w = Matrix::zeros(rows, cols);
        let mut b = Vec::with_capacity(rows);
        let (mut r0, mut c0) = (0, 0);
        for n in nets {
            let a = &n.layers[l];
            for r in 0..a.out_dim() {
                w.row_mut(r0 + r)[c0..c0 + a.in_dim()].copy_from_slice(a.weight.row(r));
            }
            b.extend_from_slice(&a.bias);
            r0 += a.out_dim();
            c0 += a.in_dim();
        }
        layers.push(Affine::new(w, b));
    }
    let param_bound = nets.iter().fold(0.0_f64, |m, n| m.max(n.param_bound));
    let cert_error = nets.iter().fold(0.0_f64, |m, n| m.max(n.cert_error));
    let input_box = nets.iter().flat_map(|n| n.input_box.iter().copied()).collect();
    NetSpec::new(layers, param_bound, cert_error, input_box)
}

/// Exact identity on one coordinate through `depth ≥ 1` hidden layers of
/// paired ReLUs.
pub fn identity_net(depth: usize, c: f64) -> NetSpec {
    assert!(depth >= 1);
    let mut layers = vec![Affine::new(Matrix::from_rows(&[vec![1.0], vec![-1.0]]), vec![0.0; 2])];
    for _ in 1..depth {
        layers.push(Affine::new(Matrix::identity(2), vec![0.0; 2]));
    }
    layers.push(Affine::new(Matrix::from_rows(&[vec![1.0, -1.0]]), vec![0.0]));
    NetSpec::new(layers, 1.0, 0.0, vec![(-c, c)]).expect("identity net is well formed")
}

fn affine_net(weight: Matrix, bias: Vec<f64>, input_box: Vec<(f64, f64)>) -> NetSpec {
    let layer = Affine::new(weight, bias);
    let bound = layer.max_abs();
    NetSpec::new(vec![layer], bound, 0.0, input_box).expect("single affine layer is well formed")
}

/// A rewrite that lets a residual FFN block compute a plain FFN map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnBlockRewrite {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl FfnBlockRewrite {
    /// `x + W2′ ReLU(W1′ x + b1′) + b2′`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> =
            self.w1.mat_vec(x).iter().zip(&self.b1).map(|(h, b)| (h + b).max(0.0)).collect();
        let out = self.w2.mat_vec(&hidden);
        x.iter().zip(out).zip(&self.b2).map(|((xi, o), b)| xi + (o + b)).collect()
    }
}

pub fn absorb_residual(w1: &Matrix, w2: &Matrix, b1: &[f64], b2: &[f64], bound: f64) -> Result<FfnBlockRewrite> {
    if !(bound >= 1.0) {
        return Err(Error::BoundTooSmall(bound));
    }
    let d = w1.rows();
    if w1.shape() != (d, d) || w2.shape() != (d, d) || b1.len() != d || b2.len() != d {
        return Err(Error::Shape(format!("absorption needs square {d}×{d} maps")));
    }
    let largest = [w1.max_abs(), w2.max_abs()]
        .into_iter()
        .chain(b1.iter().chain(b2).map(|v| v.abs()))
        .fold(0.0, f64::max);
    if largest > bound {
        return Err(Error::InvalidSpec(format!("entry {largest} exceeds bound {bound}")));
    }
    let mut nw1 = Matrix::zeros(3 * d, d);
    let mut nw2 = Matrix::zeros(d, 3 * d);
    for r in 0..d {
        nw1.row_mut(r).copy_from_slice(w1.row(r));
        nw1[(d + r, r)] = 1.0;
        nw1[(2 * d + r, r)] = -1.0;
        nw2.row_mut(r)[..d].copy_from_slice(w2.row(r));
        nw2[(r, d + r)] = -1.0;
        nw2[(r, 2 * d + r)] = 1.0;
    }
    let mut nb1 = b1.to_vec();
    nb1.resize(3 * d, 0.0);
    Ok(FfnBlockRewrite { w1: nw1, w2: nw2, b1: nb1, b2: b2.to_vec() })
}

/// Levels of square refinement resolved per hidden layer of a width-`9N+1` product net.
pub fn product_levels(n: usize) -> u32 {
    let target = (9 * n + 1) as f64 / 4.0;
    libm::floor(libm::log2(target)) as u32
}

fn hat(t: f64) -> f64 {
    if t <= 0.5 {
        2.0 * t
    } else {
        2.0 - 2.0 * t
    }
}

fn hat_power(mut t: f64, times: u32) -> f64 {
    for _ in 0..times {
        t = hat(t);
    }
    t
}

/// Value at `lo + k·step` plus slope increments, so that
/// `F(x) = F(lo) + Σ_k coef_k ReLU(x − lo − k·step)` on the grid's range.
fn relu_expansion(values: &[f64], step: f64) -> (f64, Vec<f64>) {
    let slopes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) / step).collect();
    let mut coef = Vec::with_capacity(slopes.len());
    for (k, s) in slopes.iter().enumerate() {
        coef.push(if k == 0 { *s } else { s - slopes[k - 1] });
    }
    (values[0], coef)
}

/// Affine expression in the neurons of the current hidden layer.
#[derive(Clone, Debug)]
struct Expr {
    constant: f64,
    terms: Vec<(usize, f64)>,
}

/// Approximates `xy` on `[−C, C]²` through `xy = C²(a(u) − a(v))` with
/// `u = (x+y)/(2C)`, `v = (x−y)/(2C)` and `a` the sawtooth interpolant of
/// the square; each hidden layer resolves [`product_levels`] dyadic levels.
pub fn build_product_net(c: f64, n: usize, depth: usize) -> Result<NetSpec> {
    if !(c >= 1.0) || n == 0 || depth == 0 {
        return Err(Error::InvalidSpec(format!("product net needs C ≥ 1, N ≥ 1, L ≥ 1 (got {c}, {n}, {depth})")));
    }
    let j = product_levels(n);
    let step = libm::ldexp(1.0, -(j as i32));
    let cells = 1usize << j;
    let s = 1.0 / (2.0 * c);
    let channel_inputs = [[s, s], [s, -s]];

    // First hidden layer: knots −1 + k·2^{−j} on each channel.
    let per_channel = 2 * cells;
    let mut w = Matrix::zeros(2 * per_channel, 2);
    let mut b = vec![0.0; 2 * per_channel];
    for (ch, inputs) in channel_inputs.iter().enumerate() {
        for k in 0..per_channel {
            let r = ch * per_channel + k;
            w[(r, 0)] = inputs[0];
            w[(r, 1)] = inputs[1];
            b[r] = 1.0 - k as f64 * step;
        }
    }
    let mut layers = vec![Affine::new(w, b)];
    let grid: Vec<f64> = (0..=per_channel).map(|k| -1.0 + k as f64 * step).collect();
    let mut tooth = Vec::with_capacity(2);
    let mut square = Vec::with_capacity(2);
    for ch in 0..2 {
        let base = ch * per_channel;
        let tv: Vec<f64> = grid.iter().map(|z| hat_power(z.abs(), j)).collect();
        let av: Vec<f64> = grid.iter().map(|z| square_interpolant(z.abs(), j)).collect();
        let (t0, tc) = relu_expansion(&tv, step);
        let (a0, ac) = relu_expansion(&av, step);
        tooth.push(Expr { constant: t0, terms: tc.iter().enumerate().map(|(k, v)| (base + k, *v)).collect() });
        square.push(Expr { constant: a0, terms: ac.iter().enumerate().map(|(k, v)| (base + k, *v)).collect() });
    }

    // Later layers: `cells` knots of the current tooth plus a carry of the square.
    let unit: Vec<f64> = (0..=cells).map(|k| k as f64 * step).collect();
    let (g0, gc) = relu_expansion(&unit.iter().map(|t| hat_power(*t, j)).collect::<Vec<_>>(), step);
    let per_channel_later = cells + 1;
    for layer in 1..depth {
        let prev_width = layers[layers.len() - 1].out_dim();
        let mut w = Matrix::zeros(2 * per_channel_later, prev_width);
        let mut b = vec![0.0; 2 * per_channel_later];
        let resolved = j * layer as u32;
        let refine: Vec<f64> = unit
            .iter()
            .map(|t| {
                -(1..=j).map(|r| hat_power(*t, r) * libm::ldexp(1.0, -2 * (resolved + r) as i32)).sum::<f64>()
            })
            .collect();
        let (h0, hc) = relu_expansion(&refine, step);
        let mut next_tooth = Vec::with_capacity(2);
        let mut next_square = Vec::with_capacity(2);
        for ch in 0..2 {
            let base = ch * per_channel_later;
            for k in 0..cells {
                for &(src, v) in &tooth[ch].terms {
                    w[(base + k, src)] += v;
                }
                b[base + k] = tooth[ch].constant - k as f64 * step;
            }
            let carry = base + cells;
            for &(src, v) in &square[ch].terms {
                w[(carry, src)] += v;
            }
            b[carry] = square[ch].constant;
            next_tooth.push(Expr { constant: g0, terms: gc.iter().enumerate().map(|(k, v)| (base + k, *v)).collect() });
            let mut terms: Vec<(usize, f64)> = hc.iter().enumerate().map(|(k, v)| (base + k, *v)).collect();
            terms.push((carry, 1.0));
            next_square.push(Expr { constant: h0, terms });
        }
        layers.push(Affine::new(w, b));
        tooth = next_tooth;
        square = next_square;
    }

    let width = layers[layers.len() - 1].out_dim();
    let scale = c * c;
    let mut w = Matrix::zeros(1, width);
    for &(src, v) in &square[0].terms {
        w[(0, src)] += scale * v;
    }
    for &(src, v) in &square[1].terms {
        w[(0, src)] -= scale * v;
    }
    layers.push(Affine::new(w, vec![scale * (square[0].constant - square[1].constant)]));

    let bound = 32.0 * c * c * n as f64;
    let cert = 24.0 * c * c * libm::pow(n as f64, -(depth as f64));
    NetSpec::new(layers, bound, cert, symmetric_box(2, c))?.padded(9 * n + 1)
}

/// `t − Σ_{s ≤ levels} hat^s(t)/4^s`, the piecewise-linear interpolant of
/// `t²` on the grid `2^{−levels}ℤ ∩ [0, 1]`.
fn square_interpolant(t: f64, levels: u32) -> f64 {
    t - (1..=levels).map(|s| hat_power(t, s) * libm::ldexp(1.0, -2 * s as i32)).sum::<f64>()
}

/// Side length of the square on which the pairwise products inside
/// [`build_multiprod_net`] operate. A power of two keeps every weight an
/// exact dyadic rational.
pub const INNER_PRODUCT_DOMAIN: f64 = 2.0;

pub fn multiprod_cert(c: f64, k: usize, n: usize, depth: usize) -> f64 {
    30.0 * libm::pow(c, k as f64) * (k as f64 - 1.0) * libm::pow(n as f64 + 1.0, -(7.0 * (k * depth) as f64))
}

/// Approximates `x₁⋯x_k` on `[−C, C]^k` by chaining pairwise products, each
/// a product net with `N+1` and depth `7kL`, carrying pending inputs through
/// paired-ReLU identity channels.
pub fn build_multiprod_net(c: f64, k: usize, n: usize, depth: usize) -> Result<NetSpec> {
    if !(c >= 1.0) || k < 2 || n == 0 || depth == 0 {
        return Err(Error::InvalidSpec(format!("multi-product needs C ≥ 1, k ≥ 2, N, L ≥ 1 (got {c}, {k}, {n}, {depth})")));
    }
    let stage_depth = 7 * k * depth;
    let pair = build_product_net(INNER_PRODUCT_DOMAIN, n + 1, stage_depth)?;
    let unit_box = symmetric_box(k, 1.0);

    let mut scale_in = Matrix::identity(k);
    scale_in.scale(1.0 / c);
    let mut net = affine_net(scale_in, vec![0.0; k], symmetric_box(k, c));
    for stage in 0..k - 1 {
        let pending = k - stage - 2;
        let mut parts = vec![pair.clone()];
        parts.extend((0..pending).map(|_| identity_net(stage_depth, INNER_PRODUCT_DOMAIN)));
        let mut stage_net = parallel_nets(&parts)?;
        stage_net.input_box = unit_box[..2 + pending].to_vec();
        net = compose_nets(&net, &stage_net)?;
    }
    let scale_out = affine_net(Matrix::from_vec(1, 1, vec![libm::pow(c, k as f64)]), vec![0.0], vec![(-1.1, 1.1)]);
    net = compose_nets(&net, &scale_out)?;

    let width = 9 * (n + 1) + 2 * k - 1;
    let bound = 3.0 * libm::pow(c, k as f64) * libm::pow(40.0 * (n as f64 + 1.0), 2.0);
    Ok(net.padded(width)?.with_certificate(bound, multiprod_cert(c, k, n, depth)))
}

/// Approximates `x^ν` on `[−C, C]^d` for `|ν| ≤ cap`. Degree zero and one
/// are exact; higher degrees duplicate coordinates, pad with the constant 1
/// up to `cap` factors, and feed a `cap`-fold multi-product.
pub fn build_monomial_net(nu: &[usize], cap: usize, c: f64, n: usize, depth: usize) -> Result<NetSpec> {
    let degree: usize = nu.iter().sum();
    if degree > cap {
        return Err(Error::DegreeExceedsCap { degree, cap });
    }
    if !(c >= 1.0) || n == 0 || depth == 0 || nu.is_empty() {
        return Err(Error::InvalidSpec("monomial net needs C ≥ 1, N, L ≥ 1 and d ≥ 1".into()));
    }
    let d = nu.len();
    let total_depth = 7 * cap * depth * cap.saturating_sub(1) + 1;
    let width = 9 * (n + 1) + 2 * cap - 1;
    let bound = 3.0 * (cap as f64 + 1.0) * libm::pow(c, cap as f64) * libm::pow(40.0 * (n as f64 + 1.0), 2.0);
    let input_box = symmetric_box(d, c);

    let net = match degree {
        0 => {
            let mut layers = vec![Affine::zeros(1, d)];
            for _ in 1..total_depth {
                layers.push(Affine::zeros(1, 1));
            }
            layers.push(Affine::new(Matrix::zeros(1, 1), vec![1.0]));
            NetSpec::new(layers, 1.0, 0.0, input_box)?
        }
        1 => {
            let coord = nu.iter().position(|v| *v == 1).expect("degree one has a coordinate");
            let mut select = Matrix::zeros(1, d);
            select[(0, coord)] = 1.0;
            compose_nets(&affine_net(select, vec![0.0], input_box), &identity_net(total_depth, c))?
        }
        _ => {
            let used: Vec<usize> = (0..d).filter(|j| nu[*j] > 0).collect();
            let mut w = Matrix::zeros(2 * used.len(), d);
            for (p, j) in used.iter().enumerate() {
                w[(2 * p, *j)] = 1.0;
                w[(2 * p + 1, *j)] = -1.0;
            }
            let mut out = Matrix::zeros(cap, 2 * used.len());
            let mut out_bias = vec![0.0; cap];
            let mut slot = 0;
            for (p, j) in used.iter().enumerate() {
                for _ in 0..nu[*j] {
                    out[(slot, 2 * p)] = 1.0;
                    out[(slot, 2 * p + 1)] = -1.0;
                    slot += 1;
                }
            }
            out_bias[slot..].iter_mut().for_each(|b| *b = 1.0);
            let dup = NetSpec::new(
                vec![Affine::new(w, vec![0.0; 2 * used.len()]), Affine::new(out, out_bias)],
                1.0,
                0.0,
                input_box,
            )?;
            let prod = build_multiprod_net(c, cap, n, depth)?;
            compose_nets(&dup, &prod)?.with_certificate(prod.param_bound, prod.cert_error)
        }
    };
    Ok(net.padded(width)?.with_certificate(bound, net.cert_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_fit_the_width() {
        for n in 1..40 {
            let j = product_levels(n);
            assert!(j >= 1);
            assert!((1usize << (j + 2)) <= 9 * n + 1);
            assert!((1usize << (j + 3)) > 9 * n + 1);
        }
    }

    #[test]
    fn square_interpolant_hits_grid() {
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            assert_eq!(square_interpolant(t, 3), t * t);
        }
        assert!((square_interpolant(1.0 / 16.0, 3) - 1.0 / 256.0 - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn product_net_structure() {
        let net = build_product_net(1.0, 2, 6).unwrap();
        assert_eq!(net.depth(), 6);
        assert_eq!(net.width(), 19);
        assert_eq!(net.cert_error, 0.375);
        assert!(net.max_abs_param() <= net.param_bound);
    }

    #[test]
    fn trimming_preserves_function() {
        let net = build_monomial_net(&[1, 1], 2, 1.0, 1, 1).unwrap();
        let t = net.trimmed();
        assert!(t.width() < net.width());
        for x in [[0.3, -0.7], [1.0, 1.0], [-0.25, 0.5]] {
            assert_eq!(net.eval(&x), t.eval(&x));
        }
    }
}
