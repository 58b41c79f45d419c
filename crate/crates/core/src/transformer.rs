//! Linear-attention transformers: parameters, forward passes, embedding,
//! readout, and the parameter-perturbation and covering bounds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::Prompt;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub embed_dim: usize,
    pub ffn_width: usize,
    pub depth: usize,
    pub param_bound: f64,
    pub input_dim: usize,
    pub clamp: f64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < self.input_dim + 2 {
            return Err(Error::InvalidSpec(format!(
                "embedding dim {} must be at least input dim + 2 = {}",
                self.embed_dim,
                self.input_dim + 2
            )));
        }
        if self.ffn_width == 0 || self.depth == 0 {
            return Err(Error::InvalidSpec("FFN width and depth must be positive".into()));
        }
        if !(self.param_bound > 0.0) || !(self.clamp > 0.0) {
            return Err(Error::InvalidSpec("parameter bound and clamp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl BlockParams {
    pub fn zeros(embed_dim: usize, ffn_width: usize) -> Self {
        Self {
            q: Matrix::zeros(embed_dim, embed_dim),
            k: Matrix::zeros(embed_dim, embed_dim),
            v: Matrix::zeros(embed_dim, embed_dim),
            w1: Matrix::zeros(ffn_width, embed_dim),
            w2: Matrix::zeros(embed_dim, ffn_width),
            b1: vec![0.0; ffn_width],
            b2: vec![0.0; embed_dim],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.q.rows()
    }

    pub fn ffn_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn check_shapes(&self, embed_dim: usize, ffn_width: usize) -> Result<()> {
        let sq = (embed_dim, embed_dim);
        let ok = self.q.shape() == sq
            && self.k.shape() == sq
            && self.v.shape() == sq
            && self.w1.shape() == (ffn_width, embed_dim)
            && self.w2.shape() == (embed_dim, ffn_width)
            && self.b1.len() == ffn_width
            && self.b2.len() == embed_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("block does not conform to d_e = {embed_dim}, d_ffn = {ffn_width}")))
        }
    }

    /// Parameter tensors in checkpoint order: Q, K, V, W1, W2, b1, b2.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.q.as_slice(),
            self.k.as_slice(),
            self.v.as_slice(),
            self.w1.as_slice(),
            self.w2.as_slice(),
            &self.b1,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.q.as_mut_slice(),
            self.k.as_mut_slice(),
            self.v.as_mut_slice(),
            self.w1.as_mut_slice(),
            self.w2.as_mut_slice(),
            &mut self.b1,
            &mut self.b2,
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn project(&mut self, bound: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub arch: ArchSpec,
    pub blocks: Vec<BlockParams>,
}

impl TransformerParams {
    /// Validates shapes and projects every entry into `[−B, B]`.
    pub fn new(arch: ArchSpec, mut blocks: Vec<BlockParams>) -> Result<Self> {
        arch.validate()?;
        if blocks.len() != arch.depth {
            return Err(Error::Shape(format!("{} blocks for depth {}", blocks.len(), arch.depth)));
        }
        for b in &mut blocks {
            b.check_shapes(arch.embed_dim, arch.ffn_width)?;
            b.project(arch.param_bound);
        }
        Ok(Self { arch, blocks })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let blocks = (0..arch.depth).map(|_| BlockParams::zeros(arch.embed_dim, arch.ffn_width)).collect();
        Self::new(arch, blocks)
    }

    pub fn max_abs_param(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_abs()))
    }

    pub fn project(&mut self) {
        let bound = self.arch.param_bound;
        self.blocks.iter_mut().for_each(|b| b.project(bound));
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.tensors().iter().map(|t| t.len()).sum::<usize>()).sum()
    }
}

fn check_square(z: &Matrix, m: &Matrix, name: &str) -> Result<()> {
    if m.shape() != (z.cols(), z.cols()) {
        return Err(Error::Shape(format!("{name} is {:?}, sequence has {} columns", m.shape(), z.cols())));
    }
    Ok(())
}

/// `Z + ZQ (ZK)ᵀ ZV`, evaluated as `ZQ · ((ZK)ᵀ ZV)`.
pub fn attention_forward(z: &Matrix, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_square(z, q, "Q")?;
    check_square(z, k, "K")?;
    check_square(z, v, "V")?;
    let mut out = z.clone();
    if q.is_zero() || k.is_zero() || v.is_zero() {
        return Ok(out);
    }
    let zq = z.matmul(q);
    let zk = z.matmul(k);
    let zv = z.matmul(v);
    let mut g = Matrix::zeros(z.cols(), z.cols());
    gemm(1.0, &zk, true, &zv, false, 0.0, &mut g);
    gemm(1.0, &zq, false, &g, false, 1.0, &mut out);
    Ok(out)
}

/// `Z + (W2 ReLU(W1 Zᵀ + b1 1ᵀ) + b2 1ᵀ)ᵀ`.
pub fn ffn_forward(z: &Matrix, w1: &Matrix, w2: &Matrix, b1: &[f64], b2: &[f64]) -> Result<Matrix> {
    let e = z.cols();
    let f = w1.rows();
    if w1.cols() != e || w2.shape() != (e, f) || b1.len() != f || b2.len() != e {
        return Err(Error::Shape(format!(
            "FFN shapes W1 {:?}, W2 {:?}, b1 {}, b2 {} against {e} columns",
            w1.shape(),
            w2.shape(),
            b1.len(),
            b2.len()
        )));
    }
    let mut hidden = Matrix::zeros(z.rows(), f);
    gemm(1.0, z, false, w1, true, 0.0, &mut hidden);
    for i in 0..z.rows() {
        for (h, b) in hidden.row_mut(i).iter_mut().zip(b1) {
            *h = (*h + b).max(0.0);
        }
    }
    let mut update = Matrix::zeros(z.rows(), e);
    gemm(1.0, &hidden, false, w2, true, 0.0, &mut update);
    let mut out = z.clone();
    for i in 0..z.rows() {
        for ((o, u), b) in out.row_mut(i).iter_mut().zip(update.row(i)).zip(b2) {
            *o += u + b;
        }
    }
    Ok(out)
}

pub fn block_forward(block: &BlockParams, z: &Matrix) -> Result<Matrix> {
    let a = attention_forward(z, &block.q, &block.k, &block.v)?;
    ffn_forward(&a, &block.w1, &block.w2, &block.b1, &block.b2)
}

pub fn tf_forward(params: &TransformerParams, z: &Matrix) -> Result<Matrix> {
    let mut cur = z.clone();
    for b in &params.blocks {
        cur = block_forward(b, &cur)?;
    }
    Ok(cur)
}

/// Rows `(x_i, y_i, 0, …, 0)` followed by the query row `(x, 0, 0, …, 0, 1)`.
pub fn embed(prompt: &Prompt, embed_dim: usize) -> Result<Matrix> {
    let d = prompt.dim();
    if embed_dim < d + 2 {
        return Err(Error::Shape(format!("embedding dim {embed_dim} below input dim + 2 = {}", d + 2)));
    }
    let n = prompt.n();
    let mut z = Matrix::zeros(n + 1, embed_dim);
    for i in 0..n {
        let row = z.row_mut(i);
        row[..d].copy_from_slice(&prompt.xs[i]);
        row[d] = prompt.ys[i];
    }
    let last = z.row_mut(n);
    last[..d].copy_from_slice(&prompt.query);
    last[embed_dim - 1] = 1.0;
    Ok(z)
}

/// Query-row entry in column `d` (zero-based), clamped to `[−M, M]`.
pub fn read(z: &Matrix, clamp: f64, d: usize) -> f64 {
    z[(z.rows() - 1, d)].clamp(-clamp, clamp)
}

pub fn predict(params: &TransformerParams, prompt: &Prompt) -> Result<f64> {
    let z = embed(prompt, params.arch.embed_dim)?;
    let out = tf_forward(params, &z)?;
    Ok(read(&out, params.arch.clamp, params.arch.input_dim))
}

/// Precomputed evaluation schedule that skips structurally zero parameters.
///
/// Blocks whose tensors are mostly zero run on coordinate lists; the rest
/// fall back to the dense kernels. Results agree with [`tf_forward`] up to
/// floating-point reassociation.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    arch: ArchSpec,
    blocks: Vec<BlockPlan>,
}

#[derive(Clone, Debug)]
struct BlockPlan {
    attention: AttentionPlan,
    ffn: FfnPlan,
}

#[derive(Clone, Debug)]
enum AttentionPlan {
    Skip,
    Dense { q: Matrix, k: Matrix, v: Matrix },
    Sparse(SparseAttention),
}

/// Attention restricted to the shared nonzero columns of Q and K and the
/// nonzero columns of V.
#[derive(Clone, Debug)]
struct SparseAttention {
    inner: usize,
    outputs: Vec<usize>,
    q: Vec<(usize, usize, f64)>,
    k: Vec<(usize, usize, f64)>,
    v: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug)]
enum FfnPlan {
    Skip,
    Dense { w1: Matrix, w2: Matrix, b1: Vec<f64>, b2: Vec<f64> },
    Sparse(SparseFfn),
}

#[derive(Clone, Debug)]
struct SparseFfn {
    neurons: Vec<Neuron>,
    bias: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
struct Neuron {
    inputs: Vec<(usize, f64)>,
    offset: f64,
    outputs: Vec<(usize, f64)>,
}

const SPARSE_DENSITY: f64 = 0.25;

fn nnz(m: &Matrix) -> usize {
    m.as_slice().iter().filter(|v| **v != 0.0).count()
}

fn nonzero_columns(m: &Matrix) -> Vec<bool> {
    let mut cols = vec![false; m.cols()];
    for i in 0..m.rows() {
        for (c, v) in cols.iter_mut().zip(m.row(i)) {
            *c |= *v != 0.0;
        }
    }
    cols
}

impl AttentionPlan {
    fn new(b: &BlockParams) -> Self {
        let e = b.embed_dim();
        if b.q.is_zero() || b.k.is_zero() || b.v.is_zero() {
            return Self::Skip;
        }
        let total = nnz(&b.q) + nnz(&b.k) + nnz(&b.v);
        if total as f64 > SPARSE_DENSITY * (3 * e * e) as f64 {
            return Self::Dense { q: b.q.clone(), k: b.k.clone(), v: b.v.clone() };
        }
        let qc = nonzero_columns(&b.q);
        let kc = nonzero_columns(&b.k);
        let mut inner_index = vec![usize::MAX; e];
        let mut inner = 0;
        for j in 0..e {
            if qc[j] && kc[j] {
                inner_index[j] = inner;
                inner += 1;
            }
        }
        let vc = nonzero_columns(&b.v);
        let mut out_index = vec![usize::MAX; e];
        let mut outputs = Vec::new();
        for j in 0..e {
            if vc[j] {
                out_index[j] = outputs.len();
                outputs.push(j);
            }
        }
        let collect = |m: &Matrix, index: &[usize]| {
            let mut entries = Vec::new();
            for r in 0..e {
                for c in 0..e {
                    let val = m[(r, c)];
                    if val != 0.0 && index[c] != usize::MAX {
                        entries.push((r, index[c], val));
                    }
                }
            }
            entries
        };
        if inner == 0 {
            return Self::Skip;
        }
        Self::Sparse(SparseAttention {
            inner,
            q: collect(&b.q, &inner_index),
            k: collect(&b.k, &inner_index),
            v: collect(&b.v, &out_index),
            outputs,
        })
    }

    fn apply(&self, z: &mut Matrix) {
        match self {
            Self::Skip => {}
            Self::Dense { q, k, v } => {
                *z = attention_forward(z, q, k, v).expect("plan shapes were validated");
            }
            Self::Sparse(s) => {
                let rows = z.rows();
                let width = s.outputs.len();
                let mut zq = Matrix::zeros(rows, s.inner);
                let mut zk = Matrix::zeros(rows, s.inner);
                let mut zv = Matrix::zeros(rows, width);
                for i in 0..rows {
                    let row = z.row(i);
                    for &(r, c, val) in &s.q {
                        zq[(i, c)] += row[r] * val;
                    }
                    for &(r, c, val) in &s.k {
                        zk[(i, c)] += row[r] * val;
                    }
                    for &(r, c, val) in &s.v {
                        zv[(i, c)] += row[r] * val;
                    }
                }
                let mut g = Matrix::zeros(s.inner, width);
                gemm(1.0, &zk, true, &zv, false, 0.0, &mut g);
                let mut upd = Matrix::zeros(rows, width);
                gemm(1.0, &zq, false, &g, false, 0.0, &mut upd);
                for i in 0..rows {
                    let src = upd.row(i);
                    let row = z.row_mut(i);
                    for (u, col) in src.iter().zip(&s.outputs) {
                        row[*col] += u;
                    }
                }
            }
        }
    }
}

impl FfnPlan {
    fn new(b: &BlockParams) -> Self {
        let e = b.embed_dim();
        let f = b.ffn_width();
        let dense_nnz = nnz(&b.w1) + nnz(&b.w2);
        let bias_zero = b.b2.iter().all(|v| *v == 0.0);
        if dense_nnz == 0 && bias_zero {
            return Self::Skip;
        }
        if dense_nnz as f64 > SPARSE_DENSITY * (2 * e * f) as f64 {
            return Self::Dense { w1: b.w1.clone(), w2: b.w2.clone(), b1: b.b1.clone(), b2: b.b2.clone() };
        }
        let mut neurons = Vec::new();
        for r in 0..f {
            let outputs: Vec<(usize, f64)> =
                (0..e).filter_map(|c| (b.w2[(c, r)] != 0.0).then(|| (c, b.w2[(c, r)]))).collect();
            if outputs.is_empty() {
                continue;
            }
            let inputs: Vec<(usize, f64)> = b.w1.row(r).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)).collect();
            neurons.push(Neuron { inputs, offset: b.b1[r], outputs });
        }
        let bias = b.b2.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)).collect();
        Self::Sparse(SparseFfn { neurons, bias })
    }

    fn apply(&self, z: &mut Matrix) {
        match self {
            Self::Skip => {}
            Self::Dense { w1, w2, b1, b2 } => {
                *z = ffn_forward(z, w1, w2, b1, b2).expect("plan shapes were validated");
            }
            Self::Sparse(s) => {
                let mut upd = vec![0.0; z.cols()];
                for i in 0..z.rows() {
                    upd.iter_mut().for_each(|u| *u = 0.0);
                    let row = z.row(i);
                    for nrn in &s.neurons {
                        let mut pre = 0.0;
                        for &(c, w) in &nrn.inputs {
                            pre += w * row[c];
                        }
                        let act = (pre + nrn.offset).max(0.0);
                        if act != 0.0 {
                            for &(c, w) in &nrn.outputs {
                                upd[c] += w * act;
                            }
                        }
                    }
                    for &(c, b) in &s.bias {
                        upd[c] += b;
                    }
                    for (o, u) in z.row_mut(i).iter_mut().zip(&upd) {
                        *o += u;
                    }
                }
            }
        }
    }
}

impl ForwardPlan {
    pub fn new(params: &TransformerParams) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockPlan { attention: AttentionPlan::new(b), ffn: FfnPlan::new(b) })
            .collect();
        Self { arch: params.arch, blocks }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs blocks `range` in place.
    pub fn forward_blocks(&self, z: &mut Matrix, range: core::ops::Range<usize>) -> Result<()> {
        if z.cols() != self.arch.embed_dim {
            return Err(Error::Shape(format!("sequence has {} columns, model {}", z.cols(), self.arch.embed_dim)));
        }
        for b in &self.blocks[range] {
            b.attention.apply(z);
            b.ffn.apply(z);
        }
        Ok(())
    }

    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = z.clone();
        self.forward_blocks(&mut out, 0..self.blocks.len())?;
        Ok(out)
    }

    pub fn predict(&self, prompt: &Prompt) -> Result<f64> {
        let out = self.forward(&embed(prompt, self.arch.embed_dim)?)?;
        Ok(read(&out, self.arch.clamp, self.arch.input_dim))
    }
}

fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Natural log of `6^L (B+1)^{3L} (R+1)^{4L} (n+1)^{5L/2} d_e^{6L} d_ffn^{3L/2} δ`;
/// `−∞` when `δ = 0`.
pub fn lipschitz_log_bound(arch: &ArchSpec, radius: f64, delta: f64, n: usize) -> f64 {
    if delta == 0.0 {
        return f64::NEG_INFINITY;
    }
    let l = arch.depth as f64;
    l * ln(6.0)
        + 3.0 * l * ln(arch.param_bound + 1.0)
        + 4.0 * l * ln(radius + 1.0)
        + 2.5 * l * ln(n as f64 + 1.0)
        + 6.0 * l * ln(arch.embed_dim as f64)
        + 1.5 * l * ln(arch.ffn_width as f64)
        + ln(delta)
}

/// `24 L d_e (d_e + d_ffn) · log((B+1)^L (M+2)^{2L} (n+1)^L d_e^L d_ffn^L / δ)`.
pub fn covering_log_bound(arch: &ArchSpec, clamp: f64, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= clamp) {
        return Err(Error::DeltaOutOfRange { delta, max: clamp });
    }
    let l = arch.depth as f64;
    let e = arch.embed_dim as f64;
    let f = arch.ffn_width as f64;
    let inner = l * ln(arch.param_bound + 1.0) + 2.0 * l * ln(clamp + 2.0) + l * ln(n as f64 + 1.0) + l * ln(e) + l * ln(f)
        - ln(delta);
    Ok(24.0 * l * e * (e + f) * inner)
}

/// Tail term of the ERM expectation bound,
/// `c (M+1)^5 L d_e (d_e + d_ffn) (L log((B+1) n d_e d_ffn) + log Γ) / Γ`.
pub fn generalization_tail(constant: f64, arch: &ArchSpec, clamp: f64, n: usize, gamma: usize) -> f64 {
    let l = arch.depth as f64;
    let e = arch.embed_dim as f64;
    let f = arch.ffn_width as f64;
    let g = gamma as f64;
    let log_term = l * ln((arch.param_bound + 1.0) * n as f64 * e * f) + ln(g);
    constant * libm::pow(clamp + 1.0, 5.0) * l * e * (e + f) * log_term / g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_attention() {
        let z = Matrix::from_vec(1, 1, vec![2.0]);
        let one = Matrix::from_vec(1, 1, vec![1.0]);
        assert_eq!(attention_forward(&z, &one, &one, &one).unwrap()[(0, 0)], 10.0);
    }

    #[test]
    fn scalar_ffn() {
        let one = Matrix::from_vec(1, 1, vec![1.0]);
        let neg = Matrix::from_vec(1, 1, vec![-1.0]);
        let pos = Matrix::from_vec(1, 1, vec![2.0]);
        assert_eq!(ffn_forward(&neg, &one, &one, &[0.0], &[0.0]).unwrap()[(0, 0)], -1.0);
        assert_eq!(ffn_forward(&pos, &one, &one, &[0.0], &[0.0]).unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn shape_errors() {
        let z = Matrix::zeros(2, 3);
        let bad = Matrix::zeros(2, 2);
        assert!(attention_forward(&z, &bad, &bad, &bad).is_err());
        assert!(ffn_forward(&z, &bad, &bad, &[0.0; 2], &[0.0; 3]).is_err());
    }
}
