//! Truncated local polynomial regression at the query point.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::Prompt;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Below this smallest Gram eigenvalue the fit switches to the ridge system.
pub const DEGENERACY_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// The kernel `K(u) = (1 − ‖u‖₁)₊²` at bandwidth `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidSpec(format!("bandwidth {bandwidth} must be positive")));
        }
        Ok(Self { bandwidth })
    }
}

/// `h = n^{−1/(2α+d)}`.
pub fn default_bandwidth(n: usize, dim: usize, smoothness: f64) -> f64 {
    libm::pow(n as f64, -1.0 / (2.0 * smoothness + dim as f64))
}

/// `p = ⌈α⌉`.
pub fn default_degree(smoothness: f64) -> usize {
    libm::ceil(smoothness) as usize
}

pub fn kernel_eval(x: &[f64], h: f64) -> f64 {
    let l1: f64 = x.iter().map(|v| (v / h).abs()).sum();
    let base = (1.0 - l1).max(0.0);
    base * base / libm::pow(h, x.len() as f64)
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Monomials of total degree at most `degree`, in increasing lexicographic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub dim: usize,
    pub degree: usize,
    pub indices: Vec<Vec<usize>>,
}

impl BasisSpec {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut indices = Vec::new();
        let mut cur = alloc::vec![0usize; dim];
        loop {
            if cur.iter().sum::<usize>() <= degree {
                indices.push(cur.clone());
            }
            let mut k = dim;
            loop {
                if k == 0 {
                    debug_assert_eq!(indices.len(), binomial(dim + degree, degree));
                    return Self { dim, degree, indices };
                }
                k -= 1;
                if cur[k] < degree {
                    cur[k] += 1;
                    for slot in cur.iter_mut().skip(k + 1) {
                        *slot = 0;
                    }
                    break;
                }
            }
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

pub fn monomial_basis(x: &[f64], basis: &BasisSpec, h: f64) -> Vec<f64> {
    basis
        .indices
        .iter()
        .map(|nu| {
            let mut v = 1.0;
            for (xi, k) in x.iter().zip(nu) {
                v *= libm::pow(*xi / h, *k as f64) / factorial(*k);
            }
            v
        })
        .collect()
}

/// Rows `√(K_h(X_i − x)/n) · P_h(X_i − x)` and responses `√(K_h(X_i − x)/n) · Y_i`.
pub fn build_weighted_system(prompt: &Prompt, kernel: &KernelSpec, basis: &BasisSpec) -> (Matrix, Vec<f64>) {
    let n = prompt.n();
    let mut design = Matrix::zeros(n, basis.size());
    let mut resp = alloc::vec![0.0; n];
    let mut centered = alloc::vec![0.0; prompt.dim()];
    for i in 0..n {
        for (c, (xi, q)) in centered.iter_mut().zip(prompt.xs[i].iter().zip(&prompt.query)) {
            *c = xi - q;
        }
        let weight = libm::sqrt(kernel_eval(&centered, kernel.bandwidth) / n as f64);
        if weight == 0.0 {
            continue;
        }
        for (slot, b) in design.row_mut(i).iter_mut().zip(monomial_basis(&centered, basis, kernel.bandwidth)) {
            *slot = weight * b;
        }
        resp[i] = weight * prompt.ys[i];
    }
    (design, resp)
}

/// Extreme eigenvalues of `design ᵀ design`.
pub fn spectral_bounds(design: &Matrix) -> (f64, f64) {
    let ev = linalg::sym_eigenvalues(&design.gram());
    match (ev.first(), ev.last()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => (0.0, 0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePath {
    NormalEquations,
    DegenerateFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocPolFit {
    pub w_star: Vec<f64>,
    pub estimate: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub effective_points: usize,
    pub solved_by: SolvePath,
}

pub fn fit_locpol(
    prompt: &Prompt,
    kernel: &KernelSpec,
    basis: &BasisSpec,
    bound: f64,
    ridge_eps: f64,
) -> Result<LocPolFit> {
    if !(bound > 0.0) {
        return Err(Error::InvalidSpec(format!("clamp bound {bound} must be positive")));
    }
    if !(ridge_eps >= 0.0) {
        return Err(Error::InvalidSpec(format!("ridge {ridge_eps} must be nonnegative")));
    }
    prompt.validate()?;
    if prompt.dim() != basis.dim {
        return Err(Error::Shape(format!("prompt dim {} vs basis dim {}", prompt.dim(), basis.dim)));
    }
    let (design, resp) = build_weighted_system(prompt, kernel, basis);
    let effective_points = (0..prompt.n()).filter(|i| design[(*i, 0)] != 0.0).count();
    let gram = design.gram();
    let rhs = design.tr_mat_vec(&resp);
    let ev = linalg::sym_eigenvalues(&gram);
    let (lambda_min, lambda_max) = (ev[0], ev[ev.len() - 1]);

    let normal = if lambda_min > DEGENERACY_THRESHOLD { linalg::solve_spd(&gram, &rhs) } else { None };
    let (w_star, solved_by) = match normal {
        Some(w) => (w, SolvePath::NormalEquations),
        None => {
            let mut ridge = gram.clone();
            for j in 0..ridge.rows() {
                ridge[(j, j)] += ridge_eps;
            }
            let w = linalg::solve_spd(&ridge, &rhs).unwrap_or_else(|| alloc::vec![0.0; basis.size()]);
            (w, SolvePath::DegenerateFallback)
        }
    };
    Ok(LocPolFit {
        estimate: w_star[0].clamp(-bound, bound),
        w_star,
        lambda_min,
        lambda_max,
        effective_points,
        solved_by,
    })
}

/// The estimator with its configuration fixed, ready to apply to prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocPolEstimator {
    pub kernel: KernelSpec,
    pub basis: BasisSpec,
    pub bound: f64,
    pub ridge_eps: f64,
}

impl LocPolEstimator {
    /// Bandwidth `n^{−1/(2α+d)}` and degree `⌈α⌉`.
    pub fn paper_default(n: usize, dim: usize, smoothness: f64, bound: f64) -> Result<Self> {
        Ok(Self {
            kernel: KernelSpec::new(default_bandwidth(n, dim, smoothness))?,
            basis: BasisSpec::new(dim, default_degree(smoothness)),
            bound,
            ridge_eps: DEFAULT_RIDGE,
        })
    }

    pub fn fit(&self, prompt: &Prompt) -> Result<LocPolFit> {
        fit_locpol(prompt, &self.kernel, &self.basis, self.bound, self.ridge_eps)
    }
}
