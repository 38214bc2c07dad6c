//! The combination kernel `Σ_k α_k (⟨z1,z2⟩/d)^k / k!` and its normalized
//! form with a learned log-scale per point.
//!
//! The normalized kernel is
//! `exp(u1)·exp(u2)·K(z1,z2) / sqrt(K(z1,z1)·K(z2,z2))`, so its diagonal is
//! exactly `exp(2u)` and it stays positive semi-definite whenever `K` is.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Graph, Var};

pub const DEFAULT_COMPONENTS: usize = 5;
pub const DEFAULT_JITTER: f64 = 1e-6;
pub const JITTER_ESCALATIONS: usize = 3;

/// Coefficients `α_k = exp(log_alpha_k)`, `k = 1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParameters {
    pub log_alpha: Vec<f64>,
}

impl Default for KernelParameters {
    fn default() -> Self {
        Self::unit(DEFAULT_COMPONENTS)
    }
}

impl KernelParameters {
    /// All `α_k = 1`.
    pub fn unit(components: usize) -> Self {
        Self { log_alpha: vec![0.0; components] }
    }

    pub fn components(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|v| v.exp()).collect()
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.components()), self.log_alpha.clone()).expect("row")
    }
}

fn check_dims(z1: &[f64], z2: &[f64]) -> Result<()> {
    if z1.len() != z2.len() || z1.is_empty() {
        return Err(Error::Shape(format!("kernel inputs of length {} and {}", z1.len(), z2.len())));
    }
    Ok(())
}

/// Evaluates `Σ_k α_k s^k / k!` for a scaled inner product `s`.
pub fn series(s: f64, alphas: &[f64]) -> f64 {
    let mut p = 1.0;
    let mut fact = 1.0;
    let mut acc = 0.0;
    for (k, a) in alphas.iter().enumerate() {
        p *= s;
        fact *= (k + 1) as f64;
        acc += a * p / fact;
    }
    acc
}

fn scaled_inner(z1: &[f64], z2: &[f64]) -> f64 {
    z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>() / z1.len() as f64
}

pub fn combination_kernel(z1: &[f64], z2: &[f64], params: &KernelParameters) -> Result<f64> {
    check_dims(z1, z2)?;
    Ok(series(scaled_inner(z1, z2), &params.alphas()))
}

pub fn normalized_kernel(z1: &[f64], z2: &[f64], u1: f64, u2: f64, params: &KernelParameters) -> Result<f64> {
    check_dims(z1, z2)?;
    let alphas = params.alphas();
    let k11 = series(scaled_inner(z1, z1), &alphas);
    let k22 = series(scaled_inner(z2, z2), &alphas);
    for k in [k11, k22] {
        if !(k > 0.0) {
            return Err(Error::DegenerateEmbedding(k));
        }
    }
    let k12 = series(scaled_inner(z1, z2), &alphas);
    Ok(u1.exp() * u2.exp() * k12 / (k11 * k22).sqrt())
}

/// Gram matrix of the normalized kernel with `jitter` (possibly escalated)
/// on its diagonal.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub matrix: Array2<f64>,
    pub jitter: f64,
}

/// Builds the Gram matrix over the rows of `z` and escalates the jitter
/// ×10 up to three times until a Cholesky factorization succeeds.
pub fn gram_matrix(z: ArrayView2<f64>, u: &[f64], params: &KernelParameters, jitter: f64) -> Result<GramMatrix> {
    if z.nrows() == 0 || z.nrows() != u.len() {
        return Err(Error::Shape(format!("{} points with {} log-scales", z.nrows(), u.len())));
    }
    if jitter < 0.0 {
        return Err(Error::NumericalFailure(format!("negative jitter {jitter}")));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.to_owned());
    let uv = g.constant(Array2::from_shape_vec((u.len(), 1), u.to_vec()).expect("column"));
    let la = g.constant(params.as_row());
    let k = normalized_gram(&mut g, zv, uv, la)?;
    let base = g.value(k.gram).clone();
    let (_, used) = jittered_cholesky(&base, jitter)?;
    let mut matrix = base;
    matrix.diag_mut().mapv_inplace(|v| v + used);
    Ok(GramMatrix { matrix, jitter: used })
}

/// Cholesky factor of `k + j·I`, escalating `j` on failure. Returns the
/// factor and the jitter that succeeded.
pub fn jittered_cholesky(k: &Array2<f64>, jitter: f64) -> Result<(Array2<f64>, f64)> {
    let mut j = jitter;
    for attempt in 0..=JITTER_ESCALATIONS {
        let mut a = k.clone();
        a.diag_mut().mapv_inplace(|v| v + j);
        if let Some(l) = linalg::cholesky(a.view()) {
            return Ok((l, j));
        }
        if attempt < JITTER_ESCALATIONS {
            j = if j > 0.0 { j * 10.0 } else { DEFAULT_JITTER };
        }
    }
    Err(Error::NumericalFailure(format!("Cholesky failed with jitter up to {j:e}")))
}

/// Normalized Gram matrix on the tape, together with the per-point scale
/// `r_i = exp(u_i)/sqrt(K(z_i,z_i))` reused for cross-covariances.
#[derive(Debug, Clone, Copy)]
pub struct GramNodes {
    pub gram: Var,
    pub scale: Var,
}

pub fn normalized_gram(g: &mut Graph, z: Var, u: Var, log_alpha: Var) -> Result<GramNodes> {
    let d = g.shape(z).1 as f64;
    let alpha = g.exp(log_alpha);
    let s = g.matmul_bt(z, z);
    let s = g.scale(s, 1.0 / d);
    let raw = g.poly(s, alpha);
    let kself = g.diag(raw);
    let scale = point_scale(g, kself, u)?;
    let scale_t = g.transpose(scale);
    let k = g.mul_col(raw, scale);
    let gram = g.mul_row(k, scale_t);
    Ok(GramNodes { gram, scale })
}

/// `exp(u)/sqrt(kself)` as an `n × 1` column.
fn point_scale(g: &mut Graph, kself: Var, u: Var) -> Result<Var> {
    if let Some(bad) = g.value(kself).iter().find(|v| !(**v > 0.0)) {
        return Err(Error::DegenerateEmbedding(*bad));
    }
    let inv = g.powf(kself, -0.5);
    let eu = g.exp(u);
    Ok(g.mul(eu, inv))
}

/// Per-point scale for query rows, computing `K(z,z)` from row norms.
pub fn query_scale(g: &mut Graph, zq: Var, uq: Var, log_alpha: Var) -> Result<Var> {
    let d = g.shape(zq).1 as f64;
    let alpha = g.exp(log_alpha);
    let sq = g.square(zq);
    let norms = g.sum_rows(sq);
    let norms = g.scale(norms, 1.0 / d);
    let kself = g.poly(norms, alpha);
    point_scale(g, kself, uq)
}

/// Normalized cross-covariance between query rows and observation rows.
pub fn cross_covariance(
    g: &mut Graph,
    zq: Var,
    scale_q: Var,
    zo: Var,
    scale_o: Var,
    log_alpha: Var,
) -> Var {
    let d = g.shape(zq).1 as f64;
    let alpha = g.exp(log_alpha);
    let s = g.matmul_bt(zq, zo);
    let s = g.scale(s, 1.0 / d);
    let raw = g.poly(s, alpha);
    let k = g.mul_col(raw, scale_q);
    let so_t = g.transpose(scale_o);
    g.mul_row(k, so_t)
}
