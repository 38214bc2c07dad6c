//! Exact GP conditioning by Cholesky, both as plain functions and as tape
//! builders that let gradients flow into embeddings and hyperparameters.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::kernel::{self, KernelParameters};
use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weights `W` of the linear mean `μ(z) = W z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanParameters {
    pub w: Vec<f64>,
}

impl MeanParameters {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.dim()), self.w.clone()).expect("row")
    }
}

pub fn linear_mean(x: &[f64], params: &MeanParameters) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::Shape(format!("mean weights of length {} for input of length {}", params.dim(), x.len())));
    }
    Ok(x.iter().zip(&params.w).map(|(a, b)| a * b).sum())
}

/// Raw observations with the standardization statistics of `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
}

/// Standard deviations below this are treated as zero and replaced by a
/// unit scale.
pub const SCALE_FLOOR: f64 = 1e-8;

impl ObservationSet {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} points with {} values", x.len(), y.len())));
        }
        if let Some(d) = x.first().map(Vec::len) {
            if d == 0 || x.iter().any(|p| p.len() != d) {
                return Err(Error::Shape("observation points must share a positive dimension".into()));
            }
        }
        let mut set = Self { x, y, y_mean: 0.0, y_scale: 1.0 };
        set.refresh_statistics();
        Ok(set)
    }

    pub fn empty() -> Self {
        Self { x: Vec::new(), y: Vec::new(), y_mean: 0.0, y_scale: 1.0 }
    }

    fn refresh_statistics(&mut self) {
        let n = self.y.len();
        if n == 0 {
            self.y_mean = 0.0;
            self.y_scale = 1.0;
            return;
        }
        let mean = self.y.iter().sum::<f64>() / n as f64;
        let var = self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        self.y_mean = mean;
        self.y_scale = if sd < SCALE_FLOOR { 1.0 } else { sd };
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if let Some(d) = self.dim() {
            if x.len() != d {
                return Err(Error::Shape(format!("point of length {} in a set of dimension {d}", x.len())));
            }
        }
        self.x.push(x);
        self.y.push(y);
        self.refresh_statistics();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.x.first().map(Vec::len)
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_scale(&self) -> f64 {
        self.y_scale
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.y_mean) / self.y_scale
    }

    pub fn standardized_y(&self) -> Vec<f64> {
        self.y.iter().map(|v| self.standardize(*v)).collect()
    }

    /// Points stacked as an `n × d` matrix.
    pub fn x_matrix(&self) -> Array2<f64> {
        points_matrix(&self.x)
    }

    /// Maps a posterior over standardized values back to raw units.
    pub fn destandardize(&self, post: &GaussianPosterior) -> GaussianPosterior {
        let s2 = self.y_scale * self.y_scale;
        GaussianPosterior {
            mean: post.mean.iter().map(|m| m * self.y_scale + self.y_mean).collect(),
            variance: post.variance.iter().map(|v| v * s2).collect(),
            covariance: post.covariance.as_ref().map(|c| c * s2),
        }
    }
}

pub fn points_matrix(points: &[Vec<f64>]) -> Array2<f64> {
    let d = points.first().map_or(0, Vec::len);
    Array2::from_shape_fn((points.len(), d), |(i, j)| points[i][j])
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

/// Observations already mapped into embedding space: embeddings `z`, their
/// log-scales `u` and standardized targets `y`.
#[derive(Debug, Clone)]
pub struct EmbeddedObservations {
    pub z: Array2<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl EmbeddedObservations {
    pub fn empty(dim: usize) -> Self {
        Self { z: Array2::zeros((0, dim)), u: Vec::new(), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub covariance: Option<Array2<f64>>,
}

impl GaussianPosterior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self, i: usize) -> f64 {
        self.variance[i].sqrt()
    }
}

/// A GP conditioned on observations, held as tape nodes so queries can be
/// differentiated. `alpha` is `K⁻¹(y − m)`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedNodes {
    pub z: Var,
    pub scale: Var,
    pub chol: Var,
    pub alpha: Var,
    pub jitter: f64,
}

/// Conditions on `n` observations. `z` is `n × d`, `u` and `y` are `n × 1`,
/// `log_alpha` is `1 × K`, `w` is `1 × d`.
pub fn condition_nodes(
    g: &mut Graph,
    z: Var,
    u: Var,
    y: Var,
    log_alpha: Var,
    w: Var,
    jitter: f64,
) -> Result<ConditionedNodes> {
    let gram = kernel::normalized_gram(g, z, u, log_alpha)?;
    let (l, used) = kernel::jittered_cholesky(g.value(gram.gram), jitter)?;
    let kj = g.add_diag(gram.gram, used);
    let chol = g.cholesky_known(kj, l);
    let m = g.matmul_bt(z, w);
    let r = g.sub(y, m);
    let t = g.solve_lower(chol, r);
    let alpha = g.solve_lower_t(chol, t);
    Ok(ConditionedNodes { z, scale: gram.scale, chol, alpha, jitter: used })
}

/// Posterior mean and variance (`m × 1` each) at query embeddings.
pub fn query_nodes(
    g: &mut Graph,
    cond: &ConditionedNodes,
    zq: Var,
    uq: Var,
    log_alpha: Var,
    w: Var,
) -> Result<(Var, Var)> {
    let sq = kernel::query_scale(g, zq, uq, log_alpha)?;
    let kqo = kernel::cross_covariance(g, zq, sq, cond.z, cond.scale, log_alpha);
    let prior_mean = g.matmul_bt(zq, w);
    let correction = g.matmul(kqo, cond.alpha);
    let mean = g.add(prior_mean, correction);
    let kt = g.transpose(kqo);
    let v = g.solve_lower(cond.chol, kt);
    let v2 = g.square(v);
    let explained = g.sum_cols(v2);
    let explained = g.transpose(explained);
    let prior_var = prior_variance_nodes(g, uq, cond.jitter);
    let var = g.sub(prior_var, explained);
    let var = g.clamp_min(var, 0.0);
    Ok((mean, var))
}

/// `exp(2u) + jitter`, the prior variance of the normalized kernel.
pub fn prior_variance_nodes(g: &mut Graph, u: Var, jitter: f64) -> Var {
    let two_u = g.scale(u, 2.0);
    let e = g.exp(two_u);
    g.add_const(e, jitter)
}

/// Prior mean and variance at query embeddings, for an empty context.
pub fn prior_nodes(g: &mut Graph, zq: Var, uq: Var, w: Var, jitter: f64) -> (Var, Var) {
    let mean = g.matmul_bt(zq, w);
    (mean, prior_variance_nodes(g, uq, jitter))
}

/// Sum of independent Gaussian log-densities of `y` (`m × 1` constant) on
/// the tape. Variances must be positive.
pub fn log_density_nodes(g: &mut Graph, mean: Var, var: Var, y: Var) -> Result<Var> {
    if let Some(v) = g.value(var).iter().find(|v| !(**v > 0.0)) {
        return Err(Error::DegenerateDensity(*v));
    }
    let m = g.shape(mean).0 as f64;
    let r = g.sub(y, mean);
    let r2 = g.square(r);
    let inv = g.powf(var, -1.0);
    let quad = g.mul(r2, inv);
    let logv = g.log(var);
    let terms = g.add(quad, logv);
    let s = g.sum(terms);
    let s = g.scale(s, -0.5);
    Ok(g.add_const(s, -0.5 * m * LN_2PI))
}

fn check_query(query_z: ArrayView2<f64>, query_u: &[f64], mean: &MeanParameters) -> Result<()> {
    if query_z.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if query_z.nrows() != query_u.len() {
        return Err(Error::Shape(format!("{} queries with {} log-scales", query_z.nrows(), query_u.len())));
    }
    if query_z.ncols() != mean.dim() {
        return Err(Error::Shape(format!("query dim {} vs mean dim {}", query_z.ncols(), mean.dim())));
    }
    Ok(())
}

/// Posterior over standardized targets at the query embeddings. With
/// `full_covariance` the joint covariance is returned as well.
pub fn gp_posterior(
    query_z: ArrayView2<f64>,
    query_u: &[f64],
    obs: &EmbeddedObservations,
    params: &KernelParameters,
    mean: &MeanParameters,
    jitter: f64,
    full_covariance: bool,
) -> Result<GaussianPosterior> {
    check_query(query_z, query_u, mean)?;
    let mut g = Graph::new();
    let zq = g.constant(query_z.to_owned());
    let uq = g.constant(column(query_u));
    let la = g.constant(params.as_row());
    let w = g.constant(mean.as_row());

    if obs.is_empty() {
        let (m, v) = prior_nodes(&mut g, zq, uq, w, jitter);
        let covariance = full_covariance.then(|| prior_covariance(&mut g, zq, uq, la, jitter)).transpose()?;
        return Ok(GaussianPosterior {
            mean: g.value(m).iter().copied().collect(),
            variance: g.value(v).iter().copied().collect(),
            covariance,
        });
    }
    if obs.z.ncols() != query_z.ncols() || obs.u.len() != obs.len() || obs.z.nrows() != obs.len() {
        return Err(Error::Shape("observation embedding shapes disagree".into()));
    }
    let zo = g.constant(obs.z.clone());
    let uo = g.constant(column(&obs.u));
    let yo = g.constant(column(&obs.y));
    let cond = condition_nodes(&mut g, zo, uo, yo, la, w, jitter)?;
    let (m, v) = query_nodes(&mut g, &cond, zq, uq, la, w)?;
    let mean_out: Vec<f64> = g.value(m).iter().copied().collect();
    let variance: Vec<f64> = g.value(v).iter().copied().collect();

    let covariance = if full_covariance {
        let qq = prior_covariance(&mut g, zq, uq, la, cond.jitter)?;
        let sq = kernel::query_scale(&mut g, zq, uq, la)?;
        let kqo = kernel::cross_covariance(&mut g, zq, sq, cond.z, cond.scale, la);
        let kt = g.transpose(kqo);
        let vm = g.solve_lower(cond.chol, kt);
        let vv = g.value(vm);
        let mut c = qq - vv.t().dot(vv);
        for (i, var) in variance.iter().enumerate() {
            c[[i, i]] = *var;
        }
        Some(c)
    } else {
        None
    };
    Ok(GaussianPosterior { mean: mean_out, variance, covariance })
}

fn prior_covariance(g: &mut Graph, zq: Var, uq: Var, la: Var, jitter: f64) -> Result<Array2<f64>> {
    let gram = kernel::normalized_gram(g, zq, uq, la)?;
    let mut c = g.value(gram.gram).clone();
    c.diag_mut().mapv_inplace(|v| v + jitter);
    Ok(c)
}

/// Sum over query points of independent Gaussian log-densities.
pub fn log_predictive_density(posterior: &GaussianPosterior, y_query: &[f64]) -> Result<f64> {
    if y_query.len() != posterior.len() {
        return Err(Error::Shape(format!("{} targets for {} predictions", y_query.len(), posterior.len())));
    }
    let mut total = 0.0;
    for ((m, v), y) in posterior.mean.iter().zip(&posterior.variance).zip(y_query) {
        if !(*v > 0.0) {
            return Err(Error::DegenerateDensity(*v));
        }
        total += -0.5 * (LN_2PI + v.ln()) - (y - m).powi(2) / (2.0 * v);
    }
    Ok(total)
}

/// Exact log marginal likelihood of standardized targets on the tape.
pub fn log_marginal_likelihood_nodes(
    g: &mut Graph,
    z: Var,
    u: Var,
    y: Var,
    log_alpha: Var,
    w: Var,
    jitter: f64,
) -> Result<Var> {
    let n = g.shape(z).0 as f64;
    let cond = condition_nodes(g, z, u, y, log_alpha, w, jitter)?;
    let m = g.matmul_bt(z, w);
    let r = g.sub(y, m);
    let fit = g.mul(r, cond.alpha);
    let fit = g.sum(fit);
    let fit = g.scale(fit, -0.5);
    let d = g.diag(cond.chol);
    let logd = g.log(d);
    let logdet = g.sum(logd);
    let out = g.sub(fit, logdet);
    Ok(g.add_const(out, -0.5 * n * LN_2PI))
}

/// Log marginal likelihood of an observation set under the identity
/// embedding with `u ≡ 0`, on standardized targets.
pub fn log_marginal_likelihood(
    obs: &ObservationSet,
    params: &KernelParameters,
    mean: &MeanParameters,
    jitter: f64,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut g = Graph::new();
    let z = g.constant(obs.x_matrix());
    let u = g.constant(Array2::zeros((obs.len(), 1)));
    let y = g.constant(column(&obs.standardized_y()));
    let la = g.constant(params.as_row());
    let w = g.constant(mean.as_row());
    let l = log_marginal_likelihood_nodes(&mut g, z, u, y, la, w, jitter)?;
    Ok(g.scalar(l))
}
