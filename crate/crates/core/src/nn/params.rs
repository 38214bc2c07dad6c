//! Named parameter tensors, their initialization and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
pub type ParamId = usize;

/// Ordered collection of named parameter tensors.
///
/// Initialization draws from a private ChaCha stream seeded at construction,
/// so two sets built with the same seed and the same sequence of `add_*`
/// calls are bitwise identical.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Leaf nodes for every tensor of a [`ParamSet`] on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id]
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Weight of shape `fan_in × fan_out` drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add_uniform_scaled(name, fan_in, fan_out, bound)
    }

    pub fn add_uniform_scaled(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    /// Places every tensor on `g`, as trainable variables or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients for every tensor, zero-filled where none flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Array2<f64>> {
        self.tensors.iter().zip(&bound.vars).map(|(t, v)| grads.get_or_zeros(*v, t.dim())).collect()
    }

    /// Copies every tensor from `other`, which must share names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.assign(src);
        }
        Ok(())
    }

    /// `self ← (1 − τ)·self + τ·other`
    pub fn soft_update_from(&mut self, other: &ParamSet, tau: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.zip_mut_with(src, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!("tensor {}: {:?} vs {:?}", self.names[i], a.dim(), b.dim())));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment gradient descent over every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn with_lr(lr: f64, params: &ParamSet) -> Self {
        Self::new(AdamConfig { lr, ..AdamConfig::default() }, params)
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len(), "gradient count");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        if lr == 0.0 {
            return;
        }
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Central finite differences of `f` with respect to every entry of `params`.
///
/// Used by gradient checks in tests; `f` is evaluated `2·n` times.
pub fn central_differences<F>(params: &mut ParamSet, step: f64, mut f: F) -> Vec<Array2<f64>>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for id in 0..params.len() {
        let shape = params.get(id).dim();
        let mut d = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = params.get(id)[[r, c]];
                params.get_mut(id)[[r, c]] = orig + step;
                let up = f(params);
                params.get_mut(id)[[r, c]] = orig - step;
                let down = f(params);
                params.get_mut(id)[[r, c]] = orig;
                d[[r, c]] = (up - down) / (2.0 * step);
            }
        }
        out.push(d);
    }
    out
}

/// Largest relative error between two gradients, with an absolute floor so
/// that near-zero entries do not dominate.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
