//! Split-pivot meta-learning loss and the surrogate optimizer step.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::TdklModel;
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::gp::posterior::log_density_nodes;
use crate::gp::{points_matrix, ObservationSet};
use crate::nn::{Adam, AdamConfig, Bound, Graph, Var};

/// Draws a shuffled order and a pivot `M ~ U{1, …, T−1}`.
pub(crate) fn draw_split<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    if len < 2 {
        return Err(Error::TooShort { needed: 2, got: len });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let m = rng.random_range(1..len);
    Ok((order, m))
}

/// Negative log predictive density of the points `order[m..]` given
/// `order[..m]`, on values standardized by the observed split.
pub(crate) fn loss_nodes(
    model: &TdklModel,
    g: &mut Graph,
    p: &Bound,
    traj: &Trajectory,
    order: &[usize],
    m: usize,
) -> Result<Var> {
    if m == 0 || m >= order.len() {
        return Err(Error::Config(format!("pivot {m} outside 1..{}", order.len())));
    }
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| traj.xs()[i].clone()).collect(), idx.iter().map(|&i| traj.ys()[i]).collect())
    };
    let (xo, yo) = pick(&order[..m]);
    let (xq, yq) = pick(&order[m..]);
    let obs = ObservationSet::new(xo, yo)?;
    let yq_std: Vec<f64> = yq.iter().map(|v| obs.standardize(*v)).collect();
    let xo = g.constant(obs.x_matrix());
    let yo = g.constant(col(obs.standardized_y()));
    let xq = g.constant(points_matrix(&xq));
    let yq = g.constant(col(yq_std));
    let q = model.posterior_nodes(g, p, xq, xo, yo)?;
    let lpd = log_density_nodes(g, q.mean, q.var, yq)?;
    Ok(g.scale(lpd, -1.0))
}

fn col(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

/// Split-pivot loss for an explicit order and pivot.
pub fn split_pivot_loss_at(model: &TdklModel, traj: &Trajectory, order: &[usize], m: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    let l = loss_nodes(model, &mut g, &p, traj, order, m)?;
    Ok(g.scalar(l))
}

/// Split-pivot loss and per-tensor gradients for an explicit order and
/// pivot.
pub fn split_pivot_loss_and_grads_at(
    model: &TdklModel,
    traj: &Trajectory,
    order: &[usize],
    m: usize,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let l = loss_nodes(model, &mut g, &p, traj, order, m)?;
    let value = g.scalar(l);
    Ok((value, model.params.collect_grads(&p, &g.backward(l))))
}

/// Split-pivot loss with a random shuffle and pivot.
pub fn split_pivot_loss<R: Rng + ?Sized>(model: &TdklModel, traj: &Trajectory, rng: &mut R) -> Result<f64> {
    let (order, m) = draw_split(traj.len(), rng)?;
    split_pivot_loss_at(model, traj, &order, m)
}

/// Adam state for surrogate training.
#[derive(Debug, Clone)]
pub struct SurrogateTrainer {
    adam: Adam,
}

impl SurrogateTrainer {
    pub fn new(model: &TdklModel) -> Self {
        Self::with_lr(model, model.config.learning_rate)
    }

    pub fn with_lr(model: &TdklModel, lr: f64) -> Self {
        Self { adam: Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &model.params) }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.config.lr = lr;
    }

    /// Batch-mean loss and per-tensor gradients without updating.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        model: &TdklModel,
        batch: &[&Trajectory],
        rng: &mut R,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut terms = Vec::with_capacity(batch.len());
        for traj in batch {
            let (order, m) = draw_split(traj.len(), rng)?;
            terms.push(loss_nodes(model, &mut g, &p, traj, &order, m)?);
        }
        let stacked = g.concat_rows(&terms);
        let loss = g.mean(stacked);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::TrainingDivergence(format!("surrogate loss {value}")));
        }
        let grads = model.params.collect_grads(&p, &g.backward(loss));
        Ok((value, grads))
    }

    /// One optimizer step on the batch-mean split-pivot loss. A non-finite
    /// loss or gradient leaves the parameters untouched.
    pub fn step<R: Rng + ?Sized>(&mut self, model: &mut TdklModel, batch: &[&Trajectory], rng: &mut R) -> Result<f64> {
        let (value, grads) = Self::loss_and_grads(model, batch, rng)?;
        if grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingDivergence("non-finite surrogate gradient".into()));
        }
        self.adam.step(&mut model.params, &grads);
        Ok(value)
    }
}
