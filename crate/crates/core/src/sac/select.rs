//! Boltzmann selection: importance resampling of actor proposals on boxes
//! and a softmax over finite candidate sets.

use rand::Rng;

use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::nn::TanhGaussian;

/// Self-normalized weights from log-weights, shifted by their maximum.
/// Non-finite log-weights get weight zero. Returns `None` when no finite
/// log-weight exists.
pub fn normalized_weights(log_weights: &[f64]) -> Option<Vec<f64>> {
    let max = log_weights.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_weights.iter().map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    Some(w.into_iter().map(|v| v / total).collect())
}

fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Index drawn with probability proportional to `exp(log_weights)`.
pub fn importance_resample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Option<usize> {
    normalized_weights(log_weights).map(|w| draw_categorical(&w, rng))
}

/// Index drawn from `softmax(q / beta)`.
pub fn softmax_select<R: Rng + ?Sized>(q: &[f64], beta: f64, rng: &mut R) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::InvalidDomain("no candidates".into()));
    }
    let logits: Vec<f64> = q.iter().map(|v| v / beta).collect();
    importance_resample(&logits, rng).ok_or_else(|| Error::NumericalFailure("no finite candidate value".into()))
}

/// Proposals from the actor scored for importance resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub actions: Vec<Vec<f64>>,
    pub log_policy_density: Vec<f64>,
    pub q_values: Vec<f64>,
    pub normalized_weights: Vec<f64>,
}

impl ProposalBatch {
    /// Draws `n` actions from `dist` and weights each by
    /// `exp(Q/β) / π(a)`. If every weight is unusable, all mass goes to
    /// the highest Q-value.
    pub fn build<R, F>(dist: &TanhGaussian, bounds: &BoxDomain, n: usize, beta: f64, rng: &mut R, q: F) -> Result<Self>
    where
        R: Rng + ?Sized,
        F: FnOnce(&[Vec<f64>]) -> Result<Vec<f64>>,
    {
        let mut actions = Vec::with_capacity(n);
        let mut log_policy_density = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, lp) = dist.sample(bounds, rng);
            actions.push(a);
            log_policy_density.push(lp);
        }
        let q_values = q(&actions)?;
        let log_w: Vec<f64> = q_values.iter().zip(&log_policy_density).map(|(q, lp)| q / beta - lp).collect();
        let normalized_weights = match normalized_weights(&log_w) {
            Some(w) => w,
            None => {
                log::warn!("all proposal weights unusable; falling back to the highest-Q proposal");
                let usable: Vec<f64> =
                    q_values.iter().map(|v| if v.is_nan() { f64::NEG_INFINITY } else { *v }).collect();
                if usable.iter().all(|v| *v == f64::NEG_INFINITY) {
                    return Err(Error::NumericalFailure("no usable Q-value among proposals".into()));
                }
                let k = super::argmax(&usable);
                (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            }
        };
        Ok(Self { actions, log_policy_density, q_values, normalized_weights })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Index drawn according to the normalized weights.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        draw_categorical(&self.normalized_weights, rng)
    }
}
