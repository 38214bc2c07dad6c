//! Type-II maximum likelihood for the classical GP: gradient ascent on the
//! exact log marginal likelihood with a backtracking step size.

use ndarray::Array2;

use super::kernel::{KernelParameters, DEFAULT_JITTER};
use super::posterior::{log_marginal_likelihood_nodes, points_matrix, MeanParameters, ObservationSet};
use crate::error::{Error, Result};
use crate::nn::Graph;

const MAX_HALVINGS: usize = 20;

/// Log marginal likelihood and its gradients with respect to `log_alpha`
/// and `W` (identity embedding, `u ≡ 0`, standardized targets).
pub fn log_marginal_likelihood_with_grad(
    obs: &ObservationSet,
    params: &KernelParameters,
    mean: &MeanParameters,
    jitter: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let z = g.constant(points_matrix(obs.x()));
    let u = g.constant(Array2::zeros((obs.len(), 1)));
    let y = g.constant(Array2::from_shape_vec((obs.len(), 1), obs.standardized_y()).expect("column"));
    let la = g.variable(params.as_row());
    let w = g.variable(mean.as_row());
    let l = log_marginal_likelihood_nodes(&mut g, z, u, y, la, w, jitter)?;
    let grads = g.backward(l);
    let ga = grads.get_or_zeros(la, (1, params.components())).iter().copied().collect();
    let gw = grads.get_or_zeros(w, (1, mean.dim())).iter().copied().collect();
    Ok((g.scalar(l), ga, gw))
}

/// Runs `steps` ascent steps starting at `(init, mean)`. A step is only
/// accepted when it does not lower the likelihood, so the result is never
/// worse than the starting point.
pub fn fit_gp_hyperparameters(
    obs: &ObservationSet,
    init: &KernelParameters,
    mean: &MeanParameters,
    steps: usize,
    lr: f64,
) -> Result<(KernelParameters, MeanParameters)> {
    if obs.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: obs.len() });
    }
    if obs.dim() != Some(mean.dim()) {
        return Err(Error::Shape(format!("mean of dimension {} for inputs of dimension {:?}", mean.dim(), obs.dim())));
    }
    let mut kp = init.clone();
    let mut mp = mean.clone();
    if steps == 0 {
        return Ok((kp, mp));
    }
    let (mut best, mut ga, mut gw) = log_marginal_likelihood_with_grad(obs, &kp, &mp, DEFAULT_JITTER)?;
    let mut rate = lr;
    for _ in 0..steps {
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand_k = KernelParameters {
                log_alpha: kp.log_alpha.iter().zip(&ga).map(|(p, d)| p + rate * d).collect(),
            };
            let cand_m = MeanParameters { w: mp.w.iter().zip(&gw).map(|(p, d)| p + rate * d).collect() };
            match log_marginal_likelihood_with_grad(obs, &cand_k, &cand_m, DEFAULT_JITTER) {
                Ok((v, na, nw)) if v.is_finite() && v >= best => {
                    kp = cand_k;
                    mp = cand_m;
                    best = v;
                    ga = na;
                    gw = nw;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::NumericalFailure(_)) | Err(Error::DegenerateEmbedding(_)) => rate *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            break;
        }
        rate *= 1.5;
    }
    Ok((kp, mp))
}
