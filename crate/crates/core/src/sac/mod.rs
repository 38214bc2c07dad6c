//! Soft actor-critic acquisition policy.
//!
//! The actor and each of the two critics own a transformer encoder over the
//! observed `(x, y)` pairs; the state is the latent at the most recent
//! observation. Actions are described to the critics by the surrogate's
//! embedding, mean and variance at the action, which are read from a frozen
//! surrogate so no gradient ever reaches its parameters.

mod select;
mod update;

pub use select::{importance_resample, normalized_weights, softmax_select, ProposalBatch};
pub use update::{
    actor_loss_nodes, critic_loss_nodes, critic_targets, sample_transitions, transitions, FeatureCache, LossReport, SacTrainer,
    Transition,
};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::domain::{BoxDomain, Domain};
use crate::error::{Error, Result};
use crate::gp::{points_matrix, ObservationSet};
use crate::nn::{Bound, Graph, Linear, Mlp, ParamSet, TanhGaussian, TanhGaussianHead, TransformerConfig, TransformerEncoder, Var};
use crate::tdkl::{Conditioned, TdklModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub encoder: TransformerConfig,
    pub hidden: usize,
    /// Boltzmann temperature of action selection.
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub batch_size: usize,
    pub n_proposals: usize,
    pub initial_log_temperature: f64,
    /// Pick the highest-weight proposal instead of sampling.
    pub greedy: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            encoder: TransformerConfig {
                model_dim: 32,
                num_heads: 2,
                num_encoder_layers: 2,
                num_decoder_layers: 1,
                feedforward_dim: 64,
                use_positional_embedding: false,
            },
            hidden: 64,
            beta: 1.0,
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_temperature: 3e-4,
            batch_size: 64,
            n_proposals: 1024,
            initial_log_temperature: 0.0,
            greedy: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hidden == 0 || self.batch_size == 0 || self.n_proposals == 0 {
            return Err(Error::Config("agent sizes must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("gamma and tau must lie in [0, 1]".into()));
        }
        if [self.lr_actor, self.lr_critic, self.lr_temperature].iter().any(|lr| !(*lr >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Projects `(x, y_std)` pairs to tokens and encodes them.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    proj: Linear,
    encoder: TransformerEncoder,
}

impl StateEncoder {
    pub fn new(params: &mut ParamSet, name: &str, input_dim: usize, config: TransformerConfig) -> Self {
        Self {
            proj: Linear::new(params, &format!("{name}.proj"), input_dim + 1, config.model_dim),
            encoder: TransformerEncoder::new(params, &format!("{name}.encoder"), config),
        }
    }

    /// `1 × model_dim` latent of the last pair after encoding all pairs with
    /// `y` standardized over the sequence.
    pub fn nodes(&self, g: &mut Graph, p: &Bound, xs: &[Vec<f64>], ys: &[f64]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyState);
        }
        let obs = ObservationSet::new(xs.to_vec(), ys.to_vec())?;
        let x = points_matrix(xs);
        let y = Array2::from_shape_vec((ys.len(), 1), obs.standardized_y()).expect("column");
        let mut tokens = Array2::zeros((xs.len(), x.ncols() + 1));
        tokens.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
        tokens.slice_mut(ndarray::s![.., x.ncols()..]).assign(&y);
        let t = g.constant(tokens);
        let h = self.proj.forward(g, p, t);
        let latent = self.encoder.forward(g, p, h)?;
        Ok(g.slice_rows(latent, xs.len() - 1, 1))
    }

    pub fn encode(&self, params: &ParamSet, xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let v = self.nodes(&mut g, &p, xs, ys)?;
        Ok(g.value(v).iter().copied().collect())
    }
}

/// Surrogate description of one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEncoding {
    /// Surrogate embedding of the action.
    pub w: Vec<f64>,
    /// Standardized posterior mean.
    pub mu: f64,
    /// Standardized posterior variance.
    pub sigma2: f64,
}

impl ActionEncoding {
    fn from_row(row: ndarray::ArrayView1<f64>) -> Self {
        let n = row.len();
        Self { w: row.slice(ndarray::s![..n - 2]).to_vec(), mu: row[n - 2], sigma2: row[n - 1] }
    }

    pub fn to_row(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.mu);
        v.push(self.sigma2);
        v
    }
}

/// Rows `[z, mean, variance]` for each action, as plain values.
pub fn action_features(model: &TdklModel, cond: &Conditioned, actions: &[Vec<f64>]) -> Result<Array2<f64>> {
    let (z, mean, var) = cond.evaluate(model, actions)?;
    let mut out = Array2::zeros((actions.len(), z.ncols() + 2));
    out.slice_mut(ndarray::s![.., ..z.ncols()]).assign(&z);
    for i in 0..actions.len() {
        out[[i, z.ncols()]] = mean[i];
        out[[i, z.ncols() + 1]] = var[i];
    }
    Ok(out)
}

/// Feature rows for action rows `xq` on the graph; gradients reach `xq` but
/// not the surrogate, whose parameters are bound as constants in `p`.
pub fn action_feature_nodes(model: &TdklModel, cond: &Conditioned, g: &mut Graph, p: &Bound, xq: Var) -> Result<Var> {
    let q = cond.query(model, g, p, xq)?;
    Ok(g.concat_cols(&[q.z, q.mean, q.var]))
}

/// Encodes `a` against the observations `(xs, ys)`.
pub fn encode_action(model: &TdklModel, xs: &[Vec<f64>], ys: &[f64], a: &[f64]) -> Result<ActionEncoding> {
    let obs = ObservationSet::new(xs.to_vec(), ys.to_vec())?;
    let cond = model.condition(&obs)?;
    let f = action_features(model, &cond, &[a.to_vec()])?;
    Ok(ActionEncoding::from_row(f.row(0)))
}

/// Actor, twin critics with delayed target heads, and the entropy
/// temperature.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: SacConfig,
    pub action_dim: usize,
    /// Width of the surrogate embedding the critics read.
    pub embedding_dim: usize,
    pub actor: ParamSet,
    actor_encoder: StateEncoder,
    head: TanhGaussianHead,
    pub critic_encoders: [ParamSet; 2],
    critic_encoder: StateEncoder,
    pub critics: [ParamSet; 2],
    pub targets: [ParamSet; 2],
    q_net: Mlp,
    pub temperature: ParamSet,
    pub target_entropy: f64,
}

impl Agent {
    pub fn new(config: SacConfig, action_dim: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        crate::instrument::agent_call();
        config.validate()?;
        if action_dim == 0 {
            return Err(Error::InvalidDimension("action dimension must be positive".into()));
        }
        let md = config.encoder.model_dim;
        let mut actor = ParamSet::new(seed);
        let actor_encoder = StateEncoder::new(&mut actor, "actor", action_dim, config.encoder);
        let head = TanhGaussianHead::new(&mut actor, "actor.head", md, config.hidden, action_dim);

        let build_encoder = |k: u64| {
            let mut p = ParamSet::new(seed.wrapping_add(k));
            let enc = StateEncoder::new(&mut p, "critic", action_dim, config.encoder);
            (p, enc)
        };
        let (enc1, critic_encoder) = build_encoder(1);
        let (enc2, _) = build_encoder(2);
        let q_dims = [md + embedding_dim + 2, config.hidden, config.hidden, 1];
        let build_head = |k: u64| {
            let mut p = ParamSet::new(seed.wrapping_add(k));
            let net = Mlp::new(&mut p, "critic.q", &q_dims);
            (p, net)
        };
        let (q1, q_net) = build_head(3);
        let (q2, _) = build_head(4);

        let mut temperature = ParamSet::new(seed);
        temperature.add_filled("log_temperature", 1, 1, config.initial_log_temperature);
        Ok(Self {
            targets: [q1.clone(), q2.clone()],
            critics: [q1, q2],
            critic_encoders: [enc1, enc2],
            config,
            action_dim,
            embedding_dim,
            actor,
            actor_encoder,
            head,
            critic_encoder,
            q_net,
            temperature,
            target_entropy: -(action_dim as f64),
        })
    }

    pub fn log_temperature(&self) -> f64 {
        self.temperature.get(0)[[0, 0]]
    }

    pub fn temperature_value(&self) -> f64 {
        self.log_temperature().exp()
    }

    /// Actor state latent for the observations.
    pub fn encode_state(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
        self.actor_encoder.encode(&self.actor, xs, ys)
    }

    /// State latent of critic `i` for the observations.
    pub fn encode_critic_state(&self, i: usize, xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
        self.critic_encoder.encode(&self.critic_encoders[i], xs, ys)
    }

    /// Policy for the next action given the observations.
    pub fn policy(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<TanhGaussian> {
        crate::instrument::agent_call();
        let mut g = Graph::new();
        let p = self.actor.bind(&mut g, false);
        let latent = self.actor_encoder.nodes(&mut g, &p, xs, ys)?;
        let (mean, log_std) = self.head.forward(&mut g, &p, latent);
        Ok(TanhGaussianHead::distributions(&g, mean, log_std).remove(0))
    }

    /// Critic output for state latents (`m × model_dim`) and action
    /// features (`m × (embedding_dim + 2)`), using the head parameters `p`.
    pub(crate) fn q_nodes(&self, g: &mut Graph, p: &Bound, latents: Var, features: Var) -> Var {
        let input = g.concat_cols(&[latents, features]);
        self.q_net.forward(g, p, input)
    }

    fn head_values(&self, head: &ParamSet, latent: &[f64], features: &Array2<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let p = head.bind(&mut g, false);
        let row = g.constant(Array2::from_shape_vec((1, latent.len()), latent.to_vec()).expect("row"));
        let lat = g.repeat_rows(row, features.nrows());
        let f = g.constant(features.clone());
        let q = self.q_nodes(&mut g, &p, lat, f);
        g.value(q).iter().copied().collect()
    }

    /// Values of both critics for each feature row in the state `(xs, ys)`.
    pub fn critic_values(&self, xs: &[Vec<f64>], ys: &[f64], features: &Array2<f64>) -> Result<[Vec<f64>; 2]> {
        self.check_features(features)?;
        let mut out: [Vec<f64>; 2] = Default::default();
        for (i, slot) in out.iter_mut().enumerate() {
            let latent = self.encode_critic_state(i, xs, ys)?;
            *slot = self.head_values(&self.critics[i], &latent, features);
        }
        Ok(out)
    }

    /// `min(q1, q2)` for each feature row.
    pub fn conservative_q(&self, xs: &[Vec<f64>], ys: &[f64], features: &Array2<f64>) -> Result<Vec<f64>> {
        let [q1, q2] = self.critic_values(xs, ys, features)?;
        Ok(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect())
    }

    /// `min(q1, q2)` for a single encoded action.
    pub fn conservative_q_single(&self, xs: &[Vec<f64>], ys: &[f64], action: &ActionEncoding) -> Result<f64> {
        let row = action.to_row();
        let f = Array2::from_shape_vec((1, row.len()), row).expect("row");
        Ok(self.conservative_q(xs, ys, &f)?[0])
    }

    fn check_features(&self, f: &Array2<f64>) -> Result<()> {
        if f.ncols() != self.embedding_dim + 2 {
            return Err(Error::Shape(format!(
                "action features have {} columns, critics expect {}",
                f.ncols(),
                self.embedding_dim + 2
            )));
        }
        Ok(())
    }

    /// Chooses the next query.
    ///
    /// With no observations the action is uniform over the domain. On a box
    /// the actor proposes `n_proposals` actions that are importance
    /// resampled towards `exp(Q/β)`; on a candidate list the choice is a
    /// softmax of `Q/β` over all candidates.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        model: &TdklModel,
        xs: &[Vec<f64>],
        ys: &[f64],
        domain: &Domain,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return domain.sample_uniform(rng);
        }
        let obs = ObservationSet::new(xs.to_vec(), ys.to_vec())?;
        let cond = model.condition(&obs)?;
        match domain {
            Domain::Box(bounds) => {
                let batch = self.propose(model, &cond, xs, ys, bounds, rng)?;
                let k = if self.config.greedy {
                    argmax(&batch.normalized_weights)
                } else {
                    batch.draw(rng)
                };
                Ok(batch.actions[k].clone())
            }
            Domain::Discrete(candidates) => {
                if candidates.is_empty() {
                    return Err(Error::InvalidDomain("no candidates".into()));
                }
                let f = action_features(model, &cond, candidates)?;
                let q = self.conservative_q(xs, ys, &f)?;
                let k = if self.config.greedy { argmax(&q) } else { softmax_select(&q, self.config.beta, rng)? };
                Ok(candidates[k].clone())
            }
        }
    }

    /// Actor proposals with their densities, conservative Q-values and
    /// self-normalized importance weights.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        model: &TdklModel,
        cond: &Conditioned,
        xs: &[Vec<f64>],
        ys: &[f64],
        bounds: &BoxDomain,
        rng: &mut R,
    ) -> Result<ProposalBatch> {
        let dist = self.policy(xs, ys)?;
        ProposalBatch::build(&dist, bounds, self.config.n_proposals, self.config.beta, rng, |actions| {
            let f = action_features(model, cond, actions)?;
            self.conservative_q(xs, ys, &f)
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_sections(&[
            ("actor", &self.actor),
            ("critic1_encoder", &self.critic_encoders[0]),
            ("critic2_encoder", &self.critic_encoders[1]),
            ("critic1", &self.critics[0]),
            ("critic2", &self.critics[1]),
            ("target1", &self.targets[0]),
            ("target2", &self.targets[1]),
            ("temperature", &self.temperature),
        ])
    }

    /// Loads weights into an agent built with the same configuration.
    pub fn load_checkpoint(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let [e1, e2] = &mut self.critic_encoders;
        let [c1, c2] = &mut self.critics;
        let [t1, t2] = &mut self.targets;
        ck.restore_sections(&mut [
            ("actor", &mut self.actor),
            ("critic1_encoder", e1),
            ("critic2_encoder", e2),
            ("critic1", c1),
            ("critic2", c2),
            ("target1", t1),
            ("target2", t2),
            ("temperature", &mut self.temperature),
        ])
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}
