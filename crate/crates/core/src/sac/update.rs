//! Replay transitions and the entropy-regularized actor-critic update.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{action_feature_nodes, action_features, Agent};
use crate::domain::BoxDomain;
use crate::env::{ReplayBuffer, Trajectory};
use crate::error::{Error, Result};
use crate::gp::ObservationSet;
use crate::nn::{Adam, Bound, Graph, TanhGaussianHead, Var};
use crate::tdkl::{Conditioned, TdklModel};

/// One step of a stored sequence: the state is the first `t` points and the
/// action is point `t`, so the next state is the first `t + 1` points.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub xs: &'a [Vec<f64>],
    pub ys: &'a [f64],
    pub t: usize,
    pub reward: f64,
    pub done: bool,
}

impl<'a> Transition<'a> {
    pub fn new(xs: &'a [Vec<f64>], ys: &'a [f64], t: usize, reward: f64, done: bool) -> Result<Self> {
        if t == 0 {
            return Err(Error::EmptyState);
        }
        if t >= xs.len() || xs.len() != ys.len() {
            return Err(Error::TooShort { needed: t + 1, got: xs.len().min(ys.len()) });
        }
        Ok(Self { xs, ys, t, reward, done })
    }

    pub fn state(&self) -> (&'a [Vec<f64>], &'a [f64]) {
        (&self.xs[..self.t], &self.ys[..self.t])
    }

    pub fn next_state(&self) -> (&'a [Vec<f64>], &'a [f64]) {
        (&self.xs[..self.t + 1], &self.ys[..self.t + 1])
    }

    pub fn action(&self) -> &'a [f64] {
        &self.xs[self.t]
    }
}

/// Every transition of a trajectory whose state is non-empty and follows
/// the random initial samples. The last one is terminal.
pub fn transitions(traj: &Trajectory, epsilon: f64) -> Vec<Transition<'_>> {
    let n = traj.len();
    (traj.n_init.max(1)..n)
        .map(|t| Transition {
            xs: traj.xs(),
            ys: traj.ys(),
            t,
            reward: traj.reward(t, epsilon),
            done: t + 1 == n,
        })
        .collect()
}

/// `n` transitions: a trajectory is drawn from the buffer (uniform over
/// variants, then over that variant's trajectories), then a uniform step.
pub fn sample_transitions<'a, R: Rng + ?Sized>(
    buffer: &'a ReplayBuffer,
    n: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Transition<'a>>> {
    if !buffer.trajectories().any(|t| !transitions(t, epsilon).is_empty()) {
        return Err(Error::TooShort { needed: 2, got: 1 });
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let traj = buffer.sample_replay(rng)?;
        let steps = transitions(traj, epsilon);
        if !steps.is_empty() {
            out.push(steps[rng.random_range(0..steps.len())]);
        }
    }
    Ok(out)
}

type PrefixKey = Vec<u64>;

fn prefix_key(xs: &[Vec<f64>], ys: &[f64]) -> PrefixKey {
    let mut k = Vec::with_capacity(1 + xs.len() * (xs.first().map_or(0, Vec::len) + 1));
    k.push(xs.len() as u64);
    for (x, y) in xs.iter().zip(ys) {
        k.extend(x.iter().map(|v| v.to_bits()));
        k.push(y.to_bits());
    }
    k
}

/// Surrogate conditionings and taken-action features keyed by the content
/// of the observation prefix. Valid while the surrogate is unchanged.
#[derive(Debug)]
pub struct FeatureCache<'m> {
    model: &'m TdklModel,
    conditioned: HashMap<PrefixKey, Rc<Conditioned>>,
    taken: HashMap<PrefixKey, Array2<f64>>,
}

impl<'m> FeatureCache<'m> {
    pub fn new(model: &'m TdklModel) -> Self {
        Self { model, conditioned: HashMap::new(), taken: HashMap::new() }
    }

    pub fn model(&self) -> &'m TdklModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.conditioned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditioned.is_empty()
    }

    pub fn conditioned(&mut self, xs: &[Vec<f64>], ys: &[f64]) -> Result<Rc<Conditioned>> {
        let key = prefix_key(xs, ys);
        if let Some(c) = self.conditioned.get(&key) {
            return Ok(c.clone());
        }
        let obs = ObservationSet::new(xs.to_vec(), ys.to_vec())?;
        let c = Rc::new(self.model.condition(&obs)?);
        self.conditioned.insert(key, c.clone());
        Ok(c)
    }

    /// Features of the action a transition actually took.
    fn taken_features(&mut self, tr: &Transition<'_>) -> Result<Array2<f64>> {
        let (nx, ny) = tr.next_state();
        let key = prefix_key(nx, ny);
        if let Some(f) = self.taken.get(&key) {
            return Ok(f.clone());
        }
        let (sx, sy) = tr.state();
        let cond = self.conditioned(sx, sy)?;
        let f = action_features(self.model, &cond, &[tr.action().to_vec()])?;
        self.taken.insert(key, f.clone());
        Ok(f)
    }
}

/// Batch order with equal states contiguous.
struct Grouped {
    /// Batch indices in grouped order.
    order: Vec<usize>,
    /// `(start, len)` of each run of equal states within `order`.
    groups: Vec<(usize, usize)>,
}

fn group_by_state(batch: &[Transition<'_>]) -> Grouped {
    let mut index: HashMap<PrefixKey, usize> = HashMap::new();
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for (j, tr) in batch.iter().enumerate() {
        let (xs, ys) = tr.state();
        let k = *index.entry(prefix_key(xs, ys)).or_insert_with(|| {
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[k].push(j);
    }
    let mut order = Vec::with_capacity(batch.len());
    let mut groups = Vec::with_capacity(buckets.len());
    for b in buckets {
        groups.push((order.len(), b.len()));
        order.extend(b);
    }
    Grouped { order, groups }
}

/// Magnitudes from one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub temperature: f64,
    pub mean_target: f64,
}

fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

/// Bellman targets `r + γ(1 − done)(min target-Q(s′, a′) − α log π(a′|s′))`
/// with `a′` reached from the standard-normal rows of `noise`.
pub fn critic_targets(
    agent: &Agent,
    cache: &mut FeatureCache<'_>,
    batch: &[Transition<'_>],
    bounds: &BoxDomain,
    noise: &Array2<f64>,
) -> Result<Vec<f64>> {
    let alpha = agent.temperature_value();
    let gamma = agent.config.gamma;
    let mut out = Vec::with_capacity(batch.len());
    for (j, tr) in batch.iter().enumerate() {
        if tr.done || gamma == 0.0 {
            out.push(tr.reward);
            continue;
        }
        let (nx, ny) = tr.next_state();
        let dist = agent.policy(nx, ny)?;
        let eps: Vec<f64> = noise.row(j).to_vec();
        let (a, lp) = dist.sample_with_noise(bounds, &eps);
        let cond = cache.conditioned(nx, ny)?;
        let f = action_features(cache.model(), &cond, &[a])?;
        let mut q = f64::INFINITY;
        for i in 0..2 {
            let latent = agent.encode_critic_state(i, nx, ny)?;
            q = q.min(agent.head_values(&agent.targets[i], &latent, &f)[0]);
        }
        out.push(tr.reward + gamma * (q - alpha * lp));
    }
    Ok(out)
}

/// Sum over both critics of the mean squared Bellman error. Also returns
/// the per-row state latents of each critic.
pub fn critic_loss_nodes(
    agent: &Agent,
    g: &mut Graph,
    enc: [&Bound; 2],
    heads: [&Bound; 2],
    cache: &mut FeatureCache<'_>,
    batch: &[Transition<'_>],
    targets: &[f64],
) -> Result<(Var, [Var; 2])> {
    let grouped = group_by_state(batch);
    let mut feats = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.len());
    for &j in &grouped.order {
        feats.push(cache.taken_features(&batch[j])?);
        ys.push(targets[j]);
    }
    let views: Vec<_> = feats.iter().map(|a| a.view()).collect();
    let f = g.constant(ndarray::concatenate(ndarray::Axis(0), &views).expect("feature rows"));
    let y = g.constant(column(ys));
    let mut latents = [f, f];
    let mut total = None;
    for i in 0..2 {
        let mut parts = Vec::with_capacity(grouped.groups.len());
        for &(start, len) in &grouped.groups {
            let (sx, sy) = batch[grouped.order[start]].state();
            let l = agent.critic_encoder.nodes(g, enc[i], sx, sy)?;
            parts.push(g.repeat_rows(l, len));
        }
        let lat = g.concat_rows(&parts);
        latents[i] = lat;
        let q = agent.q_nodes(g, heads[i], lat, f);
        let d = g.sub(q, y);
        let sq = g.square(d);
        let l = g.mean(sq);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    Ok((total.expect("two critics"), latents))
}

/// Mean of `α log π(ã|s) − min(q1, q2)(s, ã)` with reparameterized `ã`.
/// Critic latents are constants, rows in the grouped order. Returns the
/// loss and the `m × 1` log-densities.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_nodes(
    agent: &Agent,
    g: &mut Graph,
    actor: &Bound,
    surrogate: &Bound,
    heads: [&Bound; 2],
    cache: &mut FeatureCache<'_>,
    batch: &[Transition<'_>],
    critic_latents: [&Array2<f64>; 2],
    bounds: &BoxDomain,
    noise: &Array2<f64>,
) -> Result<(Var, Var)> {
    let grouped = group_by_state(batch);
    let mut parts = Vec::with_capacity(grouped.groups.len());
    for &(start, len) in &grouped.groups {
        let (sx, sy) = batch[grouped.order[start]].state();
        let l = agent.actor_encoder.nodes(g, actor, sx, sy)?;
        parts.push(g.repeat_rows(l, len));
    }
    let lat = g.concat_rows(&parts);
    let (mean, log_std) = agent.head.forward(g, actor, lat);
    let (action, logp) = TanhGaussianHead::rsample(g, mean, log_std, noise, bounds);
    let mut feats = Vec::with_capacity(grouped.groups.len());
    for &(start, len) in &grouped.groups {
        let (sx, sy) = batch[grouped.order[start]].state();
        let cond = cache.conditioned(sx, sy)?;
        let rows = g.slice_rows(action, start, len);
        feats.push(action_feature_nodes(cache.model(), &cond, g, surrogate, rows)?);
    }
    let f = g.concat_rows(&feats);
    let mut qmin = None;
    for i in 0..2 {
        let l = g.constant(critic_latents[i].clone());
        let q = agent.q_nodes(g, heads[i], l, f);
        qmin = Some(match qmin {
            None => q,
            Some(m) => g.min(m, q),
        });
    }
    let scaled = g.scale(logp, agent.temperature_value());
    let diff = g.sub(scaled, qmin.expect("two critics"));
    Ok((g.mean(diff), logp))
}

/// Optimizer state for every trained part of an [`Agent`].
#[derive(Debug, Clone)]
pub struct SacTrainer {
    actor: Adam,
    critic_encoders: [Adam; 2],
    critics: [Adam; 2],
    temperature: Adam,
}

fn finite(grads: &[Array2<f64>]) -> bool {
    grads.iter().all(|t| t.iter().all(|v| v.is_finite()))
}

impl SacTrainer {
    pub fn new(agent: &Agent) -> Self {
        let c = &agent.config;
        Self {
            actor: Adam::with_lr(c.lr_actor, &agent.actor),
            critic_encoders: [
                Adam::with_lr(c.lr_critic, &agent.critic_encoders[0]),
                Adam::with_lr(c.lr_critic, &agent.critic_encoders[1]),
            ],
            critics: [Adam::with_lr(c.lr_critic, &agent.critics[0]), Adam::with_lr(c.lr_critic, &agent.critics[1])],
            temperature: Adam::with_lr(c.lr_temperature, &agent.temperature),
        }
    }

    /// One update on `batch`. Surrogate features come from `cache`, whose
    /// model is only ever read. A non-finite loss or gradient rejects the
    /// whole update and leaves the agent unchanged.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        agent: &mut Agent,
        cache: &mut FeatureCache<'_>,
        batch: &[Transition<'_>],
        bounds: &BoxDomain,
        rng: &mut R,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        if bounds.dim() != agent.action_dim {
            return Err(Error::Shape(format!("{}-D bounds for a {}-D agent", bounds.dim(), agent.action_dim)));
        }
        let d = agent.action_dim;
        let next_noise = Array2::from_shape_simple_fn((batch.len(), d), || rng.sample(StandardNormal));
        let actor_noise = Array2::from_shape_simple_fn((batch.len(), d), || rng.sample(StandardNormal));
        let targets = critic_targets(agent, cache, batch, bounds, &next_noise)?;

        let mut g = Graph::new();
        let enc = [agent.critic_encoders[0].bind(&mut g, true), agent.critic_encoders[1].bind(&mut g, true)];
        let heads = [agent.critics[0].bind(&mut g, true), agent.critics[1].bind(&mut g, true)];
        let (critic_loss, latents) =
            critic_loss_nodes(agent, &mut g, [&enc[0], &enc[1]], [&heads[0], &heads[1]], cache, batch, &targets)?;
        let critic_value = g.scalar(critic_loss);
        let cg = g.backward(critic_loss);
        let enc_grads = [agent.critic_encoders[0].collect_grads(&enc[0], &cg), agent.critic_encoders[1].collect_grads(&enc[1], &cg)];
        let head_grads = [agent.critics[0].collect_grads(&heads[0], &cg), agent.critics[1].collect_grads(&heads[1], &cg)];
        let lat_values = [g.value(latents[0]).clone(), g.value(latents[1]).clone()];

        let mut ga = Graph::new();
        let actor_p = agent.actor.bind(&mut ga, true);
        let surrogate_p = cache.model().bind_frozen(&mut ga);
        let heads_c = [agent.critics[0].bind(&mut ga, false), agent.critics[1].bind(&mut ga, false)];
        let (actor_loss, logp) = actor_loss_nodes(
            agent,
            &mut ga,
            &actor_p,
            &surrogate_p,
            [&heads_c[0], &heads_c[1]],
            cache,
            batch,
            [&lat_values[0], &lat_values[1]],
            bounds,
            &actor_noise,
        )?;
        let actor_value = ga.scalar(actor_loss);
        let actor_grads = agent.actor.collect_grads(&actor_p, &ga.backward(actor_loss));

        let mean_logp = ga.value(logp).mean().unwrap_or(0.0);
        let log_t = agent.log_temperature();
        let temperature_loss = -log_t * (mean_logp + agent.target_entropy);
        let temp_grad = vec![Array2::from_elem((1, 1), -(mean_logp + agent.target_entropy))];

        if !critic_value.is_finite() || !actor_value.is_finite() || !temperature_loss.is_finite() {
            return Err(Error::TrainingDivergence(format!(
                "critic loss {critic_value}, actor loss {actor_value}, temperature loss {temperature_loss}"
            )));
        }
        let all_finite = enc_grads.iter().chain(&head_grads).all(|g| finite(g)) && finite(&actor_grads) && finite(&temp_grad);
        if !all_finite {
            return Err(Error::TrainingDivergence("non-finite agent gradient".into()));
        }
        for i in 0..2 {
            self.critic_encoders[i].step(&mut agent.critic_encoders[i], &enc_grads[i]);
            self.critics[i].step(&mut agent.critics[i], &head_grads[i]);
        }
        self.actor.step(&mut agent.actor, &actor_grads);
        self.temperature.step(&mut agent.temperature, &temp_grad);
        let tau = agent.config.tau;
        for i in 0..2 {
            let critic = agent.critics[i].clone();
            agent.targets[i].soft_update_from(&critic, tau)?;
        }
        Ok(LossReport {
            critic_loss: critic_value,
            actor_loss: actor_value,
            temperature_loss,
            temperature: agent.temperature_value(),
            mean_target: targets.iter().sum::<f64>() / targets.len() as f64,
        })
    }
}
