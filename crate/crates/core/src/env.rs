//! The optimization MDP: trajectories of evaluated points, the regret-based
//! reward, sub-trajectory episodes under a sample budget, and a replay
//! buffer keyed by objective variant.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::ObservationSet;
use crate::objectives::ObjectiveVariant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    /// Total objective evaluations allowed in one run.
    pub t_max: usize,
    /// Sub-trajectory length, counting its initial random samples.
    pub sub_trajectory_length: usize,
    pub n_init: usize,
    pub epsilon_clamp: f64,
    /// Initial probability of replacing an action by a uniform sample.
    pub exploration_p0: f64,
    /// Draw fresh initial samples at the start of every sub-trajectory
    /// rather than only the first.
    pub redraw_init: bool,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            t_max: 150,
            sub_trajectory_length: 50,
            n_init: 5,
            epsilon_clamp: 1e-8,
            exploration_p0: 0.5,
            redraw_init: true,
        }
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 {
            return Err(Error::Config("n_init must be at least 1".into()));
        }
        if self.sub_trajectory_length < self.n_init {
            return Err(Error::Config(format!(
                "sub-trajectory length {} is shorter than n_init {}",
                self.sub_trajectory_length, self.n_init
            )));
        }
        if !(self.epsilon_clamp > 0.0) {
            return Err(Error::Config("epsilon_clamp must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration_p0) {
            return Err(Error::Config("exploration_p0 must lie in [0, 1]".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }
}

/// `−ln(max(f* − y, ε))`.
pub fn reward(f_star: f64, y: f64, epsilon: f64) -> f64 {
    -(f_star - y).max(epsilon).ln()
}

/// An ordered list of evaluated points from one objective variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub variant_id: String,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    /// Number of leading random samples.
    pub n_init: usize,
    /// Optimum used for rewards.
    pub f_star: f64,
    complete: bool,
}

impl Trajectory {
    pub fn new(variant_id: impl Into<String>, f_star: f64, n_init: usize) -> Self {
        Self { variant_id: variant_id.into(), xs: Vec::new(), ys: Vec::new(), n_init, f_star, complete: false }
    }

    /// Builds a complete trajectory from existing points.
    pub fn from_points(variant_id: impl Into<String>, xs: Vec<Vec<f64>>, ys: Vec<f64>, f_star: f64, n_init: usize) -> Self {
        assert_eq!(xs.len(), ys.len(), "points and values");
        Self { variant_id: variant_id.into(), xs, ys, n_init, f_star, complete: true }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn mark_complete(&mut self) {
        self.complete = true;
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.xs.push(x);
        self.ys.push(y);
    }

    /// The first `t` points as a standardized observation set.
    pub fn observations(&self, t: usize) -> ObservationSet {
        ObservationSet::new(self.xs[..t].to_vec(), self.ys[..t].to_vec()).expect("consistent trajectory")
    }

    pub fn all_observations(&self) -> ObservationSet {
        self.observations(self.len())
    }

    /// Reward of the step that produced point `i`.
    pub fn reward(&self, i: usize, epsilon: f64) -> f64 {
        reward(self.f_star, self.ys[i], epsilon)
    }

    /// Running maximum of the observed values.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.ys
            .iter()
            .scan(f64::NEG_INFINITY, |best, y| {
                *best = best.max(*y);
                Some(*best)
            })
            .collect()
    }
}

/// Counts objective evaluations and refuses to exceed a limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub limit: usize,
    pub used: usize,
}

impl Budget {
    pub fn new(limit: usize) -> Self {
        Self { limit, used: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.used
    }

    pub fn is_exhausted(&self) -> bool {
        self.used >= self.limit
    }

    pub fn consume(&mut self) -> Result<()> {
        if self.is_exhausted() {
            return Err(Error::BudgetExhausted(self.limit));
        }
        self.used += 1;
        Ok(())
    }
}

/// One optimization run on one variant.
#[derive(Debug, Clone)]
pub struct Environment {
    pub variant: ObjectiveVariant,
    pub config: EnvironmentConfig,
    budget: Budget,
    episodes: usize,
}

impl Environment {
    pub fn new(variant: ObjectiveVariant, config: EnvironmentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { variant, budget: Budget::new(config.t_max), config, episodes: 0 })
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn evaluations(&self) -> usize {
        self.budget.used
    }

    pub fn is_finished(&self) -> bool {
        self.budget.is_exhausted()
    }

    /// Number of episodes started so far.
    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Evaluates `x`, charging the budget and refreshing `f_star` if needed.
    pub fn evaluate(&mut self, x: &[f64]) -> Result<f64> {
        if !self.variant.domain().contains(x) {
            return Err(Error::DomainViolation(x.to_vec()));
        }
        self.budget.consume()?;
        crate::instrument::evaluation();
        let y = self.variant.evaluate_unchecked(x)?;
        self.variant.observe(y);
        Ok(y)
    }

    fn done(&self, traj: &Trajectory) -> bool {
        traj.len() >= self.config.sub_trajectory_length || self.budget.is_exhausted()
    }

    /// Starts a sub-trajectory seeded with up to `n_init` uniform samples.
    /// Without `redraw_init`, only the first episode draws random samples
    /// and later episodes start empty.
    pub fn reset_episode<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Trajectory> {
        if self.budget.is_exhausted() {
            return Err(Error::BudgetExhausted(self.budget.limit));
        }
        let draws = if self.episodes == 0 || self.config.redraw_init { self.config.n_init } else { 0 };
        let mut traj = Trajectory::new(self.variant.id.clone(), self.variant.f_star(), draws);
        for _ in 0..draws.min(self.budget.remaining()) {
            let x = self.variant.domain().sample_uniform(rng)?;
            let y = self.evaluate(&x)?;
            traj.push(x, y);
        }
        traj.f_star = self.variant.f_star();
        self.episodes += 1;
        if self.done(&traj) {
            traj.mark_complete();
        }
        Ok(traj)
    }

    /// Evaluates `action`, appends it and returns `(reward, done)`.
    pub fn step(&mut self, traj: &mut Trajectory, action: &[f64]) -> Result<(f64, bool)> {
        if traj.is_complete() {
            return Err(Error::Config("step on a complete trajectory".into()));
        }
        let y = self.evaluate(action)?;
        traj.push(action.to_vec(), y);
        traj.f_star = self.variant.f_star();
        let r = reward(traj.f_star, y, self.config.epsilon_clamp);
        let done = self.done(traj);
        if done {
            traj.mark_complete();
        }
        Ok((r, done))
    }
}

/// Mixing probability `p0·max(0, 1 − step/L)`.
pub fn exploration_probability(step_index: usize, config: &EnvironmentConfig) -> f64 {
    let l = config.sub_trajectory_length as f64;
    config.exploration_p0 * (1.0 - step_index as f64 / l).max(0.0)
}

/// Replaces `proposed` by a uniform domain sample with the annealed
/// exploration probability.
pub fn exploration_mix<R: Rng + ?Sized>(
    proposed: Vec<f64>,
    step_index: usize,
    config: &EnvironmentConfig,
    domain: &Domain,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let p = exploration_probability(step_index, config);
    if p > 0.0 && rng.random::<f64>() < p {
        domain.sample_uniform(rng)
    } else {
        Ok(proposed)
    }
}

/// Complete trajectories grouped by variant, oldest evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    store: BTreeMap<String, VecDeque<Trajectory>>,
}

impl ReplayBuffer {
    pub fn new(capacity_per_variant: usize) -> Self {
        Self { capacity: capacity_per_variant.max(1), store: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn store_trajectory(&mut self, traj: Trajectory) -> Result<()> {
        if !traj.is_complete() {
            return Err(Error::InvalidStore);
        }
        let q = self.store.entry(traj.variant_id.clone()).or_default();
        q.push_back(traj);
        while q.len() > self.capacity {
            q.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.store.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Trajectory counts per variant.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.store.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn variants(&self) -> impl Iterator<Item = &str> {
        self.store.keys().map(String::as_str)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.store.values().flatten()
    }

    /// Uniform over variants, then uniform over that variant's trajectories.
    pub fn sample_replay<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Trajectory> {
        if self.store.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let k = rng.random_range(0..self.store.len());
        let q = self.store.values().nth(k).expect("index in range");
        Ok(&q[rng.random_range(0..q.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::powell_variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_examples() {
        assert!((reward(1.0, 0.9, 1e-8) - 2.302585).abs() < 1e-6);
        assert!((reward(1.0, 1.0, 1e-8) - 18.420681).abs() < 1e-6);
        assert_eq!(reward(1.0, 0.0, 1e-8), 0.0);
        assert!(reward(1.0, 2.0, 1e-8).is_finite());
    }

    fn env(cfg: EnvironmentConfig) -> Environment {
        Environment::new(powell_variant(4, 3).unwrap(), cfg).unwrap()
    }

    #[test]
    fn reset_draws_n_init_in_domain() {
        let mut e = env(EnvironmentConfig { t_max: 100_000, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = e.reset_episode(&mut rng).unwrap();
            assert_eq!(t.len(), 5);
            assert!(t.xs().iter().all(|x| e.variant.domain().contains(x)));
        }
        let a = env(Default::default()).reset_episode(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = env(Default::default()).reset_episode(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_of_150_is_three_sub_trajectories() {
        let mut e = env(Default::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lengths = Vec::new();
        while !e.is_finished() {
            let mut t = e.reset_episode(&mut rng).unwrap();
            assert_eq!(t.len(), 5);
            while !t.is_complete() {
                let a = e.variant.domain().sample_uniform(&mut rng).unwrap();
                e.step(&mut t, &a).unwrap();
            }
            lengths.push(t.len());
        }
        assert_eq!(lengths, vec![50, 50, 50]);
        assert_eq!(e.evaluations(), 150);
        assert!(matches!(e.reset_episode(&mut rng), Err(Error::BudgetExhausted(150))));
        assert!(matches!(e.evaluate(&[0.0; 4]), Err(Error::BudgetExhausted(150))));
    }

    #[test]
    fn out_of_domain_step() {
        let mut e = env(Default::default());
        let mut t = e.reset_episode(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(e.step(&mut t, &[3.0, 0.0, 0.0, 0.0]), Err(Error::DomainViolation(_))));
        assert_eq!(e.evaluations(), 5);
    }

    #[test]
    fn best_so_far_non_increasing_regret() {
        let t = Trajectory::from_points("v", vec![vec![0.0]; 5], vec![1.0, 0.5, 2.0, 1.5, 3.0], 4.0, 1);
        assert_eq!(t.best_so_far(), vec![1.0, 1.0, 2.0, 2.0, 3.0]);
    }

    fn complete(id: &str, y: f64) -> Trajectory {
        Trajectory::from_points(id, vec![vec![y]], vec![y], 1.0, 1)
    }

    #[test]
    fn buffer_counts_and_eviction() {
        let mut b = ReplayBuffer::new(3);
        b.store_trajectory(complete("a", 1.0)).unwrap();
        b.store_trajectory(complete("a", 2.0)).unwrap();
        b.store_trajectory(complete("b", 3.0)).unwrap();
        assert_eq!(b.counts().into_values().collect::<Vec<_>>(), vec![2, 1]);
        for y in [4.0, 5.0] {
            b.store_trajectory(complete("a", y)).unwrap();
        }
        assert_eq!(b.counts()["a"], 3);
        let ys: Vec<f64> = b.trajectories().filter(|t| t.variant_id == "a").map(|t| t.ys()[0]).collect();
        assert_eq!(ys, vec![2.0, 4.0, 5.0]);
        assert!(matches!(b.store_trajectory(Trajectory::new("c", 0.0, 1)), Err(Error::InvalidStore)));
    }

    #[test]
    fn trajectory_serialization_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 1e3 - 0.1).collect();
        let t = Trajectory::from_points("v", xs, ys, 0.123456789, 5);
        let back: Trajectory = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, back);
        for (a, b) in t.ys().iter().zip(back.ys()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sampling_is_two_stage() {
        let mut b = ReplayBuffer::new(100);
        assert!(matches!(b.sample_replay(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyBuffer)));
        b.store_trajectory(complete("b", 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.sample_replay(&mut rng).unwrap().variant_id, "b");
        for i in 0..9 {
            b.store_trajectory(complete("a", i as f64)).unwrap();
        }
        let n = 10_000;
        let hits = (0..n).filter(|_| b.sample_replay(&mut rng).unwrap().variant_id == "b").count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((hits - 5000.0).abs() < 3.0 * sd, "{hits}");
        let s1: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| b.sample_replay(&mut r).unwrap().ys()[0]).collect()
        };
        let s2: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| b.sample_replay(&mut r).unwrap().ys()[0]).collect()
        };
        assert_eq!(s1, s2);
    }

    #[test]
    fn exploration_schedule() {
        let cfg = EnvironmentConfig::default();
        let domain = Domain::Box(crate::domain::BoxDomain::cube(1, -1.0, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for step in [50, 51, 200] {
            assert_eq!(exploration_mix(vec![0.25], step, &cfg, &domain, &mut rng).unwrap(), vec![0.25]);
        }
        let n = 10_000;
        let replaced = (0..n)
            .filter(|_| exploration_mix(vec![0.25], 0, &cfg, &domain, &mut rng).unwrap() != vec![0.25])
            .count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((replaced - 5000.0).abs() < 3.0 * sd, "{replaced}");
        let off = EnvironmentConfig { exploration_p0: 0.0, ..cfg };
        for step in 0..60 {
            assert_eq!(exploration_mix(vec![0.25], step, &off, &domain, &mut rng).unwrap(), vec![0.25]);
        }
    }
}
