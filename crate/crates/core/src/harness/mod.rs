//! Experiment orchestration: pre-training on a stream of objective
//! variants, evaluation runs for the agent and the classical baselines,
//! ablation sweeps and regret reporting.

mod report;
#[cfg(test)]
mod tests;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{AcquisitionConfig, AcquisitionKind, ClassicalGp};
use crate::domain::{BoxDomain, Domain};
use crate::env::{exploration_mix, Environment, EnvironmentConfig, ReplayBuffer, Trajectory};
use crate::error::{Error, Result};
use crate::gp::ObservationSet;
use crate::instrument::{self, Counters};
use crate::objectives::{
    load_discrete_candidates, powell_variant, thomson_slice_unestimated, ObjectiveVariant, OptimumCache,
    DEFAULT_BASE_ELECTRONS, DEFAULT_OPTIMUM_BUDGET,
};
use crate::sac::{sample_transitions, Agent, FeatureCache, SacConfig, SacTrainer};
use crate::tdkl::{SurrogateTrainer, SurrogateVariant, TdklConfig, TdklModel};

pub use report::{
    emit_report, final_regrets, load_records, median, percentile, read_raw_csv, read_summary_csv, summarize,
    write_raw_csv, write_summary_csv, write_trajectory_log, ReportFiles, SummaryRow,
};

/// Consecutive rejected training steps after which a run is abandoned.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtdk,
    Ei,
    Pi,
    Ucb,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Rtdk, Method::Ei, Method::Pi, Method::Ucb, Method::Random];

    fn acquisition(self) -> Option<AcquisitionKind> {
        match self {
            Method::Rtdk => None,
            Method::Ei => Some(AcquisitionKind::Ei),
            Method::Pi => Some(AcquisitionKind::Pi),
            Method::Ucb => Some(AcquisitionKind::Ucb),
            Method::Random => Some(AcquisitionKind::Random),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rtdk => "rtdk",
            Method::Ei => "ei",
            Method::Pi => "pi",
            Method::Ucb => "ucb",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

fn default_base_electrons() -> usize {
    DEFAULT_BASE_ELECTRONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    ThomsonSlice {
        dim: usize,
        #[serde(default = "default_base_electrons")]
        base_electrons: usize,
    },
    Powell {
        dim: usize,
    },
    DiscreteTable {
        path: PathBuf,
    },
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::ThomsonSlice { dim, .. } => write!(f, "thomson_slice:{dim}"),
            ObjectiveSpec::Powell { dim } => write!(f, "powell:{dim}"),
            ObjectiveSpec::DiscreteTable { path } => write!(f, "discrete_table:{}", path.display()),
        }
    }
}

/// Parses `thomson_slice:16`, `powell:8` or `discrete_table:<path>`.
impl FromStr for ObjectiveSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, arg) =
            s.split_once(':').ok_or_else(|| Error::Config(format!("objective {s:?} needs the form family:argument")))?;
        let dim = || arg.parse::<usize>().map_err(|_| Error::Config(format!("bad dimension {arg:?}")));
        match family {
            "thomson_slice" => Ok(ObjectiveSpec::ThomsonSlice { dim: dim()?, base_electrons: DEFAULT_BASE_ELECTRONS }),
            "powell" => Ok(ObjectiveSpec::Powell { dim: dim()? }),
            "discrete_table" => Ok(ObjectiveSpec::DiscreteTable { path: PathBuf::from(arg) }),
            other => Err(Error::Config(format!("unknown objective family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub objective: ObjectiveSpec,
    pub n_pretrain_variants: usize,
    pub pretrain_samples_per_variant: usize,
    pub eval_budget: usize,
    pub n_eval_variants: usize,
    /// Per-run seeds of the evaluation phase.
    pub seeds: Vec<u64>,
    /// Root of every random stream in the experiment.
    pub master_seed: u64,
    pub surrogate_variant: SurrogateVariant,
    pub sub_trajectory_length: usize,
    pub n_init: usize,
    pub epsilon_clamp: f64,
    pub exploration_p0: f64,
    pub redraw_init: bool,
    /// Surrogate steps and agent updates after each pre-training trajectory.
    pub updates_per_trajectory: usize,
    /// Keep training during evaluation runs.
    pub online_updates: bool,
    pub replay_capacity: usize,
    pub tdkl: TdklConfig,
    pub sac: SacConfig,
    pub acquisition: AcquisitionConfig,
    pub optimum_budget: usize,
    /// JSON file caching optimum estimates across runs.
    pub optimum_cache: Option<PathBuf>,
    /// Write measured wall time; when off the column is zero and outputs
    /// are bitwise reproducible.
    pub record_wall_time: bool,
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Rtdk,
            objective: ObjectiveSpec::ThomsonSlice { dim: 16, base_electrons: DEFAULT_BASE_ELECTRONS },
            n_pretrain_variants: 5,
            pretrain_samples_per_variant: 50,
            eval_budget: 150,
            n_eval_variants: 5,
            seeds: vec![0, 1, 2, 3, 4],
            master_seed: 0,
            surrogate_variant: SurrogateVariant::Transformer,
            sub_trajectory_length: 50,
            n_init: 5,
            epsilon_clamp: 1e-8,
            exploration_p0: 0.5,
            redraw_init: true,
            updates_per_trajectory: 50,
            online_updates: false,
            replay_capacity: 64,
            tdkl: TdklConfig::default(),
            sac: SacConfig::default(),
            acquisition: AcquisitionConfig::default(),
            optimum_budget: DEFAULT_OPTIMUM_BUDGET,
            optimum_cache: None,
            record_wall_time: true,
            threads: 1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_budget == 0 || self.n_eval_variants == 0 {
            return Err(Error::Config("evaluation budget and variant count must be positive".into()));
        }
        if self.sub_trajectory_length < 2 {
            return Err(Error::Config("sub-trajectory length must be at least 2".into()));
        }
        if self.replay_capacity == 0 || self.threads == 0 {
            return Err(Error::Config("replay capacity and thread count must be positive".into()));
        }
        if self.eval_budget % self.sub_trajectory_length != 0 {
            log::warn!(
                "evaluation budget {} is not a multiple of the sub-trajectory length {}; the last one is truncated",
                self.eval_budget,
                self.sub_trajectory_length
            );
        }
        self.environment(self.eval_budget).validate()?;
        self.tdkl_config().validate()?;
        self.sac.validate()?;
        self.acquisition.validate()
    }

    /// Environment settings for a run of `t_max` samples.
    pub fn environment(&self, t_max: usize) -> EnvironmentConfig {
        EnvironmentConfig {
            t_max,
            sub_trajectory_length: self.sub_trajectory_length,
            n_init: self.n_init,
            epsilon_clamp: self.epsilon_clamp,
            exploration_p0: self.exploration_p0,
            redraw_init: self.redraw_init,
        }
    }

    pub fn tdkl_config(&self) -> TdklConfig {
        TdklConfig { variant: self.surrogate_variant, ..self.tdkl.clone() }
    }

    pub fn pretrain_budget(&self) -> usize {
        self.n_pretrain_variants * self.pretrain_samples_per_variant
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.master_seed, path)
    }

    fn rng(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(path))
    }

    fn objective_dim(&self) -> Result<usize> {
        match &self.objective {
            ObjectiveSpec::ThomsonSlice { dim, .. } | ObjectiveSpec::Powell { dim } => Ok(*dim),
            ObjectiveSpec::DiscreteTable { path } => Ok(load_discrete_candidates(path)?.dim()),
        }
    }
}

/// SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for the stream addressed by `path` under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

mod stream {
    pub const PRETRAIN_VARIANT: u64 = 1;
    pub const PRETRAIN_ROLLOUT: u64 = 2;
    pub const PRETRAIN_TRAINING: u64 = 3;
    pub const SURROGATE_INIT: u64 = 4;
    pub const AGENT_INIT: u64 = 5;
    pub const EVAL_VARIANT: u64 = 6;
    pub const EVAL_RUN: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Evaluation,
}

/// Objective variant `index` of the given phase. Variants of the two
/// phases come from disjoint seed streams.
fn make_variant(config: &ExperimentConfig, phase: Phase, index: usize, cache: &mut OptimumCache) -> Result<ObjectiveVariant> {
    let tag = match phase {
        Phase::Pretrain => stream::PRETRAIN_VARIANT,
        Phase::Evaluation => stream::EVAL_VARIANT,
    };
    let seed = config.seed(&[tag, index as u64]);
    match &config.objective {
        ObjectiveSpec::ThomsonSlice { dim, base_electrons } => {
            let mut v = thomson_slice_unestimated(*base_electrons, *dim, seed)?;
            cache.fill(&mut v)?;
            Ok(v)
        }
        ObjectiveSpec::Powell { dim } => powell_variant(*dim, seed),
        ObjectiveSpec::DiscreteTable { path } => load_discrete_candidates(path),
    }
}

fn optimum_cache(config: &ExperimentConfig) -> Result<OptimumCache> {
    match &config.optimum_cache {
        Some(path) => OptimumCache::open(path, config.optimum_budget),
        None => Ok(OptimumCache::in_memory(config.optimum_budget)),
    }
}

fn action_bounds(domain: &Domain) -> Result<BoxDomain> {
    match domain {
        Domain::Box(b) => Ok(b.clone()),
        Domain::Discrete(_) => domain.bounding_box(),
    }
}

/// Surrogate and agent with their optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: TdklModel,
    pub agent: Agent,
    surrogate_trainer: SurrogateTrainer,
    sac_trainer: SacTrainer,
    rejected_in_a_row: usize,
    pub rejected_total: usize,
}

/// Losses of one training round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub surrogate_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
    pub actor_losses: Vec<f64>,
    pub rejected: usize,
}

impl Learner {
    pub fn new(model: TdklModel, agent: Agent) -> Self {
        let surrogate_trainer = SurrogateTrainer::new(&model);
        let sac_trainer = SacTrainer::new(&agent);
        Self { model, agent, surrogate_trainer, sac_trainer, rejected_in_a_row: 0, rejected_total: 0 }
    }

    /// `steps` surrogate steps followed by `steps` agent updates on
    /// replayed data.
    pub fn train<R: rand::Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        steps: usize,
        bounds: &BoxDomain,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        let Learner { model, agent, surrogate_trainer, sac_trainer, rejected_in_a_row, rejected_total } = self;
        let mut streak = Rejections { in_a_row: rejected_in_a_row, total: rejected_total };
        let batch_size = model.config.batch_size;
        for _ in 0..steps {
            let batch: Vec<&Trajectory> = (0..batch_size).map(|_| buffer.sample_replay(rng)).collect::<Result<_>>()?;
            match surrogate_trainer.step(model, &batch, rng) {
                Ok(loss) => {
                    streak.accept();
                    log.surrogate_losses.push(loss);
                }
                Err(e) => streak.reject(e, &mut log)?,
            }
        }
        let mut cache = FeatureCache::new(model);
        for _ in 0..steps {
            let batch = sample_transitions(buffer, agent.config.batch_size, epsilon, rng)?;
            match sac_trainer.update(agent, &mut cache, &batch, bounds, rng) {
                Ok(report) => {
                    streak.accept();
                    log.critic_losses.push(report.critic_loss);
                    log.actor_losses.push(report.actor_loss);
                }
                Err(e) => streak.reject(e, &mut log)?,
            }
        }
        Ok(log)
    }
}

struct Rejections<'a> {
    in_a_row: &'a mut usize,
    total: &'a mut usize,
}

impl Rejections<'_> {
    fn accept(&mut self) {
        *self.in_a_row = 0;
    }

    fn reject(&mut self, err: Error, log: &mut TrainingLog) -> Result<()> {
        match err {
            Error::TrainingDivergence(msg) => {
                log::warn!("training step rejected: {msg}");
                *self.in_a_row += 1;
                *self.total += 1;
                log.rejected += 1;
                if *self.in_a_row >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::TrainingDivergence(format!(
                        "{MAX_CONSECUTIVE_REJECTIONS} consecutive training steps rejected"
                    )));
                }
                Ok(())
            }
            other => Err(other),
        }
    }
}

/// Points evaluated in one run with the elapsed time at each.
#[derive(Debug, Clone, Default)]
struct Trace {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    elapsed_ms: Vec<f64>,
}

impl Trace {
    fn push(&mut self, x: Vec<f64>, y: f64, start: Instant) {
        self.xs.push(x);
        self.ys.push(y);
        self.elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
}

/// Rolls out one sub-trajectory with the agent, appending every evaluated
/// point to `trace`. The first sub-trajectory of a run mixes in uniform
/// exploration.
fn agent_episode(
    env: &mut Environment,
    model: &TdklModel,
    agent: &Agent,
    rng: &mut ChaCha8Rng,
    trace: &mut Trace,
    start: Instant,
) -> Result<Trajectory> {
    let mut traj = env.reset_episode(rng)?;
    for (x, y) in traj.xs().iter().zip(traj.ys()) {
        trace.push(x.clone(), *y, start);
    }
    let explore = env.episodes() == 1;
    let domain = env.variant.domain().clone();
    while !traj.is_complete() {
        let mut action = agent.select_action(model, traj.xs(), traj.ys(), &domain, rng)?;
        if explore {
            action = exploration_mix(action, traj.len(), &env.config, &domain, rng)?;
        }
        env.step(&mut traj, &action)?;
        trace.push(action, *traj.ys().last().expect("stepped"), start);
    }
    Ok(traj)
}

/// Outcome of the pre-training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub evaluations: usize,
    pub variant_ids: Vec<String>,
    pub surrogate_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
    pub actor_losses: Vec<f64>,
    pub rejected_steps: usize,
}

/// Trained surrogate and agent.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: TdklModel,
    pub agent: Agent,
    pub report: PretrainReport,
    pub buffer: ReplayBuffer,
}

pub const SURROGATE_CHECKPOINT: &str = "tdkl.ckpt";
pub const AGENT_CHECKPOINT: &str = "agent.ckpt";

impl Pretrained {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save_checkpoint(dir.join(SURROGATE_CHECKPOINT))?;
        self.agent.save_checkpoint(dir.join(AGENT_CHECKPOINT))
    }

    /// Rebuilds the networks described by `config` and loads their weights.
    pub fn load(config: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (mut model, mut agent) = fresh_networks(config)?;
        model.load_checkpoint(dir.join(SURROGATE_CHECKPOINT))?;
        agent.load_checkpoint(dir.join(AGENT_CHECKPOINT))?;
        Ok(Self { model, agent, report: PretrainReport::default(), buffer: ReplayBuffer::new(config.replay_capacity) })
    }
}

fn fresh_networks(config: &ExperimentConfig) -> Result<(TdklModel, Agent)> {
    let dim = config.objective_dim()?;
    let model = TdklModel::new(config.tdkl_config(), dim, config.seed(&[stream::SURROGATE_INIT]))?;
    let agent = Agent::new(config.sac.clone(), dim, model.embedding_dim(), config.seed(&[stream::AGENT_INIT]))?;
    Ok((model, agent))
}

/// Meta-training: one rollout per fresh variant with the current agent,
/// each followed by a training round on the replay buffer.
pub fn run_pretraining(config: &ExperimentConfig) -> Result<Pretrained> {
    config.validate()?;
    if config.method != Method::Rtdk {
        return Err(Error::Config(format!("method {} has nothing to pre-train", config.method)));
    }
    let (model, agent) = fresh_networks(config)?;
    let mut learner = Learner::new(model, agent);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut cache = optimum_cache(config)?;
    let mut rollout_rng = config.rng(&[stream::PRETRAIN_ROLLOUT]);
    let mut train_rng = config.rng(&[stream::PRETRAIN_TRAINING]);
    let mut report = PretrainReport::default();
    let env_config = config.environment(config.pretrain_samples_per_variant);
    for i in 0..config.n_pretrain_variants {
        let variant = make_variant(config, Phase::Pretrain, i, &mut cache)?;
        let bounds = action_bounds(variant.domain())?;
        report.variant_ids.push(variant.id.clone());
        let mut env = Environment::new(variant, env_config)?;
        let mut trace = Trace::default();
        let start = Instant::now();
        while !env.is_finished() {
            let traj = agent_episode(&mut env, &learner.model, &learner.agent, &mut rollout_rng, &mut trace, start)?;
            buffer.store_trajectory(traj)?;
        }
        report.evaluations += env.evaluations();
        let log = learner.train(&buffer, config.updates_per_trajectory, &bounds, config.epsilon_clamp, &mut train_rng)?;
        log::info!(
            "pre-training variant {}/{}: last surrogate loss {:?}, last critic loss {:?}",
            i + 1,
            config.n_pretrain_variants,
            log.surrogate_losses.last(),
            log.critic_losses.last()
        );
        report.surrogate_losses.extend(log.surrogate_losses);
        report.critic_losses.extend(log.critic_losses);
        report.actor_losses.extend(log.actor_losses);
    }
    report.rejected_steps = learner.rejected_total;
    if config.optimum_cache.is_some() {
        cache.save()?;
    }
    Ok(Pretrained { model: learner.model, agent: learner.agent, report, buffer })
}

/// Best-so-far regret after one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub method: String,
    pub variant_id: String,
    pub seed: u64,
    /// 1-based index of the evaluation within its run.
    pub step: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub y_best: f64,
    pub regret: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant_id: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationOutput {
    pub records: Vec<RegretRecord>,
    pub failures: Vec<RunFailure>,
    /// Instrumentation totals over all runs.
    pub counters: Counters,
    /// Sub-trajectories started per run, in run order.
    pub episodes: Vec<usize>,
}

struct RunResult {
    records: Result<Vec<RegretRecord>>,
    counters: Counters,
    episodes: usize,
}

fn to_records(method: &str, variant: &ObjectiveVariant, seed: u64, trace: Trace, wall_time: bool) -> Vec<RegretRecord> {
    let f_star = variant.f_star();
    let mut best = f64::NEG_INFINITY;
    trace
        .xs
        .into_iter()
        .zip(trace.ys)
        .zip(trace.elapsed_ms)
        .enumerate()
        .map(|(i, ((x, y), ms))| {
            best = best.max(y);
            RegretRecord {
                method: method.to_string(),
                variant_id: variant.id.clone(),
                seed,
                step: i + 1,
                x,
                y,
                y_best: best,
                regret: f_star - best,
                wall_time_ms: if wall_time { ms } else { 0.0 },
            }
        })
        .collect()
}

fn run_agent(
    config: &ExperimentConfig,
    env: &mut Environment,
    pretrained: &Pretrained,
    rng: &mut ChaCha8Rng,
    trace: &mut Trace,
) -> Result<()> {
    let start = Instant::now();
    if !config.online_updates {
        while !env.is_finished() {
            agent_episode(env, &pretrained.model, &pretrained.agent, rng, trace, start)?;
        }
        return Ok(());
    }
    let mut learner = Learner::new(pretrained.model.clone(), pretrained.agent.clone());
    let mut buffer = pretrained.buffer.clone();
    let bounds = action_bounds(env.variant.domain())?;
    while !env.is_finished() {
        let traj = agent_episode(env, &learner.model, &learner.agent, rng, trace, start)?;
        buffer.store_trajectory(traj)?;
        if !env.is_finished() {
            learner.train(&buffer, config.updates_per_trajectory, &bounds, config.epsilon_clamp, rng)?;
        }
    }
    Ok(())
}

fn run_baseline(
    config: &ExperimentConfig,
    kind: AcquisitionKind,
    env: &mut Environment,
    rng: &mut ChaCha8Rng,
    trace: &mut Trace,
) -> Result<()> {
    let start = Instant::now();
    let acquisition = AcquisitionConfig { kind, ..config.acquisition };
    let mut gp = ClassicalGp::new(acquisition, env.variant.dim())?;
    let domain = env.variant.domain().clone();
    let mut obs = ObservationSet::empty();
    while !env.is_finished() {
        let x = if obs.len() < config.n_init { domain.sample_uniform(rng)? } else { gp.propose(&obs, &domain, rng)? };
        let y = env.evaluate(&x)?;
        obs.push(x.clone(), y)?;
        trace.push(x, y, start);
    }
    Ok(())
}

fn run_single(
    config: &ExperimentConfig,
    variant: ObjectiveVariant,
    index: usize,
    seed: u64,
    pretrained: Option<&Pretrained>,
) -> RunResult {
    let before = instrument::snapshot();
    let mut rng = config.rng(&[stream::EVAL_RUN, index as u64, seed]);
    let mut trace = Trace::default();
    let mut episodes = 0;
    let outcome = (|| {
        let mut env = Environment::new(variant, config.environment(config.eval_budget))?;
        let result = match (config.method.acquisition(), pretrained) {
            (Some(kind), _) => run_baseline(config, kind, &mut env, &mut rng, &mut trace),
            (None, Some(p)) => run_agent(config, &mut env, p, &mut rng, &mut trace),
            (None, None) => Err(Error::Config("the agent needs pre-trained checkpoints".into())),
        };
        episodes = env.episodes();
        result.map(|_| to_records(&config.method.to_string(), &env.variant, seed, std::mem::take(&mut trace), config.record_wall_time))
    })();
    RunResult { records: outcome, counters: instrument::snapshot().since(&before), episodes }
}

/// Evaluation runs on fresh variants for every seed. A failing run is
/// recorded and does not stop the others.
pub fn run_evaluation(config: &ExperimentConfig, pretrained: Option<&Pretrained>) -> Result<EvaluationOutput> {
    config.validate()?;
    if config.method == Method::Rtdk && pretrained.is_none() {
        return Err(Error::Config("the agent needs pre-trained checkpoints".into()));
    }
    let mut cache = optimum_cache(config)?;
    let variants: Vec<ObjectiveVariant> = (0..config.n_eval_variants)
        .map(|i| make_variant(config, Phase::Evaluation, i, &mut cache))
        .collect::<Result<_>>()?;
    if config.optimum_cache.is_some() {
        cache.save()?;
    }
    let jobs: Vec<(usize, u64)> =
        (0..variants.len()).flat_map(|i| config.seeds.iter().map(move |s| (i, *s))).collect();
    let results: Vec<RunResult> = if config.threads <= 1 || jobs.len() <= 1 {
        jobs.iter().map(|&(i, s)| run_single(config, variants[i].clone(), i, s, pretrained)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..config.threads.min(jobs.len()) {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(i, s)) = jobs.get(k) else { break };
                    let r = run_single(config, variants[i].clone(), i, s, pretrained);
                    slots.lock().expect("result slots")[k] = Some(r);
                });
            }
        });
        slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every job ran")).collect()
    };
    let mut out = EvaluationOutput::default();
    for ((i, seed), r) in jobs.into_iter().zip(results) {
        out.counters.surrogate += r.counters.surrogate;
        out.counters.agent += r.counters.agent;
        out.counters.evaluations += r.counters.evaluations;
        out.episodes.push(r.episodes);
        match r.records {
            Ok(records) => out.records.extend(records),
            Err(e) => {
                log::warn!("run on {} with seed {seed} failed: {e}", variants[i].id);
                out.failures.push(RunFailure { variant_id: variants[i].id.clone(), seed, message: e.to_string() });
            }
        }
    }
    Ok(out)
}

/// A sweep over one experiment setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    SubTrajectoryLengths(Vec<usize>),
    SurrogateVariants(Vec<SurrogateVariant>),
}

/// Parses `lengths=10,30,50` or `surrogates=none,feedforward,transformer`.
impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s.split_once('=').ok_or_else(|| Error::Config(format!("sweep {s:?} needs key=values")))?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        match key.trim() {
            "lengths" => items
                .iter()
                .map(|v| v.parse().map_err(|_| Error::Config(format!("bad length {v:?}"))))
                .collect::<Result<_>>()
                .map(Sweep::SubTrajectoryLengths),
            "surrogates" => items.iter().map(|v| v.parse()).collect::<Result<_>>().map(Sweep::SurrogateVariants),
            other => Err(Error::Config(format!("unknown sweep {other:?}"))),
        }
    }
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        match self {
            Sweep::SubTrajectoryLengths(v) => v.is_empty(),
            Sweep::SurrogateVariants(v) => v.is_empty(),
        }
    }

    /// Tagged copies of `config`, one per setting.
    pub fn settings(&self, config: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        match self {
            Sweep::SubTrajectoryLengths(lengths) => lengths
                .iter()
                .map(|l| (format!("L{l}"), ExperimentConfig { sub_trajectory_length: *l, ..config.clone() }))
                .collect(),
            Sweep::SurrogateVariants(variants) => variants
                .iter()
                .map(|v| (format!("surrogate-{v}"), ExperimentConfig { surrogate_variant: *v, ..config.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSetting {
    pub tag: String,
    pub config: ExperimentConfig,
    pub pretrain: Option<PretrainReport>,
    pub output: EvaluationOutput,
}

/// Pre-training and evaluation for every setting of the sweep with shared
/// seeds. Record methods carry the setting tag.
pub fn run_ablation(config: &ExperimentConfig, sweep: &Sweep) -> Result<Vec<AblationSetting>> {
    if sweep.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    let mut out = Vec::new();
    for (tag, setting) in sweep.settings(config) {
        log::info!("ablation setting {tag}");
        setting.validate()?;
        let pretrained = if setting.method == Method::Rtdk { Some(run_pretraining(&setting)?) } else { None };
        let mut output = run_evaluation(&setting, pretrained.as_ref())?;
        for r in &mut output.records {
            r.method = format!("{}-{tag}", r.method);
        }
        out.push(AblationSetting { tag, config: setting, pretrain: pretrained.map(|p| p.report), output });
    }
    Ok(out)
}
