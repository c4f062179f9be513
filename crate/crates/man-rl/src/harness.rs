//! Experiment harness: configuration, the training loop binding agents to
//! environments, greedy evaluation, metrics, and CSV emission.
//!
//! A run is fully determined by `(config, seed)`: every random draw flows
//! from forks of the run seed, and the CSV contains no wall-clock data, so
//! repeated runs produce byte-identical files.
//!
//! Config files are flat `key = value` text; `#` starts a comment and
//! unknown keys are errors. Per-episode CSV schema (header exactly):
//! `episode,return,steps,max_height,bumpiness,holes,epsilon` — the three
//! terminal-metric fields are empty for non-stacking environments.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::agents::{AgentHyper, DqnAgent, DqnMode, ManAgent, SubActionEncoder};
use crate::envs::{
    bumpiness, mdp_generate, BlockStackEnv, Environment, MdpEnv, RewardWeights, StepOutcome,
};
use crate::nn::OptimizerKind;
use crate::rng::RngStream;
use crate::schedule::EpsilonSchedule;
use crate::space::{FactoredActionSpace, Transition};
use crate::tabular::{argmax, JointUpdateMode, Step, TabularJointQ, TabularMan};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Man,
    Dqn,
    Ddqn,
    TabularMan,
    TabularQ,
    TabularDoubleQ,
}

impl AgentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "man" => Ok(Self::Man),
            "dqn" => Ok(Self::Dqn),
            "ddqn" => Ok(Self::Ddqn),
            "tabular_man" => Ok(Self::TabularMan),
            "tabular_q" => Ok(Self::TabularQ),
            "tabular_double_q" => Ok(Self::TabularDoubleQ),
            other => Err(Error::Config(format!("unknown agent kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Man => "man",
            Self::Dqn => "dqn",
            Self::Ddqn => "ddqn",
            Self::TabularMan => "tabular_man",
            Self::TabularQ => "tabular_q",
            Self::TabularDoubleQ => "tabular_double_q",
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Self::TabularMan | Self::TabularQ | Self::TabularDoubleQ)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    BlockStack,
    Mdp,
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blockstack" => Ok(Self::BlockStack),
            "mdp" => Ok(Self::Mdp),
            other => Err(Error::Config(format!("unknown env kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BlockStack => "blockstack",
            Self::Mdp => "mdp",
        }
    }
}

/// Target-network update cadence: hard copy every K environment steps, or a
/// soft blend with coefficient tau after every learner step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyncMode {
    Hard(u64),
    Soft(f64),
}

/// Everything a run needs besides the seed. See the module docs for the
/// config file syntax; field defaults mirror the documented key defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub agent: AgentKind,
    pub env: EnvKind,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub batch_size: usize,
    pub sync: SyncMode,
    /// `None` resolves to 1e-3 for deep agents, 0.1 for tabular ones.
    pub learning_rate: Option<f64>,
    pub buffer_capacity: usize,
    pub warmup: u64,
    pub episodes: usize,
    /// `None` resolves to 20 for block stacking, 40 for MDP environments.
    pub horizon: Option<usize>,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    pub condition_on_fresh: bool,
    pub trace: bool,
    pub seeds: Vec<u64>,
    pub height_cap: u32,
    pub reward_weights: RewardWeights,
    pub mdp_seed: u64,
    pub mdp_states: usize,
    pub mdp_n_first: usize,
    pub mdp_n_second: usize,
    pub mdp_sparsity: f64,
    /// Per-visit step size `lr / n^power` for tabular agents.
    pub tabular_alpha_power: f64,
    pub tabular_visit_alpha: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            agent: AgentKind::Man,
            env: EnvKind::BlockStack,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_steps: 10_000,
            batch_size: 32,
            sync: SyncMode::Soft(0.005),
            learning_rate: None,
            buffer_capacity: 100_000,
            warmup: 1_000,
            episodes: 1_000,
            horizon: None,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Adam,
            max_grad_norm: None,
            condition_on_fresh: false,
            trace: false,
            seeds: vec![0],
            height_cap: 24,
            reward_weights: RewardWeights::default(),
            mdp_seed: 0,
            mdp_states: 5,
            mdp_n_first: 2,
            mdp_n_second: 2,
            mdp_sparsity: 0.5,
            tabular_alpha_power: 0.85,
            tabular_visit_alpha: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}' wants true/false, got '{value}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|part| !part.trim().is_empty())
        .map(|part| parse_num(key, part.trim()))
        .collect()
}

impl ExperimentConfig {
    /// Parse flat `key = value` text. Unknown keys fail fast.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            config.apply(key, value).map_err(|e| Error::Parse {
                line: line_no + 1,
                message: e.to_string(),
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Set one configuration key from its text form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "agent" => self.agent = AgentKind::parse(value)?,
            "env" => self.env = EnvKind::parse(value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "eps_start" => self.eps_start = parse_num(key, value)?,
            "eps_end" => self.eps_end = parse_num(key, value)?,
            "eps_decay_steps" => self.eps_decay_steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "sync_mode" => {
                self.sync = match value {
                    "hard" => SyncMode::Hard(match self.sync {
                        SyncMode::Hard(k) => k,
                        _ => 1_000,
                    }),
                    "soft" => SyncMode::Soft(match self.sync {
                        SyncMode::Soft(tau) => tau,
                        _ => 0.005,
                    }),
                    other => {
                        return Err(Error::Config(format!("unknown sync mode '{other}'")))
                    }
                }
            }
            "sync_k" => self.sync = SyncMode::Hard(parse_num(key, value)?),
            "sync_tau" => self.sync = SyncMode::Soft(parse_num(key, value)?),
            "learning_rate" => self.learning_rate = Some(parse_num(key, value)?),
            "buffer_capacity" => self.buffer_capacity = parse_num(key, value)?,
            "warmup" => self.warmup = parse_num(key, value)?,
            "episodes" => self.episodes = parse_num(key, value)?,
            "horizon" => self.horizon = Some(parse_num(key, value)?),
            "hidden" => self.hidden = parse_list(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => {
                        return Err(Error::Config(format!("unknown optimizer '{other}'")))
                    }
                }
            }
            "max_grad_norm" => self.max_grad_norm = Some(parse_num(key, value)?),
            "condition_on_fresh" => self.condition_on_fresh = parse_bool(key, value)?,
            "trace" => self.trace = parse_bool(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "height_cap" => self.height_cap = parse_num(key, value)?,
            "reward_height" => self.reward_weights.height = parse_num(key, value)?,
            "reward_bumpiness" => self.reward_weights.bumpiness = parse_num(key, value)?,
            "reward_holes" => self.reward_weights.holes = parse_num(key, value)?,
            "mdp_seed" => self.mdp_seed = parse_num(key, value)?,
            "mdp_states" => self.mdp_states = parse_num(key, value)?,
            "mdp_n_first" => self.mdp_n_first = parse_num(key, value)?,
            "mdp_n_second" => self.mdp_n_second = parse_num(key, value)?,
            "mdp_sparsity" => self.mdp_sparsity = parse_num(key, value)?,
            "tabular_alpha_power" => self.tabular_alpha_power = parse_num(key, value)?,
            "tabular_visit_alpha" => self.tabular_visit_alpha = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0,1], got {}", self.gamma)));
        }
        EpsilonSchedule::new(self.eps_start, self.eps_end, self.eps_decay_steps)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
            }
        }
        if let SyncMode::Hard(0) = self.sync {
            return Err(Error::Config("sync_k must be positive".into()));
        }
        if let SyncMode::Soft(tau) = self.sync {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("sync_tau must lie in (0,1], got {tau}")));
            }
        }
        if self.agent.is_tabular() && self.env != EnvKind::Mdp {
            return Err(Error::Config(
                "tabular agents need an enumerated state space; use env = mdp".into(),
            ));
        }
        if !self.agent.is_tabular() && (self.warmup as usize) < self.batch_size {
            return Err(Error::Config(format!(
                "warmup ({}) must be at least batch_size ({})",
                self.warmup, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule::new(self.eps_start, self.eps_end, self.eps_decay_steps)
            .expect("validated")
    }

    pub fn resolved_learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or(if self.agent.is_tabular() { 0.1 } else { 1e-3 })
    }

    pub fn resolved_horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.env {
            EnvKind::BlockStack => 20,
            EnvKind::Mdp => 40,
        })
    }
}

/// One row of the per-episode training log. `wall_ms` is kept in memory only
/// and never written to the CSV, preserving byte-identical output.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub max_height: Option<u32>,
    pub bumpiness: Option<f64>,
    pub holes: Option<u32>,
    pub epsilon: f64,
    pub wall_ms: f64,
}

pub const EPISODE_CSV_HEADER: &str = "episode,return,steps,max_height,bumpiness,holes,epsilon";

impl EpisodeRecord {
    pub fn csv_row(&self) -> String {
        let opt_u32 = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt_f64 = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.episode,
            self.ret,
            self.steps,
            opt_u32(self.max_height),
            opt_f64(self.bumpiness),
            opt_u32(self.holes),
            self.epsilon
        )
    }
}

/// Concrete environment instance plus access to stacking metrics and the
/// enumerated state index where they exist.
#[derive(Debug, Clone)]
pub enum EnvInstance {
    Stack(BlockStackEnv),
    Mdp(MdpEnv),
}

impl EnvInstance {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Ok(match config.env {
            EnvKind::BlockStack => Self::Stack(BlockStackEnv::new(
                config.reward_weights,
                config.resolved_horizon(),
                config.height_cap,
            )),
            EnvKind::Mdp => {
                let mdp = mdp_generate(
                    config.mdp_seed,
                    config.mdp_states,
                    config.mdp_n_first,
                    config.mdp_n_second,
                    config.mdp_sparsity,
                    config.gamma,
                )?;
                Self::Mdp(MdpEnv::new(mdp, config.resolved_horizon()))
            }
        })
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            Self::Stack(e) => e.observation_dim(),
            Self::Mdp(e) => e.observation_dim(),
        }
    }

    pub fn action_space(&self) -> FactoredActionSpace {
        match self {
            Self::Stack(e) => e.action_space(),
            Self::Mdp(e) => e.action_space(),
        }
    }

    pub fn reset(&mut self, rng: &mut RngStream) -> Vec<f64> {
        match self {
            Self::Stack(e) => e.reset(rng),
            Self::Mdp(e) => e.reset(rng),
        }
    }

    pub fn step(
        &mut self,
        a_first: usize,
        a_second: usize,
        rng: &mut RngStream,
    ) -> Result<StepOutcome> {
        match self {
            Self::Stack(e) => e.step(a_first, a_second, rng),
            Self::Mdp(e) => e.step(a_first, a_second, rng),
        }
    }

    /// Terminal metrics (max height, bumpiness, holes); stacking only.
    pub fn stack_metrics(&self) -> Option<(u32, f64, u32)> {
        match self {
            Self::Stack(e) => {
                let map = e.map();
                Some((map.max_height(), bumpiness(&map.heights), map.holes))
            }
            Self::Mdp(_) => None,
        }
    }

    /// Enumerated state index; MDP environments only.
    pub fn state_index(&self) -> Option<usize> {
        match self {
            Self::Stack(_) => None,
            Self::Mdp(e) => Some(e.state()),
        }
    }
}

/// A trained (or fresh) agent of any kind, for training and evaluation.
#[derive(Debug)]
pub enum AnyAgent {
    Man(ManAgent),
    Dqn(DqnAgent),
    TabMan(TabularMan),
    TabJoint(TabularJointQ, JointUpdateMode),
}

impl AnyAgent {
    pub fn build(config: &ExperimentConfig, env: &EnvInstance, rng: &mut RngStream) -> Result<Self> {
        let space = env.action_space();
        let hyper = AgentHyper {
            hidden: config.hidden.clone(),
            gamma: config.gamma,
            learning_rate: config.resolved_learning_rate(),
            optimizer: config.optimizer,
            buffer_capacity: config.buffer_capacity,
            schedule: config.schedule(),
        };
        Ok(match config.agent {
            AgentKind::Man => {
                let encoder = match config.env {
                    EnvKind::BlockStack => SubActionEncoder::BlockOutline,
                    EnvKind::Mdp => SubActionEncoder::OneHot,
                };
                let mut agent =
                    ManAgent::new(env.observation_dim(), space, encoder, &hyper, rng)?;
                agent.condition_on_fresh = config.condition_on_fresh;
                Self::Man(agent)
            }
            AgentKind::Dqn => Self::Dqn(DqnAgent::new(
                env.observation_dim(),
                space,
                DqnMode::Dqn,
                &hyper,
                rng,
            )?),
            AgentKind::Ddqn => Self::Dqn(DqnAgent::new(
                env.observation_dim(),
                space,
                DqnMode::Ddqn,
                &hyper,
                rng,
            )?),
            AgentKind::TabularMan => {
                let n_states = env.observation_dim();
                Self::TabMan(TabularMan::new(
                    n_states,
                    space,
                    config.resolved_learning_rate().min(1.0),
                    config.gamma,
                )?)
            }
            AgentKind::TabularQ => Self::TabJoint(
                TabularJointQ::new(
                    env.observation_dim(),
                    space,
                    config.resolved_learning_rate().min(1.0),
                    config.gamma,
                )?,
                JointUpdateMode::QLearning,
            ),
            AgentKind::TabularDoubleQ => Self::TabJoint(
                TabularJointQ::new(
                    env.observation_dim(),
                    space,
                    config.resolved_learning_rate().min(1.0),
                    config.gamma,
                )?,
                JointUpdateMode::DoubleQ,
            ),
        })
    }

    /// Greedy factored action. Tabular agents read the enumerated state from
    /// the one-hot observation.
    pub fn greedy(&self, observation: &[f64]) -> Result<(usize, usize)> {
        match self {
            Self::Man(a) => a.greedy(observation),
            Self::Dqn(a) => a.greedy(observation),
            Self::TabMan(a) => Ok(a.greedy(argmax(observation))),
            Self::TabJoint(a, mode) => a.greedy(argmax(observation), *mode),
        }
    }
}

/// Everything a finished run hands back: records in memory plus the paths of
/// any artifacts written.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<EpisodeRecord>,
    pub csv_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub agent_seed: u64,
}

struct CsvSink {
    file: Option<fs::File>,
    path: Option<PathBuf>,
}

impl CsvSink {
    fn new(out_dir: Option<&Path>, name: &str) -> Result<Self> {
        match out_dir {
            None => Ok(Self { file: None, path: None }),
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(name);
                let mut file = fs::File::create(&path)?;
                writeln!(file, "{EPISODE_CSV_HEADER}")?;
                Ok(Self { file: Some(file), path: Some(path) })
            }
        }
    }

    fn write_record(&mut self, record: &EpisodeRecord) -> Result<()> {
        if let Some(file) = &mut self.file {
            writeln!(file, "{}", record.csv_row())?;
        }
        Ok(())
    }

    fn write_comment(&mut self, text: &str) -> Result<()> {
        if let Some(file) = &mut self.file {
            writeln!(file, "# {text}")?;
        }
        Ok(())
    }
}

/// Run one training experiment to completion. Deterministic in
/// `(config, seed)`; artifacts land in `out_dir` when given.
pub fn run_training(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(AnyAgent, RunResult)> {
    config.validate()?;
    if config.agent.is_tabular() {
        run_training_tabular(config, seed, out_dir)
    } else {
        run_training_deep(config, seed, out_dir)
    }
}

fn run_training_deep(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(AnyAgent, RunResult)> {
    let root = RngStream::new(seed);
    let mut init_rng = root.fork(1);
    let mut env_rng = root.fork(2);
    let mut act_rng = root.fork(3);
    let mut sample_rng = root.fork(4);

    let mut env = EnvInstance::build(config)?;
    let mut agent = AnyAgent::build(config, &env, &mut init_rng)?;
    let schedule = config.schedule();

    let mut csv = CsvSink::new(out_dir, &format!("train_{}_seed{}.csv", config.agent.name(), seed))?;
    let mut trace = String::new();

    let mut records = Vec::with_capacity(config.episodes);
    let mut global_step: u64 = 0;
    for episode in 0..config.episodes {
        let started = Instant::now();
        let mut obs = env.reset(&mut env_rng);
        let mut ret = 0.0;
        let mut steps = 0usize;
        loop {
            let (a_first, a_second) = match &agent {
                AnyAgent::Man(a) => a.select(&obs, global_step, &mut act_rng)?,
                AnyAgent::Dqn(a) => a.select(&obs, global_step, &mut act_rng)?,
                _ => unreachable!("deep loop"),
            };
            let out = env.step(a_first, a_second, &mut env_rng)?;
            ret += out.reward;
            steps += 1;
            global_step += 1;
            let transition = Transition {
                state: obs,
                a_first,
                a_second,
                reward: out.reward,
                next_state: out.observation.clone(),
                terminal: out.terminal,
            };
            if config.trace {
                let (mh, bp, hl) = env.stack_metrics().unwrap_or((0, 0.0, 0));
                let _ = writeln!(
                    trace,
                    "{episode} {steps} {a_first} {a_second} {} {mh} {bp} {hl}",
                    out.reward
                );
            }
            let warm = match &mut agent {
                AnyAgent::Man(a) => {
                    a.observe(transition)?;
                    a.buffer.insert_count() > config.warmup
                }
                AnyAgent::Dqn(a) => {
                    a.observe(transition)?;
                    a.buffer.insert_count() > config.warmup
                }
                _ => unreachable!(),
            };
            if warm {
                let finite = match &mut agent {
                    AnyAgent::Man(a) => a
                        .train_step(config.batch_size, &mut sample_rng)?
                        .map(|(l1, l2)| l1.is_finite() && l2.is_finite()),
                    AnyAgent::Dqn(a) => a
                        .train_step(config.batch_size, &mut sample_rng)?
                        .map(|l| l.is_finite()),
                    _ => unreachable!(),
                };
                if finite == Some(false) {
                    csv.write_comment(&format!(
                        "diverged: non-finite loss at episode {episode} step {steps}"
                    ))?;
                    return Err(Error::Divergence(format!(
                        "non-finite loss at episode {episode} step {steps}"
                    )));
                }
                if let SyncMode::Soft(tau) = config.sync {
                    match &mut agent {
                        AnyAgent::Man(a) => a.sync_soft(tau)?,
                        AnyAgent::Dqn(a) => a.sync_soft(tau)?,
                        _ => unreachable!(),
                    }
                }
            }
            if let SyncMode::Hard(k) = config.sync {
                if global_step % k == 0 {
                    match &mut agent {
                        AnyAgent::Man(a) => a.sync_hard(),
                        AnyAgent::Dqn(a) => a.sync_hard(),
                        _ => unreachable!(),
                    }
                }
            }
            obs = out.observation;
            if out.terminal {
                break;
            }
        }
        let (max_height, bump, holes) = match env.stack_metrics() {
            Some((m, b, h)) => (Some(m), Some(b), Some(h)),
            None => (None, None, None),
        };
        let record = EpisodeRecord {
            episode,
            ret,
            steps,
            max_height,
            bumpiness: bump,
            holes,
            epsilon: schedule.value(global_step),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        csv.write_record(&record)?;
        records.push(record);
    }

    let checkpoint_path = if let Some(dir) = out_dir {
        let path = dir.join(format!("agent_{}_seed{}.ckpt", config.agent.name(), seed));
        match &agent {
            AnyAgent::Man(a) => a.save(&path)?,
            AnyAgent::Dqn(a) => a.save(&path)?,
            _ => unreachable!(),
        }
        Some(path)
    } else {
        None
    };
    if config.trace {
        if let Some(dir) = out_dir {
            fs::write(dir.join(format!("trace_{}_seed{}.txt", config.agent.name(), seed)), trace)?;
        }
    }
    Ok((
        agent,
        RunResult { records, csv_path: csv.path, checkpoint_path, agent_seed: seed },
    ))
}

fn run_training_tabular(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(AnyAgent, RunResult)> {
    let root = RngStream::new(seed);
    let mut env_rng = root.fork(2);
    let mut act_rng = root.fork(3);

    let mut env = EnvInstance::build(config)?;
    let mut init_rng = root.fork(1);
    let mut agent = AnyAgent::build(config, &env, &mut init_rng)?;
    let schedule = config.schedule();
    let base_lr = config.resolved_learning_rate().min(1.0);
    let space = env.action_space();
    let n_states = env.observation_dim();

    // per-visit step-size decay: alpha = lr / n^power
    let mut visits_first = vec![0u64; n_states * space.n_first()];
    let mut visits_second = vec![0u64; n_states * space.joint_size()];
    let mut visits_joint = vec![0u64; n_states * space.joint_size()];
    let alpha_of = |count: u64| -> f64 {
        (base_lr / (count as f64).powf(config.tabular_alpha_power)).min(1.0)
    };

    let mut csv = CsvSink::new(out_dir, &format!("train_{}_seed{}.csv", config.agent.name(), seed))?;
    let mut records = Vec::with_capacity(config.episodes);
    let mut global_step: u64 = 0;
    let horizon = config.resolved_horizon();
    for episode in 0..config.episodes {
        let started = Instant::now();
        env.reset(&mut env_rng);
        let mut state = env.state_index().expect("tabular runs on mdp");
        let mut ret = 0.0;
        let mut steps = 0usize;
        for _ in 0..horizon {
            let eps = schedule.value(global_step);
            let (a_first, a_second) = match &agent {
                AnyAgent::TabMan(a) => a.epsilon_greedy(state, eps, &mut act_rng),
                AnyAgent::TabJoint(a, mode) => {
                    a.epsilon_greedy(state, *mode, eps, &mut act_rng)?
                }
                _ => unreachable!("tabular loop"),
            };
            let out = env.step(a_first, a_second, &mut env_rng)?;
            let next_state = env.state_index().expect("mdp");
            ret += out.reward;
            steps += 1;
            global_step += 1;
            let step = Step {
                state,
                a_first,
                a_second,
                reward: out.reward,
                next_state,
                // the generated MDPs are continuing; the horizon only slices
                // episodes, so never cut the bootstrap
                terminal: false,
            };
            match &mut agent {
                AnyAgent::TabMan(a) => {
                    let joint = space.join(a_first, a_second)?;
                    let n2 = &mut visits_second[state * space.joint_size() + joint];
                    *n2 += 1;
                    a.alpha = if config.tabular_visit_alpha { alpha_of(*n2) } else { base_lr };
                    a.update_second(&step)?;
                    let n1 = &mut visits_first[state * space.n_first() + a_first];
                    *n1 += 1;
                    a.alpha = if config.tabular_visit_alpha { alpha_of(*n1) } else { base_lr };
                    a.update_first(&step)?;
                }
                AnyAgent::TabJoint(a, mode) => {
                    let joint = space.join(a_first, a_second)?;
                    let n = &mut visits_joint[state * space.joint_size() + joint];
                    *n += 1;
                    a.alpha = if config.tabular_visit_alpha { alpha_of(*n) } else { base_lr };
                    let mode = *mode;
                    a.update(&step, mode, &mut act_rng)?;
                }
                _ => unreachable!(),
            }
            state = next_state;
            if out.terminal {
                break;
            }
        }
        let record = EpisodeRecord {
            episode,
            ret,
            steps,
            max_height: None,
            bumpiness: None,
            holes: None,
            epsilon: schedule.value(global_step),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        csv.write_record(&record)?;
        records.push(record);
    }

    let checkpoint_path = if let Some(dir) = out_dir {
        let path = dir.join(format!("tables_{}_seed{}.txt", config.agent.name(), seed));
        let mut dump = String::new();
        match &agent {
            AnyAgent::TabMan(a) => {
                for s in 0..n_states {
                    for a1 in 0..space.n_first() {
                        let _ = write!(dump, "q1 {s} {a1} {}\n", a.q_first(s, a1));
                        for a2 in 0..space.n_second() {
                            let _ = write!(dump, "q2 {s} {a1} {a2} {}\n", a.q_second(s, a1, a2));
                        }
                    }
                }
            }
            AnyAgent::TabJoint(a, _) => {
                for s in 0..n_states {
                    for joint in 0..space.joint_size() {
                        let _ = write!(dump, "q {s} {joint} {}\n", a.q(s, joint));
                    }
                }
            }
            _ => unreachable!(),
        }
        fs::write(&path, dump)?;
        Some(path)
    } else {
        None
    };
    Ok((
        agent,
        RunResult { records, csv_path: csv.path, checkpoint_path, agent_seed: seed },
    ))
}

/// Run greedy episodes with no learning or buffer writes. Returns the mean
/// return and the per-episode returns.
pub fn evaluate_policy(
    agent: &AnyAgent,
    env: &mut EnvInstance,
    episodes: usize,
    rng: &mut RngStream,
) -> Result<(f64, Vec<f64>)> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut ret = 0.0;
        loop {
            let (a_first, a_second) = agent.greedy(&obs)?;
            let out = env.step(a_first, a_second, rng)?;
            ret += out.reward;
            obs = out.observation;
            if out.terminal {
                break;
            }
        }
        returns.push(ret);
    }
    let mean = returns.iter().sum::<f64>() / episodes.max(1) as f64;
    Ok((mean, returns))
}

/// The paper's cross-task measure: `(agent - random) / (human - random)`.
pub fn normalized_score(agent: f64, random: f64, human: f64) -> Result<f64> {
    if human == random {
        return Err(Error::UndefinedScore);
    }
    Ok((agent - random) / (human - random))
}

/// Arithmetic mean and median (midpoint average for even counts).
pub fn summarize(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Config("cannot summarize an empty score list".into()));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok((mean, median))
}

/// Trailing-`window` mean of a learning curve; entry `i` averages the values
/// up to and including `i`, over at most `window` of them.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean of the final `window` episode returns of a run.
pub fn final_window_mean(records: &[EpisodeRecord], window: usize) -> f64 {
    let start = records.len().saturating_sub(window);
    let tail = &records[start..];
    tail.iter().map(|r| r.ret).sum::<f64>() / tail.len().max(1) as f64
}

pub const COMPARE_CSV_HEADER: &str = "agent,seed,episode,return,max_height,bumpiness";

/// Summary of one agent across the sweep's seeds.
#[derive(Debug, Clone)]
pub struct AgentSweep {
    pub agent: AgentKind,
    /// `(seed, final-100-episode mean return)` per seed, in input order.
    pub final_means: Vec<(u64, f64)>,
    /// Mean terminal bumpiness pooled over the final 100 episodes of every
    /// seed (stacking environments only).
    pub mean_terminal_bumpiness: Option<f64>,
}

impl AgentSweep {
    /// The final-100 mean of the seed-median run.
    pub fn median_final_mean(&self) -> f64 {
        let mut means: Vec<f64> = self.final_means.iter().map(|&(_, m)| m).collect();
        means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        means[means.len() / 2]
    }
}

/// Multi-agent, multi-seed sweep sharing one base config. Writes a joined
/// learning-curve CSV when `out_dir` is given and returns per-agent
/// summaries.
pub fn compare(
    base: &ExperimentConfig,
    agents: &[AgentKind],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<AgentSweep>> {
    if agents.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one agent and one seed".into()));
    }
    let mut rows = String::new();
    let _ = writeln!(rows, "{COMPARE_CSV_HEADER}");
    let mut sweeps = Vec::with_capacity(agents.len());
    for &agent_kind in agents {
        let mut config = base.clone();
        config.agent = agent_kind;
        let mut final_means = Vec::with_capacity(seeds.len());
        let mut bump_sum = 0.0;
        let mut bump_count = 0usize;
        for &seed in seeds {
            let (_, result) = run_training(&config, seed, None)?;
            let tail_start = result.records.len().saturating_sub(100);
            for r in &result.records {
                let _ = writeln!(
                    rows,
                    "{},{},{},{},{},{}",
                    agent_kind.name(),
                    seed,
                    r.episode,
                    r.ret,
                    r.max_height.map(|v| v.to_string()).unwrap_or_default(),
                    r.bumpiness.map(|v| v.to_string()).unwrap_or_default(),
                );
                if r.episode >= tail_start {
                    if let Some(b) = r.bumpiness {
                        bump_sum += b;
                        bump_count += 1;
                    }
                }
            }
            final_means.push((seed, final_window_mean(&result.records, 100)));
        }
        sweeps.push(AgentSweep {
            agent: agent_kind,
            final_means,
            mean_terminal_bumpiness: (bump_count > 0).then(|| bump_sum / bump_count as f64),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("compare.csv"), rows)?;
    }
    Ok(sweeps)
}
