//! Learning agents: deep MAN over a factored action space, and DQN/DDQN
//! baselines over the joint action space.
//!
//! The MAN agent keeps two networks. The first scores the first sub-action
//! from the state alone; the second scores the second sub-action from the
//! state concatenated with an encoding of the chosen first sub-action. Each
//! network has a frozen target copy for bootstrap targets. Per transition:
//!
//! ```text
//! a1_next = argmax online_q1(s')
//! a2_next = argmax online_q2(s' ++ enc(a1_stored))
//! y1 = r + gamma * target_q2(s' ++ enc(a1_stored))[a2_next]
//! y2 = r + gamma * target_q1(s')[a1_next]
//! ```
//!
//! with both targets collapsing to `r` on terminal transitions. The second
//! target conditions on the *stored* first sub-action; conditioning on the
//! fresh `a1_next` instead is available behind a flag for ablation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::nn::{Mlp, Optimizer, OptimizerKind, TargetPair};
use crate::replay::ReplayBuffer;
use crate::rng::RngStream;
use crate::schedule::EpsilonSchedule;
use crate::space::{FactoredActionSpace, Transition};
use crate::tabular::argmax;
use crate::{Error, Result};

const AGENT_MAGIC: &[u8; 8] = b"MANAGT01";

/// How the first sub-action is encoded for the second network's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubActionEncoder {
    /// One-hot over the first sub-action space (generic environments).
    OneHot,
    /// Three-cell block outline: type 0 (the 1x1 block) is (0,1,0); a
    /// 3-wide block of height h is (h,h,h). Block stacking only.
    BlockOutline,
}

impl SubActionEncoder {
    pub fn dim(&self, n_first: usize) -> usize {
        match self {
            Self::OneHot => n_first,
            Self::BlockOutline => 3,
        }
    }

    pub fn encode(&self, a_first: usize, n_first: usize) -> Result<Vec<f64>> {
        if a_first >= n_first {
            return Err(Error::IndexOutOfBounds(format!(
                "sub-action {a_first} outside {n_first}"
            )));
        }
        match self {
            Self::OneHot => {
                let mut v = vec![0.0; n_first];
                v[a_first] = 1.0;
                Ok(v)
            }
            Self::BlockOutline => {
                Ok(crate::envs::BlockCatalog::outline(a_first)?.to_vec())
            }
        }
    }
}

/// Shared hyperparameters for constructing agents.
#[derive(Debug, Clone)]
pub struct AgentHyper {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub buffer_capacity: usize,
    pub schedule: EpsilonSchedule,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// The two-network factored-action agent.
#[derive(Debug)]
pub struct ManAgent {
    obs_dim: usize,
    space: FactoredActionSpace,
    encoder: SubActionEncoder,
    pub net_first: TargetPair,
    pub net_second: TargetPair,
    opt_first: Optimizer,
    opt_second: Optimizer,
    pub buffer: ReplayBuffer<Transition>,
    pub schedule: EpsilonSchedule,
    pub gamma: f64,
    /// Ablation flag: condition the second bootstrap on the fresh
    /// `argmax q1(s')` instead of the stored first sub-action.
    pub condition_on_fresh: bool,
    learn_steps: u64,
}

impl ManAgent {
    pub fn new(
        obs_dim: usize,
        space: FactoredActionSpace,
        encoder: SubActionEncoder,
        hyper: &AgentHyper,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let enc_dim = encoder.dim(space.n_first());
        let first = Mlp::new(&layer_sizes(obs_dim, &hyper.hidden, space.n_first()), rng)?;
        let second = Mlp::new(
            &layer_sizes(obs_dim + enc_dim, &hyper.hidden, space.n_second()),
            rng,
        )?;
        Ok(Self {
            obs_dim,
            space,
            encoder,
            net_first: TargetPair::new(first),
            net_second: TargetPair::new(second),
            opt_first: Optimizer::new(hyper.optimizer, hyper.learning_rate),
            opt_second: Optimizer::new(hyper.optimizer, hyper.learning_rate),
            buffer: ReplayBuffer::new(hyper.buffer_capacity)?,
            schedule: hyper.schedule,
            gamma: hyper.gamma,
            condition_on_fresh: false,
            learn_steps: 0,
        })
    }

    pub fn space(&self) -> FactoredActionSpace {
        self.space
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn encoder(&self) -> SubActionEncoder {
        self.encoder
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    /// Total output heads across both networks (n_first + n_second), the
    /// action-space reduction the factoring buys over the joint baseline.
    pub fn total_outputs(&self) -> usize {
        self.space.n_first() + self.space.n_second()
    }

    /// Override the optimizer step sizes per network. The two inputs have
    /// different norms (the second carries the sub-action encoding), so
    /// matching a tabular step size requires different rates.
    pub fn set_learning_rates(&mut self, first: f64, second: f64) {
        self.opt_first.learning_rate = first;
        self.opt_second.learning_rate = second;
    }

    fn second_input(&self, state: &[f64], a_first: usize) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(state.len() + self.encoder.dim(self.space.n_first()));
        input.extend_from_slice(state);
        input.extend(self.encoder.encode(a_first, self.space.n_first())?);
        Ok(input)
    }

    /// Greedy factored action: sequential argmax through both networks.
    pub fn greedy(&self, state: &[f64]) -> Result<(usize, usize)> {
        let q1 = self.net_first.online.forward(state)?;
        let a_first = argmax(&q1);
        let q2 = self.net_second.online.forward(&self.second_input(state, a_first)?)?;
        Ok((a_first, argmax(&q2)))
    }

    /// Epsilon-greedy selection at schedule position `step`.
    pub fn select(&self, state: &[f64], step: u64, rng: &mut RngStream) -> Result<(usize, usize)> {
        let eps = self.schedule.value(step);
        if rng.chance(eps) {
            Ok((rng.below(self.space.n_first()), rng.below(self.space.n_second())))
        } else {
            self.greedy(state)
        }
    }

    pub fn observe(&mut self, t: Transition) -> Result<()> {
        t.validate(&self.space)?;
        if t.state.len() != self.obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "observation length {} vs expected {}",
                t.state.len(),
                self.obs_dim
            )));
        }
        self.buffer.push(t);
        Ok(())
    }

    /// Bootstrap targets `(y_first, y_second)` for a batch of transitions.
    pub fn targets(&self, batch: &[Transition]) -> Result<(Vec<f64>, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut y_first = Vec::with_capacity(batch.len());
        let mut y_second = Vec::with_capacity(batch.len());
        for t in batch {
            if t.terminal {
                y_first.push(t.reward);
                y_second.push(t.reward);
                continue;
            }
            let q1_online = self.net_first.online.forward(&t.next_state)?;
            let a1_next = argmax(&q1_online);
            let a1_cond = if self.condition_on_fresh { a1_next } else { t.a_first };
            let second_in = self.second_input(&t.next_state, a1_cond)?;
            let a2_next = argmax(&self.net_second.online.forward(&second_in)?);
            let q2_target = self.net_second.target.forward(&second_in)?;
            let q1_target = self.net_first.target.forward(&t.next_state)?;
            y_first.push(t.reward + self.gamma * q2_target[a2_next]);
            y_second.push(t.reward + self.gamma * q1_target[a1_next]);
        }
        Ok((y_first, y_second))
    }

    /// One optimizer step on each network against the batch; returns the
    /// pre-step losses.
    pub fn train_on_batch(&mut self, batch: &[Transition]) -> Result<(f64, f64)> {
        let (y_first, y_second) = self.targets(batch)?;
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
        let a_first: Vec<usize> = batch.iter().map(|t| t.a_first).collect();
        let second_inputs: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| self.second_input(&t.state, t.a_first))
            .collect::<Result<_>>()?;
        let a_second: Vec<usize> = batch.iter().map(|t| t.a_second).collect();
        let (loss_first, g1) = self.net_first.online.grad_mse(&states, &a_first, &y_first)?;
        let (loss_second, g2) =
            self.net_second.online.grad_mse(&second_inputs, &a_second, &y_second)?;
        self.opt_first.step(&mut self.net_first.online, &g1)?;
        self.opt_second.step(&mut self.net_second.online, &g2)?;
        self.learn_steps += 1;
        Ok((loss_first, loss_second))
    }

    /// Sample a minibatch and train. Returns `None` (no-op) while the buffer
    /// holds fewer than `batch_size` transitions.
    pub fn train_step(
        &mut self,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<Option<(f64, f64)>> {
        if self.buffer.len() < batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(batch_size, rng)?;
        self.train_on_batch(&batch).map(Some)
    }

    pub fn sync_hard(&mut self) {
        self.net_first.sync_hard();
        self.net_second.sync_hard();
    }

    pub fn sync_soft(&mut self, tau: f64) -> Result<()> {
        self.net_first.sync_soft(tau)?;
        self.net_second.sync_soft(tau)
    }

    /// Checkpoint: both target pairs, both optimizer states, learner-step
    /// counter. Bit-exact round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&[0u8])?; // agent kind: MAN
        w.write_all(&self.learn_steps.to_le_bytes())?;
        self.net_first.online.write_to(&mut w)?;
        self.net_first.target.write_to(&mut w)?;
        self.net_second.online.write_to(&mut w)?;
        self.net_second.target.write_to(&mut w)?;
        self.opt_first.write_to(&mut w)?;
        self.opt_second.write_to(&mut w)?;
        Ok(())
    }

    /// Restore a checkpoint written by [`ManAgent::save`] into this agent.
    /// Architectures must match the current configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 9];
        r.read_exact(&mut header)?;
        if &header[..8] != AGENT_MAGIC || header[8] != 0 {
            return Err(Error::Checkpoint("not a MAN agent checkpoint".into()));
        }
        let mut steps = [0u8; 8];
        r.read_exact(&mut steps)?;
        let online1 = Mlp::read_from(&mut r)?;
        let target1 = Mlp::read_from(&mut r)?;
        let online2 = Mlp::read_from(&mut r)?;
        let target2 = Mlp::read_from(&mut r)?;
        for (loaded, current) in [
            (&online1, &self.net_first.online),
            (&online2, &self.net_second.online),
        ] {
            if loaded.layer_sizes() != current.layer_sizes() {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: checkpoint {:?} vs agent {:?}",
                    loaded.layer_sizes(),
                    current.layer_sizes()
                )));
            }
        }
        self.opt_first = Optimizer::read_from(&mut r, &online1)?;
        self.opt_second = Optimizer::read_from(&mut r, &online2)?;
        self.learn_steps = u64::from_le_bytes(steps);
        self.net_first = TargetPair { online: online1, target: target1 };
        self.net_second = TargetPair { online: online2, target: target2 };
        Ok(())
    }
}

/// Baseline flavor: vanilla DQN or double DQN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqnMode {
    Dqn,
    Ddqn,
}

/// Single-network baseline over the joint action space.
#[derive(Debug)]
pub struct DqnAgent {
    obs_dim: usize,
    space: FactoredActionSpace,
    pub mode: DqnMode,
    pub net: TargetPair,
    opt: Optimizer,
    pub buffer: ReplayBuffer<Transition>,
    pub schedule: EpsilonSchedule,
    pub gamma: f64,
    learn_steps: u64,
}

impl DqnAgent {
    pub fn new(
        obs_dim: usize,
        space: FactoredActionSpace,
        mode: DqnMode,
        hyper: &AgentHyper,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let net = Mlp::new(&layer_sizes(obs_dim, &hyper.hidden, space.joint_size()), rng)?;
        Ok(Self {
            obs_dim,
            space,
            mode,
            net: TargetPair::new(net),
            opt: Optimizer::new(hyper.optimizer, hyper.learning_rate),
            buffer: ReplayBuffer::new(hyper.buffer_capacity)?,
            schedule: hyper.schedule,
            gamma: hyper.gamma,
            learn_steps: 0,
        })
    }

    pub fn space(&self) -> FactoredActionSpace {
        self.space
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    /// Output heads of the joint network (n_first * n_second).
    pub fn total_outputs(&self) -> usize {
        self.space.joint_size()
    }

    pub fn greedy(&self, state: &[f64]) -> Result<(usize, usize)> {
        let q = self.net.online.forward(state)?;
        self.space.split(argmax(&q))
    }

    pub fn select(&self, state: &[f64], step: u64, rng: &mut RngStream) -> Result<(usize, usize)> {
        let eps = self.schedule.value(step);
        if rng.chance(eps) {
            self.space.split(rng.below(self.space.joint_size()))
        } else {
            self.greedy(state)
        }
    }

    pub fn observe(&mut self, t: Transition) -> Result<()> {
        t.validate(&self.space)?;
        if t.state.len() != self.obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "observation length {} vs expected {}",
                t.state.len(),
                self.obs_dim
            )));
        }
        self.buffer.push(t);
        Ok(())
    }

    /// Vanilla target: `r + gamma * max_a' target_q(s')[a']`, or `r` at
    /// terminals.
    pub fn dqn_target(&self, t: &Transition) -> Result<f64> {
        if t.terminal {
            return Ok(t.reward);
        }
        let q = self.net.target.forward(&t.next_state)?;
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(t.reward + self.gamma * best)
    }

    /// Double target: online net selects the action, target net evaluates it.
    pub fn ddqn_target(&self, t: &Transition) -> Result<f64> {
        if t.terminal {
            return Ok(t.reward);
        }
        let select = argmax(&self.net.online.forward(&t.next_state)?);
        let q = self.net.target.forward(&t.next_state)?;
        Ok(t.reward + self.gamma * q[select])
    }

    pub fn target(&self, t: &Transition) -> Result<f64> {
        match self.mode {
            DqnMode::Dqn => self.dqn_target(t),
            DqnMode::Ddqn => self.ddqn_target(t),
        }
    }

    pub fn train_on_batch(&mut self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let targets: Vec<f64> = batch.iter().map(|t| self.target(t)).collect::<Result<_>>()?;
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
        let actions: Vec<usize> = batch
            .iter()
            .map(|t| self.space.join(t.a_first, t.a_second))
            .collect::<Result<_>>()?;
        let (loss, grads) = self.net.online.grad_mse(&states, &actions, &targets)?;
        self.opt.step(&mut self.net.online, &grads)?;
        self.learn_steps += 1;
        Ok(loss)
    }

    pub fn train_step(&mut self, batch_size: usize, rng: &mut RngStream) -> Result<Option<f64>> {
        if self.buffer.len() < batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(batch_size, rng)?;
        self.train_on_batch(&batch).map(Some)
    }

    pub fn sync_hard(&mut self) {
        self.net.sync_hard();
    }

    pub fn sync_soft(&mut self, tau: f64) -> Result<()> {
        self.net.sync_soft(tau)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&[match self.mode {
            DqnMode::Dqn => 1u8,
            DqnMode::Ddqn => 2u8,
        }])?;
        w.write_all(&self.learn_steps.to_le_bytes())?;
        self.net.online.write_to(&mut w)?;
        self.net.target.write_to(&mut w)?;
        self.opt.write_to(&mut w)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 9];
        r.read_exact(&mut header)?;
        let expected_kind = match self.mode {
            DqnMode::Dqn => 1u8,
            DqnMode::Ddqn => 2u8,
        };
        if &header[..8] != AGENT_MAGIC || header[8] != expected_kind {
            return Err(Error::Checkpoint("checkpoint agent kind mismatch".into()));
        }
        let mut steps = [0u8; 8];
        r.read_exact(&mut steps)?;
        let online = Mlp::read_from(&mut r)?;
        let target = Mlp::read_from(&mut r)?;
        if online.layer_sizes() != self.net.online.layer_sizes() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint {:?} vs agent {:?}",
                online.layer_sizes(),
                self.net.online.layer_sizes()
            )));
        }
        self.opt = Optimizer::read_from(&mut r, &online)?;
        self.learn_steps = u64::from_le_bytes(steps);
        self.net = TargetPair { online, target };
        Ok(())
    }
}
