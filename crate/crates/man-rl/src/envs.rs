//! Environments: the discrete block-stacking task and a seeded random
//! factored-MDP generator.
//!
//! Block stacking discretizes the build area into 16 cells. A joint action
//! picks a block type (first sub-action, 4 choices) and one of the middle 14
//! positions (second sub-action); position index `p` maps to center cell
//! `x = p + 1` so no footprint ever leaves the area. A block rests on the
//! maximum height under its footprint; gaps left underneath become permanent
//! holes.

use crate::rng::RngStream;
use crate::space::FactoredActionSpace;
use crate::tabular::ExplicitMdp;
use crate::{Error, Result};

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// Common environment contract: reset to a fresh observation, then step with
/// a factored action until terminal. Stepping after terminal is an error.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> FactoredActionSpace;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64>;
    fn step(&mut self, a_first: usize, a_second: usize, rng: &mut RngStream)
        -> Result<StepOutcome>;
}

pub const STACK_CELLS: usize = 16;
pub const STACK_POSITIONS: usize = 14;
pub const STACK_BLOCK_TYPES: usize = 4;

/// The four block shapes as (width in cells, height in units).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCatalog;

impl BlockCatalog {
    pub const SHAPES: [(usize, usize); STACK_BLOCK_TYPES] = [(1, 1), (3, 1), (3, 2), (3, 3)];

    pub fn shape(block_type: usize) -> Result<(usize, usize)> {
        Self::SHAPES
            .get(block_type)
            .copied()
            .ok_or_else(|| Error::IndexOutOfBounds(format!("block type {block_type} outside 0..4")))
    }

    /// Three-cell outline of the block, used as the sub-action encoding for
    /// the second network: the 1x1 block is (0,1,0); a 3-wide block of
    /// height h is (h,h,h).
    pub fn outline(block_type: usize) -> Result<[f64; 3]> {
        let (w, h) = Self::shape(block_type)?;
        Ok(if w == 1 {
            [0.0, h as f64, 0.0]
        } else {
            [h as f64; 3]
        })
    }
}

/// Column heights over the 16 cells plus bookkeeping counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeightMap {
    pub heights: [u32; STACK_CELLS],
    pub blocks_placed: usize,
    pub holes: u32,
}

impl HeightMap {
    pub fn new() -> Self {
        Self { heights: [0; STACK_CELLS], blocks_placed: 0, holes: 0 }
    }

    pub fn max_height(&self) -> u32 {
        *self.heights.iter().max().unwrap()
    }

    pub fn total_height(&self) -> u64 {
        self.heights.iter().map(|&h| h as u64).sum()
    }

    pub fn observation(&self) -> Vec<f64> {
        self.heights.iter().map(|&h| h as f64).collect()
    }
}

impl Default for HeightMap {
    fn default() -> Self {
        Self::new()
    }
}

/// Population variance of the 16 column heights.
pub fn bumpiness(heights: &[u32; STACK_CELLS]) -> f64 {
    let n = STACK_CELLS as f64;
    let mean = heights.iter().map(|&h| h as f64).sum::<f64>() / n;
    heights
        .iter()
        .map(|&h| {
            let d = h as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Weights of the shaped stacking reward
/// `r = -w_height*(d max height) - w_bumpiness*(d bumpiness) - w_holes*(new holes)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub height: f64,
    pub bumpiness: f64,
    pub holes: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { height: 1.0, bumpiness: 0.5, holes: 0.25 }
    }
}

/// Shaped reward for one placement, from the maps before and after.
pub fn stack_reward(before: &HeightMap, after: &HeightMap, weights: &RewardWeights) -> f64 {
    let d_max = after.max_height() as f64 - before.max_height() as f64;
    let d_bump = bumpiness(&after.heights) - bumpiness(&before.heights);
    let new_holes = (after.holes - before.holes) as f64;
    -weights.height * d_max - weights.bumpiness * d_bump - weights.holes * new_holes
}

/// Deterministic block-stacking simulator over a 16-cell heightmap.
#[derive(Debug, Clone)]
pub struct BlockStackEnv {
    map: HeightMap,
    weights: RewardWeights,
    horizon: usize,
    height_cap: u32,
    terminal: bool,
}

impl BlockStackEnv {
    pub fn new(weights: RewardWeights, horizon: usize, height_cap: u32) -> Self {
        Self { map: HeightMap::new(), weights, horizon, height_cap, terminal: false }
    }

    pub fn map(&self) -> &HeightMap {
        &self.map
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Footprint cells for placing `block_type` at position `p` (center cell
    /// `p + 1`).
    pub fn footprint(block_type: usize, position: usize) -> Result<std::ops::RangeInclusive<usize>> {
        if position >= STACK_POSITIONS {
            return Err(Error::IndexOutOfBounds(format!(
                "position {position} outside 0..{STACK_POSITIONS}"
            )));
        }
        let (w, _) = BlockCatalog::shape(block_type)?;
        let center = position + 1;
        Ok(center - w / 2..=center + w / 2)
    }

    /// Place one block; pure in (state, action).
    fn place(&mut self, a_first: usize, a_second: usize) -> Result<()> {
        let cells = Self::footprint(a_first, a_second)?;
        let (_, block_h) = BlockCatalog::shape(a_first)?;
        let rest = cells
            .clone()
            .map(|c| self.map.heights[c])
            .max()
            .expect("footprint non-empty");
        for c in cells {
            self.map.holes += rest - self.map.heights[c];
            self.map.heights[c] = rest + block_h as u32;
        }
        self.map.blocks_placed += 1;
        Ok(())
    }
}

impl Default for BlockStackEnv {
    fn default() -> Self {
        Self::new(RewardWeights::default(), 20, 24)
    }
}

impl Environment for BlockStackEnv {
    fn observation_dim(&self) -> usize {
        STACK_CELLS
    }

    fn action_space(&self) -> FactoredActionSpace {
        FactoredActionSpace::new(STACK_BLOCK_TYPES, STACK_POSITIONS).expect("static sizes")
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<f64> {
        self.map = HeightMap::new();
        self.terminal = false;
        self.map.observation()
    }

    fn step(
        &mut self,
        a_first: usize,
        a_second: usize,
        _rng: &mut RngStream,
    ) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::Model("step on a terminal episode; reset first".into()));
        }
        let before = self.map.clone();
        self.place(a_first, a_second)?;
        let reward = stack_reward(&before, &self.map, &self.weights);
        self.terminal =
            self.map.blocks_placed >= self.horizon || self.map.max_height() > self.height_cap;
        Ok(StepOutcome { observation: self.map.observation(), reward, terminal: self.terminal })
    }
}

/// Seeded random factored MDP: row-stochastic kernel with a fixed number of
/// possible successors per (s, a) pair and rewards uniform in [-1, 1].
///
/// `sparsity` in [0, 1) controls branching: each row has
/// `clamp(round(S * (1 - sparsity)), 1, S)` successor states.
pub fn mdp_generate(
    seed: u64,
    n_states: usize,
    n_first: usize,
    n_second: usize,
    sparsity: f64,
    gamma: f64,
) -> Result<ExplicitMdp> {
    if n_states < 2 || n_first < 2 || n_second < 2 {
        return Err(Error::Config(format!(
            "degenerate sizes: {n_states} states, {n_first}x{n_second} actions"
        )));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity must lie in [0,1), got {sparsity}")));
    }
    let space = FactoredActionSpace::new(n_first, n_second)?;
    let branching =
        ((n_states as f64 * (1.0 - sparsity)).round() as usize).clamp(1, n_states);
    let mut rng = RngStream::new(seed).fork(0x6d64_7067); // "mdpg"
    let mut transitions = Vec::with_capacity(n_states * space.joint_size());
    let mut rewards = Vec::with_capacity(n_states * space.joint_size());
    for _s in 0..n_states {
        for _joint in 0..space.joint_size() {
            // choose `branching` distinct successors by partial shuffle
            let mut pool: Vec<usize> = (0..n_states).collect();
            for i in 0..branching {
                let j = i + rng.below(n_states - i);
                pool.swap(i, j);
            }
            let raw: Vec<f64> = (0..branching).map(|_| rng.uniform(1e-3, 1.0)).collect();
            let total: f64 = raw.iter().sum();
            let row: Vec<(usize, f64)> = pool[..branching]
                .iter()
                .zip(&raw)
                .map(|(&s2, &w)| (s2, w / total))
                .collect();
            transitions.push(row);
            rewards.push(rng.uniform(-1.0, 1.0));
        }
    }
    ExplicitMdp::new(n_states, space, gamma, transitions, rewards)
}

/// Adapter exposing an [`ExplicitMdp`] through the [`Environment`] trait with
/// one-hot state observations and uniform-random initial states. Episodes
/// run to the horizon; the MDP itself has no terminal states.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    mdp: ExplicitMdp,
    state: usize,
    steps: usize,
    horizon: usize,
    terminal: bool,
}

impl MdpEnv {
    pub fn new(mdp: ExplicitMdp, horizon: usize) -> Self {
        Self { mdp, state: 0, steps: 0, horizon, terminal: false }
    }

    pub fn mdp(&self) -> &ExplicitMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[self.state] = 1.0;
        v
    }
}

impl Environment for MdpEnv {
    fn observation_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn action_space(&self) -> FactoredActionSpace {
        *self.mdp.space()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64> {
        self.state = rng.below(self.mdp.n_states());
        self.steps = 0;
        self.terminal = false;
        self.one_hot()
    }

    fn step(
        &mut self,
        a_first: usize,
        a_second: usize,
        rng: &mut RngStream,
    ) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::Model("step on a terminal episode; reset first".into()));
        }
        let (next, reward) = self.mdp.sample_step(self.state, a_first, a_second, rng)?;
        self.state = next;
        self.steps += 1;
        self.terminal = self.steps >= self.horizon;
        Ok(StepOutcome { observation: self.one_hot(), reward, terminal: self.terminal })
    }
}
