//! Exact table-based learners and the value-iteration oracle.
//!
//! `TabularMan` keeps the pair of tables `Q1[s][a1]` and `Q2[s][a1][a2]` and
//! applies the coupled one-step updates: `Q2` bootstraps with the maximum of
//! `Q1` at the next state, while `Q1` bootstraps with the maximum of `Q2` at
//! the next state conditioned on the first sub-action that was taken. A
//! slower variant that bootstraps `Q1` with its own next-state entry is kept
//! for ablation. `TabularJointQ` is the flat Q-learning / Double Q-learning
//! baseline over the joint action index, and `value_iteration` solves an
//! [`ExplicitMdp`] exactly for ground truth.

use std::fmt::Write as _;

use crate::rng::RngStream;
use crate::space::FactoredActionSpace;
use crate::{Error, Result};

/// One interaction on an enumerated state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub a_first: usize,
    pub a_second: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Lowest-index argmax; deterministic across platforms.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max(values: &[f64]) -> f64 {
    values[argmax(values)]
}

#[derive(Debug, Clone)]
pub struct TabularMan {
    n_states: usize,
    space: FactoredActionSpace,
    pub alpha: f64,
    pub gamma: f64,
    q_first: Vec<Vec<f64>>,
    q_second: Vec<Vec<Vec<f64>>>,
}

impl TabularMan {
    pub fn new(
        n_states: usize,
        space: FactoredActionSpace,
        alpha: f64,
        gamma: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0,1], got {gamma}")));
        }
        Ok(Self {
            n_states,
            space,
            alpha,
            gamma,
            q_first: vec![vec![0.0; space.n_first()]; n_states],
            q_second: vec![vec![vec![0.0; space.n_second()]; space.n_first()]; n_states],
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn space(&self) -> &FactoredActionSpace {
        &self.space
    }

    pub fn q_first(&self, s: usize, a_first: usize) -> f64 {
        self.q_first[s][a_first]
    }

    pub fn q_second(&self, s: usize, a_first: usize, a_second: usize) -> f64 {
        self.q_second[s][a_first][a_second]
    }

    pub fn q_first_row(&self, s: usize) -> &[f64] {
        &self.q_first[s]
    }

    pub fn q_second_row(&self, s: usize, a_first: usize) -> &[f64] {
        &self.q_second[s][a_first]
    }

    pub fn set_q_first(&mut self, s: usize, a_first: usize, v: f64) {
        self.q_first[s][a_first] = v;
    }

    pub fn set_q_second(&mut self, s: usize, a_first: usize, a_second: usize, v: f64) {
        self.q_second[s][a_first][a_second] = v;
    }

    fn check(&self, t: &Step) -> Result<()> {
        if t.state >= self.n_states
            || t.next_state >= self.n_states
            || t.a_first >= self.space.n_first()
            || t.a_second >= self.space.n_second()
        {
            return Err(Error::IndexOutOfBounds(format!(
                "step {t:?} outside {} states, {}x{} actions",
                self.n_states,
                self.space.n_first(),
                self.space.n_second()
            )));
        }
        if !t.reward.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward {}", t.reward)));
        }
        Ok(())
    }

    /// Q2 update: bootstrap with the next-state maximum of Q1.
    pub fn update_second(&mut self, t: &Step) -> Result<()> {
        self.check(t)?;
        let bootstrap = if t.terminal {
            0.0
        } else {
            self.gamma * max(&self.q_first[t.next_state])
        };
        let target = t.reward + bootstrap;
        let entry = &mut self.q_second[t.state][t.a_first][t.a_second];
        *entry = (1.0 - self.alpha) * *entry + self.alpha * target;
        Ok(())
    }

    /// Q1 update: bootstrap with the next-state maximum of Q2 conditioned on
    /// the first sub-action that was taken.
    pub fn update_first(&mut self, t: &Step) -> Result<()> {
        self.check(t)?;
        let bootstrap = if t.terminal {
            0.0
        } else {
            self.gamma * max(&self.q_second[t.next_state][t.a_first])
        };
        let target = t.reward + bootstrap;
        let entry = &mut self.q_first[t.state][t.a_first];
        *entry = (1.0 - self.alpha) * *entry + self.alpha * target;
        Ok(())
    }

    /// Ablation variant: bootstrap Q1 with its own next-state entry instead
    /// of the Q2 maximum. Converges slower in practice; kept for comparison.
    pub fn update_first_variant(&mut self, t: &Step) -> Result<()> {
        self.check(t)?;
        let bootstrap = if t.terminal {
            0.0
        } else {
            self.gamma * self.q_first[t.next_state][t.a_first]
        };
        let target = t.reward + bootstrap;
        let entry = &mut self.q_first[t.state][t.a_first];
        *entry = (1.0 - self.alpha) * *entry + self.alpha * target;
        Ok(())
    }

    /// Nested greedy selection: argmax over Q1, then argmax over Q2 given
    /// the chosen first sub-action. Ties break to the lowest index.
    pub fn greedy(&self, s: usize) -> (usize, usize) {
        let a_first = argmax(&self.q_first[s]);
        let a_second = argmax(&self.q_second[s][a_first]);
        (a_first, a_second)
    }

    /// With probability `eps` each sub-action is drawn uniformly from its
    /// own sub-space, independently; otherwise greedy.
    pub fn epsilon_greedy(&self, s: usize, eps: f64, rng: &mut RngStream) -> (usize, usize) {
        let (greedy_first, _) = self.greedy(s);
        let a_first = if rng.chance(eps) {
            rng.below(self.space.n_first())
        } else {
            greedy_first
        };
        let a_second = if rng.chance(eps) {
            rng.below(self.space.n_second())
        } else {
            argmax(&self.q_second[s][a_first])
        };
        (a_first, a_second)
    }

    /// Largest coupling residual `|Q1(s,a1) - max_a2 Q2(s,a1,a2)|` over the
    /// given (state, first sub-action) pairs.
    pub fn coupling_residual(&self, pairs: impl Iterator<Item = (usize, usize)>) -> f64 {
        let mut worst = 0.0f64;
        for (s, a1) in pairs {
            let r = (self.q_first[s][a1] - max(&self.q_second[s][a1])).abs();
            worst = worst.max(r);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointUpdateMode {
    QLearning,
    DoubleQ,
}

/// Flat Q-learning baseline on the joint action index, with an optional
/// second table for Double Q-learning.
#[derive(Debug, Clone)]
pub struct TabularJointQ {
    n_states: usize,
    space: FactoredActionSpace,
    pub alpha: f64,
    pub gamma: f64,
    q_a: Vec<Vec<f64>>,
    q_b: Vec<Vec<f64>>,
}

impl TabularJointQ {
    pub fn new(
        n_states: usize,
        space: FactoredActionSpace,
        alpha: f64,
        gamma: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
        }
        Ok(Self {
            n_states,
            space,
            alpha,
            gamma,
            q_a: vec![vec![0.0; space.joint_size()]; n_states],
            q_b: vec![vec![0.0; space.joint_size()]; n_states],
        })
    }

    pub fn q(&self, s: usize, joint: usize) -> f64 {
        self.q_a[s][joint]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q_a[s]
    }

    pub fn set_q(&mut self, s: usize, joint: usize, v: f64) {
        self.q_a[s][joint] = v;
    }

    pub fn set_q_b(&mut self, s: usize, joint: usize, v: f64) {
        self.q_b[s][joint] = v;
    }

    pub fn update(&mut self, t: &Step, mode: JointUpdateMode, rng: &mut RngStream) -> Result<()> {
        if t.state >= self.n_states || t.next_state >= self.n_states {
            return Err(Error::IndexOutOfBounds(format!(
                "step states ({},{}) outside {}",
                t.state, t.next_state, self.n_states
            )));
        }
        if !t.reward.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward {}", t.reward)));
        }
        let joint = self.space.join(t.a_first, t.a_second)?;
        match mode {
            JointUpdateMode::QLearning => {
                let bootstrap = if t.terminal {
                    0.0
                } else {
                    self.gamma * max(&self.q_a[t.next_state])
                };
                let target = t.reward + bootstrap;
                let entry = &mut self.q_a[t.state][joint];
                *entry = (1.0 - self.alpha) * *entry + self.alpha * target;
            }
            JointUpdateMode::DoubleQ => {
                // coin-flip which table learns; the other evaluates
                let update_a = rng.chance(0.5);
                let (learn, eval) = if update_a {
                    (&mut self.q_a, &self.q_b)
                } else {
                    (&mut self.q_b, &self.q_a)
                };
                let bootstrap = if t.terminal {
                    0.0
                } else {
                    let pick = argmax(&learn[t.next_state]);
                    self.gamma * eval[t.next_state][pick]
                };
                let target = t.reward + bootstrap;
                let entry = &mut learn[t.state][joint];
                *entry = (1.0 - self.alpha) * *entry + self.alpha * target;
            }
        }
        Ok(())
    }

    /// Greedy joint action; in double mode both tables vote via their sum.
    pub fn greedy(&self, s: usize, mode: JointUpdateMode) -> Result<(usize, usize)> {
        let joint = match mode {
            JointUpdateMode::QLearning => argmax(&self.q_a[s]),
            JointUpdateMode::DoubleQ => {
                let summed: Vec<f64> = self.q_a[s]
                    .iter()
                    .zip(&self.q_b[s])
                    .map(|(a, b)| a + b)
                    .collect();
                argmax(&summed)
            }
        };
        self.space.split(joint)
    }

    pub fn epsilon_greedy(
        &self,
        s: usize,
        mode: JointUpdateMode,
        eps: f64,
        rng: &mut RngStream,
    ) -> Result<(usize, usize)> {
        if rng.chance(eps) {
            let joint = rng.below(self.space.joint_size());
            self.space.split(joint)
        } else {
            self.greedy(s, mode)
        }
    }
}

/// Explicit finite MDP over a factored action space.
///
/// Text format (shared with the random generator): a header line
/// `S A1 A2 gamma`, then one line `s a1 a2 s' prob reward` per transition.
/// Probabilities per (s, a1, a2) must sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitMdp {
    n_states: usize,
    space: FactoredActionSpace,
    pub gamma: f64,
    /// Sparse successor lists indexed by `s * joint_size + joint`.
    transitions: Vec<Vec<(usize, f64)>>,
    /// Rewards indexed the same way.
    rewards: Vec<f64>,
}

pub const PROB_SUM_TOL: f64 = 1e-9;

impl ExplicitMdp {
    pub fn new(
        n_states: usize,
        space: FactoredActionSpace,
        gamma: f64,
        transitions: Vec<Vec<(usize, f64)>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let rows = n_states * space.joint_size();
        if transitions.len() != rows || rewards.len() != rows {
            return Err(Error::Model(format!(
                "expected {rows} rows, got {} transitions / {} rewards",
                transitions.len(),
                rewards.len()
            )));
        }
        let mdp = Self { n_states, space, gamma, transitions, rewards };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn space(&self) -> &FactoredActionSpace {
        &self.space
    }

    fn idx(&self, s: usize, joint: usize) -> usize {
        s * self.space.joint_size() + joint
    }

    pub fn successors(&self, s: usize, a_first: usize, a_second: usize) -> Result<&[(usize, f64)]> {
        let joint = self.space.join(a_first, a_second)?;
        Ok(&self.transitions[self.idx(s, joint)])
    }

    pub fn reward(&self, s: usize, a_first: usize, a_second: usize) -> Result<f64> {
        let joint = self.space.join(a_first, a_second)?;
        Ok(self.rewards[self.idx(s, joint)])
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for joint in 0..self.space.joint_size() {
                let row = &self.transitions[self.idx(s, joint)];
                if row.is_empty() {
                    return Err(Error::Model(format!(
                        "state {s} joint action {joint} has no successors"
                    )));
                }
                let mut sum = 0.0;
                for &(sp, p) in row {
                    if sp >= self.n_states {
                        return Err(Error::Model(format!(
                            "successor {sp} outside {} states",
                            self.n_states
                        )));
                    }
                    if !(0.0..=1.0 + PROB_SUM_TOL).contains(&p) {
                        return Err(Error::Model(format!("probability {p} outside [0,1]")));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::Model(format!(
                        "probabilities for state {s} joint action {joint} sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sample a successor state and look up the reward.
    pub fn sample_step(
        &self,
        s: usize,
        a_first: usize,
        a_second: usize,
        rng: &mut RngStream,
    ) -> Result<(usize, f64)> {
        let row = self.successors(s, a_first, a_second)?;
        let reward = self.reward(s, a_first, a_second)?;
        let mut u = rng.next_f64();
        for &(sp, p) in row {
            if u < p {
                return Ok((sp, reward));
            }
            u -= p;
        }
        // rounding slack lands on the last successor
        Ok((row[row.len() - 1].0, reward))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{} {} {} {}",
            self.n_states,
            self.space.n_first(),
            self.space.n_second(),
            self.gamma
        )
        .unwrap();
        for s in 0..self.n_states {
            for a1 in 0..self.space.n_first() {
                for a2 in 0..self.space.n_second() {
                    let joint = self.space.join(a1, a2).unwrap();
                    let r = self.rewards[self.idx(s, joint)];
                    for &(sp, p) in &self.transitions[self.idx(s, joint)] {
                        writeln!(out, "{s} {a1} {a2} {sp} {p} {r}").unwrap();
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 0, message: "empty mdp file".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: hline,
                message: format!("expected header `S A1 A2 gamma`, got `{header}`"),
            });
        }
        let parse_usize = |line: usize, s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse { line, message: format!("{e}: `{s}`") })
        };
        let parse_f64 = |line: usize, s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse { line, message: format!("{e}: `{s}`") })
        };
        let n_states = parse_usize(hline, fields[0])?;
        let n_first = parse_usize(hline, fields[1])?;
        let n_second = parse_usize(hline, fields[2])?;
        let gamma = parse_f64(hline, fields[3])?;
        let space = FactoredActionSpace::new(n_first, n_second)?;
        let rows = n_states * space.joint_size();
        let mut transitions: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        let mut rewards: Vec<Option<f64>> = vec![None; rows];
        for (lno, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: lno,
                    message: format!("expected `s a1 a2 s' prob reward`, got `{line}`"),
                });
            }
            let s = parse_usize(lno, f[0])?;
            let a1 = parse_usize(lno, f[1])?;
            let a2 = parse_usize(lno, f[2])?;
            let sp = parse_usize(lno, f[3])?;
            let p = parse_f64(lno, f[4])?;
            let r = parse_f64(lno, f[5])?;
            if s >= n_states || sp >= n_states {
                return Err(Error::Parse {
                    line: lno,
                    message: format!("state outside 0..{n_states}"),
                });
            }
            let joint = space.join(a1, a2).map_err(|e| Error::Parse {
                line: lno,
                message: e.to_string(),
            })?;
            let idx = s * space.joint_size() + joint;
            match rewards[idx] {
                None => rewards[idx] = Some(r),
                Some(prev) if prev == r => {}
                Some(prev) => {
                    return Err(Error::Parse {
                        line: lno,
                        message: format!(
                            "conflicting rewards {prev} and {r} for ({s},{a1},{a2})"
                        ),
                    })
                }
            }
            transitions[idx].push((sp, p));
        }
        let rewards: Vec<f64> = rewards
            .into_iter()
            .enumerate()
            .map(|(idx, r)| {
                r.ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("no transitions given for row {idx}"),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(n_states, space, gamma, transitions, rewards)
    }
}

/// Exact solution of an [`ExplicitMdp`]: optimal joint Q, state values and a
/// lowest-index greedy policy over joint actions.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub q_star: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    pub greedy_policy: Vec<usize>,
    pub sweeps: usize,
}

/// Solve the Bellman optimality equation by successive sweeps until the
/// sup-norm residual drops below `tol`.
pub fn value_iteration(mdp: &ExplicitMdp, gamma: f64, tol: f64) -> Result<ExactSolution> {
    if gamma >= 1.0 {
        return Err(Error::Divergence(format!(
            "value iteration requires gamma < 1, got {gamma}"
        )));
    }
    mdp.validate()?;
    let n_joint = mdp.space.joint_size();
    let mut q = vec![vec![0.0f64; n_joint]; mdp.n_states];
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        let v: Vec<f64> = q.iter().map(|row| max(row)).collect();
        let mut residual = 0.0f64;
        for s in 0..mdp.n_states {
            for joint in 0..n_joint {
                let idx = mdp.idx(s, joint);
                let mut backed = mdp.rewards[idx];
                for &(sp, p) in &mdp.transitions[idx] {
                    backed += gamma * p * v[sp];
                }
                residual = residual.max((backed - q[s][joint]).abs());
                q[s][joint] = backed;
            }
        }
        if residual <= tol {
            break;
        }
        if sweeps > 10_000_000 {
            return Err(Error::Divergence("value iteration failed to converge".into()));
        }
    }
    let v_star: Vec<f64> = q.iter().map(|row| max(row)).collect();
    let greedy_policy: Vec<usize> = q.iter().map(|row| argmax(row)).collect();
    Ok(ExactSolution { q_star: q, v_star, greedy_policy, sweeps })
}

/// Exact evaluation of a deterministic joint-action policy.
pub fn policy_evaluation(
    mdp: &ExplicitMdp,
    policy: &[usize],
    gamma: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    if gamma >= 1.0 {
        return Err(Error::Divergence(format!(
            "policy evaluation requires gamma < 1, got {gamma}"
        )));
    }
    if policy.len() != mdp.n_states {
        return Err(Error::ShapeMismatch(format!(
            "policy length {} vs {} states",
            policy.len(),
            mdp.n_states
        )));
    }
    let mut v = vec![0.0f64; mdp.n_states];
    loop {
        let mut residual = 0.0f64;
        for s in 0..mdp.n_states {
            let idx = mdp.idx(s, policy[s]);
            let mut backed = mdp.rewards[idx];
            for &(sp, p) in &mdp.transitions[idx] {
                backed += gamma * p * v[sp];
            }
            residual = residual.max((backed - v[s]).abs());
            v[s] = backed;
        }
        if residual <= tol {
            return Ok(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(a1: usize, a2: usize) -> FactoredActionSpace {
        FactoredActionSpace::new(a1, a2).unwrap()
    }

    fn step(s: usize, a1: usize, a2: usize, r: f64, sp: usize, terminal: bool) -> Step {
        Step { state: s, a_first: a1, a_second: a2, reward: r, next_state: sp, terminal }
    }

    #[test]
    fn update_second_substitution() {
        // 0.5*0 + 0.5*(1 + 0.5*2) = 1.0
        let mut m = TabularMan::new(2, space(2, 2), 0.5, 0.5).unwrap();
        m.set_q_first(1, 0, 2.0);
        m.update_second(&step(0, 0, 0, 1.0, 1, false)).unwrap();
        assert!((m.q_second(0, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_second_terminal_drops_bootstrap() {
        let mut m = TabularMan::new(2, space(2, 2), 1.0, 0.5).unwrap();
        m.set_q_first(1, 0, 100.0);
        m.update_second(&step(0, 0, 0, 1.0, 1, true)).unwrap();
        assert_eq!(m.q_second(0, 0, 0), 1.0);
    }

    #[test]
    fn update_second_zero_alpha_is_identity() {
        let mut m = TabularMan::new(2, space(2, 2), 0.0, 0.9).unwrap();
        m.set_q_second(0, 1, 1, 3.5);
        m.update_second(&step(0, 1, 1, -2.0, 1, false)).unwrap();
        assert_eq!(m.q_second(0, 1, 1), 3.5);
    }

    #[test]
    fn update_first_substitution() {
        // 0.75*1 + 0.25*(0 + 0.5*4) = 1.25
        let mut m = TabularMan::new(2, space(2, 3), 0.25, 0.5).unwrap();
        m.set_q_first(0, 0, 1.0);
        m.set_q_second(1, 0, 2, 4.0);
        m.update_first(&step(0, 0, 1, 0.0, 1, false)).unwrap();
        assert!((m.q_first(0, 0) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn update_first_terminal() {
        let mut m = TabularMan::new(2, space(2, 2), 1.0, 0.9).unwrap();
        m.update_first(&step(0, 1, 0, -1.0, 1, true)).unwrap();
        assert_eq!(m.q_first(0, 1), -1.0);
    }

    #[test]
    fn update_first_gamma_zero_is_running_average() {
        let mut m = TabularMan::new(2, space(1, 1), 0.5, 0.0).unwrap();
        for &r in &[4.0, 2.0, 8.0] {
            m.update_first(&step(0, 0, 0, r, 1, false)).unwrap();
        }
        // exponential running average: ((0*.5+2)*.5+1)*... = 0.5*(0.5*(0.5*0+4)+2)+8*0.5
        let expected = 0.5 * (0.5 * (0.5 * 0.0 + 0.5 * 4.0 * 2.0)); // recompute below
        let _ = expected;
        let manual = {
            let mut q = 0.0;
            for &r in &[4.0, 2.0, 8.0] {
                q = 0.5 * q + 0.5 * r;
            }
            q
        };
        assert!((m.q_first(0, 0) - manual).abs() < 1e-12);
    }

    #[test]
    fn variant_substitution() {
        // 0.5*1 + 0.5*(0 + 1*2) = 1.5
        let mut m = TabularMan::new(2, space(2, 2), 0.5, 1.0).unwrap();
        m.set_q_first(0, 0, 1.0);
        m.set_q_first(1, 0, 2.0);
        m.update_first_variant(&step(0, 0, 0, 0.0, 1, false)).unwrap();
        assert!((m.q_first(0, 0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn variant_matches_update_first_under_exact_coupling() {
        // when Q1 equals the a2-maximum of Q2, both bootstraps coincide
        let mut rng = RngStream::new(5);
        let sp2 = space(3, 4);
        let mut a = TabularMan::new(4, sp2, 0.3, 0.8).unwrap();
        for s in 0..4 {
            for a1 in 0..3 {
                for a2 in 0..4 {
                    a.set_q_second(s, a1, a2, rng.uniform(-2.0, 2.0));
                }
                let max2 = (0..4).map(|a2| a.q_second(s, a1, a2)).fold(f64::MIN, f64::max);
                a.set_q_first(s, a1, max2);
            }
        }
        let mut b = a.clone();
        let t = step(1, 2, 3, 0.7, 2, false);
        a.update_first(&t).unwrap();
        b.update_first_variant(&t).unwrap();
        assert!((a.q_first(1, 2) - b.q_first(1, 2)).abs() < 1e-12);
    }

    #[test]
    fn variant_terminal() {
        let mut m = TabularMan::new(2, space(2, 2), 1.0, 0.9).unwrap();
        m.set_q_first(0, 0, 5.0);
        m.update_first_variant(&step(0, 0, 0, 2.5, 1, true)).unwrap();
        assert_eq!(m.q_first(0, 0), 2.5);
    }

    #[test]
    fn non_finite_reward_rejected() {
        let mut m = TabularMan::new(2, space(2, 2), 0.5, 0.5).unwrap();
        let t = step(0, 0, 0, f64::NAN, 1, false);
        assert!(matches!(m.update_second(&t), Err(Error::Numeric(_))));
        assert!(matches!(m.update_first(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn greedy_nested_argmax() {
        let mut m = TabularMan::new(1, space(2, 2), 0.5, 0.5).unwrap();
        m.set_q_first(0, 0, 0.0);
        m.set_q_first(0, 1, 5.0);
        m.set_q_second(0, 1, 0, 3.0);
        m.set_q_second(0, 1, 1, 1.0);
        assert_eq!(m.greedy(0), (1, 0));
    }

    #[test]
    fn greedy_all_zero_breaks_ties_low() {
        let m = TabularMan::new(1, space(3, 5), 0.5, 0.5).unwrap();
        assert_eq!(m.greedy(0), (0, 0));
    }

    #[test]
    fn greedy_first_stage_tie() {
        let mut m = TabularMan::new(1, space(2, 2), 0.5, 0.5).unwrap();
        m.set_q_first(0, 0, 2.0);
        m.set_q_first(0, 1, 2.0);
        m.set_q_second(0, 0, 0, 0.0);
        m.set_q_second(0, 0, 1, 9.0);
        assert_eq!(m.greedy(0), (0, 1));
    }

    #[test]
    fn epsilon_zero_is_greedy() {
        let mut rng = RngStream::new(0);
        let mut m = TabularMan::new(1, space(4, 14), 0.5, 0.5).unwrap();
        m.set_q_first(0, 2, 1.0);
        m.set_q_second(0, 2, 7, 1.0);
        for _ in 0..100 {
            assert_eq!(m.epsilon_greedy(0, 0.0, &mut rng), (2, 7));
        }
    }

    #[test]
    fn epsilon_one_is_jointly_uniform() {
        let m = TabularMan::new(1, space(4, 14), 0.5, 0.5).unwrap();
        let mut rng = RngStream::new(77);
        let n = 100_000usize;
        let mut counts = vec![0u32; 56];
        for _ in 0..n {
            let (a1, a2) = m.epsilon_greedy(0, 1.0, &mut rng);
            counts[a1 * 14 + a2] += 1;
        }
        let p = 1.0 / 56.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sigma);
        }
    }

    #[test]
    fn epsilon_greedy_seed_determinism() {
        let mut m = TabularMan::new(3, space(3, 3), 0.5, 0.5).unwrap();
        m.set_q_first(1, 2, 1.0);
        let run = |seed: u64| {
            let mut rng = RngStream::new(seed);
            (0..200).map(|i| m.epsilon_greedy(i % 3, 0.4, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn joint_q_update_arithmetic() {
        let mut rng = RngStream::new(0);
        let mut b = TabularJointQ::new(2, space(2, 2), 0.5, 0.5).unwrap();
        b.set_q(1, 2, 2.0);
        b.update(&step(0, 0, 0, 1.0, 1, false), JointUpdateMode::QLearning, &mut rng)
            .unwrap();
        assert!((b.q(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_q_terminal_target_is_reward() {
        let mut rng = RngStream::new(0);
        let mut b = TabularJointQ::new(2, space(2, 2), 1.0, 0.9).unwrap();
        b.set_q(1, 0, 50.0);
        b.update(&step(0, 1, 1, 3.0, 1, true), JointUpdateMode::QLearning, &mut rng)
            .unwrap();
        assert_eq!(b.q(0, 3), 3.0);
    }

    #[test]
    fn double_q_with_equal_tables_matches_q_learning_step() {
        let sp2 = space(2, 2);
        let mut seed_rng = RngStream::new(3);
        let mut plain = TabularJointQ::new(2, sp2, 0.5, 0.9).unwrap();
        let mut double = TabularJointQ::new(2, sp2, 0.5, 0.9).unwrap();
        for s in 0..2 {
            for j in 0..4 {
                let v = seed_rng.uniform(-1.0, 1.0);
                plain.set_q(s, j, v);
                double.set_q(s, j, v);
                double.set_q_b(s, j, v);
            }
        }
        let t = step(0, 1, 0, 0.25, 1, false);
        plain
            .update(&t, JointUpdateMode::QLearning, &mut RngStream::new(0))
            .unwrap();
        double
            .update(&t, JointUpdateMode::DoubleQ, &mut RngStream::new(0))
            .unwrap();
        // whichever table the coin picked received the identical update
        let j = sp2.join(1, 0).unwrap();
        let updated = if double.q(0, j) != double.q_b[0][j] {
            // learner table differs from its twin now; compare against plain
            double.q(0, j).max(double.q_b[0][j])
        } else {
            double.q(0, j)
        };
        let expected = plain.q(0, j);
        let got_a = (double.q(0, j) - expected).abs() < 1e-12;
        let got_b = (double.q_b[0][j] - expected).abs() < 1e-12;
        assert!(got_a || got_b, "one of the two tables must match: {updated} vs {expected}");
    }

    #[test]
    fn lemma_two_identity_on_tables() {
        // defining Q1 as the a2-maximum of Q2 makes the staged max equal the
        // joint max, exactly, for arbitrary tables
        let mut rng = RngStream::new(99);
        for _ in 0..50 {
            let n1 = 1 + rng.below(5);
            let n2 = 1 + rng.below(5);
            let q2: Vec<Vec<f64>> = (0..n1)
                .map(|_| (0..n2).map(|_| rng.uniform(-10.0, 10.0)).collect())
                .collect();
            let q1: Vec<f64> = q2
                .iter()
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let staged = q1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let joint = q2
                .iter()
                .flat_map(|r| r.iter().cloned())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(staged, joint);
        }
    }

    fn single_state_mdp(rewards: &[f64], gamma: f64) -> ExplicitMdp {
        let sp2 = space(rewards.len(), 1);
        let transitions = vec![vec![(0usize, 1.0)]; rewards.len()];
        ExplicitMdp::new(1, sp2, gamma, transitions, rewards.to_vec()).unwrap()
    }

    #[test]
    fn value_iteration_single_state_closed_form() {
        // q*(a) = r(a) + gamma * max_b r(b) / (1 - gamma)
        let rewards = [0.5, -0.25, 1.0];
        let gamma = 0.5;
        let mdp = single_state_mdp(&rewards, gamma);
        let sol = value_iteration(&mdp, gamma, 1e-12).unwrap();
        let vstar = 1.0 / (1.0 - gamma);
        for (a, &r) in rewards.iter().enumerate() {
            assert!((sol.q_star[0][a] - (r + gamma * vstar)).abs() < 1e-9);
        }
        assert_eq!(sol.greedy_policy[0], 2);
    }

    #[test]
    fn value_iteration_two_state_chain_hand_computed() {
        // state 0 -> state 1 with reward 1; state 1 absorbing with reward 0.
        // One joint action. V(1) = 0, Q(0) = 1 + gamma * 0 = 1.
        let sp2 = space(1, 1);
        let transitions = vec![vec![(1, 1.0)], vec![(1, 1.0)]];
        let rewards = vec![1.0, 0.0];
        let mdp = ExplicitMdp::new(2, sp2, 0.9, transitions, rewards).unwrap();
        let sol = value_iteration(&mdp, 0.9, 1e-12).unwrap();
        assert!((sol.v_star[1] - 0.0).abs() < 1e-10);
        assert!((sol.v_star[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn value_iteration_residual_below_tolerance() {
        let mdp = single_state_mdp(&[0.3, 0.9], 0.9);
        let sol = value_iteration(&mdp, 0.9, 1e-10).unwrap();
        // Bellman residual: |Q - TQ| per entry
        for a in 0..2 {
            let backed = mdp.reward(0, a, 0).unwrap() + 0.9 * sol.v_star[0];
            assert!((backed - sol.q_star[0][a]).abs() <= 1e-10);
        }
    }

    #[test]
    fn value_iteration_rejects_gamma_one() {
        let mdp = single_state_mdp(&[1.0], 0.9);
        assert!(matches!(value_iteration(&mdp, 1.0, 1e-10), Err(Error::Divergence(_))));
    }

    #[test]
    fn bad_kernel_rejected() {
        let sp2 = space(1, 1);
        let bad = ExplicitMdp::new(1, sp2, 0.9, vec![vec![(0, 0.7)]], vec![0.0]);
        assert!(matches!(bad, Err(Error::Model(_))));
    }

    #[test]
    fn mdp_text_round_trip() {
        let sp2 = space(2, 2);
        let transitions = vec![
            vec![(0, 0.25), (1, 0.75)],
            vec![(1, 1.0)],
            vec![(0, 1.0)],
            vec![(0, 0.5), (1, 0.5)],
            vec![(1, 1.0)],
            vec![(0, 1.0)],
            vec![(1, 1.0)],
            vec![(0, 0.125), (1, 0.875)],
        ];
        let rewards = vec![0.5, -1.0, 0.0, 0.25, 1.0, -0.5, 0.75, 0.125];
        let mdp = ExplicitMdp::new(2, sp2, 0.9, transitions, rewards).unwrap();
        let text = mdp.to_text();
        let parsed = ExplicitMdp::parse(&text).unwrap();
        assert_eq!(mdp, parsed);
    }

    #[test]
    fn parse_rejects_bad_probability_sum() {
        let text = "1 1 1 0.9\n0 0 0 0 0.5 1.0\n";
        assert!(ExplicitMdp::parse(text).is_err());
    }

    #[test]
    fn parse_rejects_conflicting_rewards() {
        let text = "1 1 1 0.9\n0 0 0 0 0.5 1.0\n0 0 0 0 0.5 2.0\n";
        assert!(matches!(ExplicitMdp::parse(text), Err(Error::Parse { .. })));
    }

    #[test]
    fn policy_evaluation_matches_value_iteration_on_greedy_policy() {
        let mdp = single_state_mdp(&[0.3, 0.9], 0.9);
        let sol = value_iteration(&mdp, 0.9, 1e-12).unwrap();
        let v = policy_evaluation(&mdp, &sol.greedy_policy, 0.9, 1e-12).unwrap();
        assert!((v[0] - sol.v_star[0]).abs() < 1e-9);
    }

    #[test]
    fn value_iteration_residual_contracts_monotonically() {
        // sup-norm Bellman residual shrinks by at least gamma per sweep;
        // track it manually over a few sweeps
        let sp2 = space(2, 2);
        let mut rng = RngStream::new(21);
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..(3 * sp2.joint_size()) {
            let p = rng.uniform(0.1, 0.9);
            let a = rng.below(3);
            let b = rng.below(3);
            if a == b {
                transitions.push(vec![(a, 1.0)]);
            } else {
                transitions.push(vec![(a, p), (b, 1.0 - p)]);
            }
            rewards.push(rng.uniform(-1.0, 1.0));
        }
        let mdp = ExplicitMdp::new(3, sp2, 0.9, transitions, rewards).unwrap();
        let gamma = 0.9;
        let mut q = vec![vec![0.0f64; sp2.joint_size()]; 3];
        let mut residuals = Vec::new();
        for _ in 0..30 {
            let v: Vec<f64> = q.iter().map(|row| super::max(row)).collect();
            let mut res = 0.0f64;
            for s in 0..3 {
                for joint in 0..sp2.joint_size() {
                    let idx = s * sp2.joint_size() + joint;
                    let mut backed = mdp.rewards[idx];
                    for &(sp, p) in &mdp.transitions[idx] {
                        backed += gamma * p * v[sp];
                    }
                    res = res.max((backed - q[s][joint]).abs());
                    q[s][joint] = backed;
                }
            }
            residuals.push(res);
        }
        for w in residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "residual increased: {w:?}");
        }
    }
}
