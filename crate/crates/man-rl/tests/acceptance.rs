//! Acceptance gate: one test per criterion, each printing a single
//! `criterion N: PASS` / `criterion N: FAIL` line before asserting.
//!
//! Criteria 1, 2 and 6 are implemented faithfully and are expected to fail;
//! see the README's "Known red criteria" section for the analysis. In short:
//! the first-stage update trains on executed transitions, whose second
//! sub-action comes from the exploring behavior policy, so its fixed point
//! is a behavior-averaged value rather than the Bellman-optimal one; and the
//! published per-game table is arithmetically inconsistent with the
//! published mean by 0.3 percentage points.

use std::sync::OnceLock;

use man_rl::agents::{AgentHyper, ManAgent, SubActionEncoder};
use man_rl::envs::{BlockStackEnv, Environment, STACK_BLOCK_TYPES, STACK_POSITIONS};
use man_rl::harness::{
    compare, run_training, summarize, AgentKind, AnyAgent, EnvInstance, EnvKind,
    ExperimentConfig,
};
use man_rl::nn::{finite_difference_suite, OptimizerKind};
use man_rl::rng::RngStream;
use man_rl::schedule::EpsilonSchedule;
use man_rl::space::{FactoredActionSpace, Transition};
use man_rl::tabular::{policy_evaluation, value_iteration};

fn verdict(n: usize, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n}: {word} ({detail})");
    // write straight to fd 1 so the line shows even without --nocapture
    {
        use std::io::Write;
        use std::mem::ManuallyDrop;
        use std::os::fd::FromRawFd;
        let mut stdout = ManuallyDrop::new(unsafe { std::fs::File::from_raw_fd(1) });
        let _ = writeln!(stdout, "{line}");
    }
    assert!(pass, "{line}");
}

/// Shared 100-MDP tabular sweep for criteria 1 and 2.
struct TabularSweep {
    /// Per MDP: worst-state relative shortfall of the learned greedy policy
    /// against the value-iteration optimum.
    shortfalls: Vec<f64>,
    /// Per MDP: max coupling residual |Q1 - max_a2 Q2| over all (s, a1).
    residuals: Vec<f64>,
}

fn tabular_sweep() -> &'static TabularSweep {
    static SWEEP: OnceLock<TabularSweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut size_rng = RngStream::new(0xACCE);
        let mut shortfalls = Vec::with_capacity(100);
        let mut residuals = Vec::with_capacity(100);
        for mdp_index in 0..100u64 {
            let mut c = ExperimentConfig {
                agent: AgentKind::TabularMan,
                env: EnvKind::Mdp,
                gamma: 0.9,
                // pure exploring behavior with uniform-random episode starts
                eps_start: 1.0,
                eps_end: 1.0,
                eps_decay_steps: 1,
                learning_rate: Some(1.0),
                mdp_seed: mdp_index,
                mdp_sparsity: 0.5,
                horizon: Some(40),
                episodes: 5_000, // 200k steps
                ..ExperimentConfig::default()
            };
            c.mdp_states = 5 + size_rng.below(16); // 5..=20
            c.mdp_n_first = 2 + size_rng.below(3); // 2..=4
            c.mdp_n_second = 2 + size_rng.below(3);
            let (agent, _) = run_training(&c, 1000 + mdp_index, None).unwrap();
            let env = EnvInstance::build(&c).unwrap();
            let mdp = match &env {
                EnvInstance::Mdp(e) => e.mdp().clone(),
                _ => unreachable!(),
            };
            let exact = value_iteration(&mdp, 0.9, 1e-12).unwrap();
            let tab = match &agent {
                AnyAgent::TabMan(t) => t,
                _ => unreachable!(),
            };
            let policy: Vec<usize> = (0..c.mdp_states)
                .map(|s| {
                    let (a1, a2) = tab.greedy(s);
                    mdp.space().join(a1, a2).unwrap()
                })
                .collect();
            let v_pi = policy_evaluation(&mdp, &policy, 0.9, 1e-12).unwrap();
            let shortfall = (0..c.mdp_states)
                .map(|s| (exact.v_star[s] - v_pi[s]).abs() / exact.v_star[s].abs().max(1.0))
                .fold(0.0f64, f64::max);
            shortfalls.push(shortfall);
            // exploring starts visit every (s, a1) pair
            let pairs = (0..c.mdp_states)
                .flat_map(|s| (0..c.mdp_n_first).map(move |a1| (s, a1)));
            residuals.push(tab.coupling_residual(pairs));
        }
        TabularSweep { shortfalls, residuals }
    })
}

#[test]
fn criterion_1_oracle_equivalence() {
    let sweep = tabular_sweep();
    let passing = sweep.shortfalls.iter().filter(|&&s| s < 0.01).count();
    verdict(
        1,
        passing >= 95,
        &format!("{passing}/100 MDPs within 1% of V* after 200k steps; need >= 95"),
    );
}

#[test]
fn criterion_2_definition_2_residual() {
    let sweep = tabular_sweep();
    let worst = sweep.residuals.iter().cloned().fold(0.0f64, f64::max);
    let ok = worst < 1e-3;
    verdict(
        2,
        ok,
        &format!("max coupling residual over the sweep {worst:.4}; need < 1e-3"),
    );
}

#[test]
fn criterion_3_gradient_correctness() {
    let report = finite_difference_suite(20, 0xD1FF).unwrap();
    assert_eq!(report.cases.len(), 20);
    verdict(
        3,
        report.max_rel_err < 1e-4,
        &format!("max relative error {:.3e} across 20 architectures", report.max_rel_err),
    );
}

#[test]
fn criterion_4_deep_tabular_consistency() {
    // one-hot states, single linear layers, full-batch updates, frozen
    // targets equal to online parameters
    let space = FactoredActionSpace::new(2, 2).unwrap();
    let alpha = 0.1;
    let batch_len = 2.0;
    let mut rng = RngStream::new(2024);
    let hyper = AgentHyper {
        hidden: vec![],
        gamma: 0.9,
        learning_rate: 1.0, // overridden below
        optimizer: OptimizerKind::Sgd,
        buffer_capacity: 16,
        schedule: EpsilonSchedule::new(1.0, 0.1, 10).unwrap(),
    };
    let mut agent = ManAgent::new(2, space, SubActionEncoder::OneHot, &hyper, &mut rng).unwrap();
    // a linear layer over a one-hot input plus bias changes the selected
    // output by lr*(2/B)*(y - q)*(|x|^2 + 1) per SGD step; match alpha
    agent.set_learning_rates(alpha * batch_len / 4.0, alpha * batch_len / 6.0);
    agent.sync_hard();

    let one_hot = |s: usize| {
        let mut v = vec![0.0; 2];
        v[s] = 1.0;
        v
    };
    let q1 = |agent: &ManAgent, s: usize, a1: usize| {
        agent.net_first.online.forward(&one_hot(s)).unwrap()[a1]
    };
    let q2 = |agent: &ManAgent, s: usize, a1: usize, a2: usize| {
        let mut input = one_hot(s);
        input.extend(SubActionEncoder::OneHot.encode(a1, 2).unwrap());
        agent.net_second.online.forward(&input).unwrap()[a2]
    };

    // frozen table snapshot before the step
    let mut q1_snap = [[0.0; 2]; 2];
    let mut q2_snap = [[[0.0; 2]; 2]; 2];
    for s in 0..2 {
        for a1 in 0..2 {
            q1_snap[s][a1] = q1(&agent, s, a1);
            for a2 in 0..2 {
                q2_snap[s][a1][a2] = q2(&agent, s, a1, a2);
            }
        }
    }

    // batch rows distinct in both sub-actions so no parameter is shared
    let batch = vec![
        Transition {
            state: one_hot(0),
            a_first: 0,
            a_second: 0,
            reward: 0.3,
            next_state: one_hot(1),
            terminal: false,
        },
        Transition {
            state: one_hot(1),
            a_first: 1,
            a_second: 1,
            reward: -0.5,
            next_state: one_hot(0),
            terminal: false,
        },
    ];
    agent.train_on_batch(&batch).unwrap();

    // tabular two-stage updates from the same frozen snapshot
    let mut worst = 0.0f64;
    for t in &batch {
        let s = t.state.iter().position(|&v| v == 1.0).unwrap();
        let sp = t.next_state.iter().position(|&v| v == 1.0).unwrap();
        let y1 = t.reward
            + 0.9 * q2_snap[sp][t.a_first].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y2 = t.reward
            + 0.9 * q1_snap[sp].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want_q1 = q1_snap[s][t.a_first] + alpha * (y1 - q1_snap[s][t.a_first]);
        let want_q2 =
            q2_snap[s][t.a_first][t.a_second] + alpha * (y2 - q2_snap[s][t.a_first][t.a_second]);
        worst = worst.max((q1(&agent, s, t.a_first) - want_q1).abs());
        worst = worst.max((q2(&agent, s, t.a_first, t.a_second) - want_q2).abs());
    }
    verdict(4, worst < 1e-6, &format!("max deviation from tabular update {worst:.2e}"));
}

#[test]
fn criterion_5_scaled_comparative_claim() {
    let base = ExperimentConfig {
        env: EnvKind::BlockStack,
        gamma: 0.99,
        eps_start: 1.0,
        eps_end: 0.1,
        eps_decay_steps: 10_000,
        batch_size: 32,
        // soft tau 0.005 is the SyncMode default
        hidden: vec![32, 32],
        learning_rate: Some(1e-3),
        episodes: 3_000,
        ..ExperimentConfig::default()
    };
    let sweeps = compare(
        &base,
        &[AgentKind::Man, AgentKind::Dqn, AgentKind::Ddqn],
        &[0, 1, 2, 3, 4],
        None,
    )
    .unwrap();
    let man = &sweeps[0];
    let dqn = &sweeps[1];
    let ddqn = &sweeps[2];
    let man_ret = man.median_final_mean();
    let return_win = man_ret > dqn.median_final_mean() && man_ret > ddqn.median_final_mean();
    let man_bump = man.mean_terminal_bumpiness.unwrap();
    let bump_win = man_bump < dqn.mean_terminal_bumpiness.unwrap()
        && man_bump < ddqn.mean_terminal_bumpiness.unwrap();
    verdict(
        5,
        return_win && bump_win,
        &format!(
            "median final-100 return man {man_ret:.2} vs dqn {:.2} / ddqn {:.2}; terminal bumpiness man {man_bump:.2} vs dqn {:.2} / ddqn {:.2}",
            dqn.median_final_mean(),
            ddqn.median_final_mean(),
            dqn.mean_terminal_bumpiness.unwrap(),
            ddqn.mean_terminal_bumpiness.unwrap(),
        ),
    );
}

#[test]
fn criterion_6_published_table_consistency() {
    // per-game normalized scores, factored-action column of the published
    // per-game table, in row order
    let man_column = [
        2239.29, 72.88, 111.11, 179.67, 79.6, 54.55, 145.88, 989.58, 0.11, 581.96, 55.59,
        265.77,
    ];
    let (mean, median) = summarize(&man_column).unwrap();
    let mean_ok = (mean - 397.7).abs() <= 0.1;
    let median_ok = (median - 128.5).abs() <= 0.1;
    verdict(
        6,
        mean_ok && median_ok,
        &format!(
            "column mean {mean:.4} vs published 397.7 (|d| = {:.4}pp), median {median:.4} vs published 128.5 (|d| = {:.4}pp); need both <= 0.1pp",
            (mean - 397.7).abs(),
            (median - 128.5).abs()
        ),
    );
}

#[test]
fn criterion_7_csv_determinism() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        episodes: 25,
        hidden: vec![8],
        warmup: 64,
        batch_size: 16,
        ..ExperimentConfig::default()
    };
    run_training(&config, 7, Some(dir_a.path())).unwrap();
    run_training(&config, 7, Some(dir_b.path())).unwrap();
    let a = std::fs::read(dir_a.path().join("train_man_seed7.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("train_man_seed7.csv")).unwrap();
    verdict(
        7,
        !a.is_empty() && a == b,
        &format!("{} bytes, repeated run byte-identical: {}", a.len(), a == b),
    );
}

#[test]
fn criterion_8_environment_conservation() {
    let mut rng = RngStream::new(0xC0);
    let mut checked_steps = 0u64;
    let mut ok = true;
    'outer: for _ in 0..10_000 {
        let mut env = BlockStackEnv::default();
        let mut step_rng = RngStream::new(0);
        env.reset(&mut step_rng);
        let mut volume = 0u64;
        loop {
            let bt = rng.below(STACK_BLOCK_TYPES);
            let p = rng.below(STACK_POSITIONS);
            let out = env.step(bt, p, &mut step_rng).unwrap();
            let (w, h) = man_rl::envs::BlockCatalog::shape(bt).unwrap();
            volume += (w * h) as u64;
            checked_steps += 1;
            let map = env.map();
            if volume + map.holes as u64 != map.total_height() {
                ok = false;
                break 'outer;
            }
            if out.terminal {
                break;
            }
        }
    }
    verdict(
        8,
        ok,
        &format!("occupied-cells + holes == total height after each of {checked_steps} steps"),
    );
}
