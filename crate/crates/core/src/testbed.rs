//! Synthetic goal-reaching corpora and brute-force occupancy oracles.
//!
//! Every MDP built here is a finite tabular MDP with one goal state per
//! task. A goal state terminates the episode of its own task: the reward
//! `(1 - gamma) * p(s' = goal | s, a)` is collected once, on entry, and the
//! discounted sum stops there. Under that convention a deterministic expert
//! that reaches the goal after `T - t` further transitions has
//! `Q = (1 - gamma) * gamma^(T - t)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TestbedError;

/// Identifier of a task goal. Within a corpus it doubles as the task id.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct GoalId(pub u32);

impl fmt::Display for GoalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "goal#{}", self.0)
    }
}

const ROW_SUM_TOL: f64 = 1e-12;

/// Tabular MDP with sparse transition rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    /// `rows[s * num_actions + a]` lists `(next_state, probability)`.
    rows: Vec<Vec<(usize, f64)>>,
    goal_states: BTreeMap<GoalId, usize>,
    /// Optional low-dimensional geometric description of each state.
    descriptors: Vec<Vec<f64>>,
}

impl Mdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        rows: Vec<Vec<(usize, f64)>>,
        goal_states: BTreeMap<GoalId, usize>,
    ) -> Result<Self, TestbedError> {
        if num_states == 0 || num_actions == 0 {
            return Err(TestbedError::InvalidConfig(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if rows.len() != num_states * num_actions {
            return Err(TestbedError::InvalidConfig(format!(
                "expected {} transition rows, got {}",
                num_states * num_actions,
                rows.len()
            )));
        }
        for (idx, row) in rows.iter().enumerate() {
            let (state, action) = (idx / num_actions, idx % num_actions);
            let mut sum = 0.0;
            for &(next, p) in row {
                if next >= num_states || !(0.0..=1.0).contains(&p) {
                    return Err(TestbedError::InvalidTransition { state, action });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(TestbedError::RowNotStochastic { state, action, sum });
            }
        }
        for (&goal, &state) in &goal_states {
            if state >= num_states {
                return Err(TestbedError::StateOutOfRange { goal, state });
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            rows,
            goal_states,
            descriptors: vec![Vec::new(); num_states],
        })
    }

    /// Builds a deterministic MDP from a successor table `next[s][a]`.
    pub fn deterministic(
        next: &[Vec<usize>],
        goal_states: BTreeMap<GoalId, usize>,
    ) -> Result<Self, TestbedError> {
        let num_actions = next.first().map_or(0, Vec::len);
        let rows = next
            .iter()
            .flat_map(|row| row.iter().map(|&n| vec![(n, 1.0)]))
            .collect();
        Self::new(next.len(), num_actions, rows, goal_states)
    }

    fn with_descriptors(mut self, descriptors: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(descriptors.len(), self.num_states);
        self.descriptors = descriptors;
        self
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn goal_states(&self) -> &BTreeMap<GoalId, usize> {
        &self.goal_states
    }

    pub fn goal_state(&self, goal: GoalId) -> Result<usize, TestbedError> {
        self.goal_states
            .get(&goal)
            .copied()
            .ok_or(TestbedError::UnknownGoal(goal))
    }

    pub fn transitions(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.rows[state * self.num_actions + action]
    }

    /// Probability of landing in `target` after taking `action` in `state`.
    pub fn prob(&self, state: usize, action: usize, target: usize) -> f64 {
        self.transitions(state, action)
            .iter()
            .filter(|(n, _)| *n == target)
            .map(|(_, p)| p)
            .sum()
    }

    /// Successor of a deterministic transition, `None` if the row is stochastic.
    pub fn successor(&self, state: usize, action: usize) -> Option<usize> {
        match self.transitions(state, action) {
            [(next, p)] if *p == 1.0 => Some(*next),
            _ => None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1)
    }

    pub fn descriptor(&self, state: usize) -> &[f64] {
        &self.descriptors[state]
    }

    /// Width of [`Mdp::sa_features`].
    pub fn sa_feature_dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len) + self.num_states + self.num_actions
    }

    /// Descriptor, one-hot state and one-hot action, concatenated.
    pub fn sa_features(&self, state: usize, action: usize) -> Vec<f64> {
        let mut out = self.descriptors[state].clone();
        let base = out.len();
        out.resize(base + self.num_states + self.num_actions, 0.0);
        out[base + state] = 1.0;
        out[base + self.num_states + action] = 1.0;
        out
    }

    /// Descriptor plus one-hot state (no action), used by the BC head.
    pub fn state_features(&self, state: usize) -> Vec<f64> {
        let mut out = self.descriptors[state].clone();
        let base = out.len();
        out.resize(base + self.num_states, 0.0);
        out[base + state] = 1.0;
        out
    }

    /// Shortest number of transitions from each state into `target`
    /// (`None` when unreachable). Any transition with positive probability
    /// counts as an edge.
    pub fn distances_to(&self, target: usize) -> Vec<Option<usize>> {
        let mut preds: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.num_states];
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for &(n, p) in self.transitions(s, a) {
                    if p > 0.0 {
                        preds[n].insert(s);
                    }
                }
            }
        }
        let mut dist = vec![None; self.num_states];
        // The goal is entered, not occupied: distance counts transitions into it.
        let mut queue = VecDeque::new();
        for &p in &preds[target] {
            dist[p] = Some(1);
            queue.push_back(p);
        }
        while let Some(s) = queue.pop_front() {
            let d = dist[s].unwrap_or(0);
            for &p in &preds[s] {
                if dist[p].is_none() {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

/// Deterministic goal-conditioned policy as a `(goal, state) -> action` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    num_states: usize,
    table: BTreeMap<GoalId, Vec<usize>>,
}

impl Policy {
    pub fn new(num_states: usize, table: BTreeMap<GoalId, Vec<usize>>) -> Self {
        Self { num_states, table }
    }

    /// Shortest-path expert for a deterministic MDP. Ties go to the lowest
    /// action index; states that cannot reach the goal get action 0.
    pub fn shortest_path_expert(mdp: &Mdp) -> Self {
        let mut table = BTreeMap::new();
        for (&goal, &goal_state) in mdp.goal_states() {
            let dist = mdp.distances_to(goal_state);
            let actions = (0..mdp.num_states())
                .map(|s| {
                    let Some(d) = dist[s] else { return 0 };
                    (0..mdp.num_actions())
                        .find(|&a| match mdp.successor(s, a) {
                            Some(n) if n == goal_state => d == 1,
                            Some(n) => dist[n] == Some(d - 1),
                            None => false,
                        })
                        .unwrap_or(0)
                })
                .collect();
            table.insert(goal, actions);
        }
        Self::new(mdp.num_states(), table)
    }

    pub fn action(&self, state: usize, goal: GoalId) -> Option<usize> {
        self.table.get(&goal).and_then(|row| row.get(state)).copied()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
}

/// A language-goal stand-in: a short symbol string derived from the goal id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub goal_id: GoalId,
    pub token_seq: Vec<u32>,
    pub target_state: usize,
}

/// One expert rollout. `states[k]` and `actions[k]` are timestep `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goal_id: GoalId,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(timestep t in 1..=T, state, action)` triples.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.states
            .iter()
            .zip(&self.actions)
            .enumerate()
            .map(|(k, (&s, &a))| (k + 1, s, a))
    }
}

/// Rolls the expert from `start` until it enters the goal state.
pub fn expert_trajectory(
    mdp: &Mdp,
    policy: &Policy,
    start: usize,
    goal: GoalId,
) -> Result<Trajectory, TestbedError> {
    let goal_state = mdp.goal_state(goal)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut s = start;
    loop {
        if states.len() > mdp.num_states() {
            return Err(TestbedError::UnreachableGoal { goal, start });
        }
        let a = policy
            .action(s, goal)
            .ok_or(TestbedError::UnknownGoal(goal))?;
        let next = mdp
            .successor(s, a)
            .ok_or(TestbedError::StochasticExpert { state: s, action: a })?;
        states.push(s);
        actions.push(a);
        if next == goal_state {
            break;
        }
        s = next;
    }
    Ok(Trajectory {
        goal_id: goal,
        states,
        actions,
    })
}

/// Families of deterministic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpFamily {
    /// `arms` chains of `arm_len` states joined at a hub state 0. Goals sit
    /// at arm tips. One arm is a plain chain.
    Chain { arms: usize, arm_len: usize },
    /// `width x height` grid with 4-neighbour moves; goals at corners first.
    Grid { width: usize, height: usize },
    /// Random DAG over `num_states` states in topological order; every
    /// state has a backbone edge to its successor.
    Dag {
        num_states: usize,
        out_degree: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub family: MdpFamily,
    pub num_tasks: usize,
    pub trajectories_per_task: usize,
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_goal_token_len")]
    pub goal_token_len: usize,
    #[serde(default = "default_goal_vocab")]
    pub goal_vocab: u32,
}

fn default_gamma() -> f64 {
    0.995
}

fn default_goal_token_len() -> usize {
    4
}

fn default_goal_vocab() -> u32 {
    64
}

impl CorpusConfig {
    fn validate(&self) -> Result<(), TestbedError> {
        if self.num_tasks < 2 {
            return Err(TestbedError::InvalidConfig("num_tasks must be >= 2".into()));
        }
        if self.trajectories_per_task == 0 {
            return Err(TestbedError::InvalidConfig(
                "trajectories_per_task must be >= 1".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TestbedError::InvalidGamma(self.gamma));
        }
        if self.goal_token_len == 0 || self.goal_vocab == 0 {
            return Err(TestbedError::InvalidConfig(
                "goal token sequences must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// A generated or loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub mdp: Mdp,
    pub goals: Vec<GoalSpec>,
    pub trajectories: Vec<Trajectory>,
}

impl Corpus {
    pub fn goal(&self, id: GoalId) -> Option<&GoalSpec> {
        self.goals.iter().find(|g| g.goal_id == id)
    }

    pub fn expert(&self) -> Policy {
        Policy::shortest_path_expert(&self.mdp)
    }

    /// Splits off each task's last trajectory with at least two steps;
    /// returns `(train, held_out)`, both in corpus order.
    pub fn holdout_split(&self) -> (Vec<Trajectory>, Vec<Trajectory>) {
        let held: Vec<usize> = self
            .goals
            .iter()
            .filter_map(|g| {
                (0..self.trajectories.len())
                    .rev()
                    .find(|&i| self.trajectories[i].goal_id == g.goal_id && self.trajectories[i].len() >= 2)
            })
            .collect();
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (i, tr) in self.trajectories.iter().enumerate() {
            if held.contains(&i) {
                held_out.push(tr.clone());
            } else {
                train.push(tr.clone());
            }
        }
        (train, held_out)
    }
}

/// Builds the MDP of a family. Goal ids are `0..num_tasks`.
pub fn build_mdp(family: &MdpFamily, num_tasks: usize, seed: u64) -> Result<Mdp, TestbedError> {
    match *family {
        MdpFamily::Chain { arms, arm_len } => build_chain(arms, arm_len, num_tasks),
        MdpFamily::Grid { width, height } => build_grid(width, height, num_tasks, seed),
        MdpFamily::Dag {
            num_states,
            out_degree,
        } => build_dag(num_states, out_degree, num_tasks, seed),
    }
}

fn build_chain(arms: usize, arm_len: usize, num_tasks: usize) -> Result<Mdp, TestbedError> {
    if arms == 0 || arm_len == 0 {
        return Err(TestbedError::InvalidConfig("chain needs arms >= 1 and arm_len >= 1".into()));
    }
    if num_tasks > arms {
        return Err(TestbedError::InvalidConfig(format!(
            "chain with {arms} arms supports at most {arms} tasks, got {num_tasks}"
        )));
    }
    let num_states = 1 + arms * arm_len;
    let state = |arm: usize, depth: usize| if depth == 0 { 0 } else { 1 + arm * arm_len + depth - 1 };
    // action 0 moves toward the hub, action 1 + k moves outward along arm k
    let mut next = vec![vec![0usize; arms + 1]; num_states];
    let mut descriptors = vec![vec![0.0; arms + 1]; num_states];
    for (k, out) in next[0].iter_mut().enumerate().skip(1) {
        *out = state(k - 1, 1);
    }
    for arm in 0..arms {
        for depth in 1..=arm_len {
            let s = state(arm, depth);
            next[s][0] = state(arm, depth - 1);
            for k in 0..arms {
                next[s][k + 1] = if k == arm && depth < arm_len { state(arm, depth + 1) } else { s };
            }
            descriptors[s][arm] = 1.0;
            descriptors[s][arms] = depth as f64 / arm_len as f64;
        }
    }
    let goals = (0..num_tasks)
        .map(|k| (GoalId(k as u32), state(k, arm_len)))
        .collect();
    Ok(Mdp::deterministic(&next, goals)?.with_descriptors(descriptors))
}

fn build_grid(width: usize, height: usize, num_tasks: usize, seed: u64) -> Result<Mdp, TestbedError> {
    if width < 2 || height < 2 {
        return Err(TestbedError::InvalidConfig("grid needs width, height >= 2".into()));
    }
    let num_states = width * height;
    if num_tasks > num_states {
        return Err(TestbedError::InvalidConfig("more tasks than grid cells".into()));
    }
    let idx = |x: usize, y: usize| y * width + x;
    let mut next = Vec::with_capacity(num_states);
    let mut descriptors = Vec::with_capacity(num_states);
    for y in 0..height {
        for x in 0..width {
            // up, down, left, right; walls keep the agent in place
            next.push(vec![
                idx(x, y.saturating_sub(1)),
                idx(x, (y + 1).min(height - 1)),
                idx(x.saturating_sub(1), y),
                idx((x + 1).min(width - 1), y),
            ]);
            descriptors.push(vec![
                x as f64 / (width - 1) as f64,
                y as f64 / (height - 1) as f64,
            ]);
        }
    }
    let corners = [
        idx(width - 1, height - 1),
        idx(0, 0),
        idx(width - 1, 0),
        idx(0, height - 1),
    ];
    let mut goal_cells: Vec<usize> = corners.iter().copied().take(num_tasks).collect();
    if num_tasks > corners.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6964);
        let free: Vec<usize> = (0..num_states).filter(|s| !corners.contains(s)).collect();
        goal_cells.extend(free.choose_multiple(&mut rng, num_tasks - corners.len()).copied());
    }
    let goals = goal_cells
        .into_iter()
        .enumerate()
        .map(|(k, s)| (GoalId(k as u32), s))
        .collect();
    Ok(Mdp::deterministic(&next, goals)?.with_descriptors(descriptors))
}

fn build_dag(
    num_states: usize,
    out_degree: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<Mdp, TestbedError> {
    if num_states < num_tasks + 1 || out_degree == 0 {
        return Err(TestbedError::InvalidConfig(
            "DAG needs num_states > num_tasks and out_degree >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0064_6167);
    let mut next = Vec::with_capacity(num_states);
    for s in 0..num_states {
        if s + 1 == num_states {
            next.push(vec![s; out_degree]);
            continue;
        }
        let mut row = vec![s + 1];
        while row.len() < out_degree {
            row.push(rng.random_range(s + 1..num_states));
        }
        next.push(row);
    }
    let mut candidates: Vec<usize> = (num_states / 2..num_states).collect();
    if candidates.len() < num_tasks {
        candidates = (1..num_states).collect();
    }
    let goal_cells: Vec<usize> = candidates
        .choose_multiple(&mut rng, num_tasks)
        .copied()
        .collect();
    let goals = goal_cells
        .into_iter()
        .enumerate()
        .map(|(k, s)| (GoalId(k as u32), s))
        .collect();
    let descriptors = (0..num_states)
        .map(|s| vec![s as f64 / (num_states - 1) as f64])
        .collect();
    Ok(Mdp::deterministic(&next, goals)?.with_descriptors(descriptors))
}

/// Goal token string: the goal id hashed into `len` symbols of a vocabulary.
pub fn goal_tokens(goal: GoalId, seed: u64, len: usize, vocab: u32) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(goal.0));
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// States strictly closer to `goal` than to any other goal, that can reach it,
/// and are not the goal state itself. Expert paths started here stay inside
/// the basin for chain and grid corpora, so no `(state, action)` pair is
/// shared between tasks.
pub fn goal_basin(mdp: &Mdp, goal: GoalId) -> Result<Vec<usize>, TestbedError> {
    let goal_state = mdp.goal_state(goal)?;
    let own = mdp.distances_to(goal_state);
    let others: Vec<Vec<Option<usize>>> = mdp
        .goal_states()
        .iter()
        .filter(|(g, _)| **g != goal)
        .map(|(_, &s)| mdp.distances_to(s))
        .collect();
    let is_goal_state: BTreeSet<usize> = mdp.goal_states().values().copied().collect();
    Ok((0..mdp.num_states())
        .filter(|&s| !is_goal_state.contains(&s))
        .filter(|&s| {
            let Some(d) = own[s] else { return false };
            others.iter().all(|o| o[s].is_none_or(|od| d < od))
        })
        .collect())
}

/// Generates a corpus: for each task, `trajectories_per_task` expert rollouts
/// from uniformly drawn starts in the task's basin.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, TestbedError> {
    config.validate()?;
    let mdp = build_mdp(&config.family, config.num_tasks, config.seed)?;
    let policy = Policy::shortest_path_expert(&mdp);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut goals = Vec::with_capacity(config.num_tasks);
    let mut trajectories = Vec::new();
    for (&goal, &target_state) in mdp.goal_states() {
        let basin = goal_basin(&mdp, goal)?;
        if basin.is_empty() {
            return Err(TestbedError::UnreachableGoalNoStart { goal });
        }
        goals.push(GoalSpec {
            goal_id: goal,
            token_seq: goal_tokens(goal, config.seed, config.goal_token_len, config.goal_vocab),
            target_state,
        });
        for _ in 0..config.trajectories_per_task {
            let start = *basin.choose(&mut rng).expect("nonempty basin");
            trajectories.push(expert_trajectory(&mdp, &policy, start, goal)?);
        }
    }
    Ok(Corpus {
        config: config.clone(),
        mdp,
        goals,
        trajectories,
    })
}

/// Goal-reaching reward `(1 - gamma) * p(s' = goal | s, a)`.
pub fn goal_reaching_reward(
    mdp: &Mdp,
    state: usize,
    action: usize,
    goal: GoalId,
    gamma: f64,
) -> Result<f64, TestbedError> {
    check_gamma(gamma)?;
    check_indices(mdp, state, action)?;
    let goal_state = mdp.goal_state(goal)?;
    Ok((1.0 - gamma) * mdp.prob(state, action, goal_state))
}

fn check_gamma(gamma: f64) -> Result<(), TestbedError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(TestbedError::InvalidGamma(gamma))
    }
}

fn check_indices(mdp: &Mdp, state: usize, action: usize) -> Result<(), TestbedError> {
    if state >= mdp.num_states() || action >= mdp.num_actions() {
        return Err(TestbedError::IndexOutOfRange { state, action });
    }
    Ok(())
}

/// Above this many states the oracle switches from a dense LU solve to
/// fixed-point iteration.
pub const DIRECT_SOLVE_MAX_STATES: usize = 512;
const ITER_RESIDUAL: f64 = 1e-12;
const MAX_ITERS: usize = 200_000;

/// Discounted goal occupancy `Q(s, a, g)` for every goal of the MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyOracle {
    gamma: f64,
    num_states: usize,
    num_actions: usize,
    goals: Vec<GoalId>,
    q: Vec<f64>,
}

impl OccupancyOracle {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn goals(&self) -> &[GoalId] {
        &self.goals
    }

    pub fn q(&self, state: usize, action: usize, goal: GoalId) -> Option<f64> {
        let g = self.goals.iter().position(|&x| x == goal)?;
        self.q
            .get((g * self.num_states + state) * self.num_actions + action)
            .copied()
    }

    /// Closed form for a deterministic expert that enters the goal after
    /// `remaining` further transitions: `(1 - gamma) * gamma^remaining`.
    pub fn expert_closed_form(&self, remaining: usize) -> f64 {
        (1.0 - self.gamma) * self.gamma.powi(remaining as i32)
    }

    /// The undiscounted-by-`(1 - gamma)` reachability approximation
    /// `gamma^remaining` used to motivate the temporal weights. It differs
    /// from [`Self::expert_closed_form`] by a goal-independent factor.
    pub fn reachability_approx(&self, remaining: usize) -> f64 {
        self.gamma.powi(remaining as i32)
    }

    /// Largest violation of `Q = r + gamma * E[1{s' != g} Q(s', pi(s', g), g)]`.
    pub fn bellman_residual(&self, mdp: &Mdp, policy: &Policy) -> f64 {
        let mut worst: f64 = 0.0;
        for &goal in &self.goals {
            let goal_state = mdp.goal_states()[&goal];
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let mut target = (1.0 - self.gamma) * mdp.prob(s, a, goal_state);
                    for &(n, p) in mdp.transitions(s, a) {
                        if n != goal_state {
                            let na = policy.action(n, goal).unwrap_or(0);
                            target += self.gamma * p * self.q(n, na, goal).unwrap_or(0.0);
                        }
                    }
                    let q = self.q(s, a, goal).unwrap_or(0.0);
                    worst = worst.max((q - target).abs());
                }
            }
        }
        worst
    }
}

/// Solves for the discounted occupancy of every goal under `policy`.
pub fn occupancy_oracle(
    mdp: &Mdp,
    policy: &Policy,
    gamma: f64,
) -> Result<OccupancyOracle, TestbedError> {
    check_gamma(gamma)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let goals: Vec<GoalId> = mdp.goal_states().keys().copied().collect();
    let mut q = vec![0.0; goals.len() * ns * na];
    for (gi, &goal) in goals.iter().enumerate() {
        let goal_state = mdp.goal_states()[&goal];
        let pi: Vec<usize> = (0..ns)
            .map(|s| policy.action(s, goal).unwrap_or(0))
            .collect();
        let v = if ns <= DIRECT_SOLVE_MAX_STATES {
            solve_direct(mdp, &pi, goal_state, gamma)?
        } else {
            solve_iterative(mdp, &pi, goal_state, gamma)?
        };
        for s in 0..ns {
            for a in 0..na {
                let mut value = (1.0 - gamma) * mdp.prob(s, a, goal_state);
                for &(n, p) in mdp.transitions(s, a) {
                    if n != goal_state {
                        value += gamma * p * v[n];
                    }
                }
                q[(gi * ns + s) * na + a] = value;
            }
        }
    }
    Ok(OccupancyOracle {
        gamma,
        num_states: ns,
        num_actions: na,
        goals,
        q,
    })
}

/// `(I - gamma * P_pi') V = r_pi`, with transitions into the goal removed.
fn solve_direct(mdp: &Mdp, pi: &[usize], goal_state: usize, gamma: f64) -> Result<Vec<f64>, TestbedError> {
    let ns = mdp.num_states();
    let mut lhs = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for &(n, p) in mdp.transitions(s, pi[s]) {
            if n == goal_state {
                rhs[s] += (1.0 - gamma) * p;
            } else {
                lhs[(s, n)] -= gamma * p;
            }
        }
    }
    let solution = lhs
        .lu()
        .solve(&rhs)
        .ok_or(TestbedError::NonConvergent { residual: f64::NAN, iterations: 0 })?;
    Ok(solution.iter().copied().collect())
}

fn solve_iterative(mdp: &Mdp, pi: &[usize], goal_state: usize, gamma: f64) -> Result<Vec<f64>, TestbedError> {
    let ns = mdp.num_states();
    let mut v = vec![0.0; ns];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut next = vec![0.0; ns];
        residual = 0.0;
        for s in 0..ns {
            let mut value = 0.0;
            for &(n, p) in mdp.transitions(s, pi[s]) {
                value += if n == goal_state { (1.0 - gamma) * p } else { gamma * p * v[n] };
            }
            residual = residual.max((value - v[s]).abs());
            next[s] = value;
        }
        v = next;
        if residual < ITER_RESIDUAL {
            return Ok(v);
        }
    }
    Err(TestbedError::NonConvergent {
        residual,
        iterations: MAX_ITERS,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format: String,
    version: u32,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    seed: u64,
    num_trajectories: usize,
    config: CorpusConfig,
    goals: Vec<GoalSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    goal_id: GoalId,
    #[serde(rename = "T")]
    length: usize,
    states: Vec<usize>,
    actions: Vec<usize>,
}

pub const CORPUS_FORMAT: &str = "crl-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Writes the corpus as JSON lines: one header record, then one record per
/// trajectory. The MDP itself is rebuilt from the header's family config.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), TestbedError> {
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        num_states: corpus.mdp.num_states(),
        num_actions: corpus.mdp.num_actions(),
        gamma: corpus.config.gamma,
        seed: corpus.config.seed,
        num_trajectories: corpus.trajectories.len(),
        config: corpus.config.clone(),
        goals: corpus.goals.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    for tr in &corpus.trajectories {
        let record = TrajectoryRecord {
            goal_id: tr.goal_id,
            length: tr.len(),
            states: tr.states.clone(),
            actions: tr.actions.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Corpus, TestbedError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| TestbedError::Format("empty corpus file".into()))??;
    let header: CorpusHeader = serde_json::from_str(&first)?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(TestbedError::Format(format!(
            "unsupported corpus format {} v{}",
            header.format, header.version
        )));
    }
    let mdp = build_mdp(&header.config.family, header.config.num_tasks, header.config.seed)?;
    if mdp.num_states() != header.num_states || mdp.num_actions() != header.num_actions {
        return Err(TestbedError::Format("header dimensions disagree with family".into()));
    }
    let mut trajectories = Vec::with_capacity(header.num_trajectories);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)?;
        if rec.length == 0 || rec.states.len() != rec.length || rec.actions.len() != rec.length {
            return Err(TestbedError::Format(format!(
                "trajectory {} has inconsistent length",
                trajectories.len()
            )));
        }
        if rec.states.iter().any(|&s| s >= mdp.num_states())
            || rec.actions.iter().any(|&a| a >= mdp.num_actions())
        {
            return Err(TestbedError::Format(format!(
                "trajectory {} has out-of-range indices",
                trajectories.len()
            )));
        }
        trajectories.push(Trajectory {
            goal_id: rec.goal_id,
            states: rec.states,
            actions: rec.actions,
        });
    }
    if trajectories.len() != header.num_trajectories {
        return Err(TestbedError::Format(format!(
            "header announces {} trajectories, found {}",
            header.num_trajectories,
            trajectories.len()
        )));
    }
    Ok(Corpus {
        config: header.config,
        mdp,
        goals: header.goals,
        trajectories,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), TestbedError> {
    let file = fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    write_corpus(corpus, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus, TestbedError> {
    read_corpus(BufReader::new(fs::File::open(path)?))
}
