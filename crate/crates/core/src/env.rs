//! The lumen navigation task as a Q-learning environment.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{LumenMap, Vec2};
use crate::mechanics::{apply_action_with, energy, Action, RobotConfig, RobotParams, Relaxer};
use crate::qlearning::{
    compute_reward, run_episode_in, AgentParams, EpisodeResult, Mode, QState, QTable, RewardParams, TerminalTag,
};

/// Discretized tip state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId {
    pub cell_x: i64,
    pub cell_y: i64,
    pub heading_bin: u32,
    pub terminal_tag: TerminalTag,
}

impl QState for StateId {
    fn terminal(&self) -> TerminalTag {
        self.terminal_tag
    }
}

pub fn discretize(tip: Vec2, heading: f64, agent: &AgentParams, lumen: &LumenMap, fail: bool) -> StateId {
    let bins = agent.n_heading_bins;
    let wrapped = heading.rem_euclid(TAU);
    let heading_bin = ((wrapped / TAU * bins as f64).floor() as u32).min(bins - 1);
    let terminal_tag = if lumen.in_goal(tip) {
        TerminalTag::Goal
    } else if fail {
        TerminalTag::Fail
    } else {
        TerminalTag::None
    };
    StateId {
        cell_x: (tip.x / agent.cell_size).floor() as i64,
        cell_y: (tip.y / agent.cell_size).floor() as i64,
        heading_bin,
        terminal_tag,
    }
}

/// One step of a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub joints: Vec<Vec2>,
    pub tip_command: f64,
    pub energy: f64,
    pub action: Action,
    pub reward: f64,
}

pub type Trajectory = Vec<TraceRecord>;

/// Everything derived from one robot configuration.
#[derive(Debug, Clone)]
struct Node {
    config: RobotConfig,
    state: StateId,
    energy: f64,
}

const NO_EDGE: u32 = u32::MAX;

/// Memo of the deterministic simulator: configurations are interned and
/// each `(configuration, action)` edge is computed once.
#[derive(Debug, Default)]
struct TransitionCache {
    nodes: Vec<Node>,
    index: HashMap<(Box<[u64]>, u64), u32>,
    edges: Vec<[u32; 3]>,
}

fn config_key(config: &RobotConfig, phase: u64) -> (Box<[u64]>, u64) {
    (config.angles.iter().map(|a| a.to_bits()).collect(), phase)
}

/// Default cap on interned configurations per environment.
pub const DEFAULT_CACHE_CAPACITY: usize = 400_000;

pub struct LumenEnv<'a> {
    lumen: &'a LumenMap,
    robot: RobotParams,
    agent: AgentParams,
    reward: RewardParams,
    fail_threshold: f64,
    relaxer: Relaxer,
    cache: TransitionCache,
    cache_capacity: usize,
    current: Current,
    counter: u64,
    trace: Option<Trajectory>,
}

enum Current {
    Cached(u32),
    Uncached(Node),
}

impl<'a> LumenEnv<'a> {
    pub fn new(lumen: &'a LumenMap, robot: RobotParams, agent: AgentParams, reward: RewardParams) -> Self {
        let fail_threshold = reward.fail_threshold(lumen.diameter());
        let mut env = LumenEnv {
            lumen,
            robot,
            agent,
            reward,
            fail_threshold,
            relaxer: Relaxer::default(),
            cache: TransitionCache::default(),
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            current: Current::Cached(0),
            counter: 0,
            trace: None,
        };
        let start = env.make_node(RobotConfig::at_entry(lumen.entry_pose));
        env.current = match env.intern(start, 0) {
            Ok(i) => Current::Cached(i),
            Err(node) => Current::Uncached(node),
        };
        env
    }

    /// Limits how many configurations are memoized; 0 disables the cache.
    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.cache_capacity = capacity;
        self.cache = TransitionCache::default();
        let start = self.make_node(RobotConfig::at_entry(self.lumen.entry_pose));
        self.current = match self.intern(start, 0) {
            Ok(i) => Current::Cached(i),
            Err(node) => Current::Uncached(node),
        };
        self
    }

    /// Start recording a trajectory from the next reset.
    pub fn record_trajectories(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_trajectory(&mut self) -> Option<Trajectory> {
        self.trace.as_mut().map(std::mem::take)
    }

    pub fn config(&self) -> &RobotConfig {
        &self.node().config
    }

    pub fn cached_configurations(&self) -> usize {
        self.cache.nodes.len()
    }

    fn node(&self) -> &Node {
        match &self.current {
            Current::Cached(i) => &self.cache.nodes[*i as usize],
            Current::Uncached(node) => node,
        }
    }

    fn make_node(&self, config: RobotConfig) -> Node {
        let report = energy(&config, self.lumen, &self.robot);
        let fail = report.max_depth() > self.fail_threshold;
        let joints_tip = crate::mechanics::forward_kinematics(&config, self.robot.link_length);
        let tip = *joints_tip.last().unwrap();
        let state = discretize(tip, config.tip_heading(), &self.agent, self.lumen, fail);
        Node {
            config,
            state,
            energy: report.total,
        }
    }

    fn intern(&mut self, node: Node, phase: u64) -> Result<u32, Node> {
        let key = config_key(&node.config, phase);
        if let Some(&i) = self.cache.index.get(&key) {
            return Ok(i);
        }
        if self.cache.nodes.len() >= self.cache_capacity {
            return Err(node);
        }
        let i = self.cache.nodes.len() as u32;
        self.cache.nodes.push(node);
        self.cache.edges.push([NO_EDGE; 3]);
        self.cache.index.insert(key, i);
        Ok(i)
    }

    fn phase(&self) -> u64 {
        self.counter % self.robot.relax_cadence as u64
    }

    fn transition(&mut self, action: Action) -> Current {
        self.counter += 1;
        let phase_after = self.phase();
        if let Current::Cached(i) = self.current {
            let e = self.cache.edges[i as usize][action.index()];
            if e != NO_EDGE {
                return Current::Cached(e);
            }
        }
        let config = self.node().config.clone();
        let out = apply_action_with(
            &mut self.relaxer,
            &config,
            action,
            self.lumen,
            &self.robot,
            self.counter,
        );
        let node = self.make_node(out.config);
        match self.intern(node, phase_after) {
            Ok(j) => {
                if let Current::Cached(i) = self.current {
                    self.cache.edges[i as usize][action.index()] = j;
                }
                Current::Cached(j)
            }
            Err(node) => Current::Uncached(node),
        }
    }

    fn record(&mut self, action: Action, reward: f64) {
        if self.trace.is_none() {
            return;
        }
        let node = self.node();
        let record = TraceRecord {
            step: 0,
            joints: crate::mechanics::forward_kinematics(&node.config, self.robot.link_length),
            tip_command: node.config.tip_command,
            energy: node.energy,
            action,
            reward,
        };
        let trace = self.trace.as_mut().unwrap();
        trace.push(TraceRecord {
            step: trace.len(),
            ..record
        });
    }
}

impl crate::qlearning::Environment for LumenEnv<'_> {
    type State = StateId;

    fn reset<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> StateId {
        self.counter = 0;
        let start = self.make_node(RobotConfig::at_entry(self.lumen.entry_pose));
        self.current = match self.intern(start, 0) {
            Ok(i) => Current::Cached(i),
            Err(node) => Current::Uncached(node),
        };
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        self.node().state
    }

    fn step(&mut self, action: Action) -> (StateId, f64) {
        let prev = self.node().state;
        self.current = self.transition(action);
        let next = self.node().state;
        let reward = compute_reward(&prev, action, &next, &self.reward);
        self.record(action, reward);
        (next, reward)
    }
}

/// One navigation episode from the entry pose.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut LumenEnv<'_>,
    q: &mut QTable<StateId>,
    mode: Mode,
    rng: &mut R,
) -> EpisodeResult<Trajectory> {
    let agent = env.agent;
    let result = run_episode_in(env, q, &agent, mode, rng);
    let trajectory = env.take_trajectory();
    result.with_trajectory(trajectory)
}

/// Trains a fresh table on `lumen`, returning it with the learning curve.
pub fn train<R: Rng + ?Sized>(
    lumen: &LumenMap,
    robot: &RobotParams,
    agent: &AgentParams,
    reward: &RewardParams,
    n_episodes: usize,
    rng: &mut R,
) -> (QTable<StateId>, Vec<EpisodeResult>) {
    let mut env = LumenEnv::new(lumen, *robot, *agent, reward.clone());
    crate::qlearning::train_in(&mut env, agent, n_episodes, rng)
}

/// Evaluates a frozen table with `agent.eval_epsilon`.
pub fn evaluate<R: Rng + ?Sized>(
    lumen: &LumenMap,
    robot: &RobotParams,
    agent: &AgentParams,
    reward: &RewardParams,
    q: &QTable<StateId>,
    n_episodes: usize,
    record: bool,
    rng: &mut R,
) -> Vec<EpisodeResult<Trajectory>> {
    let mut env = LumenEnv::new(lumen, *robot, *agent, reward.clone());
    env.record_trajectories(record);
    // Evaluation never writes to the table.
    let mut frozen = q.clone();
    (0..n_episodes)
        .map(|_| {
            run_episode(
                &mut env,
                &mut frozen,
                Mode::Eval {
                    epsilon: agent.eval_epsilon,
                },
                rng,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_bifurcation, BifurcationParams};
    use crate::qlearning::Outcome;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lumen() -> LumenMap {
        generate_bifurcation(&BifurcationParams::with_default_extents(1.0, 0.0, 5.0, 0.0, 0.8)).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let map = lumen();
        let agent = AgentParams {
            cell_size: 1.0,
            n_heading_bins: 8,
            ..AgentParams::default()
        };
        let s = discretize(Vec2::new(2.3, 4.7), 0.4, &agent, &map, false);
        assert_eq!((s.cell_x, s.cell_y, s.heading_bin, s.terminal_tag), (2, 4, 0, TerminalTag::None));
        let s = discretize(map.goal_center, 0.0, &agent, &map, true);
        assert_eq!(s.terminal_tag, TerminalTag::Goal);
        let s = discretize(Vec2::ZERO, TAU - 1e-9, &agent, &map, false);
        assert_eq!(s.heading_bin, 7);
        let s = discretize(Vec2::new(-0.2, 0.0), -0.1, &agent, &map, true);
        assert_eq!((s.cell_x, s.heading_bin, s.terminal_tag), (-1, 7, TerminalTag::Fail));
    }

    #[test]
    fn cache_does_not_change_results() {
        let map = lumen();
        let robot = RobotParams::default();
        let agent = AgentParams {
            max_steps_per_episode: 60,
            ..AgentParams::default()
        };
        let reward = RewardParams::default();
        let run = |capacity| {
            let mut env = LumenEnv::new(&map, robot, agent, reward.clone()).with_cache_capacity(capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            crate::qlearning::train_in(&mut env, &agent, 40, &mut rng)
        };
        let (qa, ca) = run(0);
        let (qb, cb) = run(DEFAULT_CACHE_CAPACITY);
        let (qc, cc) = run(50);
        assert_eq!(qa.entries(), qb.entries());
        assert_eq!(qa.entries(), qc.entries());
        assert_eq!(ca, cb);
        assert_eq!(ca, cc);
    }

    #[test]
    fn trajectory_length_matches_steps() {
        let map = lumen();
        let agent = AgentParams {
            max_steps_per_episode: 25,
            ..AgentParams::default()
        };
        let q = QTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let results = evaluate(&map, &RobotParams::default(), &agent, &RewardParams::default(), &q, 3, true, &mut rng);
        for r in results {
            let t = r.trajectory.as_ref().unwrap();
            assert_eq!(t.len(), r.steps);
            for (i, rec) in t.iter().enumerate() {
                assert_eq!(rec.step, i);
                assert_eq!(rec.reward, r.rewards[i]);
            }
        }
    }

    #[test]
    fn greedy_over_empty_table_only_bends() {
        // All-zero rows tie-break to BendCW, which never leaves the entry.
        let map = lumen();
        let agent = AgentParams {
            max_steps_per_episode: 30,
            ..AgentParams::default()
        };
        let robot = RobotParams {
            link_length: 0.5,
            ..RobotParams::default()
        };
        let mut env = LumenEnv::new(&map, robot, agent, RewardParams::default());
        let mut q = QTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_episode(&mut env, &mut q, Mode::Eval { epsilon: 0.0 }, &mut rng);
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(env.config().n_inserted(), 1);
    }
}
