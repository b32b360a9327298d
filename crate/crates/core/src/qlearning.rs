//! Tabular Q-learning: the update rule, epsilon-greedy selection and a
//! generic episode loop over any [`Environment`].

use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::mechanics::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalTag {
    None,
    Goal,
    Fail,
}

/// A discrete state usable as a Q-table key.
pub trait QState: Clone + Eq + Hash + Ord {
    fn terminal(&self) -> TerminalTag;

    fn is_terminal(&self) -> bool {
        self.terminal() != TerminalTag::None
    }
}

/// Learning and exploration hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub alpha: f64,
    pub gamma: f64,
    pub explore_epsilon_start: f64,
    pub explore_epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    pub eval_epsilon: f64,
    pub max_steps_per_episode: usize,
    pub cell_size: f64,
    pub n_heading_bins: u32,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            alpha: 0.1,
            gamma: 0.95,
            explore_epsilon_start: 1.0,
            explore_epsilon_end: 0.05,
            epsilon_decay_episodes: 4000,
            eval_epsilon: 0.05,
            max_steps_per_episode: 400,
            // One default link length.
            cell_size: 1.25,
            n_heading_bins: 16,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(("alpha", format!("{} must lie in (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(("gamma", format!("{} must lie in [0, 1)", self.gamma)));
        }
        for (field, value) in [
            ("explore_epsilon_start", self.explore_epsilon_start),
            ("explore_epsilon_end", self.explore_epsilon_end),
            ("eval_epsilon", self.eval_epsilon),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err((field, format!("{value} must lie in [0, 1]")));
            }
        }
        if self.max_steps_per_episode == 0 {
            return Err(("max_steps_per_episode", "must be >= 1".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(("cell_size", format!("{} must be > 0", self.cell_size)));
        }
        if self.n_heading_bins == 0 {
            return Err(("n_heading_bins", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Exploration rate for training episode `episode` (0-based): linear from
    /// start to end over `epsilon_decay_episodes`, then held.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 {
            return self.explore_epsilon_end;
        }
        let frac = (episode as f64 / self.epsilon_decay_episodes as f64).min(1.0);
        self.explore_epsilon_start + (self.explore_epsilon_end - self.explore_epsilon_start) * frac
    }
}

/// Sparse Q-values; absent states read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<S: QState> {
    values: HashMap<S, [f64; 3]>,
}

impl<S: QState> Default for QTable<S> {
    fn default() -> Self {
        QTable { values: HashMap::new() }
    }
}

impl<S: QState> QTable<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, s: &S, a: Action) -> f64 {
        self.row(s)[a.index()]
    }

    pub fn row(&self, s: &S) -> [f64; 3] {
        if s.is_terminal() {
            return [0.0; 3];
        }
        self.values.get(s).copied().unwrap_or([0.0; 3])
    }

    /// Stores `value`; writes to terminal states are ignored.
    pub fn set(&mut self, s: &S, a: Action, value: f64) {
        if s.is_terminal() {
            return;
        }
        self.values.entry(s.clone()).or_insert([0.0; 3])[a.index()] = value;
    }

    /// `max_a Q(s, a)`, zero for terminal states.
    pub fn max_value(&self, s: &S) -> f64 {
        let row = self.row(s);
        row[0].max(row[1]).max(row[2])
    }

    /// Argmax with ties broken by `BendCW < BendCCW < Advance`.
    pub fn greedy(&self, s: &S) -> Action {
        let row = self.row(s);
        let mut best = 0;
        for i in 1..3 {
            if row[i] > row[best] {
                best = i;
            }
        }
        Action::from_index(best)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Entries sorted by state then action.
    pub fn entries(&self) -> Vec<(S, Action, f64)> {
        let mut states: Vec<&S> = self.values.keys().collect();
        states.sort();
        states
            .into_iter()
            .flat_map(|s| {
                let row = self.values[s];
                Action::ALL.into_iter().map(move |a| (s.clone(), a, row[a.index()]))
            })
            .collect()
    }
}

/// `Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`.
/// Stores and returns the new value.
pub fn q_update<S: QState>(q: &mut QTable<S>, s: &S, a: Action, r: f64, s_next: &S, alpha: f64, gamma: f64) -> f64 {
    let old = q.get(s, a);
    let target = r + gamma * q.max_value(s_next);
    let new = old + alpha * (target - old);
    q.set(s, a, new);
    new
}

/// Uniform random action with probability `epsilon`, greedy otherwise.
/// Draws nothing from `rng` when `epsilon == 0`.
pub fn select_action<S: QState, R: Rng + ?Sized>(q: &QTable<S>, s: &S, epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Action::from_index(rng.gen_range(0..3));
    }
    q.greedy(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub r_goal: f64,
    pub r_step: f64,
    pub r_fail: f64,
    /// Penetration depth that fails the episode; `None` means
    /// `0.3 * diameter` of the lumen in use.
    pub fail_penetration: Option<f64>,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            r_goal: 1.0,
            r_step: -0.01,
            r_fail: -1.0,
            fail_penetration: None,
        }
    }
}

impl RewardParams {
    pub const DEFAULT_FAIL_FACTOR: f64 = 0.3;

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.r_goal > 0.0 && self.r_goal.is_finite()) {
            return Err(("r_goal", format!("{} must be > 0", self.r_goal)));
        }
        if !(self.r_step <= 0.0 && self.r_step.is_finite()) {
            return Err(("r_step", format!("{} must be <= 0", self.r_step)));
        }
        if !(self.r_fail <= 0.0 && self.r_fail.is_finite()) {
            return Err(("r_fail", format!("{} must be <= 0", self.r_fail)));
        }
        if let Some(fp) = self.fail_penetration {
            if !(fp > 0.0 && fp.is_finite()) {
                return Err(("fail_penetration", format!("{fp} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn fail_threshold(&self, diameter: f64) -> f64 {
        self.fail_penetration.unwrap_or(Self::DEFAULT_FAIL_FACTOR * diameter)
    }
}

/// Reward for arriving in `next`.
pub fn compute_reward<S: QState>(_prev: &S, _action: Action, next: &S, params: &RewardParams) -> f64 {
    match next.terminal() {
        TerminalTag::Goal => params.r_goal,
        TerminalTag::Fail => params.r_fail,
        TerminalTag::None => params.r_step,
    }
}

/// A model-free environment: the learner only sees states and rewards.
pub trait Environment {
    type State: QState;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Self::State;

    /// Returns the next state and the reward for the transition.
    fn step(&mut self, action: Action) -> (Self::State, f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Goal,
    Fail,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Goal => "goal",
            Outcome::Fail => "fail",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { epsilon: f64 },
    Eval { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult<T = ()> {
    pub outcome: Outcome,
    pub steps: usize,
    /// `Σ gamma^t r_t`.
    pub return_value: f64,
    pub rewards: Vec<f64>,
    pub trajectory: Option<T>,
}

impl<T> EpisodeResult<T> {
    pub fn with_trajectory<U>(self, trajectory: Option<U>) -> EpisodeResult<U> {
        EpisodeResult {
            outcome: self.outcome,
            steps: self.steps,
            return_value: self.return_value,
            rewards: self.rewards,
            trajectory,
        }
    }
}

/// Runs one episode; in [`Mode::Train`] applies `q_update` after every step.
pub fn run_episode_in<E: Environment, R: Rng + ?Sized>(
    env: &mut E,
    q: &mut QTable<E::State>,
    agent: &AgentParams,
    mode: Mode,
    rng: &mut R,
) -> EpisodeResult {
    let epsilon = match mode {
        Mode::Train { epsilon } | Mode::Eval { epsilon } => epsilon,
    };
    let mut state = env.reset(rng);
    let mut rewards = Vec::new();
    let mut return_value = 0.0;
    let mut discount = 1.0;
    let mut outcome = match state.terminal() {
        TerminalTag::Goal => Some(Outcome::Goal),
        TerminalTag::Fail => Some(Outcome::Fail),
        TerminalTag::None => None,
    };
    while outcome.is_none() && rewards.len() < agent.max_steps_per_episode {
        let action = select_action(q, &state, epsilon, rng);
        let (next, reward) = env.step(action);
        if let Mode::Train { .. } = mode {
            q_update(q, &state, action, reward, &next, agent.alpha, agent.gamma);
        }
        rewards.push(reward);
        return_value += discount * reward;
        discount *= agent.gamma;
        outcome = match next.terminal() {
            TerminalTag::Goal => Some(Outcome::Goal),
            TerminalTag::Fail => Some(Outcome::Fail),
            TerminalTag::None => None,
        };
        state = next;
    }
    EpisodeResult {
        outcome: outcome.unwrap_or(Outcome::Timeout),
        steps: rewards.len(),
        return_value,
        rewards,
        trajectory: None,
    }
}

/// Trains for `n_episodes` with the decaying exploration schedule.
pub fn train_in<E: Environment, R: Rng + ?Sized>(
    env: &mut E,
    agent: &AgentParams,
    n_episodes: usize,
    rng: &mut R,
) -> (QTable<E::State>, Vec<EpisodeResult>) {
    let mut q = QTable::new();
    let curve = (0..n_episodes)
        .map(|episode| {
            let mode = Mode::Train {
                epsilon: agent.epsilon_at(episode),
            };
            run_episode_in(env, &mut q, agent, mode, rng)
        })
        .collect();
    (q, curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
    struct Toy(u8, TerminalTag);

    impl QState for Toy {
        fn terminal(&self) -> TerminalTag {
            self.1
        }
    }

    fn s(i: u8) -> Toy {
        Toy(i, TerminalTag::None)
    }

    #[test]
    fn update_examples() {
        let mut q = QTable::new();
        assert_eq!(q_update(&mut q, &s(0), Action::Advance, 5.0, &s(1), 1.0, 0.0), 5.0);

        let mut q = QTable::new();
        q.set(&s(0), Action::BendCW, 1.0);
        q.set(&s(1), Action::BendCCW, 2.0);
        let v = q_update(&mut q, &s(0), Action::BendCW, 1.0, &s(1), 0.5, 0.9);
        assert!((v - 1.9).abs() < 1e-12);
        assert_eq!(q.get(&s(0), Action::BendCW), v);
    }

    #[test]
    fn zero_learning_rate_keeps_value() {
        let mut q = QTable::new();
        q.set(&s(0), Action::Advance, 0.7);
        q.set(&s(1), Action::Advance, 100.0);
        assert_eq!(q_update(&mut q, &s(0), Action::Advance, -42.0, &s(1), 0.0, 0.9), 0.7);
    }

    #[test]
    fn terminal_next_state_contributes_nothing() {
        let mut q = QTable::new();
        let goal = Toy(9, TerminalTag::Goal);
        q.set(&goal, Action::Advance, 10.0);
        assert!(q.is_empty());
        let v = q_update(&mut q, &s(0), Action::Advance, 1.0, &goal, 1.0, 0.9);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut q = QTable::new();
        q.set(&s(0), Action::BendCW, 0.1);
        q.set(&s(0), Action::BendCCW, 0.5);
        q.set(&s(0), Action::Advance, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&q, &s(0), 0.0, &mut rng), Action::BendCCW);
        assert_eq!(select_action(&q, &s(1), 0.0, &mut rng), Action::BendCW);
        q.set(&s(2), Action::BendCCW, 0.3);
        q.set(&s(2), Action::Advance, 0.3);
        assert_eq!(q.greedy(&s(2)), Action::BendCCW);
    }

    #[test]
    fn greedy_selection_draws_no_randomness() {
        let q: QTable<Toy> = QTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let before = rng.clone();
        for _ in 0..10 {
            select_action(&q, &s(0), 0.0, &mut rng);
        }
        assert_eq!(rng, before);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let q: QTable<Toy> = QTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[select_action(&q, &s(0), 1.0, &mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn reward_assignment() {
        let p = RewardParams::default();
        assert_eq!(compute_reward(&s(0), Action::Advance, &Toy(1, TerminalTag::Goal), &p), 1.0);
        assert_eq!(compute_reward(&s(0), Action::Advance, &s(1), &p), -0.01);
        assert_eq!(compute_reward(&s(0), Action::Advance, &Toy(1, TerminalTag::Fail), &p), -1.0);
    }

    #[test]
    fn epsilon_schedule() {
        let agent = AgentParams {
            explore_epsilon_start: 1.0,
            explore_epsilon_end: 0.0,
            epsilon_decay_episodes: 10,
            ..AgentParams::default()
        };
        assert_eq!(agent.epsilon_at(0), 1.0);
        assert!((agent.epsilon_at(5) - 0.5).abs() < 1e-12);
        assert_eq!(agent.epsilon_at(10), 0.0);
        assert_eq!(agent.epsilon_at(1000), 0.0);
    }

    #[test]
    fn agent_validation() {
        assert!(AgentParams::default().validate().is_ok());
        let bad = AgentParams {
            max_steps_per_episode: 0,
            ..AgentParams::default()
        };
        assert_eq!(bad.validate().unwrap_err().0, "max_steps_per_episode");
        let bad = AgentParams {
            gamma: 1.0,
            ..AgentParams::default()
        };
        assert_eq!(bad.validate().unwrap_err().0, "gamma");
    }

    /// Chain 0 -> 1 -> 2 -> goal via Advance; bends stay put.
    struct Chain {
        pos: u8,
    }

    impl Environment for Chain {
        type State = Toy;

        fn reset<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> Toy {
            self.pos = 0;
            s(0)
        }

        fn step(&mut self, action: Action) -> (Toy, f64) {
            if action == Action::Advance {
                self.pos += 1;
            }
            if self.pos == 3 {
                (Toy(3, TerminalTag::Goal), 1.0)
            } else {
                (s(self.pos), -0.01)
            }
        }
    }

    #[test]
    fn episode_return_matches_rewards() {
        let mut env = Chain { pos: 0 };
        let agent = AgentParams {
            max_steps_per_episode: 50,
            ..AgentParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, curve) = train_in(&mut env, &agent, 200, &mut rng);
        for ep in &curve {
            let recomputed: f64 = ep.rewards.iter().enumerate().map(|(t, r)| agent.gamma.powi(t as i32) * r).sum();
            assert!((ep.return_value - recomputed).abs() < 1e-9);
            assert!(ep.steps <= agent.max_steps_per_episode);
        }
        let result = run_episode_in(&mut env, &mut q.clone(), &agent, Mode::Eval { epsilon: 0.0 }, &mut rng);
        assert_eq!(result.outcome, Outcome::Goal);
        assert_eq!(result.steps, 3);
    }

    #[test]
    fn single_step_budget_times_out() {
        let mut env = Chain { pos: 0 };
        let agent = AgentParams {
            max_steps_per_episode: 1,
            ..AgentParams::default()
        };
        let mut q = QTable::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = run_episode_in(&mut env, &mut q, &agent, Mode::Eval { epsilon: 0.0 }, &mut rng);
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(r.steps, 1);
    }
}
