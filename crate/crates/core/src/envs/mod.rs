//! Episodic finite MDPs with deterministic transitions and stochastic
//! reward distributions.
//!
//! Transitions are a table `(state, action) → state`; rewards are finite
//! Dirac mixtures attached to the departing `(state, action)` pair.
//! Terminal states are absorbing with a zero reward, so finite-horizon
//! episodic tasks and the absorbing-state convention coincide.

mod grid;
mod mountain_car;

pub use grid::{risky_grid, GridActionSet, GridCell, GridLayout};
pub use mountain_car::{risky_mountain_car, risky_penalty};

use rand::Rng;
use thiserror::Error;

use crate::dist::{DistError, ReturnDistribution};
use crate::operators::History;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("transition target {target} out of range for {n_states} states")]
    BadTransition { target: usize, n_states: usize },
    #[error("terminal state {0} must be absorbing with a zero reward")]
    TerminalNotAbsorbing(usize),
    #[error("initial-state probabilities must sum to 1 (got {0})")]
    BadInitial(f64),
    #[error("discount factor must lie in (0,1], got {0}")]
    BadGamma(f64),
    #[error("horizon must be at least 1")]
    BadHorizon,
    #[error("table size mismatch: expected {expected} entries, got {got}")]
    BadTableSize { expected: usize, got: usize },
    #[error("invalid layout: {0}")]
    BadLayout(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("policy returned invalid action {action} (n_actions = {n_actions})")]
    InvalidAction { action: usize, n_actions: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// A finite episodic MDP: deterministic transition table, stochastic
/// reward table, absorbing terminal states, discount factor, an episode
/// horizon, and a categorical initial-state distribution.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<usize>,
    reward: Vec<ReturnDistribution>,
    terminal: Vec<bool>,
    gamma: f64,
    horizon: usize,
    initial: Vec<(usize, f64)>,
    action_labels: Vec<String>,
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<usize>,
        reward: Vec<ReturnDistribution>,
        terminal: Vec<bool>,
        gamma: f64,
        horizon: usize,
        initial: Vec<(usize, f64)>,
    ) -> Result<Self, EnvError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(EnvError::BadGamma(gamma));
        }
        if horizon == 0 {
            return Err(EnvError::BadHorizon);
        }
        let expected = n_states * n_actions;
        if transition.len() != expected {
            return Err(EnvError::BadTableSize { expected, got: transition.len() });
        }
        if reward.len() != expected {
            return Err(EnvError::BadTableSize { expected, got: reward.len() });
        }
        if terminal.len() != n_states {
            return Err(EnvError::BadTableSize { expected: n_states, got: terminal.len() });
        }
        for &t in &transition {
            if t >= n_states {
                return Err(EnvError::BadTransition { target: t, n_states });
            }
        }
        let mass: f64 = initial.iter().map(|&(_, p)| p).sum();
        if (mass - 1.0).abs() > 1e-12 || initial.iter().any(|&(s, p)| s >= n_states || p <= 0.0) {
            return Err(EnvError::BadInitial(mass));
        }
        let zero = ReturnDistribution::dirac(0.0).expect("finite");
        for s in 0..n_states {
            if terminal[s] {
                for a in 0..n_actions {
                    if transition[s * n_actions + a] != s || reward[s * n_actions + a] != zero {
                        return Err(EnvError::TerminalNotAbsorbing(s));
                    }
                }
            }
        }
        let action_labels = (0..n_actions).map(|a| format!("a{a}")).collect();
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            terminal,
            gamma,
            horizon,
            initial,
            action_labels,
        })
    }

    pub fn with_action_labels(mut self, labels: Vec<String>) -> Self {
        assert_eq!(labels.len(), self.n_actions);
        self.action_labels = labels;
        self
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition(&self, state: usize, action: usize) -> usize {
        self.transition[state * self.n_actions + action]
    }

    pub fn reward(&self, state: usize, action: usize) -> &ReturnDistribution {
        &self.reward[state * self.n_actions + action]
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn initial(&self) -> &[(usize, f64)] {
        &self.initial
    }

    pub fn action_label(&self, action: usize) -> &str {
        &self.action_labels[action]
    }

    /// Draws a start state from the initial distribution.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.initial.len() == 1 {
            return self.initial[0].0;
        }
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for &(s, p) in &self.initial {
            cum += p;
            if u < cum {
                return s;
            }
        }
        self.initial[self.initial.len() - 1].0
    }
}

/// The two-step MDP whose risk-greedy optimality operator is biased: a
/// high-variance action (reward 100 w.p. 0.9 / −10 w.p. 0.1) and a safe
/// action (constant −5) at each of two sequential states, undiscounted,
/// horizon 2.
pub fn three_state_mdp() -> TabularMdp {
    let risky = ReturnDistribution::from_atoms([(100.0, 0.9), (-10.0, 0.1)]).expect("valid");
    let safe = ReturnDistribution::dirac(-5.0).expect("finite");
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    TabularMdp::new(
        3,
        2,
        vec![1, 1, 2, 2, 2, 2],
        vec![risky.clone(), safe.clone(), risky, safe, zero.clone(), zero],
        vec![false, false, true],
        1.0,
        2,
        vec![(0, 1.0)],
    )
    .expect("fixed construction")
}

/// Uniformly random deterministic MDP for property tests: action 0 chains
/// toward the single terminal state (so termination is reachable within
/// the horizon), remaining transitions and reward mixtures are random.
/// Reward values lie in [−10, 10]. Same seed, same MDP.
pub fn random_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    max_reward_atoms: usize,
    gamma: f64,
    horizon: usize,
) -> TabularMdp {
    assert!(n_states >= 1 && n_actions >= 1 && max_reward_atoms >= 1);
    let terminal_state = n_states - 1;
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let mut transition = vec![0usize; n_states * n_actions];
    let mut reward = vec![zero.clone(); n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let idx = s * n_actions + a;
            if s == terminal_state {
                transition[idx] = s;
                continue;
            }
            transition[idx] = if a == 0 {
                if horizon + s + 1 >= n_states {
                    s + 1
                } else {
                    terminal_state
                }
            } else {
                rng.random_range(0..n_states)
            };
            let k = rng.random_range(1..=max_reward_atoms);
            let atoms: Vec<(f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(-10.0..10.0),
                        rng.random_range(0.05..1.0f64),
                    )
                })
                .collect();
            reward[idx] = ReturnDistribution::from_atoms(atoms).expect("positive mass");
        }
    }
    let mut terminal = vec![false; n_states];
    terminal[terminal_state] = true;
    if n_states == 1 {
        // single-state MDP: the lone state is terminal
        transition = vec![0; n_actions];
        reward = vec![zero; n_actions];
    }
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        terminal,
        gamma,
        horizon,
        vec![(0, 1.0)],
    )
    .expect("generator keeps invariants")
}

/// One simulated step of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Simulates one episode under a history policy: runs to a terminal state
/// or the horizon cap, returning the trajectory and the discounted
/// episode return.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    mut policy: impl FnMut(&History) -> usize,
    rng: &mut R,
) -> Result<(Vec<RolloutStep>, f64), EnvError> {
    let start = mdp.sample_initial(rng);
    let mut history = History::root(start);
    let mut steps = Vec::new();
    let mut episode_return = 0.0;
    let mut discount = 1.0;
    while !mdp.is_terminal(history.state()) && history.depth() < mdp.horizon() {
        let action = policy(&history);
        if action >= mdp.n_actions() {
            return Err(EnvError::InvalidAction { action, n_actions: mdp.n_actions() });
        }
        let reward = mdp.reward(history.state(), action).sample(rng);
        episode_return += discount * reward;
        discount *= mdp.gamma();
        steps.push(RolloutStep { state: history.state(), action, reward });
        history = history.child(mdp, action).expect("valid action");
    }
    Ok((steps, episode_return))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_state_structure() {
        let mdp = three_state_mdp();
        let r = mdp.reward(0, 0);
        assert_eq!(r.atoms().len(), 2);
        assert_eq!(r.atoms()[0].value, -10.0);
        assert_eq!(r.atoms()[0].prob, 0.1);
        assert_eq!(r.atoms()[1].value, 100.0);
        assert_eq!(mdp.reward(1, 1), &ReturnDistribution::dirac(-5.0).unwrap());
        assert_eq!(mdp.transition(0, 0), 1);
        assert_eq!(mdp.transition(0, 1), 1);
        assert_eq!(mdp.transition(1, 0), 2);
        assert!(mdp.is_terminal(2));
        assert_eq!(mdp.gamma(), 1.0);
        assert_eq!(mdp.horizon(), 2);
    }

    #[test]
    fn terminal_states_must_be_absorbing() {
        let zero = ReturnDistribution::dirac(0.0).unwrap();
        let bad = TabularMdp::new(
            2,
            1,
            vec![1, 0],
            vec![zero.clone(), zero.clone()],
            vec![false, true],
            0.9,
            3,
            vec![(0, 1.0)],
        );
        assert!(bad.is_err());

        let bad_reward = TabularMdp::new(
            2,
            1,
            vec![1, 1],
            vec![zero.clone(), ReturnDistribution::dirac(1.0).unwrap()],
            vec![false, true],
            0.9,
            3,
            vec![(0, 1.0)],
        );
        assert!(bad_reward.is_err());
    }

    #[test]
    fn always_safe_policy_returns_minus_ten() {
        let mdp = three_state_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (steps, ret) = rollout(&mdp, |_| 1, &mut rng).unwrap();
            assert_eq!(steps.len(), 2);
            assert_eq!(ret, -10.0);
        }
    }

    #[test]
    fn horizon_caps_episode_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = random_mdp(&mut rng, 4, 2, 2, 0.9, 3);
        for _ in 0..50 {
            let (steps, _) = rollout(&mdp, |_| 1, &mut rng).unwrap();
            assert!(steps.len() <= 3);
        }
    }

    #[test]
    fn random_mdp_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let m1 = random_mdp(&mut a, 5, 3, 3, 0.9, 6);
        let m2 = random_mdp(&mut b, 5, 3, 3, 0.9, 6);
        for s in 0..5 {
            for act in 0..3 {
                assert_eq!(m1.transition(s, act), m2.transition(s, act));
                assert_eq!(m1.reward(s, act), m2.reward(s, act));
            }
        }
    }

    #[test]
    fn single_state_mdp_is_terminal_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 1, 2, 2, 0.9, 4);
        assert!(mdp.is_terminal(0));
        let (steps, ret) = rollout(&mdp, |_| 0, &mut rng).unwrap();
        assert!(steps.is_empty());
        assert_eq!(ret, 0.0);
    }

    #[test]
    fn invalid_policy_action_is_reported() {
        let mdp = three_state_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(rollout(&mdp, |_| 5, &mut rng).is_err());
    }
}
