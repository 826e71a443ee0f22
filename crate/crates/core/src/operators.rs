//! Exact tabular operators for risk-sensitive dynamic programming.
//!
//! Two families live here. The Markovian family works on state-action
//! tables: policy evaluation by backward induction, mean value iteration,
//! and the risk-greedy optimality step (which is biased for non-mean
//! measures — the point of the tied-update witness below). The
//! history-relied family works on history-action tables: evaluating a
//! history policy bootstraps the singleton-history value of the successor
//! state scaled by `γ^{t+1}` after the exact prefix-reward convolution,
//! which restores the contraction and improvement guarantees that the
//! Markovian risk-greedy operator loses.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::dist::{max_wasserstein, DistError, KeyedDistributionMap, ReturnDistribution};
use crate::envs::{EnvError, TabularMdp};
use crate::risk::RiskMeasure;

/// Tolerance for treating two risk values as tied.
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("history tree exceeds budget: {found} nodes > {budget}")]
    BudgetExceeded { found: usize, budget: usize },
    #[error("policy enumeration exceeds budget: {found} candidates > {budget}")]
    EnumerationBudget { found: usize, budget: usize },
    #[error("value map is missing entry for {0}")]
    MissingEntry(String),
    #[error("key {key} does not replay to a valid history: {reason}")]
    BadHistoryKey { key: String, reason: String },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

// ---------------------------------------------------------------------------
// Histories
// ---------------------------------------------------------------------------

/// Identifies a history by its start state and action sequence. Under
/// deterministic transitions this pins down the full state-action
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HistoryKey {
    pub start: usize,
    pub actions: Vec<usize>,
}

impl HistoryKey {
    pub fn singleton(state: usize) -> Self {
        Self { start: state, actions: Vec::new() }
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.start)?;
        for a in &self.actions {
            write!(f, ".{a}")?;
        }
        Ok(())
    }
}

/// A state-action prefix: the visited `(state, action)` pairs, the
/// current state, and the exact distribution of the discounted prefix
/// reward `Σ_{i<t} γ^i R(s_i, a_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    start: usize,
    steps: Vec<(usize, usize)>,
    state: usize,
    prefix: ReturnDistribution,
}

impl History {
    /// Depth-0 history `{s}` with a zero prefix.
    pub fn root(state: usize) -> Self {
        Self {
            start: state,
            steps: Vec::new(),
            state,
            prefix: ReturnDistribution::dirac(0.0).expect("finite"),
        }
    }

    /// Extends the history by one action, convolving the departing
    /// reward distribution (scaled by `γ^t`) into the prefix.
    pub fn child(&self, mdp: &TabularMdp, action: usize) -> Result<Self, EnvError> {
        if action >= mdp.n_actions() {
            return Err(EnvError::InvalidAction { action, n_actions: mdp.n_actions() });
        }
        let scale = mdp.gamma().powi(self.depth() as i32);
        let step_reward = mdp.reward(self.state, action).affine(scale, 0.0)?;
        let mut steps = self.steps.clone();
        steps.push((self.state, action));
        Ok(Self {
            start: self.start,
            steps,
            state: mdp.transition(self.state, action),
            prefix: self.prefix.convolve(&step_reward),
        })
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    /// Exact distribution of the discounted reward accumulated before the
    /// current depth; `dirac(0)` at depth 0.
    pub fn prefix_dist(&self) -> &ReturnDistribution {
        &self.prefix
    }

    pub fn key(&self) -> HistoryKey {
        HistoryKey {
            start: self.start,
            actions: self.steps.iter().map(|&(_, a)| a).collect(),
        }
    }

    /// Rebuilds the history a key denotes, validating the action
    /// sequence against the MDP.
    pub fn replay(mdp: &TabularMdp, key: &HistoryKey) -> Result<Self, OperatorError> {
        if key.start >= mdp.n_states() {
            return Err(OperatorError::BadHistoryKey {
                key: key.to_string(),
                reason: format!("start state {} out of range", key.start),
            });
        }
        let mut h = History::root(key.start);
        for &a in &key.actions {
            h = h.child(mdp, a).map_err(|e| OperatorError::BadHistoryKey {
                key: key.to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Deterministic state-indexed policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkovPolicy(pub Vec<usize>);

impl MarkovPolicy {
    pub fn action(&self, state: usize) -> usize {
        self.0[state]
    }
}

/// Deterministic history-indexed policy: explicit choices per history
/// key, with a fallback action for unseen histories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryPolicy {
    pub choices: BTreeMap<HistoryKey, usize>,
    pub default_action: usize,
}

impl HistoryPolicy {
    pub fn constant(action: usize) -> Self {
        Self { choices: BTreeMap::new(), default_action: action }
    }

    /// Materializes a Markov policy on the reachable history tree.
    pub fn from_markov(pi: &MarkovPolicy, tree: &HistoryTree) -> Self {
        let mut choices = BTreeMap::new();
        for node in &tree.nodes {
            choices.insert(node.history.key(), pi.action(node.history.state()));
        }
        Self { choices, default_action: 0 }
    }

    pub fn action(&self, key: &HistoryKey) -> usize {
        self.choices.get(key).copied().unwrap_or(self.default_action)
    }
}

/// Tie handling for greedy argmax steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieRule {
    /// Always the smallest tied action index.
    LowestIndex,
    /// Round-robin over the tied set across successive operator
    /// applications; realizes the two-update divergence witness
    /// deterministically.
    Alternating,
}

/// Tie breaker whose rotation advances once per operator application, so
/// every tie inside one synchronous sweep resolves to the same slot.
#[derive(Debug, Clone)]
pub struct TieBreaker {
    rule: TieRule,
    counter: usize,
}

impl TieBreaker {
    pub fn new(rule: TieRule) -> Self {
        Self { rule, counter: 0 }
    }

    pub fn pick(&self, tied: &[usize]) -> usize {
        debug_assert!(!tied.is_empty());
        match self.rule {
            TieRule::LowestIndex => tied[0],
            TieRule::Alternating => tied[self.counter % tied.len()],
        }
    }

    /// Rotates the alternating rule to its next slot.
    pub fn advance(&mut self) {
        self.counter += 1;
    }
}

fn argmax_with_ties(values: &[f64], tie: &TieBreaker) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - TIE_EPS)
        .map(|(i, _)| i)
        .collect();
    tie.pick(&tied)
}

// ---------------------------------------------------------------------------
// Markovian operators
// ---------------------------------------------------------------------------

pub fn state_action_key(state: usize, action: usize) -> String {
    format!("s{state}|a{action}")
}

/// State-action map with every entry set to one distribution.
pub fn uniform_state_action_map(mdp: &TabularMdp, dist: &ReturnDistribution) -> KeyedDistributionMap {
    let mut map = KeyedDistributionMap::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            map.insert(state_action_key(s, a), dist.clone());
        }
    }
    map
}

fn map_get(
    map: &KeyedDistributionMap,
    state: usize,
    action: usize,
) -> Result<&ReturnDistribution, OperatorError> {
    let key = state_action_key(state, action);
    map.get(&key).ok_or(OperatorError::MissingEntry(key))
}

/// Exact `Z^π` over state-action pairs by backward induction over the
/// remaining-step index. Entries grow by convolution; when a, cap is
/// given, supports larger than the cap are projected and the accumulated
/// 1-Wasserstein projection error is reported.
pub struct MarkovEval {
    pub values: KeyedDistributionMap,
    pub prune_error: f64,
}

pub fn markov_policy_eval(
    mdp: &TabularMdp,
    pi: &MarkovPolicy,
    prune_cap: Option<usize>,
) -> Result<MarkovEval, OperatorError> {
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut prev: Vec<ReturnDistribution> = vec![zero.clone(); ns * na];
    let mut prune_error = 0.0;
    for _ in 0..mdp.horizon() {
        let mut cur = vec![zero.clone(); ns * na];
        for s in 0..ns {
            for a in 0..na {
                if mdp.is_terminal(s) {
                    continue;
                }
                let s2 = mdp.transition(s, a);
                let boot = if mdp.is_terminal(s2) {
                    zero.clone()
                } else {
                    prev[s2 * na + pi.action(s2)].affine(mdp.gamma(), 0.0)?
                };
                let mut z = mdp.reward(s, a).convolve(&boot);
                if let Some(cap) = prune_cap {
                    if z.len() > cap {
                        let (pruned, err) = z.prune(cap)?;
                        prune_error += err;
                        z = pruned;
                    }
                }
                cur[s * na + a] = z;
            }
        }
        prev = cur;
    }
    let mut values = KeyedDistributionMap::new();
    for s in 0..ns {
        for a in 0..na {
            values.insert(state_action_key(s, a), prev[s * na + a].clone());
        }
    }
    Ok(MarkovEval { values, prune_error })
}

pub struct MeanViResult {
    pub values: KeyedDistributionMap,
    pub policy: MarkovPolicy,
    /// L∞ change of the exact mean table per sweep.
    pub mean_deltas: Vec<f64>,
    /// Final exact mean table, indexed `[state][action]`.
    pub means: Vec<Vec<f64>>,
    pub prune_error: f64,
}

/// Distributional value iteration with the mean-greedy action rule.
///
/// The mean table is carried through the exact scalar recursion (the mean
/// of the updated distribution depends only on the means of the operands)
/// so greedy actions and convergence reporting stay exact even when the
/// distribution iterates are projected.
pub fn mean_value_iteration(
    mdp: &TabularMdp,
    sweeps: usize,
    prune_cap: Option<usize>,
) -> Result<MeanViResult, OperatorError> {
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![vec![0.0f64; na]; ns];
    let mut z: Vec<ReturnDistribution> = vec![zero.clone(); ns * na];
    let mut mean_deltas = Vec::with_capacity(sweeps);
    let mut prune_error = 0.0;

    for _ in 0..sweeps {
        let mut q_next = vec![vec![0.0f64; na]; ns];
        let mut z_next = vec![zero.clone(); ns * na];
        for s in 0..ns {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..na {
                let s2 = mdp.transition(s, a);
                let (boot_mean, boot_dist) = if mdp.is_terminal(s2) {
                    (0.0, zero.clone())
                } else {
                    let tie = TieBreaker::new(TieRule::LowestIndex);
                    let a2 = argmax_with_ties(&q[s2], &tie);
                    (q[s2][a2], z[s2 * na + a2].clone())
                };
                q_next[s][a] = mdp.reward(s, a).mean() + mdp.gamma() * boot_mean;
                let mut dist = mdp
                    .reward(s, a)
                    .convolve(&boot_dist.affine(mdp.gamma(), 0.0)?);
                if let Some(cap) = prune_cap {
                    if dist.len() > cap {
                        let (pruned, err) = dist.prune(cap)?;
                        prune_error += err;
                        dist = pruned;
                    }
                }
                z_next[s * na + a] = dist;
            }
        }
        let delta = q_next
            .iter()
            .flatten()
            .zip(q.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        mean_deltas.push(delta);
        q = q_next;
        z = z_next;
    }

    let policy = MarkovPolicy(
        q.iter()
            .map(|row| argmax_with_ties(row, &TieBreaker::new(TieRule::LowestIndex)))
            .collect(),
    );
    let mut values = KeyedDistributionMap::new();
    for s in 0..ns {
        for a in 0..na {
            values.insert(state_action_key(s, a), z[s * na + a].clone());
        }
    }
    Ok(MeanViResult { values, policy, mean_deltas, means: q, prune_error })
}

/// One synchronous application of the risk-greedy optimality operator:
/// each entry bootstraps the successor action maximizing the risk value
/// of the current table, ties resolved by the tie breaker.
pub fn risk_bellman_step(
    mdp: &TabularMdp,
    z: &KeyedDistributionMap,
    beta: &RiskMeasure,
    tie: &mut TieBreaker,
) -> Result<KeyedDistributionMap, OperatorError> {
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let mut out = KeyedDistributionMap::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let key = state_action_key(s, a);
            if mdp.is_terminal(s) {
                out.insert(key, zero.clone());
                continue;
            }
            let s2 = mdp.transition(s, a);
            let boot = if mdp.is_terminal(s2) {
                zero.clone()
            } else {
                let betas: Vec<f64> = (0..mdp.n_actions())
                    .map(|a2| Ok(beta.evaluate(map_get(z, s2, a2)?)))
                    .collect::<Result<_, OperatorError>>()?;
                let a2 = argmax_with_ties(&betas, tie);
                map_get(z, s2, a2)?.affine(mdp.gamma(), 0.0)?
            };
            out.insert(key, mdp.reward(s, a).convolve(&boot));
        }
    }
    tie.advance();
    Ok(out)
}

pub struct RiskBellmanResult {
    pub values: KeyedDistributionMap,
    /// Greedy policy extracted from the final table.
    pub policy: MarkovPolicy,
    pub converged: bool,
    pub sweeps_run: usize,
}

/// Iterates [`risk_bellman_step`] until the risk-value table stops
/// changing (within [`TIE_EPS`]) or the sweep budget runs out; the
/// converged flag is the oscillation detector.
pub fn risk_bellman_iterate(
    mdp: &TabularMdp,
    init: &KeyedDistributionMap,
    beta: &RiskMeasure,
    max_sweeps: usize,
    rule: TieRule,
) -> Result<RiskBellmanResult, OperatorError> {
    let mut tie = TieBreaker::new(rule);
    let mut z = init.clone();
    let mut betas: Vec<f64> = beta_table(&z, beta);
    let mut converged = false;
    let mut sweeps_run = 0;
    for _ in 0..max_sweeps {
        let next = risk_bellman_step(mdp, &z, beta, &mut tie)?;
        sweeps_run += 1;
        let next_betas = beta_table(&next, beta);
        let delta = betas
            .iter()
            .zip(&next_betas)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        z = next;
        betas = next_betas;
        if delta <= TIE_EPS {
            converged = true;
            break;
        }
    }
    let mut policy = Vec::with_capacity(mdp.n_states());
    for s in 0..mdp.n_states() {
        let vals: Vec<f64> = (0..mdp.n_actions())
            .map(|a| Ok(beta.evaluate(map_get(&z, s, a)?)))
            .collect::<Result<_, OperatorError>>()?;
        policy.push(argmax_with_ties(&vals, &TieBreaker::new(TieRule::LowestIndex)));
    }
    Ok(RiskBellmanResult { values: z, policy: MarkovPolicy(policy), converged, sweeps_run })
}

fn beta_table(z: &KeyedDistributionMap, beta: &RiskMeasure) -> Vec<f64> {
    z.iter().map(|(_, d)| beta.evaluate(d)).collect()
}

// ---------------------------------------------------------------------------
// History tree
// ---------------------------------------------------------------------------

pub struct HistoryNode {
    pub history: History,
    /// Child node per action; `None` past the decision frontier.
    pub children: Vec<Option<usize>>,
    /// Whether actions are taken from this node (non-terminal, below the
    /// horizon).
    pub is_decision: bool,
}

/// The enumerated reachable history tree from a set of root states.
pub struct HistoryTree {
    pub nodes: Vec<HistoryNode>,
    pub roots: Vec<usize>,
}

impl HistoryTree {
    pub fn node(&self, idx: usize) -> &HistoryNode {
        &self.nodes[idx]
    }

    pub fn decision_nodes(&self) -> impl Iterator<Item = &HistoryNode> {
        self.nodes.iter().filter(|n| n.is_decision)
    }
}

/// Enumerates all histories reachable from the given roots within the
/// horizon, stopping with an explicit size error past the node budget.
pub fn build_history_tree(
    mdp: &TabularMdp,
    roots: &[usize],
    budget: usize,
) -> Result<HistoryTree, OperatorError> {
    let mut nodes: Vec<HistoryNode> = Vec::new();
    let mut root_ids = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    for &s in roots {
        let history = History::root(s);
        let is_decision = !mdp.is_terminal(s) && mdp.horizon() > 0;
        nodes.push(HistoryNode { history, children: vec![None; mdp.n_actions()], is_decision });
        root_ids.push(nodes.len() - 1);
        frontier.push(nodes.len() - 1);
    }
    while let Some(idx) = frontier.pop() {
        if !nodes[idx].is_decision {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let child = nodes[idx].history.child(mdp, a)?;
            let is_decision = !mdp.is_terminal(child.state()) && child.depth() < mdp.horizon();
            nodes.push(HistoryNode {
                history: child,
                children: vec![None; mdp.n_actions()],
                is_decision,
            });
            let child_idx = nodes.len() - 1;
            nodes[idx].children[a] = Some(child_idx);
            frontier.push(child_idx);
            if nodes.len() > budget {
                return Err(OperatorError::BudgetExceeded { found: nodes.len(), budget });
            }
        }
    }
    Ok(HistoryTree { nodes, roots: root_ids })
}

// ---------------------------------------------------------------------------
// History-action value maps
// ---------------------------------------------------------------------------

/// Map from history keys to per-action return distributions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryValueMap {
    entries: BTreeMap<HistoryKey, Vec<ReturnDistribution>>,
}

impl HistoryValueMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: HistoryKey, dists: Vec<ReturnDistribution>) {
        self.entries.insert(key, dists);
    }

    pub fn get(&self, key: &HistoryKey) -> Option<&[ReturnDistribution]> {
        self.entries.get(key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HistoryKey, &Vec<ReturnDistribution>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require(&self, key: &HistoryKey) -> Result<&[ReturnDistribution], OperatorError> {
        self.get(key).ok_or_else(|| OperatorError::MissingEntry(key.to_string()))
    }

    /// Supremum of per-entry p-Wasserstein distances; key sets must match.
    pub fn max_distance(&self, other: &Self, p: f64) -> Result<f64, OperatorError> {
        let mut m1 = KeyedDistributionMap::new();
        let mut m2 = KeyedDistributionMap::new();
        for (k, dists) in self.iter() {
            for (a, d) in dists.iter().enumerate() {
                m1.insert(format!("{k}|a{a}"), d.clone());
            }
        }
        for (k, dists) in other.iter() {
            for (a, d) in dists.iter().enumerate() {
                m2.insert(format!("{k}|a{a}"), d.clone());
            }
        }
        Ok(max_wasserstein(&m1, &m2, p)?)
    }

    /// L∞ distance between the risk-value tables of two maps.
    pub fn max_beta_gap(&self, other: &Self, beta: &RiskMeasure) -> Result<f64, OperatorError> {
        let mut sup = 0.0f64;
        for (k, dists) in self.iter() {
            let others = other.require(k)?;
            if others.len() != dists.len() {
                return Err(OperatorError::MissingEntry(k.to_string()));
            }
            for (d1, d2) in dists.iter().zip(others) {
                sup = sup.max((beta.evaluate(d1) - beta.evaluate(d2)).abs());
            }
        }
        for (k, _) in other.iter() {
            self.require(k)?;
        }
        Ok(sup)
    }
}

// ---------------------------------------------------------------------------
// History-relied evaluation and improvement
// ---------------------------------------------------------------------------

/// Exact history-action values of a fixed history policy over the
/// reachable tree.
pub struct HrEval {
    pub tree: HistoryTree,
    /// `Z^π(h, a)` = prefix ⊕ γ^t (R(s_t, a) ⊕ γ · suffix under π).
    pub values: HistoryValueMap,
}

impl HrEval {
    /// The objective value: `E_{s₀~ρ₀} β[Z(root(s₀), π(root))]`.
    pub fn root_beta(&self, mdp: &TabularMdp, pi: &HistoryPolicy, beta: &RiskMeasure) -> f64 {
        let mut acc = 0.0;
        for &(s, w) in mdp.initial() {
            let key = HistoryKey::singleton(s);
            if mdp.is_terminal(s) {
                continue;
            }
            let dists = self.values.get(&key).expect("root evaluated");
            acc += w * beta.evaluate(&dists[pi.action(&key)]);
        }
        acc
    }
}

/// Evaluates a history policy exactly: suffix distributions are computed
/// once per node by backward induction, then shifted behind each node's
/// prefix convolution.
pub fn hr_policy_eval(
    mdp: &TabularMdp,
    pi: &HistoryPolicy,
    budget: usize,
) -> Result<HrEval, OperatorError> {
    let roots: Vec<usize> = mdp.initial().iter().map(|&(s, _)| s).collect();
    let tree = build_history_tree(mdp, &roots, budget)?;
    let values = hr_eval_on_tree(mdp, &tree, pi)?;
    Ok(HrEval { tree, values })
}

fn hr_eval_on_tree(
    mdp: &TabularMdp,
    tree: &HistoryTree,
    pi: &HistoryPolicy,
) -> Result<HistoryValueMap, OperatorError> {
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    // suffix[idx][a]: distribution of the undiscounted-from-here return
    // under pi, for decision nodes
    let mut suffix: Vec<Vec<ReturnDistribution>> = vec![Vec::new(); tree.nodes.len()];
    // children have larger indices, so a reverse pass is a post-order
    for idx in (0..tree.nodes.len()).rev() {
        if !tree.nodes[idx].is_decision {
            continue;
        }
        let node = &tree.nodes[idx];
        let mut per_action = Vec::with_capacity(mdp.n_actions());
        for (a, child_slot) in node.children.iter().enumerate() {
            let child_idx = child_slot.expect("decision node has children");
            let child = &tree.nodes[child_idx];
            let boot = if child.is_decision {
                let a2 = pi.action(&child.history.key());
                suffix[child_idx][a2].affine(mdp.gamma(), 0.0)?
            } else {
                zero.clone()
            };
            per_action.push(mdp.reward(node.history.state(), a).convolve(&boot));
        }
        suffix[idx] = per_action;
    }

    let mut values = HistoryValueMap::new();
    for (idx, node) in tree.nodes.iter().enumerate() {
        if !node.is_decision {
            continue;
        }
        let scale = mdp.gamma().powi(node.history.depth() as i32);
        let mut dists = Vec::with_capacity(mdp.n_actions());
        for future in &suffix[idx] {
            let shifted = future.affine(scale, 0.0)?;
            dists.push(node.history.prefix_dist().convolve(&shifted));
        }
        values.insert(node.history.key(), dists);
    }
    Ok(values)
}

/// Greedy improvement over histories: per history, the action maximizing
/// the evaluated risk value. A tied incumbent action is kept (so policy
/// iteration terminates); remaining ties fall to the tie breaker.
pub fn hr_greedy_improve(
    eval: &HrEval,
    beta: &RiskMeasure,
    tie: &TieBreaker,
    incumbent: Option<&HistoryPolicy>,
) -> HistoryPolicy {
    let mut choices = BTreeMap::new();
    for node in eval.tree.decision_nodes() {
        let key = node.history.key();
        let dists = eval.values.get(&key).expect("evaluated");
        let betas: Vec<f64> = dists.iter().map(|d| beta.evaluate(d)).collect();
        let best = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..betas.len()).filter(|&a| betas[a] >= best - TIE_EPS).collect();
        let chosen = match incumbent {
            Some(inc) if tied.contains(&inc.action(&key)) => inc.action(&key),
            _ => tie.pick(&tied),
        };
        choices.insert(key, chosen);
    }
    HistoryPolicy {
        choices,
        default_action: incumbent.map_or(0, |p| p.default_action),
    }
}

pub struct HrPiResult {
    pub policy: HistoryPolicy,
    pub eval: HrEval,
    /// Objective value after each evaluation pass; non-decreasing.
    pub root_betas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Policy iteration on histories: alternate exact evaluation and greedy
/// improvement until the policy is stable on the reachable tree.
pub fn hr_policy_iteration(
    mdp: &TabularMdp,
    beta: &RiskMeasure,
    init: HistoryPolicy,
    max_iters: usize,
    budget: usize,
) -> Result<HrPiResult, OperatorError> {
    let mut policy = init;
    let mut root_betas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut eval = hr_policy_eval(mdp, &policy, budget)?;
    loop {
        root_betas.push(eval.root_beta(mdp, &policy, beta));
        iterations += 1;
        let tie = TieBreaker::new(TieRule::LowestIndex);
        let improved = hr_greedy_improve(&eval, beta, &tie, Some(&policy));
        let stable = eval
            .tree
            .decision_nodes()
            .all(|n| improved.action(&n.history.key()) == policy.action(&n.history.key()));
        if stable {
            converged = true;
            break;
        }
        policy = improved;
        eval = hr_policy_eval(mdp, &policy, budget)?;
        if iterations >= max_iters {
            break;
        }
    }
    Ok(HrPiResult { policy, eval, root_betas, iterations, converged })
}

// ---------------------------------------------------------------------------
// Exact trajectory distributions and the brute-force oracle
// ---------------------------------------------------------------------------

/// A policy argument accepted by [`trajectory_return_dist`].
pub enum PolicySpec<'a> {
    Markov(&'a MarkovPolicy),
    History(&'a HistoryPolicy),
}

impl PolicySpec<'_> {
    fn action(&self, h: &History) -> usize {
        match self {
            PolicySpec::Markov(p) => p.action(h.state()),
            PolicySpec::History(p) => p.action(&h.key()),
        }
    }
}

/// Exact distribution of the discounted episode return from the initial
/// state distribution under a deterministic policy. With deterministic
/// transitions the trajectory is a single action path per start state,
/// so the distribution is a convolution chain (mixed over ρ₀).
pub fn trajectory_return_dist(
    mdp: &TabularMdp,
    policy: &PolicySpec<'_>,
) -> Result<ReturnDistribution, OperatorError> {
    fn suffix(
        mdp: &TabularMdp,
        policy: &PolicySpec<'_>,
        h: &History,
    ) -> Result<ReturnDistribution, OperatorError> {
        if mdp.is_terminal(h.state()) || h.depth() >= mdp.horizon() {
            return Ok(ReturnDistribution::dirac(0.0).expect("finite"));
        }
        let a = policy.action(h);
        if a >= mdp.n_actions() {
            return Err(OperatorError::Env(EnvError::InvalidAction {
                action: a,
                n_actions: mdp.n_actions(),
            }));
        }
        let child = h.child(mdp, a)?;
        let future = suffix(mdp, policy, &child)?.affine(mdp.gamma(), 0.0)?;
        Ok(mdp.reward(h.state(), a).convolve(&future))
    }

    let parts: Vec<(f64, ReturnDistribution)> = mdp
        .initial()
        .iter()
        .map(|&(s, w)| Ok((w, suffix(mdp, policy, &History::root(s))?)))
        .collect::<Result<_, OperatorError>>()?;
    let refs: Vec<(f64, &ReturnDistribution)> = parts.iter().map(|(w, d)| (*w, d)).collect();
    Ok(ReturnDistribution::mix(&refs)?)
}

/// Enumerates every trajectory-relevant deterministic history policy
/// (equivalently, every action path per start state — off-path choices
/// cannot affect the objective) and returns a risk-maximizing policy with
/// its objective value `E_{ρ₀} β`.
pub fn brute_force_optimal(
    mdp: &TabularMdp,
    beta: &RiskMeasure,
    budget: usize,
) -> Result<(HistoryPolicy, f64), OperatorError> {
    struct Search<'a> {
        mdp: &'a TabularMdp,
        beta: &'a RiskMeasure,
        budget: usize,
        visited: usize,
    }

    impl Search<'_> {
        /// Returns the best (beta, suffix distribution, action path).
        fn best(
            &mut self,
            h: &History,
        ) -> Result<(f64, ReturnDistribution, Vec<usize>), OperatorError> {
            if self.mdp.is_terminal(h.state()) || h.depth() >= self.mdp.horizon() {
                self.visited += 1;
                if self.visited > self.budget {
                    return Err(OperatorError::EnumerationBudget {
                        found: self.visited,
                        budget: self.budget,
                    });
                }
                let zero = ReturnDistribution::dirac(0.0).expect("finite");
                return Ok((self.beta.evaluate(&zero), zero, Vec::new()));
            }
            let mut best: Option<(f64, ReturnDistribution, Vec<usize>)> = None;
            for a in 0..self.mdp.n_actions() {
                let child = h.child(self.mdp, a)?;
                let (_, child_dist, child_path) = self.best(&child)?;
                let dist = self
                    .mdp
                    .reward(h.state(), a)
                    .convolve(&child_dist.affine(self.mdp.gamma(), 0.0)?);
                // score the full-trajectory distribution seen from the root
                let scale = self.mdp.gamma().powi(h.depth() as i32);
                let whole = h.prefix_dist().convolve(&dist.affine(scale, 0.0)?);
                let value = self.beta.evaluate(&whole);
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => value > *b + TIE_EPS,
                };
                if better {
                    let mut path = vec![a];
                    path.extend(child_path);
                    best = Some((value, dist, path));
                }
            }
            Ok(best.expect("at least one action"))
        }
    }

    let mut search = Search { mdp, beta, budget, visited: 0 };
    let mut choices = BTreeMap::new();
    let mut objective = 0.0;
    for &(s, w) in mdp.initial() {
        let root = History::root(s);
        if mdp.is_terminal(s) {
            continue;
        }
        let (value, _, path) = search.best(&root)?;
        objective += w * value;
        let mut h = root;
        for &a in &path {
            choices.insert(h.key(), a);
            h = h.child(mdp, a)?;
        }
    }
    Ok((HistoryPolicy { choices, default_action: 0 }, objective))
}

// ---------------------------------------------------------------------------
// One-step history operators on arbitrary value maps (probe machinery)
// ---------------------------------------------------------------------------

fn accumulated_reward(
    mdp: &TabularMdp,
    h: &History,
    action: usize,
) -> Result<ReturnDistribution, OperatorError> {
    let scale = mdp.gamma().powi(h.depth() as i32);
    Ok(h.prefix_dist()
        .convolve(&mdp.reward(h.state(), action).affine(scale, 0.0)?))
}

/// One application of the history policy-evaluation operator to an
/// arbitrary value map: each `(h_t, a)` entry becomes the exact
/// accumulated reward through `t` plus `γ^{t+1}` times the map's
/// singleton-history value of the successor under the policy's action at
/// `h_{t+1}`.
pub fn hr_apply_policy(
    mdp: &TabularMdp,
    z: &HistoryValueMap,
    pi: &HistoryPolicy,
) -> Result<HistoryValueMap, OperatorError> {
    hr_apply_with(mdp, z, |child_key, _composites| pi.action(child_key))
}

/// One application of the history optimality operator: the successor
/// action maximizes the risk value of the composite
/// `R_{0:t} ⊕ γ^{t+1} Z({s'}, ·)` (on history-consistent maps this is the
/// greedy action over `Z(h_{t+1}, ·)`).
pub fn hr_apply_optimal(
    mdp: &TabularMdp,
    z: &HistoryValueMap,
    beta: &RiskMeasure,
    tie: &mut TieBreaker,
) -> Result<HistoryValueMap, OperatorError> {
    let out = hr_apply_with(mdp, z, |_child_key, composites| {
        let values: Vec<f64> = composites.iter().map(|d| beta.evaluate(d)).collect();
        argmax_with_ties(&values, tie)
    })?;
    tie.advance();
    Ok(out)
}

fn hr_apply_with(
    mdp: &TabularMdp,
    z: &HistoryValueMap,
    mut choose: impl FnMut(&HistoryKey, &[ReturnDistribution]) -> usize,
) -> Result<HistoryValueMap, OperatorError> {
    let mut out = HistoryValueMap::new();
    for (key, dists) in z.iter() {
        let h = History::replay(mdp, key)?;
        if mdp.is_terminal(h.state()) || h.depth() >= mdp.horizon() {
            out.insert(key.clone(), dists.clone());
            continue;
        }
        let mut new_dists = Vec::with_capacity(mdp.n_actions());
        for a in 0..mdp.n_actions() {
            let acc = accumulated_reward(mdp, &h, a)?;
            let s2 = mdp.transition(h.state(), a);
            let boundary = mdp.is_terminal(s2) || h.depth() + 1 >= mdp.horizon();
            if boundary {
                new_dists.push(acc);
                continue;
            }
            let singleton = HistoryKey::singleton(s2);
            let boots = z.require(&singleton)?;
            let scale = mdp.gamma().powi(h.depth() as i32 + 1);
            let composites: Vec<ReturnDistribution> = boots
                .iter()
                .map(|b| Ok(acc.convolve(&b.affine(scale, 0.0)?)))
                .collect::<Result<_, OperatorError>>()?;
            let child_key = {
                let mut k = key.clone();
                k.actions.push(a);
                k
            };
            let a2 = choose(&child_key, &composites);
            new_dists.push(composites[a2].clone());
        }
        out.insert(key.clone(), new_dists);
    }
    Ok(out)
}

/// Both sides of the policy-evaluation contraction inequality:
/// `(d̄_p(T^π Z₁, T^π Z₂), γ · d̄_p(Z₁, Z₂))`.
pub fn contraction_probe(
    mdp: &TabularMdp,
    pi: &HistoryPolicy,
    z1: &HistoryValueMap,
    z2: &HistoryValueMap,
    p: f64,
) -> Result<(f64, f64), OperatorError> {
    let t1 = hr_apply_policy(mdp, z1, pi)?;
    let t2 = hr_apply_policy(mdp, z2, pi)?;
    let lhs = t1.max_distance(&t2, p)?;
    let rhs = mdp.gamma() * z1.max_distance(z2, p)?;
    Ok((lhs, rhs))
}

/// Both sides of the optimality-operator nonexpansion inequality in risk
/// values: `(‖β∘T* Z₁ − β∘T* Z₂‖∞, ‖β∘Z₁ − β∘Z₂‖∞)`.
pub fn nonexpansion_probe(
    mdp: &TabularMdp,
    z1: &HistoryValueMap,
    z2: &HistoryValueMap,
    beta: &RiskMeasure,
) -> Result<(f64, f64), OperatorError> {
    let mut tie1 = TieBreaker::new(TieRule::LowestIndex);
    let mut tie2 = TieBreaker::new(TieRule::LowestIndex);
    let t1 = hr_apply_optimal(mdp, z1, beta, &mut tie1)?;
    let t2 = hr_apply_optimal(mdp, z2, beta, &mut tie2)?;
    let lhs = t1.max_beta_gap(&t2, beta)?;
    let rhs = z1.max_beta_gap(z2, beta)?;
    Ok((lhs, rhs))
}

// ---------------------------------------------------------------------------
// Tied-update divergence witness
// ---------------------------------------------------------------------------

/// The construction showing the Markovian risk-greedy operator is not a
/// nonexpansion: a two-step MDP whose middle state has two actions tied
/// under CVaR(0.1) but with different distributions. Starting from equal
/// value tables, resolving the tie differently across two updates pulls
/// the updated risk values apart by |79 − (−20)| = 99.
pub struct TiedUpdateWitness {
    pub mdp: TabularMdp,
    pub z: KeyedDistributionMap,
    pub beta: RiskMeasure,
}

pub fn tied_update_witness() -> TiedUpdateWitness {
    let risky = ReturnDistribution::from_atoms([(100.0, 0.9), (-10.0, 0.1)]).expect("valid");
    let minus10 = ReturnDistribution::dirac(-10.0).expect("finite");
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let mdp = TabularMdp::new(
        3,
        2,
        vec![1, 1, 2, 2, 2, 2],
        vec![
            risky.clone(),
            risky.clone(),
            risky.clone(),
            minus10.clone(),
            zero.clone(),
            zero.clone(),
        ],
        vec![false, false, true],
        1.0,
        2,
        vec![(0, 1.0)],
    )
    .expect("fixed construction");

    let mut z = KeyedDistributionMap::new();
    let z00 = ReturnDistribution::from_atoms([(90.0, 0.9), (-20.0, 0.1)]).expect("valid");
    z.insert(state_action_key(0, 0), z00.clone());
    z.insert(state_action_key(0, 1), z00);
    z.insert(state_action_key(1, 0), risky);
    z.insert(state_action_key(1, 1), minus10);
    z.insert(state_action_key(2, 0), zero.clone());
    z.insert(state_action_key(2, 1), zero);

    TiedUpdateWitness { mdp, z, beta: RiskMeasure::cvar(0.1).expect("valid level") }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::three_state_mdp;

    fn cvar01() -> RiskMeasure {
        RiskMeasure::cvar(0.1).unwrap()
    }

    #[test]
    fn markov_eval_reproduces_worked_values() {
        let mdp = three_state_mdp();
        // always-safe policy: the middle state's safe entry is a point mass
        let eval = markov_policy_eval(&mdp, &MarkovPolicy(vec![1, 1, 0]), None).unwrap();
        assert_eq!(
            eval.values.get(&state_action_key(1, 1)).unwrap(),
            &ReturnDistribution::dirac(-5.0).unwrap()
        );

        // risky continuation: exact three-atom convolution at the root
        let eval = markov_policy_eval(&mdp, &MarkovPolicy(vec![0, 0, 0]), None).unwrap();
        let z00 = eval.values.get(&state_action_key(0, 0)).unwrap();
        let expect =
            ReturnDistribution::from_atoms([(-20.0, 0.01), (90.0, 0.18), (200.0, 0.81)]).unwrap();
        assert_eq!(z00.len(), 3);
        for (a, b) in z00.atoms().iter().zip(expect.atoms()) {
            assert!((a.value - b.value).abs() < 1e-12);
            assert!((a.prob - b.prob).abs() < 1e-12);
        }
        assert_eq!(eval.prune_error, 0.0);
    }

    #[test]
    fn terminal_only_mdp_evaluates_to_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mdp = crate::envs::random_mdp(&mut rng, 1, 2, 2, 0.9, 3);
        let eval = markov_policy_eval(&mdp, &MarkovPolicy(vec![0]), None).unwrap();
        for (_, d) in eval.values.iter() {
            assert_eq!(d, &ReturnDistribution::dirac(0.0).unwrap());
        }
    }

    #[test]
    fn mean_value_iteration_three_state() {
        let mdp = three_state_mdp();
        let res = mean_value_iteration(&mdp, 4, None).unwrap();
        // expectation picks the risky action everywhere: 89 > -5, 178 > 84
        assert_eq!(res.policy, MarkovPolicy(vec![0, 0, 0]));
        assert!((res.means[0][0] - 178.0).abs() < 1e-12);
        assert!((res.means[0][1] - 84.0).abs() < 1e-12);
        assert!((res.means[1][0] - 89.0).abs() < 1e-12);
        // horizon-2 episodic values settle after two sweeps
        assert!(res.mean_deltas[2] < 1e-12);
    }

    #[test]
    fn risk_bellman_step_matches_worked_table() {
        let mdp = three_state_mdp();
        let beta = cvar01();
        // initial estimate: zero at the first state, exact at the middle
        let mut z = uniform_state_action_map(&mdp, &ReturnDistribution::dirac(0.0).unwrap());
        z.insert(state_action_key(1, 0), mdp.reward(1, 0).clone());
        z.insert(state_action_key(1, 1), mdp.reward(1, 1).clone());

        let mut tie = TieBreaker::new(TieRule::LowestIndex);
        let out = risk_bellman_step(&mdp, &z, &beta, &mut tie).unwrap();

        let b = |s, a| beta.evaluate(out.get(&state_action_key(s, a)).unwrap());
        assert!((b(0, 0) - -15.0).abs() < 1e-12);
        assert!((b(0, 1) - -10.0).abs() < 1e-12);
        assert!((b(1, 0) - -10.0).abs() < 1e-12);
        assert!((b(1, 1) - -5.0).abs() < 1e-12);
    }

    #[test]
    fn tied_updates_pull_equal_tables_apart() {
        let w = tied_update_witness();
        let mut tie = TieBreaker::new(TieRule::Alternating);
        let z1 = risk_bellman_step(&w.mdp, &w.z, &w.beta, &mut tie).unwrap();
        let z2 = risk_bellman_step(&w.mdp, &w.z, &w.beta, &mut tie).unwrap();
        let b1 = w.beta.evaluate(z1.get(&state_action_key(0, 0)).unwrap());
        let b2 = w.beta.evaluate(z2.get(&state_action_key(0, 0)).unwrap());
        assert!((b1 - 79.0).abs() < 1e-9);
        assert!((b2 - -20.0).abs() < 1e-9);
    }

    #[test]
    fn hr_eval_matches_trajectory_distributions() {
        let mdp = three_state_mdp();
        let beta = cvar01();

        // policy: risky at the root history, risky after it
        let all_risky = HistoryPolicy::constant(0);
        let eval = hr_policy_eval(&mdp, &all_risky, 10_000).unwrap();
        let root = eval.root_beta(&mdp, &all_risky, &beta);
        assert!((root - 79.0).abs() < 1e-9);

        // depth-horizon histories carry no bootstrap: prefix plus final reward
        let key = HistoryKey { start: 0, actions: vec![1] };
        let dists = eval.values.get(&key).unwrap();
        assert_eq!(dists[1], ReturnDistribution::dirac(-10.0).unwrap());
    }

    #[test]
    fn hr_policy_iteration_finds_the_optimum() {
        let mdp = three_state_mdp();
        let beta = cvar01();
        let res = hr_policy_iteration(&mdp, &beta, HistoryPolicy::constant(1), 16, 10_000).unwrap();
        assert!(res.converged);
        let root_key = HistoryKey::singleton(0);
        assert_eq!(res.policy.action(&root_key), 0);
        assert_eq!(res.policy.action(&HistoryKey { start: 0, actions: vec![0] }), 0);
        let last = *res.root_betas.last().unwrap();
        assert!((last - 79.0).abs() < 1e-9);
        // monotone improvement along the iteration
        for w in res.root_betas.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn brute_force_agrees_on_the_fixture() {
        let mdp = three_state_mdp();
        let (policy, value) = brute_force_optimal(&mdp, &cvar01(), 1_000_000).unwrap();
        assert!((value - 79.0).abs() < 1e-9);
        assert_eq!(policy.action(&HistoryKey::singleton(0)), 0);

        let (_, mean_value) = brute_force_optimal(&mdp, &RiskMeasure::Mean, 1_000_000).unwrap();
        assert!((mean_value - 178.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_distributions_worked_examples() {
        let mdp = three_state_mdp();
        let beta = cvar01();

        let risky_then_safe = MarkovPolicy(vec![0, 1, 0]);
        let d = trajectory_return_dist(&mdp, &PolicySpec::Markov(&risky_then_safe)).unwrap();
        let expect = ReturnDistribution::from_atoms([(-15.0, 0.1), (95.0, 0.9)]).unwrap();
        assert_eq!(d.len(), 2);
        for (a, b) in d.atoms().iter().zip(expect.atoms()) {
            assert!((a.value - b.value).abs() < 1e-12);
            assert!((a.prob - b.prob).abs() < 1e-12);
        }
        assert!((beta.evaluate(&d) - -15.0).abs() < 1e-12);

        let all_safe = MarkovPolicy(vec![1, 1, 0]);
        let d = trajectory_return_dist(&mdp, &PolicySpec::Markov(&all_safe)).unwrap();
        assert_eq!(d, ReturnDistribution::dirac(-10.0).unwrap());
    }

    #[test]
    fn probe_operators_are_exact_on_equal_inputs() {
        let mdp = three_state_mdp();
        let tree = build_history_tree(&mdp, &[0, 1, 2], 1000).unwrap();
        let mut z = HistoryValueMap::new();
        for node in &tree.nodes {
            if !node.is_decision {
                continue;
            }
            z.insert(
                node.history.key(),
                vec![ReturnDistribution::dirac(1.0).unwrap(); mdp.n_actions()],
            );
        }
        let pi = HistoryPolicy::constant(0);
        let (lhs, rhs) = contraction_probe(&mdp, &pi, &z, &z, 1.0).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
        let (lhs, rhs) = nonexpansion_probe(&mdp, &z, &z, &cvar01()).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
    }
}
