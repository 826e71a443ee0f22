//! Flat dotted-key experiment configuration.
//!
//! The format is `key = value` lines with `#` comments. Parsing validates
//! everything it can and reports **all** problems at once, each with its
//! line number; unknown keys are rejected.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use rsrl_core::agents::{AgentConfig, AgentKind, TrainConfig};
use rsrl_core::envs::{
    risky_grid, risky_mountain_car, random_mdp, three_state_mdp, GridActionSet, GridLayout,
    TabularMdp,
};
use rsrl_core::risk::RiskMeasure;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Environment selection plus per-environment parameters.
#[derive(Debug, Clone)]
pub enum EnvConfig {
    ThreeState,
    Grid {
        layout: GridLayout,
        actions: GridActionSet,
        gamma: f64,
        horizon: usize,
    },
    MountainCar {
        c: f64,
        position_bins: usize,
        velocity_bins: usize,
        actions: Vec<f64>,
        gamma: f64,
        horizon: usize,
    },
    Random {
        n_states: usize,
        n_actions: usize,
        max_reward_atoms: usize,
        gamma: f64,
        horizon: usize,
        seed: u64,
    },
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::ThreeState => "three_state",
            EnvConfig::Grid { .. } => "grid",
            EnvConfig::MountainCar { .. } => "mountain_car",
            EnvConfig::Random { .. } => "random",
        }
    }
}

/// Exact-DP knobs.
#[derive(Debug, Clone)]
pub struct ExactConfig {
    pub budget: usize,
    pub max_sweeps: usize,
    pub prune_cap: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub measure: RiskMeasure,
    pub env: EnvConfig,
    pub agent_kind: Option<AgentKind>,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub exact: ExactConfig,
    pub output_dir: String,
    /// Verbatim config text; its digest is the config hash.
    pub raw_text: String,
}

impl ExperimentConfig {
    /// SHA-256 of the raw config text.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.raw_text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..8].to_string()
    }

    pub fn run_id(&self, seed: u64) -> String {
        let agent = self.agent_kind.map_or("none", |k| k.name());
        format!(
            "{}-{}-{}-s{}-{}",
            self.env.name(),
            agent,
            self.measure.name().replace(':', "_"),
            seed,
            self.short_hash()
        )
    }

    /// Instantiates the tabular MDP this config describes.
    pub fn build_mdp(&self) -> Result<TabularMdp, ConfigError> {
        let err = |e: String| ConfigError::Invalid(vec![e]);
        match &self.env {
            EnvConfig::ThreeState => Ok(three_state_mdp()),
            EnvConfig::Grid { layout, actions, gamma, horizon } => {
                risky_grid(layout, *gamma, *horizon, *actions).map_err(|e| err(e.to_string()))
            }
            EnvConfig::MountainCar { c, position_bins, velocity_bins, actions, gamma, horizon } => {
                risky_mountain_car(*c, *position_bins, *velocity_bins, actions, *gamma, *horizon)
                    .map_err(|e| err(e.to_string()))
            }
            EnvConfig::Random { n_states, n_actions, max_reward_atoms, gamma, horizon, seed } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                Ok(random_mdp(&mut rng, *n_states, *n_actions, *max_reward_atoms, *gamma, *horizon))
            }
        }
    }
}

struct Reader {
    entries: BTreeMap<String, (usize, String)>,
    used: std::collections::BTreeSet<String>,
    errors: Vec<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.used.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.raw(key).map_or_else(|| default.to_string(), |(_, v)| v)
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T, what: &str) -> T {
        match self.raw(key) {
            None => default,
            Some((line, v)) => match v.parse::<T>() {
                Ok(x) => x,
                Err(_) => {
                    self.errors.push(format!("line {line}: {key} expects {what}, got '{v}'"));
                    default
                }
            },
        }
    }

    fn f64_in(&mut self, key: &str, default: f64, lo: f64, hi: f64) -> f64 {
        let v = self.parse_or(key, default, "a number");
        if !(lo..=hi).contains(&v) {
            if let Some((line, _)) = self.entries.get(key) {
                self.errors
                    .push(format!("line {line}: {key} must lie in [{lo}, {hi}], got {v}"));
            }
            return default;
        }
        v
    }

    fn error_at(&mut self, key: &str, msg: String) {
        let line = self.entries.get(key).map(|(l, _)| *l);
        match line {
            Some(l) => self.errors.push(format!("line {l}: {msg}")),
            None => self.errors.push(msg),
        }
    }
}

/// Parses and fully validates a config. Defaults cover everything except
/// `measure`, `env.name`, and `seed`, which must be explicit.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut errors: Vec<String> = Vec::new();
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.split_once('#') {
            Some((before, _)) => before,
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => {
                let key = key.trim().to_string();
                let value = value.trim().to_string();
                if key.is_empty() {
                    errors.push(format!("line {line_no}: empty key"));
                } else if let Some((prev, _)) = entries.get(&key) {
                    errors.push(format!("line {line_no}: duplicate key '{key}' (first on line {prev})"));
                } else {
                    entries.insert(key, (line_no, value));
                }
            }
            None => errors.push(format!("line {line_no}: expected 'key = value', got '{line}'")),
        }
    }

    let mut r = Reader { entries, used: Default::default(), errors };

    // measure
    let measure_spec = r.string("measure", "");
    let measure = if measure_spec.is_empty() {
        r.error_at("measure", "missing required key 'measure'".into());
        RiskMeasure::Mean
    } else {
        match RiskMeasure::parse(&measure_spec) {
            Ok(m) => m,
            Err(e) => {
                r.error_at("measure", format!("measure: {e}"));
                RiskMeasure::Mean
            }
        }
    };

    // seed
    let seed = match r.raw("seed") {
        Some((line, v)) => v.parse::<u64>().unwrap_or_else(|_| {
            r.errors.push(format!("line {line}: seed expects an unsigned integer, got '{v}'"));
            0
        }),
        None => {
            r.errors.push("missing required key 'seed' (runs take no implicit entropy)".into());
            0
        }
    };

    // environment
    let env_name = r.string("env.name", "");
    let env = match env_name.as_str() {
        "three_state" => EnvConfig::ThreeState,
        "grid" => {
            let gamma = r.f64_in("env.gamma", 0.99, 1e-9, 1.0);
            let horizon = r.parse_or("env.horizon", 6usize, "a positive integer");
            let actions = match r.string("env.grid.actions", "right_down").as_str() {
                "right_down" => GridActionSet::RightDown,
                "cardinal" => GridActionSet::Cardinal,
                other => {
                    r.error_at(
                        "env.grid.actions",
                        format!("env.grid.actions must be right_down or cardinal, got '{other}'"),
                    );
                    GridActionSet::RightDown
                }
            };
            let mut layout = match (r.raw("env.grid.layout"), r.raw("env.grid.layout_file")) {
                (Some((line, inline)), None) => {
                    match GridLayout::parse(&inline.replace('|', "\n")) {
                        Ok(l) => l,
                        Err(e) => {
                            r.errors.push(format!("line {line}: env.grid.layout: {e}"));
                            GridLayout::default_map()
                        }
                    }
                }
                (None, Some((line, path))) => match std::fs::read_to_string(&path) {
                    Ok(text) => match GridLayout::parse(&text) {
                        Ok(l) => l,
                        Err(e) => {
                            r.errors.push(format!("line {line}: {path}: {e}"));
                            GridLayout::default_map()
                        }
                    },
                    Err(e) => {
                        r.errors.push(format!("line {line}: cannot read '{path}': {e}"));
                        GridLayout::default_map()
                    }
                },
                (Some(_), Some((line, _))) => {
                    r.errors.push(format!(
                        "line {line}: set either env.grid.layout or env.grid.layout_file, not both"
                    ));
                    GridLayout::default_map()
                }
                (None, None) => GridLayout::default_map(),
            };
            layout.bonus_prob = r.f64_in("env.grid.bonus_prob", layout.bonus_prob, 0.0, 1.0);
            layout.bonus_value = r.parse_or("env.grid.bonus_value", layout.bonus_value, "a number");
            layout.blue_value = r.parse_or("env.grid.blue_value", layout.blue_value, "a number");
            layout.orange_penalty =
                r.parse_or("env.grid.orange_penalty", layout.orange_penalty, "a number");
            layout.step_penalty =
                r.parse_or("env.grid.step_penalty", layout.step_penalty, "a number");
            EnvConfig::Grid { layout, actions, gamma, horizon }
        }
        "mountain_car" => {
            let gamma = r.f64_in("env.gamma", 0.99, 1e-9, 1.0);
            let horizon = r.parse_or("env.horizon", 200usize, "a positive integer");
            let c = r.f64_in("env.mc.c", 0.25, 0.0, 1.0);
            let position_bins = r.parse_or("env.mc.position_bins", 128usize, "a positive integer");
            let velocity_bins = r.parse_or("env.mc.velocity_bins", 128usize, "a positive integer");
            let actions_text = r.string("env.mc.actions", "-1,-0.5,0,0.5,1");
            let mut actions = Vec::new();
            for part in actions_text.split(',') {
                match part.trim().parse::<f64>() {
                    Ok(a) => actions.push(a),
                    Err(_) => r.error_at(
                        "env.mc.actions",
                        format!("env.mc.actions: '{part}' is not a number"),
                    ),
                }
            }
            EnvConfig::MountainCar { c, position_bins, velocity_bins, actions, gamma, horizon }
        }
        "random" => {
            let gamma = r.f64_in("env.gamma", 0.9, 1e-9, 1.0);
            let horizon = r.parse_or("env.horizon", 4usize, "a positive integer");
            EnvConfig::Random {
                n_states: r.parse_or("env.random.n_states", 4usize, "a positive integer"),
                n_actions: r.parse_or("env.random.n_actions", 2usize, "a positive integer"),
                max_reward_atoms: r.parse_or("env.random.max_reward_atoms", 3usize, "a positive integer"),
                gamma,
                horizon,
                seed: r.parse_or("env.random.seed", 0u64, "an unsigned integer"),
            }
        }
        "" => {
            r.errors.push("missing required key 'env.name'".into());
            EnvConfig::ThreeState
        }
        other => {
            r.error_at(
                "env.name",
                format!("env.name must be one of three_state, grid, mountain_car, random; got '{other}'"),
            );
            EnvConfig::ThreeState
        }
    };

    // agent
    let agent_kind = match r.string("agent.kind", "").as_str() {
        "" => None,
        s => match AgentKind::parse(s) {
            Some(k) => Some(k),
            None => {
                r.error_at("agent.kind", format!("agent.kind must be tql or markov_qr, got '{s}'"));
                None
            }
        },
    };
    let defaults = AgentConfig::default();
    let env_gamma = match &env {
        EnvConfig::ThreeState => 1.0,
        EnvConfig::Grid { gamma, .. }
        | EnvConfig::MountainCar { gamma, .. }
        | EnvConfig::Random { gamma, .. } => *gamma,
    };
    let agent = AgentConfig {
        n_quantiles: r.parse_or("agent.n_quantiles", defaults.n_quantiles, "a positive integer"),
        learning_rate: r.parse_or("agent.learning_rate", defaults.learning_rate, "a number"),
        gamma: env_gamma,
        epsilon_init: r.f64_in("agent.epsilon_init", defaults.epsilon_init, 0.0, 1.0),
        epsilon_final: r.f64_in("agent.epsilon_final", defaults.epsilon_final, 0.0, 1.0),
        epsilon_decay_steps: r.parse_or(
            "agent.epsilon_decay_steps",
            defaults.epsilon_decay_steps,
            "a positive integer",
        ),
        buffer_size: r.parse_or("agent.buffer_size", defaults.buffer_size, "a positive integer"),
        batch_size: r.parse_or("agent.batch_size", defaults.batch_size, "a positive integer"),
        start_timesteps: r.parse_or(
            "agent.start_timesteps",
            defaults.start_timesteps,
            "a non-negative integer",
        ),
        target_update_frequency: r.parse_or(
            "agent.target_update_frequency",
            defaults.target_update_frequency,
            "a positive integer",
        ),
        history_window: r.parse_or(
            "agent.history_window",
            defaults.history_window,
            "a non-negative integer",
        ),
        huber_kappa: r.parse_or("agent.huber_kappa", defaults.huber_kappa, "a number"),
    };
    if let Err(e) = agent.validate() {
        r.errors.push(format!("agent config: {e}"));
    }

    // training loop
    let train = TrainConfig {
        total_steps: r.parse_or("train.total_steps", 200_000usize, "a positive integer"),
        eval_every: r.parse_or("train.eval_every", 20_000usize, "a positive integer"),
        eval_episodes: r.parse_or("train.eval_episodes", 1_000usize, "a positive integer"),
    };
    if train.total_steps == 0 || train.eval_every == 0 || train.eval_episodes == 0 {
        r.errors.push("train.* values must be positive".into());
    }

    let exact = ExactConfig {
        budget: r.parse_or("exact.budget", 1_000_000usize, "a positive integer"),
        max_sweeps: r.parse_or("exact.max_sweeps", 64usize, "a positive integer"),
        prune_cap: r.parse_or("exact.prune_cap", 64usize, "an integer >= 2"),
    };
    if exact.prune_cap < 2 {
        r.error_at("exact.prune_cap", "exact.prune_cap must be at least 2".into());
    }

    let output_dir = r.string("output.dir", "runs");

    // anything not consumed is unknown
    let unknown: Vec<String> = r
        .entries
        .iter()
        .filter(|(k, _)| !r.used.contains(*k))
        .map(|(k, (line, _))| format!("line {line}: unknown key '{k}'"))
        .collect();
    r.errors.extend(unknown);

    if !r.errors.is_empty() {
        return Err(ConfigError::Invalid(r.errors));
    }

    Ok(ExperimentConfig {
        seed,
        measure,
        env,
        agent_kind,
        agent,
        train,
        exact,
        output_dir,
        raw_text: text.to_string(),
    })
}

/// Reads and parses a config file.
pub fn load_config(path: &str) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_string(),
        source,
    })?;
    parse_config(&text)
}
