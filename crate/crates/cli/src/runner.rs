//! Experiment runners: exact dynamic programming, single training runs,
//! and multi-seed sweeps, each writing its CSV artifacts into a
//! per-run directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use rsrl_core::agents::{train, EvalRecord, TrainResult};
use rsrl_core::envs::TabularMdp;
use rsrl_core::operators::{
    brute_force_optimal, hr_policy_iteration, mean_value_iteration, risk_bellman_iterate,
    trajectory_return_dist, uniform_state_action_map, History, HistoryPolicy, MarkovPolicy,
    OperatorError, PolicySpec, TieRule,
};
use rsrl_core::dist::ReturnDistribution;

use crate::config::ExperimentConfig;
use crate::report::{
    exact_summary_csv, histogram_csv, learning_curve_csv, policy_log_csv, sweep_csv, ExactRow,
};

/// Output root: the `RSRL_OUT` environment variable, or the working
/// directory.
pub fn output_root() -> PathBuf {
    std::env::var_os("RSRL_OUT").map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn write_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.snapshot.conf"), &cfg.raw_text)?;
    Ok(())
}

/// Greedy action sequence of a policy from the first initial state,
/// rendered with the environment's action labels.
fn fingerprint(mdp: &TabularMdp, policy: &PolicySpec<'_>) -> String {
    let mut h = History::root(mdp.initial()[0].0);
    let mut labels = Vec::new();
    while !mdp.is_terminal(h.state()) && h.depth() < mdp.horizon() {
        let a = match policy {
            PolicySpec::Markov(p) => p.action(h.state()),
            PolicySpec::History(p) => p.action(&h.key()),
        };
        labels.push(mdp.action_label(a).to_string());
        match h.child(mdp, a) {
            Ok(next) => h = next,
            Err(_) => break,
        }
    }
    labels.join(";")
}

fn objective(mdp: &TabularMdp, cfg: &ExperimentConfig, policy: &PolicySpec<'_>) -> Result<f64> {
    let traj = trajectory_return_dist(mdp, policy)?;
    Ok(cfg.measure.evaluate(&traj))
}

fn budget_row(method: &'static str, err: &OperatorError) -> ExactRow {
    ExactRow {
        method,
        root_beta: f64::NAN,
        policy_fingerprint: format!("error:{err}"),
        converged: false,
        sweeps: 0,
    }
}

/// Runs the four exact methods and writes `exact_summary.csv`.
/// Budget overflows are reported per method instead of aborting the run.
pub fn run_exact(cfg: &ExperimentConfig) -> Result<(Vec<ExactRow>, PathBuf)> {
    let mdp = cfg.build_mdp()?;
    let beta = &cfg.measure;
    let mut rows = Vec::new();

    match hr_policy_iteration(
        &mdp,
        beta,
        HistoryPolicy::constant(0),
        cfg.exact.max_sweeps,
        cfg.exact.budget,
    ) {
        Ok(res) => rows.push(ExactRow {
            method: "hr_policy_iteration",
            root_beta: *res.root_betas.last().expect("at least one evaluation"),
            policy_fingerprint: fingerprint(&mdp, &PolicySpec::History(&res.policy)),
            converged: res.converged,
            sweeps: res.iterations,
        }),
        Err(e) => rows.push(budget_row("hr_policy_iteration", &e)),
    }

    match brute_force_optimal(&mdp, beta, cfg.exact.budget) {
        Ok((policy, value)) => rows.push(ExactRow {
            method: "brute_force",
            root_beta: value,
            policy_fingerprint: fingerprint(&mdp, &PolicySpec::History(&policy)),
            converged: true,
            sweeps: 1,
        }),
        Err(e) => rows.push(budget_row("brute_force", &e)),
    }

    let sweeps = mdp.horizon() + 8;
    match mean_value_iteration(&mdp, sweeps, Some(cfg.exact.prune_cap)) {
        Ok(res) => {
            let converged = res.mean_deltas.last().is_some_and(|d| *d <= 1e-12);
            rows.push(ExactRow {
                method: "mean_value_iteration",
                root_beta: objective(&mdp, cfg, &PolicySpec::Markov(&res.policy))?,
                policy_fingerprint: fingerprint(&mdp, &PolicySpec::Markov(&res.policy)),
                converged,
                sweeps,
            });
        }
        Err(e) => rows.push(budget_row("mean_value_iteration", &e)),
    }

    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let init = uniform_state_action_map(&mdp, &zero);
    match risk_bellman_iterate(&mdp, &init, beta, cfg.exact.max_sweeps, TieRule::LowestIndex) {
        Ok(res) => rows.push(ExactRow {
            method: "risk_bellman",
            root_beta: objective(&mdp, cfg, &PolicySpec::Markov(&res.policy))?,
            policy_fingerprint: fingerprint(&mdp, &PolicySpec::Markov(&res.policy)),
            converged: res.converged,
            sweeps: res.sweeps_run,
        }),
        Err(e) => rows.push(budget_row("risk_bellman", &e)),
    }

    let dir = output_root()
        .join(&cfg.output_dir)
        .join(format!("exact-{}", cfg.run_id(cfg.seed)));
    write_snapshot(&dir, cfg)?;
    exact_summary_csv(&cfg.hash(), &rows).write(&dir.join("exact_summary.csv"))?;
    Ok((rows, dir))
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub final_returns: Vec<f64>,
}

/// Trains one agent and writes `learning_curve.csv`, `histogram.csv`,
/// `policy_log.csv`, and the flat-text table checkpoints.
pub fn run_train(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<TrainOutput> {
    let kind = cfg
        .agent_kind
        .ok_or_else(|| anyhow!("train requires agent.kind = tql or markov_qr"))?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let mdp = cfg.build_mdp()?;

    let result: TrainResult = train(kind, &mdp, &cfg.measure, cfg.agent.clone(), &cfg.train, seed)
        .context("training failed")?;

    let run_id = cfg.run_id(seed);
    let dir = output_root().join(&cfg.output_dir).join(&run_id);
    write_snapshot(&dir, cfg)?;

    let hash = cfg.hash();
    learning_curve_csv(&hash, &run_id, seed, &cfg.measure.name(), &result.records)
        .write(&dir.join("learning_curve.csv"))?;
    histogram_csv(&hash, &run_id, &result.final_returns).write(&dir.join("histogram.csv"))?;
    policy_log_csv(&hash, &result.records, |a| mdp.action_label(a).to_string())
        .write(&dir.join("policy_log.csv"))?;

    std::fs::write(
        dir.join("tables_markov.tsv"),
        result.agent.markov_table.checkpoint_lines().join("\n") + "\n",
    )?;
    if result.agent.history_table.len() > 0 {
        std::fs::write(
            dir.join("tables_history.tsv"),
            result.agent.history_table.checkpoint_lines().join("\n") + "\n",
        )?;
    }

    Ok(TrainOutput { dir, seed, records: result.records, final_returns: result.final_returns })
}

pub struct SweepOutput {
    pub dir: PathBuf,
    pub per_seed: Vec<(u64, Vec<(usize, f64)>)>,
    pub failures: Vec<(u64, String)>,
}

/// Runs one training per seed, in parallel isolated runs, and aggregates
/// the per-step measure into `sweep.csv`. Individual failures are
/// isolated and reported, not fatal.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SweepOutput> {
    if seeds.is_empty() {
        return Err(anyhow!("sweep requires at least one seed"));
    }
    let results: Vec<(u64, Result<TrainOutput>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || (seed, run_train(cfg, Some(seed)))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("runner thread")).collect()
    });

    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(out) => per_seed.push((
                seed,
                out.records.iter().map(|r| (r.step, r.measure_value)).collect(),
            )),
            Err(e) => failures.push((seed, format!("{e:#}"))),
        }
    }
    per_seed.sort_by_key(|&(seed, _)| seed);

    let dir = output_root()
        .join(&cfg.output_dir)
        .join(format!("sweep-{}", cfg.run_id(0)));
    write_snapshot(&dir, cfg)?;
    sweep_csv(&cfg.hash(), &cfg.measure.name(), &per_seed).write(&dir.join("sweep.csv"))?;
    Ok(SweepOutput { dir, per_seed, failures })
}

/// Exact objective of the risk-greedy Markov fixed policy and of the
/// history optimum, for quick gap summaries.
pub fn exact_gap(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let mdp = cfg.build_mdp()?;
    let beta = &cfg.measure;
    let hr = hr_policy_iteration(
        &mdp,
        beta,
        HistoryPolicy::constant(0),
        cfg.exact.max_sweeps,
        cfg.exact.budget,
    )?;
    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let init = uniform_state_action_map(&mdp, &zero);
    let rb = risk_bellman_iterate(&mdp, &init, beta, cfg.exact.max_sweeps, TieRule::LowestIndex)?;
    let markov: &MarkovPolicy = &rb.policy;
    Ok((
        *hr.root_betas.last().expect("evaluated"),
        objective(&mdp, cfg, &PolicySpec::Markov(markov))?,
    ))
}
