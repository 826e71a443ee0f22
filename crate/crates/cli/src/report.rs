//! Schema-stable CSV emission.
//!
//! Every output file starts with a `# config_hash=<sha256>` comment line,
//! then a header row; floats print with nine significant digits in
//! scientific notation so files are byte-stable across locales and runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rsrl_core::agents::EvalRecord;
use rsrl_core::dist::ReturnDistribution;

/// Nine-significant-digit, locale-independent float formatting.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    format!("{x:.8e}")
}

pub struct CsvFile {
    buf: String,
}

impl CsvFile {
    pub fn new(config_hash: &str, header: &str) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "# config_hash={config_hash}");
        let _ = writeln!(buf, "{header}");
        Self { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn contents(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &self.buf)
    }
}

/// `learning_curve.csv`: one row per evaluation snapshot.
pub fn learning_curve_csv(
    config_hash: &str,
    run_id: &str,
    seed: u64,
    measure_name: &str,
    records: &[EvalRecord],
) -> CsvFile {
    let mut csv = CsvFile::new(
        config_hash,
        "run_id,seed,step,measure_name,measure_value,mean_return",
    );
    for rec in records {
        csv.row(&[
            run_id.to_string(),
            seed.to_string(),
            rec.step.to_string(),
            measure_name.to_string(),
            fmt_g9(rec.measure_value),
            fmt_g9(rec.mean_return),
        ]);
    }
    csv
}

/// `histogram.csv`: counts per distinct final-evaluation return value.
pub fn histogram_csv(config_hash: &str, run_id: &str, returns: &[f64]) -> CsvFile {
    let mut csv = CsvFile::new(config_hash, "run_id,return_value,count");
    if !returns.is_empty() {
        let empirical = ReturnDistribution::from_samples(returns).expect("non-empty returns");
        let n = returns.len() as f64;
        for atom in empirical.atoms() {
            csv.row(&[
                run_id.to_string(),
                fmt_g9(atom.value),
                format!("{}", (atom.prob * n).round() as u64),
            ]);
        }
    }
    csv
}

/// `policy_log.csv`: the greedy action sequence at each snapshot,
/// semicolon-joined action labels.
pub fn policy_log_csv(
    config_hash: &str,
    records: &[EvalRecord],
    label: impl Fn(usize) -> String,
) -> CsvFile {
    let mut csv = CsvFile::new(config_hash, "step,actions");
    for rec in records {
        let seq: Vec<String> = rec.greedy_actions.iter().map(|&a| label(a)).collect();
        csv.row(&[rec.step.to_string(), seq.join(";")]);
    }
    csv
}

/// One `exact_summary.csv` row.
pub struct ExactRow {
    pub method: &'static str,
    pub root_beta: f64,
    pub policy_fingerprint: String,
    pub converged: bool,
    pub sweeps: usize,
}

pub fn exact_summary_csv(config_hash: &str, rows: &[ExactRow]) -> CsvFile {
    let mut csv = CsvFile::new(
        config_hash,
        "method,root_beta,policy_fingerprint,converged,sweeps",
    );
    for row in rows {
        csv.row(&[
            row.method.to_string(),
            fmt_g9(row.root_beta),
            row.policy_fingerprint.clone(),
            row.converged.to_string(),
            row.sweeps.to_string(),
        ]);
    }
    csv
}

/// `sweep.csv`: per-step mean and envelope of the measure across seeds.
pub fn sweep_csv(
    config_hash: &str,
    measure_name: &str,
    per_seed: &[(u64, Vec<(usize, f64)>)],
) -> CsvFile {
    let mut csv = CsvFile::new(
        config_hash,
        "step,measure_name,mean_measure_value,min_measure_value,max_measure_value,n_seeds",
    );
    if per_seed.is_empty() {
        return csv;
    }
    let mut steps: Vec<usize> = per_seed[0].1.iter().map(|&(s, _)| s).collect();
    steps.sort_unstable();
    for step in steps {
        let values: Vec<f64> = per_seed
            .iter()
            .filter_map(|(_, rows)| rows.iter().find(|&&(s, _)| s == step).map(|&(_, v)| v))
            .collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        csv.row(&[
            step.to_string(),
            measure_name.to_string(),
            fmt_g9(mean),
            fmt_g9(min),
            fmt_g9(max),
            values.len().to_string(),
        ]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_g9(79.0), "7.90000000e1");
        assert_eq!(fmt_g9(-15.0), "-1.50000000e1");
        assert_eq!(fmt_g9(0.001), "1.00000000e-3");
        assert_eq!(fmt_g9(f64::NAN), "nan");
    }

    #[test]
    fn csv_layout_is_stable() {
        let mut csv = CsvFile::new("abc123", "a,b");
        csv.row(&["1".into(), fmt_g9(2.5)]);
        assert_eq!(csv.contents(), "# config_hash=abc123\na,b\n1,2.50000000e0\n");
    }
}
