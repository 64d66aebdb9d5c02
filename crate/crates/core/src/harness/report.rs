//! CSV and summary output of evaluation runs.
//!
//! Layout under the output directory: `<method>/trial_NN.csv` per trial
//! and `summary.txt` with per-method WatchTime mean and standard deviation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::Method;
use super::episode::{EpisodeResult, HourlyMetrics};
use super::stats::{mean, paired_t_test, std_dev, PairedTest};
use super::{HarnessError, MethodRun};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const HOURLY_HEADER: &str =
    "hour,requests,realtime,cached,failures,budget,watchtime,mean_atilde";

pub fn write_hourly_csv(path: &Path, rows: &[HourlyMetrics]) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Report("no metrics to write".into()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hourly_csv(path: &Path) -> Result<Vec<HourlyMetrics>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn trial_path(dir: &Path, method: Method, trial: usize) -> PathBuf {
    dir.join(method.name())
        .join(format!("trial_{trial:02}.csv"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    /// WatchTime (seconds per user) of each trial.
    pub per_trial: Vec<f64>,
}

impl MethodSummary {
    pub fn mean(&self) -> f64 {
        mean(&self.per_trial)
    }

    pub fn std(&self) -> f64 {
        std_dev(&self.per_trial)
    }
}

pub fn summarize(runs: &[MethodRun]) -> Vec<MethodSummary> {
    runs.iter()
        .map(|r| MethodSummary {
            method: r.method,
            per_trial: r.watch_per_user(),
        })
        .collect()
}

/// Fixed-width table; values are printed with six decimals. When both
/// `rpaf` and `greedy` are present with at least two trials, a paired test
/// line follows.
pub fn format_summary(summaries: &[MethodSummary]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14} {:>6} {:>16} {:>14}",
        "method", "trials", "watchtime_mean", "watchtime_std"
    )
    .unwrap();
    for s in summaries {
        writeln!(
            out,
            "{:<14} {:>6} {:>16.6} {:>14.6}",
            s.method.name(),
            s.per_trial.len(),
            s.mean(),
            s.std()
        )
        .unwrap();
    }
    if let Some(t) = rpaf_vs_greedy(summaries) {
        writeln!(
            out,
            "paired rpaf-greedy: n={} mean_diff={:.6} t={:.4} p_two_sided={:.6} p_greater={:.6}",
            t.n, t.mean_diff, t.t, t.p_two_sided, t.p_greater
        )
        .unwrap();
    }
    out
}

pub fn rpaf_vs_greedy(summaries: &[MethodSummary]) -> Option<PairedTest> {
    let find = |m| summaries.iter().find(|s| s.method == m);
    let (a, b) = (find(Method::Rpaf)?, find(Method::Greedy)?);
    (a.per_trial.len() == b.per_trial.len() && a.per_trial.len() >= 2)
        .then(|| paired_t_test(&a.per_trial, &b.per_trial))
}

/// Writes every trial CSV and the summary; returns the summaries.
pub fn emit_report(dir: &Path, runs: &[MethodRun]) -> Result<Vec<MethodSummary>, HarnessError> {
    if runs.is_empty() || runs.iter().any(|r| r.trials.is_empty()) {
        return Err(HarnessError::Report("no metrics to report".into()));
    }
    for run in runs {
        for (i, trial) in run.trials.iter().enumerate() {
            write_hourly_csv(&trial_path(dir, run.method, i), &trial.hourly)?;
        }
    }
    let summaries = summarize(runs);
    std::fs::write(dir.join(SUMMARY_FILE), format_summary(&summaries))?;
    Ok(summaries)
}

/// Reloads every method directory present under `dir`, in canonical method order.
pub fn load_runs(dir: &Path, num_users: usize) -> Result<Vec<MethodRun>, HarnessError> {
    let mut runs = Vec::new();
    for method in Method::ALL {
        let mut trials = Vec::new();
        while trial_path(dir, method, trials.len()).exists() {
            let hourly = read_hourly_csv(&trial_path(dir, method, trials.len()))?;
            trials.push(EpisodeResult { hourly, num_users });
        }
        if !trials.is_empty() {
            runs.push(MethodRun { method, trials });
        }
    }
    if runs.is_empty() {
        return Err(HarnessError::Report(format!(
            "no trial CSVs under {}",
            dir.display()
        )));
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(hour: usize, watch: f64) -> HourlyMetrics {
        HourlyMetrics {
            hour,
            request_count: 10,
            realtime_served: 6,
            cached_served: 3,
            serve_failures: 1,
            budget: 6,
            watch_time_sum: watch,
            mean_atilde: hour.is_multiple_of(2).then_some(0.123_456_789_012_345_67),
        }
    }

    #[test]
    fn csv_round_trip_is_lossless_and_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let rows = vec![row(0, 1.0 / 3.0), row(1, 1e-17), row(2, 12345.678)];
        write_hourly_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), HOURLY_HEADER);
        assert_eq!(read_hourly_csv(&path).unwrap(), rows);
    }

    #[test]
    fn empty_metrics_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_hourly_csv(&dir.path().join("x.csv"), &[]),
            Err(HarnessError::Report(_))
        ));
        assert!(emit_report(dir.path(), &[]).is_err());
    }

    #[test]
    fn summary_recomputes_from_written_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let trial = |w: f64| EpisodeResult {
            hourly: vec![row(0, w), row(1, 2.0 * w)],
            num_users: 4,
        };
        let runs = vec![
            MethodRun {
                method: Method::Greedy,
                trials: vec![trial(4.0), trial(8.0)],
            },
            MethodRun {
                method: Method::Rpaf,
                trials: vec![trial(6.0), trial(9.0)],
            },
        ];
        let written = emit_report(dir.path(), &runs).unwrap();
        assert_eq!(written[0].per_trial, vec![3.0, 6.0]);
        let reloaded = summarize(&load_runs(dir.path(), 4).unwrap());
        assert_eq!(reloaded, written);
        let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(text, format_summary(&reloaded));
        assert!(text.contains("paired rpaf-greedy"));
    }
}
