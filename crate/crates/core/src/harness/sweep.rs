//! One-axis parameter sweeps over a config template.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::mixer::Decay;
use crate::transfer::Threshold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Alpha,
    Tau,
    Decay,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::Alpha => "alpha",
            Axis::Tau => "tau",
            Axis::Decay => "decay",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Axis::K),
            "alpha" => Ok(Axis::Alpha),
            "tau" => Ok(Axis::Tau),
            "decay" => Ok(Axis::Decay),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// `p0.5` is a percentile threshold, a bare number an absolute one.
pub fn parse_tau(value: &str) -> Result<Threshold> {
    let bad = || Error::Config(format!("bad tau `{value}`"));
    match value.strip_prefix('p') {
        Some(q) => Ok(Threshold::Percentile(q.parse().map_err(|_| bad())?)),
        None => Ok(Threshold::Absolute(value.parse().map_err(|_| bad())?)),
    }
}

/// Sets the swept parameter. Changing `k` invalidates any mask store, so
/// masks are mined afresh inside each run.
pub fn apply_axis(config: &mut ExperimentConfig, axis: Axis, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad {} value `{value}`", axis.name()));
    match axis {
        Axis::K => {
            config.model.attributes_per_class = value.parse().map_err(|_| bad())?;
            if config.mode.needs_masks() {
                config.data.masks = None;
                config.mining.auto = true;
            }
        }
        Axis::Alpha => config.mix.alpha = value.parse().map_err(|_| bad())?,
        Axis::Tau => config.transfer.tau = parse_tau(value)?,
        Axis::Decay => {
            config.mix.decay = match value {
                "none" => Decay::None,
                "cosine" => Decay::Cosine,
                _ => return Err(bad()),
            }
        }
    }
    config.validate()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    /// `ok`, or `failed: <kind>: <message>`.
    pub status: String,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SweepRow], values: &[String]) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|v| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| &r.value == v).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|r| r.final_accuracy).collect();
            let (mean, std) = mean_std(&acc);
            SweepPoint {
                value: v.clone(),
                runs: mine.len(),
                failed: mine.len() - acc.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Trains every (value, seed) pair under `out/<axis>=<value>/seed<seed>`,
/// writing `sweep.csv` (one row per run) and `summary.csv` (one per value).
pub fn sweep(
    template: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<(Vec<SweepRow>, Vec<SweepPoint>)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for value in values {
        for &seed in seeds {
            let run_dir = out.join(format!("{}={value}", axis.name())).join(format!("seed{seed}"));
            let mut config = template.clone();
            config.seed = seed;
            let result = apply_axis(&mut config, axis, value).and_then(|_| train(&config, &run_dir, false));
            rows.push(match result {
                Ok(s) => SweepRow {
                    value: value.clone(),
                    seed,
                    status: "ok".into(),
                    final_accuracy: Some(s.final_accuracy),
                    best_accuracy: Some(s.best_accuracy),
                },
                Err(e) => {
                    warn!("{}={value} seed {seed} failed: {e}", axis.name());
                    SweepRow {
                        value: value.clone(),
                        seed,
                        status: format!("failed: {}: {}", e.kind(), e.to_string().replace([',', '\n'], ";")),
                        final_accuracy: None,
                        best_accuracy: None,
                    }
                }
            });
            write_tables(out, axis, &rows, values)?;
        }
    }
    let summary = summarize(&rows, values);
    Ok((rows, summary))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.6}")).unwrap_or_default()
}

fn write_tables(out: &Path, axis: Axis, rows: &[SweepRow], values: &[String]) -> Result<()> {
    let mut runs = format!("{},seed,status,final_accuracy,best_accuracy\n", axis.name());
    for r in rows {
        runs.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            r.seed,
            r.status,
            fmt_opt(r.final_accuracy),
            fmt_opt(r.best_accuracy)
        ));
    }
    let mut summary = format!("{},runs,failed,mean_accuracy,std_accuracy\n", axis.name());
    for p in summarize(rows, values).into_iter().filter(|p| p.runs > 0) {
        summary.push_str(&format!("{},{},{},{:.6},{:.6}\n", p.value, p.runs, p.failed, p.mean, p.std));
    }
    for (name, body) in [("sweep.csv", runs), ("summary.csv", summary)] {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn tau_syntax() {
        assert_eq!(parse_tau("p0.5").unwrap(), Threshold::Percentile(0.5));
        assert_eq!(parse_tau("1.5").unwrap(), Threshold::Absolute(1.5));
        assert!(parse_tau("x").is_err());
    }

    #[test]
    fn k_axis_switches_to_mining() {
        let mut c = ExperimentConfig {
            mode: super::super::config::Mode::AttributeMix,
            data: super::super::config::DataSection { manifest: "m.jsonl".into(), masks: Some("m".into()), ..Default::default() },
            ..Default::default()
        };
        apply_axis(&mut c, Axis::K, "2").unwrap();
        assert_eq!(c.model.attributes_per_class, 2);
        assert!(c.data.masks.is_none() && c.mining.auto);
    }

    #[test]
    fn failed_points_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let template = ExperimentConfig {
            data: super::super::config::DataSection { manifest: dir.path().join("missing.jsonl"), ..Default::default() },
            ..Default::default()
        };
        let values = vec!["0.5".to_string(), "bogus".to_string()];
        let (rows, summary) = sweep(&template, Axis::Alpha, &values, &[0], dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.status.starts_with("failed")));
        assert_eq!(summary[0].failed, 1);
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
