//! Windowed Δ statistics and plot-data emission from run outputs.

use std::io::Write;
use std::path::Path;

use stepopsd_core::diag::{diag_std_delta, DeltaSummary, WindowStat};
use stepopsd_core::train::MetricsRecord;

use crate::error::{Error, Result};
use crate::jsonl::read_jsonl_file;
use crate::shape::ShapedGroup;

/// Default window starts: 0–50, 50–100, 100+.
pub const DEFAULT_WINDOWS: [u64; 3] = [0, 50, 100];

/// Series emitted by [`emit_plot_data`], in output order.
pub const SERIES: [&str; 15] = [
    "success_rate",
    "mean_reward",
    "lambda",
    "std_delta",
    "delta_mean",
    "mean_abs_psi_dev",
    "clip_saturation",
    "groups_skipped_no_peer",
    "trajectories_dropped",
    "mean_traj_len",
    "invalid_action_rate",
    "loss",
    "grad_norm",
    "kl_mean",
    "grad_cosine",
];

fn series_value(m: &MetricsRecord, name: &str) -> Option<f64> {
    match name {
        "success_rate" => Some(m.success_rate),
        "mean_reward" => Some(m.mean_reward),
        "lambda" => Some(m.lambda),
        "std_delta" => m.std_delta,
        "delta_mean" => m.delta_mean,
        "mean_abs_psi_dev" => Some(m.mean_abs_psi_dev),
        "clip_saturation" => Some(m.clip_saturation),
        "groups_skipped_no_peer" => Some(m.groups_skipped_no_peer as f64),
        "trajectories_dropped" => Some(m.trajectories_dropped as f64),
        "mean_traj_len" => Some(m.mean_traj_len),
        "invalid_action_rate" => Some(m.invalid_action_rate),
        "loss" => Some(m.loss),
        "grad_norm" => Some(m.grad_norm),
        "kl_mean" => Some(m.kl_mean),
        "grad_cosine" => m.grad_cosine,
        _ => None,
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    Ok(read_jsonl_file(path)?.into_iter().map(|(_, m)| m).collect())
}

/// Per-step Δ summaries recovered from metrics records.
pub fn summaries_from_metrics(metrics: &[MetricsRecord]) -> Vec<(u64, DeltaSummary)> {
    metrics
        .iter()
        .filter_map(|m| match (m.delta_mean, m.std_delta) {
            (Some(mean), Some(std)) if m.delta_count > 0 => {
                Some((m.step, DeltaSummary::from_moments(m.delta_count, mean, std)))
            }
            _ => None,
        })
        .collect()
}

/// Per-step Δ summaries from shaped groups; groups without a step count as step 0.
pub fn summaries_from_shaped(groups: &[ShapedGroup]) -> Vec<(u64, DeltaSummary)> {
    let mut out: Vec<(u64, DeltaSummary)> = Vec::new();
    for g in groups {
        let step = g.step.unwrap_or(0);
        let mut s = DeltaSummary::default();
        for t in g.members.iter().flat_map(|m| &m.tokens) {
            if let Some(d) = t.delta {
                s.push(d);
            }
        }
        match out.last_mut() {
            Some((st, acc)) if *st == step => acc.merge(&s),
            _ => out.push((step, s)),
        }
    }
    out
}

pub fn windows_from_metrics(metrics: &[MetricsRecord], boundaries: &[u64]) -> Result<Vec<WindowStat>> {
    Ok(diag_std_delta(&summaries_from_metrics(metrics), boundaries)?)
}

pub fn windows_from_shaped_file(path: &Path, boundaries: &[u64]) -> Result<Vec<WindowStat>> {
    let groups: Vec<ShapedGroup> = read_jsonl_file(path)?.into_iter().map(|(_, g)| g).collect();
    Ok(diag_std_delta(&summaries_from_shaped(&groups), boundaries)?)
}

/// Tidy `step,series,value` CSV; absent values are empty cells.
pub fn emit_plot_data<W: Write>(metrics: &[MetricsRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::io("<plot data>", e.into());
    out.write_record(["step", "series", "value"]).map_err(err)?;
    for name in SERIES {
        for m in metrics {
            let v = series_value(m, name).map(|x| x.to_string()).unwrap_or_default();
            out.write_record([m.step.to_string().as_str(), name, v.as_str()])
                .map_err(err)?;
        }
    }
    out.flush().map_err(|e| Error::io("<plot data>", e))
}

pub fn emit_plot_data_file(metrics_path: &Path, out_path: &Path) -> Result<usize> {
    let metrics = read_metrics(metrics_path)?;
    let f = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    emit_plot_data(&metrics, std::io::BufWriter::new(f))?;
    Ok(metrics.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, sr: f64, std: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            step,
            success_rate: sr,
            mean_reward: sr,
            lambda: 0.0,
            std_delta: std,
            delta_mean: std.map(|_| 0.0),
            delta_count: if std.is_some() { 4 } else { 0 },
            mean_abs_psi_dev: 0.0,
            clip_saturation: 0.0,
            groups_skipped_no_peer: 0,
            trajectories_dropped: 0,
            mean_traj_len: 10.0,
            invalid_action_rate: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
            kl_mean: 0.0,
            tokens_updated: 0,
            grad_cosine: None,
            teacher_step: 0,
            teacher_refreshed: step == 0,
        }
    }

    #[test]
    fn plot_rows_per_series() {
        let ms: Vec<_> = (0..150).map(|s| record(s, 0.5, Some(1.0))).collect();
        let mut buf = Vec::new();
        emit_plot_data(&ms, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,series,value");
        assert_eq!(lines.len(), 1 + 150 * SERIES.len());
        for s in ["success_rate", "std_delta", "lambda", "clip_saturation"] {
            assert_eq!(lines.iter().filter(|l| l.split(',').nth(1) == Some(s)).count(), 150);
        }
        assert!(lines.contains(&"3,grad_cosine,"));
    }

    #[test]
    fn empty_metrics_header_only() {
        let mut buf = Vec::new();
        emit_plot_data(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,series,value\n");
    }

    #[test]
    fn windows_skip_steps_without_deltas() {
        let ms = vec![record(0, 0.0, Some(2.0)), record(1, 0.0, None), record(60, 0.0, Some(1.0))];
        let w = windows_from_metrics(&ms, &DEFAULT_WINDOWS).unwrap();
        assert_eq!(w[0].count, 4);
        assert_eq!(w[0].std, Some(2.0));
        assert_eq!(w[1].std, Some(1.0));
        assert!(w[2].empty);
    }
}
