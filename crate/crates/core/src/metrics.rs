//! Episode evaluation: average travel time, average queue length and
//! average waiting time, plus report rendering (JSON, aligned text table,
//! multi-run comparison CSV).
//!
//! Travel time truncation: a vehicle that has not finished by the episode
//! end contributes `episode_len - sched`. Excluding unfinished vehicles
//! would reward controllers for gridlocking traffic; truncation charges
//! them the full horizon instead.
//!
//! Waiting time is averaged per vehicle over the whole network. A
//! per-intersection variant (mean accumulated wait per vehicle that ever
//! queued at that intersection) is available as an optional report column.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::episode::EpisodeLog;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("episode log contains no vehicles")]
    NoVehicles,
}

/// Mean accumulated wait of the vehicles that queued at one intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionAwt {
    pub intersection: String,
    pub awt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub controller: String,
    /// Mean travel time in seconds, truncated at the horizon.
    pub att: f64,
    /// Time-averaged network-wide queued-vehicle count.
    pub aql: f64,
    /// Mean accumulated waiting time in seconds over all spawned vehicles.
    pub awt: f64,
    pub finished: u64,
    pub unfinished: u64,
    pub episode_len: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_intersection: Option<Vec<IntersectionAwt>>,
}

impl MetricsReport {
    pub fn spawned(&self) -> u64 {
        self.finished + self.unfinished
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Travel time of one vehicle record under the truncation rule.
fn travel_time(sched: u64, finished: Option<u64>, episode_len: u64) -> u64 {
    match finished {
        Some(f) => f.saturating_sub(sched),
        None => episode_len.saturating_sub(sched),
    }
}

/// Mean travel time in seconds. Unfinished vehicles (including ones whose
/// spawn was deferred past the horizon) contribute `episode_len - sched`.
pub fn compute_att(log: &EpisodeLog) -> Result<f64, MetricsError> {
    if log.vehicles.is_empty() {
        return Err(MetricsError::NoVehicles);
    }
    let total: u64 = log
        .vehicles
        .iter()
        .map(|v| travel_time(v.sched, v.finished, log.meta.episode_len))
        .sum();
    Ok(total as f64 / log.vehicles.len() as f64)
}

/// Time-average of the per-tick network-wide queued count. An episode with
/// no ticks averages to zero.
pub fn compute_aql(log: &EpisodeLog) -> f64 {
    if log.tick_queue.is_empty() {
        return 0.0;
    }
    let total: u64 = log.tick_queue.iter().map(|&q| q as u64).sum();
    total as f64 / log.tick_queue.len() as f64
}

/// Mean accumulated waiting time in seconds over all spawned vehicles.
pub fn compute_awt(log: &EpisodeLog) -> Result<f64, MetricsError> {
    if log.vehicles.is_empty() {
        return Err(MetricsError::NoVehicles);
    }
    let total: u64 = log.vehicles.iter().map(|v| v.wait as u64).sum();
    Ok(total as f64 / log.vehicles.len() as f64)
}

/// Per-intersection mean accumulated wait, over vehicles that ever queued
/// there. Intersections nobody queued at report zero.
pub fn per_intersection_awt(log: &EpisodeLog) -> Vec<IntersectionAwt> {
    log.intersection_wait
        .iter()
        .map(|w| IntersectionAwt {
            intersection: w.intersection.clone(),
            awt: if w.queuers == 0 {
                0.0
            } else {
                w.wait_ticks as f64 / w.queuers as f64
            },
        })
        .collect()
}

pub fn compute_report(log: &EpisodeLog) -> Result<MetricsReport, MetricsError> {
    compute_report_opts(log, false)
}

pub fn compute_report_opts(
    log: &EpisodeLog,
    with_per_intersection: bool,
) -> Result<MetricsReport, MetricsError> {
    let finished = log.vehicles.iter().filter(|v| v.finished.is_some()).count() as u64;
    Ok(MetricsReport {
        controller: log.meta.controller.clone(),
        att: compute_att(log)?,
        aql: compute_aql(log),
        awt: compute_awt(log)?,
        finished,
        unfinished: log.vehicles.len() as u64 - finished,
        episode_len: log.meta.episode_len,
        per_intersection: with_per_intersection.then(|| per_intersection_awt(log)),
    })
}

/// Aligned text table, one row per report. Appends a per-intersection AWT
/// section for any report that carries one.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let headers = ["controller", "ATT", "AQL", "AWT", "finished", "unfinished"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.controller.clone(),
                format!("{:.2}", r.att),
                format!("{:.2}", r.aql),
                format!("{:.2}", r.awt),
                r.finished.to_string(),
                r.unfinished.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(headers[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{:<width$}", cell, width = widths[c]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    out.push_str(&fmt_row(&headers.map(String::from)));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    for r in reports {
        if let Some(per) = &r.per_intersection {
            out.push('\n');
            out.push_str(&format!("per-intersection AWT ({}):\n", r.controller));
            let w = per
                .iter()
                .map(|p| p.intersection.len())
                .max()
                .unwrap_or(0);
            for p in per {
                out.push_str(&format!(
                    "  {:<width$}  {:.2}\n",
                    p.intersection,
                    p.awt,
                    width = w
                ));
            }
        }
    }
    out
}

/// CSV with one row per run: controller label against each metric column.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("controller,att,aql,awt,finished,unfinished,episode_len\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{},{},{}\n",
            r.controller, r.att, r.aql, r.awt, r.finished, r.unfinished, r.episode_len
        ));
    }
    out
}
