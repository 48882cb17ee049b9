//! Group-wise accuracy accounting.
//!
//! Two averages are reported side by side: `avg_sample` (fraction of all
//! samples classified correctly) and `avg_group` (unweighted mean of the
//! per-group accuracies). Worst-group accuracy is the minimum over groups
//! that actually occur.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Groups with at least one sample, keyed by group id.
    pub per_group: BTreeMap<usize, GroupStat>,
    /// Group ids in `[0, n_groups)` without samples; excluded from every
    /// aggregate.
    pub absent_groups: Vec<usize>,
    pub n_groups: usize,
    pub wga: f64,
    pub best_group: f64,
    pub avg_sample: f64,
    pub avg_group: f64,
}

impl GroupReport {
    /// One CSV row per present group: `group,correct,total,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,correct,total,accuracy\n");
        for (g, s) in &self.per_group {
            let _ = writeln!(out, "{g},{},{},{}", s.correct, s.total, s.accuracy);
        }
        out
    }
}

pub fn group_report(predictions: &[usize], set: &EmbeddingSet) -> Result<GroupReport> {
    group_report_from(predictions, set.labels(), set.groups(), set.num_groups())
}

/// Report from raw label and group arrays.
pub fn group_report_from(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
) -> Result<GroupReport> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::Consistency(format!(
            "{} predictions for {} labels and {} groups",
            predictions.len(),
            labels.len(),
            groups.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Consistency("cannot report on zero samples".into()));
    }
    let mut correct = vec![0usize; n_groups];
    let mut total = vec![0usize; n_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        if g >= n_groups {
            return Err(Error::Data(format!("group id {g} is outside [0, {n_groups})")));
        }
        total[g] += 1;
        correct[g] += usize::from(p == y);
    }

    let mut per_group = BTreeMap::new();
    let mut absent_groups = Vec::new();
    for g in 0..n_groups {
        if total[g] == 0 {
            absent_groups.push(g);
        } else {
            per_group.insert(
                g,
                GroupStat {
                    correct: correct[g],
                    total: total[g],
                    accuracy: correct[g] as f64 / total[g] as f64,
                },
            );
        }
    }
    let accs = per_group.values().map(|s| s.accuracy);
    let wga = accs.clone().fold(f64::INFINITY, f64::min);
    let best_group = accs.clone().fold(f64::NEG_INFINITY, f64::max);
    // Rounding in the sum must not push the mean outside [wga, best].
    let avg_group = (accs.sum::<f64>() / per_group.len() as f64).clamp(wga, best_group);
    let avg_sample = correct.iter().sum::<usize>() as f64 / predictions.len() as f64;

    Ok(GroupReport {
        per_group,
        absent_groups,
        n_groups,
        wga,
        best_group,
        avg_sample,
        avg_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: usize,
    pub before: Option<f64>,
    pub after: Option<f64>,
    /// `after - before`, when the group is present in both reports.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub groups: Vec<GroupDelta>,
    pub wga_delta: f64,
    pub avg_sample_delta: f64,
    pub avg_group_delta: f64,
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let mut out = String::from("group,before,after,delta\n");
        for row in &self.groups {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.group,
                cell(row.before),
                cell(row.after),
                cell(row.delta)
            );
        }
        let _ = writeln!(out, "wga,,,{}", self.wga_delta);
        let _ = writeln!(out, "avg_sample,,,{}", self.avg_sample_delta);
        let _ = writeln!(out, "avg_group,,,{}", self.avg_group_delta);
        out
    }
}

/// Per-group and aggregate accuracy changes from `before` to `after`.
pub fn compare_reports(before: &GroupReport, after: &GroupReport) -> Result<DeltaTable> {
    if before.n_groups != after.n_groups {
        return Err(Error::Consistency(format!(
            "group universes differ: {} vs {} groups",
            before.n_groups, after.n_groups
        )));
    }
    let groups = (0..before.n_groups)
        .map(|g| {
            let b = before.per_group.get(&g).map(|s| s.accuracy);
            let a = after.per_group.get(&g).map(|s| s.accuracy);
            GroupDelta {
                group: g,
                before: b,
                after: a,
                delta: b.zip(a).map(|(b, a)| a - b),
            }
        })
        .collect();
    Ok(DeltaTable {
        groups,
        wga_delta: after.wga - before.wga,
        avg_sample_delta: after.avg_sample - before.avg_sample,
        avg_group_delta: after.avg_group - before.avg_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub best: f64,
    pub worst: f64,
    pub avg_group: f64,
    pub avg_sample: f64,
}

/// Best, worst and mean group accuracy per task, ascending by `avg_group`.
pub fn sweep_report(tasks: &[(String, GroupReport)]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = tasks
        .iter()
        .map(|(task, r)| SweepRow {
            task: task.clone(),
            best: r.best_group,
            worst: r.wga,
            avg_group: r.avg_group,
            avg_sample: r.avg_sample,
        })
        .collect();
    rows.sort_by(|a, b| a.avg_group.total_cmp(&b.avg_group));
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("task,best,worst,avg_group,avg_sample\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.task, r.best, r.worst, r.avg_group, r.avg_sample);
    }
    out
}
