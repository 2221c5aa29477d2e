//! Markdown and CSV result tables from run records.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::Result;
use driftseg_core::evaluation::{fold_summary, FoldSummary};

use crate::config::Method;
use crate::runner::RunRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: Method,
    pub score: FoldSummary,
    pub gap: FoldSummary,
    /// None for the baseline or when no baseline was run.
    pub gain: Option<FoldSummary>,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupTable {
    pub group: String,
    pub rows: Vec<MethodRow>,
}

/// Seeds are averaged within a split first; the spread is then over splits.
/// A group with a single split reports the spread over seeds instead.
fn summarize(records: &[&RunRecord], value: impl Fn(&RunRecord) -> Option<f64>) -> Result<Option<FoldSummary>> {
    let mut per_split: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(v) = value(r) {
            per_split.entry(r.split.as_str()).or_default().push(v);
        }
    }
    let values: Vec<f64> = match per_split.len() {
        0 => return Ok(None),
        1 => per_split.into_values().next().unwrap_or_default(),
        _ => per_split
            .into_values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect(),
    };
    Ok(Some(fold_summary(&values)?))
}

pub fn tables(records: &[RunRecord]) -> Result<Vec<GroupTable>> {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.split_group.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (group, recs) in groups {
        let mut rows = Vec::new();
        for method in Method::ALL {
            let mine: Vec<&RunRecord> = recs.iter().copied().filter(|r| r.method == method).collect();
            let (Some(score), Some(gap)) = (
                summarize(&mine, |r| Some(r.ood_xview2))?,
                summarize(&mine, |r| Some(r.gap))?,
            ) else {
                continue;
            };
            let gain = if method == Method::Baseline {
                None
            } else {
                summarize(&mine, |r| r.gain)?
            };
            rows.push(MethodRow {
                method,
                score,
                gap,
                gain,
                records: mine.len(),
            });
        }
        out.push(GroupTable {
            group: group.to_string(),
            rows,
        });
    }
    Ok(out)
}

/// `0.60 ±0.08`, or just the mean for a single value.
pub fn format_summary(s: &FoldSummary) -> String {
    if s.n > 1 {
        format!("{:.2} ±{:.2}", s.mean, s.std)
    } else {
        format!("{:.2}", s.mean)
    }
}

pub fn markdown(tables: &[GroupTable]) -> String {
    let mut out = String::new();
    for t in tables {
        let best = t.rows.iter().map(|r| r.score.mean).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "### {}\n", t.group);
        out.push_str("| Method | xView2 score (OOD) ↑ | Gap ↓ | Gain ↑ |\n|---|---|---|---|\n");
        for r in &t.rows {
            let mut score = format_summary(&r.score);
            if r.score.mean == best {
                score = format!("**{score}**");
            }
            let gain = r.gain.as_ref().map(format_summary).unwrap_or_else(|| "--".into());
            let _ = writeln!(out, "| {} | {score} | {} | {gain} |", r.method.label(), format_summary(&r.gap));
        }
        out.push('\n');
    }
    out
}

pub fn csv(tables: &[GroupTable]) -> String {
    let mut out = String::from("group,method,score_mean,score_std,gap_mean,gap_std,gain_mean,gain_std,records\n");
    for t in tables {
        for r in &t.rows {
            let (gm, gs) = match &r.gain {
                Some(g) => (format!("{:.6}", g.mean), format!("{:.6}", g.std)),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{gm},{gs},{}",
                t.group, r.method, r.score.mean, r.score.std, r.gap.mean, r.gap.std, r.records
            );
        }
    }
    out
}
