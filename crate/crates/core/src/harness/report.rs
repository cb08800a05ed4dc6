use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvaluationRecord;

/// Mean metrics of one approach on one dataset, for one fold or averaged
/// over folds (`fold = "mean"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub approach: String,
    pub dataset: String,
    pub fold: String,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

/// Metrics of one stitch-ensemble candidate per dataset; candidate 0 is the
/// plain ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub candidate: usize,
    pub label: String,
    /// `(dataset, fold-averaged Dice, fold-averaged HD95)`.
    pub metrics: Vec<(String, f64, f64)>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-fold and fold-averaged means per approach and dataset.
pub fn bi_objective(records: &[EvaluationRecord]) -> Result<Vec<ObjectiveRow>> {
    if records.is_empty() {
        return Err(Error::Empty("no records to report".into()));
    }
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<&EvaluationRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.approach.clone(), r.dataset.clone()))
            .or_default()
            .entry(r.fold)
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((approach, dataset), folds) in groups {
        let mut fold_means = Vec::new();
        for (fold, rs) in &folds {
            let (d, h) = (mean(rs.iter().map(|r| r.dice)), mean(rs.iter().map(|r| r.hd95)));
            fold_means.push((d, h));
            rows.push(ObjectiveRow {
                approach: approach.clone(),
                dataset: dataset.clone(),
                fold: fold.to_string(),
                mean_dice: d,
                mean_hd95: h,
            });
        }
        if folds.len() > 1 {
            rows.push(ObjectiveRow {
                approach: approach.clone(),
                dataset: dataset.clone(),
                fold: "mean".into(),
                mean_dice: mean(fold_means.iter().map(|m| m.0)),
                mean_hd95: mean(fold_means.iter().map(|m| m.1)),
            });
        }
    }
    Ok(rows)
}

fn candidate_index(label: &str) -> Option<usize> {
    if label == "ensemble" {
        Some(0)
    } else {
        label.strip_prefix("stitch")?.parse::<usize>().ok().map(|k| k + 1)
    }
}

/// One row per stitch-ensemble candidate, from candidate records labelled
/// `ensemble` and `stitch<k>`.
pub fn positional(records: &[EvaluationRecord]) -> Result<Vec<PositionRow>> {
    let objective = bi_objective(records)?;
    let single_fold = !objective.iter().any(|r| r.fold == "mean");
    let mut by_candidate: BTreeMap<usize, PositionRow> = BTreeMap::new();
    for r in objective.iter().filter(|r| single_fold || r.fold == "mean") {
        let idx = candidate_index(&r.approach).ok_or_else(|| Error::Malformed(format!("`{}` is not a stitch candidate", r.approach)))?;
        by_candidate
            .entry(idx)
            .or_insert_with(|| PositionRow {
                candidate: idx,
                label: r.approach.clone(),
                metrics: Vec::new(),
            })
            .metrics
            .push((r.dataset.clone(), r.mean_dice, r.mean_hd95));
    }
    Ok(by_candidate.into_values().collect())
}

pub fn write_bi_objective(rows: &[ObjectiveRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_positional(rows: &[PositionRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let datasets: Vec<String> = rows.first().map(|r| r.metrics.iter().map(|m| m.0.clone()).collect()).unwrap_or_default();
    let mut header = vec!["candidate".to_string(), "label".to_string()];
    for d in &datasets {
        header.push(format!("dice_{d}"));
        header.push(format!("hd95_{d}"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.candidate.to_string(), r.label.clone()];
        for (_, d, h) in &r.metrics {
            rec.push(d.to_string());
            rec.push(h.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        W / 2.0,
        escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s
}

fn ticks(s: &mut String, lo: [f64; 2], hi: [f64; 2]) {
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = M + f * (W - 2.0 * M);
        let y = H - M - f * (H - 2.0 * M);
        let _ = write!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.2}</text>",
            H - M + 14.0,
            lo[0] + f * (hi[0] - lo[0]),
            M - 4.0,
            y + 4.0,
            lo[1] + f * (hi[1] - lo[1])
        );
    }
}

fn project(v: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> (f64, f64) {
    let span = |i: usize| if hi[i] > lo[i] { hi[i] - lo[i] } else { 1.0 };
    (
        M + (v[0] - lo[0]) / span(0) * (W - 2.0 * M),
        H - M - (v[1] - lo[1]) / span(1) * (H - 2.0 * M),
    )
}

/// Fold-averaged Dice on the first dataset against the second, one point
/// per approach.
pub fn bi_objective_svg(rows: &[ObjectiveRow]) -> String {
    let datasets: Vec<&str> = {
        let mut d: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let x_name = datasets.first().copied().unwrap_or("");
    let y_name = datasets.get(1).copied().unwrap_or(x_name);
    let mut s = frame("Dice per dataset", &format!("Dice on {x_name}"), &format!("Dice on {y_name}"));
    let (lo, hi) = ([0.0, 0.0], [1.0, 1.0]);
    ticks(&mut s, lo, hi);
    let mut approaches: BTreeMap<&str, [Option<f64>; 2]> = BTreeMap::new();
    let multi_fold = rows.iter().any(|r| r.fold == "mean");
    for r in rows.iter().filter(|r| !multi_fold || r.fold == "mean") {
        let e = approaches.entry(r.approach.as_str()).or_default();
        if r.dataset == x_name {
            e[0] = Some(r.mean_dice);
        }
        if r.dataset == y_name {
            e[1] = Some(r.mean_dice);
        }
    }
    for (i, (name, v)) in approaches.iter().enumerate() {
        if let [Some(x), Some(y)] = v {
            let (px, py) = project([*x, *y], lo, hi);
            let c = COLORS[i % COLORS.len()];
            let _ = write!(
                s,
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"4\" fill=\"{c}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                px + 6.0,
                py - 4.0,
                escape(name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Dice of each candidate by position, one line per dataset.
pub fn positional_svg(rows: &[PositionRow]) -> String {
    let mut s = frame("Stitch-ensembles by position", "candidate (0 = ensemble)", "Dice");
    let n = rows.len().max(2) - 1;
    let (lo, hi) = ([0.0, 0.0], [n as f64, 1.0]);
    ticks(&mut s, lo, hi);
    let datasets = rows.first().map(|r| r.metrics.len()).unwrap_or(0);
    for d in 0..datasets {
        let c = COLORS[d % COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .filter_map(|r| r.metrics.get(d).map(|m| project([r.candidate as f64, m.1], lo, hi)))
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = write!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", points.join(" "));
        if let Some(name) = rows[0].metrics.get(d).map(|m| &m.0) {
            let _ = write!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - M - 60.0, M + 14.0 * d as f64, escape(name));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `bi_objective.csv` and its plot, plus `positional.csv` and its
/// plot when candidate records are given.
pub fn write_report(records: &[EvaluationRecord], candidates: Option<&[EvaluationRecord]>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = bi_objective(records)?;
    let mut out = Vec::new();
    let csv_path = dir.join("bi_objective.csv");
    write_bi_objective(&rows, &csv_path)?;
    let svg = dir.join("bi_objective.svg");
    fs::write(&svg, bi_objective_svg(&rows)).map_err(|e| Error::io(&svg, e))?;
    out.extend([csv_path, svg]);
    if let Some(c) = candidates {
        let rows = positional(c)?;
        let csv_path = dir.join("positional.csv");
        write_positional(&rows, &csv_path)?;
        let svg = dir.join("positional.svg");
        fs::write(&svg, positional_svg(&rows)).map_err(|e| Error::io(&svg, e))?;
        out.extend([csv_path, svg]);
    }
    Ok(out)
}
