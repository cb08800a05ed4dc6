//! Segmentation metrics, grouped data splitting, stitch-ensemble
//! enumeration and stitch selection.

mod metrics;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataView;
use crate::error::{Error, Result};
use crate::graph::SwitchConfig;
use crate::stitching::StitchedNetwork;
use crate::tensor::Tensor;

pub use metrics::{boundary, dice, hd95, hd95_with, percentile, ConfusionCounts, HdMode};
pub use split::{bin_cover, split_dataset, Split, SplitPlan, FOLDS};

/// Metrics of one sample under one approach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub approach: String,
    pub fold: usize,
    pub dataset: String,
    pub sample: usize,
    pub dice: f64,
    pub hd95: f64,
}

pub fn write_records(records: &[EvaluationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["approach", "fold", "dataset", "sample", "dice", "hd95"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Foreground mask from `[n, 2, h, w]` class probabilities: foreground
/// probability above 0.5.
pub fn threshold(probs: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = probs.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape("threshold", format!("expected [n, 2, h, w], got {s:?}")));
    }
    let plane = s[2] * s[3];
    Ok((0..s[0])
        .map(|i| {
            probs.data()[(2 * i + 1) * plane..(2 * i + 2) * plane]
                .iter()
                .map(|&p| u8::from(p > 0.5))
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct EvalContext<'a> {
    pub approach: &'a str,
    pub fold: usize,
    pub spacing: [f64; 2],
    pub batch: usize,
}

/// Runs `predict` over `view` in batches and scores every sample.
pub fn evaluate_view(
    view: &DataView<'_>,
    ctx: &EvalContext<'_>,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<EvaluationRecord>> {
    let size = view.data.size;
    let positions: Vec<usize> = (0..view.len()).collect();
    let mut out = Vec::with_capacity(view.len());
    for chunk in positions.chunks(ctx.batch.max(1)) {
        let x = view.images(chunk)?;
        let probs = predict(&x)?;
        let preds = threshold(&probs)?;
        for ((id, mask), pred) in view.masks(chunk)?.into_iter().zip(preds) {
            let c = ConfusionCounts::from_masks(&pred, mask)?;
            out.push(EvaluationRecord {
                approach: ctx.approach.to_string(),
                fold: ctx.fold,
                dataset: view.data.owner.clone(),
                sample: id,
                dice: dice(&c),
                hd95: hd95(&pred, mask, size, size, ctx.spacing)?,
            });
        }
    }
    Ok(out)
}

pub fn mean_dice(records: &[EvaluationRecord]) -> f64 {
    records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64
}

pub fn mean_hd95(records: &[EvaluationRecord]) -> f64 {
    records.iter().map(|r| r.hd95).sum::<f64>() / records.len() as f64
}

/// A candidate network in the stitch-ensemble enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCandidate {
    /// `None` for the plain ensemble with shared input.
    pub pair: Option<usize>,
    pub config: SwitchConfig,
}

impl EnsembleCandidate {
    pub fn label(&self) -> String {
        match self.pair {
            Some(k) => format!("stitch{k}"),
            None => "ensemble".into(),
        }
    }
}

/// The baseline ensemble followed by one averaged-pair network per pair.
pub fn enumerate_stitch_ensembles(net: &StitchedNetwork) -> Result<Vec<EnsembleCandidate>> {
    let mut out = vec![EnsembleCandidate {
        pair: None,
        config: net.uniform_config(crate::graph::SwitchMode::Original, crate::graph::OutputSelector::AverageHeads),
    }];
    for k in 0..net.pairs.len() {
        out.push(EnsembleCandidate {
            pair: Some(k),
            config: net.pair_ensemble_config(k)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchRank {
    pub stitch: usize,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub dice_rank: f64,
    pub hd95_rank: f64,
    /// Mean of the two ranks; lower is better.
    pub summary: f64,
}

/// 1-based ranks, ties sharing their average rank. `better(a, b)` is true
/// when `a` ranks ahead of `b`.
fn average_ranks(values: &[f64], better: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let ahead = values.iter().filter(|&&w| better(w, v)).count();
            let tied = values.iter().filter(|&&w| w == v).count();
            ahead as f64 + (tied as f64 + 1.0) / 2.0
        })
        .collect()
}

/// Ranks stitches `0..count` by mean Dice (descending) and mean HD95
/// (ascending) over identical sample sets.
pub fn rank_stitches(records: &BTreeMap<usize, Vec<EvaluationRecord>>, count: usize) -> Result<Vec<StitchRank>> {
    let mut reference: Option<BTreeSet<(String, usize)>> = None;
    let mut dice_means = Vec::with_capacity(count);
    let mut hd_means = Vec::with_capacity(count);
    for k in 0..count {
        let rs = records.get(&k).filter(|r| !r.is_empty()).ok_or(Error::MissingRecords(k))?;
        let samples: BTreeSet<(String, usize)> = rs.iter().map(|r| (r.dataset.clone(), r.sample)).collect();
        match &reference {
            None => reference = Some(samples),
            Some(s) if *s != samples => return Err(Error::MissingRecords(k)),
            Some(_) => {}
        }
        dice_means.push(mean_dice(rs));
        hd_means.push(mean_hd95(rs));
    }
    let dr = average_ranks(&dice_means, |a, b| a > b);
    let hr = average_ranks(&hd_means, |a, b| a < b);
    Ok((0..count)
        .map(|k| StitchRank {
            stitch: k,
            mean_dice: dice_means[k],
            mean_hd95: hd_means[k],
            dice_rank: dr[k],
            hd95_rank: hr[k],
            summary: (dr[k] + hr[k]) / 2.0,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy", content = "fold")]
pub enum Strategy {
    /// Lowest summary in the current fold.
    CurrentFold(usize),
    /// Lowest fold-averaged summary.
    AllFolds,
    /// Lowest summary averaged over every network, dataset and fold.
    Overall,
}

impl Strategy {
    pub fn number(&self) -> u8 {
        match self {
            Strategy::CurrentFold(_) => 1,
            Strategy::AllFolds => 2,
            Strategy::Overall => 3,
        }
    }
}

/// Summary ranks indexed `[context][stitch]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionInput {
    /// One row per fold of the network and dataset being selected for.
    pub per_fold: Vec<Vec<f64>>,
    /// Rows for every network, dataset and fold considered.
    pub overall: Vec<Vec<f64>>,
}

fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn column_means(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let width = rows.first().map(Vec::len).ok_or_else(|| Error::Empty("summary table".into()))?;
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape("select_stitch", "summary rows differ in length"));
    }
    Ok((0..width)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect())
}

/// Index of the selected stitch; ties go to the lowest index.
pub fn select_stitch(strategy: Strategy, input: &SelectionInput) -> Result<usize> {
    let scores = match strategy {
        Strategy::CurrentFold(k) => input
            .per_fold
            .get(k)
            .cloned()
            .ok_or_else(|| Error::OutOfRange(format!("fold {k}")))?,
        Strategy::AllFolds => column_means(&input.per_fold)?,
        Strategy::Overall => column_means(&input.overall)?,
    };
    argmin(&scores).ok_or_else(|| Error::Empty("no stitches to select from".into()))
}
