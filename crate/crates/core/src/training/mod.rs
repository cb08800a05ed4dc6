//! Stitch training with frozen host networks.
//!
//! Direct matching regresses every stitch onto the reference activation it
//! replaces. Double-batched training feeds every sample twice: slot 1
//! carries the unstitched reference through the whole graph, slot 2 a
//! randomly stitched variant, so each switch sees four versions of its
//! feature map and downstream effects of earlier stitches enter the loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataView;
use crate::error::{Error, Result};
use crate::graph::{trace, Mode, NodeId, NodeKind, OutputSelector, SwitchHandler, TraceOptions};
use crate::stitching::StitchedNetwork;
use crate::tensor::{schedule_lr, AdamW, Checkpoint, Op, Schedule, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchMethod {
    Direct,
    DoubleBatched,
}

/// Which variant pairs the double-batched loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPairing {
    /// `mse(v1, v2) + mse(v1, v3) + mse(v1, v4)`.
    ReferenceAnchored,
    /// `mse(v1, v2) + mse(v3, v4)`.
    Pairwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchTrainConfig {
    pub method: StitchMethod,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Unique samples per batch; the method default when `None`.
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: u64,
    pub pairing: LossPairing,
    /// When false the forwarded slot always carries the reference.
    pub forwarding: bool,
}

impl Default for StitchTrainConfig {
    fn default() -> Self {
        StitchTrainConfig {
            method: StitchMethod::Direct,
            lr: 1e-3,
            weight_decay: 1e-3,
            schedule: Schedule::Cosine,
            batch_size: None,
            epochs: None,
            seed: 0,
            pairing: LossPairing::ReferenceAnchored,
            forwarding: true,
        }
    }
}

impl StitchTrainConfig {
    pub fn new(method: StitchMethod) -> Self {
        StitchTrainConfig {
            method,
            ..StitchTrainConfig::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.method {
            StitchMethod::Direct => 5,
            StitchMethod::DoubleBatched => 2,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.method {
            StitchMethod::Direct => 30,
            StitchMethod::DoubleBatched => 15,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() == 0 || self.epochs() == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    /// Loss at every switch, in canonical switch order.
    pub per_switch: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchTrainReport {
    pub method: StitchMethod,
    pub switches: Vec<NodeId>,
    pub curve: Vec<LossRecord>,
}

impl StitchTrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "step".to_string()];
        header.extend(self.switches.iter().map(|s| format!("switch_{s}")));
        header.push("total".into());
        w.write_record(&header)?;
        for r in &self.curve {
            let mut row = vec![r.epoch.to_string(), r.step.to_string()];
            row.extend(r.per_switch.iter().map(|v| v.to_string()));
            row.push(r.total.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn final_total(&self) -> Option<f64> {
        self.curve.last().map(|r| r.total)
    }
}

/// Collects one loss term per switch and always propagates the original.
struct DirectHandler {
    losses: Vec<(NodeId, Var)>,
}

impl SwitchHandler for DirectHandler {
    fn resolve(&mut self, tape: &mut Tape, switch: NodeId, original: Option<Var>, stitched: Option<Var>) -> Result<Var> {
        let missing = || Error::Malformed(format!("switch {switch} lacks an input during stitch training"));
        let (o, s) = (original.ok_or_else(missing)?, stitched.ok_or_else(missing)?);
        self.losses.push((switch, tape.apply(Op::Mse, &[s, o])?));
        Ok(o)
    }
}

struct DoubleBatchedHandler<'r> {
    half: usize,
    pairing: LossPairing,
    forwarding: bool,
    rng: &'r mut ChaCha8Rng,
    losses: Vec<(NodeId, Var)>,
}

impl SwitchHandler for DoubleBatchedHandler<'_> {
    fn resolve(&mut self, tape: &mut Tape, switch: NodeId, original: Option<Var>, stitched: Option<Var>) -> Result<Var> {
        let missing = || Error::Malformed(format!("switch {switch} lacks an input during stitch training"));
        let (o, s) = (original.ok_or_else(missing)?, stitched.ok_or_else(missing)?);
        let n = self.half;
        if tape.value(o).shape()[0] != 2 * n {
            return Err(Error::shape("double_batched", "switch input is not a doubled batch"));
        }
        let first = Op::BatchSlice { start: 0, len: n };
        let second = Op::BatchSlice { start: n, len: n };
        let v1 = tape.apply(first.clone(), &[o])?;
        let v2 = tape.apply(second.clone(), &[o])?;
        let v3 = tape.apply(first, &[s])?;
        let v4 = tape.apply(second, &[s])?;
        let terms = match self.pairing {
            LossPairing::ReferenceAnchored => vec![(v1, v2), (v1, v3), (v1, v4)],
            LossPairing::Pairwise => vec![(v1, v2), (v3, v4)],
        };
        let mut loss = None;
        for (x, y) in terms {
            let t = tape.apply(Op::Mse, &[y, x])?;
            loss = Some(match loss {
                None => t,
                Some(acc) => tape.apply(Op::Add, &[acc, t])?,
            });
        }
        self.losses.push((switch, loss.expect("at least one term")));
        // Drawn on every call so the random stream does not depend on the
        // forwarding flag.
        let pick = [v1, v2, v3, v4][self.rng.gen_range(0..4)];
        let forwarded = if self.forwarding { pick } else { v1 };
        tape.apply(Op::BatchConcat, &[v1, forwarded])
    }
}

/// `[x; x]` along the batch axis.
fn doubled(x: &Tensor) -> Result<Tensor> {
    let mut shape = x.shape().to_vec();
    shape[0] *= 2;
    Tensor::new(shape, Tensor::stack(&[x, x])?.into_data())
}

fn sum_losses(tape: &mut Tape, losses: &[(NodeId, Var)]) -> Result<Var> {
    let mut iter = losses.iter();
    let (_, first) = iter.next().ok_or_else(|| Error::Empty("no switch produced a loss".into()))?;
    let mut total = *first;
    for (_, l) in iter {
        total = tape.apply(Op::Add, &[total, *l])?;
    }
    Ok(total)
}

/// Losses of one batch; gradients are accumulated into the stitch tensors
/// when `learn` is set.
pub fn stitch_loss(net: &mut StitchedNetwork, x: &Tensor, cfg: &StitchTrainConfig, rng: &mut ChaCha8Rng, learn: bool) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let n = x.shape()[0];
    let opts = TraceOptions {
        mode: Mode::Eval,
        grad: learn,
        selector: Some(OutputSelector::AverageHeads),
        live: None,
    };
    let (tr, losses) = match cfg.method {
        StitchMethod::Direct => {
            let input = tape.constant(x.detached());
            let mut h = DirectHandler { losses: Vec::new() };
            let tr = trace(&net.graph, &mut tape, input, opts, &mut h)?;
            (tr, h.losses)
        }
        StitchMethod::DoubleBatched => {
            let input = tape.constant(doubled(x)?);
            let mut h = DoubleBatchedHandler {
                half: n,
                pairing: cfg.pairing,
                forwarding: cfg.forwarding,
                rng,
                losses: Vec::new(),
            };
            let tr = trace(&net.graph, &mut tape, input, opts, &mut h)?;
            (tr, h.losses)
        }
    };
    let total = sum_losses(&mut tape, &losses)?;
    let per_switch: Vec<f64> = losses.iter().map(|(_, v)| tape.value(*v).data()[0] as f64).collect();
    let total_value = tape.value(total).data()[0] as f64;
    if !total_value.is_finite() {
        return Err(Error::NonFinite(format!("stitch loss ({:?})", cfg.method)));
    }
    if learn {
        let grads = tape.backward(total)?;
        tr.accumulate(&grads, &mut net.graph)?;
    }
    Ok((per_switch, total_value))
}

/// Trains the stitches of `net` on the images of `data`. Host parameters
/// and norm statistics are never written.
pub fn train_stitches(net: &mut StitchedNetwork, data: &DataView<'_>, cfg: &StitchTrainConfig) -> Result<StitchTrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("stitch training data".into()));
    }
    let switches = net.switches();
    if switches.is_empty() {
        return Err(Error::Empty("the network has no switches to train".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let epochs = cfg.epochs();
    let bs = cfg.batch_size();
    let mut curve = Vec::new();
    let mut step = 0;
    net.graph.zero_grad();
    for epoch in 0..epochs {
        opt.lr = schedule_lr(&cfg.schedule, cfg.lr, epoch, epochs)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let x = data.images(chunk)?;
            let (per_switch, total) = stitch_loss(net, &x, cfg, &mut rng, true)?;
            opt.step(net.graph.parameters_mut())?;
            curve.push(LossRecord {
                epoch,
                step,
                per_switch,
                total,
            });
            step += 1;
        }
    }
    Ok(StitchTrainReport {
        method: cfg.method,
        switches,
        curve,
    })
}

/// Stitch parameters only, named as in [`NetworkGraph::parameters`](crate::graph::NetworkGraph::parameters).
pub fn stitch_checkpoint(net: &StitchedNetwork) -> Checkpoint {
    Checkpoint::from_tensors(net.graph.nodes().filter(|n| matches!(n.kind, NodeKind::Stitch { .. })).flat_map(|n| {
        n.params.iter().map(move |(k, t)| (format!("n{}.{k}", n.id), t))
    }))
}

/// Loads stitch parameters saved with [`stitch_checkpoint`].
pub fn load_stitches(net: &mut StitchedNetwork, ck: &Checkpoint) -> Result<()> {
    for (name, t) in ck.tensors()? {
        let (node, key) = name
            .strip_prefix('n')
            .and_then(|s| s.split_once('.'))
            .ok_or_else(|| Error::Malformed(format!("parameter name `{name}`")))?;
        let id = NodeId(node.parse().map_err(|_| Error::Malformed(format!("parameter name `{name}`")))?);
        let n = net.graph.node_mut(id)?;
        if !matches!(n.kind, NodeKind::Stitch { .. }) {
            return Err(Error::Malformed(format!("node {id} is not a stitch")));
        }
        let slot = n
            .params
            .get_mut(key)
            .ok_or_else(|| Error::Malformed(format!("stitch {id} has no `{key}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("load_stitches", format!("{:?} vs {:?}", slot.shape(), t.shape())));
        }
        *slot = t.with_requires_grad(true);
    }
    Ok(())
}

pub fn save_report(report: &StitchTrainReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}
