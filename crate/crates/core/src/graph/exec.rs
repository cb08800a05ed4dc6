use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{NetworkGraph, NodeId, NodeKind, StitchTransform};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Op, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Norm layers record batch statistics into their running buffers.
    Train,
    /// Norm statistics are left untouched.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    Original,
    Stitched,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSelector {
    HeadA,
    HeadB,
    AverageHeads,
}

/// Mode of every switch plus the output selector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SwitchConfig {
    /// Sorted by switch id.
    pub switches: Vec<(NodeId, SwitchMode)>,
    pub selector: OutputSelector,
}

impl SwitchConfig {
    pub fn uniform(switches: impl IntoIterator<Item = NodeId>, mode: SwitchMode, selector: OutputSelector) -> Self {
        SwitchConfig::new(switches.into_iter().map(|s| (s, mode)), selector)
    }

    pub fn new(switches: impl IntoIterator<Item = (NodeId, SwitchMode)>, selector: OutputSelector) -> Self {
        let mut switches: Vec<_> = switches.into_iter().collect();
        switches.sort();
        switches.dedup_by_key(|(id, _)| *id);
        SwitchConfig { switches, selector }
    }

    pub fn mode(&self, id: NodeId) -> Option<SwitchMode> {
        self.switches
            .binary_search_by_key(&id, |(s, _)| *s)
            .ok()
            .map(|i| self.switches[i].1)
    }

    pub fn set(&mut self, id: NodeId, mode: SwitchMode) {
        match self.switches.binary_search_by_key(&id, |(s, _)| *s) {
            Ok(i) => self.switches[i].1 = mode,
            Err(i) => self.switches.insert(i, (id, mode)),
        }
    }

    pub fn count(&self, mode: SwitchMode) -> usize {
        self.switches.iter().filter(|(_, m)| *m == mode).count()
    }
}

/// Decides what a switch node emits during a traced forward pass.
/// Either argument is `None` when dead-node elimination skipped its producer.
pub trait SwitchHandler {
    fn resolve(&mut self, tape: &mut Tape, switch: NodeId, original: Option<Var>, stitched: Option<Var>)
        -> Result<Var>;
}

fn produced(v: Option<Var>, switch: NodeId) -> Result<Var> {
    v.ok_or_else(|| Error::Malformed(format!("switch {switch} reads an eliminated value")))
}

/// Resolves switches from a fixed [`SwitchConfig`].
pub struct TableHandler<'a> {
    pub table: &'a SwitchConfig,
}

impl SwitchHandler for TableHandler<'_> {
    fn resolve(
        &mut self,
        tape: &mut Tape,
        switch: NodeId,
        original: Option<Var>,
        stitched: Option<Var>,
    ) -> Result<Var> {
        match self.table.mode(switch).ok_or(Error::MissingSwitch(switch.0))? {
            SwitchMode::Original => produced(original, switch),
            SwitchMode::Stitched => produced(stitched, switch),
            SwitchMode::Average => tape.apply(
                Op::ElementwiseMean,
                &[produced(original, switch)?, produced(stitched, switch)?],
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub node: NodeId,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOptions<'a> {
    pub mode: Mode,
    /// Record parameters as gradient-requiring leaves.
    pub grad: bool,
    pub selector: Option<OutputSelector>,
    /// Only evaluate these nodes.
    pub live: Option<&'a BTreeSet<NodeId>>,
}

impl TraceOptions<'_> {
    pub fn eval() -> Self {
        TraceOptions {
            mode: Mode::Eval,
            grad: false,
            selector: None,
            live: None,
        }
    }
}

/// Everything a traced forward pass recorded.
pub struct Trace {
    pub values: BTreeMap<NodeId, Var>,
    pub order: Vec<NodeId>,
    pub params: Vec<(NodeId, String, Var)>,
    pub norm_updates: Vec<NormUpdate>,
    pub output: Option<Var>,
}

impl Trace {
    pub fn value(&self, id: NodeId) -> Result<Var> {
        self.values.get(&id).copied().ok_or(Error::DanglingNode(id.0))
    }

    /// Moves gradients of traced parameters into the graph's tensors.
    pub fn accumulate(&self, grads: &Gradients, g: &mut NetworkGraph) -> Result<()> {
        for (node, key, var) in &self.params {
            if let Some(t) = g.node_mut(*node)?.params.get_mut(key) {
                grads.accumulate_into(*var, t)?;
            }
        }
        Ok(())
    }
}

/// Evaluates the graph on `tape` in canonical order.
pub fn trace(
    g: &NetworkGraph,
    tape: &mut Tape,
    input: Var,
    opts: TraceOptions<'_>,
    handler: &mut dyn SwitchHandler,
) -> Result<Trace> {
    let args = g.argument_table();
    let mut values: BTreeMap<NodeId, Var> = BTreeMap::new();
    let mut order = Vec::new();
    let mut params = Vec::new();
    let mut norm_updates = Vec::new();
    let mut output = None;
    let empty = Vec::new();

    for node in g.ordered() {
        if let Some(live) = opts.live {
            if !live.contains(&node.id) {
                continue;
            }
        }
        let arg_ids = args.get(&node.id).unwrap_or(&empty);
        let arg_opts: Vec<Option<Var>> = arg_ids.iter().map(|a| values.get(a).copied()).collect();
        let selective = matches!(node.kind, NodeKind::Output | NodeKind::Switch) && arg_ids.len() == 2;
        let mut arg_vars = Vec::with_capacity(arg_ids.len());
        if !selective {
            for (a, v) in arg_ids.iter().zip(&arg_opts) {
                arg_vars.push(v.ok_or_else(|| {
                    Error::Malformed(format!("node {} read node {a} before it was produced", node.id))
                })?);
            }
        }
        let mut param = |tape: &mut Tape, key: &str| -> Result<Var> {
            let t = node.param(key)?;
            let v = if opts.grad { tape.leaf(t) } else { tape.constant(t.detached()) };
            if opts.grad && t.requires_grad() {
                params.push((node.id, key.to_string(), v));
            }
            Ok(v)
        };
        let value = match &node.kind {
            NodeKind::Input => {
                let shape = tape.value(input).shape();
                if shape.len() != node.out_shape.len() + 1 || shape[1..] != node.out_shape[..] {
                    return Err(Error::shape(
                        "execute",
                        format!("input {shape:?} does not match per-sample shape {:?}", node.out_shape),
                    ));
                }
                input
            }
            NodeKind::Output if selective => {
                let head = |i: usize| produced(arg_opts[i], node.id);
                match opts.selector {
                    Some(OutputSelector::HeadA) => head(0)?,
                    Some(OutputSelector::HeadB) => head(1)?,
                    Some(OutputSelector::AverageHeads) => tape.apply(Op::ElementwiseMean, &[head(0)?, head(1)?])?,
                    None => return Err(Error::InvalidConfig("combined network needs an output selector".into())),
                }
            }
            NodeKind::Output => match arg_vars.as_slice() {
                [single] => *single,
                _ => return Err(Error::Malformed(format!("output node has {} arguments", arg_vars.len()))),
            },
            NodeKind::Operator { op } => match op {
                Op::Conv2d { .. } | Op::Conv2d1x1 | Op::Linear | Op::InstanceNorm { .. } => {
                    let w = param(tape, "weight")?;
                    let b = param(tape, "bias")?;
                    let x = arg_vars[0];
                    if opts.mode == Mode::Train && matches!(op, Op::InstanceNorm { .. }) {
                        norm_updates.push(batch_statistics(node.id, tape.value(x)));
                    }
                    tape.apply(op.clone(), &[x, w, b])?
                }
                other => tape.apply(other.clone(), &arg_vars)?,
            },
            NodeKind::Stitch { transform } => {
                let w = param(tape, "weight")?;
                let b = param(tape, "bias")?;
                let op = match transform {
                    StitchTransform::Conv1x1 => Op::Conv2d1x1,
                    StitchTransform::Linear => Op::Linear,
                };
                tape.apply(op, &[arg_vars[0], w, b])?
            }
            NodeKind::Switch if selective => handler.resolve(tape, node.id, arg_opts[0], arg_opts[1])?,
            NodeKind::Switch => return Err(Error::Malformed(format!("switch {} needs two arguments", node.id))),
        };
        if matches!(node.kind, NodeKind::Output) {
            output = Some(value);
        }
        values.insert(node.id, value);
        order.push(node.id);
    }
    Ok(Trace {
        values,
        order,
        params,
        norm_updates,
        output,
    })
}

/// Nodes needed to produce the output under `table`.
pub fn live_nodes(g: &NetworkGraph, table: Option<&SwitchConfig>) -> Result<BTreeSet<NodeId>> {
    let args = g.argument_table();
    let mut live = BTreeSet::new();
    let mut stack = vec![g.output()?];
    while let Some(id) = stack.pop() {
        if !live.insert(id) {
            continue;
        }
        let a = args.get(&id).cloned().unwrap_or_default();
        let node = g.node(id)?;
        let needed: Vec<NodeId> = match (&node.kind, a.as_slice()) {
            (NodeKind::Output, [head_a, head_b]) => match table.map(|t| t.selector) {
                Some(OutputSelector::HeadA) => vec![*head_a],
                Some(OutputSelector::HeadB) => vec![*head_b],
                _ => vec![*head_a, *head_b],
            },
            (NodeKind::Switch, [orig, stitched]) => match table.and_then(|t| t.mode(id)) {
                Some(SwitchMode::Original) => vec![*orig],
                Some(SwitchMode::Stitched) => vec![*stitched],
                _ => vec![*orig, *stitched],
            },
            _ => a,
        };
        stack.extend(needed);
    }
    Ok(live)
}

fn check_table(g: &NetworkGraph, table: Option<&SwitchConfig>) -> Result<()> {
    for n in g.nodes() {
        if matches!(n.kind, NodeKind::Switch) && table.and_then(|t| t.mode(n.id)).is_none() {
            return Err(Error::MissingSwitch(n.id.0));
        }
    }
    Ok(())
}

/// Runs the graph on `input` (batch axis first) and returns the output.
pub fn execute(g: &NetworkGraph, input: &Tensor, mode: Mode, table: Option<&SwitchConfig>) -> Result<Tensor> {
    execute_with(g, input, mode, table, true)
}

/// As [`execute`]; `eliminate_dead` skips nodes whose value cannot reach
/// the output under `table`.
pub fn execute_with(
    g: &NetworkGraph,
    input: &Tensor,
    mode: Mode,
    table: Option<&SwitchConfig>,
    eliminate_dead: bool,
) -> Result<Tensor> {
    check_table(g, table)?;
    let live = if eliminate_dead { Some(live_nodes(g, table)?) } else { None };
    let mut tape = Tape::new();
    let x = tape.constant(input.detached());
    let empty = SwitchConfig::new([], OutputSelector::HeadA);
    let mut handler = TableHandler {
        table: table.unwrap_or(&empty),
    };
    let opts = TraceOptions {
        mode,
        grad: false,
        selector: table.map(|t| t.selector),
        live: live.as_ref(),
    };
    let tr = trace(g, &mut tape, x, opts, &mut handler)?;
    let out = tr.output.ok_or_else(|| Error::Malformed("graph produced no output".into()))?;
    Ok(tape.value(out).detached())
}

fn batch_statistics(node: NodeId, x: &Tensor) -> NormUpdate {
    let s = x.shape();
    let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let count = (n * inner) as f64;
    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    for ci in 0..c {
        let mut sum = 0f64;
        let mut sq = 0f64;
        for ni in 0..n {
            for &v in &x.data()[(ni * c + ci) * inner..(ni * c + ci + 1) * inner] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let m = sum / count;
        mean[ci] = m as f32;
        var[ci] = (sq / count - m * m).max(0.0) as f32;
    }
    NormUpdate { node, mean, var }
}

pub const NORM_MOMENTUM: f32 = 0.1;

/// Folds batch statistics from a training pass into running buffers.
pub fn apply_norm_updates(g: &mut NetworkGraph, updates: &[NormUpdate]) -> Result<()> {
    for u in updates {
        let node = g.node_mut(u.node)?;
        for (key, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            if let Some(buf) = node.buffers.get_mut(key) {
                for (r, &s) in buf.data_mut().iter_mut().zip(stat.iter()) {
                    *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * s;
                }
            }
        }
    }
    Ok(())
}
