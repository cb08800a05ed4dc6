//! Networks as directed acyclic operator graphs.
//!
//! Edges carry the argument position they feed, nodes carry their spatial
//! scale (the number of 2x downsamplings applied so far) and their
//! per-sample output shape. The canonical topological order is insertion
//! order.

mod document;
mod exec;
mod progress;
mod template;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Op, Tensor};

pub use document::{deserialize, load_graph, save_graph, serialize, GraphDocument, NodeDocument, GRAPH_DOCUMENT_VERSION};
pub use exec::{
    apply_norm_updates, execute, execute_with, live_nodes, trace, Mode, NormUpdate, OutputSelector, SwitchConfig,
    SwitchHandler, SwitchMode, TableHandler, Trace, TraceOptions,
};
pub use progress::{annotate_progress, ProgressAnnotation};
pub use template::{build_unet_template, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchTransform {
    Conv1x1,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    /// One argument for a plain network; two (head A, head B) in a combined
    /// network, resolved by the [`OutputSelector`].
    Output,
    Operator { op: Op },
    Stitch { transform: StitchTransform },
    /// Arguments: original activation, stitched activation.
    Switch,
}

impl NodeKind {
    pub fn op(&self) -> Option<&Op> {
        match self {
            NodeKind::Operator { op } => Some(op),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Output => "output",
            NodeKind::Operator { op } => op.name(),
            NodeKind::Stitch { .. } => "stitch",
            NodeKind::Switch => "switch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    /// Learnable tensors, keyed `weight` / `bias`.
    pub params: BTreeMap<String, Tensor>,
    /// Non-learnable state such as running norm statistics.
    pub buffers: BTreeMap<String, Tensor>,
    pub scale: i32,
    pub insertion_index: usize,
    /// Output shape of one sample (no batch axis).
    pub out_shape: Vec<usize>,
}

impl GraphNode {
    pub fn param(&self, key: &str) -> Result<&Tensor> {
        self.params
            .get(key)
            .ok_or_else(|| Error::Malformed(format!("node {} has no parameter `{key}`", self.id)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub arg: usize,
}

/// Specification of a node to append with [`NetworkGraph::add_node`].
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub label: String,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub scale: i32,
    pub out_shape: Vec<usize>,
}

impl NodeSpec {
    pub fn new(kind: NodeKind, label: impl Into<String>, scale: i32, out_shape: Vec<usize>) -> Self {
        NodeSpec {
            kind,
            label: label.into(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            scale,
            out_shape,
        }
    }

    pub fn with_param(mut self, key: &str, t: Tensor) -> Self {
        self.params.insert(key.to_string(), t);
        self
    }

    pub fn with_buffer(mut self, key: &str, t: Tensor) -> Self {
        self.buffers.insert(key.to_string(), t);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    edges: Vec<Edge>,
    input: Option<NodeId>,
    output: Option<NodeId>,
    next_id: usize,
}

impl NetworkGraph {
    pub fn new() -> Self {
        NetworkGraph::default()
    }

    /// Appends a node consuming `inputs` as arguments `0..inputs.len()`.
    pub fn add_node(&mut self, spec: NodeSpec, inputs: &[NodeId]) -> Result<NodeId> {
        for i in inputs {
            if !self.nodes.contains_key(i) {
                return Err(Error::DanglingNode(i.0));
            }
        }
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let is_input = matches!(spec.kind, NodeKind::Input);
        let is_output = matches!(spec.kind, NodeKind::Output);
        if is_input && self.input.is_some() {
            return Err(Error::InvalidConfig("graph already has an input node".into()));
        }
        if is_output && self.output.is_some() {
            return Err(Error::InvalidConfig("graph already has an output node".into()));
        }
        let insertion_index = self.nodes.len();
        self.nodes.insert(
            id,
            GraphNode {
                id,
                kind: spec.kind,
                label: spec.label,
                params: spec.params,
                buffers: spec.buffers,
                scale: spec.scale,
                insertion_index,
                out_shape: spec.out_shape,
            },
        );
        for (arg, &from) in inputs.iter().enumerate() {
            self.edges.push(Edge { from, to: id, arg });
        }
        if is_input {
            self.input = Some(id);
        }
        if is_output {
            self.output = Some(id);
        }
        Ok(id)
    }

    /// Reassembles a graph from parts, validating every structural invariant.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: Vec<Edge>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut input = None;
        let mut output = None;
        for n in nodes {
            match n.kind {
                NodeKind::Input if input.replace(n.id).is_some() => {
                    return Err(Error::Malformed("more than one input node".into()))
                }
                NodeKind::Output if output.replace(n.id).is_some() => {
                    return Err(Error::Malformed("more than one output node".into()))
                }
                _ => {}
            }
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(Error::Malformed(format!("duplicate node id {id}")));
            }
        }
        let next_id = map.keys().next_back().map_or(0, |id| id.0 + 1);
        let g = NetworkGraph {
            nodes: map,
            edges,
            input,
            output,
            next_id,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn input(&self) -> Result<NodeId> {
        self.input.ok_or_else(|| Error::Malformed("graph has no input node".into()))
    }

    pub fn output(&self) -> Result<NodeId> {
        self.output.ok_or_else(|| Error::Malformed("graph has no output node".into()))
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes.get(&id).ok_or(Error::DanglingNode(id.0))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut GraphNode> {
        self.nodes.get_mut(&id).ok_or(Error::DanglingNode(id.0))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    /// Nodes in the canonical (insertion) order.
    pub fn ordered(&self) -> Vec<&GraphNode> {
        let mut v: Vec<&GraphNode> = self.nodes.values().collect();
        v.sort_by_key(|n| n.insertion_index);
        v
    }

    pub fn ordered_ids(&self) -> Vec<NodeId> {
        self.ordered().into_iter().map(|n| n.id).collect()
    }

    /// Producers of `id`, by argument position.
    pub fn arguments(&self, id: NodeId) -> Vec<NodeId> {
        let mut args: Vec<&Edge> = self.edges.iter().filter(|e| e.to == id).collect();
        args.sort_by_key(|e| e.arg);
        args.into_iter().map(|e| e.from).collect()
    }

    pub fn argument_table(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut table: BTreeMap<NodeId, Vec<(usize, NodeId)>> = BTreeMap::new();
        for e in &self.edges {
            table.entry(e.to).or_default().push((e.arg, e.from));
        }
        table
            .into_iter()
            .map(|(k, mut v)| {
                v.sort();
                (k, v.into_iter().map(|(_, f)| f).collect())
            })
            .collect()
    }

    pub fn successors(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = self.nodes.keys().map(|&k| (k, Vec::new())).collect();
        for e in &self.edges {
            succ.entry(e.from).or_default().push(e.to);
        }
        succ
    }

    pub fn in_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.to == id).count()
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.from == id).count()
    }

    /// Kahn's algorithm, ties broken by insertion index.
    pub fn topological_sort(&self) -> Result<Vec<NodeId>> {
        topo_sort(
            self.nodes.keys().copied(),
            self.edges.iter().map(|e| (e.from, e.to)),
            |id| self.nodes[&id].insertion_index,
        )
        .ok_or(Error::CyclicGraph)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if !self.nodes.contains_key(&e.from) {
                return Err(Error::DanglingNode(e.from.0));
            }
            if !self.nodes.contains_key(&e.to) {
                return Err(Error::DanglingNode(e.to.0));
            }
        }
        let mut args: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for e in &self.edges {
            args.entry(e.to).or_default().push(e.arg);
        }
        for (id, mut positions) in args {
            positions.sort_unstable();
            if positions.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::Malformed(format!(
                    "argument positions of node {id} are not dense: {positions:?}"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for n in self.nodes.values() {
            if !seen.insert(n.insertion_index) {
                return Err(Error::Malformed(format!("duplicate insertion index {}", n.insertion_index)));
            }
        }
        if let Some(i) = self.input {
            if self.in_degree(i) != 0 {
                return Err(Error::Malformed("input node has producers".into()));
            }
        }
        if let Some(o) = self.output {
            if self.out_degree(o) != 0 {
                return Err(Error::Malformed("output node has consumers".into()));
            }
        }
        self.topological_sort()?;
        for e in &self.edges {
            if self.nodes[&e.from].insertion_index >= self.nodes[&e.to].insertion_index {
                return Err(Error::Malformed(format!(
                    "insertion order is not topological at edge {} -> {}",
                    e.from, e.to
                )));
            }
        }
        Ok(())
    }

    /// All learnable tensors as `(n<id>.<key>, tensor)`, in id order.
    pub fn parameters(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.nodes
            .values()
            .flat_map(|n| n.params.iter().map(move |(k, t)| (format!("n{}.{k}", n.id), t)))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.nodes
            .values_mut()
            .flat_map(|n| {
                let id = n.id;
                n.params.iter_mut().map(move |(k, t)| (format!("n{id}.{k}"), t))
            })
    }

    pub fn buffers(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.nodes
            .values()
            .flat_map(|n| n.buffers.iter().map(move |(k, t)| (format!("n{}.{k}", n.id), t)))
    }

    /// Marks parameters of nodes accepted by `pred` as trainable, all others
    /// frozen.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&GraphNode) -> bool) {
        for n in self.nodes.values_mut() {
            let trainable = pred(n);
            for t in n.params.values_mut() {
                t.set_requires_grad(trainable);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for n in self.nodes.values_mut() {
            n.params.values_mut().for_each(Tensor::zero_grad);
        }
    }

    /// Whether two graphs have the same nodes, edges and shapes, ignoring
    /// parameter values.
    pub fn same_structure(&self, other: &NetworkGraph) -> bool {
        let mut ea = self.edges.clone();
        let mut eb = other.edges.clone();
        ea.sort();
        eb.sort();
        ea == eb
            && self.nodes.len() == other.nodes.len()
            && self.nodes.values().zip(other.nodes.values()).all(|(a, b)| {
                a.id == b.id
                    && a.kind == b.kind
                    && a.scale == b.scale
                    && a.insertion_index == b.insertion_index
                    && a.out_shape == b.out_shape
                    && a.params.keys().eq(b.params.keys())
                    && a.params.values().zip(b.params.values()).all(|(x, y)| x.shape() == y.shape())
            })
    }

    /// Whether a directed path leads from `from` to `to`.
    pub fn has_path(&self, from: NodeId, to: NodeId) -> bool {
        let succ = self.successors();
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                stack.extend(succ.get(&n).into_iter().flatten().copied());
            }
        }
        false
    }
}

/// Deterministic Kahn sort; `None` when the edges contain a cycle.
pub(crate) fn topo_sort<K: Ord + Copy>(
    nodes: impl IntoIterator<Item = NodeId>,
    edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    key: impl Fn(NodeId) -> K,
) -> Option<Vec<NodeId>> {
    let mut indeg: BTreeMap<NodeId, usize> = nodes.into_iter().map(|n| (n, 0)).collect();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (from, to) in edges {
        *indeg.entry(to).or_default() += 1;
        indeg.entry(from).or_default();
        succ.entry(from).or_default().push(to);
    }
    let mut ready: BinaryHeap<Reverse<(K, NodeId)>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&n, _)| Reverse((key(n), n)))
        .collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(Reverse((_, n))) = ready.pop() {
        order.push(n);
        for &m in succ.get(&n).into_iter().flatten() {
            let d = indeg.get_mut(&m).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse((key(m), m)));
            }
        }
    }
    (order.len() == indeg.len()).then_some(order)
}
