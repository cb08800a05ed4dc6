use std::collections::BTreeMap;

use super::MatchPair;
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeId, NodeKind};

/// Node of the graph obtained by joining two networks at matched pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum CombinedNode {
    Input,
    A(NodeId),
    B(NodeId),
    /// Reads the raw output of pair `k`'s node in A.
    StitchAB(usize),
    StitchBA(usize),
    /// Replaces pair `k`'s node in A for all its consumers.
    SwitchA(usize),
    SwitchB(usize),
    Output,
}

/// Nodes and `(from, to, arg)` edges of the combined graph, indices into
/// the node list. Nodes are listed A first, then B, then per pair the
/// stitches and switches; the list is not necessarily topological.
pub(crate) fn combined_structure(
    a: &NetworkGraph,
    b: &NetworkGraph,
    pairs: &[MatchPair],
) -> Result<(Vec<CombinedNode>, Vec<(usize, usize, usize)>)> {
    let mut nodes = vec![CombinedNode::Input];
    for n in a.ordered() {
        if !matches!(n.kind, NodeKind::Input | NodeKind::Output) {
            nodes.push(CombinedNode::A(n.id));
        }
    }
    for n in b.ordered() {
        if !matches!(n.kind, NodeKind::Input | NodeKind::Output) {
            nodes.push(CombinedNode::B(n.id));
        }
    }
    for k in 0..pairs.len() {
        nodes.extend([
            CombinedNode::StitchAB(k),
            CombinedNode::StitchBA(k),
            CombinedNode::SwitchA(k),
            CombinedNode::SwitchB(k),
        ]);
    }
    nodes.push(CombinedNode::Output);
    let index: BTreeMap<CombinedNode, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let idx = |n: CombinedNode| index.get(&n).copied().ok_or_else(|| Error::Malformed(format!("{n:?} is not in the combined graph")));

    let switch_a: BTreeMap<NodeId, usize> = pairs.iter().enumerate().map(|(k, p)| (p.a, k)).collect();
    let switch_b: BTreeMap<NodeId, usize> = pairs.iter().enumerate().map(|(k, p)| (p.b, k)).collect();
    let (in_a, in_b) = (a.input()?, b.input()?);
    let (out_a, out_b) = (a.output()?, b.output()?);

    let source = |g_is_a: bool, u: NodeId| -> CombinedNode {
        let (input, switches) = if g_is_a { (in_a, &switch_a) } else { (in_b, &switch_b) };
        if u == input {
            CombinedNode::Input
        } else if let Some(&k) = switches.get(&u) {
            if g_is_a {
                CombinedNode::SwitchA(k)
            } else {
                CombinedNode::SwitchB(k)
            }
        } else if g_is_a {
            CombinedNode::A(u)
        } else {
            CombinedNode::B(u)
        }
    };

    let mut edges = Vec::new();
    for (g, is_a, out) in [(a, true, out_a), (b, false, out_b)] {
        for e in g.edges() {
            let from = idx(source(is_a, e.from))?;
            if e.to == out {
                if e.arg != 0 {
                    return Err(Error::Malformed("a parent network must have a single output argument".into()));
                }
                edges.push((from, idx(CombinedNode::Output)?, if is_a { 0 } else { 1 }));
            } else {
                let to = if is_a { CombinedNode::A(e.to) } else { CombinedNode::B(e.to) };
                edges.push((from, idx(to)?, e.arg));
            }
        }
    }
    for (k, p) in pairs.iter().enumerate() {
        let (va, vb) = (idx(CombinedNode::A(p.a))?, idx(CombinedNode::B(p.b))?);
        let (sab, sba) = (idx(CombinedNode::StitchAB(k))?, idx(CombinedNode::StitchBA(k))?);
        let (swa, swb) = (idx(CombinedNode::SwitchA(k))?, idx(CombinedNode::SwitchB(k))?);
        edges.extend([(va, sab, 0), (vb, sba, 0), (va, swa, 0), (sba, swa, 1), (vb, swb, 0), (sab, swb, 1)]);
    }
    Ok((nodes, edges))
}
