use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NetworkGraph, NodeId};
use crate::error::{Error, Result};

/// Longest-path distances (in edges) from the input and to the output, and
/// the relative position `d_in / (d_in + d_out)` of every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressAnnotation {
    pub d_in: BTreeMap<NodeId, usize>,
    pub d_out: BTreeMap<NodeId, usize>,
    pub progress: BTreeMap<NodeId, f64>,
}

impl ProgressAnnotation {
    pub fn of(&self, id: NodeId) -> Result<f64> {
        self.progress.get(&id).copied().ok_or(Error::DanglingNode(id.0))
    }
}

pub fn annotate_progress(g: &NetworkGraph) -> Result<ProgressAnnotation> {
    let order = g.topological_sort()?;
    let input = g.input()?;
    let output = g.output()?;
    let args = g.argument_table();
    let succ = g.successors();

    let mut d_in: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &id in &order {
        if id == input {
            d_in.insert(id, 0);
            continue;
        }
        let best = args
            .get(&id)
            .into_iter()
            .flatten()
            .filter_map(|p| d_in.get(p))
            .max()
            .map(|d| d + 1);
        if let Some(d) = best {
            d_in.insert(id, d);
        }
    }
    let mut d_out: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &id in order.iter().rev() {
        if id == output {
            d_out.insert(id, 0);
            continue;
        }
        let best = succ
            .get(&id)
            .into_iter()
            .flatten()
            .filter_map(|s| d_out.get(s))
            .max()
            .map(|d| d + 1);
        if let Some(d) = best {
            d_out.insert(id, d);
        }
    }

    let mut progress = BTreeMap::new();
    for &id in &order {
        let (Some(&a), Some(&b)) = (d_in.get(&id), d_out.get(&id)) else {
            return Err(Error::Unreachable(id.0));
        };
        if a + b == 0 {
            return Err(Error::Malformed("input and output are the same node".into()));
        }
        progress.insert(id, a as f64 / (a + b) as f64);
    }
    Ok(ProgressAnnotation { d_in, d_out, progress })
}

#[cfg(test)]
mod tests {
    use super::super::test_util::chain;
    use super::super::{NodeKind, NodeSpec};
    use super::*;
    use crate::tensor::Op;

    #[test]
    fn chain_progress_is_linear() {
        let g = chain(3, 1, |_| 0);
        let p = annotate_progress(&g).unwrap();
        let ids = g.ordered_ids();
        let values: Vec<f64> = ids.iter().map(|&i| p.of(i).unwrap()).collect();
        assert_eq!(values, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn skip_connections_use_longest_paths() {
        // in -> a -> b -> c(a, b) -> out
        let mut g = NetworkGraph::new();
        let spec = |l: &str| NodeSpec::new(NodeKind::Operator { op: Op::Relu }, l, 0, vec![1, 2, 2]);
        let i = g.add_node(NodeSpec::new(NodeKind::Input, "in", 0, vec![1, 2, 2]), &[]).unwrap();
        let a = g.add_node(spec("a"), &[i]).unwrap();
        let b = g.add_node(spec("b"), &[a]).unwrap();
        let c = g
            .add_node(NodeSpec::new(NodeKind::Operator { op: Op::Add }, "c", 0, vec![1, 2, 2]), &[a, b])
            .unwrap();
        g.add_node(NodeSpec::new(NodeKind::Output, "out", 0, vec![1, 2, 2]), &[c]).unwrap();
        let p = annotate_progress(&g).unwrap();
        assert_eq!(p.d_in[&c], 3);
        assert_eq!(p.d_out[&a], 3);
        assert_eq!(p.of(a).unwrap(), 0.25);
    }

    #[test]
    fn dead_ends_are_unreachable() {
        let mut g = chain(2, 1, |_| 0);
        let first = g.ordered_ids()[1];
        let dead = g
            .add_node(NodeSpec::new(NodeKind::Operator { op: Op::Relu }, "dead", 0, vec![1, 4, 4]), &[first])
            .unwrap();
        assert!(matches!(annotate_progress(&g), Err(Error::Unreachable(d)) if d == dead.0));
    }
}
