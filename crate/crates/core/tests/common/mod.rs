//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use graphstitch::graph::{NetworkGraph, NodeId, NodeKind, NodeSpec};
use graphstitch::matching::SimilarityMatrix;
use graphstitch::tensor::Op;
use rand::Rng;

/// Full-table alignment DP: pairs are taken only with positive similarity,
/// skipping either node scores 0.
pub fn quadratic_alignment(s: &SimilarityMatrix) -> f64 {
    let (n, m) = (s.rows.len(), s.cols.len());
    let mut d = vec![vec![0.0f64; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let v = s.get(i - 1, j - 1);
            let mut best = d[i - 1][j].max(d[i][j - 1]);
            if v > 0.0 {
                best = best.max(d[i - 1][j - 1] + v);
            }
            d[i][j] = best;
        }
    }
    d[n][m]
}

/// Best score over every strictly increasing matching, by enumeration.
pub fn exhaustive_alignment(s: &SimilarityMatrix) -> f64 {
    fn go(s: &SimilarityMatrix, i: usize, j0: usize) -> f64 {
        if i == s.rows.len() {
            return 0.0;
        }
        let mut best = go(s, i + 1, j0);
        for j in j0..s.cols.len() {
            let v = s.get(i, j);
            if v > 0.0 {
                best = best.max(v + go(s, i + 1, j + 1));
            }
        }
        best
    }
    go(s, 0, 0)
}

pub fn random_similarity(rng: &mut impl Rng, rows: usize, cols: usize) -> SimilarityMatrix {
    let values = (0..rows * cols)
        .map(|_| if rng.gen_bool(0.3) { -1.0 } else { rng.gen_range(-0.5..1.0) })
        .collect();
    SimilarityMatrix::from_values(rows, cols, values).unwrap()
}

pub fn brute_dice(pred: &[u8], reference: &[u8]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &r) in pred.iter().zip(reference) {
        match (p > 0, r > 0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn brute_boundary(mask: &[u8], h: usize, w: usize) -> Vec<(f64, f64)> {
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize && mask[r as usize * w + c as usize] > 0;
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !at(r + dr, c + dc)) {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

/// All-pairs boundary distances, pooled, 95th percentile by linear
/// interpolation between order statistics.
pub fn brute_hd95(pred: &[u8], reference: &[u8], h: usize, w: usize, spacing: [f64; 2]) -> f64 {
    let bp = brute_boundary(pred, h, w);
    let br = brute_boundary(reference, h, w);
    if bp.is_empty() && br.is_empty() {
        return 0.0;
    }
    if bp.is_empty() || br.is_empty() {
        return ((h as f64 * spacing[0]).powi(2) + (w as f64 * spacing[1]).powi(2)).sqrt();
    }
    let dist = |a: (f64, f64), b: (f64, f64)| (((a.0 - b.0) * spacing[0]).powi(2) + ((a.1 - b.1) * spacing[1]).powi(2)).sqrt();
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut all = directed(&bp, &br);
    all.extend(directed(&br, &bp));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(all.len() - 1);
    all[lo] + (pos - lo as f64) * (all[hi] - all[lo])
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Vec<u8> {
    let density = rng.gen_range(0.0..0.7);
    (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect()
}

/// Random single-input single-output DAG of relu/add nodes; every node
/// feeds forward to a later node so all lie on an input-output path.
pub fn random_dag(rng: &mut impl Rng, operators: usize) -> NetworkGraph {
    let shape = vec![1, 2, 2];
    let mut g = NetworkGraph::new();
    let mut ids = vec![g.add_node(NodeSpec::new(NodeKind::Input, "in", 0, shape.clone()), &[]).unwrap()];
    let mut consumed = vec![false];
    for i in 0..operators {
        let last = ids.len() - 1;
        let first = rng.gen_range(0..=last);
        let binary = ids.len() > 1 && rng.gen_bool(0.4);
        let args: Vec<NodeId> = if binary {
            let mut second = rng.gen_range(0..=last);
            if second == first {
                second = if first == last { 0 } else { last };
            }
            vec![ids[first], ids[second]]
        } else {
            vec![ids[first]]
        };
        for a in &args {
            consumed[ids.iter().position(|x| x == a).unwrap()] = true;
        }
        let op = if binary { Op::Add } else { Op::Relu };
        ids.push(g.add_node(NodeSpec::new(NodeKind::Operator { op }, format!("n{i}"), 0, shape.clone()), &args).unwrap());
        consumed.push(false);
    }
    // Fold every unconsumed node into the output through a chain of adds.
    let mut dangling: Vec<NodeId> = ids.iter().zip(&consumed).filter(|(_, c)| !**c).map(|(id, _)| *id).collect();
    while dangling.len() > 1 {
        let (x, y) = (dangling.remove(0), dangling.remove(0));
        let id = g
            .add_node(NodeSpec::new(NodeKind::Operator { op: Op::Add }, format!("join{}", g.len()), 0, shape.clone()), &[x, y])
            .unwrap();
        dangling.push(id);
    }
    g.add_node(NodeSpec::new(NodeKind::Output, "out", 0, shape), &[dangling[0]]).unwrap();
    g
}

/// Longest input-to-node and node-to-output path lengths by enumerating
/// every path.
pub fn enumerated_path_lengths(g: &NetworkGraph) -> (Vec<(NodeId, usize)>, Vec<(NodeId, usize)>) {
    let succ = g.successors();
    let input = g.input().unwrap();
    let output = g.output().unwrap();
    fn walk(
        node: NodeId,
        depth: usize,
        succ: &std::collections::BTreeMap<NodeId, Vec<NodeId>>,
        best: &mut std::collections::BTreeMap<NodeId, usize>,
    ) {
        let e = best.entry(node).or_insert(0);
        *e = (*e).max(depth);
        for &s in succ.get(&node).into_iter().flatten() {
            walk(s, depth + 1, succ, best);
        }
    }
    let mut d_in = std::collections::BTreeMap::new();
    walk(input, 0, &succ, &mut d_in);
    let d_out = g
        .ordered_ids()
        .into_iter()
        .map(|id| {
            let mut reach = std::collections::BTreeMap::new();
            walk(id, 0, &succ, &mut reach);
            (id, reach[&output])
        })
        .collect();
    (d_in.into_iter().collect(), d_out)
}

/// A scenario small enough to run the whole matrix in seconds.
pub fn tiny_scenario(seed: u64) -> graphstitch::harness::ScenarioConfig {
    use graphstitch::graph::UNetConfig;
    use graphstitch::harness::ScenarioConfig;
    let mut s = ScenarioConfig { seed, image_size: 16, epoch_scale: 0.05, ..ScenarioConfig::default() };
    s.parties[0].samples = 30;
    s.parties[1].samples = 25;
    let arch = UNetConfig { depth: 2, base_channels: 2, ..UNetConfig::default() };
    s.architectures = vec![arch.clone(), arch];
    s.robustness.samples = 2;
    s
}
