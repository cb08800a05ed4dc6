//! Layer-pair similarity and acyclic one-to-one matching between two
//! network graphs.
//!
//! Both graphs are flattened to their canonical (insertion) orderings; an
//! order-preserving alignment of those two sequences is computed in linear
//! space with a Hirschberg-style divide and conquer. Skipping a node scores
//! 0 and a pair is only ever taken when its similarity is positive.

mod combined;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphNode, NetworkGraph, NodeId, NodeKind, ProgressAnnotation, StitchTransform};

pub(crate) use combined::{combined_structure, CombinedNode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    /// Weight of the squared progress difference, in `[0, 1]`.
    pub c: f64,
    pub require_same_scale: bool,
    /// Add `in-degree * in-degree' + out-degree * out-degree'` to compatible
    /// pairs.
    pub cardinality_bonus: bool,
    /// Only activation outputs are candidate stitch points.
    pub post_activation_only: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            c: 1.0,
            require_same_scale: true,
            cardinality_bonus: false,
            post_activation_only: true,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::InvalidConfig(format!("c = {} is outside [0, 1]", self.c)));
        }
        Ok(())
    }
}

/// Stitch able to map the output of `a` onto the output shape of `b`.
pub fn stitch_transform(a: &GraphNode, b: &GraphNode) -> Option<StitchTransform> {
    if a.out_shape.len() != b.out_shape.len() {
        return None;
    }
    match a.out_shape.len() {
        3 if a.out_shape[1..] == b.out_shape[1..] => Some(StitchTransform::Conv1x1),
        1 => Some(StitchTransform::Linear),
        _ => None,
    }
}

fn is_host_operator(n: &GraphNode, cfg: &MatchingConfig) -> bool {
    match &n.kind {
        NodeKind::Operator { op } => !cfg.post_activation_only || op.is_activation(),
        _ => false,
    }
}

pub fn compatibility(a: &GraphNode, b: &GraphNode, cfg: &MatchingConfig) -> bool {
    is_host_operator(a, cfg)
        && is_host_operator(b, cfg)
        && (!cfg.require_same_scale || a.scale == b.scale)
        && stitch_transform(a, b).is_some()
        && a.out_shape[0] > 0
        && b.out_shape[0] > 0
}

/// Row-major scores between the canonical orderings of two graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: Vec<NodeId>,
    pub cols: Vec<NodeId>,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: Vec<NodeId>, cols: Vec<NodeId>, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows.len() * cols.len() {
            return Err(Error::shape(
                "similarity_matrix",
                format!("{} values for {}x{}", values.len(), rows.len(), cols.len()),
            ));
        }
        Ok(SimilarityMatrix { rows, cols, values })
    }

    /// Matrix over positional ids `0..rows` / `0..cols`.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        SimilarityMatrix::new((0..rows).map(NodeId).collect(), (0..cols).map(NodeId).collect(), values)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols.len() + j]
    }
}

pub const INCOMPATIBLE: f64 = -1.0;

pub fn similarity_matrix(
    a: &NetworkGraph,
    pa: &ProgressAnnotation,
    b: &NetworkGraph,
    pb: &ProgressAnnotation,
    cfg: &MatchingConfig,
) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    let na = a.ordered();
    let nb = b.ordered();
    let progress = |p: &ProgressAnnotation, id: NodeId| {
        p.progress
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("node {id} carries no progress annotation")))
    };
    let mut values = Vec::with_capacity(na.len() * nb.len());
    for va in &na {
        let p_a = progress(pa, va.id)?;
        for vb in &nb {
            let p_b = progress(pb, vb.id)?;
            let s = if compatibility(va, vb, cfg) {
                let mut s = 1.0 - cfg.c * (p_a - p_b).powi(2);
                if cfg.cardinality_bonus {
                    s += (a.in_degree(va.id) * b.in_degree(vb.id)) as f64
                        + (a.out_degree(va.id) * b.out_degree(vb.id)) as f64;
                }
                s
            } else {
                INCOMPATIBLE
            };
            values.push(s);
        }
    }
    SimilarityMatrix::new(
        na.iter().map(|n| n.id).collect(),
        nb.iter().map(|n| n.id).collect(),
        values,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: NodeId,
    pub b: NodeId,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    /// Strictly increasing in both orderings.
    pub pairs: Vec<MatchPair>,
    pub total_score: f64,
    pub similarity: SimilarityMatrix,
}

impl MatchingResult {
    pub fn empty(similarity: SimilarityMatrix) -> Self {
        MatchingResult {
            pairs: Vec::new(),
            total_score: 0.0,
            similarity,
        }
    }

    /// Keeps only the pairs at the given positions.
    pub fn subset(&self, keep: &[usize]) -> Result<MatchingResult> {
        let mut pairs = Vec::with_capacity(keep.len());
        for &k in keep {
            pairs.push(*self.pairs.get(k).ok_or_else(|| Error::OutOfRange(format!("pair {k}")))?);
        }
        Ok(MatchingResult {
            total_score: pairs.iter().map(|p| p.similarity).sum(),
            pairs,
            similarity: self.similarity.clone(),
        })
    }
}

/// Best-score rows of the alignment DP restricted to a block, for every
/// prefix (`forward`) or suffix (`!forward`) of the column range.
fn score_row(s: &SimilarityMatrix, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, forward: bool) -> Vec<f64> {
    let m = cols.len();
    let mut prev = vec![0.0f64; m + 1];
    let mut cur = vec![0.0f64; m + 1];
    let row_iter: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new(rows)
    } else {
        Box::new(rows.rev())
    };
    for i in row_iter {
        if forward {
            cur[0] = 0.0;
            for j in 1..=m {
                let v = s.get(i, cols.start + j - 1);
                let mut best = prev[j].max(cur[j - 1]);
                if v > 0.0 {
                    best = best.max(prev[j - 1] + v);
                }
                cur[j] = best;
            }
        } else {
            // cur[j]: suffix starting at column offset j.
            cur[m] = 0.0;
            for j in (0..m).rev() {
                let v = s.get(i, cols.start + j);
                let mut best = prev[j].max(cur[j + 1]);
                if v > 0.0 {
                    best = best.max(prev[j + 1] + v);
                }
                cur[j] = best;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev
}

fn align(s: &SimilarityMatrix, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, out: &mut Vec<(usize, usize)>) {
    if rows.is_empty() || cols.is_empty() {
        return;
    }
    if rows.len() == 1 {
        let i = rows.start;
        let mut best: Option<(usize, f64)> = None;
        for j in cols {
            let v = s.get(i, j);
            if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            out.push((i, j));
        }
        return;
    }
    let mid = rows.start + rows.len() / 2;
    let f = score_row(s, rows.start..mid, cols.clone(), true);
    let b = score_row(s, mid..rows.end, cols.clone(), false);
    let mut split = 0;
    let mut best = f64::NEG_INFINITY;
    for j in 0..=cols.len() {
        let total = f[j] + b[j];
        if total > best {
            best = total;
            split = j;
        }
    }
    let cut = cols.start + split;
    align(s, rows.start..mid, cols.start..cut, out);
    align(s, mid..rows.end, cut..cols.end, out);
}

/// Order-preserving matching of maximal total similarity in linear space.
pub fn hirschberg_match(s: &SimilarityMatrix) -> Result<MatchingResult> {
    if s.rows.is_empty() || s.cols.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut cells = Vec::new();
    align(s, 0..s.rows.len(), 0..s.cols.len(), &mut cells);
    let pairs: Vec<MatchPair> = cells
        .into_iter()
        .map(|(i, j)| MatchPair {
            a: s.rows[i],
            b: s.cols[j],
            similarity: s.get(i, j),
        })
        .collect();
    Ok(MatchingResult {
        total_score: pairs.iter().map(|p| p.similarity).sum(),
        pairs,
        similarity: s.clone(),
    })
}

/// Whether joining every pair with stitches in both directions keeps the
/// combined graph acyclic.
pub fn validate_acyclic(a: &NetworkGraph, b: &NetworkGraph, m: &MatchingResult) -> Result<bool> {
    let mut seen_a = BTreeSet::new();
    let mut seen_b = BTreeSet::new();
    for p in &m.pairs {
        if !a.contains(p.a) {
            return Err(Error::DanglingNode(p.a.0));
        }
        if !b.contains(p.b) {
            return Err(Error::DanglingNode(p.b.0));
        }
        if !seen_a.insert(p.a) || !seen_b.insert(p.b) {
            return Err(Error::InvalidConfig("a node appears in more than one pair".into()));
        }
    }
    let (nodes, edges) = combined_structure(a, b, &m.pairs)?;
    Ok(crate::graph::topo_sort(
        (0..nodes.len()).map(NodeId),
        edges.iter().map(|&(f, t, _)| (NodeId(f), NodeId(t))),
        |id| id.0,
    )
    .is_some())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReportPair {
    pub index: usize,
    pub a: NodeId,
    pub a_label: String,
    pub a_progress: f64,
    pub b: NodeId,
    pub b_label: String,
    pub b_progress: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub config: MatchingConfig,
    pub pairs: Vec<MatchReportPair>,
    pub total_score: f64,
}

impl MatchReport {
    pub fn new(
        a: &NetworkGraph,
        pa: &ProgressAnnotation,
        b: &NetworkGraph,
        pb: &ProgressAnnotation,
        m: &MatchingResult,
        config: &MatchingConfig,
    ) -> Result<Self> {
        let pairs = m
            .pairs
            .iter()
            .enumerate()
            .map(|(index, p)| {
                Ok(MatchReportPair {
                    index,
                    a: p.a,
                    a_label: a.node(p.a)?.label.clone(),
                    a_progress: pa.of(p.a)?,
                    b: p.b,
                    b_label: b.node(p.b)?.label.clone(),
                    b_progress: pb.of(p.b)?,
                    similarity: p.similarity,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MatchReport {
            config: config.clone(),
            pairs,
            total_score: m.total_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Progress annotation, similarity matrix and alignment in one call.
pub fn match_graphs(a: &NetworkGraph, b: &NetworkGraph, cfg: &MatchingConfig) -> Result<MatchingResult> {
    let pa = crate::graph::annotate_progress(a)?;
    let pb = crate::graph::annotate_progress(b)?;
    let s = similarity_matrix(a, &pa, b, &pb, cfg)?;
    let m = hirschberg_match(&s)?;
    if !validate_acyclic(a, b, &m)? {
        return Err(Error::AcyclicityViolation);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_util::chain;
    use crate::graph::{annotate_progress, build_unet_template, NodeSpec, UNetConfig};
    use crate::tensor::Op;

    fn full_dp(s: &SimilarityMatrix) -> f64 {
        let (n, m) = (s.rows.len(), s.cols.len());
        let mut t = vec![vec![0.0f64; m + 1]; n + 1];
        for i in 1..=n {
            for j in 1..=m {
                let v = s.get(i - 1, j - 1);
                t[i][j] = t[i - 1][j].max(t[i][j - 1]);
                if v > 0.0 {
                    t[i][j] = t[i][j].max(t[i - 1][j - 1] + v);
                }
            }
        }
        t[n][m]
    }

    #[test]
    fn identical_chains_match_diagonally() {
        let g = chain(5, 2, |_| 0);
        let m = match_graphs(&g, &g, &MatchingConfig::default()).unwrap();
        assert_eq!(m.pairs.len(), 5);
        assert!(m.pairs.iter().all(|p| p.a == p.b && p.similarity == 1.0));
    }

    #[test]
    fn all_incompatible_gives_empty_matching() {
        let s = SimilarityMatrix::from_values(3, 4, vec![-1.0; 12]).unwrap();
        let m = hirschberg_match(&s).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.total_score, 0.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let s = SimilarityMatrix::from_values(0, 3, vec![]).unwrap();
        assert!(matches!(hirschberg_match(&s), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn small_matrices_agree_with_full_dp() {
        let s = SimilarityMatrix::from_values(3, 3, vec![0.5, 0.9, -1.0, 0.8, 0.1, 0.2, -1.0, 0.7, 0.6]).unwrap();
        let m = hirschberg_match(&s).unwrap();
        assert!((m.total_score - full_dp(&s)).abs() < 1e-12);
        for w in m.pairs.windows(2) {
            assert!(w[0].a < w[1].a && w[0].b < w[1].b);
        }
    }

    #[test]
    fn progress_penalty_is_exact() {
        // Two chains: relu positions differ in progress.
        let a = chain(4, 1, |_| 0);
        let b = chain(1, 1, |_| 0);
        let pa = annotate_progress(&a).unwrap();
        let pb = annotate_progress(&b).unwrap();
        let s = similarity_matrix(&a, &pa, &b, &pb, &MatchingConfig::default()).unwrap();
        // a relu0 has progress 0.2, b relu0 has 0.5.
        let (i, j) = (1, 1);
        assert!((s.get(i, j) - (1.0 - 0.3f64.powi(2))).abs() < 1e-12);
        assert_eq!(s.get(0, 0), INCOMPATIBLE);
        assert_eq!(s.get(5, 2), INCOMPATIBLE);
    }

    #[test]
    fn cardinality_bonus_adds_degree_products() {
        let g = build_unet_template(&UNetConfig::default()).unwrap();
        let p = annotate_progress(&g).unwrap();
        let cfg = MatchingConfig {
            cardinality_bonus: true,
            ..MatchingConfig::default()
        };
        let plain = similarity_matrix(&g, &p, &g, &p, &MatchingConfig::default()).unwrap();
        let bonus = similarity_matrix(&g, &p, &g, &p, &cfg).unwrap();
        for (i, &ra) in plain.rows.iter().enumerate() {
            for (j, &cb) in plain.cols.iter().enumerate() {
                if plain.get(i, j) == INCOMPATIBLE {
                    assert_eq!(bonus.get(i, j), INCOMPATIBLE);
                } else {
                    let extra = (g.in_degree(ra) * g.in_degree(cb) + g.out_degree(ra) * g.out_degree(cb)) as f64;
                    assert_eq!(bonus.get(i, j), plain.get(i, j) + extra);
                }
            }
        }
    }

    #[test]
    fn scale_and_rank_gate_compatibility() {
        let cfg = MatchingConfig::default();
        let relu = |scale, shape: Vec<usize>| GraphNode {
            id: NodeId(0),
            kind: NodeKind::Operator { op: Op::Relu },
            label: String::new(),
            params: Default::default(),
            buffers: Default::default(),
            scale,
            insertion_index: 0,
            out_shape: shape,
        };
        assert!(compatibility(&relu(1, vec![2, 4, 4]), &relu(1, vec![3, 4, 4]), &cfg));
        assert!(!compatibility(&relu(1, vec![2, 4, 4]), &relu(2, vec![2, 4, 4]), &cfg));
        assert!(!compatibility(&relu(1, vec![2, 4, 4]), &relu(1, vec![8]), &cfg));
        assert!(compatibility(&relu(1, vec![8]), &relu(1, vec![5]), &cfg));
        let mut sw = relu(1, vec![2, 4, 4]);
        sw.kind = NodeKind::Switch;
        assert!(!compatibility(&sw, &sw, &cfg));
    }

    #[test]
    fn crossed_pairs_create_a_cycle() {
        let g = chain(2, 1, |_| 0);
        let ids = g.ordered_ids();
        let crossed = MatchingResult {
            pairs: vec![
                MatchPair {
                    a: ids[1],
                    b: ids[2],
                    similarity: 1.0,
                },
                MatchPair {
                    a: ids[2],
                    b: ids[1],
                    similarity: 1.0,
                },
            ],
            total_score: 2.0,
            similarity: SimilarityMatrix::from_values(0, 0, vec![]).unwrap(),
        };
        assert!(!validate_acyclic(&g, &g, &crossed).unwrap());
        let straight = crossed.subset(&[0]).unwrap();
        assert!(validate_acyclic(&g, &g, &straight).unwrap());
        assert!(validate_acyclic(&g, &g, &MatchingResult::empty(straight.similarity.clone())).unwrap());
    }

    #[test]
    fn unet_clones_match_every_activation_to_its_twin() {
        let g = build_unet_template(&UNetConfig::default()).unwrap();
        let m = match_graphs(&g, &g, &MatchingConfig::default()).unwrap();
        let acts = g.nodes().filter(|n| n.kind.op().is_some_and(Op::is_activation)).count();
        assert_eq!(m.pairs.len(), acts);
        assert!(m.pairs.iter().all(|p| p.a == p.b));
    }

    #[test]
    fn dangling_pair_is_an_error() {
        let g = chain(1, 1, |_| 0);
        let mut extra = NetworkGraph::new();
        extra.add_node(NodeSpec::new(NodeKind::Input, "i", 0, vec![1]), &[]).unwrap();
        let m = MatchingResult {
            pairs: vec![MatchPair {
                a: NodeId(99),
                b: NodeId(0),
                similarity: 1.0,
            }],
            total_score: 1.0,
            similarity: SimilarityMatrix::from_values(0, 0, vec![]).unwrap(),
        };
        assert!(matches!(validate_acyclic(&g, &extra, &m), Err(Error::DanglingNode(99))));
    }
}
