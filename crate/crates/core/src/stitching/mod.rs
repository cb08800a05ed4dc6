//! Joins two matched networks into one graph with a pair of stitches and a
//! pair of switches at every matched node pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    execute, load_graph, save_graph, topo_sort, Mode, NetworkGraph, NodeId, NodeKind, NodeSpec, OutputSelector,
    StitchTransform, SwitchConfig, SwitchMode,
};
use crate::matching::{combined_structure, stitch_transform, validate_acyclic, CombinedNode, MatchingResult};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchPair {
    pub index: usize,
    /// Matched nodes, as ids of the parent graphs.
    pub parent_a: NodeId,
    pub parent_b: NodeId,
    /// The same nodes inside the combined graph.
    pub node_a: NodeId,
    pub node_b: NodeId,
    pub switch_a: NodeId,
    pub switch_b: NodeId,
    /// Reads `node_a`, feeds `switch_b`.
    pub stitch_a_to_b: NodeId,
    pub stitch_b_to_a: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchedNetwork {
    pub graph: NetworkGraph,
    pub pairs: Vec<StitchPair>,
    /// Parent-graph id to combined-graph id.
    pub a_map: BTreeMap<NodeId, NodeId>,
    pub b_map: BTreeMap<NodeId, NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombineOptions {
    pub seed: u64,
    /// Identity stitches where channel counts agree.
    pub identity_init: bool,
    /// Half-width of the uniform initialisation of non-identity stitches,
    /// relative to `1 / sqrt(in_channels)`.
    pub random_scale: f32,
}

impl Default for CombineOptions {
    fn default() -> Self {
        CombineOptions {
            seed: 0,
            identity_init: true,
            random_scale: 1.0,
        }
    }
}

fn stitch_params(transform: StitchTransform, cin: usize, cout: usize, opts: &CombineOptions, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let shape: Vec<usize> = match transform {
        StitchTransform::Conv1x1 => vec![cout, cin, 1, 1],
        StitchTransform::Linear => vec![cout, cin],
    };
    let weight = if opts.identity_init && cin == cout {
        Tensor::from_fn(&shape, |i| if i / cin == i % cin { 1.0 } else { 0.0 })
    } else {
        let bound = opts.random_scale / (cin as f32).sqrt();
        Tensor::from_fn(&shape, |_| rng.gen_range(-bound..=bound))
    };
    (
        weight.with_requires_grad(true),
        Tensor::zeros(&[cout]).with_requires_grad(true),
    )
}

pub fn combine(a: &NetworkGraph, b: &NetworkGraph, m: &MatchingResult) -> Result<StitchedNetwork> {
    combine_with(a, b, m, &CombineOptions::default())
}

/// Builds the combined graph. Host parameters are frozen, stitch parameters
/// trainable. Every consumer of a matched node reads its switch instead.
pub fn combine_with(a: &NetworkGraph, b: &NetworkGraph, m: &MatchingResult, opts: &CombineOptions) -> Result<StitchedNetwork> {
    if !validate_acyclic(a, b, m)? {
        return Err(Error::AcyclicityViolation);
    }
    let (ia, ib) = (a.node(a.input()?)?, b.node(b.input()?)?);
    if ia.out_shape != ib.out_shape {
        return Err(Error::ArchitectureMismatch(format!(
            "inputs {:?} vs {:?}",
            ia.out_shape, ib.out_shape
        )));
    }
    let (oa, ob) = (a.node(a.output()?)?, b.node(b.output()?)?);
    if oa.out_shape != ob.out_shape {
        return Err(Error::ArchitectureMismatch(format!(
            "outputs {:?} vs {:?}",
            oa.out_shape, ob.out_shape
        )));
    }
    let mut transforms = Vec::with_capacity(m.pairs.len());
    for p in &m.pairs {
        let (va, vb) = (a.node(p.a)?, b.node(p.b)?);
        let t = stitch_transform(va, vb).ok_or(Error::IncompatiblePair(p.a.0, p.b.0))?;
        transforms.push(t);
    }

    let (nodes, edges) = combined_structure(a, b, &m.pairs)?;
    let order = topo_sort(
        (0..nodes.len()).map(NodeId),
        edges.iter().map(|&(f, t, _)| (NodeId(f), NodeId(t))),
        |id| id.0,
    )
    .ok_or(Error::AcyclicityViolation)?;
    let mut args: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &(f, t, arg) in &edges {
        args.entry(t).or_default().push((arg, f));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = NetworkGraph::new();
    let mut new_id: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut a_map = BTreeMap::new();
    let mut b_map = BTreeMap::new();
    let mut ids: BTreeMap<CombinedNode, NodeId> = BTreeMap::new();
    // Stitches must draw their parameters in pair order, independently of
    // where the sort places them.
    let mut stitch_init: BTreeMap<CombinedNode, (Tensor, Tensor)> = BTreeMap::new();
    for (k, p) in m.pairs.iter().enumerate() {
        let (ca, cb) = (a.node(p.a)?.out_shape[0], b.node(p.b)?.out_shape[0]);
        stitch_init.insert(CombinedNode::StitchAB(k), stitch_params(transforms[k], ca, cb, opts, &mut rng));
        stitch_init.insert(CombinedNode::StitchBA(k), stitch_params(transforms[k], cb, ca, opts, &mut rng));
    }

    for NodeId(ci) in order {
        let inputs: Vec<NodeId> = {
            let mut v = args.remove(&ci).unwrap_or_default();
            v.sort();
            v.into_iter().map(|(_, f)| new_id[&f]).collect()
        };
        let host = |g: &NetworkGraph, id: NodeId, prefix: &str| -> Result<NodeSpec> {
            let n = g.node(id)?;
            let mut spec = NodeSpec::new(n.kind.clone(), format!("{prefix}.{}", n.label), n.scale, n.out_shape.clone());
            for (k, t) in &n.params {
                spec = spec.with_param(k, t.detached().with_requires_grad(false));
            }
            for (k, t) in &n.buffers {
                spec = spec.with_buffer(k, t.detached());
            }
            Ok(spec)
        };
        let node = nodes[ci];
        let spec = match node {
            CombinedNode::Input => NodeSpec::new(NodeKind::Input, "input", ia.scale, ia.out_shape.clone()),
            CombinedNode::Output => NodeSpec::new(NodeKind::Output, "output", oa.scale, oa.out_shape.clone()),
            CombinedNode::A(id) => host(a, id, "a")?,
            CombinedNode::B(id) => host(b, id, "b")?,
            CombinedNode::StitchAB(k) | CombinedNode::StitchBA(k) => {
                let a_to_b = matches!(node, CombinedNode::StitchAB(_));
                let target = if a_to_b { b.node(m.pairs[k].b)? } else { a.node(m.pairs[k].a)? };
                let (w, bias) = stitch_init.remove(&node).expect("initialised above");
                NodeSpec::new(
                    NodeKind::Stitch {
                        transform: transforms[k],
                    },
                    format!("stitch{k}.{}", if a_to_b { "a_to_b" } else { "b_to_a" }),
                    target.scale,
                    target.out_shape.clone(),
                )
                .with_param("weight", w)
                .with_param("bias", bias)
            }
            CombinedNode::SwitchA(k) => {
                let n = a.node(m.pairs[k].a)?;
                NodeSpec::new(NodeKind::Switch, format!("switch{k}.a"), n.scale, n.out_shape.clone())
            }
            CombinedNode::SwitchB(k) => {
                let n = b.node(m.pairs[k].b)?;
                NodeSpec::new(NodeKind::Switch, format!("switch{k}.b"), n.scale, n.out_shape.clone())
            }
        };
        let id = g.add_node(spec, &inputs)?;
        new_id.insert(ci, id);
        ids.insert(node, id);
        match node {
            CombinedNode::A(old) => {
                a_map.insert(old, id);
            }
            CombinedNode::B(old) => {
                b_map.insert(old, id);
            }
            CombinedNode::Input => {
                a_map.insert(a.input()?, id);
                b_map.insert(b.input()?, id);
            }
            CombinedNode::Output => {
                a_map.insert(a.output()?, id);
                b_map.insert(b.output()?, id);
            }
            _ => {}
        }
    }
    let pairs = m
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| StitchPair {
            index: k,
            parent_a: p.a,
            parent_b: p.b,
            node_a: a_map[&p.a],
            node_b: b_map[&p.b],
            switch_a: ids[&CombinedNode::SwitchA(k)],
            switch_b: ids[&CombinedNode::SwitchB(k)],
            stitch_a_to_b: ids[&CombinedNode::StitchAB(k)],
            stitch_b_to_a: ids[&CombinedNode::StitchBA(k)],
        })
        .collect();
    g.validate()?;
    Ok(StitchedNetwork { graph: g, pairs, a_map, b_map })
}

impl StitchedNetwork {
    /// Switch ids in canonical order.
    pub fn switches(&self) -> Vec<NodeId> {
        self.graph
            .ordered()
            .into_iter()
            .filter(|n| matches!(n.kind, NodeKind::Switch))
            .map(|n| n.id)
            .collect()
    }

    pub fn stitches(&self) -> Vec<NodeId> {
        self.graph
            .ordered()
            .into_iter()
            .filter(|n| matches!(n.kind, NodeKind::Stitch { .. }))
            .map(|n| n.id)
            .collect()
    }

    pub fn uniform_config(&self, mode: SwitchMode, selector: OutputSelector) -> SwitchConfig {
        SwitchConfig::uniform(self.switches(), mode, selector)
    }

    /// The stitch-ensemble of pair `k`: both switches of that pair average,
    /// every other switch passes the original through, the heads average.
    pub fn pair_ensemble_config(&self, k: usize) -> Result<SwitchConfig> {
        let p = self.pairs.get(k).ok_or_else(|| Error::OutOfRange(format!("pair {k}")))?;
        let mut cfg = self.uniform_config(SwitchMode::Original, OutputSelector::AverageHeads);
        cfg.set(p.switch_a, SwitchMode::Average);
        cfg.set(p.switch_b, SwitchMode::Average);
        Ok(cfg)
    }

    /// Executes the combined graph under `cfg`, skipping dead nodes.
    pub fn run(&self, x: &Tensor, cfg: &SwitchConfig) -> Result<Tensor> {
        self.configure(cfg)?.run(x)
    }

    pub fn configure(&self, cfg: &SwitchConfig) -> Result<ConfiguredNetwork<'_>> {
        for s in self.switches() {
            if cfg.mode(s).is_none() {
                return Err(Error::MissingSwitch(s.0));
            }
        }
        Ok(ConfiguredNetwork {
            net: self,
            config: cfg.clone(),
        })
    }

    /// Whether switching pair `k` can feed back into its own stitches.
    pub fn pair_is_independent(&self, k: usize) -> Result<bool> {
        let p = self.pairs.get(k).ok_or_else(|| Error::OutOfRange(format!("pair {k}")))?;
        Ok(!self.graph.has_path(p.switch_a, p.node_b) && !self.graph.has_path(p.switch_b, p.node_a))
    }

    fn table_path(stem: &Path) -> PathBuf {
        PathBuf::from(format!("{}.stitched.json", stem.as_os_str().to_string_lossy()))
    }

    /// Writes the combined graph plus a `<stem>.stitched.json` pair table.
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_graph(&self.graph, stem)?;
        let doc = StitchedDocument {
            pairs: self.pairs.clone(),
            a_map: self.a_map.iter().map(|(&k, &v)| (k, v)).collect(),
            b_map: self.b_map.iter().map(|(&k, &v)| (k, v)).collect(),
        };
        let path = Self::table_path(stem);
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let graph = load_graph(stem)?;
        let path = Self::table_path(stem);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let doc: StitchedDocument = serde_json::from_slice(&text)?;
        for p in &doc.pairs {
            for id in [p.node_a, p.node_b, p.switch_a, p.switch_b, p.stitch_a_to_b, p.stitch_b_to_a] {
                if !graph.contains(id) {
                    return Err(Error::DanglingNode(id.0));
                }
            }
        }
        Ok(StitchedNetwork {
            graph,
            pairs: doc.pairs,
            a_map: doc.a_map.into_iter().collect(),
            b_map: doc.b_map.into_iter().collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StitchedDocument {
    pairs: Vec<StitchPair>,
    a_map: Vec<(NodeId, NodeId)>,
    b_map: Vec<(NodeId, NodeId)>,
}

/// A stitched network with every switch fixed.
pub struct ConfiguredNetwork<'a> {
    pub net: &'a StitchedNetwork,
    pub config: SwitchConfig,
}

impl ConfiguredNetwork<'_> {
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        execute(&self.net.graph, x, Mode::Eval, Some(&self.config))
    }
}

/// `samples` draws of `count` switches out of `switches`, uniformly without
/// replacement. Each draw is returned sorted.
pub fn sample_stitched_sets(switches: &[NodeId], count: usize, samples: usize, rng: &mut impl Rng) -> Result<Vec<Vec<NodeId>>> {
    if count > switches.len() {
        return Err(Error::OutOfRange(format!(
            "{count} stitched switches out of {}",
            switches.len()
        )));
    }
    Ok((0..samples)
        .map(|_| {
            let mut v: Vec<NodeId> = sample(rng, switches.len(), count).into_iter().map(|i| switches[i]).collect();
            v.sort();
            v
        })
        .collect())
}

/// Random configurations with exactly `count` switches stitched and the
/// head drawn between the two parents. Duplicates are dropped, keeping the
/// first occurrence.
pub fn sample_switch_configs(net: &StitchedNetwork, count: usize, samples: usize, seed: u64) -> Result<Vec<SwitchConfig>> {
    let switches = net.switches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = sample_stitched_sets(&switches, count, samples, &mut rng)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for set in sets {
        let selector = if rng.gen_bool(0.5) {
            OutputSelector::HeadA
        } else {
            OutputSelector::HeadB
        };
        let mut cfg = SwitchConfig::uniform(switches.iter().copied(), SwitchMode::Original, selector);
        for s in set {
            cfg.set(s, SwitchMode::Stitched);
        }
        if seen.insert(cfg.clone()) {
            out.push(cfg);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_unet_template, execute, UNetConfig};
    use crate::matching::{match_graphs, MatchingConfig};

    fn small(seed: u64) -> NetworkGraph {
        build_unet_template(&UNetConfig {
            image_size: 8,
            depth: 2,
            base_channels: 2,
            seed,
            ..UNetConfig::default()
        })
        .unwrap()
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn empty_matching_is_a_disjoint_union() {
        let (a, b) = (small(1), small(2));
        let m = match_graphs(&a, &b, &MatchingConfig::default()).unwrap().subset(&[]).unwrap();
        let net = combine(&a, &b, &m).unwrap();
        assert_eq!(net.graph.len(), a.len() + b.len() - 2);
        let x = input(0);
        let cfg_a = SwitchConfig::new([], OutputSelector::HeadA);
        let cfg_b = SwitchConfig::new([], OutputSelector::HeadB);
        assert_eq!(net.run(&x, &cfg_a).unwrap(), execute(&a, &x, Mode::Eval, None).unwrap());
        assert_eq!(net.run(&x, &cfg_b).unwrap(), execute(&b, &x, Mode::Eval, None).unwrap());
    }

    #[test]
    fn one_pair_adds_two_stitches_and_two_switches() {
        let (a, b) = (small(1), small(2));
        let m = match_graphs(&a, &b, &MatchingConfig::default()).unwrap().subset(&[2]).unwrap();
        let net = combine(&a, &b, &m).unwrap();
        assert_eq!(net.graph.len(), a.len() + b.len() - 2 + 4);
        assert_eq!(net.switches().len(), 2);
        assert_eq!(net.stitches().len(), 2);
    }

    #[test]
    fn all_original_reproduces_both_parents_bitwise() {
        let (a, b) = (small(1), small(2));
        let m = match_graphs(&a, &b, &MatchingConfig::default()).unwrap();
        let net = combine(&a, &b, &m).unwrap();
        for seed in 0..5 {
            let x = input(seed);
            let ra = net.run(&x, &net.uniform_config(SwitchMode::Original, OutputSelector::HeadA)).unwrap();
            let rb = net.run(&x, &net.uniform_config(SwitchMode::Original, OutputSelector::HeadB)).unwrap();
            assert_eq!(ra.data(), execute(&a, &x, Mode::Eval, None).unwrap().data());
            assert_eq!(rb.data(), execute(&b, &x, Mode::Eval, None).unwrap().data());
        }
    }

    #[test]
    fn clone_stitching_with_identity_stitches_is_transparent() {
        let a = small(3);
        let m = match_graphs(&a, &a, &MatchingConfig::default()).unwrap();
        let net = combine(&a, &a, &m).unwrap();
        let x = input(9);
        let reference = execute(&a, &x, Mode::Eval, None).unwrap();
        let out = net.run(&x, &net.uniform_config(SwitchMode::Stitched, OutputSelector::HeadA)).unwrap();
        for (p, q) in out.data().iter().zip(reference.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn host_parameters_are_frozen_and_stitches_trainable() {
        let (a, b) = (small(1), small(2));
        let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default()).unwrap()).unwrap();
        for n in net.graph.nodes() {
            let stitch = matches!(n.kind, NodeKind::Stitch { .. });
            assert!(n.params.values().all(|t| t.requires_grad() == stitch), "{}", n.label);
        }
    }

    #[test]
    fn pairs_are_independent() {
        let (a, b) = (small(1), small(2));
        let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default()).unwrap()).unwrap();
        for k in 0..net.pairs.len() {
            assert!(net.pair_is_independent(k).unwrap());
        }
    }

    #[test]
    fn configure_requires_every_switch() {
        let (a, b) = (small(1), small(2));
        let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default()).unwrap()).unwrap();
        let partial = SwitchConfig::new([(net.switches()[0], SwitchMode::Original)], OutputSelector::HeadA);
        assert!(matches!(net.configure(&partial), Err(Error::MissingSwitch(_))));
    }

    #[test]
    fn sampling_counts_and_extremes() {
        let (a, b) = (small(1), small(2));
        let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default()).unwrap()).unwrap();
        let total = net.switches().len();
        for cfg in sample_switch_configs(&net, 0, 10, 1).unwrap() {
            assert_eq!(cfg.count(SwitchMode::Stitched), 0);
        }
        let all = sample_switch_configs(&net, total, 10, 1).unwrap();
        assert!(all.len() <= 2);
        assert!(all.iter().all(|c| c.count(SwitchMode::Stitched) == total));
        assert!(matches!(sample_switch_configs(&net, total + 1, 1, 1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn single_switch_sampling_is_uniform() {
        let switches: Vec<NodeId> = (0..5).map(NodeId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sets = sample_stitched_sets(&switches, 1, 10_000, &mut rng).unwrap();
        let mut counts = [0usize; 5];
        for s in sets {
            counts[s[0].0] += 1;
        }
        assert!(counts.iter().all(|&c| (1800..=2200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let (a, b) = (small(1), small(2));
        let net = combine(&a, &b, &match_graphs(&a, &b, &MatchingConfig::default()).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("stitched");
        net.save(&stem).unwrap();
        assert_eq!(StitchedNetwork::load(&stem).unwrap(), net);
    }
}
