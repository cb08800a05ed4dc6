//! Non-stitching collaboration approaches: single-party training,
//! fine-tuning with warm-up, prediction ensembles, simulated federated
//! averaging and merged-dataset training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AccessAudit, Accessor, DataView, Dataset, Purpose, Sample, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::{SplitPlan, FOLDS};
use crate::graph::{apply_norm_updates, execute, trace, Mode, NetworkGraph, OutputSelector, SwitchConfig, TableHandler, TraceOptions};
use crate::tensor::{schedule_lr, AdamW, Op, Schedule, Tape, Tensor};

/// One data owner: its samples and their split into folds and test.
#[derive(Clone, Copy)]
pub struct Party<'a> {
    pub label: &'a str,
    pub data: &'a Dataset,
    pub plan: &'a SplitPlan,
}

impl<'a> Party<'a> {
    /// Training portion of fold `k`, read by this party for `purpose`.
    pub fn train_view(&self, k: usize, audit: &'a AccessAudit, purpose: Purpose) -> DataView<'a> {
        DataView::new(self.data, self.plan.train(k), SplitKind::Train).audited(Accessor {
            audit,
            actor: self.label,
            purpose,
        })
    }

    pub fn validation_view(&self, k: usize, actor: &'a str, audit: &'a AccessAudit, purpose: Purpose) -> DataView<'a> {
        DataView::new(self.data, self.plan.fold(k), SplitKind::Validation).audited(Accessor { audit, actor, purpose })
    }

    pub fn test_view(&self, actor: &'a str, audit: &'a AccessAudit) -> DataView<'a> {
        DataView::new(self.data, self.plan.test(), SplitKind::Test).audited(Accessor {
            audit,
            actor,
            purpose: Purpose::Evaluation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 40,
            lr: 1e-2,
            weight_decay: 1e-4,
            schedule: Schedule::Polynomial,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate of the last epoch, where a warm-up continues from.
    pub fn final_rate(&self) -> Result<f64> {
        if self.epochs == 0 {
            return Ok(self.lr);
        }
        schedule_lr(&self.schedule, self.lr, self.epochs - 1, self.epochs)
    }
}

/// Fine-tuning budget. Warm-up is a third of the epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 60,
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.epochs / 3
    }

    /// The equivalent training config, warming up from `initial_rate`.
    pub fn train_config(&self, initial_rate: f64) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: Schedule::WarmupComposite {
                initial_rate,
                warmup_epochs: self.warmup_epochs(),
            },
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// Mean loss of every optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
}

/// Mean of soft-Dice loss and pixelwise cross-entropy on `[n, 2, h, w]`
/// probabilities.
pub fn segmentation_loss(g: &NetworkGraph, x: &Tensor, target: &Tensor) -> Result<f64> {
    let probs = execute(g, x, Mode::Eval, None)?;
    let dice = crate::tensor::forward_op(&Op::SoftDice, &[&probs, target])?;
    let ce = crate::tensor::forward_op(&Op::CrossEntropy, &[&probs, target])?;
    Ok(0.5 * (dice.data()[0] as f64 + ce.data()[0] as f64))
}

/// One optimizer step on a batch. Norm statistics are updated.
pub fn train_step(g: &mut NetworkGraph, opt: &mut AdamW, x: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.constant(x.detached());
    let opts = TraceOptions {
        mode: Mode::Train,
        grad: true,
        selector: None,
        live: None,
    };
    let empty = SwitchConfig::new([], OutputSelector::HeadA);
    let tr = trace(g, &mut tape, input, opts, &mut TableHandler { table: &empty })?;
    let probs = tr.output.ok_or_else(|| Error::Malformed("trace produced no output".into()))?;
    let t = tape.constant(target.detached());
    let dice = tape.apply(Op::SoftDice, &[probs, t])?;
    let ce = tape.apply(Op::CrossEntropy, &[probs, t])?;
    let sum = tape.apply(Op::Add, &[dice, ce])?;
    let loss = tape.apply(Op::Scale { factor: 0.5 }, &[sum])?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    tr.accumulate(&grads, g)?;
    opt.step(g.parameters_mut())?;
    apply_norm_updates(g, &tr.norm_updates)?;
    Ok(value)
}

/// One shuffled pass over `data`.
pub fn run_epoch(g: &mut NetworkGraph, opt: &mut AdamW, data: &DataView<'_>, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let (x, t) = data.batch(chunk)?;
            train_step(g, opt, &x, &t)
        })
        .collect()
}

/// Seed of a training run for `fold` at `slot` (the party index in a
/// federation, 0 otherwise).
pub(crate) fn run_seed(seed: u64, fold: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((fold as u64) << 32) ^ slot as u64
}

/// Trains a copy of `init` on `data`.
pub fn train_model(init: &NetworkGraph, data: &DataView<'_>, cfg: &SegTrainConfig, seed: u64) -> Result<(NetworkGraph, TrainCurve)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training portion".into()));
    }
    let mut g = init.clone();
    g.set_trainable(|_| true);
    g.zero_grad();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = TrainCurve::default();
    for epoch in 0..cfg.epochs {
        opt.lr = schedule_lr(&cfg.schedule, cfg.lr, epoch, cfg.epochs)?;
        curve.losses.extend(run_epoch(&mut g, &mut opt, data, cfg.batch_size, &mut rng)?);
    }
    Ok((g, curve))
}

/// One model per fold, each trained on the fold's training portion.
pub fn train_basis(party: &Party<'_>, template: &NetworkGraph, cfg: &SegTrainConfig, audit: &AccessAudit) -> Result<Vec<(NetworkGraph, TrainCurve)>> {
    (0..FOLDS)
        .map(|k| {
            let view = party.train_view(k, audit, Purpose::Training);
            train_model(template, &view, cfg, run_seed(cfg.seed, k, 0))
        })
        .collect()
}

/// Copies weights and norm statistics of `model` into `architecture`.
pub fn load_into(model: &NetworkGraph, architecture: &NetworkGraph) -> Result<NetworkGraph> {
    if !model.same_structure(architecture) {
        return Err(Error::ArchitectureMismatch("weights do not fit the target architecture".into()));
    }
    let mut g = architecture.clone();
    for id in model.ordered_ids() {
        let src = model.node(id)?;
        let dst = g.node_mut(id)?;
        for (key, t) in &src.buffers {
            match dst.buffers.get_mut(key) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                _ => return Err(Error::ArchitectureMismatch(format!("buffer `{key}` of node {id}"))),
            }
        }
        dst.params = src.params.clone();
    }
    Ok(g)
}

/// Continues training `model` on another party's data. The learning rate
/// warms up from `initial_rate` (the last rate of the original schedule).
pub fn fine_tune(
    model: &NetworkGraph,
    architecture: &NetworkGraph,
    data: &DataView<'_>,
    cfg: &FineTuneConfig,
    initial_rate: f64,
) -> Result<(NetworkGraph, TrainCurve)> {
    let start = load_into(model, architecture)?;
    if cfg.epochs == 0 {
        return Ok((start, TrainCurve::default()));
    }
    train_model(&start, data, &cfg.train_config(initial_rate), cfg.seed)
}

/// Mean of the models' class probabilities.
pub fn ensemble_predict(models: &[&NetworkGraph], x: &Tensor) -> Result<Tensor> {
    let (first, rest) = models.split_first().ok_or_else(|| Error::Empty("ensemble without models".into()))?;
    if rest.is_empty() {
        return execute(first, x, Mode::Eval, None);
    }
    let outs = models
        .iter()
        .map(|m| execute(m, x, Mode::Eval, None))
        .collect::<Result<Vec<_>>>()?;
    let shape = outs[0].shape().to_vec();
    if outs.iter().any(|o| o.shape() != shape.as_slice()) {
        return Err(Error::shape("ensemble_predict", "models disagree on output shape"));
    }
    let n = outs.len() as f64;
    let data = (0..outs[0].numel())
        .map(|i| (outs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedWeighting {
    #[default]
    Unweighted,
    /// Parties weighted by training-set size.
    BySize,
}

/// Weighted mean of every parameter and buffer, written into `target`.
pub fn average_weights(target: &mut NetworkGraph, models: &[NetworkGraph], weights: &[f64]) -> Result<()> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::InvalidConfig("one weight per model required".into()));
    }
    if models.iter().any(|m| !m.same_structure(target)) {
        return Err(Error::ArchitectureMismatch("federated parties use different architectures".into()));
    }
    let total: f64 = weights.iter().sum();
    for id in target.ordered_ids() {
        let node = target.node_mut(id)?;
        let tensors = node
            .params
            .iter_mut()
            .map(|(k, t)| (false, k.clone(), t))
            .chain(node.buffers.iter_mut().map(|(k, t)| (true, k.clone(), t)));
        for (is_buffer, key, t) in tensors {
            let sources = models
                .iter()
                .map(|m| {
                    let n = m.node(id)?;
                    let map = if is_buffer { &n.buffers } else { &n.params };
                    map.get(&key)
                        .filter(|s| s.shape() == t.shape())
                        .ok_or_else(|| Error::ArchitectureMismatch(format!("`{key}` of node {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (sources.iter().zip(weights).map(|(s, w)| w * s.data()[i] as f64).sum::<f64>() / total) as f32;
            }
        }
    }
    Ok(())
}

/// Federated averaging: each round every party trains one epoch from the
/// shared weights, then the shared weights become the average. Parties keep
/// their own optimizer state and shuffling stream; `parallel` runs them on
/// the worker pool with identical results.
pub fn federated_train(
    parties: &[Party<'_>],
    templates: &[&NetworkGraph],
    cfg: &SegTrainConfig,
    weighting: FedWeighting,
    audit: &AccessAudit,
    parallel: bool,
) -> Result<Vec<NetworkGraph>> {
    cfg.validate()?;
    if parties.is_empty() || parties.len() != templates.len() {
        return Err(Error::InvalidConfig("one template per party required".into()));
    }
    if templates.iter().any(|t| !t.same_structure(templates[0])) {
        return Err(Error::ArchitectureMismatch("federated parties use different architectures".into()));
    }
    (0..FOLDS)
        .map(|k| {
            let views: Vec<DataView<'_>> = parties.iter().map(|p| p.train_view(k, audit, Purpose::Training)).collect();
            if views.iter().any(DataView::is_empty) {
                return Err(Error::Empty("training portion".into()));
            }
            let weights: Vec<f64> = match weighting {
                FedWeighting::Unweighted => vec![1.0; parties.len()],
                FedWeighting::BySize => views.iter().map(|v| v.len() as f64).collect(),
            };
            let mut shared = templates[0].clone();
            shared.set_trainable(|_| true);
            shared.zero_grad();
            struct Local {
                opt: AdamW,
                rng: ChaCha8Rng,
            }
            let mut locals: Vec<Local> = (0..parties.len())
                .map(|i| Local {
                    opt: AdamW::new(cfg.lr, cfg.weight_decay),
                    rng: ChaCha8Rng::seed_from_u64(run_seed(cfg.seed, k, i)),
                })
                .collect();
            for round in 0..cfg.epochs {
                let lr = schedule_lr(&cfg.schedule, cfg.lr, round, cfg.epochs)?;
                let local_round = |(local, view): (&mut Local, &DataView<'_>)| -> Result<NetworkGraph> {
                    let mut g = shared.clone();
                    local.opt.lr = lr;
                    run_epoch(&mut g, &mut local.opt, view, cfg.batch_size, &mut local.rng)?;
                    Ok(g)
                };
                let trained: Vec<NetworkGraph> = if parallel {
                    locals.par_iter_mut().zip(views.par_iter()).map(local_round).collect::<Result<_>>()?
                } else {
                    locals.iter_mut().zip(views.iter()).map(local_round).collect::<Result<_>>()?
                };
                average_weights(&mut shared, &trained, &weights)?;
            }
            Ok(shared)
        })
        .collect()
}

/// Training on the union of all parties' fold-`k` training portions.
/// Requires `privileged`, since every party's raw samples are pooled.
pub fn train_merged(
    parties: &[Party<'_>],
    template: &NetworkGraph,
    cfg: &SegTrainConfig,
    actor: &str,
    audit: &AccessAudit,
    privileged: bool,
) -> Result<Vec<(NetworkGraph, TrainCurve)>> {
    if !privileged {
        return Err(Error::PrivilegeRequired("merged-dataset training pools raw samples".into()));
    }
    let first = parties.first().ok_or_else(|| Error::Empty("no parties to merge".into()))?;
    if parties.iter().any(|p| p.plan.fold_sizes().len() != first.plan.fold_sizes().len()) {
        return Err(Error::InvalidConfig("parties disagree on the number of folds".into()));
    }
    (0..FOLDS)
        .map(|k| {
            let merged = merged_training_set(parties, k, actor, audit)?;
            let view = DataView::all(&merged);
            train_model(template, &view, cfg, run_seed(cfg.seed, k, 0))
        })
        .collect()
}

/// Pooled fold-`k` training samples, read through each party's audit.
pub fn merged_training_set(parties: &[Party<'_>], k: usize, actor: &str, audit: &AccessAudit) -> Result<Dataset> {
    let first = parties.first().ok_or_else(|| Error::Empty("no parties to merge".into()))?;
    let mut samples = Vec::new();
    for p in parties {
        if p.data.channels != first.data.channels || p.data.size != first.data.size {
            return Err(Error::shape("train_merged", "parties differ in image format"));
        }
        let view = DataView::new(p.data, p.plan.train(k), SplitKind::Train).audited(Accessor {
            audit,
            actor,
            purpose: Purpose::Training,
        });
        let positions: Vec<usize> = (0..view.len()).collect();
        for (pos, (_, mask)) in view.masks(&positions)?.into_iter().enumerate() {
            let image = p.data.sample(view.indices[pos])?.image.clone();
            samples.push(Sample {
                id: samples.len(),
                image,
                mask: mask.to_vec(),
                group: None,
            });
        }
    }
    Ok(Dataset {
        owner: actor.to_string(),
        channels: first.data.channels,
        size: first.data.size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::split_dataset;
    use crate::graph::{build_unet_template, UNetConfig};

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 2,
            image_size: 8,
            ..UNetConfig::default()
        }
    }

    fn toy(owner: &str, n: usize, shift: f32, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|id| {
                let (r0, c0) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let mut mask = vec![0u8; 64];
                for r in r0..r0 + 3 {
                    for c in c0..c0 + 3 {
                        mask[r * 8 + c] = 1;
                    }
                }
                let image = Tensor::from_fn(&[1, 8, 8], |i| shift + mask[i] as f32 * 0.5 + rng.gen_range(-0.05..0.05));
                Sample { id, image, mask, group: None }
            })
            .collect();
        Dataset {
            owner: owner.into(),
            channels: 1,
            size: 8,
            samples,
        }
    }

    fn quick() -> SegTrainConfig {
        SegTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..SegTrainConfig::default()
        }
    }

    #[test]
    fn basis_training_is_deterministic_and_learns() {
        let data = toy("a", 24, 0.1, 1);
        let plan = split_dataset(data.len(), None, 0).unwrap();
        let party = Party { label: "a", data: &data, plan: &plan };
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let audit = AccessAudit::new();
        let cfg = SegTrainConfig { epochs: 15, ..quick() };
        let first = train_basis(&party, &template, &cfg, &audit).unwrap();
        let second = train_basis(&party, &template, &cfg, &audit).unwrap();
        assert_eq!(first.len(), FOLDS);
        for ((a, ca), (b, cb)) in first.iter().zip(&second) {
            assert_eq!(a, b);
            assert_eq!(ca, cb);
            let half = ca.losses.len() / 2;
            let head: f64 = ca.losses[..3].iter().sum::<f64>() / 3.0;
            let tail: f64 = ca.losses[half..].iter().sum::<f64>() / (ca.losses.len() - half) as f64;
            assert!(tail < head, "{head} -> {tail}");
        }
        assert!(audit.test_leaks().is_empty());
        assert!(audit.cross_party_reads("a").is_empty());
    }

    #[test]
    fn zero_epoch_fine_tune_is_identity_and_preserves_structure() {
        let data = toy("b", 12, 0.9, 2);
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let view = DataView::all(&data);
        let (model, _) = train_model(&template, &view, &quick(), 0).unwrap();
        let cfg = FineTuneConfig { epochs: 0, ..FineTuneConfig::default() };
        let (same, _) = fine_tune(&model, &template, &view, &cfg, 1e-3).unwrap();
        assert_eq!(same, model);
        let (tuned, _) = fine_tune(&model, &template, &view, &FineTuneConfig { epochs: 3, ..cfg }, 1e-3).unwrap();
        assert!(tuned.same_structure(&model));
        assert_ne!(tuned, model);
        let other = build_unet_template(&UNetConfig { base_channels: 3, ..tiny_cfg() }).unwrap();
        assert!(matches!(fine_tune(&model, &other, &view, &cfg, 1e-3), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn warmup_starts_at_the_final_original_rate() {
        let orig = SegTrainConfig::default();
        let rate = orig.final_rate().unwrap();
        let ft = FineTuneConfig::default().train_config(rate);
        assert_eq!(schedule_lr(&ft.schedule, ft.lr, 0, ft.epochs).unwrap(), rate);
        assert_eq!(FineTuneConfig::default().warmup_epochs() * 3, FineTuneConfig::default().epochs);
    }

    #[test]
    fn ensemble_means_probabilities() {
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let other = build_unet_template(&UNetConfig { seed: 5, ..tiny_cfg() }).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 7) as f32 * 0.1);
        let single = execute(&template, &x, Mode::Eval, None).unwrap();
        assert_eq!(ensemble_predict(&[&template], &x).unwrap(), single);
        assert_eq!(ensemble_predict(&[&template, &template], &x).unwrap(), single);
        let pa = single.data()[0] as f64;
        let pb = execute(&other, &x, Mode::Eval, None).unwrap().data()[0] as f64;
        let mixed = ensemble_predict(&[&template, &other], &x).unwrap().data()[0] as f64;
        assert!((mixed - (pa + pb) / 2.0).abs() < 1e-7);
        assert!(ensemble_predict(&[], &x).is_err());
    }

    #[test]
    fn averaging_is_the_arithmetic_mean() {
        let mut target = build_unet_template(&tiny_cfg()).unwrap();
        let mut a = target.clone();
        let mut b = target.clone();
        let (name, _) = target.parameters().next().unwrap();
        for (g, vals) in [(&mut a, [1.0, 3.0]), (&mut b, [3.0, 5.0])] {
            let (_, t) = g.parameters_mut().find(|(n, _)| *n == name).unwrap();
            t.data_mut()[..2].copy_from_slice(&vals);
        }
        average_weights(&mut target, &[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
        let (_, t) = target.parameters().find(|(n, _)| *n == name).unwrap();
        assert_eq!(&t.data()[..2], &[2.0, 4.0]);
        for ((_, x), ((_, y), (_, z))) in target.parameters().zip(a.parameters().zip(b.parameters())) {
            for i in 0..x.numel() {
                assert_eq!(x.data()[i], ((y.data()[i] as f64 + z.data()[i] as f64) / 2.0) as f32);
            }
        }
    }

    #[test]
    fn federation_of_one_matches_basis_training() {
        let data = toy("a", 18, 0.1, 3);
        let plan = split_dataset(data.len(), None, 0).unwrap();
        let party = Party { label: "a", data: &data, plan: &plan };
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let audit = AccessAudit::new();
        let basis = train_basis(&party, &template, &quick(), &audit).unwrap();
        let fed = federated_train(&[party], &[&template], &quick(), FedWeighting::Unweighted, &audit, false).unwrap();
        for ((b, _), f) in basis.iter().zip(&fed) {
            assert_eq!(b, f);
        }
    }

    #[test]
    fn federation_is_worker_independent_and_isolated() {
        let a = toy("a", 18, 0.1, 3);
        let b = toy("b", 18, 0.9, 4);
        let pa = split_dataset(a.len(), None, 0).unwrap();
        let pb = split_dataset(b.len(), None, 1).unwrap();
        let parties = [
            Party { label: "a", data: &a, plan: &pa },
            Party { label: "b", data: &b, plan: &pb },
        ];
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let audit = AccessAudit::new();
        let seq = federated_train(&parties, &[&template, &template], &quick(), FedWeighting::Unweighted, &audit, false).unwrap();
        let par = federated_train(&parties, &[&template, &template], &quick(), FedWeighting::Unweighted, &audit, true).unwrap();
        assert_eq!(seq, par);
        assert!(audit.cross_party_reads("a").is_empty());
        assert!(audit.cross_party_reads("b").is_empty());
        let other = build_unet_template(&UNetConfig { base_channels: 3, ..tiny_cfg() }).unwrap();
        assert!(matches!(
            federated_train(&parties, &[&template, &other], &quick(), FedWeighting::Unweighted, &audit, false),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn identical_parties_average_to_themselves() {
        let a = toy("a", 18, 0.1, 3);
        let plan = split_dataset(a.len(), None, 0).unwrap();
        let party = Party { label: "a", data: &a, plan: &plan };
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let audit = AccessAudit::new();
        // Same data, same slot seeds: give both parties slot 0 by federating one.
        let one = federated_train(&[party], &[&template], &quick(), FedWeighting::Unweighted, &audit, false).unwrap();
        let model = &one[0];
        let mut target = model.clone();
        average_weights(&mut target, &[model.clone(), model.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(&target, model);
    }

    #[test]
    fn merged_set_is_the_union_and_needs_privilege() {
        let a = toy("a", 18, 0.1, 3);
        let b = toy("b", 24, 0.9, 4);
        let pa = split_dataset(a.len(), None, 0).unwrap();
        let pb = split_dataset(b.len(), None, 1).unwrap();
        let parties = [
            Party { label: "a", data: &a, plan: &pa },
            Party { label: "b", data: &b, plan: &pb },
        ];
        let audit = AccessAudit::new();
        let merged = merged_training_set(&parties, 0, "a+b", &audit).unwrap();
        assert_eq!(merged.len(), pa.train(0).len() + pb.train(0).len());
        let template = build_unet_template(&tiny_cfg()).unwrap();
        assert!(matches!(
            train_merged(&parties, &template, &quick(), "a+b", &audit, false),
            Err(Error::PrivilegeRequired(_))
        ));
        assert!(audit.test_leaks().is_empty());
        assert!(audit.cross_party_reads("a").is_empty());
    }

    #[test]
    fn merging_with_an_empty_party_equals_basis_training() {
        let a = toy("a", 18, 0.1, 3);
        let empty = Dataset { samples: Vec::new(), ..toy("e", 0, 0.0, 0) };
        let pa = split_dataset(a.len(), None, 0).unwrap();
        let pe = SplitPlan { assignment: Vec::new() };
        let audit = AccessAudit::new();
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let parties = [
            Party { label: "a", data: &a, plan: &pa },
            Party { label: "e", data: &empty, plan: &pe },
        ];
        let merged = train_merged(&parties, &template, &quick(), "a+e", &audit, true).unwrap();
        let basis = train_basis(&parties[0], &template, &quick(), &audit).unwrap();
        for ((m, _), (b, _)) in merged.iter().zip(&basis) {
            assert_eq!(m, b);
        }
    }

    #[test]
    fn background_only_data_drives_loss_to_the_trivial_optimum() {
        let mut data = toy("a", 12, 0.1, 5);
        for s in &mut data.samples {
            s.mask.iter_mut().for_each(|m| *m = 0);
        }
        let template = build_unet_template(&tiny_cfg()).unwrap();
        let view = DataView::all(&data);
        let (model, _) = train_model(&template, &view, &SegTrainConfig { epochs: 80, schedule: Schedule::Constant, ..quick() }, 0).unwrap();
        let x = data.images(&[0, 1, 2, 3]).unwrap();
        let t = data.targets(&[0, 1, 2, 3]).unwrap();
        let probs = execute(&model, &x, Mode::Eval, None).unwrap();
        let ce = crate::tensor::forward_op(&Op::CrossEntropy, &[&probs, &t]).unwrap().data()[0];
        // The optimum predicts background everywhere; the soft-Dice term of
        // an empty foreground only vanishes in the limit, so check the
        // prediction and the cross-entropy part.
        assert!(crate::evaluation::threshold(&probs).unwrap().iter().flatten().all(|&m| m == 0));
        assert!(ce < 0.05, "{ce}");
        assert!(segmentation_loss(&model, &x, &t).unwrap() <= segmentation_loss(&template, &x, &t).unwrap());
    }
}
