use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{derive_seed, save_dataset, Approach, RunManifest, ScenarioConfig, SALT_STITCH};
use super::synthetic::generate_synthetic_party;
use crate::baselines::{ensemble_predict, federated_train, fine_tune, train_merged, Party, TrainCurve};
use crate::data::{AccessAudit, Dataset, Purpose};
use crate::error::{Error, Result};
use crate::evaluation::{
    enumerate_stitch_ensembles, evaluate_view, mean_dice, mean_hd95, rank_stitches, read_records, select_stitch, split_dataset,
    write_records, EvalContext, EvaluationRecord, SelectionInput, SplitPlan, StitchRank, Strategy, FOLDS,
};
use crate::graph::{annotate_progress, build_unet_template, execute, load_graph, save_graph, Mode, NetworkGraph, OutputSelector, SwitchConfig, SwitchMode};
use crate::matching::{match_graphs, MatchReport};
use crate::stitching::{combine_with, sample_switch_configs, CombineOptions, StitchedNetwork};
use crate::tensor::Tensor;
use crate::training::{train_stitches, StitchMethod};

const EVAL_BATCH: usize = 16;

/// Validation and test records of one approach.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scored {
    pub validation: Vec<EvaluationRecord>,
    pub test: Vec<EvaluationRecord>,
}

/// Mean metrics of one randomly stitched network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: String,
    pub fold: usize,
    pub count: usize,
    pub switches: usize,
    pub sample: usize,
    pub head: String,
    pub dice: f64,
    pub hd95: f64,
    /// Dice of the parent whose head the network uses.
    pub parent_dice: f64,
}

/// Stitch indices chosen by each strategy, per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub pairs: usize,
    pub strategy1: Vec<usize>,
    pub strategy2: usize,
    pub strategy3: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RankRow {
    fold: usize,
    dataset: String,
    stitch: usize,
    mean_dice: f64,
    mean_hd95: f64,
    dice_rank: f64,
    hd95_rank: f64,
    summary: f64,
}

/// A scenario bound to its content-addressed run directory.
pub struct Pipeline {
    pub scenario: ScenarioConfig,
    pub root: PathBuf,
    pub audit: AccessAudit,
    pub datasets: Vec<Dataset>,
    pub plans: Vec<SplitPlan>,
    pub templates: Vec<NetworkGraph>,
    pool: rayon::ThreadPool,
}

fn model_stem(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("fold{k}"))
}

fn models_present(dir: &Path, suffix: &str) -> bool {
    (0..FOLDS).all(|k| dir.join(format!("fold{k}{suffix}")).exists())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_rows<T: Serialize>(rows: &[T], header: &[&str], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_curves(curves: &[TrainCurve], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "step", "loss"])?;
    for (k, c) in curves.iter().enumerate() {
        for (s, l) in c.losses.iter().enumerate() {
            w.write_record([k.to_string(), s.to_string(), l.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn method_tag(m: StitchMethod) -> &'static str {
    match m {
        StitchMethod::Direct => "direct",
        StitchMethod::DoubleBatched => "db",
    }
}

impl Pipeline {
    pub fn new(scenario: ScenarioConfig, out: &Path, workers: usize) -> Result<Self> {
        scenario.validate()?;
        let root = out.join(scenario.hash()?);
        let mut datasets = Vec::new();
        let mut plans = Vec::new();
        let mut templates = Vec::new();
        for (i, spec) in scenario.parties.iter().enumerate() {
            let d = generate_synthetic_party(spec, scenario.image_size, scenario.data_seed(i))?;
            let groups: Option<Vec<usize>> = d.samples.iter().map(|s| s.group).collect();
            plans.push(split_dataset(d.len(), groups.as_deref(), scenario.split_seed(i))?);
            datasets.push(d);
            templates.push(build_unet_template(&scenario.architecture(i))?);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        Ok(Pipeline {
            scenario,
            root,
            audit: AccessAudit::new(),
            datasets,
            plans,
            templates,
            pool,
        })
    }

    pub fn labels(&self) -> Vec<&str> {
        self.scenario.labels()
    }

    pub fn label(&self, a: Approach) -> String {
        a.label(&self.labels())
    }

    pub fn dir(&self, a: Approach) -> PathBuf {
        self.root.join(self.label(a))
    }

    pub fn party(&self, i: usize) -> Party<'_> {
        Party {
            label: &self.scenario.parties[i].label,
            data: &self.datasets[i],
            plan: &self.plans[i],
        }
    }

    fn per_fold<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        self.pool.install(|| (0..FOLDS).into_par_iter().map(f).collect())
    }

    /// Writes both datasets and split plans under `data/`.
    pub fn write_data(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("data");
        create_dir(&dir)?;
        let mut out = Vec::new();
        for (i, d) in self.datasets.iter().enumerate() {
            let label = &self.scenario.parties[i].label;
            let data = dir.join(format!("{label}.json"));
            save_dataset(d, &data)?;
            let split = dir.join(format!("{label}.split.csv"));
            self.plans[i].write(&split)?;
            out.extend([data, split]);
        }
        Ok(out)
    }

    fn save_models(&self, dir: &Path, models: &[NetworkGraph]) -> Result<()> {
        create_dir(dir)?;
        for (k, m) in models.iter().enumerate() {
            save_graph(m, &model_stem(dir, k))?;
        }
        Ok(())
    }

    fn load_models(&self, a: Approach, hint: &str) -> Result<Vec<NetworkGraph>> {
        let dir = self.dir(a);
        if !models_present(&dir, ".graph.json") {
            return Err(Error::MissingArtifact(format!("{} models ({hint})", self.label(a))));
        }
        (0..FOLDS).map(|k| load_graph(&model_stem(&dir, k))).collect()
    }

    fn cached_or(&self, a: Approach, train: impl FnOnce() -> Result<(Vec<NetworkGraph>, Vec<TrainCurve>)>) -> Result<Vec<NetworkGraph>> {
        let dir = self.dir(a);
        if models_present(&dir, ".graph.json") {
            return self.load_models(a, "");
        }
        let (models, curves) = train()?;
        self.save_models(&dir, &models)?;
        write_curves(&curves, &dir.join("loss.csv"))?;
        Ok(models)
    }

    /// Basis networks of party `p`, trained when absent.
    pub fn train_basis_models(&self, p: usize) -> Result<Vec<NetworkGraph>> {
        self.cached_or(Approach::Basis { party: p }, || {
            let cfg = self.scenario.train_config();
            let party = self.party(p);
            let out = self.per_fold(|k| train_basis_fold(&party, k, &self.templates[p], &cfg, &self.audit))?;
            Ok(out.into_iter().unzip())
        })
    }

    pub fn basis_models(&self, p: usize) -> Result<Vec<NetworkGraph>> {
        self.load_models(Approach::Basis { party: p }, "train the basis networks first")
    }

    pub fn finetuned_models(&self, from: usize, to: usize, train: bool) -> Result<Vec<NetworkGraph>> {
        let a = Approach::FineTune { from, to };
        if !train {
            return self.load_models(a, "fine-tune first");
        }
        let base = self.basis_models(from)?;
        self.cached_or(a, || {
            let cfg = self.scenario.finetune_config();
            let initial = self.scenario.train_config().final_rate()?;
            let target = self.party(to);
            let out = self.per_fold(|k| {
                let view = target.train_view(k, &self.audit, Purpose::Training);
                let fcfg = crate::baselines::FineTuneConfig {
                    seed: derive_seed(cfg.seed, k as u64),
                    ..cfg.clone()
                };
                fine_tune(&base[k], &self.templates[from], &view, &fcfg, initial)
            })?;
            Ok(out.into_iter().unzip())
        })
    }

    pub fn federated_models(&self) -> Result<Vec<NetworkGraph>> {
        self.cached_or(Approach::Federated, || {
            let parties = [self.party(0), self.party(1)];
            let templates = [&self.templates[0], &self.templates[0]];
            let parallel = self.pool.current_num_threads() > 1;
            let models = self.pool.install(|| {
                federated_train(&parties, &templates, &self.scenario.federated_config(), self.scenario.federated, &self.audit, parallel)
            })?;
            Ok((models, Vec::new()))
        })
    }

    pub fn merged_models(&self) -> Result<Vec<NetworkGraph>> {
        let label = self.label(Approach::Merged);
        self.cached_or(Approach::Merged, || {
            let parties = [self.party(0), self.party(1)];
            let out = self.pool.install(|| {
                train_merged(&parties, &self.templates[0], &self.scenario.train_config(), &label, &self.audit, self.scenario.merge_privileged)
            })?;
            Ok(out.into_iter().unzip())
        })
    }

    /// Scores fold models on every party's validation fold and test split.
    /// Each party evaluates on its own data.
    pub fn evaluate(&self, approach: &str, purpose: Purpose, predict: &(dyn Fn(usize, &Tensor) -> Result<Tensor> + Sync)) -> Result<Scored> {
        let per = self.per_fold(|k| {
            let mut val = Vec::new();
            let mut test = Vec::new();
            for party in [self.party(0), self.party(1)] {
                let ctx = EvalContext {
                    approach,
                    fold: k,
                    spacing: self.scenario.spacing,
                    batch: EVAL_BATCH,
                };
                let v = party.validation_view(k, party.label, &self.audit, purpose);
                val.extend(evaluate_view(&v, &ctx, |x| predict(k, x))?);
                let t = party.test_view(party.label, &self.audit);
                test.extend(evaluate_view(&t, &ctx, |x| predict(k, x))?);
            }
            Ok((val, test))
        })?;
        let mut s = Scored::default();
        for (v, t) in per {
            s.validation.extend(v);
            s.test.extend(t);
        }
        Ok(s)
    }

    fn write_scored(&self, dir: &Path, s: &Scored) -> Result<Vec<PathBuf>> {
        create_dir(dir)?;
        let v = dir.join("validation.csv");
        let t = dir.join("test.csv");
        write_records(&s.validation, &v)?;
        write_records(&s.test, &t)?;
        Ok(vec![v, t])
    }

    fn stitch_dir(&self, method: StitchMethod, p: usize) -> PathBuf {
        self.root.join(format!("stitches-{}@{}", method_tag(method), self.scenario.parties[p].label))
    }

    /// Match reports of the fold-`k` basis pairs.
    pub fn write_match_reports(&self) -> Result<Vec<PathBuf>> {
        let (a, b) = (self.basis_models(0)?, self.basis_models(1)?);
        let dir = self.root.join("matching");
        create_dir(&dir)?;
        (0..FOLDS)
            .map(|k| {
                let pa = annotate_progress(&a[k])?;
                let pb = annotate_progress(&b[k])?;
                let m = match_graphs(&a[k], &b[k], &self.scenario.matching)?;
                let report = MatchReport::new(&a[k], &pa, &b[k], &pb, &m, &self.scenario.matching)?;
                let path = dir.join(format!("fold{k}.json"));
                report.save(&path)?;
                Ok(path)
            })
            .collect()
    }

    /// Combined networks with untrained stitches.
    pub fn combined_networks(&self) -> Result<Vec<StitchedNetwork>> {
        let (a, b) = (self.basis_models(0)?, self.basis_models(1)?);
        (0..FOLDS)
            .map(|k| {
                let m = match_graphs(&a[k], &b[k], &self.scenario.matching)?;
                let opts = CombineOptions {
                    seed: derive_seed(self.scenario.seed, SALT_STITCH + 50 + k as u64),
                    ..CombineOptions::default()
                };
                combine_with(&a[k], &b[k], &m, &opts)
            })
            .collect()
    }

    pub fn write_combined(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("combined");
        create_dir(&dir)?;
        self.combined_networks()?
            .iter()
            .enumerate()
            .map(|(k, net)| {
                let stem = model_stem(&dir, k);
                net.save(&stem)?;
                Ok(stem)
            })
            .collect()
    }

    /// Stitched networks trained by `method` on party `p`'s images. With
    /// `train` unset they must already exist.
    pub fn stitched_networks(&self, method: StitchMethod, p: usize, train: bool) -> Result<Vec<StitchedNetwork>> {
        let dir = self.stitch_dir(method, p);
        if models_present(&dir, ".stitched.json") {
            return (0..FOLDS).map(|k| StitchedNetwork::load(&model_stem(&dir, k))).collect();
        }
        if !train {
            return Err(Error::MissingArtifact(format!("{} (train the stitches first)", dir.display())));
        }
        let combined = self.combined_networks()?;
        let party = self.party(p);
        let trained = self.per_fold(|k| {
            let mut net = combined[k].clone();
            let view = party.train_view(k, &self.audit, Purpose::StitchTraining);
            let report = train_stitches(&mut net, &view, &self.scenario.stitch_config(method, k))?;
            Ok((net, report))
        })?;
        create_dir(&dir)?;
        let mut nets = Vec::new();
        for (k, (net, report)) in trained.into_iter().enumerate() {
            net.save(&model_stem(&dir, k))?;
            report.write_csv(&dir.join(format!("fold{k}.loss.csv")))?;
            nets.push(net);
        }
        Ok(nets)
    }

    /// Runs one approach and writes its outputs; returns the CSV paths.
    pub fn run(&self, a: Approach) -> Result<Vec<PathBuf>> {
        let label = self.label(a);
        let dir = self.dir(a);
        match a {
            Approach::Basis { party } => {
                let models = self.train_basis_models(party)?;
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| execute(&models[k], x, Mode::Eval, None))?;
                self.write_scored(&dir, &s)
            }
            Approach::FineTune { from, to } => {
                let models = self.finetuned_models(from, to, true)?;
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| execute(&models[k], x, Mode::Eval, None))?;
                self.write_scored(&dir, &s)
            }
            Approach::Ensemble => {
                let (ma, mb) = (self.basis_models(0)?, self.basis_models(1)?);
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| ensemble_predict(&[&ma[k], &mb[k]], x))?;
                self.write_scored(&dir, &s)
            }
            Approach::EnsembleFineTuned { target } => {
                let own = self.basis_models(target)?;
                let tuned = self.finetuned_models(1 - target, target, false)?;
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| ensemble_predict(&[&own[k], &tuned[k]], x))?;
                self.write_scored(&dir, &s)
            }
            Approach::Federated => {
                let models = self.federated_models()?;
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| execute(&models[k], x, Mode::Eval, None))?;
                self.write_scored(&dir, &s)
            }
            Approach::Merged => {
                let models = self.merged_models()?;
                let s = self.evaluate(&label, Purpose::Evaluation, &|k, x| execute(&models[k], x, Mode::Eval, None))?;
                self.write_scored(&dir, &s)
            }
            Approach::Stitch { method, perspective } => self.run_stitch(&label, &dir, method, perspective),
            Approach::Robustness { method, perspective } => {
                let rows = self.robustness(method, perspective)?;
                create_dir(&dir)?;
                let path = dir.join("robustness.csv");
                write_rows(&rows, &ROBUSTNESS_HEADER, &path)?;
                Ok(vec![path])
            }
        }
    }

    /// Scores every stitch-ensemble candidate on each party's validation
    /// folds (each party on its own data) and on the test splits.
    pub fn score_candidates(&self, method: StitchMethod, p: usize) -> Result<Vec<Vec<Scored>>> {
        let nets = self.stitched_networks(method, p, true)?;
        self.per_fold(|k| {
            let net = &nets[k];
            enumerate_stitch_ensembles(net)?
                .iter()
                .map(|c| {
                    let view = net.configure(&c.config)?;
                    let mut s = Scored::default();
                    for party in [self.party(0), self.party(1)] {
                        let ctx = EvalContext {
                            approach: &c.label(),
                            fold: k,
                            spacing: self.scenario.spacing,
                            batch: EVAL_BATCH,
                        };
                        let v = party.validation_view(k, party.label, &self.audit, Purpose::Selection);
                        s.validation.extend(evaluate_view(&v, &ctx, |x| view.run(x))?);
                        let t = party.test_view(party.label, &self.audit);
                        s.test.extend(evaluate_view(&t, &ctx, |x| view.run(x))?);
                    }
                    Ok(s)
                })
                .collect()
        })
    }

    fn run_stitch(&self, label: &str, dir: &Path, method: StitchMethod, p: usize) -> Result<Vec<PathBuf>> {
        let scored = self.score_candidates(method, p)?;
        let labels: Vec<String> = self.labels().iter().map(|s| s.to_string()).collect();
        let pairs = scored[0].len() - 1;
        // ranks[k][q]: summaries on party q's fold-k validation set.
        let mut rank_rows = Vec::new();
        let mut ranks: Vec<Vec<Vec<StitchRank>>> = Vec::new();
        for (k, cands) in scored.iter().enumerate() {
            let mut per_party = Vec::new();
            for q in &labels {
                let table: BTreeMap<usize, Vec<EvaluationRecord>> = cands[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, s.validation.iter().filter(|r| &r.dataset == q).cloned().collect()))
                    .collect();
                let r = rank_stitches(&table, pairs)?;
                rank_rows.extend(r.iter().map(|x| RankRow {
                    fold: k,
                    dataset: q.clone(),
                    stitch: x.stitch,
                    mean_dice: x.mean_dice,
                    mean_hd95: x.mean_hd95,
                    dice_rank: x.dice_rank,
                    hd95_rank: x.hd95_rank,
                    summary: x.summary,
                }));
                per_party.push(r);
            }
            ranks.push(per_party);
        }
        let summaries = |k: usize, q: usize| ranks[k][q].iter().map(|r| r.summary).collect::<Vec<f64>>();
        let input = SelectionInput {
            per_fold: (0..FOLDS).map(|k| summaries(k, p)).collect(),
            overall: (0..FOLDS).flat_map(|k| (0..labels.len()).map(move |q| (k, q))).map(|(k, q)| summaries(k, q)).collect(),
        };
        let report = SelectionReport {
            pairs,
            strategy1: (0..FOLDS)
                .map(|k| select_stitch(Strategy::CurrentFold(k), &input))
                .collect::<Result<_>>()?,
            strategy2: select_stitch(Strategy::AllFolds, &input)?,
            strategy3: select_stitch(Strategy::Overall, &input)?,
        };

        create_dir(dir)?;
        let mut out = Vec::new();
        let flat = |f: &dyn Fn(&Scored) -> &Vec<EvaluationRecord>| -> Vec<EvaluationRecord> {
            scored.iter().flat_map(|c| c.iter().flat_map(|s| f(s).iter().cloned())).collect()
        };
        for (name, recs) in [
            ("candidates_validation.csv", flat(&|s| &s.validation)),
            ("candidates_test.csv", flat(&|s| &s.test)),
        ] {
            let path = dir.join(name);
            write_records(&recs, &path)?;
            out.push(path);
        }
        let path = dir.join("ranks.csv");
        write_rows(&rank_rows, &RANK_HEADER, &path)?;
        out.push(path);
        let sel = dir.join("selection.json");
        fs::write(&sel, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&sel, e))?;

        let mut selected = Scored::default();
        for (tag, choice) in [
            ("ensemble", None),
            ("s1", Some(report.strategy1.clone())),
            ("s2", Some(vec![report.strategy2; FOLDS])),
            ("s3", Some(vec![report.strategy3; FOLDS])),
        ] {
            for (k, cands) in scored.iter().enumerate() {
                let cand = match &choice {
                    None => &cands[0],
                    Some(c) => &cands[c[k] + 1],
                };
                let relabel = |r: &EvaluationRecord| EvaluationRecord {
                    approach: format!("{label}/{tag}"),
                    ..r.clone()
                };
                selected.validation.extend(cand.validation.iter().map(relabel));
                selected.test.extend(cand.test.iter().map(relabel));
            }
        }
        out.extend(self.write_scored(dir, &selected)?);
        Ok(out)
    }

    /// Randomly stitched networks at each stitch count, scored on party
    /// `p`'s validation folds.
    pub fn robustness(&self, method: StitchMethod, p: usize) -> Result<Vec<RobustnessRow>> {
        let nets = self.stitched_networks(method, p, true)?;
        let party = self.party(p);
        let rows = self.per_fold(|k| {
            let net = &nets[k];
            let switches = net.switches();
            let view = party.validation_view(k, party.label, &self.audit, Purpose::Evaluation);
            let ctx = EvalContext {
                approach: "robustness",
                fold: k,
                spacing: self.scenario.spacing,
                batch: EVAL_BATCH,
            };
            let score = |cfg: &SwitchConfig| -> Result<(f64, f64)> {
                let c = net.configure(cfg)?;
                let r = evaluate_view(&view, &ctx, |x| c.run(x))?;
                Ok((mean_dice(&r), mean_hd95(&r)))
            };
            let parent = |sel: OutputSelector| score(&SwitchConfig::uniform(switches.iter().copied(), SwitchMode::Original, sel));
            let parents = [parent(OutputSelector::HeadA)?.0, parent(OutputSelector::HeadB)?.0];
            let mut rows = Vec::new();
            for count in self.scenario.robustness.counts_for(switches.len()) {
                let seed = derive_seed(self.scenario.sample_seed(k), count as u64);
                for (j, cfg) in sample_switch_configs(net, count, self.scenario.robustness.samples, seed)?.iter().enumerate() {
                    let (dice, hd95) = score(cfg)?;
                    let head = if cfg.selector == OutputSelector::HeadA { 0 } else { 1 };
                    rows.push(RobustnessRow {
                        method: method_tag(method).into(),
                        fold: k,
                        count,
                        switches: switches.len(),
                        sample: j,
                        head: self.scenario.parties[head].label.clone(),
                        dice,
                        hd95,
                        parent_dice: parents[head],
                    });
                }
            }
            Ok(rows)
        })?;
        Ok(rows.into_iter().flatten().collect())
    }
}

fn train_basis_fold(
    party: &Party<'_>,
    k: usize,
    template: &NetworkGraph,
    cfg: &crate::baselines::SegTrainConfig,
    audit: &AccessAudit,
) -> Result<(NetworkGraph, TrainCurve)> {
    let view = party.train_view(k, audit, Purpose::Training);
    crate::baselines::train_model(template, &view, cfg, crate::baselines::run_seed(cfg.seed, k, 0))
}

const ROBUSTNESS_HEADER: [&str; 9] = ["method", "fold", "count", "switches", "sample", "head", "dice", "hd95", "parent_dice"];
const RANK_HEADER: [&str; 8] = ["fold", "dataset", "stitch", "mean_dice", "mean_hd95", "dice_rank", "hd95_rank", "summary"];

pub fn read_robustness(path: &Path) -> Result<Vec<RobustnessRow>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_slice())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn read_selection(path: &Path) -> Result<SelectionReport> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Recomputes a stitch selection from a `candidates_validation.csv` of
/// perspective `p`.
pub fn reselect(path: &Path, labels: &[&str], p: usize) -> Result<SelectionReport> {
    let recs = read_records(path)?;
    let pairs = recs.iter().filter_map(|r| r.approach.strip_prefix("stitch")?.parse::<usize>().ok()).max().map_or(0, |m| m + 1);
    let summaries = |k: usize, q: &str| -> Result<Vec<f64>> {
        let table: BTreeMap<usize, Vec<EvaluationRecord>> = (0..pairs)
            .map(|i| {
                let name = format!("stitch{i}");
                (i, recs.iter().filter(|r| r.fold == k && r.dataset == q && r.approach == name).cloned().collect())
            })
            .collect();
        Ok(rank_stitches(&table, pairs)?.iter().map(|r| r.summary).collect())
    };
    let input = SelectionInput {
        per_fold: (0..FOLDS).map(|k| summaries(k, labels[p])).collect::<Result<_>>()?,
        overall: (0..FOLDS)
            .flat_map(|k| labels.iter().map(move |q| (k, *q)))
            .map(|(k, q)| summaries(k, q))
            .collect::<Result<_>>()?,
    };
    Ok(SelectionReport {
        pairs,
        strategy1: (0..FOLDS)
            .map(|k| select_stitch(Strategy::CurrentFold(k), &input))
            .collect::<Result<_>>()?,
        strategy2: select_stitch(Strategy::AllFolds, &input)?,
        strategy3: select_stitch(Strategy::Overall, &input)?,
    })
}

/// Runs `approaches` and their prerequisites in dependency order and writes
/// the manifest.
pub fn run_matrix(scenario: &ScenarioConfig, approaches: &[Approach], out: &Path, workers: usize) -> Result<(RunManifest, Pipeline)> {
    let pipeline = Pipeline::new(scenario.clone(), out, workers)?;
    // Close over prerequisites; variant order already puts them first.
    let mut order = approaches.to_vec();
    let mut i = 0;
    while i < order.len() {
        for a in order[i].prerequisites() {
            if !order.contains(&a) {
                order.push(a);
            }
        }
        i += 1;
    }
    order.sort();
    order.dedup();
    let mut outputs = Vec::new();
    for a in &order {
        for p in pipeline.run(*a)? {
            outputs.push(p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p));
        }
    }
    let labels = pipeline.labels();
    let manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario_hash: scenario.hash()?,
        scenario: scenario.clone(),
        approaches: order.iter().map(|a| a.label(&labels)).collect(),
        seeds: scenario.seeds(),
        outputs,
    };
    create_dir(&pipeline.root)?;
    manifest.save(&pipeline.root.join("manifest.json"))?;
    Ok((manifest, pipeline))
}

/// Re-runs a manifest into `out`.
pub fn rerun_manifest(manifest: &RunManifest, out: &Path, workers: usize) -> Result<(RunManifest, Pipeline)> {
    let labels = manifest.scenario.labels();
    let approaches = manifest
        .approaches
        .iter()
        .map(|a| Approach::parse(a, &labels))
        .collect::<Result<Vec<_>>>()?;
    run_matrix(&manifest.scenario, &approaches, out, workers)
}
