use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::PartySpec;
use crate::baselines::{FedWeighting, FineTuneConfig, SegTrainConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::UNetConfig;
use crate::matching::MatchingConfig;
use crate::tensor::Tensor;
use crate::training::{StitchMethod, StitchTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    /// Numbers of Stitched switches to sample; quartiles of the switch
    /// count when absent.
    pub counts: Option<Vec<usize>>,
    /// Configurations drawn per count.
    pub samples: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { counts: None, samples: 4 }
    }
}

impl RobustnessConfig {
    pub fn counts_for(&self, switches: usize) -> Vec<usize> {
        match &self.counts {
            Some(c) => c.clone(),
            None => {
                let mut c: Vec<usize> = (0..=4).map(|q| (q * switches).div_ceil(4)).collect();
                c.dedup();
                c
            }
        }
    }
}

/// A two-party experiment: data distributions, architectures and budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub image_size: usize,
    pub parties: Vec<PartySpec>,
    /// One per party; `image_size` and `seed` are set by the scenario.
    pub architectures: Vec<UNetConfig>,
    pub train: SegTrainConfig,
    pub finetune: FineTuneConfig,
    pub direct: StitchTrainConfig,
    pub double_batched: StitchTrainConfig,
    pub matching: MatchingConfig,
    pub federated: FedWeighting,
    /// Federated averaging rounds; each round is one local epoch per party.
    pub federated_rounds: usize,
    /// Permits pooling raw samples for the merged-dataset upper bound.
    pub merge_privileged: bool,
    pub robustness: RobustnessConfig,
    /// Physical pixel size along (rows, cols).
    pub spacing: [f64; 2],
    /// Multiplies every epoch budget; 1 keeps the configured budgets.
    pub epoch_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            image_size: 32,
            parties: vec![
                PartySpec {
                    label: "a".into(),
                    samples: 72,
                    blobs: [1, 2],
                    radius: [0.12, 0.25],
                    background: 0.2,
                    foreground: 0.7,
                    texture: 0.15,
                    noise: 0.1,
                    frames_per_group: None,
                },
                PartySpec {
                    label: "b".into(),
                    samples: 48,
                    blobs: [1, 3],
                    radius: [0.1, 0.2],
                    background: 0.75,
                    foreground: 0.3,
                    texture: 0.15,
                    noise: 0.1,
                    frames_per_group: None,
                },
            ],
            architectures: vec![UNetConfig::default(), UNetConfig::default()],
            train: SegTrainConfig::default(),
            finetune: FineTuneConfig::default(),
            direct: StitchTrainConfig::new(StitchMethod::Direct),
            double_batched: StitchTrainConfig::new(StitchMethod::DoubleBatched),
            matching: MatchingConfig::default(),
            federated: FedWeighting::Unweighted,
            federated_rounds: 80,
            merge_privileged: true,
            robustness: RobustnessConfig::default(),
            spacing: [1.0, 1.0],
            epoch_scale: 1.0,
        }
    }
}

/// Derived seed for component `salt` of the run seeded with `seed`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub(crate) const SALT_DATA: u64 = 100;
pub(crate) const SALT_SPLIT: u64 = 200;
pub(crate) const SALT_INIT: u64 = 300;
pub(crate) const SALT_TRAIN: u64 = 400;
pub(crate) const SALT_FINETUNE: u64 = 500;
pub(crate) const SALT_STITCH: u64 = 600;
pub(crate) const SALT_SAMPLE: u64 = 700;

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot encode scenario: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.parties.len() != 2 || self.architectures.len() != 2 {
            return Err(Error::InvalidConfig("a scenario has exactly two parties and two architectures".into()));
        }
        for p in &self.parties {
            p.validate()?;
        }
        if self.parties[0].label == self.parties[1].label || self.parties.iter().any(|p| !valid_label(&p.label)) {
            return Err(Error::InvalidConfig("party labels must be distinct lowercase alphanumerics".into()));
        }
        if self.parties[0].same_distribution(&self.parties[1]) {
            return Err(Error::InvalidConfig("the parties must differ in at least one distribution parameter".into()));
        }
        if !(self.epoch_scale > 0.0) {
            return Err(Error::InvalidConfig("epoch scale must be positive".into()));
        }
        if self.image_size % (1 << (self.architectures.iter().map(|a| a.depth).max().unwrap_or(1) - 1)) != 0 {
            return Err(Error::InvalidConfig("image size must be divisible by every downsampling".into()));
        }
        self.train.validate()?;
        self.direct.validate()?;
        self.double_batched.validate()?;
        self.matching.validate()
    }

    /// Content hash naming the run directory.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    pub fn labels(&self) -> Vec<&str> {
        self.parties.iter().map(|p| p.label.as_str()).collect()
    }

    pub fn party_index(&self, label: &str) -> Result<usize> {
        self.parties
            .iter()
            .position(|p| p.label == label)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown party `{label}`")))
    }

    fn scaled(&self, epochs: usize) -> usize {
        if epochs == 0 {
            0
        } else {
            ((epochs as f64 * self.epoch_scale).round() as usize).max(1)
        }
    }

    pub fn train_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.scaled(self.train.epochs),
            seed: derive_seed(self.seed, SALT_TRAIN),
            ..self.train.clone()
        }
    }

    /// Training configuration of federated parties; `epochs` counts rounds.
    pub fn federated_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.scaled(self.federated_rounds),
            ..self.train_config()
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.scaled(self.finetune.epochs),
            seed: derive_seed(self.seed, SALT_FINETUNE),
            ..self.finetune.clone()
        }
    }

    pub fn stitch_config(&self, method: StitchMethod, fold: usize) -> StitchTrainConfig {
        let base = match method {
            StitchMethod::Direct => &self.direct,
            StitchMethod::DoubleBatched => &self.double_batched,
        };
        StitchTrainConfig {
            method,
            epochs: Some(self.scaled(base.epochs())),
            seed: derive_seed(self.seed, SALT_STITCH + fold as u64),
            ..base.clone()
        }
    }

    pub fn architecture(&self, party: usize) -> UNetConfig {
        UNetConfig {
            image_size: self.image_size,
            seed: derive_seed(self.seed, SALT_INIT + party as u64),
            ..self.architectures[party].clone()
        }
    }

    pub fn data_seed(&self, party: usize) -> u64 {
        derive_seed(self.seed, SALT_DATA + party as u64)
    }

    pub fn split_seed(&self, party: usize) -> u64 {
        derive_seed(self.seed, SALT_SPLIT + party as u64)
    }

    pub fn sample_seed(&self, fold: usize) -> u64 {
        derive_seed(self.seed, SALT_SAMPLE + fold as u64)
    }

    /// Every seed the run uses, by name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        for (i, p) in self.parties.iter().enumerate() {
            s.insert(format!("data.{}", p.label), self.data_seed(i));
            s.insert(format!("split.{}", p.label), self.split_seed(i));
            s.insert(format!("init.{}", p.label), self.architecture(i).seed);
        }
        s.insert("train".into(), self.train_config().seed);
        s.insert("finetune".into(), self.finetune_config().seed);
        for k in 0..crate::evaluation::FOLDS {
            s.insert(format!("stitch.fold{k}"), self.stitch_config(StitchMethod::Direct, k).seed);
            s.insert(format!("sample.fold{k}"), self.sample_seed(k));
        }
        s
    }
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

/// The collaboration approaches a scenario can run, with parties given by
/// index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Approach {
    /// A network trained on one party's data only.
    Basis { party: usize },
    /// A party's network fine-tuned on the other party's data.
    FineTune { from: usize, to: usize },
    /// Mean prediction of both basis networks.
    Ensemble,
    /// Ensemble of `target`'s basis network and the other network
    /// fine-tuned on `target`'s data.
    EnsembleFineTuned { target: usize },
    Federated,
    Merged,
    /// Stitch-ensembles trained, enumerated and selected from `perspective`.
    Stitch { method: StitchMethod, perspective: usize },
    /// Randomly stitched networks at increasing stitch counts.
    Robustness { method: StitchMethod, perspective: usize },
}

fn method_tag(m: StitchMethod) -> &'static str {
    match m {
        StitchMethod::Direct => "direct",
        StitchMethod::DoubleBatched => "db",
    }
}

impl Approach {
    /// Every approach of a scenario.
    pub fn all() -> Vec<Approach> {
        let mut v = vec![
            Approach::Basis { party: 0 },
            Approach::Basis { party: 1 },
            Approach::FineTune { from: 0, to: 1 },
            Approach::FineTune { from: 1, to: 0 },
            Approach::Ensemble,
            Approach::EnsembleFineTuned { target: 0 },
            Approach::EnsembleFineTuned { target: 1 },
            Approach::Federated,
            Approach::Merged,
        ];
        for perspective in 0..2 {
            for method in [StitchMethod::Direct, StitchMethod::DoubleBatched] {
                v.push(Approach::Stitch { method, perspective });
            }
        }
        for method in [StitchMethod::Direct, StitchMethod::DoubleBatched] {
            v.push(Approach::Robustness { method, perspective: 0 });
        }
        v
    }

    /// Approaches whose artifacts this one loads rather than trains.
    pub fn prerequisites(&self) -> Vec<Approach> {
        let both = vec![Approach::Basis { party: 0 }, Approach::Basis { party: 1 }];
        match *self {
            Approach::Basis { .. } | Approach::Federated | Approach::Merged => vec![],
            Approach::FineTune { from, .. } => vec![Approach::Basis { party: from }],
            Approach::EnsembleFineTuned { target } => {
                vec![Approach::Basis { party: target }, Approach::FineTune { from: 1 - target, to: target }]
            }
            Approach::Ensemble | Approach::Stitch { .. } | Approach::Robustness { .. } => both,
        }
    }

    /// Shorthand label: `a`, `a→b`, `a&b`, `a&b→a`, `a⇈b`, `a+b`,
    /// `stitch-db@a`, `robust-direct@a`.
    pub fn label(&self, labels: &[&str]) -> String {
        let (a, b) = (labels[0], labels[1]);
        match *self {
            Approach::Basis { party } => labels[party].to_string(),
            Approach::FineTune { from, to } => format!("{}→{}", labels[from], labels[to]),
            Approach::Ensemble => format!("{a}&{b}"),
            Approach::EnsembleFineTuned { target } => format!("{a}&{b}→{}", labels[target]),
            Approach::Federated => format!("{a}⇈{b}"),
            Approach::Merged => format!("{a}+{b}"),
            Approach::Stitch { method, perspective } => format!("stitch-{}@{}", method_tag(method), labels[perspective]),
            Approach::Robustness { method, perspective } => format!("robust-{}@{}", method_tag(method), labels[perspective]),
        }
    }

    /// Parses a label; `->` and `^^` are accepted for `→` and `⇈`.
    pub fn parse(s: &str, labels: &[&str]) -> Result<Approach> {
        let norm = s.trim().replace("->", "→").replace("^^", "⇈");
        Approach::all()
            .into_iter()
            .find(|a| a.label(labels) == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown approach `{s}`")))
    }
}

pub struct ApproachDisplay<'a>(pub Approach, pub &'a [&'a str]);

impl fmt::Display for ApproachDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.label(self.1))
    }
}

/// Everything needed to re-run an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub scenario_hash: String,
    pub scenario: ScenarioConfig,
    pub approaches: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    /// CSV outputs relative to the output root.
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_slice(&text)?;
        let found = m.scenario.hash()?;
        if found != m.scenario_hash {
            return Err(Error::Malformed(format!("manifest hash {} does not match its scenario ({found})", m.scenario_hash)));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleDocument {
    id: usize,
    group: Option<usize>,
    image: Vec<f32>,
    mask: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    owner: String,
    channels: usize,
    size: usize,
    samples: Vec<SampleDocument>,
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let doc = DatasetDocument {
        owner: d.owner.clone(),
        channels: d.channels,
        size: d.size,
        samples: d
            .samples
            .iter()
            .map(|s| SampleDocument {
                id: s.id,
                group: s.group,
                image: s.image.data().to_vec(),
                mask: s.mask.clone(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec(&doc)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: DatasetDocument = serde_json::from_slice(&text)?;
    let samples = doc
        .samples
        .into_iter()
        .map(|s| {
            Ok(Sample {
                id: s.id,
                group: s.group,
                image: Tensor::new(vec![doc.channels, doc.size, doc.size], s.image)?,
                mask: s.mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        owner: doc.owner,
        channels: doc.channels,
        size: doc.size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_is_valid_and_round_trips_through_toml() {
        let s = ScenarioConfig::default();
        s.validate().unwrap();
        let back = ScenarioConfig::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash().unwrap(), s.hash().unwrap());
    }

    #[test]
    fn identical_parties_are_rejected() {
        let mut s = ScenarioConfig::default();
        s.parties[1] = PartySpec { label: "b".into(), samples: 10, ..s.parties[0].clone() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn approach_labels_round_trip() {
        let labels = ["a", "b"];
        for a in Approach::all() {
            assert_eq!(Approach::parse(&a.label(&labels), &labels).unwrap(), a);
        }
        assert_eq!(Approach::parse("a->b", &labels).unwrap(), Approach::FineTune { from: 0, to: 1 });
        assert_eq!(Approach::parse("a^^b", &labels).unwrap(), Approach::Federated);
        assert!(Approach::parse("c", &labels).is_err());
    }

    #[test]
    fn prerequisites_sort_first() {
        for a in Approach::all() {
            for p in a.prerequisites() {
                assert!(p < a, "{p:?} must run before {a:?}");
                assert!(Approach::all().contains(&p));
            }
        }
        assert!(Approach::Federated.prerequisites().is_empty());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ScenarioConfig::default();
        let b = ScenarioConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.seeds(), b.seeds());
    }

    #[test]
    fn robustness_counts_default_to_quartiles() {
        let r = RobustnessConfig::default();
        assert_eq!(r.counts_for(20), vec![0, 5, 10, 15, 20]);
        assert_eq!(r.counts_for(0), vec![0]);
    }

    #[test]
    fn datasets_round_trip() {
        let d = super::super::generate_synthetic_party(&PartySpec { samples: 3, ..PartySpec::default() }, 8, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }
}
