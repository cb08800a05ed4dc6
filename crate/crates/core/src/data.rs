//! Segmentation samples, per-split views and the data-access audit.

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[channels, size, size]`.
    pub image: Tensor,
    /// Row-major binary foreground mask.
    pub mask: Vec<u8>,
    /// Source video for near-duplicate frames.
    pub group: Option<usize>,
}

/// Binary segmentation dataset owned by one party.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub owner: String,
    pub channels: usize,
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sizes of the groups in order of first appearance, if every sample is
    /// grouped.
    pub fn group_sizes(&self) -> Option<Vec<(usize, usize)>> {
        let mut sizes: Vec<(usize, usize)> = Vec::new();
        for s in &self.samples {
            let g = s.group?;
            match sizes.iter_mut().find(|(id, _)| *id == g) {
                Some(e) => e.1 += 1,
                None => sizes.push((g, 1)),
            }
        }
        Some(sizes)
    }

    /// Images of `indices` as `[n, channels, size, size]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let items = indices
            .iter()
            .map(|&i| self.sample(i).map(|s| &s.image))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// One-hot `[n, 2, size, size]` targets (background, foreground).
    pub fn targets(&self, indices: &[usize]) -> Result<Tensor> {
        let plane = self.size * self.size;
        let mut t = Tensor::zeros(&[indices.len(), 2, self.size, self.size]);
        for (k, &i) in indices.iter().enumerate() {
            let mask = &self.sample(i)?.mask;
            let d = t.data_mut();
            for (q, &m) in mask.iter().enumerate() {
                d[(2 * k + usize::from(m > 0)) * plane + q] = 1.0;
            }
        }
        Ok(t)
    }

    pub fn sample(&self, i: usize) -> Result<&Sample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("sample {i} of `{}`", self.owner)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Training,
    StitchTraining,
    Selection,
    Evaluation,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AccessRecord {
    pub actor: String,
    pub owner: String,
    pub sample: usize,
    pub split: SplitKind,
    pub purpose: Purpose,
}

/// Log of every raw-sample read made through a [`DataView`].
#[derive(Debug, Default)]
pub struct AccessAudit {
    records: Mutex<BTreeSet<AccessRecord>>,
}

impl AccessAudit {
    pub fn new() -> Self {
        AccessAudit::default()
    }

    fn log(&self, r: AccessRecord) {
        self.records.lock().expect("audit lock").insert(r);
    }

    /// Distinct records, sorted.
    pub fn records(&self) -> Vec<AccessRecord> {
        self.records.lock().expect("audit lock").iter().cloned().collect()
    }

    /// Test-split reads made for training or selection.
    pub fn test_leaks(&self) -> Vec<AccessRecord> {
        self.records()
            .into_iter()
            .filter(|r| r.split == SplitKind::Test && r.purpose != Purpose::Evaluation)
            .collect()
    }

    /// Reads of another party's samples by `actor` for anything other than
    /// evaluation.
    pub fn cross_party_reads(&self, actor: &str) -> Vec<AccessRecord> {
        self.records()
            .into_iter()
            .filter(|r| r.actor == actor && r.owner != actor && r.purpose != Purpose::Evaluation)
            .collect()
    }
}

/// A subset of one dataset, read on behalf of an actor for a purpose.
#[derive(Clone, Copy)]
pub struct Accessor<'a> {
    pub audit: &'a AccessAudit,
    pub actor: &'a str,
    pub purpose: Purpose,
}

#[derive(Clone)]
pub struct DataView<'a> {
    pub data: &'a Dataset,
    pub indices: Vec<usize>,
    pub split: SplitKind,
    pub access: Option<Accessor<'a>>,
}

impl<'a> DataView<'a> {
    pub fn new(data: &'a Dataset, indices: Vec<usize>, split: SplitKind) -> Self {
        DataView {
            data,
            indices,
            split,
            access: None,
        }
    }

    pub fn all(data: &'a Dataset) -> Self {
        DataView::new(data, (0..data.len()).collect(), SplitKind::Train)
    }

    pub fn audited(mut self, access: Accessor<'a>) -> Self {
        self.access = Some(access);
        self
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn resolve(&self, positions: &[usize]) -> Result<Vec<usize>> {
        let idx = positions
            .iter()
            .map(|&p| {
                self.indices
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::OutOfRange(format!("position {p} of a {}-sample view", self.indices.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(a) = &self.access {
            for &i in &idx {
                a.audit.log(AccessRecord {
                    actor: a.actor.to_string(),
                    owner: self.data.owner.clone(),
                    sample: self.data.sample(i)?.id,
                    split: self.split,
                    purpose: a.purpose,
                });
            }
        }
        Ok(idx)
    }

    /// Images at view positions.
    pub fn images(&self, positions: &[usize]) -> Result<Tensor> {
        self.data.images(&self.resolve(positions)?)
    }

    /// Images and one-hot targets at view positions.
    pub fn batch(&self, positions: &[usize]) -> Result<(Tensor, Tensor)> {
        let idx = self.resolve(positions)?;
        Ok((self.data.images(&idx)?, self.data.targets(&idx)?))
    }

    /// Sample ids and masks at view positions.
    pub fn masks(&self, positions: &[usize]) -> Result<Vec<(usize, &'a [u8])>> {
        let idx = self.resolve(positions)?;
        let data = self.data;
        idx.iter()
            .map(|&i| data.sample(i).map(|s| (s.id, s.mask.as_slice())))
            .collect()
    }
}
