//! Multimodal feature-sequence datasets: the on-disk format, a seeded
//! synthetic generator, and batching.
//!
//! A dataset directory holds `manifest.json` plus one binary tensor file per
//! sample and modality, named `<id>.<l|a|v>.bin`.

mod io;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::Modality;

pub use io::{read_dataset, write_dataset, MANIFEST_FILE};
pub use synth::{generate_synthetic, SeqLenRanges, SynthConfig};

/// Feature width of each modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    #[serde(rename = "l")]
    pub language: usize,
    #[serde(rename = "a")]
    pub acoustic: usize,
    #[serde(rename = "v")]
    pub visual: usize,
}

impl FeatureDims {
    pub fn uniform(d: usize) -> Self {
        FeatureDims {
            language: d,
            acoustic: d,
            visual: d,
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Language => self.language,
            Modality::Acoustic => self.acoustic,
            Modality::Visual => self.visual,
        }
    }
}

/// Three feature sequences and a sentiment score.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub label: f64,
    pub language: Tensor,
    pub acoustic: Tensor,
    pub visual: Tensor,
    /// Ground truth for synthetic data only.
    pub planted_primary: Option<Modality>,
}

impl MultimodalSample {
    pub fn sequence(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Language => &self.language,
            Modality::Acoustic => &self.acoustic,
            Modality::Visual => &self.visual,
        }
    }

    pub fn sequence_mut(&mut self, m: Modality) -> &mut Tensor {
        match m {
            Modality::Language => &mut self.language,
            Modality::Acoustic => &mut self.acoustic,
            Modality::Visual => &mut self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub label_range: [f64; 2],
    pub dims: FeatureDims,
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Sample ids in storage order, with their labels.
    pub labels: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub planted_primary: IndexMap<String, Modality>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, label_range: [f64; 2], dims: FeatureDims) -> Self {
        DatasetManifest {
            name: name.into(),
            label_range,
            dims,
            splits: BTreeMap::new(),
            seed: None,
            labels: IndexMap::new(),
            planted_primary: IndexMap::new(),
        }
    }

    /// Checks split disjointness and that every split id has a label.
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.label_range;
        if !(lo < hi) {
            return Err(Error::Dataset(format!("label range [{lo}, {hi}] is empty")));
        }
        let mut seen = HashSet::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Dataset(format!("sample `{id}` appears in more than one split (at `{split}`)")));
                }
                if !self.labels.contains_key(id) {
                    return Err(Error::Dataset(format!("split `{split}` lists unknown sample `{id}`")));
                }
            }
        }
        for (id, &y) in &self.labels {
            if !(lo..=hi).contains(&y) {
                return Err(Error::Dataset(format!("label {y} of `{id}` outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// A loaded dataset with id lookup.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<MultimodalSample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, samples: Vec<MultimodalSample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        for ids in manifest.splits.values() {
            if let Some(missing) = ids.iter().find(|id| !index.contains_key(*id)) {
                return Err(Error::Dataset(format!("split references missing sample `{missing}`")));
            }
        }
        Ok(Dataset {
            manifest,
            samples,
            index,
        })
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let (manifest, samples) = read_dataset(dir)?;
        Dataset::new(manifest, samples)
    }

    pub fn get(&self, id: &str) -> Option<&MultimodalSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Samples of a split in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&MultimodalSample>> {
        let ids = self
            .manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::UnknownSplit(name.to_string()))?;
        Ok(ids.iter().map(|id| &self.samples[self.index[id]]).collect())
    }

    /// Shuffled batches of a split. The order is a pure function of
    /// `(seed, epoch)`; the final partial batch is kept.
    pub fn iterate_batches(
        &self,
        split: &str,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<Vec<&MultimodalSample>>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let mut members = self.split(split)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        members.shuffle(&mut rng);
        Ok(members.chunks(batch_size).map(|c| c.to_vec()).collect())
    }
}
