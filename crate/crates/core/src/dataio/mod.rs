//! Signal corpora: the in-memory types, the binary container, train/test
//! splitting, excerpt windowing and a synthetic generator.

mod container;
mod split;
mod synthetic;
mod window;

use std::collections::{BTreeMap, BTreeSet};

pub use container::{container_size, read_corpus, write_corpus, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use split::{grouped_split, holdout_classes, Holdout, SplitPlan};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpusConfig};
pub use window::{window_excerpts, window_starts, Window};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One recorded signal, `timesteps x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSample {
    pub signal: Matrix,
    pub class_id: usize,
    pub subject_id: u32,
    pub image_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    samples: Vec<EegSample>,
    num_classes: usize,
    num_subjects: usize,
}

impl Corpus {
    pub fn new(samples: Vec<EegSample>, num_classes: usize, num_subjects: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "sample (image {}, subject {}) has class {} >= {num_classes}",
                    s.image_id, s.subject_id, s.class_id
                )));
            }
            if !seen.insert((s.image_id, s.subject_id)) {
                return Err(Error::Validation(format!(
                    "duplicate sample for image {} subject {}",
                    s.image_id, s.subject_id
                )));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            num_subjects,
        })
    }

    /// Derives class and subject counts from the largest ids present.
    pub fn from_samples(samples: Vec<EegSample>) -> Result<Self> {
        let num_classes = samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0);
        let num_subjects = samples.iter().map(|s| s.subject_id as usize + 1).max().unwrap_or(0);
        Self::new(samples, num_classes, num_subjects)
    }

    pub fn samples(&self) -> &[EegSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_subjects(&self) -> usize {
        self.num_subjects
    }

    /// Channel count shared by every sample, if any.
    pub fn channels(&self) -> Option<usize> {
        let c = self.samples.first()?.signal.cols();
        self.samples.iter().all(|s| s.signal.cols() == c).then_some(c)
    }

    pub fn image_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.image_id).collect()
    }

    /// Class of every image. Fails if an image appears under two classes.
    pub fn image_classes(&self) -> Result<BTreeMap<u32, usize>> {
        let mut map = BTreeMap::new();
        for s in &self.samples {
            if let Some(prev) = map.insert(s.image_id, s.class_id) {
                if prev != s.class_id {
                    return Err(Error::Validation(format!(
                        "image {} labelled with classes {prev} and {}",
                        s.image_id, s.class_id
                    )));
                }
            }
        }
        Ok(map)
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Samples whose image is in `ids`, with the same class/subject counts.
    pub fn select_images(&self, ids: &BTreeSet<u32>) -> Corpus {
        Corpus {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.image_id))
                .cloned()
                .collect(),
            num_classes: self.num_classes,
            num_subjects: self.num_subjects,
        }
    }
}
