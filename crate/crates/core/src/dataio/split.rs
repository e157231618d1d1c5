use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{Corpus, EegSample};
use crate::error::{Error, Result};
use crate::rng;

/// Image-level train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train_image_ids: BTreeSet<u32>,
    pub test_image_ids: BTreeSet<u32>,
    pub ratio: f64,
}

impl SplitPlan {
    pub fn apply(&self, corpus: &Corpus) -> (Corpus, Corpus) {
        (
            corpus.select_images(&self.train_image_ids),
            corpus.select_images(&self.test_image_ids),
        )
    }
}

/// Splits at the image level so all subjects' recordings of an image land on
/// the same side, stratified per class.
pub fn grouped_split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::domain(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (image, class) in corpus.image_classes()? {
        by_class.entry(class).or_default().push(image);
    }
    let mut plan = SplitPlan {
        train_image_ids: BTreeSet::new(),
        test_image_ids: BTreeSet::new(),
        ratio,
    };
    for (class, mut images) in by_class {
        let n = images.len();
        if n < 2 {
            return Err(Error::Split(format!(
                "class {class} has {n} image(s); at least 2 are needed to split"
            )));
        }
        let mut rng = rng::stream(seed, "split", &[class as u64]);
        images.shuffle(&mut rng);
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        plan.train_image_ids.extend(&images[..n_train]);
        plan.test_image_ids.extend(&images[n_train..]);
    }
    Ok(plan)
}

/// Result of [`holdout_classes`]. Both parts are relabelled to contiguous
/// class ids; `*_classes[new_id]` gives the original id.
#[derive(Debug, Clone)]
pub struct Holdout {
    pub seen: Corpus,
    pub unseen: Corpus,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

fn relabel(samples: Vec<EegSample>, classes: &[usize], num_subjects: usize) -> Result<Corpus> {
    let map: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let samples = samples
        .into_iter()
        .map(|mut s| {
            s.class_id = map[&s.class_id];
            s
        })
        .collect();
    Corpus::new(samples, classes.len(), num_subjects)
}

/// Partitions a corpus by class membership.
pub fn holdout_classes(corpus: &Corpus, held_out: &[usize]) -> Result<Holdout> {
    let held: BTreeSet<usize> = held_out.iter().copied().collect();
    if held.is_empty() {
        return Err(Error::domain("no classes to hold out"));
    }
    if let Some(&bad) = held.iter().find(|&&c| c >= corpus.num_classes()) {
        return Err(Error::domain(format!(
            "class {bad} out of range for {} classes",
            corpus.num_classes()
        )));
    }
    if held.len() >= corpus.num_classes() {
        return Err(Error::domain("held-out classes cover every class"));
    }
    let seen_classes: Vec<usize> = (0..corpus.num_classes()).filter(|c| !held.contains(c)).collect();
    let unseen_classes: Vec<usize> = held.into_iter().collect();
    let (unseen, seen): (Vec<_>, Vec<_>) = corpus
        .samples()
        .iter()
        .cloned()
        .partition(|s| unseen_classes.contains(&s.class_id));
    Ok(Holdout {
        seen: relabel(seen, &seen_classes, corpus.num_subjects())?,
        unseen: relabel(unseen, &unseen_classes, corpus.num_subjects())?,
        seen_classes,
        unseen_classes,
    })
}
