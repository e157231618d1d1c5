//! Reusing a trained stack on classes it never saw: sequence features, kNN
//! and linear SVM classifiers, and majority voting over signal excerpts.

mod knn;
mod svm;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use knn::{knn_classify, KnnPrediction};
pub use svm::{linear_svm_train, LinearSvm, SvmConfig};

use crate::dataio::{grouped_split, window_excerpts, window_starts, Corpus, Window};
use crate::error::{Error, Result};
use crate::recurrent::{LstmStack, StackConfig};
use crate::teacher::PosteriorTable;
use crate::trainer::{fit, Mode, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub class_id: usize,
    pub image_id: u32,
    pub subject_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub vectors: Vec<FeatureVector>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, v: FeatureVector) -> Result<()> {
        if v.values.len() != self.dim {
            return Err(Error::shape(format!(
                "feature vector has {} values, set dimension is {}",
                v.values.len(),
                self.dim
            )));
        }
        self.vectors.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.vectors.iter().map(|v| v.class_id).collect()
    }

    /// One line per vector: image, subject, class, then the values, all
    /// tab-separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for v in &self.vectors {
            write!(s, "{}\t{}\t{}", v.image_id, v.subject_id, v.class_id).unwrap();
            for x in &v.values {
                write!(s, "\t{x}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Final-layer features with dropout off: one vector per sample, or one per
/// excerpt when a window is given (labels inherited from the parent sample,
/// excerpts in time order).
pub fn extract_features(corpus: &Corpus, stack: &LstmStack, window: Option<Window>) -> Result<FeatureSet> {
    let per_sample: Vec<Vec<FeatureVector>> = corpus
        .samples()
        .par_iter()
        .map(|s| {
            let signals = match window {
                None => vec![s.signal.clone()],
                Some(w) => window_excerpts(&s.signal, w.width, w.stride)?,
            };
            signals
                .iter()
                .map(|x| {
                    let (_, values) = stack.infer(x)?;
                    Ok(FeatureVector {
                        values,
                        class_id: s.class_id,
                        image_id: s.image_id,
                        subject_id: s.subject_id,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut set = FeatureSet::new(stack.feature_dim());
    for v in per_sample.into_iter().flatten() {
        set.push(v)?;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VotingPolicy {
    /// Ties go to the class with the larger summed score, then the lower id.
    #[default]
    SummedProbability,
    LowestClassId,
}

/// Most frequent class among excerpt predictions. Score vectors are indexed
/// by class id; a missing entry counts as 0.
pub fn majority_vote(predictions: &[(usize, Vec<f64>)], policy: VotingPolicy) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::domain("cannot vote over zero predictions"));
    }
    let n = predictions.iter().map(|(c, _)| c + 1).max().expect("non-empty");
    let mut counts = vec![0usize; n];
    let mut mass = vec![0.0f64; n];
    for (c, scores) in predictions {
        counts[*c] += 1;
        for (m, s) in mass.iter_mut().zip(scores) {
            *m += s;
        }
    }
    let best = *counts.iter().max().expect("non-empty");
    let tied = (0..n).filter(|&c| counts[c] == best);
    Ok(match policy {
        VotingPolicy::LowestClassId => tied.min(),
        VotingPolicy::SummedProbability => tied.min_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b))),
    }
    .expect("some class has the top count"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classifier {
    Knn { k: usize },
    Svm(SvmConfig),
}

impl Classifier {
    pub fn name(&self) -> &'static str {
        match self {
            Classifier::Knn { .. } => "knn",
            Classifier::Svm(_) => "svm",
        }
    }
}

enum Fitted {
    Constant(usize),
    Knn(FeatureSet, usize),
    Svm(LinearSvm),
}

impl Fitted {
    fn fit(classifier: &Classifier, train: &FeatureSet) -> Result<Self> {
        let classes = train.classes();
        if classes.len() == 1 {
            return Ok(Fitted::Constant(*classes.first().expect("one class")));
        }
        Ok(match classifier {
            Classifier::Knn { k } => Fitted::Knn(train.clone(), *k),
            Classifier::Svm(cfg) => Fitted::Svm(linear_svm_train(train, cfg)?),
        })
    }

    fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        match self {
            Fitted::Constant(c) => {
                let mut scores = vec![0.0; c + 1];
                scores[*c] = 1.0;
                Ok((*c, scores))
            }
            Fitted::Knn(train, k) => {
                let p = knn_classify(train, x, *k)?;
                Ok((p.class, p.scores()))
            }
            Fitted::Svm(m) => Ok((m.predict(x)?, m.class_probabilities(x)?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnseenConfig {
    /// Architecture of the student; class and channel counts are taken from
    /// the seen corpus.
    pub stack: StackConfig,
    pub init_seed: u64,
    /// The mode is forced to unsupervised distillation.
    pub train: TrainConfig,
    pub window: Window,
    /// Fraction of unseen images whose signals are labelled for the
    /// classifier; the rest are evaluated.
    pub labelled_fraction: f64,
    pub split_seed: u64,
    pub classifiers: Vec<Classifier>,
    pub voting: VotingPolicy,
}

#[derive(Debug, Clone)]
pub struct UnseenReport {
    /// Signal-level accuracy per classifier, in configuration order.
    pub accuracies: Vec<(Classifier, f64)>,
    pub labelled_signals: usize,
    pub eval_signals: usize,
    pub feature_dim: usize,
    pub train_log: TrainLog,
}

/// Unsupervised distillation on `seen`, then excerpt-level classification of
/// `unseen` signals with per-signal majority voting. `posteriors` must be
/// expressed over the seen classes (see [`PosteriorTable::restrict`]).
pub fn unseen_category_eval(
    seen: &Corpus,
    unseen: &Corpus,
    posteriors: &PosteriorTable,
    cfg: &UnseenConfig,
) -> Result<UnseenReport> {
    if cfg.classifiers.is_empty() {
        return Err(Error::domain("no classifier requested"));
    }
    let channels = seen
        .channels()
        .ok_or_else(|| Error::Data("seen corpus is empty or has mixed channel counts".into()))?;
    let stack_cfg = StackConfig {
        num_classes: seen.num_classes(),
        input_channels: channels,
        ..cfg.stack
    };
    let train_cfg = TrainConfig {
        mode: Mode::UnsupervisedKd,
        ..cfg.train
    };
    let stack = LstmStack::init(stack_cfg, cfg.init_seed)?;
    let (stack, train_log) = fit(seen, Some(posteriors), stack, &train_cfg, None)?;

    let plan = grouped_split(unseen, cfg.labelled_fraction, cfg.split_seed)?;
    let (labelled, eval) = plan.apply(unseen);
    let labelled_features = extract_features(&labelled, &stack, Some(cfg.window))?;
    let eval_features = extract_features(&eval, &stack, Some(cfg.window))?;

    // Excerpts of one signal are contiguous and in time order.
    let counts = eval
        .samples()
        .iter()
        .map(|s| Ok(window_starts(s.signal.rows(), cfg.window.width, cfg.window.stride)?.len()))
        .collect::<Result<Vec<_>>>()?;
    let mut accuracies = Vec::with_capacity(cfg.classifiers.len());
    for classifier in &cfg.classifiers {
        let model = Fitted::fit(classifier, &labelled_features)?;
        let mut hits = 0usize;
        let mut at = 0;
        for (sample, &n) in eval.samples().iter().zip(&counts) {
            let excerpts = &eval_features.vectors[at..at + n];
            at += n;
            let votes = excerpts
                .iter()
                .map(|v| model.predict(&v.values))
                .collect::<Result<Vec<_>>>()?;
            hits += usize::from(majority_vote(&votes, cfg.voting)? == sample.class_id);
        }
        accuracies.push((*classifier, hits as f64 / eval.len() as f64));
    }
    Ok(UnseenReport {
        accuracies,
        labelled_signals: labelled.len(),
        eval_signals: eval.len(),
        feature_dim: stack.feature_dim(),
        train_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_corpus, holdout_classes, SyntheticCorpusConfig};
    use crate::teacher::{SyntheticTeacher, SyntheticTeacherConfig};

    fn stack(hidden: usize, bidirectional: bool) -> LstmStack {
        LstmStack::init(
            StackConfig {
                depth: 1,
                hidden,
                bidirectional,
                recurrent_dropout: 0.5,
                num_classes: 3,
                input_channels: 2,
            },
            1,
        )
        .unwrap()
    }

    fn corpus(timesteps: usize) -> Corpus {
        generate_synthetic_corpus(&SyntheticCorpusConfig {
            num_classes: 3,
            images_per_class: 2,
            subjects: 2,
            timesteps,
            channels: 2,
            noise_sigma: 0.1,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn feature_dimension_law() {
        for hidden in [32, 64, 128, 256] {
            assert_eq!(stack(hidden, true).feature_dim(), 2 * hidden);
            assert_eq!(stack(hidden, false).feature_dim(), hidden);
        }
        let c = corpus(6);
        let f = extract_features(&c, &stack(4, true), None).unwrap();
        assert_eq!(f.dim, 8);
        assert_eq!(f.len(), c.len());
    }

    #[test]
    fn windowed_extraction_counts_and_labels() {
        let c = corpus(440);
        let f = extract_features(&c, &stack(3, true), Some(Window::default())).unwrap();
        assert_eq!(f.len(), 4 * c.len());
        for (s, group) in c.samples().iter().zip(f.vectors.chunks(4)) {
            assert!(group.iter().all(|v| v.image_id == s.image_id && v.class_id == s.class_id));
        }
    }

    #[test]
    fn extraction_is_independent_of_batch() {
        let c = corpus(9);
        let s = stack(4, true);
        let all = extract_features(&c, &s, None).unwrap();
        for (i, sample) in c.samples().iter().enumerate() {
            let alone = Corpus::from_samples(vec![sample.clone()]).unwrap();
            let one = extract_features(&alone, &s, None).unwrap();
            assert_eq!(one.vectors[0], all.vectors[i]);
        }
    }

    #[test]
    fn extraction_shape_error() {
        let c = corpus(6);
        let wrong = LstmStack::init(StackConfig { input_channels: 5, ..*stack(2, true).config() }, 0).unwrap();
        assert!(matches!(extract_features(&c, &wrong, None), Err(Error::Shape(_))));
    }

    #[test]
    fn tsv_layout() {
        let mut f = FeatureSet::new(2);
        f.push(FeatureVector { values: vec![0.5, -1.0], class_id: 3, image_id: 7, subject_id: 1 }).unwrap();
        assert_eq!(f.to_tsv(), "7\t1\t3\t0.5\t-1\n");
        assert!(f.push(FeatureVector { values: vec![1.0], class_id: 0, image_id: 0, subject_id: 0 }).is_err());
    }

    #[test]
    fn vote_examples() {
        let p = |c: usize, s: Vec<f64>| (c, s);
        let v = vec![p(0, vec![0.9, 0.1]), p(0, vec![0.6, 0.4]), p(1, vec![0.2, 0.8])];
        assert_eq!(majority_vote(&v, VotingPolicy::default()).unwrap(), 0);
        let tie = vec![p(0, vec![0.7, 0.3]), p(1, vec![0.4, 0.6]), p(0, vec![0.6, 0.4]), p(1, vec![0.1, 0.9])];
        // Two votes each; summed mass 1.8 for class 0, 2.2 for class 1.
        assert_eq!(majority_vote(&tie, VotingPolicy::SummedProbability).unwrap(), 1);
        assert_eq!(majority_vote(&tie, VotingPolicy::LowestClassId).unwrap(), 0);
        assert!(matches!(majority_vote(&[], VotingPolicy::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn vote_tie_by_summed_score() {
        // Two votes each; total score mass 1.3 for A (class 0) and 1.2 for B.
        let v = vec![
            (0, vec![0.7, 0.0]),
            (1, vec![0.0, 0.6]),
            (0, vec![0.6, 0.0]),
            (1, vec![0.0, 0.6]),
        ];
        assert_eq!(majority_vote(&v, VotingPolicy::SummedProbability).unwrap(), 0);
        let v = vec![(0, vec![0.5, 0.0]), (1, vec![0.0, 0.6])];
        assert_eq!(majority_vote(&v, VotingPolicy::SummedProbability).unwrap(), 1);
    }

    #[test]
    fn single_unseen_class_is_degenerate() {
        let c = generate_synthetic_corpus(&SyntheticCorpusConfig {
            num_classes: 3,
            images_per_class: 4,
            subjects: 1,
            timesteps: 8,
            channels: 2,
            noise_sigma: 0.1,
            seed: 2,
        })
        .unwrap();
        let h = holdout_classes(&c, &[2]).unwrap();
        let teacher = SyntheticTeacher::new(SyntheticTeacherConfig {
            num_classes: 3,
            fidelity: 0.85,
            confusion_temperature: 1.0,
            seed: 0,
        })
        .unwrap();
        let table = teacher.table(c.image_classes().unwrap()).unwrap().restrict(&h.seen_classes).unwrap();
        let cfg = UnseenConfig {
            stack: StackConfig { hidden: 4, depth: 1, ..StackConfig::default() },
            init_seed: 0,
            train: TrainConfig { batch_size: 4, ..TrainConfig::new(Mode::UnsupervisedKd, 2) },
            window: Window { width: 4, stride: 2 },
            labelled_fraction: 0.5,
            split_seed: 0,
            classifiers: vec![Classifier::Knn { k: 3 }, Classifier::Svm(SvmConfig::default())],
            voting: VotingPolicy::default(),
        };
        let r = unseen_category_eval(&h.seen, &h.unseen, &table, &cfg).unwrap();
        assert_eq!(r.accuracies.len(), 2);
        assert!(r.accuracies.iter().all(|(_, a)| *a == 1.0));
        assert_eq!(r.train_log.label_reads, 0);
        assert_eq!(r.labelled_signals + r.eval_signals, 4);
    }
}
