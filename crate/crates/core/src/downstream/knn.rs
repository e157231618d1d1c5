use super::FeatureSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPrediction {
    pub class: usize,
    /// Neighbour count per class id, indexed up to the largest training class.
    pub votes: Vec<usize>,
}

impl KnnPrediction {
    /// Vote shares, usable as a score vector for excerpt voting.
    pub fn scores(&self) -> Vec<f64> {
        let k: usize = self.votes.iter().sum();
        self.votes.iter().map(|&v| v as f64 / k as f64).collect()
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive Euclidean k-nearest-neighbour vote. Neighbours are ordered by
/// (distance, training index); a tied vote goes to the class whose
/// neighbours have the smaller mean distance, then to the lower class id.
pub fn knn_classify(train: &FeatureSet, query: &[f64], k: usize) -> Result<KnnPrediction> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if k > train.len() {
        return Err(Error::domain(format!(
            "k = {k} exceeds the {} training vectors",
            train.len()
        )));
    }
    if query.len() != train.dim {
        return Err(Error::shape(format!(
            "query has {} features, training set has {}",
            query.len(),
            train.dim
        )));
    }
    let mut dist: Vec<(f64, usize)> = train
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (squared_distance(&v.values, query), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n_classes = train.vectors.iter().map(|v| v.class_id).max().unwrap_or(0) + 1;
    let mut votes = vec![0usize; n_classes];
    let mut dist_sum = vec![0.0f64; n_classes];
    for &(d, i) in &dist[..k] {
        let c = train.vectors[i].class_id;
        votes[c] += 1;
        dist_sum[c] += d.sqrt();
    }
    let class = (0..n_classes)
        .filter(|&c| votes[c] > 0)
        .min_by(|&a, &b| {
            votes[b]
                .cmp(&votes[a])
                .then((dist_sum[a] / votes[a] as f64).total_cmp(&(dist_sum[b] / votes[b] as f64)))
                .then(a.cmp(&b))
        })
        .expect("k >= 1 neighbours");
    Ok(KnnPrediction { class, votes })
}
