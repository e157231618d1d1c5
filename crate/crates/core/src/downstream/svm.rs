use rand::seq::SliceRandom;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// L2 regularization strength.
    pub reg: f64,
    pub epochs: usize,
    /// Initial step size; step `t` uses `eta0 / (1 + reg * eta0 * t)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            epochs: 30,
            eta0: 0.1,
            seed: 0,
        }
    }
}

/// One-vs-rest linear model over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Matrix,
    bias: Vec<f64>,
}

impl LinearSvm {
    /// Class ids, in the row order of [`LinearSvm::weights`].
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Margin per class in [`LinearSvm::classes`] order.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        let z = self.standardize(x);
        Ok((0..self.classes.len())
            .map(|c| dot(self.weights.row(c), &z) + self.bias[c])
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.classes[argmax(&self.scores(x)?)])
    }

    /// Scores spread over class ids (absent classes score 0), then softmax,
    /// so they can be summed across excerpts.
    pub fn class_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let scores = self.scores(x)?;
        let n = self.classes.iter().max().map_or(0, |m| m + 1);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let mut out = vec![0.0; n];
        for (&c, e) in self.classes.iter().zip(exp) {
            out[c] = e / total;
        }
        Ok(out)
    }

    pub fn accuracy(&self, set: &FeatureSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::domain("cannot score an empty feature set"));
        }
        let mut hits = 0usize;
        for v in &set.vectors {
            hits += usize::from(self.predict(&v.values)? == v.class_id);
        }
        Ok(hits as f64 / set.len() as f64)
    }
}

/// Hinge loss plus `reg/2 * ||w||^2` per class, minimized by stochastic
/// subgradient descent over shuffled passes. The bias is not regularized.
pub fn linear_svm_train(train: &FeatureSet, cfg: &SvmConfig) -> Result<LinearSvm> {
    if !(cfg.reg > 0.0) || !(cfg.eta0 > 0.0) {
        return Err(Error::domain("svm reg and eta0 must be positive"));
    }
    let classes: Vec<usize> = train.classes().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::domain(format!(
            "svm needs at least 2 classes, training set has {}",
            classes.len()
        )));
    }
    let d = train.dim;
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for v in &train.vectors {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x / n;
        }
    }
    let mut scale = vec![0.0; d];
    for v in &train.vectors {
        for ((s, x), m) in scale.iter_mut().zip(&v.values).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let mut model = LinearSvm {
        weights: Matrix::zeros(classes.len(), d),
        bias: vec![0.0; classes.len()],
        classes,
        mean,
        scale,
    };
    let data: Vec<Vec<f64>> = train.vectors.iter().map(|v| model.standardize(&v.values)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "svm", &[epoch as u64]));
        for &i in &order {
            t += 1;
            let eta = cfg.eta0 / (1.0 + cfg.reg * cfg.eta0 * t as f64);
            let shrink = 1.0 - eta * cfg.reg;
            let x = &data[i];
            let label = train.vectors[i].class_id;
            for (c, &class) in model.classes.iter().enumerate() {
                let y = if class == label { 1.0 } else { -1.0 };
                let w = model.weights.row_mut(c);
                let margin = y * (dot(w, x) + model.bias[c]);
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (wv, xv) in w.iter_mut().zip(x) {
                        *wv += eta * y * xv;
                    }
                    model.bias[c] += eta * y;
                }
            }
        }
    }
    if !model.weights.is_finite() || model.bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric("svm training diverged".into()));
    }
    Ok(model)
}
