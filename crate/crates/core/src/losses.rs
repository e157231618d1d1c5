//! Distillation objectives. Every loss returns its value together with the
//! exact gradient with respect to the student's logits.

use crate::error::{Error, Result};
use crate::numerics::softmax_with_temperature;

/// Tolerance on `sum(p) == 1` for probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Student probabilities are clamped to this floor inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// What the teacher says about one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTarget {
    pub posterior: Vec<f64>,
    pub hard_label: Option<usize>,
}

impl TeacherTarget {
    pub fn soft(posterior: Vec<f64>) -> Self {
        Self {
            posterior,
            hard_label: None,
        }
    }

    pub fn with_label(posterior: Vec<f64>, label: usize) -> Self {
        Self {
            posterior,
            hard_label: Some(label),
        }
    }
}

/// How the soft-term weight of the combined objective depends on `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInterpretation {
    /// `(T / 2)^2`
    #[default]
    HalfTSquared,
    /// `T^2 / 2`
    TSquaredOver2,
}

impl WeightInterpretation {
    pub fn weight(self, temperature: f64) -> f64 {
        match self {
            WeightInterpretation::HalfTSquared => (temperature / 2.0).powi(2),
            WeightInterpretation::TSquaredOver2 => temperature * temperature / 2.0,
        }
    }
}

/// Weight on the hard-label term of the combined objectives.
pub const HARD_WEIGHT: f64 = 0.5;

pub fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::domain(format!("{what} is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length {a} vs {b}")));
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj.max(PROB_FLOOR)).ln())
        .sum()
}

/// `sum_j P_j ln(P_j / Q_j)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    check_simplex(p, "P")?;
    check_simplex(q, "Q")?;
    // Rounding can leave a tiny negative value when P == Q.
    Ok(kl_unchecked(p, q).max(0.0))
}

/// Raises the posterior to `1/T` and renormalizes. For a posterior that came
/// out of a softmax this equals re-running that softmax at temperature `T`.
pub fn soften(posterior: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return posterior.to_vec();
    }
    let inv = 1.0 / temperature;
    let max = posterior.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<f64> = posterior
        .iter()
        .map(|&p| if p > 0.0 { (p / max).powf(inv) } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// `KL(soften(posterior, T) || softmax(logits / T))`, gradient `(q - p) / T`.
pub fn distillation_loss(target: &TeacherTarget, logits: &[f64], temperature: f64) -> Result<LossReport> {
    check_temperature(temperature)?;
    check_lengths(target.posterior.len(), logits.len())?;
    check_simplex(&target.posterior, "teacher posterior")?;
    let p = soften(&target.posterior, temperature);
    let q = softmax_with_temperature(logits, temperature)?;
    let value = kl_unchecked(&p, &q).max(0.0);
    let grad_logits = q.iter().zip(&p).map(|(qj, pj)| (qj - pj) / temperature).collect();
    Ok(LossReport { value, grad_logits })
}

/// `-ln softmax(logits)[label]`, gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(label: usize, logits: &[f64]) -> Result<LossReport> {
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let q = softmax_with_temperature(logits, 1.0)?;
    // log-softmax directly, so confident wrong predictions stay finite.
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let value = (lse - logits[label]).max(0.0);
    let mut grad_logits = q;
    grad_logits[label] -= 1.0;
    Ok(LossReport { value, grad_logits })
}

fn weighted(a: f64, ra: &LossReport, b: f64, rb: &LossReport) -> LossReport {
    LossReport {
        value: a * ra.value + b * rb.value,
        grad_logits: ra
            .grad_logits
            .iter()
            .zip(&rb.grad_logits)
            .map(|(x, y)| a * x + b * y)
            .collect(),
    }
}

fn require_label(target: &TeacherTarget) -> Result<usize> {
    target
        .hard_label
        .ok_or_else(|| Error::State("combined loss needs a hard label".into()))
}

/// `w(T) * distillation_loss + 0.5 * cross_entropy`.
pub fn combined_loss(
    target: &TeacherTarget,
    logits: &[f64],
    temperature: f64,
    interpretation: WeightInterpretation,
) -> Result<LossReport> {
    let label = require_label(target)?;
    let soft = distillation_loss(target, logits, temperature)?;
    let hard = cross_entropy(label, logits)?;
    Ok(weighted(interpretation.weight(temperature), &soft, HARD_WEIGHT, &hard))
}

/// `||softmax(logits) - posterior||^2`.
pub fn l2_distillation_loss(target: &TeacherTarget, logits: &[f64]) -> Result<LossReport> {
    check_lengths(target.posterior.len(), logits.len())?;
    check_simplex(&target.posterior, "teacher posterior")?;
    let s = softmax_with_temperature(logits, 1.0)?;
    let r: Vec<f64> = s.iter().zip(&target.posterior).map(|(a, b)| a - b).collect();
    let value = r.iter().map(|v| v * v).sum();
    // d/dz_k = 2 s_k (r_k - <r, s>)
    let rs: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum();
    let grad_logits = s.iter().zip(&r).map(|(sk, rk)| 2.0 * sk * (rk - rs)).collect();
    Ok(LossReport { value, grad_logits })
}

/// `w(T) * l2_distillation_loss + 0.5 * cross_entropy`.
pub fn combined_l2_loss(
    target: &TeacherTarget,
    logits: &[f64],
    temperature: f64,
    interpretation: WeightInterpretation,
) -> Result<LossReport> {
    check_temperature(temperature)?;
    let label = require_label(target)?;
    let soft = l2_distillation_loss(target, logits)?;
    let hard = cross_entropy(label, logits)?;
    Ok(weighted(interpretation.weight(temperature), &soft, HARD_WEIGHT, &hard))
}

/// Mean value and mean gradient over a batch.
pub fn batch_reduce(reports: &[LossReport]) -> Result<LossReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::domain("cannot reduce an empty batch"))?;
    let n = first.grad_logits.len();
    let mut value = 0.0;
    let mut grad_logits = vec![0.0; n];
    for r in reports {
        check_lengths(r.grad_logits.len(), n)?;
        value += r.value;
        for (g, v) in grad_logits.iter_mut().zip(&r.grad_logits) {
            *g += v;
        }
    }
    let scale = 1.0 / reports.len() as f64;
    grad_logits.iter_mut().for_each(|g| *g *= scale);
    Ok(LossReport {
        value: value * scale,
        grad_logits,
    })
}
