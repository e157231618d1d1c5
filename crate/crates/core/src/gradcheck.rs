//! Central-difference verification of the analytic stack gradients.
//!
//! Each check perturbs one parameter value at a time by `±eps` and re-runs the
//! training-mode forward pass with the same frozen dropout masks. Nothing here
//! touches [`LstmStack::backward`] except the single call that produces the
//! gradients under test.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::losses::{
    combined_l2_loss, combined_loss, cross_entropy, distillation_loss, l2_distillation_loss,
    LossReport, TeacherTarget, WeightInterpretation,
};
use crate::numerics::Matrix;
use crate::recurrent::{DropoutMasks, LstmStack, StackConfig, MAX_DEPTH};
use crate::rng;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely (scaled by the floor), so
/// gradients that are numerically zero do not turn round-off into large
/// relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// The scalar objective composed on top of the logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Distillation { temperature: f64 },
    CrossEntropy,
    Combined { temperature: f64 },
    L2,
    CombinedL2 { temperature: f64 },
}

impl Objective {
    pub fn evaluate(&self, target: &TeacherTarget, logits: &[f64]) -> Result<LossReport> {
        let w = WeightInterpretation::default();
        match *self {
            Objective::Distillation { temperature } => distillation_loss(target, logits, temperature),
            Objective::CrossEntropy => cross_entropy(target.hard_label.unwrap_or(0), logits),
            Objective::Combined { temperature } => combined_loss(target, logits, temperature, w),
            Objective::L2 => l2_distillation_loss(target, logits),
            Objective::CombinedL2 { temperature } => combined_l2_loss(target, logits, temperature, w),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Objective::Distillation { temperature } => format!("kl(T={temperature})"),
            Objective::CrossEntropy => "ce".into(),
            Objective::Combined { temperature } => format!("combined(T={temperature})"),
            Objective::L2 => "l2".into(),
            Objective::CombinedL2 { temperature } => format!("l2+ce(T={temperature})"),
        }
    }

    /// Every objective the trainer can optimize, at the temperatures of interest.
    pub fn suite() -> Vec<Objective> {
        let temps = [1.0, 2.0, 5.0, 10.0];
        let mut out: Vec<Objective> = temps
            .iter()
            .map(|&temperature| Objective::Distillation { temperature })
            .collect();
        out.push(Objective::CrossEntropy);
        out.extend(temps.iter().map(|&temperature| Objective::Combined { temperature }));
        out.push(Objective::L2);
        out.push(Objective::CombinedL2 { temperature: 5.0 });
        out
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub label: String,
    pub values_checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub passed: bool,
}

/// Compares `backward` against central differences for one stack and input.
pub fn check_case(
    stack: &LstmStack,
    signal: &Matrix,
    masks: &DropoutMasks,
    target: &TeacherTarget,
    objective: Objective,
    eps: f64,
    tolerance: f64,
) -> Result<CaseReport> {
    let out = stack.forward_with_masks(signal, masks)?;
    let loss = objective.evaluate(target, &out.logits)?;
    let analytic = stack.backward(&out, &loss.grad_logits)?;

    let loss_at = |s: &LstmStack| -> Result<f64> {
        let o = s.forward_with_masks(signal, masks)?;
        Ok(objective.evaluate(target, &o.logits)?.value)
    };

    let names = stack.params.names();
    let mut probe = stack.clone();
    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        let len = analytic.tensors()[t].data().len();
        for k in 0..len {
            let orig = stack.params.tensors()[t].data()[k];
            probe.params.tensors_mut()[t].data_mut()[k] = orig + eps;
            let plus = loss_at(&probe)?;
            probe.params.tensors_mut()[t].data_mut()[k] = orig - eps;
            let minus = loss_at(&probe)?;
            probe.params.tensors_mut()[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = relative_error(analytic.tensors()[t].data()[k], numeric);
            if e > worst || worst_tensor.is_empty() {
                worst = worst.max(e);
                worst_tensor = name.clone();
            }
            checked += 1;
        }
    }
    let cfg = stack.config();
    Ok(CaseReport {
        label: format!(
            "depth={} {} {}",
            cfg.depth,
            if cfg.bidirectional { "bi" } else { "uni" },
            objective.label()
        ),
        values_checked: checked,
        max_rel_error: worst,
        worst_tensor,
        passed: worst < tolerance,
    })
}

/// A random tiny problem: 3 timesteps, 4 channels, hidden 5, 3 classes.
pub struct TinyProblem {
    pub stack: LstmStack,
    pub signal: Matrix,
    pub masks: DropoutMasks,
    pub target: TeacherTarget,
}

impl TinyProblem {
    pub fn new(depth: usize, bidirectional: bool, seed: u64) -> Result<Self> {
        let config = StackConfig {
            depth,
            hidden: 5,
            bidirectional,
            recurrent_dropout: 0.5,
            num_classes: 3,
            input_channels: 4,
        };
        let mut stack = LstmStack::init(config, seed)?;
        let mut rng = rng::stream(seed, "gradcheck", &[depth as u64, u64::from(bidirectional)]);
        // Non-trivial biases so every gate path carries gradient.
        let jitter = Uniform::new(-0.5, 0.5).expect("valid range");
        for t in stack.params.tensors_mut() {
            if t.rows() == 1 {
                for v in t.data_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
        }
        let signal = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let posterior = raw.into_iter().map(|v| v / sum).collect();
        let label = rng.random_range(0..3);
        // Keep at least one unit alive per direction so the recurrent path is exercised.
        let mut masks = DropoutMasks::sample(&config, seed);
        for attempt in 1u64.. {
            if masks.keep_fraction() > 0.2 {
                break;
            }
            masks = DropoutMasks::sample(&config, seed.wrapping_add(attempt));
        }
        Ok(Self {
            stack,
            signal,
            masks,
            target: TeacherTarget::with_label(posterior, label),
        })
    }

    pub fn check(&self, objective: Objective, eps: f64, tolerance: f64) -> Result<CaseReport> {
        check_case(&self.stack, &self.signal, &self.masks, &self.target, objective, eps, tolerance)
    }
}

/// Depths 1 through 4, uni- and bidirectional, every objective in
/// [`Objective::suite`].
pub fn run_suite(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<CaseReport>> {
    let mut reports = Vec::new();
    for depth in 1..=MAX_DEPTH {
        for bidirectional in [false, true] {
            let problem = TinyProblem::new(depth, bidirectional, seed)?;
            for objective in Objective::suite() {
                reports.push(problem.check(objective, eps, tolerance)?);
            }
        }
    }
    Ok(reports)
}
