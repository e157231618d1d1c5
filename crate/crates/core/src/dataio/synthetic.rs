//! Synthetic multichannel corpus with class-specific oscillatory structure.
//!
//! Each class owns a few sinusoidal components, each with its own frequency,
//! phase and channel mixing. An image perturbs the component phases, a
//! subject scales the whole signal and adds white noise. Every random draw is
//! keyed by `(seed, class | image | subject)` so the corpus does not depend on
//! generation order.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Corpus, EegSample};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

const COMPONENTS: usize = 3;
const MIN_CYCLES: f64 = 1.0;
const MAX_CYCLES: f64 = 6.0;
const IMAGE_PHASE_JITTER: f64 = 0.3;
const GAIN_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCorpusConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub subjects: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

struct Component {
    cycles: f64,
    phase: f64,
    mixing: Vec<f64>,
}

fn class_components(cfg: &SyntheticCorpusConfig, class: usize) -> Vec<Component> {
    let mut rng = rng::stream(cfg.seed, "synthetic.class", &[class as u64]);
    let norm = (COMPONENTS as f64).sqrt();
    (0..COMPONENTS)
        .map(|_| Component {
            cycles: rng.random_range(MIN_CYCLES..MAX_CYCLES),
            phase: rng.random_range(0.0..TAU),
            mixing: (0..cfg.channels)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v / norm
                })
                .collect(),
        })
        .collect()
}

impl SyntheticCorpusConfig {
    /// Root-mean-square amplitude of the noiseless corpus (subject gains
    /// included). Setting `noise_sigma` to this value gives 0 dB SNR.
    pub fn clean_rms(&self) -> Result<f64> {
        let clean = generate_synthetic_corpus(&SyntheticCorpusConfig {
            noise_sigma: 0.0,
            ..*self
        })?;
        let (sum, n) = clean
            .samples()
            .iter()
            .flat_map(|s| s.signal.data())
            .fold((0.0, 0usize), |(a, n), v| (a + v * v, n + 1));
        Ok((sum / n as f64).sqrt())
    }
}

/// Generates `num_classes * images_per_class * subjects` samples. Image ids
/// are `class * images_per_class + i`; values are rounded to `f32`.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    let counts = [
        cfg.num_classes,
        cfg.images_per_class,
        cfg.subjects,
        cfg.timesteps,
        cfg.channels,
    ];
    if counts.contains(&0) {
        return Err(Error::domain("all corpus dimensions must be at least 1"));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::domain(format!("noise sigma must be >= 0, got {}", cfg.noise_sigma)));
    }
    let n_images = cfg.num_classes * cfg.images_per_class;
    if u32::try_from(n_images).is_err() || u32::try_from(cfg.subjects).is_err() {
        return Err(Error::domain("too many images or subjects"));
    }
    let jitter = Normal::new(0.0, IMAGE_PHASE_JITTER).expect("valid jitter");
    let gains: Vec<f64> = (0..cfg.subjects)
        .map(|s| {
            rng::stream(cfg.seed, "synthetic.subject", &[s as u64])
                .random_range(GAIN_RANGE.0..GAIN_RANGE.1)
        })
        .collect();

    let t_len = cfg.timesteps as f64;
    let mut samples = Vec::with_capacity(n_images * cfg.subjects);
    for class in 0..cfg.num_classes {
        let components = class_components(cfg, class);
        for i in 0..cfg.images_per_class {
            let image_id = (class * cfg.images_per_class + i) as u32;
            let mut rng = rng::stream(cfg.seed, "synthetic.image", &[u64::from(image_id)]);
            let phases: Vec<f64> = components
                .iter()
                .map(|c| c.phase + jitter.sample(&mut rng))
                .collect();
            let mut clean = Matrix::zeros(cfg.timesteps, cfg.channels);
            for t in 0..cfg.timesteps {
                let row = clean.row_mut(t);
                for (c, &phase) in components.iter().zip(&phases) {
                    let wave = (TAU * c.cycles * t as f64 / t_len + phase).sin();
                    for (v, &m) in row.iter_mut().zip(&c.mixing) {
                        *v += m * wave;
                    }
                }
            }
            for (subject, &gain) in gains.iter().enumerate() {
                let mut noise_rng = rng::stream(
                    cfg.seed,
                    "synthetic.noise",
                    &[u64::from(image_id), subject as u64],
                );
                let data = clean
                    .data()
                    .iter()
                    .map(|&v| {
                        let n = if cfg.noise_sigma > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut noise_rng);
                            cfg.noise_sigma * z
                        } else {
                            0.0
                        };
                        f64::from((gain * v + n) as f32)
                    })
                    .collect();
                samples.push(EegSample {
                    signal: Matrix::from_vec(cfg.timesteps, cfg.channels, data)?,
                    class_id: class,
                    subject_id: subject as u32,
                    image_id,
                });
            }
        }
    }
    Corpus::new(samples, cfg.num_classes, cfg.subjects)
}
