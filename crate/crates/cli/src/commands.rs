use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use eegkd::dataio::{
    generate_synthetic_corpus, grouped_split, holdout_classes, read_corpus, write_corpus, SyntheticCorpusConfig,
};
use eegkd::downstream::{extract_features, unseen_category_eval, Classifier, SvmConfig, UnseenConfig, VotingPolicy};
use eegkd::gradcheck::run_suite;
use eegkd::teacher::{load_posteriors, SyntheticTeacher};
use eegkd::trainer::{evaluate, load_checkpoint, Trainer};
use eegkd::{Corpus, LstmStack, Mode, PosteriorTable, StackConfig, SyntheticTeacherConfig, TrainConfig, TrainLog, Window};
use serde_json::{json, Value};

use crate::args::{
    ClassifierArg, EvalArgs, ExtractArgs, GenSyntheticArgs, GradcheckArgs, OptimArgs, StudentArgs, Subset, TrainArgs,
    UnseenArgs,
};

/// Invalid combination of otherwise well-formed flags; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// What a command read, wrote and found.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub results: Value,
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
}

pub const CORPUS_FILE: &str = "corpus.eegc";
pub const POSTERIORS_FILE: &str = "posteriors.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> Result<Outcome> {
    let cfg = SyntheticCorpusConfig {
        num_classes: a.classes,
        images_per_class: a.images_per_class,
        subjects: a.subjects,
        timesteps: a.timesteps,
        channels: a.channels,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let corpus = generate_synthetic_corpus(&cfg)?;
    let teacher = SyntheticTeacher::new(SyntheticTeacherConfig {
        num_classes: a.classes,
        fidelity: a.fidelity,
        confusion_temperature: a.confusion_temperature,
        seed: a.seed,
    })?;
    let table = teacher.table(corpus.image_classes()?)?;

    create_dir(&a.out)?;
    let corpus_path = a.out.join(CORPUS_FILE);
    let posteriors_path = a.out.join(POSTERIORS_FILE);
    write_corpus(&corpus, &corpus_path)?;
    table.save(&posteriors_path)?;
    println!(
        "wrote {} samples ({} images, {} classes) to {}",
        corpus.len(),
        table.len(),
        corpus.num_classes(),
        corpus_path.display()
    );
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![corpus_path, posteriors_path],
        results: json!({
            "samples": corpus.len(),
            "images": table.len(),
            "clean_rms": cfg.clean_rms()?,
        }),
        seed: Some(a.seed),
        manifest: Some(a.manifest.clone().unwrap_or_else(|| a.out.join(MANIFEST_FILE))),
    })
}

fn stack_config(s: &StudentArgs, corpus: &Corpus) -> Result<StackConfig> {
    let channels = corpus
        .channels()
        .context("corpus is empty or mixes channel counts")?;
    Ok(StackConfig {
        depth: s.depth,
        hidden: s.hidden,
        bidirectional: s.bidirectional,
        recurrent_dropout: s.dropout,
        num_classes: corpus.num_classes(),
        input_channels: channels,
    })
}

fn train_config(mode: Mode, o: &OptimArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        batch_size: o.batch_size,
        temperature: o.temperature,
        seed: o.seed,
        weight_interpretation: o.weight.into(),
        ..TrainConfig::new(mode, o.epochs)
    }
}

fn log_tsv(log: &TrainLog) -> String {
    let mut s = String::from("epoch\tmean_loss\ttest_accuracy\n");
    for r in &log.epochs {
        let acc = r.test_accuracy.map_or_else(|| "-".to_string(), |a| a.to_string());
        writeln!(s, "{}\t{}\t{}", r.epoch, r.mean_loss, acc).unwrap();
    }
    s
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let mode = Mode::from(a.mode);
    if mode.uses_posteriors() && a.posteriors.is_none() {
        let flag = a.mode.to_possible_value().expect("no skipped variants");
        return Err(UsageError(format!("--mode {} needs --posteriors", flag.get_name())).into());
    }
    let corpus = load_corpus(&a.corpus)?;
    let mut inputs = vec![a.corpus.clone()];
    let posteriors = match &a.posteriors {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_posteriors(p).with_context(|| format!("reading posteriors {}", p.display()))?)
        }
        None => None,
    };

    let plan = grouped_split(&corpus, a.split_ratio, a.optim.seed)?;
    let (train_set, test_set) = plan.apply(&corpus);
    let stack = LstmStack::init(stack_config(&a.student, &corpus)?, a.optim.seed)?;
    let mut trainer = Trainer::new(stack, train_config(mode, &a.optim))?;
    let table = posteriors.as_ref().filter(|_| mode.uses_posteriors());
    while trainer.epochs_done() < trainer.config().epochs {
        let r = trainer.run_epoch(&train_set, table, Some(&test_set))?;
        eprintln!(
            "epoch {:>3}  loss {:.6}  test {:.4}",
            r.epoch,
            r.mean_loss,
            r.test_accuracy.unwrap_or(f64::NAN)
        );
    }
    let train_accuracy = evaluate(&train_set, trainer.stack())?;
    let test_accuracy = evaluate(&test_set, trainer.stack())?;

    create_dir(&a.out)?;
    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(LOG_FILE);
    trainer.save(&checkpoint)?;
    fs::write(&log_path, log_tsv(trainer.log()))?;
    let log = trainer.log();
    println!("train accuracy {train_accuracy:.6}");
    println!("test accuracy {test_accuracy:.6}");
    println!("label reads {}  posterior reads {}", log.label_reads, log.posterior_reads);
    Ok(Outcome {
        inputs,
        outputs: vec![checkpoint, log_path],
        results: json!({
            "mode": mode.name(),
            "train_images": plan.train_image_ids.len(),
            "test_images": plan.test_image_ids.len(),
            "final_loss": log.final_loss(),
            "train_accuracy": train_accuracy,
            "test_accuracy": test_accuracy,
            "label_reads": log.label_reads,
            "posterior_reads": log.posterior_reads,
        }),
        seed: Some(a.optim.seed),
        manifest: Some(a.manifest.clone().unwrap_or_else(|| a.out.join(MANIFEST_FILE))),
    })
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    let stack = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?
        .stack;
    let corpus = load_corpus(&a.corpus)?;
    let subset = match a.subset {
        Subset::All => corpus,
        side => {
            let (train, test) = grouped_split(&corpus, a.split_ratio, a.seed)?.apply(&corpus);
            if side == Subset::Train {
                train
            } else {
                test
            }
        }
    };
    let accuracy = evaluate(&subset, &stack)?;
    println!("accuracy {accuracy:.6} on {} samples", subset.len());
    Ok(Outcome {
        inputs: vec![a.checkpoint.clone(), a.corpus.clone()],
        outputs: vec![],
        results: json!({ "accuracy": accuracy, "samples": subset.len() }),
        seed: Some(a.seed),
        manifest: a.manifest.clone(),
    })
}

pub fn extract(a: &ExtractArgs) -> Result<Outcome> {
    let stack = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?
        .stack;
    let corpus = load_corpus(&a.corpus)?;
    let window = a.window.zip(a.stride).map(|(width, stride)| Window { width, stride });
    let features = extract_features(&corpus, &stack, window)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    features.write_tsv(&a.out)?;
    println!("wrote {} vectors of width {} to {}", features.len(), features.dim, a.out.display());
    let mut default_manifest = a.out.clone().into_os_string();
    default_manifest.push(".manifest.json");
    Ok(Outcome {
        inputs: vec![a.checkpoint.clone(), a.corpus.clone()],
        outputs: vec![a.out.clone()],
        results: json!({ "vectors": features.len(), "dim": features.dim }),
        seed: None,
        manifest: Some(a.manifest.clone().unwrap_or_else(|| default_manifest.into())),
    })
}

pub fn unseen(a: &UnseenArgs) -> Result<Outcome> {
    let corpus = load_corpus(&a.corpus)?;
    let table: PosteriorTable =
        load_posteriors(&a.posteriors).with_context(|| format!("reading posteriors {}", a.posteriors.display()))?;
    let split = holdout_classes(&corpus, &a.holdout_classes)?;
    let seen_table = table.restrict(&split.seen_classes)?;
    let classifiers = a
        .classifier
        .iter()
        .map(|c| match c {
            ClassifierArg::Knn => Classifier::Knn { k: a.k },
            ClassifierArg::Svm => Classifier::Svm(SvmConfig {
                seed: a.optim.seed,
                ..SvmConfig::default()
            }),
        })
        .collect();
    let cfg = UnseenConfig {
        stack: stack_config(&a.student, &split.seen)?,
        init_seed: a.optim.seed,
        train: train_config(Mode::UnsupervisedKd, &a.optim),
        window: Window {
            width: a.window,
            stride: a.stride,
        },
        labelled_fraction: a.labelled_fraction,
        split_seed: a.optim.seed,
        classifiers,
        voting: VotingPolicy::default(),
    };
    let report = unseen_category_eval(&split.seen, &split.unseen, &seen_table, &cfg)?;
    let mut accuracies = serde_json::Map::new();
    for (c, acc) in &report.accuracies {
        println!("{} accuracy {acc:.6} on {} signals", c.name(), report.eval_signals);
        accuracies.insert(c.name().to_string(), json!(acc));
    }
    Ok(Outcome {
        inputs: vec![a.corpus.clone(), a.posteriors.clone()],
        outputs: vec![],
        results: json!({
            "accuracy": accuracies,
            "seen_classes": split.seen_classes,
            "unseen_classes": split.unseen_classes,
            "labelled_signals": report.labelled_signals,
            "eval_signals": report.eval_signals,
            "feature_dim": report.feature_dim,
            "label_reads": report.train_log.label_reads,
        }),
        seed: Some(a.optim.seed),
        manifest: a.manifest.clone(),
    })
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let reports = run_suite(a.seed, a.eps, a.tolerance)?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        println!(
            "FAIL {}: relative error {:.3e} in {} ({} values)",
            r.label, r.max_rel_error, r.worst_tensor, r.values_checked
        );
    }
    if !failed.is_empty() {
        bail!("{} of {} gradient cases exceed {:e}", failed.len(), reports.len(), a.tolerance);
    }
    println!(
        "all gradients within {:e} ({} cases, worst relative error {worst:.3e})",
        a.tolerance,
        reports.len()
    );
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![],
        results: json!({ "cases": reports.len(), "worst_relative_error": worst }),
        seed: Some(a.seed),
        manifest: a.manifest.clone(),
    })
}
