use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use eegkd::{Mode, WeightInterpretation};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "eegkd", version, about = "Distil class posteriors into a stacked BLSTM over multichannel signals")]
pub struct Cli {
    /// Worker threads for batch parallelism (results do not depend on it).
    #[arg(long, global = true, value_parser = positive_usize)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus and a synthetic teacher's posteriors for it.
    GenSynthetic(GenSyntheticArgs),
    /// Train a student on a corpus.
    Train(TrainArgs),
    /// Report classification accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Write sequence features of every signal (or excerpt) as TSV.
    Extract(ExtractArgs),
    /// Train without labels on some classes, then classify the held-out ones.
    Unseen(UnseenArgs),
    /// Check every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest and compare its outputs.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Extract(_) => "extract",
            Command::Unseen(_) => "unseen",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }

    /// Points every output of the command into `dir`, keeping file names.
    pub fn redirect(&mut self, dir: &Path) {
        let in_dir = dir.join("manifest.json");
        match self {
            Command::GenSynthetic(a) => {
                a.out = dir.to_path_buf();
                a.manifest = None;
            }
            Command::Train(a) => {
                a.out = dir.to_path_buf();
                a.manifest = None;
            }
            Command::Extract(a) => {
                a.out = dir.join(a.out.file_name().unwrap_or("features.tsv".as_ref()));
                a.manifest = Some(in_dir);
            }
            Command::Eval(EvalArgs { manifest, .. })
            | Command::Unseen(UnseenArgs { manifest, .. })
            | Command::Gradcheck(GradcheckArgs { manifest, .. }) => *manifest = Some(in_dir),
            Command::Replay(_) => {}
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    pub classes: usize,
    #[arg(long, default_value_t = 60, value_parser = positive_usize)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    pub subjects: usize,
    #[arg(long, default_value_t = 64, value_parser = positive_usize)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    pub channels: usize,
    /// Standard deviation of the additive white noise.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true, value_parser = non_negative_f64)]
    pub noise: f64,
    /// Teacher probability on the true class.
    #[arg(long, default_value_t = 0.85, value_parser = fidelity)]
    pub fidelity: f64,
    /// Softmax temperature of the teacher's confusion structure.
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub confusion_temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path [default: <out>/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Supervised,
    Unsupervised,
    Hard,
    L2,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => Mode::SupervisedKd,
            ModeArg::Unsupervised => Mode::UnsupervisedKd,
            ModeArg::Hard => Mode::HardOnly,
            ModeArg::L2 => Mode::L2Kd,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightArg {
    /// (T/2)^2
    HalfTSquared,
    /// T^2/2
    #[value(name = "t-squared-over-2")]
    #[serde(rename = "t-squared-over-2")]
    TSquaredOver2,
}

impl From<WeightArg> for WeightInterpretation {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::HalfTSquared => WeightInterpretation::HalfTSquared,
            WeightArg::TSquaredOver2 => WeightInterpretation::TSquaredOver2,
        }
    }
}

/// Student architecture.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct StudentArgs {
    #[arg(long, default_value_t = 2, value_parser = depth)]
    pub depth: usize,
    #[arg(long, default_value_t = 64, value_parser = positive_usize)]
    pub hidden: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub bidirectional: bool,
    /// Recurrent dropout probability.
    #[arg(long, default_value_t = 0.5, value_parser = dropout)]
    pub dropout: f64,
}

/// Optimisation and objective.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long = "batch", default_value_t = 32, value_parser = positive_usize)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0, value_parser = positive_f64)]
    pub temperature: f64,
    /// Weight on the soft term of the combined objective.
    #[arg(long, value_enum, default_value_t = WeightArg::HalfTSquared)]
    pub weight: WeightArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Supervised)]
    pub mode: ModeArg,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Teacher posterior manifest; required by every mode except `hard`.
    #[arg(long)]
    pub posteriors: Option<PathBuf>,
    #[command(flatten)]
    pub student: StudentArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Fraction of each class's images used for training.
    #[arg(long, default_value_t = 0.7, value_parser = open_unit)]
    pub split_ratio: f64,
    /// Output directory for model.ckpt, train_log.tsv and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path [default: <out>/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluate on one side of the grouped split used by `train`.
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long, default_value_t = 0.7, value_parser = open_unit)]
    pub split_ratio: f64,
    /// Seed of the split (the training seed).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Excerpt width in timesteps; whole signals when omitted.
    #[arg(long, requires = "stride", value_parser = positive_usize)]
    pub window: Option<usize>,
    #[arg(long, requires = "window", value_parser = positive_usize)]
    pub stride: Option<usize>,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path [default: <out>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierArg {
    Knn,
    Svm,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct UnseenArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub posteriors: PathBuf,
    /// Comma-separated class ids kept out of training.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub holdout_classes: Vec<usize>,
    #[arg(long, default_value_t = 32, value_parser = positive_usize)]
    pub window: usize,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub stride: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "knn")]
    pub classifier: Vec<ClassifierArg>,
    /// Neighbours for kNN.
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub k: usize,
    /// Fraction of held-out images whose signals label the classifier.
    #[arg(long, default_value_t = 0.5, value_parser = open_unit)]
    pub labelled_fraction: f64,
    #[command(flatten)]
    pub student: StudentArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = eegkd::gradcheck::DEFAULT_EPS, value_parser = positive_f64)]
    pub eps: f64,
    #[arg(long, default_value_t = eegkd::gradcheck::DEFAULT_TOLERANCE, value_parser = positive_f64)]
    pub tolerance: f64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Directory receiving the replayed outputs.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must not be negative, got {v}"))
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

fn fidelity(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn dropout(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1), got {v}"))
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn depth(s: &str) -> Result<usize, String> {
    let v = positive_usize(s)?;
    if v <= eegkd::recurrent::MAX_DEPTH {
        Ok(v)
    } else {
        Err(format!("must be at most {}, got {v}", eegkd::recurrent::MAX_DEPTH))
    }
}
