//! Knowledge distillation from class posteriors into a stacked bidirectional
//! LSTM over multichannel time series.
//!
//! A teacher (any external classifier, or the synthetic one in [`teacher`])
//! assigns a class posterior to each stimulus. The student, an
//! [`recurrent::LstmStack`], learns to reproduce those posteriors from the
//! recorded signals alone. Once trained, its sequence features can be reused
//! with simple classifiers for classes it never saw ([`downstream`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod dataio;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod recurrent;
pub mod rng;
pub mod teacher;
pub mod trainer;

pub use dataio::{Corpus, EegSample, SplitPlan, Window};
pub use error::{Error, Result};
pub use losses::{LossReport, TeacherTarget, WeightInterpretation};
pub use numerics::Matrix;
pub use recurrent::{LstmStack, StackConfig};
pub use teacher::{PosteriorTable, SyntheticTeacherConfig};

pub use trainer::{Mode, TrainConfig, TrainLog};
