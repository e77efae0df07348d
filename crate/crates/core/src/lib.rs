//! Audio-visual instance discrimination with cross-modal agreement, on
//! synthetic paired-modality data.

pub mod avid_loss;
pub mod cli;
pub mod cma;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod format;
pub mod membank;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use avid_loss::{AvidVariant, LossBreakdown, NceContext};
pub use cma::{AgreementSets, CmaConfig, MiningMethod};
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, FormatError, Result};
pub use eval::{FeatureSource, ProbeConfig, ProbeResult};
pub use membank::{MemoryBank, Modality};
pub use synthdata::{Dataset, DatasetSpec};
pub use trainer::{EpochMetrics, Phase, RunState, TrainConfig};
